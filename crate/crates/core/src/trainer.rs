//! SGD-with-momentum training of the two-stream model and target-stream
//! evaluation.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Result, SohotError};
use crate::losses::{full_objective, pooled_softmax_objective, AlignmentConfig, Batch, LossBreakdown, ObjectiveOutput};
use crate::model::{Params, TwoStreamModel};
use crate::tensor::Domain;

/// Where the per-class alignment statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatScope {
    /// One full-batch step per epoch over the whole training splits.
    FullClass,
    /// Class-balanced minibatches; statistics per batch.
    #[default]
    MiniBatch,
}

impl StatScope {
    pub fn as_str(self) -> &'static str {
        match self {
            StatScope::FullClass => "full_class",
            StatScope::MiniBatch => "mini_batch",
        }
    }
}

/// Which objective drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Classifier loss plus alignment.
    #[default]
    Full,
    /// Softmax on pooled source and target features only.
    PooledBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub align: AlignmentConfig,
    pub stat_scope: StatScope,
    pub eval_every: usize,
    /// Keep the first layer of both streams fixed.
    pub freeze_input_layer: bool,
    pub objective: ObjectiveKind,
}

impl TrainConfig {
    pub const DEFAULT_EPOCHS: usize = 200;
    pub const DEFAULT_BATCH: usize = 30;
    pub const DEFAULT_LR: f64 = 0.05;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(align: AlignmentConfig, seed: u64) -> Self {
        Self {
            epochs: Self::DEFAULT_EPOCHS,
            batch_size: Self::DEFAULT_BATCH,
            learning_rate: Self::DEFAULT_LR,
            momentum: Self::DEFAULT_MOMENTUM,
            seed,
            align,
            stat_scope: StatScope::default(),
            eval_every: 10,
            freeze_input_layer: false,
            objective: ObjectiveKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(SohotError::arg("learning rate must be finite and >= 0"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(SohotError::arg("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(SohotError::arg("batch size must be positive"));
        }
        if self.eval_every == 0 {
            return Err(SohotError::arg("eval_every must be positive"));
        }
        self.align.validate()
    }
}

/// Alignment strengths for the synthetic shift benchmark, chosen by
/// cross-validation on seeds 100..110 (disjoint from evaluation seeds).
pub const BENCH_SIGMA1: f64 = 0.03;
pub const BENCH_SIGMA2: f64 = 0.1;
pub const BENCH_ALPHA: f64 = 0.1;

/// Which configuration of the synthetic benchmark to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchVariant {
    /// Pooled softmax, no alignment.
    SourceTarget,
    /// Unweighted second-order alignment.
    So,
    /// Second-order alignment with learned class weights.
    SoWeighted,
}

/// Training settings of the synthetic benchmark. Both streams keep their
/// random first layer fixed and learn the upper layer and the classifier.
pub fn benchmark_config(variant: BenchVariant, num_classes: usize, seed: u64) -> Result<TrainConfig> {
    let weighted = variant == BenchVariant::SoWeighted;
    let mut align = AlignmentConfig::new(num_classes, 2, weighted)?.with_strengths(BENCH_SIGMA1, BENCH_SIGMA2);
    align.alpha1 = BENCH_ALPHA;
    align.alpha2 = BENCH_ALPHA;
    let mut tcfg = TrainConfig::new(align, seed);
    tcfg.freeze_input_layer = true;
    if variant == BenchVariant::SourceTarget {
        tcfg.objective = ObjectiveKind::PooledBaseline;
    }
    Ok(tcfg)
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub target_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,classifier,scatter_align,mean_align,weight_reg,l2_reg,total,target_acc";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            let l = &r.loss;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, l.classifier, l.scatter_align, l.mean_align, l.weight_reg, l.l2_reg, l.total, r.target_acc
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// What the observer sees after every parameter update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub params: &'a Params,
    pub align: &'a AlignmentConfig,
    pub batch_loss: &'a LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TwoStreamModel,
    /// Alignment settings after training, including learned weights.
    pub align: AlignmentConfig,
    pub log: MetricLog,
}

/// Accuracy of the target stream and target classifier on `set`. Ties in
/// the logits go to the smaller class id.
pub fn evaluate(model: &TwoStreamModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(SohotError::EmptyDataset("evaluation set has no samples".into()));
    }
    let preds = predict(model, &set.inputs, Domain::Target)?;
    let hits = preds.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Argmax class for each input column, through the given domain's stream
/// and classifier.
pub fn predict(model: &TwoStreamModel, inputs: &DMatrix<f64>, domain: Domain) -> Result<Vec<usize>> {
    model.check()?;
    if inputs.nrows() != model.input_dim() {
        return Err(SohotError::shape("input dimension does not match the model"));
    }
    let features = model.forward(inputs, domain).features;
    let (w, b) = model.classifier(domain);
    let mut logits = w.transpose() * features;
    for mut col in logits.column_iter_mut() {
        col += b;
    }
    Ok(logits
        .column_iter()
        .map(|col| {
            let mut best = 0;
            for k in 1..col.len() {
                if col[k] > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Indices grouped by class, each group shuffled, then interleaved so that
/// every window of `C` consecutive entries holds one sample per class for
/// as long as each class has samples left.
fn balanced_order(labels: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (j, &y) in labels.iter().enumerate() {
        groups[y].push(j);
    }
    for g in &mut groups {
        g.shuffle(rng);
    }
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for k in 0..longest {
        for g in &groups {
            if let Some(&j) = g.get(k) {
                order.push(j);
            }
        }
    }
    order
}

fn select(set: &LabeledSet, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
    (
        set.inputs.select_columns(idx.iter()),
        idx.iter().map(|&j| set.labels[j]).collect(),
    )
}

fn check_set(set: &LabeledSet, name: &str, model: &TwoStreamModel) -> Result<()> {
    if set.is_empty() {
        return Err(SohotError::EmptyDataset(format!("{name} has no samples")));
    }
    if set.dim() != model.input_dim() {
        return Err(SohotError::shape(format!("{name} dimension does not match the model")));
    }
    if set.inputs.iter().any(|v| !v.is_finite()) {
        return Err(SohotError::arg(format!("{name} contains a non-finite input")));
    }
    if let Some(&y) = set.labels.iter().find(|&&y| y >= model.num_classes) {
        return Err(SohotError::arg(format!(
            "{name} has label {y} but the model has {} classes",
            model.num_classes
        )));
    }
    Ok(())
}

fn objective(
    model: &TwoStreamModel,
    batch: &Batch,
    tcfg: &TrainConfig,
    align: &AlignmentConfig,
) -> Result<ObjectiveOutput> {
    match tcfg.objective {
        ObjectiveKind::Full => full_objective(model, batch, align),
        ObjectiveKind::PooledBaseline => pooled_softmax_objective(model, batch),
    }
}

fn full_batch(source: &LabeledSet, target: &LabeledSet) -> Batch {
    Batch {
        src_inputs: source.inputs.clone(),
        src_labels: source.labels.clone(),
        tgt_inputs: target.inputs.clone(),
        tgt_labels: target.labels.clone(),
    }
}

/// Trains `model` on the labelled source and target sets. The metric log
/// holds the objective over the full training splits and the accuracy on
/// `eval` (the target training set when `eval` is `None`).
pub fn train(
    model: TwoStreamModel,
    source: &LabeledSet,
    target: &LabeledSet,
    eval: Option<&LabeledSet>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(model, source, target, eval, tcfg, |_| {})
}

/// Same as [`train`], calling `observer` after every update.
pub fn train_observed(
    mut model: TwoStreamModel,
    source: &LabeledSet,
    target: &LabeledSet,
    eval: Option<&LabeledSet>,
    tcfg: &TrainConfig,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    model.check()?;
    check_set(source, "source training set", &model)?;
    check_set(target, "target training set", &model)?;
    let eval = eval.unwrap_or(target);
    check_set(eval, "evaluation set", &model)?;
    if tcfg.align.num_classes != model.num_classes {
        return Err(SohotError::arg(
            "alignment config and model disagree on the number of classes",
        ));
    }
    if tcfg.objective == ObjectiveKind::PooledBaseline && model.params.head_tgt.is_some() {
        return Err(SohotError::arg("the pooled baseline needs a single shared classifier"));
    }

    let mut align = tcfg.align.clone();
    let classes = model.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let everything = full_batch(source, target);
    let frozen = model.params.input_layer_ranges();
    let mut velocity = vec![0.0; model.params.len()];
    let weight_len = align.zeta.len() * classes + classes;
    let mut weight_velocity = vec![0.0; weight_len];
    let mut log = MetricLog::default();

    let record = |model: &TwoStreamModel, align: &AlignmentConfig, epoch: usize, log: &mut MetricLog| -> Result<()> {
        let out = objective(model, &everything, tcfg, align)?;
        if !out.breakdown.is_finite() {
            return Err(SohotError::Divergence {
                epoch,
                detail: "non-finite objective on the training splits".into(),
            });
        }
        log.rows.push(MetricRow {
            epoch,
            loss: out.breakdown,
            target_acc: evaluate(model, eval)?,
        });
        Ok(())
    };
    record(&model, &align, 0, &mut log)?;

    let mut tgt_order: Vec<usize> = Vec::new();
    let mut tgt_cursor = 0;
    let tgt_batch = target.len().min(tcfg.batch_size);
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        let batches: Vec<Batch> = match tcfg.stat_scope {
            StatScope::FullClass => vec![everything.clone()],
            StatScope::MiniBatch => {
                let src_order = balanced_order(&source.labels, classes, &mut rng);
                src_order
                    .chunks(tcfg.batch_size)
                    .map(|chunk| {
                        let mut idx = Vec::with_capacity(tgt_batch);
                        while idx.len() < tgt_batch {
                            if tgt_cursor == tgt_order.len() {
                                tgt_order = balanced_order(&target.labels, classes, &mut rng);
                                tgt_cursor = 0;
                            }
                            let take = (tgt_batch - idx.len()).min(tgt_order.len() - tgt_cursor);
                            idx.extend_from_slice(&tgt_order[tgt_cursor..tgt_cursor + take]);
                            tgt_cursor += take;
                        }
                        let (src_inputs, src_labels) = select(source, chunk);
                        let (tgt_inputs, tgt_labels) = select(target, &idx);
                        Batch {
                            src_inputs,
                            src_labels,
                            tgt_inputs,
                            tgt_labels,
                        }
                    })
                    .collect()
            }
        };

        for batch in &batches {
            let out = objective(&model, batch, tcfg, &align)?;
            let mut grad = out.grads.to_flat();
            if !out.breakdown.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(SohotError::Divergence {
                    epoch,
                    detail: format!("non-finite loss or gradient at step {step}"),
                });
            }
            if tcfg.freeze_input_layer {
                for r in frozen.iter().cloned() {
                    grad[r].iter_mut().for_each(|g| *g = 0.0);
                }
            }
            let mut flat = model.params.to_flat();
            for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = tcfg.momentum * *v + g;
                *p -= tcfg.learning_rate * *v;
            }
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(SohotError::Divergence {
                    epoch,
                    detail: format!("non-finite parameter after step {step}"),
                });
            }
            model.params.set_flat(&flat)?;

            if let Some(wg) = &out.weight_grads {
                let g = wg.zeta.iter().flatten().chain(&wg.zeta_bar);
                let z = align.zeta.iter_mut().flatten().chain(align.zeta_bar.iter_mut());
                for ((z, v), g) in z.zip(&mut weight_velocity).zip(g) {
                    *v = tcfg.momentum * *v + g;
                    // The weights stay nonnegative.
                    *z = (*z - tcfg.learning_rate * *v).max(0.0);
                }
            }
            observer(&StepInfo {
                epoch,
                step,
                params: &model.params,
                align: &align,
                batch_loss: &out.breakdown,
            });
            step += 1;
        }

        if epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs {
            record(&model, &align, epoch, &mut log)?;
        }
    }
    Ok(TrainOutcome { model, align, log })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to restore a trained model, plus the training
/// settings it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: TwoStreamModel,
    pub align: AlignmentConfig,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn new(outcome: &TrainOutcome, tcfg: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model: outcome.model.clone(),
            align: outcome.align.clone(),
            train: tcfg.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(SohotError::arg(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.check()?;
        Ok(ck)
    }
}
