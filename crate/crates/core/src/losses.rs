//! Classifier and alignment losses with their closed-form gradients.
//!
//! The alignment term compares, class by class, the scatter tensors and
//! means of the source and target features:
//!
//! * unweighted, order 2:
//!   `σ₁/C Σ_c ||X_c − X*_c||² + σ₂/C Σ_c ||μ_c − μ*_c||²`
//! * weighted, orders `2..=r`:
//!   `σ₁/(rC) Σ_r' Σ_c ζ_cr' ||X_c^(r') − X*_c^(r')||² + σ₂/C Σ_c ζ̄_c ||μ_c − μ*_c||²
//!    + α₁/r Σ_r' ||ζ_r' − 𝟙||² + α₂ ||ζ̄ − 𝟙||²`
//!
//! Scatter distances go through the kernelized Gram blocks unless the
//! explicit path is requested.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SohotError};
use crate::kernel::CenteredPair;
use crate::model::{Params, StreamCache, TargetHead, TwoStreamModel};
use crate::tensor::{check_features, column_mean, compute_scatter, tensor_frob_dist_sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScatterPath {
    #[default]
    Kernelized,
    Explicit,
}

/// Strengths, order and per-class weights of the alignment term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub max_order: usize,
    pub weighted: bool,
    pub num_classes: usize,
    /// `zeta[k][c]` weighs class `c` at order `k + 2`.
    pub zeta: Vec<Vec<f64>>,
    pub zeta_bar: Vec<f64>,
    #[serde(default)]
    pub path: ScatterPath,
}

impl AlignmentConfig {
    pub const DEFAULT_SIGMA1: f64 = 1e-8;
    pub const DEFAULT_SIGMA2: f64 = 1e-5;
    pub const DEFAULT_ALPHA: f64 = 1e-3;

    pub fn new(num_classes: usize, max_order: usize, weighted: bool) -> Result<Self> {
        let cfg = Self {
            sigma1: Self::DEFAULT_SIGMA1,
            sigma2: Self::DEFAULT_SIGMA2,
            alpha1: Self::DEFAULT_ALPHA,
            alpha2: Self::DEFAULT_ALPHA,
            max_order,
            weighted,
            num_classes,
            zeta: vec![vec![1.0; num_classes]; max_order.saturating_sub(1)],
            zeta_bar: vec![1.0; num_classes],
            path: ScatterPath::Kernelized,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_strengths(mut self, sigma1: f64, sigma2: f64) -> Self {
        self.sigma1 = sigma1;
        self.sigma2 = sigma2;
        self
    }

    pub fn orders(&self) -> RangeInclusive<usize> {
        2..=self.max_order
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(SohotError::arg("alignment needs at least one class"));
        }
        if self.max_order < 2 {
            return Err(SohotError::arg("alignment order must be at least 2"));
        }
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SohotError::arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.zeta.len() != self.max_order - 1
            || self.zeta.iter().any(|z| z.len() != self.num_classes)
            || self.zeta_bar.len() != self.num_classes
        {
            return Err(SohotError::shape("alignment weights do not match classes and orders"));
        }
        if self.zeta.iter().flatten().chain(&self.zeta_bar).any(|v| !v.is_finite()) {
            return Err(SohotError::arg("alignment weights must be finite"));
        }
        if !self.weighted && self.zeta.iter().flatten().chain(&self.zeta_bar).any(|&v| v != 1.0) {
            return Err(SohotError::State(
                "unweighted alignment requires all weights equal to one".into(),
            ));
        }
        Ok(())
    }

    pub fn reset_weights(&mut self) {
        self.zeta.iter_mut().flatten().for_each(|z| *z = 1.0);
        self.zeta_bar.iter_mut().for_each(|z| *z = 1.0);
    }

    /// The plain order-2 objective applies; otherwise the weighted
    /// multi-order form (with unit weights when unweighted).
    fn form(&self) -> Form {
        if !self.weighted && self.max_order == 2 {
            Form::Plain
        } else {
            Form::MultiOrder
        }
    }

    fn alignment_off(&self) -> bool {
        self.sigma1 == 0.0 && self.sigma2 == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Plain,
    MultiOrder,
}

/// Additive decomposition of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classifier: f64,
    pub scatter_align: f64,
    pub mean_align: f64,
    pub weight_reg: f64,
    pub l2_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.classifier + self.l2_reg + self.scatter_align + self.mean_align + self.weight_reg;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.classifier,
            self.scatter_align,
            self.mean_align,
            self.weight_reg,
            self.l2_reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Source and target features of one class. Either side may have zero
/// columns, in which case the class is skipped.
#[derive(Debug, Clone, Copy)]
pub struct ClassPair<'a> {
    pub class_id: usize,
    pub src: &'a DMatrix<f64>,
    pub tgt: &'a DMatrix<f64>,
}

/// Alignment value, per-class statistics and (optionally) gradients.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub breakdown: LossBreakdown,
    /// `scatter_dists[k][c]`: squared distance at order `k + 2`.
    pub scatter_dists: Vec<Vec<f64>>,
    pub mean_dists: Vec<f64>,
    /// One entry per input pair, shaped like its `src` / `tgt`.
    pub grad_src: Vec<DMatrix<f64>>,
    pub grad_tgt: Vec<DMatrix<f64>>,
    /// Classes missing from one of the domains.
    pub absent_classes: Vec<usize>,
    /// Classes whose scatter term was skipped for having a single sample.
    pub scatter_skipped: Vec<usize>,
}

/// Weighted alignment if `cfg.weighted` (or `max_order > 2`), plain
/// order-2 alignment otherwise.
pub fn alignment(pairs: &[ClassPair<'_>], cfg: &AlignmentConfig, with_grad: bool) -> Result<AlignmentResult> {
    alignment_impl(pairs, cfg, cfg.form(), with_grad)
}

/// Plain order-2 alignment (`σ₁/C` and `σ₂/C` prefactors, no weights).
pub fn alignment_loss_unweighted(pairs: &[ClassPair<'_>], cfg: &AlignmentConfig) -> Result<LossBreakdown> {
    if cfg.max_order != 2 {
        return Err(SohotError::arg("unweighted alignment is defined for order 2"));
    }
    Ok(alignment_impl(pairs, cfg, Form::Plain, false)?.breakdown)
}

/// Weighted multi-order alignment over orders `2..=cfg.max_order`.
pub fn alignment_loss_weighted(pairs: &[ClassPair<'_>], cfg: &AlignmentConfig) -> Result<LossBreakdown> {
    Ok(alignment_impl(pairs, cfg, Form::MultiOrder, false)?.breakdown)
}

fn alignment_impl(
    pairs: &[ClassPair<'_>],
    cfg: &AlignmentConfig,
    form: Form,
    with_grad: bool,
) -> Result<AlignmentResult> {
    cfg.validate()?;
    let c = cfg.num_classes;
    let c_f = c as f64;
    let r_f = cfg.max_order as f64;
    let mut seen = vec![false; c];
    let mut dim = None;
    for p in pairs {
        if p.class_id >= c {
            return Err(SohotError::arg(format!(
                "class {} out of range for {c} classes",
                p.class_id
            )));
        }
        if std::mem::replace(&mut seen[p.class_id], true) {
            return Err(SohotError::arg(format!("class {} listed twice", p.class_id)));
        }
        for m in [p.src, p.tgt] {
            if m.ncols() > 0 && *dim.get_or_insert(m.nrows()) != m.nrows() {
                return Err(SohotError::shape("class pairs disagree on feature dimension"));
            }
        }
    }

    let n_orders = cfg.max_order - 1;
    let mut out = AlignmentResult {
        breakdown: LossBreakdown::default(),
        scatter_dists: vec![vec![0.0; c]; n_orders],
        mean_dists: vec![0.0; c],
        grad_src: pairs
            .iter()
            .map(|p| DMatrix::zeros(p.src.nrows(), p.src.ncols()))
            .collect(),
        grad_tgt: pairs
            .iter()
            .map(|p| DMatrix::zeros(p.tgt.nrows(), p.tgt.ncols()))
            .collect(),
        absent_classes: Vec::new(),
        scatter_skipped: Vec::new(),
    };

    let scatter_pref = match form {
        Form::Plain => cfg.sigma1 / c_f,
        Form::MultiOrder => cfg.sigma1 / (r_f * c_f),
    };
    let orders: Vec<usize> = match form {
        Form::Plain => vec![2],
        Form::MultiOrder => cfg.orders().collect(),
    };

    let mut order_idx: Vec<usize> = (0..pairs.len()).collect();
    order_idx.sort_by_key(|&i| pairs[i].class_id);

    let mut scatter_total = 0.0;
    let mut mean_total = 0.0;
    for i in order_idx {
        let p = pairs[i];
        let class = p.class_id;
        if p.src.ncols() == 0 || p.tgt.ncols() == 0 {
            out.absent_classes.push(class);
            continue;
        }
        let centered = CenteredPair::new(p.src, p.tgt, cfg.max_order)?;
        let scatter_active = p.src.ncols() > 1 && p.tgt.ncols() > 1;
        if !scatter_active {
            out.scatter_skipped.push(class);
        }

        if scatter_active {
            for &order in &orders {
                let k = order - 2;
                let dist = match cfg.path {
                    ScatterPath::Kernelized => centered.blocks.frob_dist_sq_at(order),
                    ScatterPath::Explicit => {
                        tensor_frob_dist_sq(&compute_scatter(p.src, order)?, &compute_scatter(p.tgt, order)?)?
                    }
                };
                out.scatter_dists[k][class] = dist;
                let weight = match form {
                    Form::Plain => 1.0,
                    Form::MultiOrder => cfg.zeta[k][class],
                };
                scatter_total += scatter_pref * weight * dist;
                let coef = scatter_pref * weight;
                if with_grad && coef != 0.0 {
                    let (gs, gt) = if order == 2 && cfg.path == ScatterPath::Explicit {
                        cov_align_grad(&centered)
                    } else {
                        centered.frob_dist_grad(order)
                    };
                    add_scaled(&mut out.grad_src[i], coef, &gs);
                    add_scaled(&mut out.grad_tgt[i], coef, &gt);
                }
            }
        }

        let diff = &centered.src_mean - &centered.tgt_mean;
        let mdist = diff.norm_squared();
        out.mean_dists[class] = mdist;
        let weight = match form {
            Form::Plain => 1.0,
            Form::MultiOrder => cfg.zeta_bar[class],
        };
        let coef = cfg.sigma2 / c_f * weight;
        mean_total += coef * mdist;
        if with_grad && coef != 0.0 {
            let (gs, gt) = mean_align_grad(&diff, p.src.ncols(), p.tgt.ncols());
            add_scaled(&mut out.grad_src[i], coef, &gs);
            add_scaled(&mut out.grad_tgt[i], coef, &gt);
        }
    }

    let weight_reg = match form {
        Form::Plain => 0.0,
        Form::MultiOrder => weight_regularizer(cfg),
    };
    out.breakdown = LossBreakdown {
        scatter_align: scatter_total,
        mean_align: mean_total,
        weight_reg,
        ..LossBreakdown::default()
    }
    .finish();
    Ok(out)
}

fn add_scaled(dst: &mut DMatrix<f64>, coef: f64, src: &DMatrix<f64>) {
    dst.zip_apply(src, |d, s| *d += coef * s);
}

fn weight_regularizer(cfg: &AlignmentConfig) -> f64 {
    let dev = |v: &[f64]| v.iter().map(|z| (z - 1.0) * (z - 1.0)).sum::<f64>();
    let zeta: f64 = cfg.zeta.iter().map(|z| dev(z)).sum();
    cfg.alpha1 / cfg.max_order as f64 * zeta + cfg.alpha2 * dev(&cfg.zeta_bar)
}

fn cov_align_grad(pair: &CenteredPair) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = pair.src_centered.ncols() as f64;
    let nt = pair.tgt_centered.ncols() as f64;
    let sigma = &pair.src_centered * pair.src_centered.transpose() / n;
    let sigma_t = &pair.tgt_centered * pair.tgt_centered.transpose() / nt;
    let delta = sigma - sigma_t;
    let g_src = &delta * &pair.src_centered * (4.0 / n);
    let g_tgt = &delta * &pair.tgt_centered * (-4.0 / nt);
    (g_src, g_tgt)
}

fn mean_align_grad(diff: &DVector<f64>, n: usize, nt: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let per_src = diff * (2.0 / n as f64);
    let per_tgt = diff * (-2.0 / nt as f64);
    (
        DMatrix::from_fn(diff.len(), n, |i, _| per_src[i]),
        DMatrix::from_fn(diff.len(), nt, |i, _| per_tgt[i]),
    )
}

fn check_pair(src: &DMatrix<f64>, tgt: &DMatrix<f64>) -> Result<()> {
    check_features(src)?;
    check_features(tgt)?;
    if src.nrows() != tgt.nrows() {
        return Err(SohotError::shape(format!(
            "source dimension {} differs from target dimension {}",
            src.nrows(),
            tgt.nrows()
        )));
    }
    Ok(())
}

/// Gradient of `||Σ − Σ*||_F²` through the covariance matrices:
/// `(4/N)(Σ − Σ*)(Φ − μ𝟙ᵀ)` and `−(4/N*)(Σ − Σ*)(Φ* − μ*𝟙ᵀ)`.
pub fn grad_explicit_cov_align(
    src: &DMatrix<f64>,
    tgt: &DMatrix<f64>,
    order: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if order != 2 {
        return Err(SohotError::arg(format!(
            "covariance gradient is defined for order 2, got {order}"
        )));
    }
    Ok(cov_align_grad(&CenteredPair::new(src, tgt, 2)?))
}

/// Gradient of `||μ − μ*||²`: every source column receives `2(μ − μ*)/N`,
/// every target column `−2(μ − μ*)/N*`.
pub fn grad_mean_align(src: &DMatrix<f64>, tgt: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_pair(src, tgt)?;
    let diff = column_mean(src) - column_mean(tgt);
    Ok(mean_align_grad(&diff, src.ncols(), tgt.ncols()))
}

/// Gradient of the kernelized `||X^(r) − X*^(r)||_F²` with respect to both
/// feature matrices.
pub fn grad_kernelized_align(
    src: &DMatrix<f64>,
    tgt: &DMatrix<f64>,
    order: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if order < 2 {
        return Err(SohotError::arg(format!(
            "kernelized gradient needs order >= 2, got {order}"
        )));
    }
    Ok(CenteredPair::new(src, tgt, order)?.frob_dist_grad(order))
}

/// Gradients with respect to the per-class alignment weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrads {
    pub zeta: Vec<Vec<f64>>,
    pub zeta_bar: Vec<f64>,
}

/// `∂/∂ζ_cr' = σ₁/(rC)·dist_cr' + 2α₁/r·(ζ_cr' − 1)` and
/// `∂/∂ζ̄_c = σ₂/C·mdist_c + 2α₂(ζ̄_c − 1)`.
pub fn grad_weights(cfg: &AlignmentConfig, scatter_dists: &[Vec<f64>], mean_dists: &[f64]) -> Result<WeightGrads> {
    if !cfg.weighted {
        return Err(SohotError::State(
            "weight gradients requested for unweighted alignment".into(),
        ));
    }
    cfg.validate()?;
    if scatter_dists.len() != cfg.zeta.len()
        || scatter_dists.iter().any(|d| d.len() != cfg.num_classes)
        || mean_dists.len() != cfg.num_classes
    {
        return Err(SohotError::shape("distance tables do not match classes and orders"));
    }
    let c = cfg.num_classes as f64;
    let r = cfg.max_order as f64;
    let zeta = cfg
        .zeta
        .iter()
        .zip(scatter_dists)
        .map(|(z, d)| {
            z.iter()
                .zip(d)
                .map(|(zc, dc)| cfg.sigma1 / (r * c) * dc + 2.0 * cfg.alpha1 / r * (zc - 1.0))
                .collect()
        })
        .collect();
    let zeta_bar = cfg
        .zeta_bar
        .iter()
        .zip(mean_dists)
        .map(|(zc, dc)| cfg.sigma2 / c * dc + 2.0 * cfg.alpha2 * (zc - 1.0))
        .collect();
    Ok(WeightGrads { zeta, zeta_bar })
}

#[derive(Debug, Clone)]
pub struct SoftmaxOutput {
    pub loss: f64,
    pub grad_w: DMatrix<f64>,
    pub grad_b: DVector<f64>,
    pub grad_features: DMatrix<f64>,
}

/// Mean cross-entropy of the softmax over logits `Wᵀφ + b`.
pub fn softmax_loss_and_grad(
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    features: &DMatrix<f64>,
    labels: &[usize],
) -> Result<SoftmaxOutput> {
    let classes = w.ncols();
    if features.nrows() != w.nrows() || b.len() != classes {
        return Err(SohotError::shape("classifier and feature shapes disagree"));
    }
    if labels.len() != features.ncols() {
        return Err(SohotError::shape("one label per feature column is required"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(SohotError::arg(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let m = features.ncols();
    if m == 0 {
        return Err(SohotError::arg("softmax over an empty batch"));
    }
    let m_f = m as f64;
    let mut logits = w.transpose() * features;
    for mut col in logits.column_iter_mut() {
        col += b;
    }
    let mut loss = 0.0;
    // Becomes (p - onehot) / m in place.
    let mut delta = logits;
    for (j, mut col) in delta.column_iter_mut().enumerate() {
        let (argmax, max) = col.argmax();
        let mut rest = 0.0;
        for (k, v) in col.iter_mut().enumerate() {
            let e = (*v - max).exp();
            if k != argmax {
                rest += e;
            }
            *v = e;
        }
        let label = labels[j];
        let log_z = max + rest.ln_1p();
        let z_label = if label == argmax { max } else { max + col[label].ln() };
        loss += log_z - z_label;
        let total = 1.0 + rest;
        col /= total;
        col[label] -= 1.0;
        col /= m_f;
    }
    let grad_w = features * delta.transpose();
    let mut grad_b = DVector::zeros(classes);
    for col in delta.column_iter() {
        grad_b += col;
    }
    let grad_features = w * &delta;
    Ok(SoftmaxOutput {
        loss: loss / m_f,
        grad_w,
        grad_b,
        grad_features,
    })
}

/// Raw inputs and labels from both domains for one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src_inputs: DMatrix<f64>,
    pub src_labels: Vec<usize>,
    pub tgt_inputs: DMatrix<f64>,
    pub tgt_labels: Vec<usize>,
}

impl Batch {
    fn check(&self, model: &TwoStreamModel) -> Result<()> {
        if self.src_inputs.ncols() == 0 || self.tgt_inputs.ncols() == 0 {
            return Err(SohotError::arg("batch must contain samples from both domains"));
        }
        if self.src_inputs.ncols() != self.src_labels.len() || self.tgt_inputs.ncols() != self.tgt_labels.len() {
            return Err(SohotError::shape("batch labels do not match inputs"));
        }
        if self.src_inputs.nrows() != model.input_dim() || self.tgt_inputs.nrows() != model.input_dim() {
            return Err(SohotError::shape("batch input dimension does not match the model"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub grads: Params,
    pub weight_grads: Option<WeightGrads>,
    pub absent_classes: Vec<usize>,
    pub scatter_skipped: Vec<usize>,
}

/// Gathers the columns of each class.
fn split_by_class(features: &DMatrix<f64>, labels: &[usize], classes: usize) -> (Vec<DMatrix<f64>>, Vec<Vec<usize>>) {
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (j, &y) in labels.iter().enumerate() {
        cols[y].push(j);
    }
    let mats = cols.iter().map(|idx| features.select_columns(idx.iter())).collect();
    (mats, cols)
}

fn scatter_back(target: &mut DMatrix<f64>, grad: &DMatrix<f64>, cols: &[usize]) {
    for (k, &j) in cols.iter().enumerate() {
        let mut dst = target.column_mut(j);
        dst += grad.column(k);
    }
}

struct ClassifierTerms {
    loss: f64,
    l2: f64,
    grad_src_features: DMatrix<f64>,
    grad_tgt_features: DMatrix<f64>,
    grad_w: DMatrix<f64>,
    grad_b: DVector<f64>,
    head_tgt: Option<TargetHead>,
}

fn classifier_terms(
    model: &TwoStreamModel,
    batch: &Batch,
    src: &StreamCache,
    tgt: &StreamCache,
) -> Result<ClassifierTerms> {
    let p = &model.params;
    let cfg = &model.config;
    match &p.head_tgt {
        None => {
            let ns = src.features.ncols();
            let pooled = DMatrix::from_fn(src.features.nrows(), ns + tgt.features.ncols(), |i, j| {
                if j < ns {
                    src.features[(i, j)]
                } else {
                    tgt.features[(i, j - ns)]
                }
            });
            let labels: Vec<usize> = batch.src_labels.iter().chain(&batch.tgt_labels).copied().collect();
            let sm = softmax_loss_and_grad(&p.w, &p.b, &pooled, &labels)?;
            let grad_w = sm.grad_w + &p.w * (2.0 * cfg.lambda);
            Ok(ClassifierTerms {
                loss: sm.loss,
                l2: cfg.lambda * p.w.norm_squared(),
                grad_src_features: sm.grad_features.columns(0, ns).into_owned(),
                grad_tgt_features: sm.grad_features.columns(ns, tgt.features.ncols()).into_owned(),
                grad_w,
                grad_b: sm.grad_b,
                head_tgt: None,
            })
        }
        Some(head) => {
            let s = softmax_loss_and_grad(&p.w, &p.b, &src.features, &batch.src_labels)?;
            let t = softmax_loss_and_grad(&head.w, &head.b, &tgt.features, &batch.tgt_labels)?;
            let coupling = &p.w - &head.w;
            let l2 = cfg.lambda * p.w.norm_squared()
                + cfg.lambda_star * head.w.norm_squared()
                + cfg.beta_prime * coupling.norm_squared();
            let grad_w = s.grad_w + &p.w * (2.0 * cfg.lambda) + &coupling * (2.0 * cfg.beta_prime);
            let grad_w_star = t.grad_w + &head.w * (2.0 * cfg.lambda_star) - &coupling * (2.0 * cfg.beta_prime);
            Ok(ClassifierTerms {
                loss: s.loss + t.loss,
                l2,
                grad_src_features: s.grad_features,
                grad_tgt_features: t.grad_features,
                grad_w,
                grad_b: s.grad_b,
                head_tgt: Some(TargetHead {
                    w: grad_w_star,
                    b: t.grad_b,
                }),
            })
        }
    }
}

/// Classifier loss, L2 terms and alignment for one batch, with gradients
/// for every model parameter and (in weighted mode) the alignment weights.
/// Feature gradients of the classifier and alignment terms are summed
/// before they are pushed back through the streams.
pub fn full_objective(model: &TwoStreamModel, batch: &Batch, cfg: &AlignmentConfig) -> Result<ObjectiveOutput> {
    model.check()?;
    batch.check(model)?;
    if cfg.num_classes != model.num_classes {
        return Err(SohotError::arg(
            "alignment config and model disagree on the number of classes",
        ));
    }
    let tau = model.config.tau;
    let src = model.params.src.forward(&batch.src_inputs, tau);
    let tgt = model.params.tgt.forward(&batch.tgt_inputs, tau);
    let cls = classifier_terms(model, batch, &src, &tgt)?;
    let mut g_src = cls.grad_src_features;
    let mut g_tgt = cls.grad_tgt_features;

    let mut breakdown = LossBreakdown {
        classifier: cls.loss,
        l2_reg: cls.l2,
        ..LossBreakdown::default()
    };
    let mut absent_classes = Vec::new();
    let mut scatter_skipped = Vec::new();
    let mut weight_grads = None;

    if !cfg.alignment_off() {
        let (src_cls, src_cols) = split_by_class(&src.features, &batch.src_labels, cfg.num_classes);
        let (tgt_cls, tgt_cols) = split_by_class(&tgt.features, &batch.tgt_labels, cfg.num_classes);
        let pairs: Vec<ClassPair<'_>> = (0..cfg.num_classes)
            .map(|c| ClassPair {
                class_id: c,
                src: &src_cls[c],
                tgt: &tgt_cls[c],
            })
            .collect();
        let al = alignment(&pairs, cfg, true)?;
        for c in 0..cfg.num_classes {
            scatter_back(&mut g_src, &al.grad_src[c], &src_cols[c]);
            scatter_back(&mut g_tgt, &al.grad_tgt[c], &tgt_cols[c]);
        }
        breakdown.scatter_align = al.breakdown.scatter_align;
        breakdown.mean_align = al.breakdown.mean_align;
        breakdown.weight_reg = al.breakdown.weight_reg;
        if cfg.weighted {
            weight_grads = Some(grad_weights(cfg, &al.scatter_dists, &al.mean_dists)?);
        }
        absent_classes = al.absent_classes;
        scatter_skipped = al.scatter_skipped;
    } else if cfg.weighted {
        breakdown.weight_reg = weight_regularizer(cfg);
        let zeros = vec![vec![0.0; cfg.num_classes]; cfg.zeta.len()];
        weight_grads = Some(grad_weights(cfg, &zeros, &vec![0.0; cfg.num_classes])?);
    }

    let grads = Params {
        src: model.params.src.backward(&src, &g_src, tau),
        tgt: model.params.tgt.backward(&tgt, &g_tgt, tau),
        w: cls.grad_w,
        b: cls.grad_b,
        head_tgt: cls.head_tgt,
    };
    Ok(ObjectiveOutput {
        breakdown: breakdown.finish(),
        grads,
        weight_grads,
        absent_classes,
        scatter_skipped,
    })
}

/// Softmax on the pooled source and target features plus `λ||W||²`, with
/// no alignment machinery at all. Reference for the zero-alignment case.
pub fn pooled_softmax_objective(model: &TwoStreamModel, batch: &Batch) -> Result<ObjectiveOutput> {
    model.check()?;
    batch.check(model)?;
    if model.params.head_tgt.is_some() {
        return Err(SohotError::arg("pooled baseline uses a single shared classifier"));
    }
    let tau = model.config.tau;
    let src = model.params.src.forward(&batch.src_inputs, tau);
    let tgt = model.params.tgt.forward(&batch.tgt_inputs, tau);
    let cls = classifier_terms(model, batch, &src, &tgt)?;
    let grads = Params {
        src: model.params.src.backward(&src, &cls.grad_src_features, tau),
        tgt: model.params.tgt.backward(&tgt, &cls.grad_tgt_features, tau),
        w: cls.grad_w,
        b: cls.grad_b,
        head_tgt: None,
    };
    Ok(ObjectiveOutput {
        breakdown: LossBreakdown {
            classifier: cls.loss,
            l2_reg: cls.l2,
            ..LossBreakdown::default()
        }
        .finish(),
        grads,
        weight_grads: None,
        absent_classes: Vec::new(),
        scatter_skipped: Vec::new(),
    })
}
