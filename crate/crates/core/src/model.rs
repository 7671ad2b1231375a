//! Two-stream feature extractors with a shared (or coupled dual) softmax
//! classifier.
//!
//! Each stream is `input -> tanh(W1 x + b1) -> W2 h + b2`, followed by a
//! radial projection onto the ball `||phi||^2 <= tau`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SohotError};
use crate::tensor::Domain;

/// Parameters of one feature stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StreamCache {
    pub inputs: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub raw: DMatrix<f64>,
    pub features: DMatrix<f64>,
}

impl Stream {
    pub fn zeros(input_dim: usize, hidden: usize, feat_dim: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input_dim),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(feat_dim, hidden),
            b2: DVector::zeros(feat_dim),
        }
    }

    /// Uniform Glorot initialization, zero biases.
    pub fn random(input_dim: usize, hidden: usize, feat_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + feat_dim) as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(hidden, input_dim, |_, _| rng.random_range(-a1..a1)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(feat_dim, hidden, |_, _| rng.random_range(-a2..a2)),
            b2: DVector::zeros(feat_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn feat_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn same_shape(&self, other: &Stream) -> bool {
        self.w1.shape() == other.w1.shape() && self.w2.shape() == other.w2.shape()
    }

    pub fn forward(&self, inputs: &DMatrix<f64>, tau: f64) -> StreamCache {
        let mut pre = &self.w1 * inputs;
        for mut col in pre.column_iter_mut() {
            col += &self.b1;
        }
        let hidden = pre.map(f64::tanh);
        let mut raw = &self.w2 * &hidden;
        for mut col in raw.column_iter_mut() {
            col += &self.b2;
        }
        let features = project_columns(&raw, tau);
        StreamCache {
            inputs: inputs.clone(),
            hidden,
            raw,
            features,
        }
    }

    /// Gradient of the loss with respect to this stream's parameters, given
    /// the gradient with respect to the emitted (projected) features.
    pub fn backward(&self, cache: &StreamCache, grad_features: &DMatrix<f64>, tau: f64) -> Stream {
        let g_raw = project_backward(&cache.raw, grad_features, tau);
        let g_w2 = &g_raw * cache.hidden.transpose();
        let g_b2 = row_sums(&g_raw);
        let mut g_pre = self.w2.transpose() * &g_raw;
        g_pre.zip_apply(&cache.hidden, |g, h| *g *= 1.0 - h * h);
        let g_w1 = &g_pre * cache.inputs.transpose();
        let g_b1 = row_sums(&g_pre);
        Stream {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
        }
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

/// Rescales every column whose squared norm exceeds `tau` back onto the
/// sphere of squared radius `tau`.
pub fn project_columns(raw: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = raw.clone();
    let radius = tau.sqrt();
    for mut col in out.column_iter_mut() {
        let norm_sq = col.norm_squared();
        if norm_sq > tau {
            col *= radius / norm_sq.sqrt();
        }
    }
    out
}

/// Vector-Jacobian product of [`project_columns`]. On an active column the
/// Jacobian is `(sqrt(tau)/|z|) (I - z zᵀ/|z|²)`; elsewhere it is the
/// identity.
pub fn project_backward(raw: &DMatrix<f64>, grad: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = grad.clone();
    let radius = tau.sqrt();
    for (j, mut g) in out.column_iter_mut().enumerate() {
        let z = raw.column(j);
        let norm_sq = z.norm_squared();
        if norm_sq > tau {
            let norm = norm_sq.sqrt();
            let along = z.dot(&g) / norm_sq;
            g.axpy(-along, &z, 1.0);
            g *= radius / norm;
        }
    }
    out
}

/// Second classifier used by the dual-classifier variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetHead {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Every trainable array of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub src: Stream,
    pub tgt: Stream,
    /// `d x C` classifier weights.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub head_tgt: Option<TargetHead>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        let zs = |s: &Stream| Stream {
            w1: z(&s.w1),
            b1: DVector::zeros(s.b1.len()),
            w2: z(&s.w2),
            b2: DVector::zeros(s.b2.len()),
        };
        Params {
            src: zs(&other.src),
            tgt: zs(&other.tgt),
            w: z(&other.w),
            b: DVector::zeros(other.b.len()),
            head_tgt: other.head_tgt.as_ref().map(|h| TargetHead {
                w: z(&h.w),
                b: DVector::zeros(h.b.len()),
            }),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(10);
        for s in [&self.src, &self.tgt] {
            v.extend([s.w1.as_slice(), s.b1.as_slice(), s.w2.as_slice(), s.b2.as_slice()]);
        }
        v.extend([self.w.as_slice(), self.b.as_slice()]);
        if let Some(h) = &self.head_tgt {
            v.extend([h.w.as_slice(), h.b.as_slice()]);
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(10);
        for s in [&mut self.src, &mut self.tgt] {
            v.push(s.w1.as_mut_slice());
            v.push(s.b1.as_mut_slice());
            v.push(s.w2.as_mut_slice());
            v.push(s.b2.as_mut_slice());
        }
        v.push(self.w.as_mut_slice());
        v.push(self.b.as_mut_slice());
        if let Some(h) = &mut self.head_tgt {
            v.push(h.w.as_mut_slice());
            v.push(h.b.as_mut_slice());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in a fixed order: source stream, target stream,
    /// classifier, optional target classifier.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(SohotError::shape(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat range occupied by the first layer of both streams, in the
    /// ordering of [`Params::to_flat`].
    pub fn input_layer_ranges(&self) -> [std::ops::Range<usize>; 2] {
        let s = self.src.w1.len() + self.src.b1.len();
        let stream = s + self.src.w2.len() + self.src.b2.len();
        [0..s, stream..stream + s]
    }
}

/// Architecture and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub feat_dim: usize,
    /// L2 strength on the shared (or source) classifier.
    pub lambda: f64,
    /// L2 strength on the target classifier (dual mode only).
    pub lambda_star: f64,
    /// Coupling `||W - W*||^2` between the two classifiers (dual mode only).
    pub beta_prime: f64,
    /// Cap on the squared feature norm.
    pub tau: f64,
    pub dual_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let feat_dim = 16;
        Self {
            hidden: 32,
            feat_dim,
            lambda: 1e-4,
            lambda_star: 1e-4,
            beta_prime: 1e-3,
            tau: 16.0 * feat_dim as f64,
            dual_classifier: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feat_dim == 0 {
            return Err(SohotError::arg("hidden and feature dimensions must be positive"));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_star", self.lambda_star),
            ("beta_prime", self.beta_prime),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SohotError::arg(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(SohotError::arg("tau must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamModel {
    pub params: Params,
    pub config: ModelConfig,
    pub num_classes: usize,
}

impl TwoStreamModel {
    /// Random streams (the target stream starts as a copy of the source
    /// stream) and a small random classifier.
    pub fn new(input_dim: usize, num_classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes < 2 {
            return Err(SohotError::arg("need input_dim >= 1 and at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = Stream::random(input_dim, config.hidden, config.feat_dim, &mut rng);
        let a = (6.0 / (config.feat_dim + num_classes) as f64).sqrt() * 0.1;
        let w = DMatrix::from_fn(config.feat_dim, num_classes, |_, _| rng.random_range(-a..a));
        let head_tgt = config.dual_classifier.then(|| TargetHead {
            w: w.clone(),
            b: DVector::zeros(num_classes),
        });
        Ok(Self {
            params: Params {
                tgt: src.clone(),
                src,
                w,
                b: DVector::zeros(num_classes),
                head_tgt,
            },
            config,
            num_classes,
        })
    }

    /// Model whose every parameter is zero.
    pub fn zeros(input_dim: usize, num_classes: usize, config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(input_dim, num_classes, config, 0)?;
        model.params = Params::zeros_like(&model.params);
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.params.src.input_dim()
    }

    pub fn feat_dim(&self) -> usize {
        self.params.src.feat_dim()
    }

    pub fn stream(&self, domain: Domain) -> &Stream {
        match domain {
            Domain::Source => &self.params.src,
            Domain::Target => &self.params.tgt,
        }
    }

    pub fn forward(&self, inputs: &DMatrix<f64>, domain: Domain) -> StreamCache {
        self.stream(domain).forward(inputs, self.config.tau)
    }

    /// The classifier used at test time for `domain`.
    pub fn classifier(&self, domain: Domain) -> (&DMatrix<f64>, &DVector<f64>) {
        match (&self.params.head_tgt, domain) {
            (Some(h), Domain::Target) => (&h.w, &h.b),
            _ => (&self.params.w, &self.params.b),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !self.params.src.same_shape(&self.params.tgt) {
            return Err(SohotError::shape("source and target streams differ in shape"));
        }
        if self.params.w.shape() != (self.feat_dim(), self.num_classes) {
            return Err(SohotError::shape("classifier shape does not match streams"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_features() {
        let model = TwoStreamModel::zeros(3, 2, ModelConfig::default()).unwrap();
        let x = DMatrix::from_fn(3, 5, |i, j| (i * 7 + j) as f64 - 4.0);
        for domain in [Domain::Source, Domain::Target] {
            assert!(model.forward(&x, domain).features.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_rescales_onto_ball() {
        let raw = DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.3, 0.4]);
        let p = project_columns(&raw, 1.0);
        assert!((p.column(0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p.column(1), raw.column(1));
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let raw = DMatrix::from_column_slice(3, 2, &[1.5, -2.0, 0.7, 0.1, 0.2, -0.3]);
        let g = DMatrix::from_column_slice(3, 2, &[0.3, 0.9, -1.2, 0.5, -0.4, 0.8]);
        let tau = 2.0;
        let analytic = project_backward(&raw, &g, tau);
        let h = 1e-6;
        for k in 0..raw.len() {
            let mut plus = raw.clone();
            plus[k] += h;
            let mut minus = raw.clone();
            minus[k] -= h;
            let f = |m: &DMatrix<f64>| project_columns(m, tau).dot(&g);
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() < 1e-8,
                "{k}: {numeric} vs {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn flat_round_trip() {
        let cfg = ModelConfig {
            dual_classifier: true,
            ..ModelConfig::default()
        };
        let model = TwoStreamModel::new(2, 3, cfg, 9).unwrap();
        let flat = model.params.to_flat();
        assert_eq!(flat.len(), model.params.len());
        let mut other = Params::zeros_like(&model.params);
        other.set_flat(&flat).unwrap();
        assert_eq!(other, model.params);
        let [a, b] = model.params.input_layer_ranges();
        assert_eq!(a.len(), 2 * 32 + 32);
        assert_eq!(&flat[a], &flat[b]);
    }
}
