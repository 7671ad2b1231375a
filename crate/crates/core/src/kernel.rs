//! Kernelized scatter-tensor inner products and distances.
//!
//! The inner product of two order-`r` scatter tensors equals the averaged
//! sum of `r`-th powers of dot products between the centered samples, so
//! distances never need the `binom(d + r - 1, r)` explicit coefficients.
//! Gram blocks are stored unpowered; the power is applied on read, which
//! lets one set of blocks serve every order of a multi-order loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SohotError};
use crate::tensor::{center, check_features, clamp_tiny_negative, column_mean, unique_coeff_count};

/// `x^r` by repeated multiplication; `x^0 == 1`.
#[inline]
pub(crate) fn pow_int(x: f64, r: usize) -> f64 {
    let mut acc = 1.0;
    for _ in 0..r {
        acc *= x;
    }
    acc
}

/// Sum of all entries of the elementwise `r`-th power of `m`.
pub(crate) fn power_sum(m: &DMatrix<f64>, r: usize) -> f64 {
    m.iter().map(|&v| pow_int(v, r)).sum()
}

/// Elementwise `r`-th power.
pub(crate) fn power(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    m.map(|v| pow_int(v, r))
}

/// `AᵀA` with every entry computed once and mirrored, so the result is
/// bitwise symmetric.
fn self_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = a.column(i).dot(&a.column(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

fn cross_gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| a.column(i).dot(&b.column(j)))
}

/// Centered, unpowered Gram matrices for one source/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlocks {
    /// `N x N`, entries `<x_n - mu, x_m - mu>`.
    pub k_ss: DMatrix<f64>,
    /// `N* x N*`, entries `<y_n - mu*, y_m - mu*>`.
    pub k_tt: DMatrix<f64>,
    /// `N x N*`, entries `<x_n - mu, y_m - mu*>`.
    pub k_st: DMatrix<f64>,
    pub order: usize,
}

impl KernelBlocks {
    pub fn n_src(&self) -> usize {
        self.k_ss.nrows()
    }

    pub fn n_tgt(&self) -> usize {
        self.k_tt.nrows()
    }

    /// `<X, Y>` at an arbitrary order, reusing these Grams.
    pub fn tensor_inner_at(&self, order: usize) -> f64 {
        power_sum(&self.k_st, order) / (self.n_src() as f64 * self.n_tgt() as f64)
    }

    /// `||X - Y||_F^2` at an arbitrary order, reusing these Grams.
    pub fn frob_dist_sq_at(&self, order: usize) -> f64 {
        let n = self.n_src() as f64;
        let nt = self.n_tgt() as f64;
        let ss = power_sum(&self.k_ss, order) / (n * n);
        let tt = power_sum(&self.k_tt, order) / (nt * nt);
        let st = power_sum(&self.k_st, order) / (n * nt);
        clamp_tiny_negative(ss + tt - 2.0 * st)
    }
}

/// Centered samples of both domains plus their Gram blocks. Shared by the
/// distance and its gradient.
#[derive(Debug, Clone)]
pub struct CenteredPair {
    pub src_centered: DMatrix<f64>,
    pub tgt_centered: DMatrix<f64>,
    pub src_mean: DVector<f64>,
    pub tgt_mean: DVector<f64>,
    pub blocks: KernelBlocks,
}

impl CenteredPair {
    pub fn new(src: &DMatrix<f64>, tgt: &DMatrix<f64>, order: usize) -> Result<Self> {
        check_features(src)?;
        check_features(tgt)?;
        if src.nrows() != tgt.nrows() {
            return Err(SohotError::shape(format!(
                "source dimension {} differs from target dimension {}",
                src.nrows(),
                tgt.nrows()
            )));
        }
        let src_mean = column_mean(src);
        let tgt_mean = column_mean(tgt);
        let src_centered = center(src, &src_mean);
        let tgt_centered = center(tgt, &tgt_mean);
        let blocks = KernelBlocks {
            k_ss: self_gram(&src_centered),
            k_tt: self_gram(&tgt_centered),
            k_st: cross_gram(&src_centered, &tgt_centered),
            order,
        };
        Ok(Self {
            src_centered,
            tgt_centered,
            src_mean,
            tgt_mean,
            blocks,
        })
    }

    /// Gradient of `||X^(r) - Y^(r)||_F^2` with respect to the raw source
    /// and target samples.
    ///
    /// With `q = r - 1` and `∘q` the elementwise power:
    ///
    /// ```text
    /// dΦ  = [ 2r/N²  · Xc K^∘q    − 2r/(N N*) · Yc (Kst^∘q)ᵀ ] (I − 𝟙𝟙ᵀ/N)
    /// dΦ* = [ 2r/N*² · Yc Ktt^∘q  − 2r/(N N*) · Xc  Kst^∘q   ] (I − 𝟙𝟙ᵀ/N*)
    /// ```
    ///
    /// Expanding the centering projector reproduces the explicit
    /// mean-correction terms of the closed form.
    pub fn frob_dist_grad(&self, order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.blocks.n_src() as f64;
        let nt = self.blocks.n_tgt() as f64;
        let r = order as f64;
        let q = order.saturating_sub(1);
        let kss_q = power(&self.blocks.k_ss, q);
        let ktt_q = power(&self.blocks.k_tt, q);
        let kst_q = power(&self.blocks.k_st, q);

        let mut g_src = &self.src_centered * kss_q * (2.0 * r / (n * n));
        g_src -= &self.tgt_centered * kst_q.transpose() * (2.0 * r / (n * nt));
        subtract_row_means(&mut g_src);

        let mut g_tgt = &self.tgt_centered * ktt_q * (2.0 * r / (nt * nt));
        g_tgt -= &self.src_centered * kst_q * (2.0 * r / (n * nt));
        subtract_row_means(&mut g_tgt);

        (g_src, g_tgt)
    }
}

/// Right-multiplies by the centering projector `I - 𝟙𝟙ᵀ/n`.
fn subtract_row_means(g: &mut DMatrix<f64>) {
    let n = g.ncols() as f64;
    for mut row in g.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
    }
}

/// Centered Gram blocks of `src` (centered by its own mean) and `tgt`
/// (centered by its own mean).
pub fn build_kernel_blocks(src: &DMatrix<f64>, tgt: &DMatrix<f64>, order: usize) -> Result<KernelBlocks> {
    Ok(CenteredPair::new(src, tgt, order)?.blocks)
}

/// `<X^(r), Y^(r)>` from the cross block alone.
pub fn kernel_tensor_inner(blocks: &KernelBlocks) -> f64 {
    blocks.tensor_inner_at(blocks.order)
}

/// `||X^(r) - Y^(r)||_F^2` without forming either tensor.
pub fn kernel_frob_dist_sq(src: &DMatrix<f64>, tgt: &DMatrix<f64>, order: usize) -> Result<f64> {
    if order == 0 {
        return Err(SohotError::arg("tensor order must be at least 1"));
    }
    Ok(build_kernel_blocks(src, tgt, order)?.frob_dist_sq_at(order))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Explicit,
    Kernelized,
}

impl CostMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::Explicit => "explicit",
            CostMode::Kernelized => "kernelized",
        }
    }
}

/// Leading-term operation count for one Frobenius distance.
///
/// Explicit: `(N + N* + 1) · binom(d + r - 1, r)`.
/// Kernelized: `(N² + N·N* + N*²) · d`; the cost of raising to the power
/// `r` is dropped.
pub fn cost_model(d: usize, n_src: usize, n_tgt: usize, order: usize, mode: CostMode) -> Result<u64> {
    let overflow = || SohotError::Capacity {
        what: format!("{} cost for d={d}, N={n_src}, N*={n_tgt}, r={order}", mode.as_str()),
        required: "more than u64::MAX operations".to_string(),
        cap: u64::MAX,
    };
    if d == 0 || order == 0 || n_src == 0 || n_tgt == 0 {
        return Err(SohotError::arg("cost model needs positive sizes"));
    }
    let (n, nt, d64) = (n_src as u64, n_tgt as u64, d as u64);
    match mode {
        CostMode::Explicit => {
            let coeffs = unique_coeff_count(d, order).map_err(|_| overflow())?;
            n.checked_add(nt)
                .and_then(|s| s.checked_add(1))
                .and_then(|s| s.checked_mul(coeffs))
                .ok_or_else(overflow)
        }
        CostMode::Kernelized => {
            let pairs = n
                .checked_mul(n)
                .and_then(|a| n.checked_mul(nt).and_then(|b| a.checked_add(b)))
                .and_then(|a| nt.checked_mul(nt).and_then(|b| a.checked_add(b)))
                .ok_or_else(overflow)?;
            pairs.checked_mul(d64).ok_or_else(overflow)
        }
    }
}
