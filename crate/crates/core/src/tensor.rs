//! Mean vectors and explicit super-symmetric scatter tensors.
//!
//! A scatter tensor of order `r` over `N` samples is the average of the
//! `r`-fold outer products of the mean-centered samples. Because it is
//! invariant under any permutation of its indices, only the coefficients at
//! nondecreasing multi-indices `i_1 <= i_2 <= ... <= i_r` are stored, in
//! lexicographic order. The packed length is `binom(d + r - 1, r)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SohotError};

/// Default ceiling on the number of packed coefficients an explicit tensor
/// may allocate.
pub const DEFAULT_MEM_CAP: u64 = 1 << 30;

/// Environment variable overriding [`DEFAULT_MEM_CAP`].
pub const MEM_CAP_ENV: &str = "SOHOT_MEM_CAP";

/// Coefficient cap from `SOHOT_MEM_CAP`, falling back to the default.
pub fn mem_cap() -> u64 {
    std::env::var(MEM_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(DEFAULT_MEM_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Features of one class in one domain: `d` rows by `N` columns, one column
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
    class_id: usize,
    domain: Domain,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>, class_id: usize, domain: Domain) -> Result<Self> {
        check_features(&data)?;
        Ok(Self { data, class_id, domain })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }
}

pub(crate) fn check_features(data: &DMatrix<f64>) -> Result<()> {
    if data.nrows() == 0 {
        return Err(SohotError::arg("feature dimension must be at least 1"));
    }
    if data.ncols() == 0 {
        return Err(SohotError::arg("feature matrix has no samples"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SohotError::arg("feature matrix contains a non-finite entry"));
    }
    Ok(())
}

/// Column average of `features`.
pub fn compute_mean(features: &DMatrix<f64>) -> Result<DVector<f64>> {
    if features.ncols() == 0 {
        return Err(SohotError::arg("cannot take the mean of an empty matrix"));
    }
    Ok(column_mean(features))
}

pub(crate) fn column_mean(features: &DMatrix<f64>) -> DVector<f64> {
    let n = features.ncols() as f64;
    let mut mean = DVector::zeros(features.nrows());
    for col in features.column_iter() {
        mean += col;
    }
    mean / n
}

/// Subtracts `mean` from every column.
pub(crate) fn center(features: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = features.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// Number of nondecreasing `m`-tuples drawn from `n` values, i.e.
/// `binom(n + m - 1, m)`, or `None` on overflow.
fn multiset_count(n: u64, m: u64) -> Option<u64> {
    if m == 0 {
        return Some(1);
    }
    if n == 0 {
        return Some(0);
    }
    // binom(n + m - 1, m) == binom(n + m - 1, n - 1); iterate over the smaller.
    let top = n.checked_add(m)? - 1;
    let k = m.min(n - 1);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        // acc holds binom(top - k + i - 1, i - 1); the division is exact.
        acc = acc.checked_mul(top as u128 - k as u128 + i)? / i;
    }
    u64::try_from(acc).ok()
}

/// Number of unique coefficients of a super-symmetric order-`r` tensor in
/// `d` dimensions, `binom(d + r - 1, r)`.
pub fn unique_coeff_count(d: usize, r: usize) -> Result<u64> {
    if d == 0 || r == 0 {
        return Err(SohotError::arg("dimension and order must both be at least 1"));
    }
    multiset_count(d as u64, r as u64).ok_or_else(|| SohotError::Capacity {
        what: format!("order-{r} tensor in dimension {d}"),
        required: format!("binom({} + {} - 1, {})", d, r, r),
        cap: u64::MAX,
    })
}

/// Packed index layout shared by every tensor of the same `(dim, order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayout {
    dim: usize,
    order: usize,
    /// Number of distinct permutations of each packed multi-index.
    multiplicity: Vec<f64>,
}

impl PackedLayout {
    /// Builds the layout after checking the coefficient count against `cap`.
    pub fn new(dim: usize, order: usize, cap: u64) -> Result<Arc<Self>> {
        let count = unique_coeff_count(dim, order).map_err(|e| match e {
            SohotError::Capacity { .. } => SohotError::Capacity {
                what: format!("explicit order-{order} tensor in dimension {dim}"),
                required: format!("more than {}", u64::MAX),
                cap,
            },
            other => other,
        })?;
        if count > cap {
            return Err(SohotError::Capacity {
                what: format!("explicit order-{order} tensor in dimension {dim}"),
                required: count.to_string(),
                cap,
            });
        }
        let mut multiplicity = Vec::with_capacity(count as usize);
        let factorial: Vec<f64> = (0..=order)
            .scan(1.0_f64, |acc, k| {
                if k > 0 {
                    *acc *= k as f64;
                }
                Some(*acc)
            })
            .collect();
        for_each_multi_index(dim, order, |idx| {
            let mut denom = 1.0;
            let mut run = 1;
            for w in idx.windows(2) {
                if w[0] == w[1] {
                    run += 1;
                } else {
                    denom *= factorial[run];
                    run = 1;
                }
            }
            denom *= factorial[run];
            multiplicity.push(factorial[order] / denom);
        });
        Ok(Arc::new(Self {
            dim,
            order,
            multiplicity,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicity.is_empty()
    }

    pub fn multiplicity(&self) -> &[f64] {
        &self.multiplicity
    }

    /// Position of an arbitrary index tuple in the packed array.
    pub fn packed_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.order {
            return Err(SohotError::shape(format!(
                "index tuple has {} entries, tensor order is {}",
                index.len(),
                self.order
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= self.dim) {
            return Err(SohotError::shape(format!(
                "index {bad} out of range for dimension {}",
                self.dim
            )));
        }
        let mut sorted = index.to_vec();
        sorted.sort_unstable();
        let d = self.dim as u64;
        let r = self.order as u64;
        let mut rank = 0u64;
        let mut prev = 0usize;
        for (k, &i) in sorted.iter().enumerate() {
            let rest = r - k as u64 - 1;
            for v in prev..i {
                // Tuples that agree so far, take value v here, and are
                // completed by `rest` entries drawn from {v, ..., d-1}.
                rank += multiset_count(d - v as u64, rest).expect("fits: bounded by layout length");
            }
            prev = i;
        }
        Ok(rank as usize)
    }
}

/// Visits every nondecreasing multi-index of length `order` over `0..dim`
/// in lexicographic order.
pub fn for_each_multi_index(dim: usize, order: usize, mut visit: impl FnMut(&[usize])) {
    if dim == 0 || order == 0 {
        return;
    }
    let mut idx = vec![0usize; order];
    loop {
        visit(&idx);
        // Advance the rightmost position that can still grow.
        let mut pos = order;
        while pos > 0 && idx[pos - 1] == dim - 1 {
            pos -= 1;
        }
        if pos == 0 {
            return;
        }
        let next = idx[pos - 1] + 1;
        for slot in &mut idx[pos - 1..] {
            *slot = next;
        }
    }
}

/// Adds every packed coefficient of the `order`-fold outer product of `v`
/// into `out`, starting at `*pos`.
fn accumulate_outer(v: &[f64], order: usize, start: usize, prefix: f64, out: &mut [f64], pos: &mut usize) {
    if order == 1 {
        for &x in &v[start..] {
            out[*pos] += prefix * x;
            *pos += 1;
        }
        return;
    }
    for i in start..v.len() {
        accumulate_outer(v, order - 1, i, prefix * v[i], out, pos);
    }
}

/// Packed super-symmetric scatter tensor together with the mean that
/// centered it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTensor {
    layout: Arc<PackedLayout>,
    coeffs: Vec<f64>,
    mean: DVector<f64>,
}

impl ScatterTensor {
    /// All-zero tensor with a zero mean.
    pub fn zeros(layout: Arc<PackedLayout>) -> Self {
        let len = layout.len();
        let dim = layout.dim();
        Self {
            layout,
            coeffs: vec![0.0; len],
            mean: DVector::zeros(dim),
        }
    }

    /// Wraps explicit packed coefficients.
    pub fn from_packed(layout: Arc<PackedLayout>, coeffs: Vec<f64>, mean: DVector<f64>) -> Result<Self> {
        if coeffs.len() != layout.len() {
            return Err(SohotError::shape(format!(
                "expected {} packed coefficients, got {}",
                layout.len(),
                coeffs.len()
            )));
        }
        if mean.len() != layout.dim() {
            return Err(SohotError::shape(format!(
                "mean has length {}, tensor dimension is {}",
                mean.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, coeffs, mean })
    }

    pub fn order(&self) -> usize {
        self.layout.order()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn layout(&self) -> &Arc<PackedLayout> {
        &self.layout
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Value at an arbitrary (not necessarily sorted) index tuple.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.coeffs[self.layout.packed_index(index)?])
    }

    /// The `d x d` slice obtained by fixing every index after the first two.
    pub fn slice(&self, trailing: &[usize]) -> Result<DMatrix<f64>> {
        if self.order() < 2 || trailing.len() != self.order() - 2 {
            return Err(SohotError::shape(
                "slice needs order >= 2 and order - 2 trailing indices",
            ));
        }
        let d = self.dim();
        let mut idx = vec![0; self.order()];
        idx[2..].copy_from_slice(trailing);
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                idx[0] = i;
                idx[1] = j;
                m[(i, j)] = self.get(&idx)?;
            }
        }
        Ok(m)
    }
}

/// Explicit scatter tensor of order `order`, refusing layouts above the
/// cap from [`mem_cap`].
pub fn compute_scatter(features: &DMatrix<f64>, order: usize) -> Result<ScatterTensor> {
    compute_scatter_with_cap(features, order, mem_cap())
}

pub fn compute_scatter_with_cap(features: &DMatrix<f64>, order: usize, cap: u64) -> Result<ScatterTensor> {
    if order == 0 {
        return Err(SohotError::arg("tensor order must be at least 1"));
    }
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(SohotError::arg("scatter needs at least one sample of dimension >= 1"));
    }
    let layout = PackedLayout::new(features.nrows(), order, cap)?;
    compute_scatter_in(&layout, features)
}

/// Explicit scatter tensor using an existing layout.
pub fn compute_scatter_in(layout: &Arc<PackedLayout>, features: &DMatrix<f64>) -> Result<ScatterTensor> {
    let mean = compute_mean(features)?;
    if features.nrows() != layout.dim() {
        return Err(SohotError::shape(format!(
            "features have dimension {}, layout has {}",
            features.nrows(),
            layout.dim()
        )));
    }
    let order = layout.order();
    let mut coeffs = vec![0.0; layout.len()];
    if order > 1 {
        let centered = center(features, &mean);
        for col in centered.column_iter() {
            let mut pos = 0;
            accumulate_outer(col.as_slice(), order, 0, 1.0, &mut coeffs, &mut pos);
        }
        let n = features.ncols() as f64;
        coeffs.iter_mut().for_each(|c| *c /= n);
    }
    // Order 1 is exactly zero: centered samples average to nothing.
    Ok(ScatterTensor {
        layout: Arc::clone(layout),
        coeffs,
        mean,
    })
}

fn check_compatible(a: &ScatterTensor, b: &ScatterTensor) -> Result<()> {
    if a.order() != b.order() || a.dim() != b.dim() {
        return Err(SohotError::shape(format!(
            "tensor shapes differ: order {} dim {} vs order {} dim {}",
            a.order(),
            a.dim(),
            b.order(),
            b.dim()
        )));
    }
    Ok(())
}

/// Inner product over all `d^r` index tuples, computed from the packed
/// coefficients weighted by multiplicity.
pub fn tensor_inner(a: &ScatterTensor, b: &ScatterTensor) -> Result<f64> {
    check_compatible(a, b)?;
    Ok(a.layout
        .multiplicity()
        .iter()
        .zip(a.coeffs.iter().zip(&b.coeffs))
        .map(|(m, (x, y))| m * x * y)
        .sum())
}

/// Squared Frobenius distance, clamped at zero.
///
/// Evaluated as the multiplicity-weighted sum of squared coefficient
/// differences, which equals `<a,a> - 2<a,b> + <b,b>` without the
/// cancellation and is exactly symmetric in its arguments.
pub fn tensor_frob_dist_sq(a: &ScatterTensor, b: &ScatterTensor) -> Result<f64> {
    check_compatible(a, b)?;
    let dist: f64 = a
        .layout
        .multiplicity()
        .iter()
        .zip(a.coeffs.iter().zip(&b.coeffs))
        .map(|(m, (x, y))| {
            let diff = x - y;
            m * diff * diff
        })
        .sum();
    Ok(clamp_tiny_negative(dist))
}

/// Threshold below which a negative squared distance is treated as
/// rounding noise.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

pub(crate) fn clamp_tiny_negative(v: f64) -> f64 {
    if (-NEGATIVE_CLAMP..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, d: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Dense `d^r` scatter computed with plain nested loops.
    fn dense_scatter(features: &DMatrix<f64>, r: usize) -> Vec<f64> {
        let d = features.nrows();
        let n = features.ncols();
        let mut mean = vec![0.0; d];
        for j in 0..n {
            for i in 0..d {
                mean[i] += features[(i, j)];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let total = d.pow(r as u32);
        let mut out = vec![0.0; total];
        for j in 0..n {
            for (flat, slot) in out.iter_mut().enumerate() {
                let mut rem = flat;
                let mut prod = 1.0;
                for _ in 0..r {
                    let i = rem % d;
                    rem /= d;
                    prod *= features[(i, j)] - mean[i];
                }
                *slot += prod;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }

    fn unflatten(flat: usize, d: usize, r: usize) -> Vec<usize> {
        let mut rem = flat;
        (0..r)
            .map(|_| {
                let i = rem % d;
                rem /= d;
                i
            })
            .collect()
    }

    #[test]
    fn mean_examples() {
        let m = compute_mean(&DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        assert_eq!(m[0], 2.0);
        let v = DMatrix::from_column_slice(3, 1, &[0.5, -2.0, 7.25]);
        assert_eq!(compute_mean(&v).unwrap().as_slice(), v.as_slice());
        assert!(matches!(
            compute_mean(&DMatrix::zeros(3, 0)),
            Err(SohotError::Argument(_))
        ));
    }

    #[test]
    fn mean_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_features(&mut rng, 3, 50);
        let m = compute_mean(&x).unwrap();
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..50 {
                s += x[(i, j)];
            }
            assert!((m[i] - s / 50.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_point_variance() {
        let t = compute_scatter(&DMatrix::from_row_slice(1, 2, &[1.0, 3.0]), 2).unwrap();
        assert_eq!(t.coeffs(), &[1.0]);
        assert_eq!(t.mean()[0], 2.0);
    }

    #[test]
    fn order_one_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = compute_scatter(&random_features(&mut rng, 5, 7), 1).unwrap();
        assert!(t.coeffs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn scatter_matches_dense_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 3, 5);
        let t = compute_scatter(&x, 3).unwrap();
        let dense = dense_scatter(&x, 3);
        for (flat, &v) in dense.iter().enumerate() {
            let idx = unflatten(flat, 3, 3);
            assert!((t.get(&idx).unwrap() - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn inner_matches_dense_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_features(&mut rng, 4, 6);
        let y = random_features(&mut rng, 4, 9);
        let a = compute_scatter(&x, 3).unwrap();
        let b = compute_scatter(&y, 3).unwrap();
        let oracle: f64 = dense_scatter(&x, 3)
            .iter()
            .zip(dense_scatter(&y, 3))
            .map(|(p, q)| p * q)
            .sum();
        assert!((tensor_inner(&a, &b).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn inner_order_two_is_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = compute_scatter(&random_features(&mut rng, 4, 6), 2).unwrap();
        let b = compute_scatter(&random_features(&mut rng, 4, 6), 2).unwrap();
        let (ma, mb) = (a.slice(&[]).unwrap(), b.slice(&[]).unwrap());
        let trace = (&ma * mb.transpose()).trace();
        assert!((tensor_inner(&a, &b).unwrap() - trace).abs() <= 1e-12);
    }

    #[test]
    fn zero_tensor_inner_and_distance() {
        let layout = PackedLayout::new(3, 2, DEFAULT_MEM_CAP).unwrap();
        let z = ScatterTensor::zeros(layout);
        assert_eq!(tensor_inner(&z, &z).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = compute_scatter(&random_features(&mut rng, 3, 4), 2).unwrap();
        let norm = tensor_inner(&a, &a).unwrap();
        assert!((tensor_frob_dist_sq(&a, &z).unwrap() - norm).abs() <= 1e-14);
        assert_eq!(tensor_frob_dist_sq(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn distance_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_features(&mut rng, 3, 5);
        let y = random_features(&mut rng, 3, 4);
        let a = compute_scatter(&x, 4).unwrap();
        let b = compute_scatter(&y, 4).unwrap();
        let oracle: f64 = dense_scatter(&x, 4)
            .iter()
            .zip(dense_scatter(&y, 4))
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        assert!((tensor_frob_dist_sq(&a, &b).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = compute_scatter(&random_features(&mut rng, 3, 4), 2).unwrap();
        let b = compute_scatter(&random_features(&mut rng, 3, 4), 3).unwrap();
        let c = compute_scatter(&random_features(&mut rng, 4, 4), 2).unwrap();
        assert!(matches!(tensor_inner(&a, &b), Err(SohotError::Shape(_))));
        assert!(matches!(tensor_frob_dist_sq(&a, &c), Err(SohotError::Shape(_))));
    }

    #[test]
    fn coefficient_counts() {
        assert_eq!(unique_coeff_count(4096, 2).unwrap(), 8_390_656);
        assert_eq!(unique_coeff_count(1, 7).unwrap(), 1);
        assert_eq!(unique_coeff_count(3, 3).unwrap(), 10);
        assert!(matches!(
            unique_coeff_count(usize::MAX, 40),
            Err(SohotError::Capacity { .. })
        ));
        assert!(unique_coeff_count(0, 2).is_err());
    }

    #[test]
    fn cap_refuses_large_layouts() {
        let err = PackedLayout::new(4096, 3, DEFAULT_MEM_CAP).unwrap_err();
        match err {
            SohotError::Capacity { required, .. } => {
                assert_eq!(required, unique_coeff_count(4096, 3).unwrap().to_string())
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multi_index_enumeration_is_lexicographic_and_ranked() {
        let layout = PackedLayout::new(4, 3, DEFAULT_MEM_CAP).unwrap();
        let mut seen = Vec::new();
        for_each_multi_index(4, 3, |idx| seen.push(idx.to_vec()));
        assert_eq!(seen.len(), layout.len());
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
        for (rank, idx) in seen.iter().enumerate() {
            assert_eq!(layout.packed_index(idx).unwrap(), rank);
        }
        let total: f64 = layout.multiplicity().iter().sum();
        assert_eq!(total, 64.0);
    }

    #[test]
    fn duplicated_samples_leave_scatter_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_features(&mut rng, 3, 5);
        let doubled = DMatrix::from_fn(3, 10, |i, j| x[(i, j % 5)]);
        let a = compute_scatter(&x, 3).unwrap();
        let b = compute_scatter(&doubled, 3).unwrap();
        for (p, q) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((p - q).abs() <= 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn distance_is_symmetric(seed in any::<u64>(), d in 1usize..5, r in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = compute_scatter(&random_features(&mut rng, d, 4), r).unwrap();
                let b = compute_scatter(&random_features(&mut rng, d, 3), r).unwrap();
                prop_assert_eq!(
                    tensor_frob_dist_sq(&a, &b).unwrap().to_bits(),
                    tensor_frob_dist_sq(&b, &a).unwrap().to_bits()
                );
            }
        }
    }
}
