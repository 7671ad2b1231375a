use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use sohot::kernel::kernel_frob_dist_sq;
use sohot::tensor::{compute_scatter, tensor_frob_dist_sq, unique_coeff_count, PackedLayout, DEFAULT_MEM_CAP};

fn features(d: usize, n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, d * n).prop_map(move |v| DMatrix::from_vec(d, n, v))
}

fn sized_features(
    dims: std::ops::RangeInclusive<usize>,
    ns: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = DMatrix<f64>> {
    (dims, ns).prop_flat_map(|(d, n)| features(d, n))
}

/// Dense oracle: (1/N) sum_n prod_k (x_n - mu)[i_k].
fn dense_entry(x: &DMatrix<f64>, index: &[usize]) -> f64 {
    let n = x.ncols() as f64;
    let mean = x.column_mean();
    x.column_iter()
        .map(|col| index.iter().map(|&i| col[i] - mean[i]).product::<f64>())
        .sum::<f64>()
        / n
}

fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.min()
}

fn binom(n: u128, k: u128) -> u128 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Every trailing index tuple of length `len` over `0..d`.
fn trailing_tuples(d: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..d).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn permuted_indices_read_identical_bits(
        x in sized_features(2..=6, 1..=8),
        order in 2usize..=4,
        raw_index in prop::collection::vec(0usize..6, 4),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let d = x.nrows();
        let t = compute_scatter(&x, order).unwrap();
        let index: Vec<usize> = raw_index[..order].iter().map(|i| i % d).collect();
        let permuted: Vec<usize> = perm.iter().filter(|&&p| p < order).map(|&p| index[p]).collect();
        let a = t.get(&index).unwrap();
        let b = t.get(&permuted).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let oracle = dense_entry(&x, &index);
        prop_assert!((a - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()), "{} vs {}", a, oracle);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packed_length_is_multiset_count(d in 1usize..=12, r in 1usize..=6) {
        let expected = binom((d + r - 1) as u128, r as u128) as u64;
        prop_assert_eq!(unique_coeff_count(d, r).unwrap(), expected);
        prop_assert_eq!(PackedLayout::new(d, r, DEFAULT_MEM_CAP).unwrap().len() as u64, expected);
    }

    #[test]
    fn second_order_scatter_is_psd(x in sized_features(1..=8, 1..=12)) {
        let t = compute_scatter(&x, 2).unwrap();
        let s = t.slice(&[]).unwrap();
        let scale = 1.0 + s.amax();
        prop_assert!(min_eigenvalue(s) >= -1e-9 * scale);
    }

    #[test]
    fn fourth_order_paired_slices_are_psd(x in sized_features(1..=8, 1..=12), k in 0usize..8) {
        let t = compute_scatter(&x, 4).unwrap();
        let k = k % x.nrows();
        let s = t.slice(&[k, k]).unwrap();
        let scale = 1.0 + s.amax();
        prop_assert!(min_eigenvalue(s) >= -1e-9 * scale);
    }

    #[test]
    fn fourth_order_square_unfolding_is_psd(x in sized_features(1..=5, 1..=10)) {
        let d = x.nrows();
        let t = compute_scatter(&x, 4).unwrap();
        let m = DMatrix::from_fn(d * d, d * d, |a, b| t.get(&[a / d, a % d, b / d, b % d]).unwrap());
        let scale = 1.0 + m.amax();
        prop_assert!(min_eigenvalue(m) >= -1e-9 * scale);
    }

    #[test]
    fn distance_is_symmetric_bitwise(
        (x, y) in (2usize..=5).prop_flat_map(|d| (features(d, 4), features(d, 3))),
        order in 2usize..=4,
    ) {
        let a = compute_scatter(&x, order).unwrap();
        let b = compute_scatter(&y, order).unwrap();
        let ab = tensor_frob_dist_sq(&a, &b).unwrap();
        let ba = tensor_frob_dist_sq(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn duplicating_every_sample_keeps_the_scatter(x in sized_features(2..=5, 1..=6), order in 2usize..=4) {
        let doubled = DMatrix::from_fn(x.nrows(), 2 * x.ncols(), |i, j| x[(i, j % x.ncols())]);
        let a = compute_scatter(&x, order).unwrap();
        let b = compute_scatter(&doubled, order).unwrap();
        for (u, v) in a.coeffs().iter().zip(b.coeffs()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn kernel_distance_matches_explicit(
        (x, y) in (2usize..=6, 2usize..=10, 2usize..=10)
            .prop_flat_map(|(d, n, nt)| (features(d, n), features(d, nt))),
        order in 2usize..=4,
    ) {
        let explicit = tensor_frob_dist_sq(&compute_scatter(&x, order).unwrap(), &compute_scatter(&y, order).unwrap()).unwrap();
        let kernel = kernel_frob_dist_sq(&x, &y, order).unwrap();
        prop_assert!((explicit - kernel).abs() <= 1e-9 * explicit.abs().max(f64::MIN_POSITIVE), "{} vs {}", explicit, kernel);
    }
}

#[test]
fn second_order_slice_is_the_covariance() {
    let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 6.0, 0.0, -3.0, 3.0]);
    let s = compute_scatter(&x, 2).unwrap().slice(&[]).unwrap();
    let mean = x.column_mean();
    let centered = DMatrix::from_fn(2, 3, |i, j| x[(i, j)] - mean[i]);
    let cov = &centered * centered.transpose() / 3.0;
    assert!((s - cov).amax() < 1e-14);
}

#[test]
fn off_diagonal_fourth_order_slices_can_be_indefinite() {
    // Two samples at +-(1, -1): the (0, 1) slice is -v v^T.
    let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
    let t = compute_scatter(&x, 4).unwrap();
    let s = t.slice(&[0, 1]).unwrap();
    assert!((min_eigenvalue(s) + 2.0).abs() < 1e-12);
    for trailing in trailing_tuples(2, 2).into_iter().filter(|t| t[0] == t[1]) {
        assert!(min_eigenvalue(t.slice(&trailing).unwrap()) >= -1e-12);
    }
}
