//! Central finite-difference verification of every analytic gradient.
//!
//! Each block draws random instances, evaluates the analytic gradient, and
//! compares it against `(f(x + h e_i) - f(x - h e_i)) / 2h` computed from
//! loss values only. The reported error of a block is the largest, over
//! instances, of `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SohotError};
use crate::kernel::kernel_frob_dist_sq;
use crate::losses::{
    alignment, full_objective, grad_explicit_cov_align, grad_kernelized_align, grad_mean_align, grad_weights,
    softmax_loss_and_grad, AlignmentConfig, Batch, ClassPair,
};
use crate::model::{project_backward, project_columns, ModelConfig, TwoStreamModel};
use crate::tensor::{compute_mean, compute_scatter, tensor_frob_dist_sq};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub orders: Vec<usize>,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            orders: vec![2, 3, 4],
            step: DEFAULT_STEP,
        }
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Infinity-norm relative error between two gradient blocks.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient blocks differ in length");
    let amax = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = amax(analytic).max(amax(numeric));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn split(flat: &[f64], d: usize, n: usize, nt: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_column_slice(d, n, &flat[..d * n]),
        DMatrix::from_column_slice(d, nt, &flat[d * n..d * (n + nt)]),
    )
}

fn joined(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.iter().chain(b.iter()).copied().collect()
}

struct PairInstance {
    d: usize,
    n: usize,
    nt: usize,
    src: DMatrix<f64>,
    tgt: DMatrix<f64>,
}

fn pair_instance(rng: &mut ChaCha8Rng, max_d: usize) -> PairInstance {
    let d = rng.random_range(2..=max_d);
    let n = rng.random_range(2..=8);
    let nt = rng.random_range(2..=8);
    let src = random_matrix(rng, d, n);
    let tgt = random_matrix(rng, d, nt);
    PairInstance { d, n, nt, src, tgt }
}

/// Max relative error of `analytic` against central differences of a
/// scalar function of the stacked source and target features.
fn check_pair_grad(
    inst: &PairInstance,
    h: f64,
    analytic: (DMatrix<f64>, DMatrix<f64>),
    f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> f64,
) -> f64 {
    let x = joined(&inst.src, &inst.tgt);
    let numeric = central_diff(
        |v| {
            let (a, b) = split(v, inst.d, inst.n, inst.nt);
            f(&a, &b)
        },
        &x,
        h,
    );
    rel_err(&joined(&analytic.0, &analytic.1), &numeric)
}

fn softmax_blocks(rng: &mut ChaCha8Rng, h: f64) -> Result<[f64; 3]> {
    let d = rng.random_range(2..=6);
    let c = rng.random_range(2..=5);
    let m = rng.random_range(1..=8);
    let w = random_matrix(rng, d, c);
    let b = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
    let x = random_matrix(rng, d, m);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
    let out = softmax_loss_and_grad(&w, &b, &x, &labels)?;
    let loss = |w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>| {
        softmax_loss_and_grad(w, b, x, &labels)
            .map(|o| o.loss)
            .unwrap_or(f64::NAN)
    };
    let nw = central_diff(|v| loss(&DMatrix::from_column_slice(d, c, v), &b, &x), w.as_slice(), h);
    let nb = central_diff(|v| loss(&w, &DVector::from_column_slice(v), &x), b.as_slice(), h);
    let nx = central_diff(|v| loss(&w, &b, &DMatrix::from_column_slice(d, m, v)), x.as_slice(), h);
    Ok([
        rel_err(out.grad_w.as_slice(), &nw),
        rel_err(out.grad_b.as_slice(), &nb),
        rel_err(out.grad_features.as_slice(), &nx),
    ])
}

fn weight_blocks(rng: &mut ChaCha8Rng, h: f64) -> Result<[f64; 2]> {
    let classes = rng.random_range(2..=4);
    let order = rng.random_range(2..=4);
    let d = rng.random_range(2..=4);
    let mut cfg = AlignmentConfig::new(classes, order, true)?
        .with_strengths(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
    cfg.alpha1 = rng.random_range(0.1..2.0);
    cfg.alpha2 = rng.random_range(0.1..2.0);
    cfg.zeta
        .iter_mut()
        .flatten()
        .for_each(|z| *z = rng.random_range(0.5..1.5));
    cfg.zeta_bar.iter_mut().for_each(|z| *z = rng.random_range(0.5..1.5));
    let mats: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..classes)
        .map(|_| {
            let (n, nt) = (rng.random_range(2..=6), rng.random_range(2..=6));
            (random_matrix(rng, d, n), random_matrix(rng, d, nt))
        })
        .collect();
    let pairs: Vec<ClassPair<'_>> = mats
        .iter()
        .enumerate()
        .map(|(c, (s, t))| ClassPair {
            class_id: c,
            src: s,
            tgt: t,
        })
        .collect();
    let base = alignment(&pairs, &cfg, false)?;
    let g = grad_weights(&cfg, &base.scatter_dists, &base.mean_dists)?;

    let zeta_flat: Vec<f64> = cfg.zeta.iter().flatten().copied().collect();
    let nz = central_diff(
        |v| {
            let mut c2 = cfg.clone();
            for (k, z) in c2.zeta.iter_mut().enumerate() {
                z.copy_from_slice(&v[k * classes..(k + 1) * classes]);
            }
            alignment(&pairs, &c2, false)
                .map(|o| o.breakdown.total)
                .unwrap_or(f64::NAN)
        },
        &zeta_flat,
        h,
    );
    let nzb = central_diff(
        |v| {
            let mut c2 = cfg.clone();
            c2.zeta_bar.copy_from_slice(v);
            alignment(&pairs, &c2, false)
                .map(|o| o.breakdown.total)
                .unwrap_or(f64::NAN)
        },
        &cfg.zeta_bar,
        h,
    );
    let gz: Vec<f64> = g.zeta.iter().flatten().copied().collect();
    Ok([rel_err(&gz, &nz), rel_err(&g.zeta_bar, &nzb)])
}

fn projection_block(rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let d = rng.random_range(2..=6);
    let m = rng.random_range(2..=6);
    let raw = random_matrix(rng, d, m) * 2.0;
    let upstream = random_matrix(rng, d, m);
    // Small enough that some columns are projected.
    let tau = rng.random_range(0.5..2.0);
    let analytic = project_backward(&raw, &upstream, tau);
    let numeric = central_diff(
        |v| project_columns(&DMatrix::from_column_slice(d, m, v), tau).dot(&upstream),
        raw.as_slice(),
        h,
    );
    rel_err(analytic.as_slice(), &numeric)
}

/// Random small model and batch used by the end-to-end objective check.
pub fn random_objective_instance(
    rng: &mut ChaCha8Rng,
    dual: bool,
    weighted: bool,
) -> Result<(TwoStreamModel, Batch, AlignmentConfig)> {
    let input_dim = rng.random_range(2..=4);
    let classes = rng.random_range(2..=3);
    let mcfg = ModelConfig {
        hidden: rng.random_range(3..=6),
        feat_dim: rng.random_range(2..=4),
        lambda: 0.1,
        lambda_star: 0.05,
        beta_prime: 0.3,
        tau: rng.random_range(1.0..3.0),
        dual_classifier: dual,
    };
    let mut model = TwoStreamModel::new(input_dim, classes, mcfg, rng.random())?;
    // Separate the streams and give the classifier some weight.
    let mut flat = model.params.to_flat();
    flat.iter_mut().for_each(|p| *p += rng.random_range(-0.5..0.5));
    model.params.set_flat(&flat)?;
    let ns = classes * rng.random_range(2..=4);
    let nt = classes * rng.random_range(2..=3);
    let batch = Batch {
        src_inputs: random_matrix(rng, input_dim, ns) * 2.0,
        src_labels: (0..ns).map(|j| j % classes).collect(),
        tgt_inputs: random_matrix(rng, input_dim, nt) * 2.0,
        tgt_labels: (0..nt).map(|j| j % classes).collect(),
    };
    let order = if weighted { rng.random_range(2..=4) } else { 2 };
    let mut cfg = AlignmentConfig::new(classes, order, weighted)?.with_strengths(0.7, 0.4);
    if weighted {
        cfg.alpha1 = 0.2;
        cfg.alpha2 = 0.3;
        cfg.zeta
            .iter_mut()
            .flatten()
            .for_each(|z| *z = rng.random_range(0.5..1.5));
        cfg.zeta_bar.iter_mut().for_each(|z| *z = rng.random_range(0.5..1.5));
    }
    Ok((model, batch, cfg))
}

/// Error of the full objective's parameter gradient (and weight gradient
/// when weighted).
pub fn objective_block(rng: &mut ChaCha8Rng, h: f64, dual: bool, weighted: bool) -> Result<f64> {
    let (model, batch, cfg) = random_objective_instance(rng, dual, weighted)?;
    let out = full_objective(&model, &batch, &cfg)?;
    let x = model.params.to_flat();
    let numeric = central_diff(
        |v| {
            let mut m = model.clone();
            m.params.set_flat(v).expect("same length");
            full_objective(&m, &batch, &cfg)
                .map(|o| o.breakdown.total)
                .unwrap_or(f64::NAN)
        },
        &x,
        h,
    );
    let mut err = rel_err(&out.grads.to_flat(), &numeric);
    if let Some(wg) = &out.weight_grads {
        let zeta_flat: Vec<f64> = cfg.zeta.iter().flatten().chain(&cfg.zeta_bar).copied().collect();
        let classes = cfg.num_classes;
        let nz = central_diff(
            |v| {
                let mut c2 = cfg.clone();
                for (k, z) in c2.zeta.iter_mut().enumerate() {
                    z.copy_from_slice(&v[k * classes..(k + 1) * classes]);
                }
                let off = c2.zeta.len() * classes;
                c2.zeta_bar.copy_from_slice(&v[off..]);
                full_objective(&model, &batch, &c2)
                    .map(|o| o.breakdown.total)
                    .unwrap_or(f64::NAN)
            },
            &zeta_flat,
            h,
        );
        let analytic: Vec<f64> = wg.zeta.iter().flatten().chain(&wg.zeta_bar).copied().collect();
        err = err.max(rel_err(&analytic, &nz));
    }
    Ok(err)
}

/// Relative deviation between the kernelized order-2 gradient and the
/// covariance-based one.
pub fn cross_check_order2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inst = pair_instance(rng, 8);
    let (ks, kt) = grad_kernelized_align(&inst.src, &inst.tgt, 2)?;
    let (es, et) = grad_explicit_cov_align(&inst.src, &inst.tgt, 2)?;
    Ok(rel_err(&joined(&ks, &kt), &joined(&es, &et)))
}

/// Runs every block and returns one report row per block.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<BlockReport>> {
    if cfg.instances == 0 {
        return Err(SohotError::arg("gradcheck needs at least one instance"));
    }
    if cfg.orders.iter().any(|&r| r < 2) {
        return Err(SohotError::arg("kernelized gradient orders must be >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match rows.iter_mut().find(|(n, _)| n == name) {
        // NaN propagates so a broken block can never report success.
        Some((_, e)) => {
            *e = if err.is_nan() || e.is_nan() {
                f64::NAN
            } else {
                e.max(err)
            }
        }
        None => rows.push((name.to_string(), err)),
    };

    for _ in 0..cfg.instances {
        let [w, b, x] = softmax_blocks(&mut rng, h)?;
        record("softmax_w", w);
        record("softmax_b", b);
        record("softmax_features", x);

        let inst = pair_instance(&mut rng, 6);
        let g = grad_explicit_cov_align(&inst.src, &inst.tgt, 2)?;
        record(
            "cov_align",
            check_pair_grad(&inst, h, g, |a, b| {
                let x = compute_scatter(a, 2).and_then(|x| compute_scatter(b, 2).map(|y| (x, y)));
                x.and_then(|(x, y)| tensor_frob_dist_sq(&x, &y)).unwrap_or(f64::NAN)
            }),
        );

        let inst = pair_instance(&mut rng, 6);
        let g = grad_mean_align(&inst.src, &inst.tgt)?;
        record(
            "mean_align",
            check_pair_grad(&inst, h, g, |a, b| {
                (compute_mean(a).expect("nonempty") - compute_mean(b).expect("nonempty")).norm_squared()
            }),
        );

        for &order in &cfg.orders {
            let inst = pair_instance(&mut rng, 6);
            let g = grad_kernelized_align(&inst.src, &inst.tgt, order)?;
            record(
                &format!("kernel_r{order}"),
                check_pair_grad(&inst, h, g, |a, b| kernel_frob_dist_sq(a, b, order).unwrap_or(f64::NAN)),
            );
        }

        let [z, zb] = weight_blocks(&mut rng, h)?;
        record("zeta", z);
        record("zeta_bar", zb);

        record("projection", projection_block(&mut rng, h));
        record("objective_shared", objective_block(&mut rng, h, false, false)?);
        record("objective_weighted", objective_block(&mut rng, h, false, true)?);
        record("objective_dual", objective_block(&mut rng, h, true, false)?);
        record("cross_check_r2", cross_check_order2(&mut rng)?);
    }
    Ok(rows
        .into_iter()
        .map(|(block, max_rel_err)| BlockReport {
            block,
            instances: cfg.instances,
            max_rel_err,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic_is_exact_enough() {
        let g = central_diff(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rel_err_is_scale_free() {
        assert_eq!(rel_err(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((rel_err(&[10.0, 1.0], &[10.0, 1.1]) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn small_run_passes() {
        let rows = run_gradcheck(&GradcheckConfig {
            instances: 2,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(rows.iter().any(|r| r.block == "kernel_r4"));
        for r in &rows {
            assert!(r.max_rel_err <= 1e-5, "{} {}", r.block, r.max_rel_err);
        }
    }
}
