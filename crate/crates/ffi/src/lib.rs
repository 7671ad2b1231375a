//! C ABI over the `sohot` library.
//!
//! Every fallible function returns a [`SohotStatus`]; on failure the
//! message is available from [`sohot_last_error`] on the same thread.
//! Objects are opaque handles created by `*_new`/`*_load`/`*_generate`
//! functions and released with the matching `*_free`. Matrices cross the
//! boundary column-major, one sample per column.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use sohot::data::{generate, load_features, save_features, DomainDataset, ShiftSpec};
use sohot::kernel::{cost_model, kernel_frob_dist_sq, CostMode};
use sohot::losses::{grad_kernelized_align, AlignmentConfig};
use sohot::model::{ModelConfig, TwoStreamModel};
use sohot::tensor::{compute_scatter, tensor_frob_dist_sq, unique_coeff_count, ScatterTensor};
use sohot::trainer::{benchmark_config, evaluate, train, BenchVariant, Checkpoint, ObjectiveKind, TrainConfig};
use sohot::SohotError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SohotStatus {
    Ok = 0,
    Argument = 1,
    Shape = 2,
    Capacity = 3,
    State = 4,
    Divergence = 5,
    Parse = 6,
    EmptyDataset = 7,
    Io = 8,
    NullPointer = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SohotCostMode {
    Explicit = 0,
    Kernelized = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SohotSplit {
    SourceTrain = 0,
    SourceTest = 1,
    TargetTrain = 2,
    TargetTest = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SohotBenchVariant {
    SourceTarget = 0,
    So = 1,
    SoWeighted = 2,
}

/// Training settings. Obtain defaults from [`sohot_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SohotTrainOptions {
    pub order: usize,
    pub weighted: bool,
    pub sigma1: f64,
    pub sigma2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub feat_dim: usize,
    pub freeze_input_layer: bool,
    pub baseline: bool,
}

/// Feature matrix, `dim` rows by `n` columns.
pub struct SohotFeatures {
    inner: DMatrix<f64>,
}

/// Explicit scatter tensor with its mean.
pub struct SohotScatter {
    inner: ScatterTensor,
}

/// Four-split source/target dataset.
pub struct SohotDataset {
    inner: DomainDataset,
}

/// Trained two-stream model.
pub struct SohotModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &SohotError) -> SohotStatus {
    match err {
        SohotError::Argument(_) => SohotStatus::Argument,
        SohotError::Shape(_) => SohotStatus::Shape,
        SohotError::Capacity { .. } => SohotStatus::Capacity,
        SohotError::State(_) => SohotStatus::State,
        SohotError::Divergence { .. } => SohotStatus::Divergence,
        SohotError::Parse { .. } => SohotStatus::Parse,
        SohotError::EmptyDataset(_) => SohotStatus::EmptyDataset,
        SohotError::Io(_) | SohotError::Serde(_) => SohotStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(SohotError),
}

impl From<SohotError> for Failure {
    fn from(e: SohotError) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SohotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SohotStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            SohotStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SohotStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Lib(SohotError::Argument("path is not valid UTF-8".into())))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sohot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `dim * n` column-major values into a new feature handle.
///
/// # Safety
/// `data` must point to `dim * n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_features_new(
    data: *const f64,
    dim: usize,
    n: usize,
    out: *mut *mut SohotFeatures,
) -> SohotStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        if dim == 0 || n == 0 {
            return Err(SohotError::Argument("features need dim >= 1 and n >= 1".into()).into());
        }
        let len = dim
            .checked_mul(n)
            .ok_or_else(|| SohotError::Argument("dim * n overflows".into()))?;
        let values = std::slice::from_raw_parts(data, len);
        let inner = DMatrix::from_column_slice(dim, n, values);
        *out = Box::into_raw(Box::new(SohotFeatures { inner }));
        Ok(())
    })
}

/// # Safety
/// `f` must come from `sohot_features_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sohot_features_free(f: *mut SohotFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// `f` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_scatter_new(
    f: *const SohotFeatures,
    order: usize,
    out: *mut *mut SohotScatter,
) -> SohotStatus {
    guard(|| {
        let f = deref(f, "features")?;
        let out = out_ref(out, "out")?;
        let inner = compute_scatter(&f.inner, order)?;
        *out = Box::into_raw(Box::new(SohotScatter { inner }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from `sohot_scatter_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sohot_scatter_free(s: *mut SohotScatter) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of stored (unique) coefficients.
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_scatter_len(s: *const SohotScatter, out: *mut usize) -> SohotStatus {
    guard(|| {
        *out_ref(out, "out")? = deref(s, "scatter")?.inner.coeffs().len();
        Ok(())
    })
}

/// Coefficient at a full multi-index of `order` entries, in any order.
///
/// # Safety
/// `index` must point to `order` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_scatter_get(
    s: *const SohotScatter,
    index: *const usize,
    order: usize,
    out: *mut f64,
) -> SohotStatus {
    guard(|| {
        let s = deref(s, "scatter")?;
        let out = out_ref(out, "out")?;
        if index.is_null() {
            return Err(Failure::Null("index"));
        }
        if order != s.inner.order() {
            return Err(SohotError::Shape(format!(
                "index has {order} entries, tensor order is {}",
                s.inner.order()
            ))
            .into());
        }
        *out = s.inner.get(std::slice::from_raw_parts(index, order))?;
        Ok(())
    })
}

/// Squared Frobenius distance between two explicit tensors.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_scatter_dist_sq(
    a: *const SohotScatter,
    b: *const SohotScatter,
    out: *mut f64,
) -> SohotStatus {
    guard(|| {
        *out_ref(out, "out")? = tensor_frob_dist_sq(&deref(a, "a")?.inner, &deref(b, "b")?.inner)?;
        Ok(())
    })
}

/// Squared distance between the order-`order` scatter tensors of two
/// feature sets, computed from Gram matrices.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_kernel_dist_sq(
    src: *const SohotFeatures,
    tgt: *const SohotFeatures,
    order: usize,
    out: *mut f64,
) -> SohotStatus {
    guard(|| {
        *out_ref(out, "out")? = kernel_frob_dist_sq(&deref(src, "src")?.inner, &deref(tgt, "tgt")?.inner, order)?;
        Ok(())
    })
}

/// Gradient of [`sohot_kernel_dist_sq`] with respect to every feature,
/// written column-major into buffers shaped like the inputs.
///
/// # Safety
/// `grad_src` and `grad_tgt` must hold `dim * N` and `dim * N*` doubles.
#[no_mangle]
pub unsafe extern "C" fn sohot_kernel_grad(
    src: *const SohotFeatures,
    tgt: *const SohotFeatures,
    order: usize,
    grad_src: *mut f64,
    grad_tgt: *mut f64,
) -> SohotStatus {
    guard(|| {
        let src = deref(src, "src")?;
        let tgt = deref(tgt, "tgt")?;
        if grad_src.is_null() || grad_tgt.is_null() {
            return Err(Failure::Null("gradient buffer"));
        }
        let (gs, gt) = grad_kernelized_align(&src.inner, &tgt.inner, order)?;
        std::slice::from_raw_parts_mut(grad_src, gs.len()).copy_from_slice(gs.as_slice());
        std::slice::from_raw_parts_mut(grad_tgt, gt.len()).copy_from_slice(gt.as_slice());
        Ok(())
    })
}

/// `binom(d + r - 1, r)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_unique_coeff_count(d: usize, r: usize, out: *mut u64) -> SohotStatus {
    guard(|| {
        *out_ref(out, "out")? = unique_coeff_count(d, r)?;
        Ok(())
    })
}

/// Leading-term operation count of one distance evaluation.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_cost_model(
    d: usize,
    n_src: usize,
    n_tgt: usize,
    order: usize,
    mode: SohotCostMode,
    out: *mut u64,
) -> SohotStatus {
    guard(|| {
        let mode = match mode {
            SohotCostMode::Explicit => CostMode::Explicit,
            SohotCostMode::Kernelized => CostMode::Kernelized,
        };
        *out_ref(out, "out")? = cost_model(d, n_src, n_tgt, order, mode)?;
        Ok(())
    })
}

/// The default synthetic shift benchmark for `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_dataset_generate_benchmark(seed: u64, out: *mut *mut SohotDataset) -> SohotStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = generate(&ShiftSpec::benchmark(seed))?;
        *out = Box::into_raw(Box::new(SohotDataset { inner }));
        Ok(())
    })
}

/// Reads a `domain,split,label,f0,...` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_dataset_load(path: *const c_char, out: *mut *mut SohotDataset) -> SohotStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = load_features(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SohotDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sohot_dataset_save(ds: *const SohotDataset, path: *const c_char) -> SohotStatus {
    guard(|| {
        save_features(&deref(ds, "dataset")?.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_dataset_split_len(
    ds: *const SohotDataset,
    split: SohotSplit,
    out: *mut usize,
) -> SohotStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.inner;
        *out_ref(out, "out")? = match split {
            SohotSplit::SourceTrain => ds.source_train.len(),
            SohotSplit::SourceTest => ds.source_test.len(),
            SohotSplit::TargetTrain => ds.target_train.len(),
            SohotSplit::TargetTest => ds.target_test.len(),
        };
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sohot_dataset_free(ds: *mut SohotDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub extern "C" fn sohot_train_options_default() -> SohotTrainOptions {
    let m = ModelConfig::default();
    SohotTrainOptions {
        order: 2,
        weighted: false,
        sigma1: AlignmentConfig::DEFAULT_SIGMA1,
        sigma2: AlignmentConfig::DEFAULT_SIGMA2,
        alpha1: AlignmentConfig::DEFAULT_ALPHA,
        alpha2: AlignmentConfig::DEFAULT_ALPHA,
        epochs: TrainConfig::DEFAULT_EPOCHS,
        learning_rate: TrainConfig::DEFAULT_LR,
        momentum: TrainConfig::DEFAULT_MOMENTUM,
        batch_size: TrainConfig::DEFAULT_BATCH,
        seed: 0,
        hidden: m.hidden,
        feat_dim: m.feat_dim,
        freeze_input_layer: false,
        baseline: false,
    }
}

fn fit(ds: &DomainDataset, mcfg: ModelConfig, tcfg: TrainConfig) -> Result<Checkpoint, SohotError> {
    let classes = ds.num_classes.max(2);
    let model = TwoStreamModel::new(ds.dim(), classes, mcfg, tcfg.seed)?;
    let eval = (!ds.target_test.is_empty()).then_some(&ds.target_test);
    let outcome = train(model, &ds.source_train, &ds.target_train, eval, &tcfg)?;
    Ok(Checkpoint::new(&outcome, &tcfg))
}

/// Trains on the training splits of `ds`.
///
/// # Safety
/// `ds` and `opts` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_train(
    ds: *const SohotDataset,
    opts: *const SohotTrainOptions,
    out: *mut *mut SohotModel,
) -> SohotStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.inner;
        let o = *deref(opts, "options")?;
        let out = out_ref(out, "out")?;
        let classes = ds.num_classes.max(2);
        let mcfg = ModelConfig {
            hidden: o.hidden,
            feat_dim: o.feat_dim,
            tau: 16.0 * o.feat_dim as f64,
            ..ModelConfig::default()
        };
        let mut align = AlignmentConfig::new(classes, o.order, o.weighted)?.with_strengths(o.sigma1, o.sigma2);
        align.alpha1 = o.alpha1;
        align.alpha2 = o.alpha2;
        let mut tcfg = TrainConfig::new(align, o.seed);
        tcfg.epochs = o.epochs;
        tcfg.learning_rate = o.learning_rate;
        tcfg.momentum = o.momentum;
        tcfg.batch_size = o.batch_size;
        tcfg.freeze_input_layer = o.freeze_input_layer;
        if o.baseline {
            tcfg.objective = ObjectiveKind::PooledBaseline;
        }
        let inner = fit(ds, mcfg, tcfg)?;
        *out = Box::into_raw(Box::new(SohotModel { inner }));
        Ok(())
    })
}

/// Trains one configuration of the synthetic benchmark.
///
/// # Safety
/// `ds` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_train_benchmark(
    ds: *const SohotDataset,
    variant: SohotBenchVariant,
    seed: u64,
    out: *mut *mut SohotModel,
) -> SohotStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.inner;
        let out = out_ref(out, "out")?;
        let variant = match variant {
            SohotBenchVariant::SourceTarget => BenchVariant::SourceTarget,
            SohotBenchVariant::So => BenchVariant::So,
            SohotBenchVariant::SoWeighted => BenchVariant::SoWeighted,
        };
        let tcfg = benchmark_config(variant, ds.num_classes.max(2), seed)?;
        let inner = fit(ds, ModelConfig::default(), tcfg)?;
        *out = Box::into_raw(Box::new(SohotModel { inner }));
        Ok(())
    })
}

/// Target-stream accuracy on the target test split of `ds`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_evaluate(m: *const SohotModel, ds: *const SohotDataset, out: *mut f64) -> SohotStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let ds = deref(ds, "dataset")?;
        *out_ref(out, "out")? = evaluate(&m.inner.model, &ds.inner.target_test)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sohot_model_save(m: *const SohotModel, path: *const c_char) -> SohotStatus {
    guard(|| {
        deref(m, "model")?.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohot_model_load(path: *const c_char, out: *mut *mut SohotModel) -> SohotStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SohotModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sohot_model_free(m: *mut SohotModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
