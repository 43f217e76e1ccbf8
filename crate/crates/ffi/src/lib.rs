//! C ABI over `dpmm-core`.
//!
//! Handles are opaque pointers created by `*_new`/`*_load`/`dpmm_run` and
//! released with the matching `*_free`. Every fallible call returns a
//! [`DpmmStatus`]; on failure [`dpmm_last_error`] describes the cause for
//! the calling thread. No call unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dpmm_core::data::{gen_synthetic, DataKind, Dataset, SyntheticParams};
use dpmm_core::expfam::FamilySpec;
use dpmm_core::metrics::{joint_log_likelihood, variation_of_information};
use dpmm_core::runtime::{run, Mode, RunConfig, RunError, RunOutcome};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    RunError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// A loaded or generated dataset.
pub struct DpmmDataset {
    inner: Dataset,
}

/// The result of a finished run.
pub struct DpmmRun {
    outcome: RunOutcome,
    family: FamilySpec,
}

/// Run settings. Obtain defaults from [`dpmm_run_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DpmmRunOptions {
    pub workers: u32,
    pub iterations: u64,
    pub sweeps_per_cycle: u32,
    pub pooled_iters: u32,
    pub subcomp_cap: u32,
    pub seed: u64,
    /// Overrides the family string's concentration when positive.
    pub alpha: f64,
    pub shuffle: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

/// Runs `f`, records its error message and maps panics to `Panic`.
fn guard(f: impl FnOnce() -> Result<(), (DpmmStatus, String)>) -> DpmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DpmmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DpmmStatus::Panic
        }
    }
}

fn invalid(msg: impl Into<String>) -> (DpmmStatus, String) {
    (DpmmStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> (DpmmStatus, String) {
    (DpmmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DpmmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (DpmmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DpmmStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `src` into a caller buffer of `cap` entries, always reporting the
/// required length through `len`.
unsafe fn copy_out(src: &[u64], out: *mut u64, cap: usize, len: *mut usize) -> Result<(), (DpmmStatus, String)> {
    *out_arg(len, "len")? = src.len();
    if out.is_null() && cap == 0 {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    if cap < src.len() {
        return Err((
            DpmmStatus::BufferTooSmall,
            format!("{} entries needed, buffer holds {cap}", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dpmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates isotropic Gaussian clusters with truth labels.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_generate(
    clusters: usize,
    min_size: usize,
    max_size: usize,
    dim: usize,
    sigma: f64,
    half_width: f64,
    seed: u64,
    out: *mut *mut DpmmDataset,
) -> DpmmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = SyntheticParams {
            clusters,
            min_size,
            max_size,
            dim,
            sigma,
            seed,
            half_width,
        };
        let inner = gen_synthetic(&params).map_err(|e| (DpmmStatus::DataError, e.to_string()))?;
        *out = Box::into_raw(Box::new(DpmmDataset { inner }));
        Ok(())
    })
}

/// Copies `rows * dim` row-major values. `counts` selects count data
/// (multinomial) instead of real vectors.
///
/// # Safety
/// `values` must point to `rows * dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_from_rows(
    values: *const f64,
    rows: usize,
    dim: usize,
    counts: bool,
    out: *mut *mut DpmmDataset,
) -> DpmmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if values.is_null() {
            return Err(null("values"));
        }
        let n = rows.checked_mul(dim).ok_or_else(|| invalid("rows * dim overflows"))?;
        let values = std::slice::from_raw_parts(values, n).to_vec();
        let kind = if counts { DataKind::Counts } else { DataKind::Dense };
        let inner = Dataset::new(kind, dim, values, None).map_err(|e| (DpmmStatus::DataError, e.to_string()))?;
        *out = Box::into_raw(Box::new(DpmmDataset { inner }));
        Ok(())
    })
}

/// Loads the binary dataset format, or CSV when the path ends in `.csv`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_load(path: *const c_char, out: *mut *mut DpmmDataset) -> DpmmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        let loaded = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Dataset::import_csv(path)
        } else {
            Dataset::load(path)
        };
        let inner = loaded.map_err(|e| (DpmmStatus::DataError, e.to_string()))?;
        *out = Box::into_raw(Box::new(DpmmDataset { inner }));
        Ok(())
    })
}

/// Number of rows (0 for a null handle).
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_len(ds: *const DpmmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Row dimension (0 for a null handle).
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_dim(ds: *const DpmmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Copies the truth labels. `len` receives the row count; pass a null
/// `out` with `cap` 0 to query it.
///
/// # Safety
/// `ds` must be a live handle; `out` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_truth(
    ds: *const DpmmDataset,
    out: *mut u64,
    cap: usize,
    len: *mut usize,
) -> DpmmStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let truth = ds
            .inner
            .truth
            .as_deref()
            .ok_or_else(|| invalid("dataset has no truth labels"))?;
        copy_out(truth, out, cap, len)
    })
}

/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dpmm_dataset_free(ds: *mut DpmmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub extern "C" fn dpmm_run_options_default() -> DpmmRunOptions {
    let base = RunConfig::new(Mode::SyncProg, FamilySpec::gaussian(1, 1.0, 1.0, 1.0));
    DpmmRunOptions {
        workers: base.workers as u32,
        iterations: base.iterations,
        sweeps_per_cycle: base.sweeps_per_cycle as u32,
        pooled_iters: base.pooled_iters as u32,
        subcomp_cap: base.subcomp_cap as u32,
        seed: base.seed,
        alpha: 0.0,
        shuffle: base.shuffle,
    }
}

/// Fits the dataset. `mode` is `serial`, `sync-prog`, `sync-pooled` or
/// `async`; `family` is e.g. `gaussian:dim=2,sigma=1,sigma0=30`. A null
/// `options` uses the defaults.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run(
    ds: *const DpmmDataset,
    mode: *const c_char,
    family: *const c_char,
    options: *const DpmmRunOptions,
    out: *mut *mut DpmmRun,
) -> DpmmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = ref_arg(ds, "dataset")?;
        let mode: Mode = str_arg(mode, "mode")?.parse().map_err(invalid)?;
        let mut family: FamilySpec = str_arg(family, "family")?
            .parse()
            .map_err(|e: dpmm_core::expfam::FamilyError| invalid(e.to_string()))?;
        let opts = options.as_ref().copied().unwrap_or_else(|| dpmm_run_options_default());
        if opts.alpha > 0.0 {
            family = family.with_alpha(opts.alpha);
        }
        let cfg = RunConfig {
            workers: opts.workers as usize,
            iterations: opts.iterations,
            sweeps_per_cycle: opts.sweeps_per_cycle as usize,
            pooled_iters: opts.pooled_iters as usize,
            subcomp_cap: opts.subcomp_cap as usize,
            seed: opts.seed,
            shuffle: opts.shuffle,
            ..RunConfig::new(mode, family)
        };
        let outcome = run(&cfg, &ds.inner).map_err(|e| match e {
            RunError::Config(_) => invalid(e.to_string()),
            other => (DpmmStatus::RunError, other.to_string()),
        })?;
        if let Some(reason) = &outcome.aborted {
            return Err((DpmmStatus::RunError, format!("run aborted: {reason}")));
        }
        *out = Box::into_raw(Box::new(DpmmRun { outcome, family }));
        Ok(())
    })
}

/// Number of components in the final pool (0 for a null handle).
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run_num_components(run: *const DpmmRun) -> usize {
    run.as_ref().map_or(0, |r| r.outcome.pool.len())
}

/// Total messages exchanged, including setup and teardown.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run_total_messages(run: *const DpmmRun) -> u64 {
    run.as_ref().map_or(0, |r| r.outcome.comm.total_msgs())
}

/// Copies the final label of each row. `len` receives the row count.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run_labels(
    run: *const DpmmRun,
    out: *mut u64,
    cap: usize,
    len: *mut usize,
) -> DpmmStatus {
    guard(|| copy_out(&ref_arg(run, "run")?.outcome.labels, out, cap, len))
}

/// Collapsed log-likelihood of the final labels on `ds`.
///
/// # Safety
/// Handles must be live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run_loglik(
    run: *const DpmmRun,
    ds: *const DpmmDataset,
    include_crp: bool,
    out: *mut f64,
) -> DpmmStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let ds = ref_arg(ds, "dataset")?;
        let out = out_arg(out, "out")?;
        *out = joint_log_likelihood(&ds.inner, &run.outcome.labels, &run.family, include_crp)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dpmm_run_free(run: *mut DpmmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Variation of information (nats) between two labelings of `n` rows.
///
/// # Safety
/// `a` and `b` must point to `n` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpmm_variation_of_information(
    a: *const u64,
    b: *const u64,
    n: usize,
    out: *mut f64,
) -> DpmmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if a.is_null() || b.is_null() {
            return Err(null("labels"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        *out = variation_of_information(a, b).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}
