//! C ABI over `opflow`: load a trained checkpoint, then sample, push functions
//! through the flow in either direction, and score log-likelihoods.
//!
//! Every entry point returns an [`OpflowStatus`]. On failure the message is
//! kept per thread and can be copied out with [`opflow_last_error`]. Values are
//! laid out `[sample][channel][node]` with nodes in row-major grid order, the
//! same layout the library uses. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use opflow::{Error, FunctionBatch, Grid, OpFlowModel};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numerical = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque handle to a loaded model.
pub struct OpflowModel {
    inner: OpFlowModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> OpflowStatus {
    match err {
        Error::InvalidArgument(_) => OpflowStatus::InvalidArgument,
        Error::ShapeMismatch(_) => OpflowStatus::ShapeMismatch,
        Error::NotPositiveDefinite { .. }
        | Error::Numerical(_)
        | Error::RejectionBudget { .. }
        | Error::NonFiniteLoss { .. } => OpflowStatus::Numerical,
        Error::Config(_) => OpflowStatus::Config,
        Error::Format { .. } => OpflowStatus::Format,
        Error::Io { .. } => OpflowStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Small { need: usize, have: usize },
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OpflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OpflowStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OpflowStatus::NullPointer
        }
        Ok(Err(Failure::Small { need, have })) => {
            set_error(format!("output buffer holds {have} values, {need} needed"));
            OpflowStatus::BufferTooSmall
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            OpflowStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const OpflowModel) -> Result<&'a OpFlowModel, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn grid_from(resolution: *const usize, dims: usize) -> Result<Grid, Failure> {
    let res = slice(resolution, dims, "resolution")?;
    Ok(Grid::new(dims, res)?)
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if dst.len() < src.len() {
        return Err(Failure::Small {
            need: src.len(),
            have: dst.len(),
        });
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn opflow_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by `opflow train`. The handle must be released
/// with [`opflow_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_load(path: *const c_char, out: *mut *mut OpflowModel) -> OpflowStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
        let model = opflow::checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(OpflowModel { inner: model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`opflow_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_free(model: *mut OpflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the channel count, spatial dimension and trainable parameter count.
///
/// # Safety
/// `model` must be a live handle; output pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_info(
    model: *const OpflowModel,
    channels: *mut usize,
    dims: *mut usize,
    parameters: *mut usize,
) -> OpflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        if let Some(c) = channels.as_mut() {
            *c = m.channels();
        }
        if let Some(d) = dims.as_mut() {
            *d = m.config().dims;
        }
        if let Some(p) = parameters.as_mut() {
            *p = m.parameter_count();
        }
        Ok(())
    })
}

/// Draws `count` functions from the model on a grid of `dims` axes with the
/// given per-axis resolution. `out` needs `count * channels * nodes` slots.
///
/// # Safety
/// `resolution` must hold `dims` entries and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_sample(
    model: *const OpflowModel,
    dims: usize,
    resolution: *const usize,
    count: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> OpflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let grid = grid_from(resolution, dims)?;
        let batch = m.sample(&grid, count, seed)?;
        copy_out(batch.values(), slice_mut(out, out_len, "out")?)
    })
}

unsafe fn input_batch(
    m: &OpFlowModel,
    dims: usize,
    resolution: *const usize,
    count: usize,
    values: *const f64,
) -> Result<FunctionBatch, Failure> {
    let grid = grid_from(resolution, dims)?;
    let len = count * m.channels() * grid.node_count();
    let v = slice(values, len, "values")?;
    Ok(FunctionBatch::new(grid, m.channels(), count, v.to_vec())?)
}

/// Maps data functions to the latent space. Writes the latent values to
/// `latent` (same length as the input) and, if `logdet` is non-null, one
/// log-determinant per sample.
///
/// # Safety
/// `values` must hold `count * channels * nodes` values, `latent` `latent_len`
/// writable values, and `logdet` (if non-null) `count` writable values.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_inverse(
    model: *const OpflowModel,
    dims: usize,
    resolution: *const usize,
    count: usize,
    values: *const f64,
    latent: *mut f64,
    latent_len: usize,
    logdet: *mut f64,
) -> OpflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let batch = input_batch(m, dims, resolution, count, values)?;
        let (a, ld) = m.inverse_batch(&batch)?;
        copy_out(a.values(), slice_mut(latent, latent_len, "latent")?)?;
        if !logdet.is_null() {
            copy_out(&ld, slice_mut(logdet, count, "logdet")?)?;
        }
        Ok(())
    })
}

/// Maps latent functions to data space.
///
/// # Safety
/// As for [`opflow_model_inverse`].
#[no_mangle]
pub unsafe extern "C" fn opflow_model_forward(
    model: *const OpflowModel,
    dims: usize,
    resolution: *const usize,
    count: usize,
    latent: *const f64,
    out: *mut f64,
    out_len: usize,
) -> OpflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let batch = input_batch(m, dims, resolution, count, latent)?;
        let u = m.forward_batch(&batch)?;
        copy_out(u.values(), slice_mut(out, out_len, "out")?)
    })
}

/// Exact log-likelihood of each sample at its point evaluations.
///
/// # Safety
/// `values` must hold `count * channels * nodes` values and `out` `count`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn opflow_model_log_likelihood(
    model: *const OpflowModel,
    dims: usize,
    resolution: *const usize,
    count: usize,
    values: *const f64,
    out: *mut f64,
) -> OpflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let batch = input_batch(m, dims, resolution, count, values)?;
        let ll = m.log_likelihood_batch(&batch)?;
        copy_out(&ll, slice_mut(out, count, "out")?)
    })
}
