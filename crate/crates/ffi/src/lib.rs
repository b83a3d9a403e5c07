//! C ABI over the trajectory predictor.
//!
//! Every call returns an [`SgnetStatus`]; on failure the message is
//! available from [`sgnet_last_error`] on the same thread. Models are
//! opaque handles created by [`sgnet_model_load`] and released with
//! [`sgnet_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sgnet::config::RunConfig;
use sgnet::data::{observed_window, DatasetSpec};
use sgnet::model::{Mode, Sgnet};
use sgnet::train::{predict_windows, Checkpoint, EvalOptions};
use sgnet::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Dimension = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded model plus the data settings it was trained with.
pub struct SgnetModel {
    model: Sgnet<f32>,
    data: DatasetSpec,
}

/// Sizes a caller needs to shape inputs and outputs.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SgnetModelInfo {
    /// Observed rows the model consumes.
    pub obs_len: usize,
    /// Predicted steps per proposal.
    pub pred_len: usize,
    /// Columns per position row: 2 for centroids, 4 for boxes.
    pub output_dim: usize,
    /// Auxiliary columns per row; 0 when the model takes none.
    pub aux_dim: usize,
    /// Proposals produced when `k` is 0.
    pub default_k: usize,
    /// 1 for the sampling model, 0 for the single-proposal model.
    pub stochastic: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgnetStatus {
    match e {
        Error::Dimension { .. } => SgnetStatus::Dimension,
        Error::NonFinite(_) => SgnetStatus::NonFinite,
        Error::Checkpoint(_) => SgnetStatus::Checkpoint,
        Error::Io(_) => SgnetStatus::Io,
        Error::Contract(_) | Error::Config(_) | Error::Mode(_) | Error::Parse { .. } | Error::Validation(_) => {
            SgnetStatus::InvalidArgument
        }
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SgnetStatus, String)>) -> SgnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgnetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {}", msg));
            SgnetStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SgnetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SgnetStatus, String) {
    (SgnetStatus::NullPointer, format!("{} is null", what))
}

fn load(path: &Path) -> Result<SgnetModel, Error> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_checkpoint(&ckpt)?;
    let (m, d) = (&ckpt.model, &cfg.data);
    if d.input_dim() != m.input_dim || d.coords.dim() != m.output_dim || d.obs_len != m.obs_len || d.pred_len != m.pred_len {
        return Err(Error::Checkpoint(
            "the checkpoint does not record data settings matching its model".into(),
        ));
    }
    Ok(SgnetModel {
        model: ckpt.to_model()?,
        data: cfg.data,
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sgnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sgnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `sgnet train`. On success `*out` owns a new
/// handle; on failure it is set to null.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgnet_model_load(path: *const c_char, out: *mut *mut SgnetModel) -> SgnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SgnetStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`sgnet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgnet_model_free(model: *mut SgnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `*out` with the model's sizes.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgnet_model_info(model: *const SgnetModel, out: *mut SgnetModelInfo) -> SgnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = m.model.config();
        *out = SgnetModelInfo {
            obs_len: c.obs_len,
            pred_len: c.pred_len,
            output_dim: c.output_dim,
            aux_dim: c.aux_dim,
            default_k: c.proposals(),
            stochastic: u8::from(c.mode == Mode::Stochastic),
        };
        Ok(())
    })
}

/// Predicts one agent's future from its position history.
///
/// `history` holds `rows × output_dim` values in original coordinates,
/// oldest first, with `rows ≥ obs_len`; rows before the last `obs_len`
/// only feed the motion features. `aux` is null when the model takes no
/// auxiliary input, otherwise `rows × aux_dim` values. `step_secs` is the
/// time between rows. `k = 0` uses the model's proposal count;
/// single-proposal models always produce one.
///
/// Writes `K × pred_len × output_dim` values to `out` (proposal-major) and
/// their count to `*written`. If `out_len` is too small nothing is written
/// except the required count.
///
/// # Safety
/// Pointers must be valid for the lengths described above.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sgnet_predict(
    model: *const SgnetModel,
    history: *const f64,
    rows: usize,
    aux: *const f64,
    step_secs: f64,
    k: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> SgnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        *written = 0;
        if history.is_null() {
            return Err(null("history"));
        }
        let c = m.model.config();
        let too_long = || (SgnetStatus::InvalidArgument, "history is too long".to_string());
        let n = rows.checked_mul(c.output_dim).ok_or_else(too_long)?;
        let n_aux = rows.checked_mul(c.aux_dim).ok_or_else(too_long)?;
        let hist: Vec<Vec<f64>> = std::slice::from_raw_parts(history, n)
            .chunks(c.output_dim)
            .map(<[f64]>::to_vec)
            .collect();
        let aux_rows: Vec<Vec<f64>> = match (aux.is_null(), c.aux_dim) {
            (true, 0) => Vec::new(),
            (false, 0) => {
                return Err((SgnetStatus::InvalidArgument, "the model takes no auxiliary input".into()));
            }
            (true, _) => return Err(null("aux")),
            (false, a) => std::slice::from_raw_parts(aux, n_aux).chunks(a).map(<[f64]>::to_vec).collect(),
        };
        let window = observed_window(&hist, &aux_rows, &m.data, step_secs).map_err(lib_err)?;
        let opts = EvalOptions {
            k: (k > 0).then_some(k),
            seed,
            parallel: false,
            ..EvalOptions::default()
        };
        let preds = predict_windows(&m.model, std::slice::from_ref(&window), &opts).map_err(lib_err)?;
        let flat: Vec<f64> = preds[0].iter().flatten().flatten().copied().collect();
        *written = flat.len();
        if out_len < flat.len() {
            return Err((
                SgnetStatus::BufferTooSmall,
                format!("output needs {} values, buffer holds {}", flat.len(), out_len),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, flat.len()).copy_from_slice(&flat);
        Ok(())
    })
}
