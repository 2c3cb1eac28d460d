//! C interface to trained memdgm models.
//!
//! Every function returns a [`MemdgmStatus`]; on failure the message is
//! available from [`memdgm_last_error`] on the same thread. Buffers are
//! caller-owned and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use memdgm::autodiff::{RngStream, Tensor};
use memdgm::checkpoint::Checkpoint;
use memdgm::cli::preset;
use memdgm::evaluation::{count_params, impute, test_loglik, Mask, MaskKind};
use memdgm::model::{generate, Nets};
use memdgm::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemdgmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Shape = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct MemdgmModel {
    nets: Nets<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MemdgmStatus {
    match e {
        Error::Shape { .. } => MemdgmStatus::Shape,
        Error::Domain { .. } | Error::NonFinite { .. } | Error::Gradient(_) => MemdgmStatus::Numeric,
        Error::InvalidArgument(_) | Error::Config { .. } => MemdgmStatus::InvalidArgument,
        Error::Parse { .. } | Error::Checkpoint(_) => MemdgmStatus::Format,
        Error::Io(_) => MemdgmStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MemdgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MemdgmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MemdgmStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
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
            MemdgmStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const MemdgmModel) -> Result<&'a MemdgmModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(n: usize, d: usize) -> Result<usize, Failure> {
    n.checked_mul(d).ok_or_else(|| Failure::Core(Error::InvalidArgument("buffer size overflows".into())))
}

fn need(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got < want {
        return Err(Failure::Core(Error::InvalidArgument(format!("{what} holds {got} values, {want} needed"))));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn memdgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn memdgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a handle to be released
/// with [`memdgm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn memdgm_model_load(path: *const c_char, out: *mut *mut MemdgmModel) -> MemdgmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let ck = Checkpoint::<f32>::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(MemdgmModel { nets: ck.nets }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`memdgm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn memdgm_model_free(model: *mut MemdgmModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Pixels per image.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn memdgm_model_input_dim(model: *const MemdgmModel, out: *mut usize) -> MemdgmStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = m.nets.arch().input_dim;
        Ok(())
    })
}

/// Latent dimensionality.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn memdgm_model_latent_dim(model: *const MemdgmModel, out: *mut usize) -> MemdgmStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = m.nets.arch().latent_dim;
        Ok(())
    })
}

/// Draws `n` prior samples and writes their decoded pixel means into `out`
/// (`n * input_dim` values).
///
/// # Safety
/// `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn memdgm_generate(
    model: *const MemdgmModel,
    n: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> MemdgmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let want = checked_len(n, m.nets.arch().input_dim)?;
        need(out_len, want, "out")?;
        let out = slice_out(out, want, "out")?;
        if n == 0 {
            return Ok(());
        }
        let images = generate(&m.nets, n, &mut RngStream::new(seed, "generate"), &[])?;
        out.copy_from_slice(images.data());
        Ok(())
    })
}

/// Importance-sampled log-likelihood of each of `n` images with `k` samples,
/// written to `out` (`n` values, nats).
///
/// # Safety
/// `x` must hold `n * input_dim` floats and `out` `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn memdgm_log_likelihood(
    model: *const MemdgmModel,
    x: *const f32,
    n: usize,
    k: usize,
    seed: u64,
    out: *mut f64,
) -> MemdgmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.nets.arch().input_dim;
        let x = slice_in(x, checked_len(n, d)?, "x")?;
        let out = slice_out(out, n, "out")?;
        if n == 0 {
            return Ok(());
        }
        let data = Tensor::new(&[n, d], x.to_vec())?;
        let report = test_loglik(&data, &m.nets, seed, k, k.min(1000))?;
        out.copy_from_slice(&report.per_datum);
        Ok(())
    })
}

/// Fills in missing pixels. `missing` flags each pixel (nonzero = missing);
/// observed pixels are copied through unchanged. Writes the final images to
/// `out` (`n * input_dim` values).
///
/// # Safety
/// `x`, `missing` and `out` must each hold `n * input_dim` elements.
#[no_mangle]
pub unsafe extern "C" fn memdgm_impute(
    model: *const MemdgmModel,
    x: *const f32,
    missing: *const u8,
    n: usize,
    steps: usize,
    seed: u64,
    out: *mut f32,
) -> MemdgmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.nets.arch().input_dim;
        let len = checked_len(n, d)?;
        let x = slice_in(x, len, "x")?;
        let flags = slice_in(missing, len, "missing")?;
        let out = slice_out(out, len, "out")?;
        if n == 0 {
            return Ok(());
        }
        let masks: Vec<Mask> = flags
            .chunks(d)
            .map(|row| {
                let missing: Vec<bool> = row.iter().map(|&b| b != 0).collect();
                let frac = missing.iter().filter(|&&b| b).count() as f64 / d as f64;
                Mask { kind: MaskKind::Rand(frac), missing }
            })
            .collect();
        let data = Tensor::new(&[n, d], x.to_vec())?;
        let trace = impute(&data, &masks, &m.nets, &mut RngStream::new(seed, "impute"), steps, false)?;
        out.copy_from_slice(trace.images.last().expect("initial state").data());
        Ok(())
    })
}

/// Closed-form trainable parameter count of a named architecture
/// (`mnist-mem`, `mnist-vae`, `mnist-vae-530`, `mnist-vis`, `ocr-mem`,
/// `ocr-vae`, `frey-mem`).
///
/// # Safety
/// `name` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn memdgm_count_params(name: *const c_char, out: *mut u64) -> MemdgmStatus {
    guard(|| {
        if name.is_null() {
            return Err(Failure::Null("name"));
        }
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let name = CStr::from_ptr(name).to_string_lossy();
        let arch = preset(&name).ok_or_else(|| Error::InvalidArgument(format!("unknown architecture `{name}`")))?;
        *out = count_params(&arch)?.total() as u64;
        Ok(())
    })
}
