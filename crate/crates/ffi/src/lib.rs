//! C ABI over the `ript` encoder and evaluation metrics.
//!
//! Every fallible function returns a [`RiptStatus`]; on failure the message
//! is available from [`ript_last_error`] on the same thread. Encoders are
//! opaque handles created by [`ript_encoder_open`] and released with
//! [`ript_encoder_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ript::config::RunConfig;
use ript::eval::{macro_map, nmi, FeatureTable};
use ript::geometry::{normalize_pose, OrientedPointSet};
use ript::pipeline::AnyEncoder;
use ript::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiptStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullOrInvalid = 1,
    Argument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Degenerate = 6,
    Numeric = 7,
    /// An internal panic was caught at the boundary.
    Internal = 8,
}

/// Encoder loaded from a run config and (optionally) a checkpoint.
pub struct RiptEncoder {
    inner: AnyEncoder,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RiptStatus {
    match e {
        Error::Argument(_) => RiptStatus::Argument,
        Error::Config { .. } => RiptStatus::Config,
        Error::Format { .. } => RiptStatus::Format,
        Error::Io { .. } => RiptStatus::Io,
        Error::DegenerateGeometry(_) => RiptStatus::Degenerate,
        Error::Numeric(_) => RiptStatus::Numeric,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RiptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RiptStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null or invalid"));
            RiptStatus::NullOrInvalid
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            RiptStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| Fail::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ript_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the run config at `config_path` and the teacher encoder from
/// `checkpoint_path`. A null checkpoint gives the seeded initial encoder.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `checkpoint_path` null or
/// NUL-terminated; `out` a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn ript_encoder_open(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut RiptEncoder,
) -> RiptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = RunConfig::load(&path_arg(config_path, "config_path")?)?;
        let inner = if checkpoint_path.is_null() {
            AnyEncoder::init(&cfg)?
        } else {
            AnyEncoder::load(&cfg, &path_arg(checkpoint_path, "checkpoint_path")?)?
        };
        *out = Box::into_raw(Box::new(RiptEncoder { inner }));
        Ok(())
    })
}

/// Releases an encoder. Null is ignored.
///
/// # Safety
/// `encoder` must come from [`ript_encoder_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ript_encoder_free(encoder: *mut RiptEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Width of the latent vectors written by [`ript_encoder_embed`]; 0 for null.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ript_encoder_latent_dim(encoder: *const RiptEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.inner.latent_dim())
}

/// Latent of one oriented point set. `points` and `normals` hold `n`
/// xyz triples; the set is centered and scaled before encoding. `out` must
/// have room for `out_len >= latent_dim` values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ript_encoder_embed(
    encoder: *const RiptEncoder,
    points: *const f64,
    normals: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> RiptStatus {
    guard(|| {
        let enc = encoder.as_ref().ok_or(Fail::Null("encoder"))?;
        let p = slice_arg(points, n * 3, "points")?;
        let o = slice_arg(normals, n * 3, "normals")?;
        let dim = enc.inner.latent_dim();
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if out_len < dim {
            return Err(Error::argument(format!("output holds {out_len} values, latent needs {dim}")).into());
        }
        let triples = |s: &[f64]| s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let ps = OrientedPointSet::new(triples(p), triples(o))?;
        let latent = enc.inner.embed(&normalize_pose(&ps)?)?;
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&latent);
        Ok(())
    })
}

/// Retrieval macroMAP (percent) of `count` row-major feature vectors of
/// width `dim` with integer category labels.
///
/// # Safety
/// `features` must hold `count * dim` values, `labels` `count` values, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ript_macro_map(
    features: *const f64,
    count: usize,
    dim: usize,
    labels: *const u32,
    out: *mut f64,
) -> RiptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if dim == 0 {
            return Err(Error::argument("feature width must be positive").into());
        }
        let f = slice_arg(features, count * dim, "features")?;
        let l = slice_arg(labels, count, "labels")?;
        let table = FeatureTable::new(f.chunks(dim).map(<[f64]>::to_vec).collect(), l.iter().map(u32::to_string).collect())?;
        *out = macro_map(&table)?;
        Ok(())
    })
}

/// Normalized mutual information between two labelings of `n` items.
///
/// # Safety
/// `pred` and `truth` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ript_nmi(pred: *const u32, truth: *const u32, n: usize, out: *mut f64) -> RiptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if n == 0 {
            return Err(Error::argument("labelings are empty").into());
        }
        *out = nmi(slice_arg(pred, n, "pred")?, slice_arg(truth, n, "truth")?);
        Ok(())
    })
}
