//! C ABI over the mtdistill network, decoding and numerics.
//!
//! Every fallible function returns an [`MtdStatus`]; on failure a message
//! is available from [`mtd_last_error`] on the same thread. Nets are opaque
//! handles released with [`mtd_net_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mtdistill::balance::{mean_ir, LabelCounts};
use mtdistill::eval::{decode, ensemble, EnsembleMethod, Prediction};
use mtdistill::model::{ModelOutput, MultitaskNet, NetConfig, AU_DIM, EXPR_DIM, VA_BLOCK, VA_DIM};
use mtdistill::numerics::{ccc, softmax_t, BinGrid};

pub const MTD_AU_DIM: usize = 8;
pub const MTD_EXPR_DIM: usize = 7;
pub const MTD_VA_DIM: usize = 40;
/// Length of a flattened output: AU, then expression, then VA logits.
pub const MTD_OUTPUT_DIM: usize = 55;
pub const MTD_VA_BINS: usize = 20;

const _: () = assert!(MTD_AU_DIM == AU_DIM && MTD_EXPR_DIM == EXPR_DIM && MTD_VA_DIM == VA_DIM);
const _: () = assert!(MTD_OUTPUT_DIM == AU_DIM + EXPR_DIM + VA_DIM && MTD_VA_BINS == VA_BLOCK);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtdEnsembleMethod {
    Mean = 0,
    MajorityVote = 1,
}

/// Decoded prediction for one input.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtdPrediction {
    pub au_probs: [f64; MTD_AU_DIM],
    /// 0 or 1 per AU
    pub au_binary: [u8; MTD_AU_DIM],
    pub expr_probs: [f64; MTD_EXPR_DIM],
    pub expr_class: u32,
    pub valence: f64,
    pub arousal: f64,
}

impl From<Prediction> for MtdPrediction {
    fn from(p: Prediction) -> Self {
        Self {
            au_probs: p.au_probs,
            au_binary: p.au_binary.map(u8::from),
            expr_probs: p.expr_probs,
            expr_class: p.expr_class as u32,
            valence: p.valence,
            arousal: p.arousal,
        }
    }
}

/// Opaque network handle.
pub struct MtdNet {
    inner: MultitaskNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MtdStatus, String);

fn fail<T>(status: MtdStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, recording its error message and converting panics.
fn guard<F>(f: F) -> MtdStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MtdStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(MtdStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return fail(MtdStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| Failure(MtdStatus::NullPointer, format!("{what} is null")))
}

unsafe fn net_ref<'a>(net: *const MtdNet) -> Result<&'a MultitaskNet, Failure> {
    net.as_ref()
        .map(|n| &n.inner)
        .ok_or_else(|| Failure(MtdStatus::NullPointer, "net is null".into()))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return fail(MtdStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(MtdStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

fn input<'a>(net: &MultitaskNet, x: &'a [f64]) -> Result<&'a [f64], Failure> {
    if x.len() != net.input_dim() {
        return fail(
            MtdStatus::InvalidArgument,
            format!("input has {} features, net expects {}", x.len(), net.input_dim()),
        );
    }
    if x.iter().any(|v| !v.is_finite()) {
        return fail(MtdStatus::InvalidArgument, "input has non-finite values");
    }
    Ok(x)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mtd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized net.
///
/// # Safety
/// `hidden_dims` must point to `num_hidden` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_new(
    input_dim: usize,
    hidden_dims: *const usize,
    num_hidden: usize,
    seed: u64,
    out: *mut *mut MtdNet,
) -> MtdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let hidden = slice(hidden_dims, num_hidden, "hidden_dims")?.to_vec();
        let cfg = NetConfig {
            input_dim,
            hidden_dims: hidden,
            seed,
            ..NetConfig::default()
        };
        let net = MultitaskNet::new(cfg).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(MtdNet { inner: net }));
        Ok(())
    })
}

/// Loads a `.mtnet` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_load(path: *const c_char, out: *mut *mut MtdNet) -> MtdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let bytes = std::fs::read(&path).or_else(|e| fail(MtdStatus::Io, format!("{}: {e}", path.display())))?;
        let net = MultitaskNet::from_bytes(&bytes)
            .or_else(|e| fail(MtdStatus::Format, format!("{}: {e}", path.display())))?;
        *out = Box::into_raw(Box::new(MtdNet { inner: net }));
        Ok(())
    })
}

/// Writes a `.mtnet` checkpoint.
///
/// # Safety
/// `net` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_save(net: *const MtdNet, path: *const c_char) -> MtdStatus {
    guard(|| {
        let net = net_ref(net)?;
        let path = path_arg(path)?;
        std::fs::write(&path, net.to_bytes()).or_else(|e| fail(MtdStatus::Io, format!("{}: {e}", path.display())))
    })
}

/// Releases a net. Null is ignored.
///
/// # Safety
/// `net` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_free(net: *mut MtdNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of input features, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_input_dim(net: *const MtdNet) -> usize {
    net.as_ref().map_or(0, |n| n.inner.input_dim())
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_num_params(net: *const MtdNet) -> usize {
    net.as_ref().map_or(0, |n| n.inner.num_params())
}

/// Raw logits, flattened as AU (8), expression (7), VA (40).
///
/// # Safety
/// `x` must point to `len` values and `out` to `MTD_OUTPUT_DIM` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_forward(net: *const MtdNet, x: *const f64, len: usize, out: *mut f64) -> MtdStatus {
    guard(|| {
        let net = net_ref(net)?;
        let x = input(net, slice(x, len, "x")?)?;
        let out = slice_mut(out, MTD_OUTPUT_DIM, "out")?;
        let o = net.forward(x);
        out[..AU_DIM].copy_from_slice(&o.au_logits);
        out[AU_DIM..AU_DIM + EXPR_DIM].copy_from_slice(&o.expr_logits);
        out[AU_DIM + EXPR_DIM..].copy_from_slice(&o.va_logits);
        Ok(())
    })
}

/// Decoded prediction of one net.
///
/// # Safety
/// `x` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_net_predict(
    net: *const MtdNet,
    x: *const f64,
    len: usize,
    out: *mut MtdPrediction,
) -> MtdStatus {
    guard(|| {
        let net = net_ref(net)?;
        let x = input(net, slice(x, len, "x")?)?;
        let out = out_ref(out, "out")?;
        *out = decode(&net.forward(x)).into();
        Ok(())
    })
}

/// Combined prediction of `count` nets.
///
/// # Safety
/// `nets` must point to `count` handles from this library; `x` to `len`
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_ensemble_predict(
    nets: *const *const MtdNet,
    count: usize,
    method: MtdEnsembleMethod,
    x: *const f64,
    len: usize,
    out: *mut MtdPrediction,
) -> MtdStatus {
    guard(|| {
        let handles = slice(nets, count, "nets")?;
        if handles.is_empty() {
            return fail(MtdStatus::InvalidArgument, "ensemble needs at least one net");
        }
        let x = slice(x, len, "x")?;
        let mut outputs: Vec<ModelOutput> = Vec::with_capacity(count);
        for &h in handles {
            let net = net_ref(h)?;
            outputs.push(net.forward(input(net, x)?));
        }
        let method = match method {
            MtdEnsembleMethod::Mean => EnsembleMethod::Mean,
            MtdEnsembleMethod::MajorityVote => EnsembleMethod::MajorityVote,
        };
        let p = ensemble(&outputs, method).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        *out_ref(out, "out")? = p.into();
        Ok(())
    })
}

/// Temperature softmax of `n` logits into `out`.
///
/// # Safety
/// `logits` and `out` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn mtd_softmax_t(logits: *const f64, n: usize, temperature: f64, out: *mut f64) -> MtdStatus {
    guard(|| {
        let y = slice(logits, n, "logits")?;
        let p = softmax_t(y, temperature).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        slice_mut(out, n, "out")?.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Concordance correlation coefficient of two length-`n` sequences.
///
/// # Safety
/// `y` and `t` must each point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_ccc(y: *const f64, t: *const f64, n: usize, out: *mut f64) -> MtdStatus {
    guard(|| {
        let y = slice(y, n, "y")?;
        let t = slice(t, n, "t")?;
        let v = ccc(y, t).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        *out_ref(out, "out")? = v;
        Ok(())
    })
}

/// Expected bin center of `MTD_VA_BINS` logits (softmax at T = 1).
///
/// # Safety
/// `logits` must point to `MTD_VA_BINS` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_bin_expectation(logits: *const f64, out: *mut f64) -> MtdStatus {
    guard(|| {
        let y = slice(logits, MTD_VA_BINS, "logits")?;
        let p = softmax_t(y, 1.0).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        *out_ref(out, "out")? = BinGrid::default().expectation(p.as_slice());
        Ok(())
    })
}

/// Mean imbalance ratio of per-label positive counts.
///
/// # Safety
/// `counts` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtd_mean_ir(counts: *const u64, n: usize, out: *mut f64) -> MtdStatus {
    guard(|| {
        let c: Vec<usize> = slice(counts, n, "counts")?.iter().map(|&v| v as usize).collect();
        let total = c.iter().sum();
        let lc = LabelCounts { counts: c, total };
        let v = mean_ir(&lc).or_else(|e| fail(MtdStatus::InvalidArgument, e.to_string()))?;
        *out_ref(out, "out")? = v;
        Ok(())
    })
}
