//! C ABI over `scarlet-kit`.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free`. Every function returns an [`SkStatus`]; on failure
//! `sk_last_error` describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use scarlet_kit::diagnostics::kendall_tau;
use scarlet_kit::els::fold_pointwise;
use scarlet_kit::engine::{Shape, Tensor};
use scarlet_kit::space::{build_supernet, count_madds, count_params, Architecture, SpaceSpec, Supernet};
use scarlet_kit::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Io = 5,
    Internal = 6,
}

impl From<&Error> for SkStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => SkStatus::Dimension,
            Error::Io { .. } => SkStatus::Io,
            e if e.is_config() => SkStatus::Config,
            Error::Input(_) | Error::Parse { .. } | Error::Spec { .. } => SkStatus::InvalidArgument,
            _ => SkStatus::Internal,
        }
    }
}

/// A search space.
pub struct SkSpace(SpaceSpec);

/// A weight-sharing supernet.
pub struct SkSupernet(Supernet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            SkStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            SkStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            let code = SkStatus::from(&e);
            set_error(e.to_string());
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SkStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
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

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn arch_arg(genes: *const usize, len: usize) -> Result<Architecture, Fail> {
    Ok(Architecture::new(slice_arg(genes, len, "genes")?.to_vec()))
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn sk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Resolves a preset name (`t1`, `s1`, `s2`) or a space file path.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sk_space_resolve(name: *const c_char, out: *mut *mut SkSpace) -> SkStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SkSpace(SpaceSpec::resolve(name)?)));
        Ok(())
    })
}

/// Swaps skip choices for stabilizers (or back) in a new space.
///
/// # Safety
/// `space` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_space_with_stabilizers(space: *const SkSpace, on: bool, out: *mut *mut SkSpace) -> SkStatus {
    guard(|| {
        let space = space.as_ref().ok_or(Fail::Null("space"))?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SkSpace(space.0.with_stabilizers(on))));
        Ok(())
    })
}

/// # Safety
/// `space` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sk_space_free(space: *mut SkSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// # Safety
/// `space` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_space_num_layers(space: *const SkSpace, out: *mut usize) -> SkStatus {
    guard(|| {
        let space = space.as_ref().ok_or(Fail::Null("space"))?;
        *out_arg(out, "out")? = space.0.num_layers();
        Ok(())
    })
}

/// Multiply-adds and parameter count of one architecture.
///
/// # Safety
/// `genes` must point to `len` values; `madds` and `params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_arch_cost(
    space: *const SkSpace,
    genes: *const usize,
    len: usize,
    madds: *mut u64,
    params: *mut u64,
) -> SkStatus {
    guard(|| {
        let space = space.as_ref().ok_or(Fail::Null("space"))?;
        let arch = arch_arg(genes, len)?;
        let m = count_madds(&space.0, &arch)?;
        let p = count_params(&space.0, &arch)?;
        *out_arg(madds, "madds")? = m;
        *out_arg(params, "params")? = p;
        Ok(())
    })
}

/// Kendall tau-b of two equally long score vectors.
///
/// # Safety
/// `a` and `b` must each point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_kendall_tau(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> SkStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        *out_arg(out, "out")? = kendall_tau(a, b)?;
        Ok(())
    })
}

/// Composes a pointwise convolution `w1` (c1, c0, 1, 1) followed by `w2`
/// (m, c1, k, k) into `out` (m, c0, k, k), all row-major.
///
/// # Safety
/// `w1` holds `c1*c0` values, `w2` holds `m*c1*k*k` and `out` has room for
/// `m*c0*k*k`.
#[no_mangle]
pub unsafe extern "C" fn sk_fold_pointwise(
    w1: *const f32,
    c1: usize,
    c0: usize,
    w2: *const f32,
    m: usize,
    k: usize,
    out: *mut f32,
) -> SkStatus {
    guard(|| {
        let t1 = Tensor::from_vec(Shape::new(c1, c0, 1, 1), slice_arg(w1, c1 * c0, "w1")?.to_vec())?;
        let t2 = Tensor::from_vec(Shape::new(m, c1, k, k), slice_arg(w2, m * c1 * k * k, "w2")?.to_vec())?;
        let w3 = fold_pointwise(&t1, &t2)?;
        if w3.data().is_empty() {
            return Ok(());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, w3.data().len()).copy_from_slice(w3.data());
        Ok(())
    })
}

/// A freshly initialized supernet over `space`.
///
/// # Safety
/// `space` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_supernet_new(space: *const SkSpace, seed: u64, out: *mut *mut SkSupernet) -> SkStatus {
    guard(|| {
        let space = space.as_ref().ok_or(Fail::Null("space"))?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SkSupernet(build_supernet(&space.0, seed)?)));
        Ok(())
    })
}

/// Loads `<dir>/<name>.scnt` and `<dir>/<name>.toml`.
///
/// # Safety
/// `dir` and `name` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sk_supernet_load(
    dir: *const c_char,
    name: *const c_char,
    out: *mut *mut SkSupernet,
) -> SkStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SkSupernet(Supernet::load(Path::new(dir), name)?)));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sk_supernet_free(net: *mut SkSupernet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Inference-mode logits of one path for `n` images in NCHW layout.
/// `logits` receives `n * classes` values.
///
/// # Safety
/// `input` holds `n*channels*size*size` values; `logits` has room for
/// `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn sk_supernet_infer(
    net: *const SkSupernet,
    genes: *const usize,
    len: usize,
    input: *const f32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SkStatus {
    guard(|| {
        let net = &net.as_ref().ok_or(Fail::Null("net"))?.0;
        let arch = arch_arg(genes, len)?;
        let shape = net.input_shape(n);
        let x = Tensor::from_vec(shape, slice_arg(input, shape.numel(), "input")?.to_vec())?;
        let y = net.infer_path(&arch, &x)?;
        if y.data().len() != logits_len {
            return Err(Fail::Arg(format!(
                "logits buffer holds {logits_len} values, {} needed",
                y.data().len()
            )));
        }
        if logits_len > 0 {
            if logits.is_null() {
                return Err(Fail::Null("logits"));
            }
            std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        }
        Ok(())
    })
}

/// One-shot top-1 accuracy of a path on `n` labelled images.
///
/// # Safety
/// `input` holds `n*channels*size*size` values and `labels` holds `n`.
#[no_mangle]
pub unsafe extern "C" fn sk_supernet_accuracy(
    net: *const SkSupernet,
    genes: *const usize,
    len: usize,
    input: *const f32,
    labels: *const u32,
    n: usize,
    out: *mut f32,
) -> SkStatus {
    guard(|| {
        let net = &net.as_ref().ok_or(Fail::Null("net"))?.0;
        if n == 0 {
            return Err(Fail::Arg("need at least one image".into()));
        }
        let arch = arch_arg(genes, len)?;
        let shape = net.input_shape(n);
        let x = Tensor::from_vec(shape, slice_arg(input, shape.numel(), "input")?.to_vec())?;
        let labels = slice_arg(labels, n, "labels")?;
        let y = net.infer_path(&arch, &x)?;
        let classes = y.data().len() / n;
        let correct = y
            .data()
            .chunks(classes)
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                best.0 == l as usize
            })
            .count();
        *out_arg(out, "out")? = correct as f32 / n as f32;
        Ok(())
    })
}
