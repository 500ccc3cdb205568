//! C ABI for numprobe.
//!
//! Objects cross the boundary as opaque handles created by `np_*` constructors
//! and released with the matching `np_*_free`. Every fallible call returns an
//! [`NpStatus`]; on failure `np_last_error` describes the problem until the
//! next call on the same thread. Strings handed out by the library are
//! released with `np_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use numprobe::dataset::{annotate_problem, make_prompt_from_surfaces, PromptSpec, Side, Variant};
use numprobe::metrics;
use numprobe::numerals::{self, Notation, Numeral};
use numprobe::probes::{self, ProbeKind, ProbeModel};
use numprobe::tensorio::{self, HiddenStateMatrix};
use numprobe::toylm::parse_response;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    Probe = 6,
    Metrics = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A parsed numeral.
pub struct NpNumeral(Numeral);

/// A hidden-state matrix loaded from or written to a tensor file.
pub struct NpMatrix(HiddenStateMatrix);

/// A fitted linear probe.
pub struct NpProbe(ProbeModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NpRegressionMetrics {
    pub mse: f64,
    pub relative_error: f64,
    pub aacc: f64,
    pub pearson_rho: f64,
    pub r_squared: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NpStatus, String);

impl Failure {
    fn new(status: NpStatus, e: impl ToString) -> Self {
        Failure(status, e.to_string())
    }
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(None);
            NpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            NpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(NpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(NpStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(NpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(NpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(NpStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn give_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Failure::new(NpStatus::InvalidArgument, e))
}

fn variant(code: i32) -> Result<Variant, Failure> {
    match code {
        0 => Ok(Variant::IntSci),
        1 => Ok(Variant::DecSci),
        _ => Err(Failure::new(NpStatus::InvalidArgument, format!("variant code {code}"))),
    }
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next `np_*` call on the same thread.
#[no_mangle]
pub extern "C" fn np_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn np_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Numerals

/// Parses plain integer, plain decimal or `m × 10^e` text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_numeral_parse(text: *const c_char, result: *mut *mut NpNumeral) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let n = numerals::parse_numeral(str_arg(text, "text")?).map_err(|e| Failure::new(NpStatus::Parse, e))?;
        *slot = Box::into_raw(Box::new(NpNumeral(n)));
        Ok(())
    })
}

/// # Safety
/// `n` must be null or a handle from `np_numeral_parse`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn np_numeral_free(n: *mut NpNumeral) {
    if !n.is_null() {
        drop(Box::from_raw(n));
    }
}

/// # Safety
/// `n` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_numeral_log2(n: *const NpNumeral, result: *mut f64) -> NpStatus {
    guard(|| {
        *out(result, "result")? = obj(n, "n")?.0.log2_magnitude();
        Ok(())
    })
}

/// Writes -1, 0 or 1 as `a` is smaller than, equal in value to, or larger than `b`.
///
/// # Safety
/// `a` and `b` must be live handles; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_numeral_compare(a: *const NpNumeral, b: *const NpNumeral, result: *mut i32) -> NpStatus {
    guard(|| {
        *out(result, "result")? = obj(a, "a")?.0.cmp(&obj(b, "b")?.0) as i32;
        Ok(())
    })
}

/// Renders in notation 0 (plain integer), 1 (plain decimal) or 2 (scientific).
/// `decimal_digits` < 0 means as many as the value needs.
///
/// # Safety
/// `n` must be a live handle; `result` must be writable. Free the string with `np_string_free`.
#[no_mangle]
pub unsafe extern "C" fn np_numeral_render(
    n: *const NpNumeral,
    notation: i32,
    decimal_digits: i32,
    result: *mut *mut c_char,
) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let target = match notation {
            0 => Notation::PlainInt,
            1 => Notation::PlainDec,
            2 => Notation::Scientific,
            _ => {
                return Err(Failure::new(
                    NpStatus::InvalidArgument,
                    format!("notation code {notation}"),
                ))
            }
        };
        let digits = u8::try_from(decimal_digits).ok();
        let text =
            numerals::render_numeral(&obj(n, "n")?.0, target, digits).map_err(|e| Failure::new(NpStatus::Parse, e))?;
        *slot = give_string(text)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Tensor files

/// # Safety
/// `path` must be a NUL-terminated string; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_matrix_read(path: *const c_char, result: *mut *mut NpMatrix) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let m =
            tensorio::read_matrix(&PathBuf::from(str_arg(path, "path")?)).map_err(|e| Failure::new(NpStatus::Io, e))?;
        *slot = Box::into_raw(Box::new(NpMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn np_matrix_write(m: *const NpMatrix, path: *const c_char) -> NpStatus {
    guard(|| {
        tensorio::write_matrix(&obj(m, "m")?.0, &PathBuf::from(str_arg(path, "path")?))
            .map_err(|e| Failure::new(NpStatus::Io, e))
    })
}

/// # Safety
/// `m` must be a live handle; each output may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn np_matrix_dims(m: *const NpMatrix, n: *mut usize, d: *mut usize, layer: *mut i32) -> NpStatus {
    guard(|| {
        let m = &obj(m, "m")?.0;
        if let Some(n) = n.as_mut() {
            *n = m.n;
        }
        if let Some(d) = d.as_mut() {
            *d = m.d;
        }
        if let Some(layer) = layer.as_mut() {
            *layer = m.layer;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from `np_matrix_read`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn np_matrix_free(m: *mut NpMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

// ---------------------------------------------------------------------------
// Probes

fn kind(code: i32) -> Result<ProbeKind, Failure> {
    match code {
        0 => Ok(ProbeKind::MagnitudeReg),
        1 => Ok(ProbeKind::LogRatioReg),
        2 => Ok(ProbeKind::Classifier),
        _ => Err(Failure::new(
            NpStatus::InvalidArgument,
            format!("probe kind code {code}"),
        )),
    }
}

/// Fits a probe of kind 0 (magnitude ridge), 1 (log-ratio ridge) or 2
/// (logistic classifier) on every row of `m`, with regularisation `reg`
/// (λ for ridge, γ for the classifier).
///
/// # Safety
/// `m` must be a live handle; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_probe_fit(
    m: *const NpMatrix,
    kind_code: i32,
    reg: f64,
    result: *mut *mut NpProbe,
) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let p =
            probes::fit_probe(&obj(m, "m")?.0, kind(kind_code)?, reg).map_err(|e| Failure::new(NpStatus::Probe, e))?;
        *slot = Box::into_raw(Box::new(NpProbe(p)));
        Ok(())
    })
}

/// One score per row of `m`: the regression prediction, or P(first is larger)
/// for a classifier. `scores` must hold at least `capacity` values; fails with
/// `BufferTooSmall` when `capacity` is below the row count.
///
/// # Safety
/// `probe` and `m` must be live handles and `scores` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn np_probe_predict(
    probe: *const NpProbe,
    m: *const NpMatrix,
    scores: *mut f64,
    capacity: usize,
) -> NpStatus {
    guard(|| {
        let (p, m) = (&obj(probe, "probe")?.0, &obj(m, "m")?.0);
        if capacity < m.n {
            return Err(Failure::new(
                NpStatus::BufferTooSmall,
                format!("{} rows, capacity {capacity}", m.n),
            ));
        }
        let values = if p.kind == ProbeKind::Classifier {
            probes::predict_proba(p, m)
        } else {
            probes::predict_regression(p, m)
        }
        .map_err(|e| Failure::new(NpStatus::Probe, e))?;
        if !values.is_empty() {
            if scores.is_null() {
                return Err(Failure::new(NpStatus::NullPointer, "scores is null"));
            }
            std::slice::from_raw_parts_mut(scores, values.len()).copy_from_slice(&values);
        }
        Ok(())
    })
}

/// # Safety
/// `probe` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn np_probe_save(probe: *const NpProbe, path: *const c_char) -> NpStatus {
    guard(|| {
        obj(probe, "probe")?
            .0
            .save(&PathBuf::from(str_arg(path, "path")?))
            .map_err(|e| Failure::new(NpStatus::Io, e))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_probe_load(path: *const c_char, result: *mut *mut NpProbe) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let p = ProbeModel::load(&PathBuf::from(str_arg(path, "path")?)).map_err(|e| Failure::new(NpStatus::Io, e))?;
        *slot = Box::into_raw(Box::new(NpProbe(p)));
        Ok(())
    })
}

/// # Safety
/// `probe` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn np_probe_free(probe: *mut NpProbe) {
    if !probe.is_null() {
        drop(Box::from_raw(probe));
    }
}

// ---------------------------------------------------------------------------
// Prompts, responses, metrics

/// Comparison prompt for operand surfaces `a` and `b`. `variant` is 0
/// (int-sci) or 1 (dec-sci); `shots` 0 gives the zero-shot form.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `result` must be writable.
/// Free the string with `np_string_free`.
#[no_mangle]
pub unsafe extern "C" fn np_make_prompt(
    a: *const c_char,
    b: *const c_char,
    variant_code: i32,
    shots: u8,
    result: *mut *mut c_char,
) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let v = variant(variant_code)?;
        let spec = if shots == 0 {
            PromptSpec::zero_shot(v)
        } else {
            PromptSpec::k_shot(v, shots)
        };
        let prompt = make_prompt_from_surfaces(str_arg(a, "a")?, str_arg(b, "b")?, &spec)
            .map_err(|e| Failure::new(NpStatus::InvalidArgument, e))?;
        *slot = give_string(prompt)?;
        Ok(())
    })
}

/// Maps a model's answer to the problem "which is larger, `a` or `b`":
/// writes 0 for the first operand, 1 for the second, -1 when unparsed.
///
/// # Safety
/// All strings must be NUL-terminated; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_parse_response(
    response: *const c_char,
    a: *const c_char,
    b: *const c_char,
    result: *mut i32,
) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let parse = |s| numerals::parse_numeral(s).map_err(|e| Failure::new(NpStatus::Parse, e));
        let problem = annotate_problem(parse(str_arg(a, "a")?)?, parse(str_arg(b, "b")?)?)
            .map_err(|e| Failure::new(NpStatus::InvalidArgument, e))?;
        *slot = match parse_response(str_arg(response, "response")?, &problem).side() {
            Some(Side::First) => 0,
            Some(Side::Second) => 1,
            None => -1,
        };
        Ok(())
    })
}

/// Regression metrics of log2 predictions against positive gold values.
///
/// # Safety
/// `pred` and `gold` must be valid for `n` reads; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn np_regression_metrics(
    pred: *const f64,
    gold: *const f64,
    n: usize,
    result: *mut NpRegressionMetrics,
) -> NpStatus {
    guard(|| {
        let slot = out(result, "result")?;
        let m = metrics::regression_metrics(slice(pred, n, "pred")?, slice(gold, n, "gold")?)
            .map_err(|e| Failure::new(NpStatus::Metrics, e))?;
        *slot = NpRegressionMetrics {
            mse: m.mse,
            relative_error: m.relative_error,
            aacc: m.aacc,
            pearson_rho: m.pearson_rho,
            r_squared: m.r_squared,
        };
        Ok(())
    })
}
