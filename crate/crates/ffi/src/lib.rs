//! C ABI over `tte_core`.
//!
//! Every fallible function returns a [`TteStatus`]; on failure the message is
//! available from [`tte_last_error`] on the same thread. Handles are opaque
//! and owned by the caller until passed to their `_free` function. Strings
//! and buffers returned through out-pointers are released with
//! [`tte_string_free`] and [`tte_floats_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use tte_core::asr::AsrModel;
use tte_core::augment::Pipeline;
use tte_core::config::RunConfig;
use tte_core::corpus::features::{FrameConfig, LogMel};
use tte_core::corpus::synth::Waveform;
use tte_core::decode::{beam_search, cer, wer, BeamConfig, CharLm, Fusion};
use tte_core::nn::ParamStore;
use tte_core::tte::{generate_states, max_frames_for, TteModel};
use tte_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TteStatus {
    Ok = 0,
    /// A pointer was null, a string was not UTF-8, or a size was zero.
    InvalidArgument = 1,
    /// Input or configuration rejected by validation.
    Validation = 2,
    /// A file could not be read or written.
    Io = 3,
    /// Any other failure while running.
    Runtime = 4,
    /// The library panicked; the handle involved should be freed.
    Panic = 5,
}

/// Beam search settings; obtain defaults from [`tte_decode_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TteDecodeOptions {
    pub beam_size: usize,
    /// Shortest output as a fraction of the encoder length.
    pub min_ratio: f64,
    /// Longest output as a fraction of the encoder length.
    pub max_ratio: f64,
    /// Language model weight; ignored without a language model.
    pub lm_weight: f64,
}

/// A trained recognizer with its feature settings and optional language model.
pub struct TteRecognizer {
    model: AsrModel,
    store: ParamStore<f32>,
    frames: FrameConfig,
    lm: Option<(CharLm, ParamStore<f32>)>,
}

/// A trained text-to-encoder model.
pub struct TteTextEncoder {
    model: TteModel,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(TteStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TteStatus::Io,
            e if e.is_validation() => TteStatus::Validation,
            _ => TteStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TteStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and recording the
/// message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TteStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            TteStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or points to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// # Safety
/// As for [`text`].
unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    text(p, what).map(PathBuf::from)
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(TteStatus::Runtime, "output contains NUL".into()))?;
    // SAFETY: callers check `out` for null before producing output.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn require<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(invalid(format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tte_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tte_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn tte_decode_options_default() -> TteDecodeOptions {
    let b = BeamConfig::default();
    TteDecodeOptions {
        beam_size: b.beam_size,
        min_ratio: b.min_ratio,
        max_ratio: b.max_ratio,
        lm_weight: b.lm_weight,
    }
}

/// Loads a recognizer checkpoint. `config_path` may be null; otherwise it
/// names a run configuration whose feature settings are used (a run
/// directory's `config.json` works). `lm_path` may be null.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tte_recognizer_load(
    model_path: *const c_char,
    config_path: *const c_char,
    lm_path: *const c_char,
    out: *mut *mut TteRecognizer,
) -> TteStatus {
    guard(|| {
        require(out, "out")?;
        *out = ptr::null_mut();
        let (model, store) = AsrModel::load(&path(model_path, "model_path")?)?;
        let frames = if config_path.is_null() {
            FrameConfig::default()
        } else {
            RunConfig::resolve(Some(&path(config_path, "config_path")?), &[])?.pipeline.frames
        };
        let lm = if lm_path.is_null() {
            None
        } else {
            Some(CharLm::load(&path(lm_path, "lm_path")?)?)
        };
        *out = Box::into_raw(Box::new(TteRecognizer {
            model,
            store,
            frames,
            lm,
        }));
        Ok(())
    })
}

/// # Safety
/// `rec` is null or was returned by [`tte_recognizer_load`] and not freed.
#[no_mangle]
pub unsafe extern "C" fn tte_recognizer_free(rec: *mut TteRecognizer) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Transcribes mono samples in [-1, 1]. The text is returned through
/// `out_text` and released with [`tte_string_free`].
///
/// # Safety
/// `rec` is a live handle, `samples` points to `len` floats, `options` is
/// null or valid, and `out_text` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tte_recognizer_transcribe(
    rec: *const TteRecognizer,
    samples: *const f32,
    len: usize,
    sample_rate_hz: u32,
    options: *const TteDecodeOptions,
    out_text: *mut *mut c_char,
) -> TteStatus {
    guard(|| {
        require(rec, "recognizer")?;
        require(samples, "samples")?;
        require(out_text, "out_text")?;
        *out_text = ptr::null_mut();
        if len == 0 {
            return Err(invalid("no samples"));
        }
        let rec = &*rec;
        let opts = if options.is_null() { tte_decode_options_default() } else { *options };
        let wave = Waveform::new(std::slice::from_raw_parts(samples, len).to_vec(), sample_rate_hz)?;
        let feats = LogMel::new(&rec.frames, sample_rate_hz)?.compute(&wave)?;
        let states = rec.model.encode_utterance(&rec.store, &feats.frames)?;
        let fusion = rec.lm.as_ref().map(|(lm, store)| Fusion { lm, store });
        let beam = BeamConfig {
            beam_size: opts.beam_size,
            min_ratio: opts.min_ratio,
            max_ratio: opts.max_ratio,
            lm_weight: if fusion.is_some() { opts.lm_weight } else { 0.0 },
        };
        let best = beam_search(&rec.model, &rec.store, &states, &beam, fusion)?
            .into_iter()
            .next()
            .ok_or_else(|| Failure(TteStatus::Runtime, "no hypothesis".into()))?;
        out_string(out_text, rec.model.vocab.decode(&best.tokens).replace("<eos>", ""))
    })
}

/// Loads a text-to-encoder checkpoint.
///
/// # Safety
/// `model_path` is null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tte_text_encoder_load(model_path: *const c_char, out: *mut *mut TteTextEncoder) -> TteStatus {
    guard(|| {
        require(out, "out")?;
        *out = ptr::null_mut();
        let (model, store) = TteModel::load(&path(model_path, "model_path")?)?;
        *out = Box::into_raw(Box::new(TteTextEncoder { model, store }));
        Ok(())
    })
}

/// # Safety
/// `enc` is null or was returned by [`tte_text_encoder_load`] and not freed.
#[no_mangle]
pub unsafe extern "C" fn tte_text_encoder_free(enc: *mut TteTextEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Generates encoder states for `text` with a budget of `frames_per_char`
/// frames per character. The row-major `rows × cols` buffer is returned
/// through `out_data` and released with [`tte_floats_free`];
/// `out_truncated` is set to 1 when the budget ran out before the stop
/// token fired.
///
/// # Safety
/// `enc` is a live handle, `text` is NUL-terminated and every out-pointer
/// is valid.
#[no_mangle]
pub unsafe extern "C" fn tte_text_encoder_generate(
    enc: *const TteTextEncoder,
    text_utf8: *const c_char,
    frames_per_char: f64,
    seed: u64,
    out_data: *mut *mut f32,
    out_rows: *mut usize,
    out_cols: *mut usize,
    out_truncated: *mut i32,
) -> TteStatus {
    guard(|| {
        require(enc, "text encoder")?;
        for (p, what) in [
            (out_data.cast::<u8>().cast_const(), "out_data"),
            (out_rows.cast::<u8>().cast_const(), "out_rows"),
            (out_cols.cast::<u8>().cast_const(), "out_cols"),
            (out_truncated.cast::<u8>().cast_const(), "out_truncated"),
        ] {
            require(p, what)?;
        }
        *out_data = ptr::null_mut();
        if !(frames_per_char > 0.0 && frames_per_char.is_finite()) {
            return Err(invalid("frames_per_char must be positive"));
        }
        let enc = &*enc;
        let t = text(text_utf8, "text")?;
        let max = max_frames_for(t.chars().count(), frames_per_char);
        let out = generate_states(&enc.model, &enc.store, t, max, seed)?;
        *out_rows = out.states.rows();
        *out_cols = out.states.cols();
        *out_truncated = i32::from(out.truncated);
        *out_data = Box::into_raw(out.states.data().to_vec().into_boxed_slice()).cast();
        Ok(())
    })
}

/// # Safety
/// `data` is null or was returned by [`tte_text_encoder_generate`] with
/// `rows * cols == len`, and not freed.
#[no_mangle]
pub unsafe extern "C" fn tte_floats_free(data: *mut f32, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Character and word error rates of `hypothesis` against `reference`.
///
/// # Safety
/// Strings are NUL-terminated; out-pointers are valid.
#[no_mangle]
pub unsafe extern "C" fn tte_error_rates(
    reference: *const c_char,
    hypothesis: *const c_char,
    out_cer: *mut f64,
    out_wer: *mut f64,
) -> TteStatus {
    guard(|| {
        require(out_cer, "out_cer")?;
        require(out_wer, "out_wer")?;
        let (r, h) = (text(reference, "reference")?, text(hypothesis, "hypothesis")?);
        *out_cer = cer(r, h)?;
        *out_wer = wer(r, h)?;
        Ok(())
    })
}

/// Runs the full pipeline. `config_path` may be null for the defaults and
/// `run_dir` may be null for the configured run directory. The report is
/// returned as JSON through `out_report` (release with
/// [`tte_string_free`]).
///
/// # Safety
/// String arguments are null or NUL-terminated; `out_report` is valid.
#[no_mangle]
pub unsafe extern "C" fn tte_run_pipeline(
    config_path: *const c_char,
    run_dir: *const c_char,
    out_report: *mut *mut c_char,
) -> TteStatus {
    guard(|| {
        require(out_report, "out_report")?;
        *out_report = ptr::null_mut();
        let file = if config_path.is_null() { None } else { Some(path(config_path, "config_path")?) };
        let config = RunConfig::resolve(file.as_deref(), &[])?;
        let dir = if run_dir.is_null() { config.run_dir.clone() } else { path(run_dir, "run_dir")? };
        let report = Pipeline::new(config.pipeline, Path::new(&dir))?.run()?;
        let json = serde_json::to_string(&report).map_err(|e| Failure(TteStatus::Runtime, e.to_string()))?;
        out_string(out_report, json)
    })
}

/// # Safety
/// `s` is null or a string returned by this library and not freed.
#[no_mangle]
pub unsafe extern "C" fn tte_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
