use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use tte_core::asr::{AsrConfig, AsrModel};
use tte_core::corpus::features::FrameConfig;
use tte_core::corpus::vocab::Vocabulary;
use tte_core::decode::{CharLm, CharLmConfig};
use tte_core::nn::ParamStore;
use tte_core::tte::{TteConfig, TteModel};
use tte_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tte_last_error()) }.to_str().unwrap().to_string()
}

fn save_models(dir: &Path) {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f32>::new();
    let asr = AsrModel::build(&AsrConfig::tiny(FrameConfig::default().num_mel_bins), vocab.clone(), &mut store, 1).unwrap();
    asr.save(&store, &dir.join("asr.json")).unwrap();
    let state_dim = asr.config.projection;
    let mut store = ParamStore::<f32>::new();
    let tte = TteModel::build(&TteConfig::tiny(state_dim), vocab.clone(), &mut store, 2).unwrap();
    tte.save(&store, &dir.join("tte.json")).unwrap();
    let mut store = ParamStore::<f32>::new();
    let lm = CharLm::build(&CharLmConfig::default(), vocab, &mut store, 3).unwrap();
    lm.save(&store, &dir.join("lm.json")).unwrap();
}

#[test]
fn error_rates_and_argument_checks() {
    let (mut cer, mut wer) = (-1.0, -1.0);
    let status = unsafe { tte_error_rates(c("a cat").as_ptr(), c("a bat").as_ptr(), &mut cer, &mut wer) };
    assert_eq!(status, TteStatus::Ok);
    assert!((cer - 0.2).abs() < 1e-12);
    assert!((wer - 0.5).abs() < 1e-12);
    assert_eq!(last_error(), "");

    let status = unsafe { tte_error_rates(ptr::null(), c("x").as_ptr(), &mut cer, &mut wer) };
    assert_eq!(status, TteStatus::InvalidArgument);
    assert!(last_error().contains("reference"));

    let bad = [0xffu8, 0];
    let status = unsafe { tte_error_rates(bad.as_ptr().cast(), c("x").as_ptr(), &mut cer, &mut wer) };
    assert_eq!(status, TteStatus::InvalidArgument);

    let status = unsafe { tte_error_rates(c("").as_ptr(), c("x").as_ptr(), &mut cer, &mut wer) };
    assert_eq!(status, TteStatus::Validation);
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(tte_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_files_report_io() {
    let mut rec: *mut TteRecognizer = ptr::null_mut();
    let status = unsafe { tte_recognizer_load(c("/nonexistent/asr.json").as_ptr(), ptr::null(), ptr::null(), &mut rec) };
    assert_eq!(status, TteStatus::Io);
    assert!(rec.is_null());
    assert!(!last_error().is_empty());
    unsafe { tte_recognizer_free(ptr::null_mut()) };
    unsafe { tte_string_free(ptr::null_mut()) };
    unsafe { tte_floats_free(ptr::null_mut(), 0) };
}

#[test]
fn recognizer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    save_models(dir.path());
    let mut rec: *mut TteRecognizer = ptr::null_mut();
    let status = unsafe {
        tte_recognizer_load(path(&dir.path().join("asr.json")).as_ptr(), ptr::null(), path(&dir.path().join("lm.json")).as_ptr(), &mut rec)
    };
    assert_eq!(status, TteStatus::Ok, "{}", last_error());
    let rate = 16_000u32;
    let samples: Vec<f32> = (0..rate as usize / 2).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    let mut opts = tte_decode_options_default();
    opts.beam_size = 3;
    let mut text: *mut c_char = ptr::null_mut();
    let status = unsafe { tte_recognizer_transcribe(rec, samples.as_ptr(), samples.len(), rate, &opts, &mut text) };
    assert_eq!(status, TteStatus::Ok, "{}", last_error());
    assert!(!text.is_null());
    let first = unsafe { CStr::from_ptr(text) }.to_str().unwrap().to_string();
    unsafe { tte_string_free(text) };

    let mut again: *mut c_char = ptr::null_mut();
    let status = unsafe { tte_recognizer_transcribe(rec, samples.as_ptr(), samples.len(), rate, &opts, &mut again) };
    assert_eq!(status, TteStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(again) }.to_str().unwrap(), first);
    unsafe { tte_string_free(again) };

    let status = unsafe { tte_recognizer_transcribe(rec, samples.as_ptr(), 0, rate, &opts, &mut again) };
    assert_eq!(status, TteStatus::InvalidArgument);
    assert!(again.is_null());
    unsafe { tte_recognizer_free(rec) };
}

#[test]
fn text_encoder_generates_bounded_states() {
    let dir = tempfile::tempdir().unwrap();
    save_models(dir.path());
    let mut enc: *mut TteTextEncoder = ptr::null_mut();
    let status = unsafe { tte_text_encoder_load(path(&dir.path().join("tte.json")).as_ptr(), &mut enc) };
    assert_eq!(status, TteStatus::Ok, "{}", last_error());
    let (mut data, mut rows, mut cols, mut truncated) = (ptr::null_mut(), 0usize, 0usize, -1i32);
    let status = unsafe {
        tte_text_encoder_generate(enc, c("a cat").as_ptr(), 2.0, 7, &mut data, &mut rows, &mut cols, &mut truncated)
    };
    assert_eq!(status, TteStatus::Ok, "{}", last_error());
    assert!(rows >= 1 && rows <= 10);
    assert!(truncated == 0 || truncated == 1);
    let states = unsafe { std::slice::from_raw_parts(data, rows * cols) };
    assert!(states.iter().all(|v| v.abs() < 1.0));
    unsafe { tte_floats_free(data, rows * cols) };

    let status = unsafe {
        tte_text_encoder_generate(enc, c("a cat").as_ptr(), 0.0, 7, &mut data, &mut rows, &mut cols, &mut truncated)
    };
    assert_eq!(status, TteStatus::InvalidArgument);
    unsafe { tte_text_encoder_free(enc) };
}

#[test]
fn pipeline_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    let mut report: *mut c_char = ptr::null_mut();
    let status = unsafe { tte_run_pipeline(path(&cfg).as_ptr(), ptr::null(), &mut report) };
    assert_eq!(status, TteStatus::Validation);
    assert!(report.is_null());
    assert!(last_error().contains("no_such_key"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tte.h")).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"tte.h\"\nint main(void) { TteDecodeOptions o = tte_decode_options_default(); return (int)o.beam_size * 0; }\n").unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
