use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pal_core::checkpoint::save_checkpoint;
use pal_core::io::write_corpus;
use pal_core::relrep::forward_pooled;
use pal_core::synth::{generate_synthetic, SyntheticSpec};
use pal_core::trainer::{init_anchors, TrainConfig, TrainState};
use pal_core::Modality;
use pal_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    vision: PathBuf,
    state: TrainState,
    data: pal_core::synth::SyntheticData,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { num_train: 40, num_test: 8, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    let config = TrainConfig { anchors: 8, ..TrainConfig::default() };
    let (av, al) = init_anchors(&data.train, &config).unwrap();
    let state = TrainState::new(config, av, al);
    let checkpoint = dir.path().join("model.palc");
    save_checkpoint(&state, &checkpoint).unwrap();
    let vision = dir.path().join("vision.palt");
    write_corpus(&vision, Modality::Vision, &data.test.vision).unwrap();
    Fixture { _dir: dir, checkpoint, vision, state, data }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pal_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn encode_matches_library() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(pal_model_load(cstr(&f.checkpoint).as_ptr(), &mut model), PalStatus::Ok);
        let mut corpus = ptr::null_mut();
        assert_eq!(pal_corpus_load(cstr(&f.vision).as_ptr(), &mut corpus), PalStatus::Ok);

        let (mut k, mut dv, mut dl, mut tau_p) = (0, 0, 0, 0.0);
        assert_eq!(pal_model_info(model, &mut k, &mut dv, &mut dl, &mut tau_p), PalStatus::Ok);
        assert_eq!((k, dv, dl, tau_p), (8, 32, 24, 0.03));

        let (mut modality, mut count, mut dim) = (PalModality::Language, 0, 0);
        assert_eq!(pal_corpus_info(corpus, &mut modality, &mut count, &mut dim), PalStatus::Ok);
        assert_eq!((modality, count, dim), (PalModality::Vision, 8, 32));

        for i in 0..count {
            let seq = &f.data.test.vision[i];
            let expected = forward_pooled(seq, &f.state.anchors_v, 0.03, f.state.config.pooling).unwrap();
            let mut h = vec![0.0; k];
            assert_eq!(pal_model_encode_corpus(model, corpus, i, h.as_mut_ptr(), k), PalStatus::Ok);
            assert_eq!(h, expected.pooled.h());

            let mut raw = vec![0.0; k];
            let tokens = seq.tokens().as_slice();
            let st = pal_model_encode(model, PalModality::Vision as u32, tokens.as_ptr(), seq.len(), dim, raw.as_mut_ptr(), k);
            assert_eq!(st, PalStatus::Ok);
            assert_eq!(raw, h);

            let mut len = 0;
            assert_eq!(pal_corpus_sequence_len(corpus, i, &mut len), PalStatus::Ok);
            assert_eq!(len, seq.len());
        }
        pal_corpus_free(corpus);
        pal_model_free(model);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(pal_model_load(ptr::null(), &mut model), PalStatus::NullArgument);
        let missing = CString::new("/nonexistent/model.palc").unwrap();
        assert_eq!(pal_model_load(missing.as_ptr(), &mut model), PalStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("nonexistent"));

        // A corpus is not a checkpoint.
        assert_eq!(pal_model_load(cstr(&f.vision).as_ptr(), &mut model), PalStatus::Format);

        let bytes = std::fs::read(&f.vision).unwrap();
        let cut = f.vision.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        let mut corpus = ptr::null_mut();
        assert_eq!(pal_corpus_load(cstr(&cut).as_ptr(), &mut corpus), PalStatus::Corruption);

        assert_eq!(pal_model_load(cstr(&f.checkpoint).as_ptr(), &mut model), PalStatus::Ok);
        assert_eq!(last_error(), "");
        let mut h = [0.0; 8];
        let tokens = [1.0; 10];
        // Vision side expects D=32.
        let st = pal_model_encode(model, 0, tokens.as_ptr(), 1, 10, h.as_mut_ptr(), 8);
        assert_eq!(st, PalStatus::InvalidArgument);
        let st = pal_model_encode(model, 7, tokens.as_ptr(), 1, 10, h.as_mut_ptr(), 8);
        assert_eq!(st, PalStatus::InvalidArgument);
        let zeros = [0.0; 24];
        let st = pal_model_encode(model, 1, zeros.as_ptr(), 1, 24, h.as_mut_ptr(), 8);
        assert_eq!(st, PalStatus::Data);
        let ones = [1.0; 24];
        let st = pal_model_encode(model, 1, ones.as_ptr(), 1, 24, h.as_mut_ptr(), 3);
        assert_eq!(st, PalStatus::BufferTooSmall);
        assert_eq!(pal_model_encode(model, 1, ones.as_ptr(), 1, 24, h.as_mut_ptr(), 8), PalStatus::Ok);
        pal_model_free(model);
    }
}

#[test]
fn gradcheck_through_ffi() {
    let (mut passed, mut worst) = (0, f64::NAN);
    unsafe {
        assert_eq!(pal_gradcheck(5, 3, &mut passed, &mut worst), PalStatus::Ok);
        assert_eq!(passed, 1);
        assert!(worst < 1e-6);
        assert_eq!(pal_gradcheck(0, 3, &mut passed, &mut worst), PalStatus::InvalidArgument);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(pal_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test binary> -> target/<profile>/libpal_ffi.a
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libpal_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_header() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipping C link test");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping C link test");
        return;
    }
    let f = fixture();
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = f.checkpoint.with_file_name("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(&f.checkpoint).arg(&f.vision).output().unwrap();
    assert!(out.status.success(), "C smoke test exited with {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let norm2: f64 = text.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!(text.starts_with("k=8 "));
    assert!((norm2 - 1.0).abs() < 1e-12);
}
