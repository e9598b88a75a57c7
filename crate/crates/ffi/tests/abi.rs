use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dasnet::data::synth::{generate_sample, DatasetConfig, SynthSample};
use dasnet::decoder::semantic_infer;
use dasnet::harness::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, RngState, Stage};
use dasnet::instance::instance_infer;
use dasnet::model::{Model, ModelConfig};
use dasnet::ParamStore;
use dasnet_ffi::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

/// Untrained checkpoints of every stage in a temporary directory.
struct Fixture {
    dir: TempDir,
    model: Model,
    semantic: ParamStore,
    instance: ParamStore,
}

impl Fixture {
    fn new() -> Self {
        let model = Model::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut detector = ParamStore::new();
        model.init_detector(&mut detector, &mut rng);
        let mut semantic = detector.clone();
        model.init_semantic(&mut semantic, &mut rng);
        let mut instance = detector.clone();
        model.init_instance(&mut instance, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        for (stage, params) in [
            (Stage::Detector, &detector),
            (Stage::Semantic, &semantic),
            (Stage::Instance, &instance),
        ] {
            let ckpt = Checkpoint {
                meta: CheckpointMeta {
                    stage,
                    step: 0,
                    rng: RngState::capture(&rng),
                    model: model.cfg.clone(),
                },
                params: params.clone(),
            };
            save_checkpoint(&ckpt, &dir.path().join(format!("{stage}.ckpt"))).unwrap();
        }
        Self {
            dir,
            model,
            semantic,
            instance,
        }
    }

    fn path(&self, stage: Stage) -> PathBuf {
        self.dir.path().join(format!("{stage}.ckpt"))
    }

    fn load(&self, stage: Stage) -> *mut DasnetModel {
        load(&self.path(stage)).expect("load")
    }
}

fn load(path: &Path) -> Result<*mut DasnetModel, DasnetStatus> {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { dasnet_model_load(c.as_ptr(), &mut m) };
    if st == DasnetStatus::Ok {
        assert!(!m.is_null());
        Ok(m)
    } else {
        assert!(m.is_null(), "out is cleared on failure");
        Err(st)
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dasnet_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn sample() -> SynthSample {
    generate_sample(17, &DatasetConfig::default()).unwrap()
}

/// Interleaved RGB bytes of a planar sample image.
fn interleaved(s: &SynthSample) -> Vec<u8> {
    let plane = s.width * s.height;
    (0..3 * plane)
        .map(|j| s.image[(j % 3) * plane + j / 3])
        .collect()
}

fn entries(r: *const DasnetResult) -> Vec<DasnetInstance> {
    let mut n = 0;
    assert_eq!(unsafe { dasnet_result_len(r, &mut n) }, DasnetStatus::Ok);
    (0..n)
        .map(|i| {
            let mut e = DasnetInstance::default();
            assert_eq!(unsafe { dasnet_result_get(r, i, &mut e) }, DasnetStatus::Ok);
            e
        })
        .collect()
}

#[test]
fn load_reports_classes_and_stage() {
    let f = Fixture::new();
    for (stage, want) in [
        (Stage::Detector, DasnetStage::Detector),
        (Stage::Semantic, DasnetStage::Semantic),
        (Stage::Instance, DasnetStage::Instance),
    ] {
        let m = f.load(stage);
        let (mut classes, mut got) = (0u32, DasnetStage::Detector);
        unsafe {
            assert_eq!(dasnet_model_classes(m, &mut classes), DasnetStatus::Ok);
            assert_eq!(dasnet_model_stage(m, &mut got), DasnetStatus::Ok);
            dasnet_model_free(m);
        }
        assert_eq!(classes, 3);
        assert_eq!(got, want);
    }
}

#[test]
fn load_errors_map_to_codes() {
    let f = Fixture::new();
    assert_eq!(
        load(&f.dir.path().join("absent.ckpt")),
        Err(DasnetStatus::Io)
    );
    assert!(last_error().contains("absent.ckpt"));

    let junk = f.dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(load(&junk), Err(DasnetStatus::Format));
    assert!(last_error().contains("byte offset 0"));

    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dasnet_model_load(ptr::null(), &mut m) },
        DasnetStatus::NullPointer
    );
    let path = CString::new("x").unwrap();
    assert_eq!(
        unsafe { dasnet_model_load(path.as_ptr(), ptr::null_mut()) },
        DasnetStatus::NullPointer
    );
}

#[test]
fn success_clears_last_error() {
    let f = Fixture::new();
    assert!(load(&f.dir.path().join("absent.ckpt")).is_err());
    assert!(!last_error().is_empty());
    let m = f.load(Stage::Detector);
    assert_eq!(last_error(), "");
    unsafe { dasnet_model_free(m) };
}

#[test]
fn detect_matches_library() {
    let f = Fixture::new();
    let s = sample();
    let m = f.load(Stage::Detector);
    unsafe { assert_eq!(dasnet_model_set_thresholds(m, 0.0, 0.45), DasnetStatus::Ok) };
    let rgb = interleaved(&s);
    let mut r = ptr::null_mut();
    let st = unsafe { dasnet_detect(m, rgb.as_ptr(), s.width, s.height, &mut r) };
    assert_eq!(st, DasnetStatus::Ok);
    let got = entries(r);

    let mut cfg = f.model.cfg.clone();
    cfg.detector.score_thresh = 0.0;
    let model = Model::new(cfg).unwrap();
    let want = model.detector.detect(&f.semantic, &s.to_tensor()).unwrap();
    assert!(!want.is_empty());
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(
            (g.x_min, g.y_min, g.x_max, g.y_max),
            (w.x_min, w.y_min, w.x_max, w.y_max)
        );
        assert_eq!(g.label as usize, w.label);
        assert_eq!(Some(g.score), w.score);
        assert!(!g.has_mask);
    }
    let mut mask = vec![0u8; s.width * s.height];
    let st = unsafe { dasnet_result_mask(r, 0, mask.as_mut_ptr(), mask.len()) };
    assert_eq!(st, DasnetStatus::InvalidArgument);
    unsafe {
        dasnet_result_free(r);
        dasnet_model_free(m);
    }
}

#[test]
fn semantic_matches_library() {
    let f = Fixture::new();
    let s = sample();
    let m = f.load(Stage::Semantic);
    let rgb = interleaved(&s);
    let mut labels = vec![255u8; s.width * s.height];
    let st = unsafe {
        dasnet_segment_semantic(
            m,
            rgb.as_ptr(),
            s.width,
            s.height,
            labels.as_mut_ptr(),
            labels.len(),
        )
    };
    assert_eq!(st, DasnetStatus::Ok);
    let want = semantic_infer(
        &f.model.detector,
        &f.model.decoder,
        &f.semantic,
        &s.to_tensor(),
    )
    .unwrap();
    assert_eq!(labels, want);

    let st = unsafe {
        dasnet_segment_semantic(
            m,
            rgb.as_ptr(),
            s.width,
            s.height,
            labels.as_mut_ptr(),
            labels.len() - 1,
        )
    };
    assert_eq!(st, DasnetStatus::BufferSize);
    unsafe { dasnet_model_free(m) };
}

#[test]
fn instances_match_library() {
    let f = Fixture::new();
    let s = sample();
    let m = f.load(Stage::Instance);
    unsafe { assert_eq!(dasnet_model_set_thresholds(m, 0.3, 0.45), DasnetStatus::Ok) };
    let rgb = interleaved(&s);
    let mut r = ptr::null_mut();
    let st = unsafe { dasnet_segment_instances(m, rgb.as_ptr(), s.width, s.height, &mut r) };
    assert_eq!(st, DasnetStatus::Ok);
    let got = entries(r);

    let mut cfg = f.model.cfg.clone();
    cfg.detector.score_thresh = 0.3;
    let model = Model::new(cfg).unwrap();
    let want = instance_infer(
        &model.detector,
        &model.decoder,
        &f.instance,
        model.cfg.k,
        &s.to_tensor(),
    )
    .unwrap();
    assert!(!want.is_empty());
    assert_eq!(got.len(), want.len());
    let mut mask = vec![9u8; s.width * s.height];
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!((g.score, g.instance_score), (w.score, w.instance_score));
        assert_eq!(g.label as usize, w.label);
        assert!(g.has_mask);
        let st = unsafe { dasnet_result_mask(r, i, mask.as_mut_ptr(), mask.len()) };
        assert_eq!(st, DasnetStatus::Ok);
        let bits: Vec<bool> = mask.iter().map(|&v| v == 1).collect();
        assert!(mask.iter().all(|&v| v <= 1));
        assert_eq!(bits, w.mask);
    }
    let mut e = DasnetInstance::default();
    let st = unsafe { dasnet_result_get(r, got.len(), &mut e) };
    assert_eq!(st, DasnetStatus::OutOfRange);
    unsafe {
        dasnet_result_free(r);
        dasnet_model_free(m);
    }
}

#[test]
fn stage_mismatch_rejected() {
    let f = Fixture::new();
    let s = sample();
    let rgb = interleaved(&s);
    let m = f.load(Stage::Instance);
    let mut labels = vec![0u8; s.width * s.height];
    let st = unsafe {
        dasnet_segment_semantic(
            m,
            rgb.as_ptr(),
            s.width,
            s.height,
            labels.as_mut_ptr(),
            labels.len(),
        )
    };
    assert_eq!(st, DasnetStatus::WrongStage);
    assert!(last_error().contains("instance"));
    unsafe { dasnet_model_free(m) };

    let m = f.load(Stage::Semantic);
    let mut r = ptr::null_mut();
    let st = unsafe { dasnet_segment_instances(m, rgb.as_ptr(), s.width, s.height, &mut r) };
    assert_eq!(st, DasnetStatus::WrongStage);
    assert!(r.is_null());
    unsafe { dasnet_model_free(m) };
}

#[test]
fn rejected_thresholds_leave_model_unchanged() {
    let f = Fixture::new();
    let s = sample();
    let rgb = interleaved(&s);
    let m = f.load(Stage::Detector);
    let count = |m| {
        let mut r = ptr::null_mut();
        assert_eq!(
            unsafe { dasnet_detect(m, rgb.as_ptr(), s.width, s.height, &mut r) },
            DasnetStatus::Ok
        );
        let n = entries(r).len();
        unsafe { dasnet_result_free(r) };
        n
    };
    unsafe { assert_eq!(dasnet_model_set_thresholds(m, 0.0, 0.45), DasnetStatus::Ok) };
    let before = count(m);
    for (score, nms) in [(1.5, 0.45), (0.1, 0.0), (f32::NAN, 0.45)] {
        let st = unsafe { dasnet_model_set_thresholds(m, score, nms) };
        assert_eq!(st, DasnetStatus::InvalidArgument, "{score} {nms}");
    }
    assert_eq!(count(m), before);
    unsafe { dasnet_model_free(m) };
}

#[test]
fn null_and_empty_arguments() {
    let f = Fixture::new();
    let m = f.load(Stage::Detector);
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            dasnet_detect(m, ptr::null(), 4, 4, &mut r),
            DasnetStatus::NullPointer
        );
        assert_eq!(
            dasnet_detect(ptr::null(), [0u8; 3].as_ptr(), 1, 1, &mut r),
            DasnetStatus::NullPointer
        );
        assert_eq!(
            dasnet_detect(m, [0u8; 3].as_ptr(), 0, 1, &mut r),
            DasnetStatus::InvalidArgument
        );
        let mut n = 0;
        assert_eq!(
            dasnet_result_len(ptr::null(), &mut n),
            DasnetStatus::NullPointer
        );
        dasnet_result_free(ptr::null_mut());
        dasnet_model_free(ptr::null_mut());
        dasnet_model_free(m);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(dasnet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dasnet.h"))
            .unwrap();
    for f in [
        "dasnet_last_error",
        "dasnet_version",
        "dasnet_model_load",
        "dasnet_model_free",
        "dasnet_model_classes",
        "dasnet_model_stage",
        "dasnet_model_set_thresholds",
        "dasnet_detect",
        "dasnet_segment_semantic",
        "dasnet_segment_instances",
        "dasnet_result_len",
        "dasnet_result_get",
        "dasnet_result_mask",
        "dasnet_result_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct DasnetModel DasnetModel;"));
    assert!(header.contains("DASNET_STATUS_OK = 0"));
}

/// Directory holding the static library built alongside this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles the C example against the header and static library, then runs
/// it on a detector checkpoint. Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not found; skipping");
        return;
    }
    let lib = artifact_dir().join("libdasnet_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let f = Fixture::new();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = f.dir.path().join("detect");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-I"])
        .arg(manifest.join("include"))
        .arg(manifest.join("examples/detect.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = Command::new(&exe)
        .arg(f.path(Stage::Detector))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("classes=3\n"), "{stdout}");
    assert!(stdout.contains("detections="), "{stdout}");

    let out = Command::new(&exe)
        .arg(f.dir.path().join("absent.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}
