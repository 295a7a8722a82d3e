use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use despoof_core::denoiser::{init_denoiser, DenoiserConfig, DomainTag};
use despoof_core::detector::{init_detector, DetectorConfig, InputMode};
use despoof_core::schedule::NoiseSchedule;
use despoof_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsp_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn small_denoiser(dir: &Path, tag: DomainTag, seed: u64) -> CString {
    let cfg = DenoiserConfig {
        image_size: 8,
        base_width: 4,
        time_embed_dim: 8,
        seed,
        ..DenoiserConfig::default()
    };
    let path = dir.join(format!("{}.dspd", tag.as_str()));
    init_denoiser::<f32>(cfg, tag).unwrap().save(&path, &NoiseSchedule::default()).unwrap();
    cpath(&path)
}

fn load_denoiser(path: &CString) -> *mut DspDenoiser {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dsp_denoiser_load(path.as_ptr(), &mut h) }, DspStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

fn image(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 37 % 17) as f32 / 8.0 - 1.0).clamp(-1.0, 1.0)).collect()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dsp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn despoof_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let s = load_denoiser(&small_denoiser(dir.path(), DomainTag::SpoofUnion, 1));
    let g = load_denoiser(&small_denoiser(dir.path(), DomainTag::GenuineOnly, 2));
    let mut tag = DspDomainTag::SpoofUnion;
    assert_eq!(unsafe { dsp_denoiser_domain_tag(g, &mut tag) }, DspStatus::Ok);
    assert_eq!(tag, DspDomainTag::GenuineOnly);

    let x = image(3 * 8 * 8);
    let mut noise = vec![-1.0f32; x.len()];
    let mut recon = vec![9.0f32; x.len()];
    let mut energy = -1.0;
    let st = unsafe { dsp_despoof(s, g, x.as_ptr(), 3, 8, 8, 5, recon.as_mut_ptr(), noise.as_mut_ptr(), &mut energy) };
    assert_eq!(st, DspStatus::Ok, "{}", last_error());
    assert!(noise.iter().all(|v| *v >= 0.0));
    assert!(recon.iter().all(|v| (-1.0..=1.0).contains(v)));
    for ((n, r), v) in noise.iter().zip(&recon).zip(&x) {
        assert!((n - (v - r).abs()).abs() < 1e-6);
    }
    let mean = noise.iter().map(|v| *v as f64).sum::<f64>() / noise.len() as f64;
    assert!((energy - mean).abs() < 1e-6);

    // Optional outputs may be null; results are deterministic.
    let mut again = vec![0.0f32; x.len()];
    let st = unsafe { dsp_despoof(s, g, x.as_ptr(), 3, 8, 8, 5, ptr::null_mut(), again.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, DspStatus::Ok);
    assert_eq!(again, noise);

    // Swapped roles are rejected by the domain-tag check.
    let st = unsafe { dsp_despoof(g, s, x.as_ptr(), 3, 8, 8, 5, ptr::null_mut(), again.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, DspStatus::InvalidArgument);
    assert!(last_error().contains("spoof_union"), "{}", last_error());

    unsafe {
        dsp_denoiser_free(s);
        dsp_denoiser_free(g);
        dsp_denoiser_free(ptr::null_mut());
    }
}

#[test]
fn null_and_missing_inputs_report_errors() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dsp_denoiser_load(ptr::null(), &mut h) }, DspStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = CString::new("/nonexistent/model.dspd").unwrap();
    assert_eq!(unsafe { dsp_denoiser_load(missing.as_ptr(), &mut h) }, DspStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { dsp_detector_load(missing.as_ptr(), &mut d) }, DspStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dspd");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { dsp_denoiser_load(cpath(&junk).as_ptr(), &mut h) }, DspStatus::Format);

    let mut out = 0.0;
    let st = unsafe { dsp_despoof(ptr::null(), ptr::null(), ptr::null(), 3, 8, 8, 5, ptr::null_mut(), ptr::null_mut(), &mut out) };
    assert_eq!(st, DspStatus::NullPointer);
}

#[test]
fn detector_scores_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig {
        inputs: InputMode::RgbNoise,
        widths: [3, 4, 4],
        image_size: 8,
        ..DetectorConfig::default()
    };
    let path = dir.path().join("det.dspc");
    let params = init_detector::<f32>(cfg).unwrap();
    params.save(&path).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dsp_detector_load(cpath(&path).as_ptr(), &mut h) }, DspStatus::Ok);
    let mut needs = 9;
    assert_eq!(unsafe { dsp_detector_needs_noise(h, &mut needs) }, DspStatus::Ok);
    assert_eq!(needs, 1);

    let x = image(3 * 64);
    let n: Vec<f32> = x.iter().map(|v| v.abs() * 0.1).collect();
    let mut score = -1.0;
    let mut depth = vec![-1.0f32; 32 * 32];
    let st = unsafe { dsp_detector_score(h, x.as_ptr(), n.as_ptr(), 8, 0, &mut score, depth.as_mut_ptr()) };
    assert_eq!(st, DspStatus::Ok, "{}", last_error());
    let mean = depth.iter().map(|v| *v as f64).sum::<f64>() / depth.len() as f64;
    assert!((score - mean).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&score));

    let expected = params
        .predict(
            &despoof_core::numerics::Tensor::new(&[1, 3, 8, 8], x.clone()).unwrap(),
            Some(&despoof_core::numerics::Tensor::new(&[1, 3, 8, 8], n.clone()).unwrap()),
        )
        .unwrap();
    assert_eq!(score, expected.scores()[0]);
    let mut fused = -1.0;
    let st = unsafe { dsp_detector_score(h, x.as_ptr(), n.as_ptr(), 8, 1, &mut fused, ptr::null_mut()) };
    assert_eq!(st, DspStatus::Ok);
    assert_eq!(fused, expected.fused_scores().unwrap()[0]);

    // A noise-fed detector needs its noise map; wrong sizes fail cleanly.
    let st = unsafe { dsp_detector_score(h, x.as_ptr(), ptr::null(), 8, 0, &mut score, ptr::null_mut()) };
    assert_eq!(st, DspStatus::NullPointer);
    let st = unsafe { dsp_detector_score(h, x.as_ptr(), n.as_ptr(), 4, 0, &mut score, ptr::null_mut()) };
    assert_eq!(st, DspStatus::InvalidArgument);
    unsafe { dsp_detector_free(h) };
}

#[test]
fn metrics_match_hand_counts() {
    // Genuine scores 0.9, 0.8, 0.3; spoof scores 0.6, 0.2, 0.1.
    let scores = [0.9, 0.8, 0.3, 0.6, 0.2, 0.1];
    let labels = [1u8, 1, 1, 0, 0, 0];
    let (mut e, mut t) = (-1.0, -1.0);
    assert_eq!(unsafe { dsp_eer(scores.as_ptr(), labels.as_ptr(), 6, &mut e, &mut t) }, DspStatus::Ok);
    // Between 0.3 and 0.6 one of three of each class is misclassified.
    assert_eq!(e, 1.0 / 3.0);
    assert_eq!(t, (0.3 + 0.6) / 2.0);

    let mut m = DspMetrics::default();
    let test = [0.95, 0.5, 0.4, 0.3];
    let test_labels = [1u8, 1, 0, 0];
    let st = unsafe { dsp_metrics(scores.as_ptr(), labels.as_ptr(), 6, test.as_ptr(), test_labels.as_ptr(), 4, &mut m) };
    assert_eq!(st, DspStatus::Ok);
    // Threshold midway between 0.3 and 0.6: genuine 0.95 and 0.5 accepted, spoofs rejected.
    assert_eq!(m.threshold, (0.3 + 0.6) / 2.0);
    assert_eq!((m.apcer, m.bpcer, m.acer, m.hter), (0.0, 0.0, 0.0, 0.0));

    let bad = [1u8, 2, 0];
    assert_eq!(unsafe { dsp_eer(scores.as_ptr(), bad.as_ptr(), 3, &mut e, &mut t) }, DspStatus::InvalidArgument);
    let one_class = [1u8; 3];
    assert_eq!(unsafe { dsp_eer(scores.as_ptr(), one_class.as_ptr(), 3, &mut e, &mut t) }, DspStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/despoof.h")).unwrap();
    for name in [
        "dsp_version",
        "dsp_last_error",
        "dsp_denoiser_load",
        "dsp_denoiser_domain_tag",
        "dsp_denoiser_free",
        "dsp_despoof",
        "dsp_detector_load",
        "dsp_detector_needs_noise",
        "dsp_detector_free",
        "dsp_detector_score",
        "dsp_eer",
        "dsp_metrics",
        "typedef struct DspDenoiser DspDenoiser",
        "typedef struct DspDetector DspDetector",
        "DSP_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/despoof.h");
    match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C syntax check, no compiler: {e}"),
    }
}
