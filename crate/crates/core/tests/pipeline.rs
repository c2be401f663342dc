use std::fs;
use std::path::Path;

use sparse_aqa::attention::DistillMode;
use sparse_aqa::harness::{
    gradcheck, load_corpus, preprocess_corpus, synth_corpus, train, Checkpoint, GradcheckOptions, ModelParams,
    RunConfig, Sample, SynthSpec, METRICS_HEADER,
};
use sparse_aqa::skeleton::{write_labels, write_openpose_frame, Gender, SampleLabel, NUM_CLIPS, NUM_JOINTS};
use sparse_aqa::tensor::{SeededRng, Tensor};
use sparse_aqa::Error;

fn synth(root: &Path, n: usize, drop_prob: f64) {
    let mut spec = SynthSpec::new(n, 8, 0.01, 5);
    spec.drop_prob = drop_prob;
    synth_corpus(&spec, &root.join("raw")).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_seed(3);
    cfg.clip_len = 8;
    cfg.temporal_kernel = 7;
    cfg.out_dir = root.join("run");
    cfg
}

#[test]
fn preprocessing_is_reproducible_and_feeds_the_loader() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth(root, 4, 0.04);
    let raw = root.join("raw");
    let a = preprocess_corpus(&raw, &raw.join("labels.csv"), &root.join("a")).unwrap();
    let b = preprocess_corpus(&raw, &raw.join("labels.csv"), &root.join("b")).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.is_ok()));
    assert!(a.iter().any(|r| r.interpolated > 0), "joint dropout should trigger repair");
    assert_eq!(dir_bytes(&root.join("a")), dir_bytes(&root.join("b")));

    let cfg = small_config(root);
    let data = root.join("a");
    let samples = load_corpus(&data, &data.join("labels.csv"), &cfg).unwrap();
    assert_eq!(samples.len(), 4);
    for s in &samples {
        assert_eq!(s.clips.shape(), &[NUM_CLIPS, 8, NUM_JOINTS, cfg.channels[0]]);
        assert!(s.clips.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn sample_without_any_skeleton_is_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth(root, 2, 0.0);
    let raw = root.join("raw");
    let empty = raw.join("zz_empty");
    fs::create_dir(&empty).unwrap();
    for i in 0..60 {
        fs::write(empty.join(format!("zz_empty_{i:012}_keypoints.json")), write_openpose_frame(&[])).unwrap();
    }
    let mut labels = sparse_aqa::skeleton::read_labels(&raw.join("labels.csv")).unwrap();
    labels.push(SampleLabel {
        sample_id: "zz_empty".into(),
        ..labels[0].clone()
    });
    write_labels(&raw.join("labels.csv"), &labels).unwrap();

    let out = root.join("data");
    let rows = preprocess_corpus(&raw, &raw.join("labels.csv"), &out).unwrap();
    let row = rows.iter().find(|r| r.sample_id == "zz_empty").unwrap();
    assert!(!row.is_ok());
    assert_eq!(row.no_skeleton, 60);
    assert!(!out.join("zz_empty.seq").exists());
    let kept = sparse_aqa::skeleton::read_labels(&out.join("labels.csv")).unwrap();
    assert_eq!(kept.len(), 2);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().contains("zz_empty"));
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth(root, 3, 0.0);
    let raw = root.join("raw");
    preprocess_corpus(&raw, &raw.join("labels.csv"), &root.join("data")).unwrap();
    let mut cfg = small_config(root);
    cfg.epochs = 0;
    let data = root.join("data");
    let samples = load_corpus(&data, &data.join("labels.csv"), &cfg).unwrap();
    let outcome = train(&cfg, &samples).unwrap();
    assert!(outcome.metrics.is_empty());
    assert_eq!(fs::read_to_string(&outcome.metrics_path).unwrap(), format!("{METRICS_HEADER}\n"));
    let ckpt = Checkpoint::load(&outcome.checkpoint_path).unwrap();
    assert_eq!(ckpt.epoch, 0);
    let fresh = ModelParams::init(&cfg, &mut SeededRng::new(cfg.seed).fork(0));
    assert_eq!(ckpt.params.named(), fresh.named());
}

#[test]
fn non_finite_input_stops_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut rng = SeededRng::new(1);
    let mut samples: Vec<Sample> = (0..2)
        .map(|i| Sample {
            sample_id: format!("s{i}"),
            clips: Tensor::uniform(vec![NUM_CLIPS, 8, NUM_JOINTS, cfg.channels[0]], -1.0, 1.0, &mut rng),
            score: 40.0 + 10.0 * i as f64,
            gender: Gender::Female,
        })
        .collect();
    samples[0].clips.data_mut()[17] = f64::NAN;
    match train(&cfg, &samples) {
        Err(e @ Error::NonFinite { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn gradient_audit_flags_a_corrupted_gradient() {
    let mut cfg = RunConfig::with_seed(4);
    cfg.mode = DistillMode::NlaEmb;
    let names: Vec<String> = gradcheck(&cfg, &GradcheckOptions::default())
        .unwrap()
        .into_iter()
        .inspect(|r| assert!(r.passed, "{} failed cleanly: {:e}", r.name, r.max_rel_error))
        .map(|r| r.name)
        .collect();
    let target = names.iter().find(|n| n.contains("theta")).unwrap().clone();
    let opts = GradcheckOptions {
        fault: Some((target.clone(), 1.01)),
        ..GradcheckOptions::default()
    };
    let reports = gradcheck(&cfg, &opts).unwrap();
    for r in &reports {
        assert_eq!(r.passed, r.name != target, "{}: {:e}", r.name, r.max_rel_error);
    }
}
