use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqa")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = root.join("run.toml");
    let text = format!(
        "seed = 11\nclip_len = 8\ntemporal_kernel = 7\nepochs = 2\nval_fraction = 0.0\n\
         data_dir = {:?}\nout_dir = {:?}\n{extra}",
        path(&root.join("data")),
        path(&root.join("out")),
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn synth_preprocess_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let raw = root.join("raw");
    let data = root.join("data");

    let o = aqa(&["synth", "--out", path(&raw), "--samples", "6", "--clip-len", "8", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(raw.join("labels.csv").exists());

    let o = aqa(&[
        "preprocess",
        "--input",
        path(&raw),
        "--labels",
        path(&raw.join("labels.csv")),
        "--out",
        path(&data),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert_eq!(report.lines().filter(|l| l.contains(",ok,")).count(), 6);

    let cfg = write_config(root, "");
    let o = aqa(&["train", "--config", path(&cfg), "--mode", "dnla_mu_emb"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(root.join("out/metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = root.join("out/checkpoint.bin");
    assert!(ckpt.exists());

    let o = aqa(&["eval", "--checkpoint", path(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let record: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let mut keys: Vec<&str> = record.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["gender_accuracy", "mae", "n_samples", "spearman"]);
    assert_eq!(record["n_samples"], 6);

    let out = root.join("eval.json");
    let o = aqa(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written, record);

    // one sample leaves the rank correlation undefined
    let labels = fs::read_to_string(data.join("labels.csv")).unwrap();
    let single = root.join("single.csv");
    fs::write(&single, labels.lines().take(2).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let o = aqa(&["eval", "--checkpoint", path(&ckpt), "--labels", path(&single)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let o = aqa(&["train", "--config", path(&root.join("absent.toml"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));

    let cfg = write_config(root, "");
    let o = aqa(&["train", "--config", path(&cfg), "--mode", "bogus"]);
    assert_eq!(code(&o), 1);

    // data_dir points at nothing
    let o = aqa(&["train", "--config", path(&cfg)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let bad = write_config(root, "unknown_key = 1\n");
    let o = aqa(&["train", "--config", path(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown_key"));

    // a file that is not a checkpoint fails validation
    let o = aqa(&["eval", "--checkpoint", path(&cfg)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("AQACKPT1"));

    let o = aqa(&["eval", "--checkpoint", path(&root.join("absent.bin"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.bin"));
}

#[test]
fn gradcheck_reports_every_group() {
    let o = aqa(&["gradcheck", "--mode", "nla_cat", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("mode nla_cat"));
    assert!(table.contains("attention.nla.theta"));
    assert!(!table.contains("FAIL"));
}
