use std::path::{Path, PathBuf};
use std::process::Command;

use egcl::cli::RunManifest;
use egcl::exemplar::ExemplarDictionary;
use egcl::fsutil::file_sha256;

const TINY: &str = r#"
[paths]
data_dir = "data"
dictionary = "dict.egdx"
checkpoint_dir = "ckpt"
index_dir = "index"
report_dir = "report"

[data]
seed = 5
num_scenes = 8
eval_scenes = 6

[dictionary]
k = 6
seed = 5

[training]
seed = 5
offline_steps = 4
online_steps = 4

[index]
seed = 5
"#;

fn egcl(config: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_egcl"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn run_pipeline(cfg: &Path) {
    for args in [
        &["gen-data"][..],
        &["build-dict"],
        &["train", "--phase", "both"],
        &["index"],
        &["eval"],
    ] {
        let (code, out) = egcl(cfg, args);
        assert_eq!(code, 0, "{args:?}: {out}");
    }
}

fn artifact_hashes(root: &Path) -> Vec<(String, String)> {
    let mut files = vec![
        "data/train.egfs",
        "data/crops.egfs",
        "data/eval.egfs",
        "data/scenes.json",
        "dict.egdx",
        "ckpt/offline.egcp",
        "ckpt/online.egcp",
        "report/report.txt",
        "report/curves.csv",
    ];
    let idx: Vec<String> = (2..=5).map(|l| format!("index/index_l{l}.egnx")).collect();
    files.extend(idx.iter().map(String::as_str));
    files
        .iter()
        .map(|f| (f.to_string(), file_sha256(&root.join(f)).unwrap()))
        .collect()
}

#[test]
fn pipeline_runs_and_replays_exactly() {
    let (a, cfg_a) = setup(TINY);
    run_pipeline(&cfg_a);
    let (b, cfg_b) = setup(TINY);
    run_pipeline(&cfg_b);
    assert_eq!(artifact_hashes(a.path()), artifact_hashes(b.path()));

    let dict = ExemplarDictionary::load(&a.path().join("dict.egdx")).unwrap();
    assert_eq!(dict.len(), 6);
    let report = std::fs::read_to_string(a.path().join("report/report.txt")).unwrap();
    assert_eq!(report.matches("fppi ").count(), 9 * 2 * 3);
    assert!(report.contains("+FT+OOCL+ECI"));
    let m = RunManifest::load(&a.path().join("report/manifest.json")).unwrap();
    assert_eq!(m.artifacts.len(), 3);
    assert!(m.inputs.len() >= 9);

    // Resuming from the saved offline checkpoint continues exactly.
    let (code, out) = egcl(&cfg_b, &["train", "--phase", "online"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(
        file_sha256(&a.path().join("ckpt/online.egcp")).unwrap(),
        file_sha256(&b.path().join("ckpt/online.egcp")).unwrap()
    );
}

#[test]
fn stale_artifacts_are_refused_unless_overridden() {
    let (dir, cfg) = setup(TINY);
    assert_eq!(egcl(&cfg, &["gen-data"]).0, 0);
    let (code, out) = egcl(&cfg, &["build-dict", "--seed", "9"]);
    assert_eq!(code, 3, "{out}");
    assert!(out.contains("--allow-config-mismatch"));
    let (code, out) = egcl(&cfg, &["build-dict", "--seed", "9", "--allow-config-mismatch"]);
    assert_eq!(code, 0, "{out}");
    // Changing only the scoring weights keeps upstream stages valid.
    assert_eq!(egcl(&cfg, &["build-dict"]).0, 0);
    assert_eq!(egcl(&cfg, &["train", "--mu", "0.3"]).0, 0);
    assert!(dir.path().join("ckpt/online.egcp").exists());
}

#[test]
fn exit_codes() {
    let (_dir, cfg) = setup("[data]\nnum_scenes = \"many\"\n");
    let (code, out) = egcl(&cfg, &["gen-data"]);
    assert_eq!(code, 2);
    assert!(out.contains("[data] num_scenes"), "{out}");

    let (_dir, cfg) = setup("[scoring]\nmu = 0.8\nlambda = 0.4\n");
    assert_eq!(egcl(&cfg, &["gen-data"]).0, 2);

    let (_dir, cfg) = setup(TINY);
    assert_eq!(egcl(&cfg, &["gen-data"]).0, 0);
    let (code, out) = egcl(&cfg, &["build-dict", "--k", "500", "--allow-config-mismatch"]);
    assert_eq!(code, 3, "{out}");

    let (_dir, cfg) = setup(&format!("{TINY}\n[contrastive]\ntau = 1e-320\n"));
    assert_eq!(egcl(&cfg, &["gen-data"]).0, 0);
    assert_eq!(egcl(&cfg, &["build-dict"]).0, 0);
    let (code, out) = egcl(&cfg, &["train", "--phase", "offline"]);
    assert_eq!(code, 4, "{out}");

    let missing = Path::new("/nonexistent/run.toml");
    assert_eq!(egcl(missing, &["gen-data"]).0, 3);
    let (_dir, cfg) = setup(TINY);
    assert_eq!(egcl(&cfg, &["train", "--phase", "sideways"]).0, 2);
}
