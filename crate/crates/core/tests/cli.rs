use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmgdm::commands::{read_manifest, Report, MANIFEST_FILE};
use hmgdm::synthetic::{survival_cohort, write_texture_corpus};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_hmgdm");

fn hmgdm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("HMGDM_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        r#"seed = 3
[graph]
n_regions = 12
tile = 16
[codec]
factor = 4
hidden = 8
[backbone]
layers = 2
heads = 2
[diffusion]
steps = 100
[training]
epochs = 4
codec_epochs = 2
batch_size = 4
codec_batch_size = 32
lr = 0.001
[downstream]
epochs = 40
lr = 0.01
batch_size = 0
holdout = 0.25
[paths]
graphs = "{}"
runs = "{}"
{extra}"#,
        s(&dir.join("graphs")),
        s(&dir.join("runs"))
    );
    fs::write(&path, text).unwrap();
    path
}

fn corpus(dir: &Path, n: usize) -> PathBuf {
    let images = dir.join("images");
    write_texture_corpus(&images, n, 64, 11).unwrap();
    images
}

#[test]
fn empty_directory_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (inp, out) = (dir.path().join("in"), dir.path().join("out"));
    fs::create_dir(&inp).unwrap();
    let o = hmgdm(&["build-graphs", "--input", s(&inp), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_manifest(&out.join(MANIFEST_FILE)).unwrap().is_empty());
}

#[test]
fn manifest_hashes_match_bundles_and_failures_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let images = corpus(dir.path(), 4);
    fs::write(images.join("zz_broken.png"), b"not a png").unwrap();
    let out = dir.path().join("graphs");
    let args = ["build-graphs", "--input", s(&images), "--output", s(&out), "--regions", "12", "--tile", "16"];
    let o = hmgdm(&args);
    assert_eq!(code(&o), 1);
    let m = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.len(), 5);
    assert!(m[4].error.is_some() && m[4].file == "zz_broken.png");
    for e in &m[..4] {
        let bytes = fs::read(out.join(e.bundle.as_ref().unwrap())).unwrap();
        assert_eq!(e.sha256.as_deref(), Some(hex::encode(Sha256::digest(&bytes)).as_str()));
    }
    let first = fs::read(out.join(MANIFEST_FILE)).unwrap();
    hmgdm(&args);
    assert_eq!(fs::read(out.join(MANIFEST_FILE)).unwrap(), first);
}

#[test]
fn kernel_flag_dispatches_with_kernel_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let images = corpus(dir.path(), 3);
    let reference = dir.path().join("reference");
    let via_kernel = dir.path().join("kernel");
    let graph_args = ["--regions", "12", "--tile", "16"];
    let mut args = vec!["build-graphs", "--input", s(&images), "--output", s(&reference)];
    args.extend(graph_args);
    assert_eq!(code(&hmgdm(&args)), 0);

    // Stand-in kernel: translates the kernel's flags back into a reference
    // build, so the dispatch contract can be checked without the kernel.
    let stub = dir.path().join("stub-kernel");
    let script = format!(
        "#!/bin/sh\nwhile [ $# -gt 0 ]; do case $1 in --in) i=$2;; --out) o=$2;; --regions) r=$2;; --compactness) c=$2;; --iters) k=$2;; --tile) a=$2;; --dilation) d=$2;; --workers) w=$2;; esac; shift 2; done\n[ -n \"$w\" ] || exit 3\nexec {BIN} build-graphs --input \"$i\" --output \"$o\" --regions $r --compactness $c --iters $k --tile $a --dilation $d\n"
    );
    fs::write(&stub, script).unwrap();
    fs::set_permissions(&stub, fs::Permissions::from_mode(0o755)).unwrap();
    let mut args = vec!["build-graphs", "--input", s(&images), "--output", s(&via_kernel), "--kernel", s(&stub)];
    args.extend(graph_args);
    let o = hmgdm(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_manifest(&via_kernel.join(MANIFEST_FILE)).unwrap(), read_manifest(&reference.join(MANIFEST_FILE)).unwrap());

    let missing = dir.path().join("no-such-kernel");
    let o = hmgdm(&["build-graphs", "--input", s(&images), "--output", s(&via_kernel), "--kernel", s(&missing)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot run graph kernel"));
}

#[test]
fn invalid_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[mask]\nratio = 0.6\nextra = 1\n").unwrap();
    let o = hmgdm(&["--config", s(&bad), "pretrain"]);
    assert_eq!(code(&o), 2);
    let o = hmgdm(&["pretrain", "--mask-ratio", "1.2"]);
    assert_eq!(code(&o), 2);
    let o = Command::new(BIN).args(["build-graphs", "--input", ".", "--output", "."]).env("HMGDM_SEED", "x").output().unwrap();
    assert_eq!(code(&o), 2);
}

fn read_report(p: &Path) -> Report {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn full_pipeline_through_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let images = corpus(root, 16);
    let cfg = tiny_config(root, "");
    let c = s(&cfg);
    assert_eq!(code(&hmgdm(&["--config", c, "build-graphs", "--input", s(&images), "--output", s(&root.join("graphs"))])), 0);

    let o = hmgdm(&["--config", c, "pretrain", "--mask-ratio", "0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    for f in ["run.json", "config.toml", "schedule.csv", "masks.jsonl", "codec.json", "backbone.json", "stage1_trace.csv", "stage2_trace.csv", "rmse_t.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let masks = fs::read_to_string(run.join("masks.jsonl")).unwrap();
    assert_eq!(masks.lines().count(), 4);
    assert!(masks.lines().all(|l| l.contains("\"ratio\":0.5")));

    let labels = images.join("labels.csv");
    let r = s(&run);
    assert_eq!(code(&hmgdm(&["--config", c, "finetune", "--run", r, "--task", "classify", "--labels", s(&labels)])), 0);
    let o = hmgdm(&["--config", c, "eval", "--run", r, "--task", "classify", "--labels", s(&labels)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report_path = run.join("heads/classify/report.json");
    let first = fs::read(&report_path).unwrap();
    match read_report(&report_path) {
        Report::Classify { n, accuracy, .. } => assert!(n == 4 && (0.0..=1.0).contains(&accuracy)),
        other => panic!("unexpected report {other:?}"),
    }
    hmgdm(&["--config", c, "eval", "--run", r, "--task", "classify", "--labels", s(&labels)]);
    assert_eq!(fs::read(&report_path).unwrap(), first);

    let class: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let surv = root.join("survival.csv");
    let mut w = csv::Writer::from_path(&surv).unwrap();
    w.write_record(["id", "time", "event"]).unwrap();
    for rec in survival_cohort(&class, 2) {
        w.write_record([rec.id, rec.time.to_string(), u8::from(rec.event).to_string()]).unwrap();
    }
    w.flush().unwrap();
    assert_eq!(code(&hmgdm(&["--config", c, "finetune", "--run", r, "--task", "survival", "--labels", s(&surv)])), 0);
    assert_eq!(code(&hmgdm(&["--config", c, "eval", "--run", r, "--task", "survival", "--labels", s(&surv)])), 0);
    match read_report(&run.join("heads/survival/report.json")) {
        Report::Survival { c_index, p_value, .. } => assert!((0.0..=1.0).contains(&c_index) && (0.0..=1.0).contains(&p_value)),
        other => panic!("unexpected report {other:?}"),
    }

    let emb = root.join("embeddings.csv");
    assert_eq!(code(&hmgdm(&["--config", c, "embed", "--run", r, "--input", s(&images), "--output", s(&emb)])), 0);
    assert_eq!(fs::read_to_string(&emb).unwrap().lines().count(), 17);

    let (risks, rmse_t) = (run.join("heads/survival/risks.csv"), run.join("rmse_t.csv"));
    let plots = [
        vec!["plot", "tsne", "--embeddings", s(&emb), "--labels", s(&labels), "--perplexity", "4", "--output"],
        vec!["plot", "km", "--risks", s(&risks), "--output"],
        vec!["plot", "rmse_t", "--input", s(&rmse_t), "--output"],
    ];
    for (k, args) in plots.iter().enumerate() {
        let out = root.join(format!("plot{k}.svg"));
        let mut a = vec!["--config", c];
        a.extend(args);
        a.push(s(&out));
        let o = hmgdm(&a);
        assert_eq!(code(&o), 0, "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
        assert!(fs::read_to_string(&out).unwrap().starts_with("<svg"));
    }
    let heat = root.join("heat.png");
    let img = images.join("patch_00000.png");
    assert_eq!(code(&hmgdm(&["--config", c, "plot", "heatmap", "--run", r, "--image", s(&img), "--output", s(&heat)])), 0);
    assert_eq!(image::open(&heat).unwrap().width(), 64);
    let o = hmgdm(&["--config", c, "plot", "km", "--risks", s(&root.join("absent.csv")), "--output", s(&root.join("k.svg"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.csv"));

    let o = hmgdm(&["--config", c, "eval", "--run", r, "--task", "classify", "--labels", s(&root.join("none.csv"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn interrupted_pretraining_resumes_to_the_same_trace_and_refuses_foreign_configs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let images = corpus(root, 6);
    let cfg = tiny_config(root, "");
    let c = s(&cfg);
    assert_eq!(code(&hmgdm(&["--config", c, "build-graphs", "--input", s(&images), "--output", s(&root.join("graphs"))])), 0);

    let (a, b) = (root.join("a"), root.join("b"));
    assert_eq!(code(&hmgdm(&["--config", c, "pretrain", "--run-dir", s(&a)])), 0);
    assert_eq!(code(&hmgdm(&["--config", c, "pretrain", "--run-dir", s(&b), "--stop-after", "1"])), 0);
    assert!(!b.join("backbone.json").exists());
    assert_eq!(code(&hmgdm(&["--config", c, "pretrain", "--run-dir", s(&b), "--stop-after", "2"])), 0);
    assert_eq!(code(&hmgdm(&["--config", c, "pretrain", "--run-dir", s(&b)])), 0);
    for f in ["stage1_trace.csv", "stage2_trace.csv", "masks.jsonl", "codec.json", "backbone.json", "rmse_t.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs after resume");
    }

    let o = hmgdm(&["--config", c, "pretrain", "--run-dir", s(&a), "--mask-ratio", "0.3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to resume"));
}
