use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slicewise::distill::read_loss_csv;
use slicewise::eval::{MetricReport, SplitManifest};
use slicewise::volume::DatasetManifest;

const TINY: &str = r#"
[phantom]
dataset = "tiny"
n_subjects = 20
size = [16, 16, 16]

[slice]
num_slices = 2
target_side = 32

[cls_slice]
num_slices = 2
target_side = 32

[seg_slice]
num_slices = 4
target_side = 32

[crop]
global_side = 32
local_side = 16
n_local = 2

[vit]
patch_size = 8
embed_dim = 16
depth = 1
n_heads = 2
ref_side = 32
head_hidden_dim = 16
head_bottleneck_dim = 8
n_prototypes = 12

[distill]
total_steps = 6
warmup_steps = 2
batch_slices = 4
checkpoint_every = 3

[classifier]
epochs = 2
batch_subjects = 4

[segment]
epochs = 1

[eval]
n_folds = 3
fractions = [0.5, 1.0]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Env { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_slicewise"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .args(args)
            .output()
            .unwrap();
        out
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn corpus(&self) {
        self.ok(&["phantom", "--out", "corpus"]);
        self.ok(&["splits", "--manifest", "corpus/manifest.json", "--out", "splits.json"]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn corpus_and_splits() {
    let env = Env::new();
    env.corpus();
    let m = DatasetManifest::load(&env.path("corpus/manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 20);
    assert!(env.path("corpus/tiny-0000_t1.nii").exists());
    let s = SplitManifest::load(&env.path("splits.json")).unwrap();
    assert_eq!(s.test_ids.len(), 3);
    assert_eq!(s.folds.len(), 3);
    s.validate().unwrap();
}

#[test]
fn pretrain_resume_is_bitwise() {
    let env = Env::new();
    env.corpus();
    let common = ["--manifest", "corpus/manifest.json", "--splits", "splits.json"];
    env.ok(&[&["pretrain"], &common[..], &["--out", "full"]].concat());
    env.ok(&[&["pretrain"], &common[..], &["--out", "resumed", "--resume", "full/checkpoint_000003.vdck"]].concat());
    let a = read_loss_csv(&env.path("full/loss.csv")).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(read(&env.path("full/loss.csv")), read(&env.path("resumed/loss.csv")));
    assert_eq!(read(&env.path("full/final.vdck")), read(&env.path("resumed/final.vdck")));
    assert!(env.path("full/backbone.vdck").exists());
}

#[test]
fn finetune_evaluate_and_cross_eval() {
    let env = Env::new();
    env.corpus();
    let common = ["--manifest", "corpus/manifest.json", "--splits", "splits.json"];
    env.ok(&[&["pretrain"], &common[..], &["--out", "ssl"]].concat());

    let out = env.ok(
        &[
            &["finetune-cls"],
            &common[..],
            &["--backbone", "ssl/backbone.vdck", "--fold", "1", "--out", "cls"],
        ]
        .concat(),
    );
    assert!(out.starts_with("ssl fold 1"), "{out}");
    let preds: serde_json::Value = serde_json::from_slice(&read(&env.path("cls/predictions.json"))).unwrap();
    assert_eq!(preds.as_object().unwrap().len(), 3);

    env.ok(&[&["evaluate"], &common[..], &["--backbone", "ssl/backbone.vdck", "--out", "eval"]].concat());
    let reports: Vec<MetricReport> = serde_json::from_slice(&read(&env.path("eval/report.json"))).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].fold_values.len(), 3);
    assert!(reports[0].p_values.contains_key("random@1"));
    let csv = fs::read_to_string(env.path("eval/folds.csv")).unwrap();
    assert!(csv.starts_with("experiment,fold,metric,value\n"));
    assert_eq!(csv.lines().count(), 7);

    env.ok(&[&["few-shot"], &common[..], &["--out", "fs"]].concat());
    let fs_reports: Vec<MetricReport> = serde_json::from_slice(&read(&env.path("fs/few_shot.json"))).unwrap();
    assert_eq!(
        fs_reports.iter().map(|r| r.experiment.as_str()).collect::<Vec<_>>(),
        ["random@0.5", "random@1"]
    );

    // an external cohort with fresh ids is fine
    let ext = env.run(&["--set", "phantom.dataset=ext", "--set", "phantom.style=shifted", "phantom", "--out", "ext"]);
    assert!(ext.status.success());
    env.ok(&[
        "cross-eval",
        "--model",
        "cls/model.vdck",
        "--trained-splits",
        "splits.json",
        "--manifest",
        "ext/manifest.json",
        "--out",
        "xe",
    ]);
    assert!(env.path("xe/metrics.json").exists());

    // the training cohort itself is leakage: exit code 2
    let leak = env.run(&[
        "cross-eval",
        "--model",
        "cls/model.vdck",
        "--trained-splits",
        "splits.json",
        "--manifest",
        "corpus/manifest.json",
        "--out",
        "xe2",
    ]);
    assert_eq!(leak.status.code(), Some(2), "{}", String::from_utf8_lossy(&leak.stderr));
    assert!(String::from_utf8_lossy(&leak.stderr).contains("leakage"));
}

#[test]
fn segmentation_writes_volumes() {
    let env = Env::new();
    env.corpus();
    env.ok(&[
        "finetune-seg",
        "--manifest",
        "corpus/manifest.json",
        "--splits",
        "splits.json",
        "--out",
        "seg",
    ]);
    let s = SplitManifest::load(&env.path("splits.json")).unwrap();
    for id in &s.test_ids {
        let p = env.path(&format!("seg/pred/{id}_pred.nii"));
        let v = slicewise::volume::nifti::read_nifti_file(&p).unwrap();
        assert_eq!((v.dims.height, v.dims.width, v.dims.depth), (16, 16, 16));
        assert!(v.data.iter().all(|&x| x.fract() == 0.0 && (0.0..4.0).contains(&x)));
    }
    let eval: serde_json::Value = serde_json::from_slice(&read(&env.path("seg/seg_eval.json"))).unwrap();
    assert_eq!(eval["classes"], serde_json::json!([2, 3]));
}

#[test]
fn leaky_splits_and_bad_config_fail() {
    let env = Env::new();
    env.corpus();
    let mut s = SplitManifest::load(&env.path("splits.json")).unwrap();
    let id = s.test_ids.iter().next().unwrap().clone();
    s.ssl_ids.insert(id);
    s.save(&env.path("leaky.json")).unwrap();
    let out = env.run(&["pretrain", "--manifest", "corpus/manifest.json", "--splits", "leaky.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = env.run(&["--set", "vit.depth=deep", "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_command() {
    let env = Env::new();
    let out = env.ok(&["gradcheck", "--seeds", "1"]);
    assert!(out.contains("vit_forward"));
    assert!(out.contains("27 cases"));
}
