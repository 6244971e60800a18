use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const CONFIG: &str = "\
[run]
seed = 11

[data]
manifest = \"data/manifest.tsv\"
image_height = 64
image_width = 32
cache_masks = false

[model]
feature_dim = 8

[batch]
p = 2
k = 4

[stage1]
epochs = 2
lr = 0.01

[stage2]
epochs = 2
lr = 0.001

[toy]
identities = 4
images_per_outfit = 8
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn with_data() -> Self {
        let f = Self::new();
        let out = f.run(&["gen-toy", "toy.toml"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        f
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ccaf"));
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("CCAF_")) {
            cmd.env_remove(k);
        }
        cmd.args(args)
            .envs(env.iter().copied())
            .current_dir(self.dir.path())
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> BTreeMap<String, String> {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        pairs(&out)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every stdout line must be a `metric=value` pair.
fn pairs(o: &Output) -> BTreeMap<String, String> {
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap_or_else(|| panic!("not a metric=value line: {l}"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn num(m: &BTreeMap<String, String>, k: &str) -> f64 {
    m[k].parse().unwrap()
}

#[test]
fn missing_config_is_usage_error() {
    let f = Fixture::new();
    let out = f.run(&["gen-toy", "nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("usage"));
    assert_eq!(f.run(&["train"]).status.code(), Some(2));
}

#[test]
fn gen_toy_refuses_non_empty_dir_without_force() {
    let f = Fixture::with_data();
    assert!(f.path("data/manifest.tsv").exists());
    assert_eq!(f.run(&["gen-toy", "toy.toml"]).status.code(), Some(3));
    let m = f.ok(&["gen-toy", "toy.toml", "--force"]);
    assert_eq!(m["images"], "64");
    assert_eq!(m["cloth_changing_testable"], "true");
}

#[test]
fn stage2_without_stage1_checkpoint() {
    let f = Fixture::with_data();
    let out = f.run(&["train", "toy.toml", "--stage", "2", "--out", "run"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    fs::write(f.path("bogus.ckpt"), b"not a checkpoint").unwrap();
    let out = f.run(&["train", "toy.toml", "--stage", "2", "--out", "run", "--init", "bogus.ckpt"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn two_stage_run_directory() {
    let f = Fixture::with_data();
    let s1 = f.ok(&["train", "toy.toml", "--stage", "1", "--out", "run"]);
    assert_eq!(s1["stage"], "1");
    assert!(f.path(&s1["checkpoint"]).exists());
    assert!(s1.contains_key("final_stage1_total"), "{s1:?}");

    // Encoders stay at their initial weights: rerun with zero epochs.
    let zero = f.dir.path().join("zero.toml");
    fs::write(&zero, CONFIG.replace("[stage1]\nepochs = 2", "[stage1]\nepochs = 0")).unwrap();
    let init = f.ok(&["train", "zero.toml", "--stage", "1", "--out", "run0"]);
    for g in ["raw_encoder", "shield_encoder", "text_encoder"] {
        let k = format!("checksum_{g}");
        assert_eq!(s1[&k], init[&k], "{g}");
    }
    assert_ne!(s1["checksum_prompt_bank"], init["checksum_prompt_bank"]);

    assert_eq!(fs::read(f.path("run/config.toml")).unwrap(), CONFIG.as_bytes());
    let fp = fs::read_to_string(f.path("run/fingerprint.toml")).unwrap();
    assert!(fp.contains("seed = 11") && fp.contains("version = "), "{fp}");
    assert!(!fp.contains("[overrides]"), "{fp}");
    assert!(f.path("run/metrics_stage1.csv").exists());

    // Rerunning stage 1 into the same directory needs --force.
    assert_eq!(f.run(&["train", "toy.toml", "--stage", "1", "--out", "run"]).status.code(), Some(3));

    // Stage 2 picks up the stage-1 checkpoint of the run directory.
    let s2 = f.ok(&["train", "toy.toml", "--stage", "2", "--out", "run"]);
    assert_eq!(s2["stage"], "2");
    assert_eq!(s2["checksum_prompt_bank"], s1["checksum_prompt_bank"]);
    assert_eq!(s2["checksum_text_encoder"], s1["checksum_text_encoder"]);
    assert_ne!(s2["checksum_raw_encoder"], s1["checksum_raw_encoder"]);
    assert!(f.path("run/metrics_stage2.csv").exists());

    let ev = f.ok(&["eval", "toy.toml", "--ckpt", &s2["checkpoint"], "--protocol", "cloth-changing"]);
    for k in ["rank1", "rank5", "rank10", "mAP", "queries", "junk_excluded"] {
        assert!(ev.contains_key(k), "{k}");
    }
    assert!(f.path("run/reports/eval_cloth-changing.txt").exists());
    assert!(f.path("run/reports/distances_cloth-changing.csv").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::with_data();
    let full = f.ok(&["train", "toy.toml", "--stage", "1", "--out", "a"]);
    f.ok(&["train", "toy.toml", "--stage", "2", "--out", "a"]);

    f.ok(&["train", "toy.toml", "--stage", "1", "--out", "b", "--stop-after", "1"]);
    let part = f.ok(&["train", "toy.toml", "--resume", "b/checkpoints/stage1_epoch0001.ckpt"]);
    assert_eq!(part["checkpoint_sha256"], full["checkpoint_sha256"]);
    let cut = f.ok(&["train", "toy.toml", "--stage", "2", "--out", "b", "--stop-after", "1"]);
    let done = f.ok(&["train", "toy.toml", "--resume", &cut["checkpoint"]]);
    assert_eq!(done["epoch"], "2");

    for name in ["metrics_stage1.csv", "metrics_stage2.csv"] {
        let a = fs::read(f.path("a").join(name)).unwrap();
        let b = fs::read(f.path("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn stub_encoders_and_protocols() {
    let f = Fixture::with_data();
    let oracle = f.ok(&["eval", "toy.toml", "--stub", "oracle", "--protocol", "cloth-changing", "--out", "ev"]);
    assert_eq!(num(&oracle, "rank1"), 1.0);
    assert_eq!(num(&oracle, "mAP"), 1.0);

    let random = f.ok(&["eval", "toy.toml", "--stub", "random", "--protocol", "cloth-changing", "--out", "ev"]);
    let (r1, chance, sd) = (num(&random, "rank1"), num(&random, "chance_rank1"), num(&random, "chance_rank1_sd"));
    assert!((r1 - chance).abs() <= 3.0 * sd, "rank1 {r1} vs chance {chance} ± {sd}");

    let general = f.ok(&["eval", "toy.toml", "--stub", "random", "--protocol", "general", "--out", "ev"]);
    let a = fs::read_to_string(f.path("ev/reports/eval_general.txt")).unwrap();
    let b = fs::read_to_string(f.path("ev/reports/eval_cloth-changing.txt")).unwrap();
    assert!(a.contains("junk_excluded=") && b.contains("junk_excluded="));
    assert_ne!(general["junk_excluded"], random["junk_excluded"]);
}

#[test]
fn protocol_not_applicable() {
    let f = Fixture::with_data();
    // Collapse every identity to a single outfit.
    let path = f.path("data/manifest.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let rewritten: String = text
        .lines()
        .map(|l| {
            let mut cols: Vec<String> = l.split('\t').map(str::to_string).collect();
            cols[2] = cols[1].clone();
            cols.join("\t") + "\n"
        })
        .collect();
    fs::write(&path, rewritten).unwrap();
    fs::write(f.path("data/manifest.tsv.labelmap.tsv"), "").unwrap();
    let out = f.run(&["eval", "toy.toml", "--stub", "oracle", "--protocol", "cloth-changing", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn env_overrides_are_fingerprinted() {
    let f = Fixture::with_data();
    let out = f.run_env(&["train", "toy.toml", "--stage", "1", "--out", "run"], &[("CCAF_STAGE1__EPOCHS", "1")]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(pairs(&out)["epoch"], "1");
    let fp = fs::read_to_string(f.path("run/fingerprint.toml")).unwrap();
    assert!(fp.contains("[overrides]\nCCAF_STAGE1__EPOCHS = \"1\""), "{fp}");
}
