use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
train_clips = 8
test_clips = 4

[generator]
frames = 2
height = 16
width = 16

[model]
d = 16
blocks = 2
heads = 2
mlp_ratio = 2
frames = 2
height = 16
width = 16
patch = 8
t_freq = 8
color_tokens = 3
enc_channels = [4, 8]
qformer_blocks = 1

[schedule]
t_steps = 20
sample_steps = 4

[train]
iterations = [3, 3, 3, 3]
batch_size = 2

[eval]
test_clips = 2
scenario_clips = 2
batch = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_animecolor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Workspace { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    /// Runs with the tiny config and asserts success.
    fn ok(&self, args: &[&str]) -> Output {
        let cfg = self.s("run.toml");
        let mut full = vec!["--config", &cfg, "--deterministic"];
        full.extend_from_slice(args);
        let o = run(&full);
        assert!(o.status.success(), "{args:?} failed: {}", text(&o));
        o
    }

    fn with_config(&self, args: &[&str]) -> Output {
        let cfg = self.s("run.toml");
        let mut full = vec!["--config", &cfg];
        full.extend_from_slice(args);
        run(&full)
    }

    fn gen_data(&self) {
        self.ok(&["gen-data", "--out", &self.s("data")]);
    }

    fn train(&self, stage: &str, out: &str, from: &[&str]) {
        let mut args = vec!["train".to_string(), "--stage".into(), stage.into(), "--data".into(), self.s("data"), "--out".into(), self.s(out)];
        for f in from {
            args.push("--from".into());
            args.push(self.s(f));
        }
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        self.ok(&refs);
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn selftest_passes_and_reports_counts() {
    let o = run(&["selftest"]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    for suite in ["gradcheck-primitives", "gradcheck-losses", "roundtrips", "neutrality", "invariances", "ddim", "q-sample", "training"] {
        assert!(t.contains(suite), "missing {suite} in {t}");
    }
    assert!(t.contains("passed"));
}

#[test]
fn unknown_selftest_suite_is_a_usage_error() {
    assert_eq!(run(&["selftest", "--suite", "bogus"]).status.code(), Some(1));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(run(&["train", "--stage"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn stage_two_without_stage_one_names_prerequisite() {
    let w = Workspace::new();
    w.gen_data();
    let o = w.with_config(&["train", "--stage", "2", "--data", &w.s("data"), "--out", &w.s("s2.ckpt")]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("stage-1"), "{t}");
    assert!(!w.p("s2.ckpt").exists());
}

#[test]
fn training_requires_a_seed() {
    let w = Workspace::new();
    w.gen_data();
    fs::write(w.p("noseed.toml"), TINY.replace("seed = 5", "")).unwrap();
    let o = run(&["--config", &w.s("noseed.toml"), "train", "--stage", "1", "--data", &w.s("data"), "--out", &w.s("s1.ckpt")]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("seed"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let w = Workspace::new();
    fs::write(w.p("bad.toml"), format!("{TINY}\n[extra]\nkey = 1\n")).unwrap();
    let o = run(&["--config", &w.s("bad.toml"), "gen-data", "--out", &w.s("d")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_clean_refusal() {
    let w = Workspace::new();
    w.gen_data();
    let shard = format!("{}:0", w.s("data/test.aclp"));
    let o = w.with_config(&["sample", "--ckpt", &w.s("nope.ckpt"), "--sketches", &shard, "--ref", &shard, "--out", &w.s("out")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!w.p("out").exists());
}

#[test]
fn sample_is_byte_identical_across_runs() {
    let w = Workspace::new();
    w.gen_data();
    w.train("1", "s1.ckpt", &[]);
    w.train("2", "s2.ckpt", &["s1.ckpt"]);
    let sk = format!("{}:1", w.s("data/test.aclp"));
    let rf = format!("{}:0:1", w.s("data/test.aclp"));
    for out in ["a", "b"] {
        w.ok(&["sample", "--ckpt", &w.s("s2.ckpt"), "--sketches", &sk, "--ref", &rf, "--seed", "11", "--out", &w.s(out)]);
    }
    let a = dir_bytes(&w.p("a"));
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|(_, b)| b.starts_with(b"P6\n16 16\n255\n")));
    assert_eq!(a, dir_bytes(&w.p("b")));

    w.ok(&["sample", "--ckpt", &w.s("s2.ckpt"), "--sketches", &sk, "--ref", &rf, "--seed", "12", "--out", &w.s("c")]);
    assert_ne!(a, dir_bytes(&w.p("c")));

    // a pixmap reference works as well
    let ppm = w.s("a/frame_000.ppm");
    w.ok(&["sample", "--ckpt", &w.s("s2.ckpt"), "--sketches", &sk, "--ref", &ppm, "--seed", "11", "--out", &w.s("d")]);
}

#[test]
fn full_workflow_runs_end_to_end() {
    let w = Workspace::new();
    w.gen_data();
    w.train("1", "s1.ckpt", &[]);
    w.train("2", "s2.ckpt", &["s1.ckpt"]);
    w.train("3", "s3.ckpt", &["s1.ckpt"]);
    w.train("4", "s4.ckpt", &["s2.ckpt", "s3.ckpt"]);

    let log = fs::read_to_string(w.p("s4.ckpt.loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.split('\t').count() == 2));

    w.ok(&["eval", "--ckpt", &w.s("s4.ckpt"), "--scenario", "standard", "--scenario", "same_sketch_diff_ref", "--out", &w.s("eval")]);
    let tsv = fs::read_to_string(w.p("eval/eval.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("clip")).collect();
    assert_eq!(rows.len(), 2 + 4);
    assert!(rows.iter().all(|r| r.split('\t').count() == 6));
    assert!(w.p("eval/eval.txt").exists());

    let clip = format!("{}:0", w.s("data/test.aclp"));
    w.ok(&["profile", "--clip", &clip, "--row", "5", "--out", &w.s("profile.ppm")]);
    let prof = fs::read(w.p("profile.ppm")).unwrap();
    assert!(prof.starts_with(b"P6\n16 2\n255\n"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let w = Workspace::new();
    w.gen_data();
    w.train("1", "full.ckpt", &[]);
    let data = w.s("data");
    w.ok(&["train", "--stage", "1", "--data", &data, "--out", &w.s("part.ckpt"), "--stop-at", "1"]);
    w.ok(&["train", "--stage", "1", "--data", &data, "--out", &w.s("part.ckpt"), "--from", &w.s("part.ckpt")]);
    assert_eq!(fs::read(w.p("full.ckpt")).unwrap(), fs::read(w.p("part.ckpt")).unwrap());
    assert_eq!(
        fs::read(w.p("full.ckpt.loss.tsv")).unwrap(),
        fs::read(w.p("part.ckpt.loss.tsv")).unwrap()
    );
}

#[test]
fn gen_data_is_reproducible() {
    let w = Workspace::new();
    w.ok(&["gen-data", "--out", &w.s("x")]);
    w.ok(&["gen-data", "--out", &w.s("y")]);
    let x = dir_bytes(&w.p("x"));
    assert_eq!(x.len(), 4);
    assert_eq!(x, dir_bytes(&w.p("y")));
}
