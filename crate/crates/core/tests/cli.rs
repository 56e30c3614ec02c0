use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use objn_core::data::{class_tallies, load_manifest, Split};
use objn_core::RunConfig;

const TINY: &str = "\
data.train_images = 60
data.val_images = 24
train.classify_epochs = 1
train.detect_epochs = 1
train.batch_size = 16
experiment.seeds = [0]
";

fn objn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Fixture { dir }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }
    fn data(&self) -> PathBuf {
        let m = self.path("data/manifest.jsonl");
        if !m.exists() {
            ok(objn(&["gen-data", "--config", s(&self.config()), "--out", s(&self.path("data"))]));
        }
        m
    }
    fn train(&self, task: &str, out: &str, extra: &[&str]) -> (PathBuf, String) {
        let out = self.path(out);
        let (cfg, data) = (self.config(), self.data());
        let mut args = vec!["train", "--task", task, "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend(extra);
        let text = ok(objn(&args));
        (out, text)
    }
}

#[test]
fn checked_in_config_is_the_default() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(RunConfig::load(&p).unwrap(), RunConfig::default());
}

#[test]
fn gen_data_is_reproducible() {
    let f = Fixture::new();
    let a = ok(objn(&["gen-data", "--config", s(&f.config()), "--out", s(&f.path("a"))]));
    let b = ok(objn(&["gen-data", "--config", s(&f.config()), "--out", s(&f.path("b"))]));
    assert!(f.path("a/manifest.jsonl").exists());
    let sum = |t: &str| t.lines().find(|l| l.starts_with("checksum")).unwrap().to_string();
    assert_eq!(sum(&a), sum(&b));
}

#[test]
fn unknown_config_key_exits_2() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.toml"), "[foo]\nbar = 1\n").unwrap();
    let o = objn(&["gen-data", "--config", s(&f.path("bad.toml")), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo.bar"));
}

#[test]
fn missing_manifest_exits_3() {
    let f = Fixture::new();
    let missing = f.path("nowhere/manifest.jsonl");
    let o = objn(&["train", "--task", "detect", "--config", s(&f.config()), "--data", s(&missing), "--out", s(&f.path("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&missing)));
}

#[test]
fn train_detect_eval_round() {
    let f = Fixture::new();
    let (det, text) = f.train("detect", "det.ckpt", &["--held-out", "8,9"]);
    for c in [8, 9] {
        assert!(text.contains(&format!("train class {c}: ")), "{text}");
        let line = text.lines().find(|l| l.starts_with(&format!("train class {c}: "))).unwrap();
        assert!(line.ends_with(" 0 boxes used"), "{line}");
    }
    assert!(det.with_extension("log.csv").exists());

    let (cls, _) = f.train("classify", "cls.ckpt", &[]);
    let (_, text) = f.train("detect", "det2.ckpt", &["--init", s(&cls)]);
    assert!(text.contains("head swap from"), "{text}");

    let records = load_manifest(&f.data()).unwrap();
    let val = class_tallies(&records, Some(Split::Val));
    let report = f.path("report.csv");
    let out = ok(objn(&["eval", "--model", s(&det), "--data", s(&f.data()), "--classes", "8,9", "--out", s(&report)]));
    let want: usize = [8, 9].iter().filter_map(|c| val.get(c)).map(|t| t.1).sum();
    assert!(out.contains(&format!("ground truth {want}")), "{out}");
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("row,threshold,precision,recall,tp,fp,auc,total_gt"));
    assert!(csv.lines().last().unwrap().ends_with(&format!(",{want}")));

    let out = ok(objn(&["eval", "--model", s(&det), "--data", s(&f.data()), "--out", s(&report)]));
    let all: usize = val.values().map(|t| t.1).sum();
    assert!(out.contains(&format!("ground truth {all}")), "{out}");

    let o = objn(&["eval", "--model", s(&cls), "--data", s(&f.data()), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(4));

    let image = records[0].image_path.clone();
    let out = ok(objn(&["detect", "--model", s(&det), "--image", s(&image), "--max-det", "1"]));
    assert!(out.lines().count() <= 1);
    for line in out.lines() {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 5);
        assert!(fields.iter().all(|v| v.split('.').nth(1).map(str::len) == Some(6)));
    }
    let o = objn(&["detect", "--model", s(&cls), "--image", s(&image)]);
    assert_eq!(o.status.code(), Some(4));
    let o = objn(&["detect", "--model", s(&det), "--image", s(&f.config())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn experiment_outputs_and_overwrite_guard() {
    let f = Fixture::new();
    let out = f.path("exp");
    ok(objn(&["experiment", "--protocol", "heldout", "--config", s(&f.config()), "--out", s(&out)]));
    for cell in ["pretrained_withheld", "random_withheld", "pretrained_allboxes", "random_allboxes"] {
        assert!(out.join(format!("{cell}.ckpt")).exists());
        assert!(out.join(format!("pr_{cell}.csv")).exists());
    }
    assert!(out.join("summary.csv").exists());
    let o = objn(&["experiment", "--protocol", "heldout", "--config", s(&f.config()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));

    std::fs::write(f.path("five.toml"), TINY.replace("experiment.seeds = [0]", "experiment.seeds = [0, 1, 2, 3, 4]")).unwrap();
    let t = f.path("transfer");
    ok(objn(&["experiment", "--protocol", "transfer", "--config", s(&f.path("five.toml")), "--out", s(&t)]));
    let logs: Vec<String> = std::fs::read_dir(t.join("logs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("classify_"))
        .collect();
    assert_eq!(logs.len(), 10);
    let summary = std::fs::read_to_string(t.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5 + 1);
}
