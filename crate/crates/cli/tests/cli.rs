use std::fs;
use std::path::{Path, PathBuf};

use dpt_cli::run_cli;
use dpt_core::io::{read_metrics, read_pnm};

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(
            root.join("fast.cfg"),
            "train.pretrain_epochs = 2\ntrain.epochs_few_shot = 2\ntrain.epochs_base_novel = 2\n",
        )
        .unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["dpt".to_string()];
        argv.extend(args.iter().map(|a| a.to_string()));
        run_cli(argv)
    }

    /// Small dataset plus a briefly pretrained backbone.
    fn prepared(&self) {
        let d = self.p("d");
        assert_eq!(
            self.run(&["gen-data", "--seed", "1", "--out", &d, "--train-per-class", "8", "--test-per-class", "4"]),
            0
        );
        let cfg = self.p("fast.cfg");
        let w = self.p("w.dptw");
        assert_eq!(self.run(&["pretrain", "--config", &cfg, "--data", &d, "--out", &w]), 0);
    }
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let w = Work::new();
    let (a, b, c) = (w.p("a"), w.p("b"), w.p("c"));
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let args = ["gen-data", "--seed", seed, "--out", out, "--train-per-class", "2", "--test-per-class", "1"];
        assert_eq!(w.run(&args), 0);
    }
    let ta = tree_bytes(Path::new(&a));
    assert_eq!(ta, tree_bytes(Path::new(&b)));
    assert_ne!(ta, tree_bytes(Path::new(&c)));
    assert!(ta.iter().any(|(p, _)| p == Path::new("manifest.json")));
}

#[test]
fn default_gen_data_has_200_train_and_200_test() {
    let w = Work::new();
    let d = w.p("d");
    assert_eq!(w.run(&["gen-data", "--out", &d]), 0);
    let ds = dpt_core::io::load_dataset(Path::new(&d)).unwrap();
    assert_eq!((ds.num_classes(), ds.train.len(), ds.test.len()), (4, 200, 200));
}

#[test]
fn train_then_eval_writes_accuracy_line() {
    let w = Work::new();
    w.prepared();
    let (cfg, d, wt, ctx, m) = (w.p("fast.cfg"), w.p("d"), w.p("w.dptw"), w.p("ctx.dptw"), w.p("m.jsonl"));
    let common = ["--config", &cfg, "--data", &d, "--weights", &wt];
    let mut train = vec!["train", "--k", "4", "--out", &ctx];
    train.extend(common);
    assert_eq!(w.run(&train), 0);
    let mut eval = vec!["eval", "--k", "4", "--context", &ctx, "--out", &m];
    eval.extend(common);
    assert_eq!(w.run(&eval), 0);
    let records = read_metrics(Path::new(&m)).unwrap();
    assert_eq!(records.len(), 1);
    let acc = records[0].accuracy.unwrap();
    assert!((0.0..=100.0).contains(&acc));
    let line = fs::read_to_string(&m).unwrap();
    assert!(line.contains("\"accuracy\":"));
}

#[test]
fn ablate_emits_sixteen_rows() {
    let w = Work::new();
    w.prepared();
    let (cfg, d, wt, m) = (w.p("fast.cfg"), w.p("d"), w.p("w.dptw"), w.p("ab.jsonl"));
    let args = ["ablate", "--config", &cfg, "--data", &d, "--weights", &wt, "--k", "1", "--seed", "1", "--out", &m];
    assert_eq!(w.run(&args), 0);
    let records = read_metrics(Path::new(&m)).unwrap();
    assert_eq!(records.len(), 16);
    let mut switches: Vec<_> = records.iter().map(|r| r.switches.clone()).collect();
    switches.sort();
    switches.dedup();
    assert_eq!(switches.len(), 16);
}

#[test]
fn base2novel_reports_harmonic_mean() {
    let w = Work::new();
    w.prepared();
    let (cfg, d, wt, m) = (w.p("fast.cfg"), w.p("d"), w.p("w.dptw"), w.p("b.jsonl"));
    let args = ["base2novel", "--config", &cfg, "--data", &d, "--weights", &wt, "--k", "2", "--seed", "3", "--out", &m];
    assert_eq!(w.run(&args), 0);
    let r = &read_metrics(Path::new(&m)).unwrap()[0];
    let (b, n) = (r.base_acc.unwrap(), r.novel_acc.unwrap());
    let hm = if b + n == 0.0 { 0.0 } else { 2.0 * b * n / (b + n) };
    assert!((r.hm.unwrap() - hm).abs() < 1e-12);
}

#[test]
fn saliency_writes_p5_with_maxval_255() {
    let w = Work::new();
    let d = w.p("d");
    assert_eq!(w.run(&["gen-data", "--out", &d, "--train-per-class", "1", "--test-per-class", "1"]), 0);
    let img = w.root.join("d/ring/test_0000.pgm");
    let out = w.p("heat.pgm");
    assert_eq!(w.run(&["saliency", "--image", img.to_str().unwrap(), "--class", "2", "--out", &out]), 0);
    let bytes = fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(read_pnm(Path::new(&out)).unwrap().height(), 32);
}

#[test]
fn usage_errors_exit_2() {
    let w = Work::new();
    assert_eq!(w.run(&["train", "--no-such-flag"]), 2);
    assert_eq!(w.run(&["frobnicate"]), 2);
    let missing = w.p("missing.cfg");
    assert_eq!(w.run(&["eval", "--config", &missing, "--data", "x", "--weights", "y"]), 2);
    let bad = w.root.join("bad.cfg");
    fs::write(&bad, "train.not_a_key = 1\n").unwrap();
    assert_eq!(w.run(&["eval", "--config", bad.to_str().unwrap(), "--data", "x", "--weights", "y"]), 2);
    assert_eq!(w.run(&["train", "--data", "x", "--weights", "y", "--switches", "zsp,bogus"]), 2);
}

#[test]
fn run_failures_exit_1() {
    let w = Work::new();
    let nowhere = w.p("nowhere");
    assert_eq!(w.run(&["eval", "--data", &nowhere, "--weights", "y"]), 1);
}
