use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edos_cli::fresh_mlm;
use edos_core::checkpoint::Checkpoint;
use edos_core::config::{ExperimentConfig, PretrainConfig};
use edos_core::data::{load_dataset, LoadOptions};
use tempfile::TempDir;

const TINY: &str = "\
[encoder]
n_layers = 1
n_heads = 2
d_model = 8
d_ff = 16
max_len = 16

[head]
branch_hidden = [8]
trunk_hidden = [8]

[train]
epochs = 2
max_len = 16

[train.optimizer]
learning_rate = 0.001
";

const TINY_PRETRAIN: &str = "\
[encoder]
n_layers = 1
n_heads = 2
d_model = 8
d_ff = 16
max_len = 16

[dapt]
epochs = 1
max_len = 16
";

fn edos(args: &[&str]) -> Output {
    edos_env(args, None)
}

fn edos_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edos"));
    c.args(args).env_remove("EDOS_SEED");
    if let Some(s) = seed {
        c.env("EDOS_SEED", s);
    }
    c.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = edos(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let o = edos(args);
    assert!(!o.status.success(), "{args:?} should fail");
    String::from_utf8(o.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn data(&self, total: usize) -> PathBuf {
        let d = self.path("data");
        ok(&[
            "gen-data",
            "--out",
            p(&d),
            "--total",
            &total.to_string(),
            "--unlabeled",
            "40",
        ]);
        d
    }

    fn train(&self, data: &Path, experiment: u8, task: &str, out: &str) -> PathBuf {
        let cfg = self.write("tiny.toml", TINY);
        let ck = self.path(out);
        ok(&[
            "train",
            "--data",
            p(data),
            "--experiment",
            &experiment.to_string(),
            "--task",
            task,
            "--config",
            p(&cfg),
            "--out",
            p(&ck),
        ]);
        ck
    }
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_data_reference_split() {
    let w = Work::new();
    let a = w.path("a");
    let out = ok(&["gen-data", "--out", p(&a), "--total", "20000"]);
    assert!(out.contains("14000 train, 2000 dev, 4000 test"), "{out}");
    assert_eq!(rows(&a.join("train.csv")), 14000);
    assert_eq!(rows(&a.join("dev.csv")), 2000);
    assert_eq!(rows(&a.join("test.csv")), 4000);
    let b = w.path("b");
    ok(&["gen-data", "--out", p(&b), "--total", "20000"]);
    for f in ["train.csv", "dev.csv", "test.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_data_rejects_fewer_examples_than_classes() {
    let w = Work::new();
    let err = fails(&["gen-data", "--out", p(&w.path("d")), "--total", "5"]);
    assert!(err.contains("total_count 5"), "{err}");
    fails(&[
        "gen-data",
        "--out",
        p(&w.path("d")),
        "--pattern-strength",
        "1.5",
    ]);
}

#[test]
fn seed_comes_from_environment_unless_given() {
    let w = Work::new();
    let gen = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let d = w.path(name);
        let mut args = vec!["gen-data", "--out", p(&d), "--total", "100"];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        let o = edos_env(&args, env);
        assert!(o.status.success());
        fs::read(d.join("train.csv")).unwrap()
    };
    let env5 = gen("e5", None, Some("5"));
    assert_eq!(env5, gen("f5", Some("5"), None));
    assert_ne!(env5, gen("none", None, None));
    assert_eq!(gen("f6", Some("6"), Some("5")), gen("g6", Some("6"), None));
}

#[test]
fn score_matrix_prints_four_decimals() {
    let w = Work::new();
    let id = w.write("id.csv", "5,0,0\n0,3,0\n0,0,9\n");
    assert!(ok(&["score-matrix", "--matrix", p(&id)]).starts_with("macro F1: 1.0000\n"));
    let a = w.write("a.csv", "2909,121\n346,624\n");
    let out = ok(&["score-matrix", "--matrix", p(&a), "--task", "A"]);
    assert!(out.starts_with("macro F1: 0.8267\n"), "{out}");
    assert!(
        out.contains("0.3567  346/970  sexist -> not sexist"),
        "{out}"
    );
    let bad = w.write("bad.csv", "1,2,3\n4,5,6\n");
    fails(&["score-matrix", "--matrix", p(&bad)]);
    fails(&["score-matrix", "--matrix", p(&a), "--task", "B"]);
}

#[test]
fn show_config_round_trips() {
    let text = ok(&["show-config", "--experiment", "6"]);
    let c = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(c.experiment, 6);
    assert_eq!(c.train.epochs, 20);
    assert_eq!(c.train.optimizer.learning_rate, 1e-5);
    let p: PretrainConfig = toml_parse(&ok(&["show-config", "--pretrain"]));
    assert_eq!(p, PretrainConfig::default());
    fails(&["show-config", "--experiment", "9"]);
}

fn toml_parse(text: &str) -> PretrainConfig {
    let w = Work::new();
    PretrainConfig::load(w.write("p.toml", text)).unwrap()
}

#[test]
fn train_rejects_invalid_experiment_task_pairs() {
    let w = Work::new();
    let d = w.data(60);
    let out = p(&w.path("m.ckpt")).to_string();
    let err = fails(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "7",
        "--task",
        "A",
        "--out",
        &out,
    ]);
    assert!(err.contains("joint learning for Task B"), "{err}");
    let err = fails(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "6",
        "--task",
        "A",
        "--out",
        &out,
    ]);
    assert!(err.contains("--init"), "{err}");
    fails(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "9",
        "--task",
        "A",
        "--out",
        &out,
    ]);
    fails(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "1",
        "--task",
        "D",
        "--out",
        &out,
    ]);
    assert!(!w.path("m.ckpt").exists());
}

#[test]
fn pretrain_writes_log_and_untouched_init_at_zero_epochs() {
    let w = Work::new();
    let d = w.data(40);
    let cfg = w.write("p.toml", TINY_PRETRAIN);
    let ck = w.path("p.ckpt");
    let corpus = d.join("corpus.txt");
    let out = ok(&[
        "pretrain",
        "--corpus",
        p(&corpus),
        "--config",
        p(&cfg),
        "--out",
        p(&ck),
        "--epochs",
        "0",
        "--seed",
        "3",
    ]);
    assert_eq!(out, "epoch,train_loss,eval_loss,perplexity\n");
    let saved = Checkpoint::<f32>::load(&ck).unwrap();
    let mut pc = PretrainConfig::load(&cfg).unwrap();
    pc.seed = 3;
    let (_, fresh) = fresh_mlm(&pc, saved.vocab.len()).unwrap();
    assert!(saved.store.bit_eq(&fresh));

    ok(&[
        "pretrain",
        "--corpus",
        p(&corpus),
        "--config",
        p(&cfg),
        "--out",
        p(&ck),
    ]);
    let log = fs::read_to_string(w.path("p.ckpt.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,eval_loss,perplexity");
    assert_eq!(lines.len(), 2);
    let cols: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cols[3] - cols[2].exp()).abs() < 1e-9 * cols[3]);

    let empty = w.write("empty.txt", "\n\n");
    fails(&[
        "pretrain",
        "--corpus",
        p(&empty),
        "--out",
        p(&w.path("e.ckpt")),
    ]);
}

#[test]
fn training_is_deterministic_and_models_evaluate() {
    let w = Work::new();
    let d = w.data(120);
    let a1 = w.train(&d, 1, "A", "a1.ckpt");
    let a2 = w.train(&d, 1, "A", "a2.ckpt");
    assert_eq!(fs::read(&a1).unwrap(), fs::read(&a2).unwrap());
    let log = fs::read_to_string(w.path("a1.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,dev_macro_f1"));
    assert_eq!(log.lines().count(), 3);

    let report = w.path("a.txt");
    let out = ok(&[
        "eval",
        "--data",
        p(&d),
        "--task",
        "A",
        "--model",
        p(&a1),
        "--report",
        p(&report),
    ]);
    assert!(out.starts_with("macro F1: "));
    assert_eq!(fs::read_to_string(&report).unwrap(), out);
    let csv = fs::read_to_string(w.path("a.txt.csv")).unwrap();
    assert!(csv.starts_with("section,actual,predicted,value\nmacro_f1,"));
    let err = fails(&["eval", "--data", p(&d), "--task", "B", "--model", p(&a1)]);
    assert!(err.contains("Task A"), "{err}");

    let preds = w.path("preds.csv");
    ok(&[
        "predict",
        "--in",
        p(&d.join("test.csv")),
        "--model",
        p(&a1),
        "--out",
        p(&preds),
        "--probs",
    ]);
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().next(), Some("id,task,label,p0,p1"));
    assert_eq!(text.lines().count(), rows(&d.join("test.csv")) + 1);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], "A");
        assert!(f[2] == "sexist" || f[2] == "not sexist");
        let s: f64 = f[3].parse::<f64>().unwrap() + f[4].parse::<f64>().unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn category_tasks_score_gold_sexist_rows_only() {
    let w = Work::new();
    let d = w.data(200);
    let b = w.train(&d, 1, "B", "b.ckpt");
    let out = ok(&[
        "eval",
        "--data",
        p(&d.join("test.csv")),
        "--task",
        "B",
        "--model",
        p(&b),
    ]);
    let test = load_dataset(d.join("test.csv"), LoadOptions::default()).unwrap();
    let sexist = test.iter().filter(|e| e.sexist).count();
    let support: usize = out
        .lines()
        .skip_while(|l| !l.starts_with("class "))
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| {
            l.split_whitespace()
                .last()
                .unwrap()
                .parse::<usize>()
                .unwrap()
        })
        .sum();
    assert_eq!(support, sexist);
    assert!(sexist < test.len());

    let joint = w.train(&d, 7, "B", "j.ckpt");
    let preds = w.path("j.csv");
    ok(&[
        "predict",
        "--in",
        p(&d.join("dev.csv")),
        "--model",
        p(&joint),
        "--out",
        p(&preds),
        "--probs",
    ]);
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().next(), Some("id,task,label,p0,p1,p2,p3,p4"));
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(1) == Some("B_joint")));
    assert!(text.lines().skip(1).all(|l| !l.contains("not sexist")));
    ok(&["eval", "--data", p(&d), "--task", "B", "--model", p(&joint)]);
}

#[test]
fn hierarchical_prediction_gates_on_task_a() {
    let w = Work::new();
    let d = w.data(200);
    let a = w.train(&d, 1, "A", "a.ckpt");
    let b = w.train(&d, 2, "B", "b.ckpt");
    let c = w.train(&d, 1, "C", "c.ckpt");
    let out = w.path("h.csv");
    ok(&[
        "predict-hierarchical",
        "--in",
        p(&d.join("dev.csv")),
        "--model-a",
        p(&a),
        "--model-b",
        p(&b),
        "--model-c",
        p(&c),
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["id", "label_sexist", "label_category", "label_vector"]
    );
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let gated = rec[1] == *"not sexist";
        assert_eq!(gated, &rec[2] == "none");
        assert_eq!(gated, &rec[3] == "none");
        n += 1;
    }
    assert_eq!(n, rows(&d.join("dev.csv")));
    fails(&[
        "predict-hierarchical",
        "--in",
        p(&d.join("dev.csv")),
        "--model-a",
        p(&b),
        "--model-b",
        p(&b),
        "--model-c",
        p(&c),
        "--out",
        p(&out),
    ]);
}

#[test]
fn pretrained_encoder_starts_experiment_six() {
    let w = Work::new();
    let d = w.data(120);
    let cfg = w.write("p.toml", TINY_PRETRAIN);
    let corpus = d.join("corpus.txt");
    let abs = w.path("abs.ckpt");
    let dis = w.path("dis.ckpt");
    ok(&[
        "pretrain",
        "--corpus",
        p(&corpus),
        "--config",
        p(&cfg),
        "--out",
        p(&abs),
    ]);
    ok(&[
        "pretrain",
        "--corpus",
        p(&corpus),
        "--config",
        p(&cfg),
        "--out",
        p(&dis),
        "--attention",
        "disentangled",
    ]);
    let tiny = w.write("tiny.toml", TINY);
    let out = w.path("six.ckpt");
    ok(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "6",
        "--task",
        "A",
        "--config",
        p(&tiny),
        "--init",
        p(&abs),
        "--init",
        p(&dis),
        "--out",
        p(&out),
        "--epochs",
        "0",
    ]);
    let six = Checkpoint::<f32>::load(&out).unwrap();
    let pre = Checkpoint::<f32>::load(&dis).unwrap();
    assert_eq!(six.vocab, pre.vocab);
    let rel = six.store.get("enc_b.rel_emb").unwrap();
    assert!(rel.bit_eq(pre.store.get("enc.rel_emb").unwrap()));
    let err = fails(&[
        "train",
        "--data",
        p(&d),
        "--experiment",
        "6",
        "--task",
        "A",
        "--config",
        p(&tiny),
        "--init",
        p(&d.join("train.csv")),
        "--out",
        p(&out),
    ]);
    assert!(err.contains("train.csv"), "{err}");
}
