//! Command-line pipelines over `edos-core`: synthetic data, pretraining,
//! fine-tuning, evaluation, prediction and matrix scoring.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use edos_core::checkpoint::{Checkpoint, ModelSpec};
use edos_core::config::{wiring, ExperimentConfig, PretrainConfig};
use edos_core::data::{
    clean_text, generate_unlabeled, load_corpus, load_dataset, save_corpus, save_dataset,
    shifted_split, CleaningOptions, LabeledExample, LoadOptions, SyntheticSpec, Task,
    DEFAULT_RATIOS,
};
use edos_core::encoder::AttentionKind;
use edos_core::finetune::{load_pretrained_encoder, train, Init, TrainTask};
use edos_core::inference::{hierarchical_predict, write_predictions, Classifier, Prediction};
use edos_core::metrics::{confusion, ConfusionMatrix, EvalReport};
use edos_core::pretrain::{dapt_run, MlmModel, ENC};
use edos_core::tokenizer::Vocabulary;
use edos_numcore::{rng, ParamStore};

pub const TRAIN_FILE: &str = "train.csv";
pub const DEV_FILE: &str = "dev.csv";
pub const TEST_FILE: &str = "test.csv";
pub const CORPUS_FILE: &str = "corpus.txt";

#[derive(Debug, Parser)]
#[command(
    name = "edos",
    version,
    about = "Hierarchical sexism detection with transformer encoders"
)]
pub struct Cli {
    /// Global seed; overrides the seed in any config file.
    #[arg(long, global = true, env = "EDOS_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/dev/test CSVs and an optional unlabeled corpus.
    GenData(GenDataArgs),
    /// Masked-language-model pretraining of one encoder on a corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune an experiment's model on one task.
    Train(TrainArgs),
    /// Score a model on a labeled CSV.
    Eval(EvalArgs),
    /// Write predictions for a CSV with `id,text` columns.
    Predict(PredictArgs),
    /// Gate Task B and C predictions on a Task A model.
    PredictHierarchical(HierarchicalArgs),
    /// Macro F1 and error report for a confusion matrix CSV.
    ScoreMatrix(ScoreMatrixArgs),
    /// Print the default configuration file.
    ShowConfig(ShowConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20000)]
    pub total: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pattern_strength: f64,
    /// Lines of unlabeled in-domain text written to `corpus.txt`.
    #[arg(long)]
    pub unlabeled: Option<usize>,
    /// Marker spellings. With more than one, train uses the first spelling,
    /// dev and test the others, and the corpus pairs them all.
    #[arg(long, default_value_t = 1)]
    pub variants: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_attention)]
    pub attention: Option<AttentionKind>,
    /// Log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with `train.csv` and `dev.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub experiment: Option<u8>,
    #[arg(long, value_parser = parse_task)]
    pub task: TrainTask,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained encoder checkpoint; repeat for both attention kinds.
    #[arg(long)]
    pub init: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Accept the official `rewire_id` column name.
    #[arg(long)]
    pub edos_columns: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled CSV, or a directory whose `test.csv` is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: TrainTask,
    #[arg(long)]
    pub model: PathBuf,
    /// Text report; a CSV twin is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub edos_columns: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Append one probability column per class.
    #[arg(long)]
    pub probs: bool,
}

#[derive(Debug, Args)]
pub struct HierarchicalArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long)]
    pub model_c: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreMatrixArgs {
    /// Square CSV of counts, rows actual and columns predicted.
    #[arg(long)]
    pub matrix: PathBuf,
    /// Name classes after this task's labels.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TrainTask>,
}

#[derive(Debug, Args)]
pub struct ShowConfigArgs {
    /// Print the pretraining config instead.
    #[arg(long)]
    pub pretrain: bool,
    #[arg(long)]
    pub experiment: Option<u8>,
}

fn parse_task(s: &str) -> std::result::Result<TrainTask, String> {
    s.parse()
}

fn parse_attention(s: &str) -> std::result::Result<AttentionKind, String> {
    match s {
        "absolute" => Ok(AttentionKind::Absolute),
        "disentangled" => Ok(AttentionKind::Disentangled),
        other => Err(format!(
            "unknown attention `{other}`; use absolute or disentangled"
        )),
    }
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&a, seed.unwrap_or(0), out),
        Command::Pretrain(a) => pretrain(&a, seed, out),
        Command::Train(a) => train_cmd(&a, seed, out),
        Command::Eval(a) => eval(&a, out),
        Command::Predict(a) => predict(&a),
        Command::PredictHierarchical(a) => predict_hierarchical(&a),
        Command::ScoreMatrix(a) => score_matrix(&a, out),
        Command::ShowConfig(a) => show_config(&a, out),
    }
}

fn with_ext(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn clean_all(texts: &mut [LabeledExample], opts: &CleaningOptions) {
    if opts.any() {
        for e in texts {
            e.text = clean_text(&e.text, opts);
        }
    }
}

pub fn gen_data(a: &GenDataArgs, seed: u64, out: &mut dyn std::io::Write) -> Result<()> {
    ensure!(a.variants >= 1, "--variants must be at least 1");
    let base = SyntheticSpec {
        total_count: a.total,
        pattern_strength: a.pattern_strength,
        rng_seed: seed,
        ..SyntheticSpec::default()
    };
    let split = shifted_split(&base, a.variants, DEFAULT_RATIOS)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_dataset(a.out.join(TRAIN_FILE), &split.train)?;
    save_dataset(a.out.join(DEV_FILE), &split.dev)?;
    save_dataset(a.out.join(TEST_FILE), &split.test)?;
    writeln!(
        out,
        "wrote {} train, {} dev, {} test rows to {}",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        a.out.display()
    )?;
    if let Some(lines) = a.unlabeled {
        let spec = SyntheticSpec {
            marker_variants: (0, a.variants),
            ..base
        };
        let corpus = generate_unlabeled(&spec, lines)?;
        save_corpus(a.out.join(CORPUS_FILE), &corpus)?;
        writeln!(out, "wrote {lines} unlabeled lines")?;
    }
    Ok(())
}

pub fn pretrain(a: &PretrainArgs, seed: Option<u64>, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.dapt.seed = cfg.seed;
    if let Some(e) = a.epochs {
        cfg.dapt.epochs = e;
    }
    if let Some(k) = a.attention {
        cfg.attention = k;
    }
    let mut corpus = load_corpus(&a.corpus)?;
    if cfg.cleaning.any() {
        for l in &mut corpus {
            *l = clean_text(l, &cfg.cleaning);
        }
        corpus.retain(|l| !l.trim().is_empty());
    }
    ensure!(!corpus.is_empty(), "corpus {} is empty", a.corpus.display());
    let vocab = Vocabulary::build(&corpus, cfg.vocab.min_freq, cfg.vocab.max_size)?;
    let (model, init) = fresh_mlm(&cfg, vocab.len())?;
    let enc = model.encoder.cfg.clone();
    info!(
        "pretraining {} parameters on {} lines",
        init.num_elements(),
        corpus.len()
    );

    let mut log = String::from("epoch,train_loss,eval_loss,perplexity\n");
    writeln!(out, "epoch,train_loss,eval_loss,perplexity")?;
    let result = dapt_run(&corpus, &vocab, &model, init, &cfg.dapt, |e| {
        let line = format!(
            "{},{},{},{}",
            e.epoch, e.train_loss, e.eval_loss, e.perplexity
        );
        log.push_str(&line);
        log.push('\n');
        let _ = writeln!(out, "{line}");
    })?;
    fs::write(
        a.log
            .clone()
            .unwrap_or_else(|| with_ext(&a.out, ".log.csv")),
        log,
    )?;
    Checkpoint {
        model: ModelSpec::Mlm {
            encoder: enc,
            max_len: cfg.dapt.max_len,
        },
        vocab,
        config: serde_json::to_value(&cfg)?,
        store: result.store,
    }
    .save(&a.out)?;
    Ok(())
}

/// The untrained model and parameters `pretrain` starts from.
pub fn fresh_mlm(cfg: &PretrainConfig, vocab_size: usize) -> Result<(MlmModel, ParamStore<f32>)> {
    let model = MlmModel::new(cfg.encoder.build(cfg.attention, vocab_size))?;
    let store = model.init(&mut rng::stream(cfg.seed, rng::stream_id("init")))?;
    Ok((model, store))
}

fn load_split(dir: &Path, file: &str, opts: LoadOptions) -> Result<Vec<LabeledExample>> {
    let p = dir.join(file);
    load_dataset(&p, opts).with_context(|| format!("loading {}", p.display()))
}

pub fn train_cmd(a: &TrainArgs, seed: Option<u64>, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = a.experiment {
        cfg.experiment = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let task = cfg.resolve_task(a.task)?;
    cfg.train.task = task;
    let needs_init = cfg.init_mode()? == Init::FromDaptCheckpoint;
    if needs_init && a.init.is_empty() {
        bail!(
            "experiment {} starts from a pretrained encoder; pass --init <checkpoint>",
            cfg.experiment
        );
    }

    let opts = LoadOptions {
        edos_columns: a.edos_columns,
    };
    let mut train_set = load_split(&a.data, TRAIN_FILE, opts)?;
    let mut dev_set = load_split(&a.data, DEV_FILE, opts)?;
    clean_all(&mut train_set, &cfg.cleaning);
    clean_all(&mut dev_set, &cfg.cleaning);

    let pretrained: Vec<Checkpoint<f32>> = a
        .init
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;
    let vocab = match pretrained.first() {
        Some(first) => {
            ensure!(
                pretrained.iter().all(|c| c.vocab == first.vocab),
                "pretrained checkpoints use different vocabularies"
            );
            first.vocab.clone()
        }
        None => {
            let texts: Vec<&str> = train_set.iter().map(|e| e.text.as_str()).collect();
            Vocabulary::build(&texts, cfg.vocab.min_freq, cfg.vocab.max_size)?
        }
    };
    let bundle = cfg.bundle(task, vocab.len())?;
    let mut store = bundle.init::<f32>(&mut rng::stream(cfg.seed, rng::stream_id("init")))?;
    for (ck, path) in pretrained.iter().zip(&a.init) {
        let ModelSpec::Mlm { encoder, .. } = &ck.model else {
            bail!("{} is not a pretraining checkpoint", path.display());
        };
        let slots =
            load_pretrained_encoder(&bundle, &mut store, encoder.attention, &ck.store, ENC)?;
        if slots.is_empty() {
            warn!(
                "experiment {} has no {:?} encoder; {} unused",
                cfg.experiment,
                encoder.attention,
                path.display()
            );
        }
    }
    if needs_init {
        let kinds = wiring(cfg.experiment)?.encoders;
        for k in kinds {
            if !pretrained.iter().any(
                |c| matches!(&c.model, ModelSpec::Mlm { encoder, .. } if encoder.attention == k),
            ) {
                warn!(
                    "no pretrained {k:?} encoder supplied; that encoder starts from random weights"
                );
            }
        }
    }

    writeln!(out, "epoch,train_loss,dev_macro_f1")?;
    let result = train(
        &bundle,
        store,
        &vocab,
        &train_set,
        &dev_set,
        &cfg.train,
        |r| {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.dev_macro_f1);
        },
    )?;
    result.log.write(
        a.log
            .clone()
            .unwrap_or_else(|| with_ext(&a.out, ".log.csv")),
    )?;
    if let Some(f1) = result.log.best_dev_macro_f1() {
        writeln!(out, "best dev macro F1 {f1:.4}")?;
    }
    Checkpoint {
        model: ModelSpec::Classifier {
            bundle,
            task,
            max_len: cfg.train.max_len,
            experiment: Some(cfg.experiment),
        },
        vocab,
        config: serde_json::to_value(&cfg)?,
        store: result.best,
    }
    .save(&a.out)?;
    Ok(())
}

/// A fine-tuned classifier and the cleaning applied to its inputs.
pub struct LoadedModel {
    pub classifier: Classifier<f32>,
    pub cleaning: CleaningOptions,
}

pub fn load_classifier(path: &Path) -> Result<LoadedModel> {
    let ck =
        Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let ModelSpec::Classifier {
        bundle,
        task,
        max_len,
        ..
    } = ck.model
    else {
        bail!(
            "{} is a pretraining checkpoint, not a classifier",
            path.display()
        );
    };
    let cleaning = serde_json::from_value::<ExperimentConfig>(ck.config)
        .map(|c| c.cleaning)
        .unwrap_or_default();
    Ok(LoadedModel {
        classifier: Classifier {
            bundle,
            store: ck.store,
            vocab: ck.vocab,
            task,
            max_len,
        },
        cleaning,
    })
}

pub fn eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let m = load_classifier(&a.model)?;
    let task = m.classifier.task;
    if task.eval_task() != a.task.eval_task() {
        bail!(
            "model predicts Task {} labels but --task is {}",
            task.eval_task(),
            a.task.eval_task()
        );
    }
    let path = if a.data.is_dir() {
        a.data.join(TEST_FILE)
    } else {
        a.data.clone()
    };
    let mut data = load_dataset(
        &path,
        LoadOptions {
            edos_columns: a.edos_columns,
        },
    )
    .with_context(|| format!("loading {}", path.display()))?;
    // Tasks B and C are scored on gold-sexist rows only.
    data.retain(|e| task.eval_label_of(e).is_some());
    ensure!(
        !data.is_empty(),
        "no rows to score for Task {}",
        a.task.eval_task()
    );
    clean_all(&mut data, &m.cleaning);
    let preds = m.classifier.predict(&data)?;
    let golds: Vec<usize> = data
        .iter()
        .map(|e| task.eval_label_of(e).expect("retained"))
        .collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let k = task.eval_task().num_classes();
    let names = task
        .eval_task()
        .labels()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let report = EvalReport::new(confusion(&golds, &labels, k)?, names);
    let text = report.to_text();
    write!(out, "{text}")?;
    if let Some(p) = &a.report {
        fs::write(p, &text)?;
        fs::write(with_ext(p, ".csv"), report.to_csv()?)?;
    }
    Ok(())
}

/// Rows of a CSV with at least `id` and `text` columns.
pub fn read_texts(path: &Path) -> Result<Vec<LabeledExample>> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name || (name == "id" && h.trim() == "rewire_id"))
            .ok_or_else(|| anyhow!("{} has no `{name}` column", path.display()))
    };
    let (id, text) = (col("id")?, col("text")?);
    let mut out = Vec::new();
    for r in rdr.records() {
        let r = r?;
        out.push(LabeledExample {
            id: r.get(id).unwrap_or("").to_string(),
            text: r.get(text).unwrap_or("").to_string(),
            sexist: false,
            category: None,
            vector: None,
        });
    }
    Ok(out)
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let m = load_classifier(&a.model)?;
    let mut rows = read_texts(&a.input)?;
    clean_all(&mut rows, &m.cleaning);
    let preds: Vec<Prediction> = m.classifier.predict(&rows)?;
    write_predictions(fs::File::create(&a.out)?, &preds, a.probs)?;
    Ok(())
}

pub fn predict_hierarchical(a: &HierarchicalArgs) -> Result<()> {
    let ma = load_classifier(&a.model_a)?;
    let mb = load_classifier(&a.model_b)?;
    let mc = load_classifier(&a.model_c)?;
    ensure!(
        ma.cleaning == mb.cleaning && mb.cleaning == mc.cleaning,
        "the three models were trained with different text cleaning"
    );
    let mut rows = read_texts(&a.input)?;
    clean_all(&mut rows, &ma.cleaning);
    let preds = hierarchical_predict(&ma.classifier, &mb.classifier, &mc.classifier, &rows)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["id", "label_sexist", "label_category", "label_vector"])?;
    let name = |t: Task, i: Option<usize>| i.map_or("none", |i| t.labels()[i]);
    for p in preds {
        w.write_record([
            p.id.as_str(),
            Task::A.labels()[usize::from(p.sexist)],
            name(Task::B, p.category),
            name(Task::C, p.vector),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn score_matrix(a: &ScoreMatrixArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let text =
        fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let cm = ConfusionMatrix::from_csv(&text)?;
    let names = match a.task {
        Some(t) => {
            let names = t.eval_task().labels();
            ensure!(
                names.len() == cm.k(),
                "Task {} has {} classes but the matrix is {}x{}",
                t.eval_task(),
                names.len(),
                cm.k(),
                cm.k()
            );
            names.iter().map(|s| s.to_string()).collect()
        }
        None => (0..cm.k()).map(|i| format!("class {i}")).collect(),
    };
    write!(out, "{}", EvalReport::new(cm, names).to_text())?;
    Ok(())
}

pub fn show_config(a: &ShowConfigArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let text = if a.pretrain {
        PretrainConfig::default_toml()
    } else {
        let mut c = ExperimentConfig::default();
        if let Some(e) = a.experiment {
            wiring(e)?;
            c.experiment = e;
        }
        c.to_toml()?
    };
    write!(out, "{text}")?;
    Ok(())
}
