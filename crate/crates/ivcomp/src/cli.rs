//! Command-line pipeline: generate synthetic corpora, train compensators,
//! transform corpora, score trials, evaluate EER grids, and export
//! embeddings for external plotting.
//!
//! Every option resolves as flag, then config-file value, then built-in
//! default. The config file is flat `key = value` text, named either by
//! `--config` or by the `IVCOMP_CONFIG` environment variable. All commands
//! are deterministic: fixed seeds and inputs give bit-identical outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{
    generate_synthetic, read_corpus, read_trials, write_corpus, write_trials, Distortion,
    LabeledCorpus, SynthConfig, Trial, TrialLabel, TrialList, Utterance,
};
use crate::error::{Error, Result};
use crate::eval::{
    compute_eer, distance_stats, enroll, score_trials, test_map, write_report, write_scores,
    EvalReport, ScoreMethod, ScoredTrials,
};
use crate::{dda, lda, plda, textio};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "IVCOMP_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "ivcomp", version, about = "i-vector compensation back-ends: LDA, PLDA, and DDA")]
pub struct Cli {
    /// Config file with `key = value` lines; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a held-out enroll/test split.
    Gen(GenArgs),
    /// Train a compensation or scoring model on a corpus.
    Train(TrainArgs),
    /// Apply a trained lda/dda model to a corpus.
    Transform(TransformArgs),
    /// Score a trial list against enrollment and test corpora.
    Score(ScoreArgs),
    /// Run the full pipeline and report EER (single cell, grid, or dim sweep).
    Eval(EvalArgs),
    /// Dump compensated embeddings plus distance statistics.
    #[command(name = "export-embeddings")]
    ExportEmbeddings(ExportArgs),
}

/// Compensation applied before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    None,
    Lda,
    Dda,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Lda => "lda",
            Method::Dda => "dda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "lda" => Ok(Method::Lda),
            "dda" => Ok(Method::Dda),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected none, lda, or dda)"
            ))),
        }
    }
}

/// Trial scoring back-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scorer {
    Cos,
    Euc,
    Plda,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Cos => "cos",
            Scorer::Euc => "euc",
            Scorer::Plda => "plda",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(Scorer::Cos),
            "euc" => Ok(Scorer::Euc),
            "plda" => Ok(Scorer::Plda),
            other => Err(Error::Config(format!(
                "unknown scorer {other:?} (expected cos, euc, or plda)"
            ))),
        }
    }
}

/// What `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Lda,
    Plda,
    Dda,
}

impl TrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Lda => "lda",
            TrainMethod::Plda => "plda",
            TrainMethod::Dda => "dda",
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lda" => Ok(TrainMethod::Lda),
            "plda" => Ok(TrainMethod::Plda),
            "dda" => Ok(TrainMethod::Dda),
            other => Err(Error::Config(format!(
                "unknown training method {other:?} (expected lda, plda, or dda)"
            ))),
        }
    }
}

/// DDA learning-rate schedule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Constant,
    Step,
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "step" => Ok(Schedule::Step),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?} (expected constant or step)"
            ))),
        }
    }
}

impl Schedule {
    fn to_lr_schedule(self) -> dda::LrSchedule {
        match self {
            Schedule::Constant => dda::LrSchedule::Constant,
            Schedule::Step => dda::LrSchedule::StepDecay,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "speakers",
    "eval_speakers",
    "utts",
    "enroll_utts",
    "test_utts",
    "dim",
    "speaker_std",
    "channel_std",
    "residual_std",
    "distortion",
    "distortion_strength",
    "channels",
    "seed",
    "out_dir",
    "method",
    "corpus",
    "model",
    "log",
    "ridge",
    "iters",
    "hidden",
    "lambda",
    "lr",
    "center_lr",
    "batch_size",
    "epochs",
    "train_seed",
    "schedule",
    "out",
    "scorer",
    "enroll",
    "test",
    "trials",
    "plda_model",
    "jobs",
    "train_corpus",
    "dims",
    "grid",
    "stats",
];

/// Parsed config file: raw strings, interpreted per key on use.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    /// Load from `explicit`, else from `$IVCOMP_CONFIG`, else empty.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
        };
        let Some(path) = path else {
            return Ok(Self::default());
        };
        Self::parse(&std::fs::read_to_string(&path)?)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => cfg.get::<T>(key)?.unwrap_or(default),
    })
}

fn resolve_opt<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => cfg.get::<T>(key)?,
    })
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required {what}")))
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of training speakers [default: 10].
    #[arg(long)]
    speakers: Option<usize>,
    /// Number of held-out evaluation speakers [default: 10].
    #[arg(long)]
    eval_speakers: Option<usize>,
    /// Utterances per training speaker [default: 8].
    #[arg(long)]
    utts: Option<usize>,
    /// Enrollment utterances per evaluation speaker [default: 5].
    #[arg(long)]
    enroll_utts: Option<usize>,
    /// Test utterances per evaluation speaker [default: 15].
    #[arg(long)]
    test_utts: Option<usize>,
    /// Embedding dimension [default: 60].
    #[arg(long)]
    dim: Option<usize>,
    /// Speaker-mean standard deviation [default: 1].
    #[arg(long)]
    speaker_std: Option<f64>,
    /// Channel-offset standard deviation [default: 0.5].
    #[arg(long)]
    channel_std: Option<f64>,
    /// Residual-noise standard deviation [default: 0.5].
    #[arg(long)]
    residual_std: Option<f64>,
    /// Distortion: none, rotation_per_channel, or tanh_warp [default: none].
    #[arg(long)]
    distortion: Option<String>,
    /// Distortion strength [default: 1].
    #[arg(long)]
    distortion_strength: Option<f64>,
    /// Number of channel labels [default: 4].
    #[arg(long)]
    channels: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving train.txt, enroll.txt, test.txt, trials.txt [default: .].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_gen(args: &GenArgs, cfg: &FileConfig) -> Result<()> {
    let speakers = resolve(args.speakers, cfg, "speakers", 10)?;
    let eval_speakers = resolve(args.eval_speakers, cfg, "eval_speakers", 10)?;
    let utts = resolve(args.utts, cfg, "utts", 8)?;
    let enroll_utts = resolve(args.enroll_utts, cfg, "enroll_utts", 5)?;
    let test_utts = resolve(args.test_utts, cfg, "test_utts", 15)?;
    let distortion =
        Distortion::parse(&resolve(args.distortion.clone(), cfg, "distortion", "none".into())?)?;
    let out_dir = resolve(args.out_dir.clone(), cfg, "out_dir", PathBuf::from("."))?;
    if speakers < 2 || eval_speakers < 2 {
        return Err(Error::Config(
            "need at least 2 training and 2 evaluation speakers".into(),
        ));
    }
    if enroll_utts < 1 || test_utts < 1 {
        return Err(Error::Config(
            "enroll_utts and test_utts must be at least 1".into(),
        ));
    }

    let synth = SynthConfig {
        dim: resolve(args.dim, cfg, "dim", 60)?,
        n_speakers: speakers + eval_speakers,
        utts_per_speaker: utts.max(enroll_utts + test_utts),
        speaker_std: resolve(args.speaker_std, cfg, "speaker_std", 1.0)?,
        channel_std: resolve(args.channel_std, cfg, "channel_std", 0.5)?,
        residual_std: resolve(args.residual_std, cfg, "residual_std", 0.5)?,
        distortion,
        distortion_strength: resolve(args.distortion_strength, cfg, "distortion_strength", 1.0)?,
        n_channels: resolve(args.channels, cfg, "channels", 4)?,
        seed: resolve(args.seed, cfg, "seed", 0)?,
    };
    let corpus = generate_synthetic(&synth)?.length_normalized()?;

    let by_speaker = corpus.speakers();
    let ids: Vec<String> = by_speaker.keys().map(|s| s.to_string()).collect();
    let (train_ids, eval_ids) = ids.split_at(speakers);
    let take = |ids: &[String], skip: usize, count: usize| -> Vec<Utterance> {
        let mut out = Vec::new();
        for id in ids {
            for &i in by_speaker[id.as_str()].iter().skip(skip).take(count) {
                out.push(corpus.items()[i].clone());
            }
        }
        out
    };
    let train = LabeledCorpus::new(take(train_ids, 0, utts))?;
    let enroll_c = LabeledCorpus::new(take(eval_ids, 0, enroll_utts))?;
    let test_c = LabeledCorpus::new(take(eval_ids, enroll_utts, test_utts))?;

    let mut trials = Vec::new();
    for model in eval_ids {
        for item in test_c.items() {
            trials.push(Trial {
                model_id: model.clone(),
                test_utterance_id: item.utterance_id.clone(),
                label: if item.speaker_id == *model {
                    TrialLabel::Target
                } else {
                    TrialLabel::Nontarget
                },
            });
        }
    }

    std::fs::create_dir_all(&out_dir)?;
    let announce = |name: &str, c: &LabeledCorpus| -> Result<PathBuf> {
        let path = out_dir.join(name);
        write_corpus(c, &path)?;
        println!(
            "wrote {} ({} speakers, {} utterances, dim {})",
            path.display(),
            c.n_speakers(),
            c.len(),
            c.dim()
        );
        Ok(path)
    };
    announce("train.txt", &train)?;
    announce("enroll.txt", &enroll_c)?;
    announce("test.txt", &test_c)?;
    let trials_path = out_dir.join("trials.txt");
    let n_trials = trials.len();
    write_trials(&TrialList { trials }, &trials_path)?;
    println!("wrote {} ({n_trials} trials)", trials_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// What to fit: lda, plda, or dda.
    #[arg(long, value_enum)]
    method: Option<TrainMethod>,
    /// Training corpus path.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output model path [default: {method}.model].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training log path [default: {model}.log].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output dimension: LDA columns, or DDA embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// LDA within-class scatter ridge [default: 1e-6 · trace(S_w)/dim].
    #[arg(long)]
    ridge: Option<f64>,
    /// PLDA EM iterations [default: 20].
    #[arg(long)]
    iters: Option<usize>,
    /// DDA hidden width [default: input dimension].
    #[arg(long)]
    hidden: Option<usize>,
    /// Center-loss weight [default: 0.01].
    #[arg(long)]
    lambda: Option<f64>,
    /// Network learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Center update rate [default: 0.1].
    #[arg(long)]
    center_lr: Option<f64>,
    /// Mini-batch size [default: 256].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 50].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initialization and shuffling seed [default: 0].
    #[arg(long)]
    train_seed: Option<u64>,
    /// Learning-rate schedule: constant or step [default: constant].
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
}

fn dda_train_config(args: &TrainArgs, cfg: &FileConfig) -> Result<dda::TrainConfig> {
    let d = dda::TrainConfig::default();
    Ok(dda::TrainConfig {
        lambda: resolve(args.lambda, cfg, "lambda", d.lambda)?,
        lr: resolve(args.lr, cfg, "lr", d.lr)?,
        center_lr: resolve(args.center_lr, cfg, "center_lr", d.center_lr)?,
        batch_size: resolve(args.batch_size, cfg, "batch_size", d.batch_size)?,
        epochs: resolve(args.epochs, cfg, "epochs", d.epochs)?,
        seed: resolve(args.train_seed, cfg, "train_seed", d.seed)?,
        lr_schedule: resolve(args.schedule, cfg, "schedule", Schedule::Constant)?.to_lr_schedule(),
    })
}

fn default_lda_dim(corpus: &LabeledCorpus) -> usize {
    (corpus.n_speakers() - 1).clamp(1, corpus.dim())
}

fn default_embed_dim(corpus: &LabeledCorpus) -> usize {
    (corpus.dim() / 2).max(1)
}

fn dda_architecture(
    corpus: &LabeledCorpus,
    dim: Option<usize>,
    hidden: Option<usize>,
) -> dda::DdaArchitecture {
    dda::DdaArchitecture {
        input_dim: corpus.dim(),
        hidden_dim: hidden.unwrap_or_else(|| corpus.dim()),
        embed_dim: dim.unwrap_or_else(|| default_embed_dim(corpus)),
        n_classes: corpus.n_speakers(),
    }
}

fn cmd_train(args: &TrainArgs, cfg: &FileConfig) -> Result<()> {
    let method = require(
        resolve_opt(args.method, cfg, "method")?,
        "--method (config key `method`)",
    )?;
    let corpus_path = require(
        resolve_opt(args.corpus.clone(), cfg, "corpus")?,
        "--corpus (config key `corpus`)",
    )?;
    let model_path = resolve_opt(args.model.clone(), cfg, "model")?
        .unwrap_or_else(|| PathBuf::from(format!("{method}.model")));
    let log_path = resolve_opt(args.log.clone(), cfg, "log")?.unwrap_or_else(|| {
        let mut name = model_path.clone().into_os_string();
        name.push(".log");
        PathBuf::from(name)
    });
    let corpus = read_corpus(&corpus_path)?;

    let mut log = String::new();
    match method {
        TrainMethod::Lda => {
            let out_dim =
                resolve_opt(args.dim, cfg, "dim")?.unwrap_or_else(|| default_lda_dim(&corpus));
            let ridge = resolve_opt(args.ridge, cfg, "ridge")?;
            let model = lda::fit_lda(&corpus, out_dim, ridge)?;
            lda::write_model(&model, &model_path)?;
            log.push_str(&format!(
                "method lda\ninput_dim {}\nout_dim {}\nridge {}\neigenvalues ",
                model.input_dim(),
                model.output_dim(),
                model.ridge
            ));
            textio::push_floats(&mut log, &model.eigenvalues);
            log.push('\n');
        }
        TrainMethod::Plda => {
            let iters = resolve(args.iters, cfg, "iters", 20)?;
            let (model, trace) = plda::fit_plda(&corpus, iters)?;
            plda::write_model(&model, &model_path)?;
            log.push_str("method plda\n");
            for (i, ll) in trace.log_likelihoods.iter().enumerate() {
                log.push_str(&format!("iter {i} log_likelihood {ll}\n"));
            }
        }
        TrainMethod::Dda => {
            let arch = dda_architecture(
                &corpus,
                resolve_opt(args.dim, cfg, "dim")?,
                resolve_opt(args.hidden, cfg, "hidden")?,
            );
            let tc = dda_train_config(args, cfg)?;
            let (model, history) = dda::train(&corpus, arch, &tc)?;
            dda::write_model(&model, &model_path)?;
            log.push_str(&format!(
                "method dda\nlambda {}\nhidden_dim {}\nembed_dim {}\n",
                tc.lambda, arch.hidden_dim, arch.embed_dim
            ));
            for (e, row) in history.iter().enumerate() {
                log.push_str(&format!(
                    "epoch {e} total {} softmax {} center {}\n",
                    row.total, row.softmax, row.center
                ));
            }
        }
    }
    std::fs::write(&log_path, log)?;
    println!(
        "wrote {} and {}",
        model_path.display(),
        log_path.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Trained lda or dda model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus to compensate.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output corpus path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn model_tag(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path)?;
    let mut first = String::new();
    std::io::BufReader::new(file).read_line(&mut first)?;
    Ok(first.trim().to_string())
}

/// Apply a serialized compensation model, dispatching on its tag line.
fn apply_model_file(path: &Path, corpus: &LabeledCorpus) -> Result<LabeledCorpus> {
    match model_tag(path)?.as_str() {
        lda::MODEL_TAG => {
            let model = lda::read_model(path)?;
            corpus.map_embeddings(|x| lda::lda_transform(&model, x))
        }
        dda::MODEL_TAG => {
            let model = dda::read_model(path)?;
            corpus.map_embeddings(|x| dda::compensate(&model, x))
        }
        plda::MODEL_TAG => Err(Error::Config(
            "plda models are a scoring back-end, not a transform; use `score --scorer plda`"
                .into(),
        )),
        other => Err(Error::Format(format!(
            "unrecognized model tag {other:?} in {}",
            path.display()
        ))),
    }
}

fn cmd_transform(args: &TransformArgs, cfg: &FileConfig) -> Result<()> {
    let model_path = require(
        resolve_opt(args.model.clone(), cfg, "model")?,
        "--model (config key `model`)",
    )?;
    let corpus_path = require(
        resolve_opt(args.corpus.clone(), cfg, "corpus")?,
        "--corpus (config key `corpus`)",
    )?;
    let out = require(
        resolve_opt(args.out.clone(), cfg, "out")?,
        "--out (config key `out`)",
    )?;
    let corpus = read_corpus(&corpus_path)?;
    let compensated = apply_model_file(&model_path, &corpus)?;
    write_corpus(&compensated, &out)?;
    println!(
        "wrote {} ({} utterances, dim {})",
        out.display(),
        compensated.len(),
        compensated.dim()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Scoring back-end: cos, euc, or plda.
    #[arg(long, value_enum)]
    scorer: Option<Scorer>,
    /// Enrollment corpus (already compensated).
    #[arg(long)]
    enroll: Option<PathBuf>,
    /// Test corpus (already compensated).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Trial list path.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Trained PLDA model, required with --scorer plda.
    #[arg(long)]
    plda_model: Option<PathBuf>,
    /// Output scores path [default: scores.txt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for trial scoring [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
}

fn cmd_score(args: &ScoreArgs, cfg: &FileConfig) -> Result<()> {
    let scorer = require(
        resolve_opt(args.scorer, cfg, "scorer")?,
        "--scorer (config key `scorer`)",
    )?;
    let enroll_path = require(
        resolve_opt(args.enroll.clone(), cfg, "enroll")?,
        "--enroll (config key `enroll`)",
    )?;
    let test_path = require(
        resolve_opt(args.test.clone(), cfg, "test")?,
        "--test (config key `test`)",
    )?;
    let trials_path = require(
        resolve_opt(args.trials.clone(), cfg, "trials")?,
        "--trials (config key `trials`)",
    )?;
    let out = resolve(args.out.clone(), cfg, "out", PathBuf::from("scores.txt"))?;
    let jobs = resolve(args.jobs, cfg, "jobs", 1)?;

    let enrollments = enroll(&read_corpus(&enroll_path)?);
    let tests = test_map(&read_corpus(&test_path)?);
    let trials = read_trials(&trials_path)?;
    let plda_model = match scorer {
        Scorer::Plda => {
            let path = require(
                resolve_opt(args.plda_model.clone(), cfg, "plda_model")?,
                "--plda-model (config key `plda_model`)",
            )?;
            Some(plda::read_model(&path)?)
        }
        _ => None,
    };
    let method = match (scorer, &plda_model) {
        (Scorer::Cos, _) => ScoreMethod::Cosine,
        (Scorer::Euc, _) => ScoreMethod::Euclidean,
        (Scorer::Plda, Some(m)) => ScoreMethod::Plda(m),
        (Scorer::Plda, None) => unreachable!("plda model loaded above"),
    };
    let scored = score_trials(&trials, &enrollments, &tests, method, jobs)?;
    write_scores(&scored, &out)?;
    println!("wrote {} ({} trials)", out.display(), scored.trials.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training corpus; needed for lda/dda compensation and the plda scorer.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Enrollment corpus.
    #[arg(long)]
    enroll: Option<PathBuf>,
    /// Test corpus.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Trial list.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Output directory [default: .].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Compensation method: none, lda, or dda [default: none].
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Scoring back-end: cos, euc, or plda [default: cos].
    #[arg(long, value_enum)]
    scorer: Option<Scorer>,
    /// Run every method × scorer combination into grid.txt.
    #[arg(long)]
    grid: bool,
    /// Comma-separated output dimensions to sweep into dims.txt.
    #[arg(long)]
    dims: Option<String>,
    /// Output dimension for lda/dda compensation.
    #[arg(long)]
    dim: Option<usize>,
    /// LDA within-class scatter ridge.
    #[arg(long)]
    ridge: Option<f64>,
    /// PLDA scorer EM iterations [default: 20].
    #[arg(long)]
    iters: Option<usize>,
    /// DDA hidden width [default: input dimension].
    #[arg(long)]
    hidden: Option<usize>,
    /// Center-loss weight [default: 0.01].
    #[arg(long)]
    lambda: Option<f64>,
    /// Network learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Center update rate [default: 0.1].
    #[arg(long)]
    center_lr: Option<f64>,
    /// Mini-batch size [default: 256].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 50].
    #[arg(long)]
    epochs: Option<usize>,
    /// DDA initialization and shuffling seed [default: 0].
    #[arg(long)]
    train_seed: Option<u64>,
    /// Learning-rate schedule: constant or step [default: constant].
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    /// Worker threads for trial scoring [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
}

/// Fully resolved evaluation settings.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub train_corpus: Option<PathBuf>,
    pub enroll_corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub trials: PathBuf,
    pub out_dir: PathBuf,
    pub method: Method,
    pub scorer: Scorer,
    pub dim: Option<usize>,
    pub hidden: Option<usize>,
    pub ridge: Option<f64>,
    pub iters: usize,
    pub dda: dda::TrainConfig,
    pub jobs: usize,
}

fn pipeline_config(args: &EvalArgs, cfg: &FileConfig) -> Result<PipelineConfig> {
    let d = dda::TrainConfig::default();
    Ok(PipelineConfig {
        train_corpus: resolve_opt(args.train.clone(), cfg, "train_corpus")?,
        enroll_corpus: require(
            resolve_opt(args.enroll.clone(), cfg, "enroll")?,
            "--enroll (config key `enroll`)",
        )?,
        test_corpus: require(
            resolve_opt(args.test.clone(), cfg, "test")?,
            "--test (config key `test`)",
        )?,
        trials: require(
            resolve_opt(args.trials.clone(), cfg, "trials")?,
            "--trials (config key `trials`)",
        )?,
        out_dir: resolve(args.out_dir.clone(), cfg, "out_dir", PathBuf::from("."))?,
        method: resolve(args.method, cfg, "method", Method::None)?,
        scorer: resolve(args.scorer, cfg, "scorer", Scorer::Cos)?,
        dim: resolve_opt(args.dim, cfg, "dim")?,
        hidden: resolve_opt(args.hidden, cfg, "hidden")?,
        ridge: resolve_opt(args.ridge, cfg, "ridge")?,
        iters: resolve(args.iters, cfg, "iters", 20)?,
        dda: dda::TrainConfig {
            lambda: resolve(args.lambda, cfg, "lambda", d.lambda)?,
            lr: resolve(args.lr, cfg, "lr", d.lr)?,
            center_lr: resolve(args.center_lr, cfg, "center_lr", d.center_lr)?,
            batch_size: resolve(args.batch_size, cfg, "batch_size", d.batch_size)?,
            epochs: resolve(args.epochs, cfg, "epochs", d.epochs)?,
            seed: resolve(args.train_seed, cfg, "train_seed", d.seed)?,
            lr_schedule: resolve(args.schedule, cfg, "schedule", Schedule::Constant)?
                .to_lr_schedule(),
        },
        jobs: resolve(args.jobs, cfg, "jobs", 1)?,
    })
}

/// Compensate train/enroll/test with one method; `None` passes them through.
fn compensate_corpora(
    pc: &PipelineConfig,
    method: Method,
    dim_override: Option<usize>,
    train: Option<&LabeledCorpus>,
    enroll_c: &LabeledCorpus,
    test_c: &LabeledCorpus,
) -> Result<(Option<LabeledCorpus>, LabeledCorpus, LabeledCorpus)> {
    let need_train = |what: &str| -> Result<&LabeledCorpus> {
        train.ok_or_else(|| {
            Error::Config(format!("a --train corpus is required for {what}"))
        })
    };
    match method {
        Method::None => Ok((train.cloned(), enroll_c.clone(), test_c.clone())),
        Method::Lda => {
            let train = need_train("lda compensation")?;
            let out_dim = dim_override
                .or(pc.dim)
                .unwrap_or_else(|| default_lda_dim(train));
            let model = lda::fit_lda(train, out_dim, pc.ridge)?;
            Ok((
                Some(train.map_embeddings(|x| lda::lda_transform(&model, x))?),
                enroll_c.map_embeddings(|x| lda::lda_transform(&model, x))?,
                test_c.map_embeddings(|x| lda::lda_transform(&model, x))?,
            ))
        }
        Method::Dda => {
            let train = need_train("dda compensation")?;
            let arch = dda_architecture(train, dim_override.or(pc.dim), pc.hidden);
            let (model, _) = dda::train(train, arch, &pc.dda)?;
            Ok((
                Some(train.map_embeddings(|x| dda::compensate(&model, x))?),
                enroll_c.map_embeddings(|x| dda::compensate(&model, x))?,
                test_c.map_embeddings(|x| dda::compensate(&model, x))?,
            ))
        }
    }
}

fn score_compensated(
    pc: &PipelineConfig,
    scorer: Scorer,
    ctrain: Option<&LabeledCorpus>,
    cenroll: &LabeledCorpus,
    ctest: &LabeledCorpus,
    trials: &TrialList,
) -> Result<(ScoredTrials, EvalReport)> {
    let enrollments = enroll(cenroll);
    let tests = test_map(ctest);
    let scored = match scorer {
        Scorer::Cos => score_trials(trials, &enrollments, &tests, ScoreMethod::Cosine, pc.jobs)?,
        Scorer::Euc => {
            score_trials(trials, &enrollments, &tests, ScoreMethod::Euclidean, pc.jobs)?
        }
        Scorer::Plda => {
            let train = ctrain.ok_or_else(|| {
                Error::Config("a --train corpus is required to fit the plda scorer".into())
            })?;
            let (model, _) = plda::fit_plda(train, pc.iters)?;
            score_trials(trials, &enrollments, &tests, ScoreMethod::Plda(&model), pc.jobs)?
        }
    };
    let report = compute_eer(&scored)?;
    Ok((scored, report))
}

fn parse_dims(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad --dims entry {tok:?}: {e}")))
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs, cfg: &FileConfig) -> Result<()> {
    let pc = pipeline_config(args, cfg)?;
    let grid = args.grid || cfg.get::<bool>("grid")?.unwrap_or(false);
    let dims = resolve_opt(args.dims.clone(), cfg, "dims")?;
    if grid && dims.is_some() {
        return Err(Error::Config("--grid and --dims cannot be combined".into()));
    }

    let train = match &pc.train_corpus {
        Some(path) => Some(read_corpus(path)?),
        None => None,
    };
    let enroll_c = read_corpus(&pc.enroll_corpus)?;
    let test_c = read_corpus(&pc.test_corpus)?;
    let trials = read_trials(&pc.trials)?;
    std::fs::create_dir_all(&pc.out_dir)?;

    if grid {
        let mut table = String::from("method cos euc plda\n");
        for method in [Method::None, Method::Lda, Method::Dda] {
            let (ctrain, cenroll, ctest) =
                compensate_corpora(&pc, method, None, train.as_ref(), &enroll_c, &test_c)?;
            table.push_str(method.as_str());
            for scorer in [Scorer::Cos, Scorer::Euc, Scorer::Plda] {
                let (_, report) =
                    score_compensated(&pc, scorer, ctrain.as_ref(), &cenroll, &ctest, &trials)?;
                table.push_str(&format!(" {}", report.eer_percent));
            }
            table.push('\n');
        }
        let path = pc.out_dir.join("grid.txt");
        std::fs::write(&path, &table)?;
        print!("{table}");
        println!("wrote {}", path.display());
        return Ok(());
    }

    if let Some(raw) = dims {
        let dims = parse_dims(&raw)?;
        if dims.is_empty() {
            return Err(Error::Config("--dims is empty".into()));
        }
        let mut table = format!("dim lda+{0} dda+{0}\n", pc.scorer);
        for dim in dims {
            table.push_str(&format!("{dim}"));
            for method in [Method::Lda, Method::Dda] {
                let (ctrain, cenroll, ctest) = compensate_corpora(
                    &pc,
                    method,
                    Some(dim),
                    train.as_ref(),
                    &enroll_c,
                    &test_c,
                )?;
                let (_, report) = score_compensated(
                    &pc,
                    pc.scorer,
                    ctrain.as_ref(),
                    &cenroll,
                    &ctest,
                    &trials,
                )?;
                table.push_str(&format!(" {}", report.eer_percent));
            }
            table.push('\n');
        }
        let path = pc.out_dir.join("dims.txt");
        std::fs::write(&path, &table)?;
        print!("{table}");
        println!("wrote {}", path.display());
        return Ok(());
    }

    let (ctrain, cenroll, ctest) =
        compensate_corpora(&pc, pc.method, None, train.as_ref(), &enroll_c, &test_c)?;
    let (scored, report) =
        score_compensated(&pc, pc.scorer, ctrain.as_ref(), &cenroll, &ctest, &trials)?;
    let report_path = pc.out_dir.join("report.txt");
    write_report(&report, &report_path)?;
    let scores_path = pc.out_dir.join("scores.txt");
    write_scores(&scored, &scores_path)?;
    println!(
        "method={} scorer={} eer_percent={} threshold={}",
        pc.method, pc.scorer, report.eer_percent, report.eer_threshold
    );
    println!("wrote {} and {}", report_path.display(), scores_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Corpus to export.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Optional lda/dda model; omitted means export the inputs unchanged.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output embedding dump [default: embeddings.txt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Distance-statistics path [default: {out}.stats].
    #[arg(long)]
    stats: Option<PathBuf>,
}

fn cmd_export(args: &ExportArgs, cfg: &FileConfig) -> Result<()> {
    let corpus_path = require(
        resolve_opt(args.corpus.clone(), cfg, "corpus")?,
        "--corpus (config key `corpus`)",
    )?;
    let out = resolve(args.out.clone(), cfg, "out", PathBuf::from("embeddings.txt"))?;
    let stats_path = resolve_opt(args.stats.clone(), cfg, "stats")?.unwrap_or_else(|| {
        let mut name = out.clone().into_os_string();
        name.push(".stats");
        PathBuf::from(name)
    });
    let corpus = read_corpus(&corpus_path)?;
    let compensated = match resolve_opt(args.model.clone(), cfg, "model")? {
        Some(model_path) => apply_model_file(&model_path, &corpus)?,
        None => corpus,
    };
    write_corpus(&compensated, &out)?;

    let mut stats = String::new();
    match distance_stats(&compensated) {
        Ok(s) => stats.push_str(&format!(
            "mean_within {}\nmean_between {}\nratio {}\nn_within {}\nn_between {}\n",
            s.mean_within,
            s.mean_between,
            s.ratio(),
            s.n_within,
            s.n_between
        )),
        Err(e) => stats.push_str(&format!("global stats unavailable: {e}\n")),
    }
    for (speaker, idxs) in compensated.speakers() {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in idxs.iter().enumerate() {
            for &j in idxs.iter().skip(a + 1) {
                let dist: f64 = compensated.items()[i]
                    .embedding
                    .iter()
                    .zip(&compensated.items()[j].embedding)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                sum += dist;
                pairs += 1;
            }
        }
        if pairs > 0 {
            stats.push_str(&format!(
                "speaker {speaker} mean_within {} pairs {pairs}\n",
                sum / pairs as f64
            ));
        } else {
            stats.push_str(&format!("speaker {speaker} pairs 0\n"));
        }
    }
    std::fs::write(&stats_path, stats)?;
    println!(
        "wrote {} ({} utterances, dim {}) and {}",
        out.display(),
        compensated.len(),
        compensated.dim(),
        stats_path.display()
    );
    Ok(())
}

/// Dispatch a parsed command line. The error string names the failing stage.
pub fn run(cli: Cli) -> std::result::Result<(), String> {
    let cfg = FileConfig::load(cli.config.as_deref()).map_err(|e| format!("config: {e}"))?;
    let (stage, result) = match &cli.command {
        Command::Gen(a) => ("gen", cmd_gen(a, &cfg)),
        Command::Train(a) => ("train", cmd_train(a, &cfg)),
        Command::Transform(a) => ("transform", cmd_transform(a, &cfg)),
        Command::Score(a) => ("score", cmd_score(a, &cfg)),
        Command::Eval(a) => ("eval", cmd_eval(a, &cfg)),
        Command::ExportEmbeddings(a) => ("export-embeddings", cmd_export(a, &cfg)),
    };
    result.map_err(|e| format!("{stage}: {e}"))
}
