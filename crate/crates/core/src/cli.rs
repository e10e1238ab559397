//! The `coloc` command line: corpus generation, training, evaluation,
//! rendering and self-verification.
//!
//! Every subcommand accepts `--config FILE` holding flat `key = value` lines
//! whose keys are the subcommand's long flag names. Flags given on the
//! command line win over the file. Exit codes: 0 success, 1 usage error,
//! 2 runtime or data error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::corpus::{corpus_checksum, generate_corpus, load_corpus, save_corpus, split, Corpus, CorpusConfig};
use crate::encoders::{ModelConfig, ParseMode};
use crate::error::Error;
use crate::eval::{
    center_baseline, pointing_accuracy, queries, random_baseline, recall_over_folds, span_map, Direction,
};
use crate::localization::threshold_mask;
use crate::losses::{LossKind, Mining, TripletConfig};
use crate::pnm::{write_pbm, write_pgm};
use crate::selfcheck::{self, SelfCheckOptions};
use crate::training::{load_checkpoint, metrics_log, resume, save_checkpoint, EpochMetrics, TrainConfig, TrainHooks, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "coloc", version, about = "Cross-modal co-localization from image-caption ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic grounded corpus.
    GenCorpus(GenCorpusArgs),
    /// Train both encoders with a ranking loss.
    Train(TrainArgs),
    /// Pointing-game or retrieval evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Export per-span heatmaps (PGM) and masks (PBM) for one caption.
    Render(RenderArgs),
    /// Gradient checks and oracle comparisons.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenCorpusArgs {
    /// key = value file; command-line flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub min_object_size: Option<usize>,
    #[arg(long)]
    pub max_object_size: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub mean_phrases: Option<f64>,
    #[arg(long)]
    pub max_phrases: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub duplicate_fraction: Option<f64>,
    #[arg(long)]
    pub clutter_density: Option<f64>,
    #[arg(long)]
    pub clutter_block: Option<usize>,
}

/// How a corpus directory is partitioned into train, validation and test.
#[derive(Args, Debug, Default)]
pub struct SplitArgs {
    /// Three comma-separated fractions for train, val and test
    #[arg(long)]
    pub split_fractions: Option<String>,
    /// Defaults to the corpus seed
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// npair or triplet
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Triplet margin
    #[arg(long)]
    pub margin: Option<f64>,
    /// Triplet impostor mining: hardest or random
    #[arg(long)]
    pub mining: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Metrics log path; defaults to the checkpoint path with `.metrics.tsv` appended
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Add validation pointing and R@1 columns to the metrics log
    #[arg(long)]
    pub validate: bool,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// train, val, test or all
    #[arg(long)]
    pub split: Option<String>,
    /// pointing or retrieval
    #[arg(long)]
    pub task: Option<String>,
    /// word or phrase
    #[arg(long)]
    pub parse_mode: Option<String>,
    /// Comma-separated recall cutoffs
    #[arg(long)]
    pub k: Option<String>,
    /// i2t, t2i or both
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long)]
    pub fold_size: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Monte Carlo trials per query for the random baseline
    #[arg(long)]
    pub baseline_trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-query record file
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub splits: SplitArgs,
}

#[derive(Args, Debug, Default)]
pub struct RenderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub caption_id: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mask_quantile: Option<f64>,
    /// word or phrase
    #[arg(long)]
    pub parse_mode: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct SelfcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random points per op
    #[arg(long)]
    pub points: Option<usize>,
    /// Random instances per oracle comparison
    #[arg(long)]
    pub instances: Option<usize>,
    /// Fault injection: break the backward rule of this op
    #[arg(long)]
    pub corrupt_backward: Option<String>,
}

/// Flat `key = value` configuration validated against a fixed key set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse config text. Blank lines and `#` comments are skipped; keys
    /// outside `known` and repeated keys are errors.
    pub fn parse(text: &str, known: &[String]) -> std::result::Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let key = key.trim().replace('_', "-");
            if !known.contains(&key) {
                return Err(format!("line {}: unknown key `{key}` (known: {})", n + 1, known.join(", ")));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path, known: &[String]) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text, known).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> std::result::Result<Option<T>, String>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| format!("config key `{key}`: cannot parse `{v}`: {e}")),
        }
    }
}

/// Long flag names of a subcommand, the key schema for its config file.
pub fn config_keys(subcommand: &str) -> Vec<String> {
    let cmd = Cli::command();
    cmd.find_subcommand(subcommand)
        .map(|sc| {
            sc.get_arguments()
                .filter_map(|a| a.get_long())
                .filter(|l| *l != "config" && *l != "help")
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

/// Flag value if present, else the config file value.
struct Merge {
    file: RunConfig,
}

impl Merge {
    fn new(subcommand: &str, path: Option<&Path>) -> CliResult<Self> {
        let file = match path {
            Some(p) => RunConfig::load(p, &config_keys(subcommand)).map_err(CliError::usage)?,
            None => RunConfig::default(),
        };
        Ok(Merge { file })
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key).map_err(CliError::usage),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.opt(flag, key)?
            .ok_or_else(|| CliError::usage(format!("missing required option --{key}")))
    }

    fn flag(&self, flag: bool, key: &str) -> CliResult<bool> {
        Ok(flag || self.file.get::<bool>(key).map_err(CliError::usage)?.unwrap_or(false))
    }
}

fn parse_with<T, E: Display>(value: &str, what: &str, f: impl Fn(&str) -> std::result::Result<T, E>) -> CliResult<T> {
    f(value).map_err(|e| CliError::usage(format!("invalid {what} `{value}`: {e}")))
}

fn parse_list<T: FromStr>(value: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| parse_with(s.trim(), what, str::parse::<T>))
        .collect()
}

/// Parse `args` (including the program name) and run the command, writing
/// normal output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.render())),
    };
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Render(a) => render(a, out),
        Command::Selfcheck(a) => selfcheck(a, out),
    }
}

/// Run with process arguments and map the outcome to an exit code.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(std::env::args_os(), &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.message.trim_end());
            e.code
        }
    }
}

fn gen_corpus(a: GenCorpusArgs, out: &mut dyn Write) -> CliResult {
    let m = Merge::new("gen-corpus", a.config.as_deref())?;
    let dir: PathBuf = m.required(a.out, "out")?;
    let images: usize = m.required(a.images, "images")?;
    let seed: u64 = m.required(a.seed, "seed")?;
    if images == 0 {
        return Err(CliError::usage("--images must be at least 1"));
    }
    let d = CorpusConfig::default();
    let cfg = CorpusConfig {
        image_size: d.image_size,
        min_objects: m.or(a.min_objects, "min-objects", d.min_objects)?,
        max_objects: m.or(a.max_objects, "max-objects", d.max_objects)?,
        min_object_size: m.or(a.min_object_size, "min-object-size", d.min_object_size)?,
        max_object_size: m.or(a.max_object_size, "max-object-size", d.max_object_size)?,
        captions_per_image: m.or(a.captions_per_image, "captions-per-image", d.captions_per_image)?,
        mean_phrases: m.or(a.mean_phrases, "mean-phrases", d.mean_phrases)?,
        max_phrases: m.or(a.max_phrases, "max-phrases", d.max_phrases)?,
        max_tokens: m.or(a.max_tokens, "max-tokens", d.max_tokens)?,
        duplicate_fraction: m.or(a.duplicate_fraction, "duplicate-fraction", d.duplicate_fraction)?,
        clutter_density: m.or(a.clutter_density, "clutter-density", d.clutter_density)?,
        clutter_block: m.or(a.clutter_block, "clutter-block", d.clutter_block)?,
    };
    cfg.validate().map_err(CliError::usage)?;
    let corpus = generate_corpus(images, seed, &cfg)?;
    save_corpus(&corpus, &dir)?;
    let spans: usize = corpus.captions().map(|c| c.spans.len()).sum();
    writeln!(out, "corpus\t{}", dir.display())?;
    writeln!(out, "images\t{}", corpus.len())?;
    writeln!(out, "captions\t{}", corpus.num_captions())?;
    writeln!(out, "phrases\t{spans}")?;
    writeln!(out, "vocab\t{}", corpus.vocab.len())?;
    writeln!(out, "seed\t{seed}")?;
    writeln!(out, "checksum\t{}", corpus_checksum(&dir)?)?;
    Ok(())
}

fn load_split(corpus: Corpus, m: &Merge, s: &SplitArgs, which: &str) -> CliResult<Corpus> {
    let fractions: Vec<f64> = parse_list(&m.or(s.split_fractions.clone(), "split-fractions", "0.7,0.1,0.2".into())?, "split fractions")?;
    let fractions: [f64; 3] = fractions
        .try_into()
        .map_err(|_| CliError::usage("--split-fractions needs exactly three values"))?;
    let seed = m.or(s.split_seed, "split-seed", corpus.seed)?;
    if which == "all" {
        return Ok(corpus);
    }
    let (train, val, test) = split(&corpus, fractions, seed).map_err(CliError::usage)?;
    match which {
        "train" => Ok(train),
        "val" => Ok(val),
        "test" => Ok(test),
        other => Err(CliError::usage(format!("unknown split `{other}` (train, val, test, all)"))),
    }
}

fn parse_loss(name: &str, margin: f64, mining: &str) -> CliResult<LossKind> {
    let mining = match mining {
        "hardest" => Mining::Hardest,
        "random" => Mining::Random(0),
        other => return Err(CliError::usage(format!("unknown mining `{other}` (hardest, random)"))),
    };
    match name {
        "npair" => Ok(LossKind::NPair),
        "triplet" => Ok(LossKind::Triplet(TripletConfig { margin, mining })),
        other => Err(CliError::usage(format!("unknown loss `{other}` (npair, triplet)"))),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let m = Merge::new("train", a.config.as_deref())?;
    let corpus_dir: PathBuf = m.required(a.corpus.clone(), "corpus")?;
    let ckpt: PathBuf = m.required(a.out.clone(), "out")?;
    let d = TrainConfig::default();
    let margin = m.or(a.margin, "margin", TripletConfig::default().margin)?;
    let mining: String = m.or(a.mining.clone(), "mining", "hardest".into())?;
    let loss = parse_loss(&m.or(a.loss.clone(), "loss", "npair".into())?, margin, &mining)?;
    let seed = m.or(a.seed, "seed", d.seed)?;
    let cfg = TrainConfig {
        loss: match loss {
            LossKind::Triplet(TripletConfig {
                margin,
                mining: Mining::Random(_),
            }) => LossKind::Triplet(TripletConfig {
                margin,
                mining: Mining::Random(seed),
            }),
            other => other,
        },
        batch_size: m.or(a.batch, "batch", d.batch_size)?,
        learning_rate: m.or(a.lr, "lr", d.learning_rate)?,
        momentum: m.or(a.momentum, "momentum", d.momentum)?,
        epochs: m.or(a.epochs, "epochs", d.epochs)?,
        seed,
        checkpoint_every: m.or(a.checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
    };
    cfg.validate().map_err(CliError::usage)?;
    let metrics_path: PathBuf = m.or(a.metrics.clone(), "metrics", {
        let mut p = ckpt.clone().into_os_string();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    })?;
    let validate = m.flag(a.validate, "validate")?;

    let corpus = load_corpus(&corpus_dir)?;
    let val = if validate {
        Some(load_split(corpus.clone(), &m, &a.split, "val")?)
    } else {
        None
    };
    let train_set = load_split(corpus, &m, &a.split, "train")?;

    let mut state = match m.opt(a.resume.clone(), "resume")? {
        Some(p) => load_checkpoint(&p)?,
        None => TrainState::new(&ModelConfig::desk(train_set.vocab.len()), cfg.seed)?,
    };
    let mut all: Vec<EpochMetrics> = Vec::new();
    let mut echo = |e: &EpochMetrics| {
        let _ = writeln!(out, "{}", e.log_line());
    };
    let result = resume(
        &mut state,
        &cfg,
        &train_set,
        TrainHooks {
            validation: val.as_ref(),
            checkpoint: Some(&ckpt),
            on_epoch: Some(&mut echo),
        },
    );
    match result {
        Ok(metrics) => all.extend(metrics),
        Err(e @ Error::NonFiniteLoss { .. }) => return Err(CliError::runtime(format!("training aborted: {e}"))),
        Err(e) => return Err(e.into()),
    }
    save_checkpoint(&state, &ckpt)?;
    std::fs::write(&metrics_path, metrics_log(&all)).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    writeln!(out, "checkpoint\t{}", ckpt.display())?;
    writeln!(out, "metrics\t{}", metrics_path.display())?;
    Ok(())
}

fn parse_mode(s: &str) -> CliResult<ParseMode> {
    match s {
        "word" => Ok(ParseMode::WordMode),
        "phrase" => Ok(ParseMode::PhraseMode),
        other => Err(CliError::usage(format!("unknown parse mode `{other}` (word, phrase)"))),
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let m = Merge::new("eval", a.config.as_deref())?;
    let ckpt: PathBuf = m.required(a.ckpt.clone(), "ckpt")?;
    let corpus_dir: PathBuf = m.required(a.corpus.clone(), "corpus")?;
    let which: String = m.or(a.split.clone(), "split", "test".into())?;
    let task: String = m.or(a.task.clone(), "task", "pointing".into())?;
    let mode_name: String = m.or(a.parse_mode.clone(), "parse-mode", "word".into())?;
    let mode = parse_mode(&mode_name)?;
    let seed = m.or(a.seed, "seed", 0)?;
    let report_path: Option<PathBuf> = m.opt(a.report.clone(), "report")?;
    if task != "pointing" && task != "retrieval" {
        return Err(CliError::usage(format!("unknown task `{task}` (pointing, retrieval)")));
    }
    if !["train", "val", "test", "all"].contains(&which.as_str()) {
        return Err(CliError::usage(format!("unknown split `{which}` (train, val, test, all)")));
    }
    let ks: Vec<usize> = parse_list(&m.or(a.k.clone(), "k", "1,5,10".into())?, "k")?;
    let direction: String = m.or(a.direction.clone(), "direction", "both".into())?;
    let directions = match direction.as_str() {
        "both" => vec![Direction::ImageToCaption, Direction::CaptionToImage],
        d => vec![parse_with(d, "direction", Direction::from_str)?],
    };
    let fold_size = m.or(a.fold_size, "fold-size", 100)?;
    let folds = m.or(a.folds, "folds", 5)?;
    let trials = m.or(a.baseline_trials, "baseline-trials", 100)?;

    let state = load_checkpoint(&ckpt)?;
    let corpus = load_split(load_corpus(&corpus_dir)?, &m, &a.splits, &which)?;

    if task == "pointing" {
        let result = pointing_accuracy(&state.model, &corpus, mode)?;
        let q = queries(&corpus);
        let random = random_baseline(&q, trials, seed).accuracy();
        let center = center_baseline(&q).accuracy();
        writeln!(out, "task\tsplit\tparse_mode\tqueries\taccuracy\trandom\tcenter")?;
        writeln!(
            out,
            "pointing\t{which}\t{mode_name}\t{}\t{:.4}\t{random:.4}\t{center:.4}",
            result.total,
            result.accuracy()
        )?;
        if let Some(p) = report_path {
            std::fs::write(&p, result.report()).map_err(|e| Error::Io { path: p, source: e })?;
        }
    } else {
        let fold = fold_size.min(corpus.len());
        writeln!(out, "task\tsplit\tdirection\tfold_size\tfolds\tk\trecall")?;
        let mut report = String::new();
        for dir in directions {
            let r = recall_over_folds(&state.model, &corpus, fold, folds, &ks, dir).map_err(CliError::usage)?;
            let used = (corpus.len() / fold).min(folds);
            for (k, v) in r.ks.iter().zip(&r.recalls) {
                writeln!(out, "retrieval\t{which}\t{dir}\t{fold}\t{used}\t{k}\t{v:.4}")?;
            }
            for (q, rank) in r.ranks.iter().enumerate() {
                report.push_str(&format!("{dir}\t{q}\t{rank}\n"));
            }
        }
        if let Some(p) = report_path {
            std::fs::write(&p, report).map_err(|e| Error::Io { path: p, source: e })?;
        }
    }
    Ok(())
}

fn render(a: RenderArgs, out: &mut dyn Write) -> CliResult {
    let m = Merge::new("render", a.config.as_deref())?;
    let ckpt: PathBuf = m.required(a.ckpt.clone(), "ckpt")?;
    let corpus_dir: PathBuf = m.required(a.corpus.clone(), "corpus")?;
    let caption_id: u32 = m.required(a.caption_id, "caption-id")?;
    let dir: PathBuf = m.required(a.out.clone(), "out")?;
    let quantile = m.or(a.mask_quantile, "mask-quantile", 0.9)?;
    let mode = parse_mode(&m.or(a.parse_mode.clone(), "parse-mode", "word".into())?)?;
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(CliError::usage(format!("--mask-quantile {quantile} must lie in (0, 1)")));
    }

    let state = load_checkpoint(&ckpt)?;
    let corpus = load_corpus(&corpus_dir)?;
    let (record, caption) = corpus
        .find_caption(caption_id)
        .ok_or_else(|| CliError::runtime(format!("caption id {caption_id} not in corpus")))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let features = state.model.encode_image_detached(&record.scene.image)?;
    let size = record.scene.size();
    for (k, span) in caption.spans.iter().enumerate() {
        let map = span_map(&state.model, &features, size, &caption.tokens, span.range(), mode)?;
        let mask = threshold_mask(&map, quantile)?;
        let up = map.upsampled.as_ref().expect("span maps are upsampled");
        let stem = dir.join(format!("{caption_id}_{k}"));
        write_pgm(up, &stem.with_extension("pgm"))?;
        write_pbm(&mask, &stem.with_extension("pbm"))?;
        let words: Vec<&str> = caption.tokens[span.range()]
            .iter()
            .map(|&t| corpus.vocab.word(t).unwrap_or("?"))
            .collect();
        writeln!(out, "{caption_id}_{k}\t{}\tmask_pixels={}", words.join(" "), mask.count())?;
    }
    Ok(())
}

fn selfcheck(a: SelfcheckArgs, out: &mut dyn Write) -> CliResult {
    let m = Merge::new("selfcheck", a.config.as_deref())?;
    let d = SelfCheckOptions::default();
    let corrupt = match m.opt(a.corrupt_backward.clone(), "corrupt-backward")? {
        None => None,
        Some(name) => Some(
            *selfcheck::OPS
                .iter()
                .find(|op| **op == name)
                .ok_or_else(|| CliError::usage(format!("unknown op `{name}`")))?,
        ),
    };
    let opts = SelfCheckOptions {
        seed: m.or(a.seed, "seed", d.seed)?,
        points: m.or(a.points, "points", d.points)?,
        instances: m.or(a.instances, "instances", d.instances)?,
        corrupt,
    };
    let report = selfcheck::run(&opts)?;
    for line in report.lines() {
        writeln!(out, "{line}")?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(CliError::runtime(format!("failed checks: {}", names.join(", "))))
    }
}
