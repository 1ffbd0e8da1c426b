//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use panda_core::adapter::{pretrain_classifier, snapshot};
use panda_core::evaluation::{
    auxiliary_rows, make_synthetic, report, run_one_class_experiment, PipelineConfig, Psi0Source, Scorer, Variant,
    DEFAULT_FISHER_MINIBATCHES, DEFAULT_PRETRAIN_MINIBATCHES, NORMAL_LABEL,
};
use panda_core::objectives::{center_init, fisher_diagonal};
use panda_core::scoring::{
    center_distance_score, fill_normalizers, kmeans_fit, kmeans_score, knn_score, ses_score_with, whitening_apply,
    whitening_fit, NormalizerKind, SesConfig, NORMALIZER_VAL_FRACTION, WHITENING_EPSILON,
};
use panda_core::trainer::{self, Adapted, TrainConfig, TrainError};
use panda_core::{
    roc_auc, AdaptConfig, AdaptMode, AdapterParams, CenterVector, ClassifierHead, FeatureMatrix, Gallery, OEHead,
    SgdConfig, SyntheticSpec,
};

use crate::bench::{self, BenchConfig};
use crate::config::RunConfig;
use crate::io;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const PSI0_FILE: &str = "psi0.pndc";
pub const HEAD_FILE: &str = "head.pndc";
pub const FISHER_FILE: &str = "fisher.pndf";
pub const OE_HEAD_FILE: &str = "oe_head.pndc";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Parser)]
#[command(
    name = "panda",
    version,
    about = "Feature adaptation and scoring for one-class anomaly detection"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file whose entries act as flags placed before the
    /// ones on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Vec<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Pretrain the adapter on labeled auxiliary features; writes psi0, the
    /// classifier head and the Fisher diagonal.
    Pretrain(PretrainArgs),
    /// Adapt psi0 to normal training features; writes a checkpoint bank.
    Adapt(AdaptArgs),
    /// Score query features against a gallery.
    Score(ScoreArgs),
    /// ROC-AUC of a score file against labels.
    Eval(EvalArgs),
    /// Run the synthetic acceptance suite.
    BenchSynth(BenchArgs),
    /// Run the one-class protocol for every normal class.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PretrainArgs {
    /// Labeled auxiliary features (PNDF or CSV).
    #[arg(long, value_name = "FILE")]
    pub aux: PathBuf,
    /// Output directory for psi0.pndc, head.pndc and fisher.pndf.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Drop rows of this class and relabel the rest to 0..C.
    #[arg(long)]
    pub exclude_class: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_PRETRAIN_MINIBATCHES)]
    pub minibatches: usize,
    #[arg(long, default_value_t = trainer::BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = SgdConfig::PRETRAINING.learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = SgdConfig::PRETRAINING.momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = SgdConfig::PRETRAINING.weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = SgdConfig::PRETRAINING.clip_norm)]
    pub clip: f64,
    /// Minibatches used to estimate the Fisher diagonal.
    #[arg(long, default_value_t = DEFAULT_FISHER_MINIBATCHES)]
    pub fisher_minibatches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ewc,
    Unregularized,
    L2Uniform,
    Jo,
    Oe,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AdaptArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Ewc)]
    pub mode: ModeArg,
    /// Initial adapter checkpoint.
    #[arg(long, value_name = "FILE")]
    pub psi0: PathBuf,
    /// Normal training features.
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Output bank directory.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Fisher diagonal (required for ewc).
    #[arg(long, value_name = "FILE", required_if_eq("mode", "ewc"))]
    pub fisher: Option<PathBuf>,
    /// Pretraining head (required for jo).
    #[arg(long, value_name = "FILE", required_if_eq("mode", "jo"))]
    pub head: Option<PathBuf>,
    /// Labeled auxiliary features (required for jo).
    #[arg(long, value_name = "FILE", required_if_eq("mode", "jo"))]
    pub aux: Option<PathBuf>,
    /// Outlier-exposure features (required for oe).
    #[arg(long, value_name = "FILE", required_if_eq("mode", "oe"))]
    pub oe_file: Option<PathBuf>,
    /// Loss trace CSV [default: <out-dir>/trace.csv].
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// EWC strength.
    #[arg(long, default_value_t = AdaptConfig::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Weight of the compactness term in jo.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Number of minibatches [default: 7800 for ewc, l2-uniform and jo; 2300 for unregularized and oe].
    #[arg(long)]
    pub minibatches: Option<usize>,
    #[arg(long, default_value_t = trainer::BATCH_SIZE)]
    pub batch_size: usize,
    /// Learning rate [default: 0.01; 0.1 for oe].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = SgdConfig::ADAPTATION.momentum)]
    pub momentum: f64,
    /// Weight decay [default: 5e-5; 0 for oe].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = SgdConfig::ADAPTATION.clip_norm)]
    pub clip: f64,
    /// Minibatches between snapshots [default: five epochs].
    #[arg(long)]
    pub ckpt_interval: Option<usize>,
    /// Snapshots are kept while at most this many samples have been seen.
    #[arg(long, default_value_t = trainer::SES_SAMPLE_CAP)]
    pub sample_cap: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Center,
    Knn,
    Kmeans,
    Ses,
    OeLogit,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Center => Scorer::Center,
            ScorerArg::Knn => Scorer::Knn,
            ScorerArg::Kmeans => Scorer::KMeans,
            ScorerArg::Ses => Scorer::Ses,
            ScorerArg::OeLogit => Scorer::OeLogit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizerArg {
    /// Mean kNN distance of a held-out 10% of the training set.
    Knn,
    /// Mean training compactness.
    TrainLoss,
}

impl From<NormalizerArg> for NormalizerKind {
    fn from(n: NormalizerArg) -> Self {
        match n {
            NormalizerArg::Knn => NormalizerKind::KnnDistance,
            NormalizerArg::TrainLoss => NormalizerKind::TrainLoss,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["bank", "checkpoint"])))]
pub struct ScoreArgs {
    /// Bank directory written by `adapt`; scoring uses its final parameters.
    #[arg(long, value_name = "DIR")]
    pub bank: Option<PathBuf>,
    /// A single adapter checkpoint instead of a bank.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Normal training features used as the gallery.
    #[arg(long, value_name = "FILE")]
    pub gallery: PathBuf,
    /// Features to score.
    #[arg(long, value_name = "FILE")]
    pub query: PathBuf,
    /// Output score CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ScorerArg::Knn)]
    pub scorer: ScorerArg,
    /// Nearest neighbours for knn and ses.
    #[arg(long, default_value_t = panda_core::scoring::DEFAULT_K)]
    pub k: usize,
    /// Cluster count for kmeans.
    #[arg(long, default_value_t = panda_core::evaluation::DEFAULT_KMEANS_MEANS)]
    pub means: usize,
    /// Whiten features on the gallery before center, knn or kmeans scoring.
    #[arg(long)]
    pub whiten: bool,
    /// Eigenvalue floor for whitening.
    #[arg(long, default_value_t = WHITENING_EPSILON)]
    pub whiten_epsilon: f64,
    /// SES normalizer.
    #[arg(long, value_enum, default_value_t = NormalizerArg::Knn)]
    pub normalizer: NormalizerArg,
    /// Outlier-exposure head [default: <bank>/oe_head.pndc].
    #[arg(long, value_name = "FILE")]
    pub oe_head: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Score CSV (`index,score`).
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Label CSV (`index,label`) or a labeled feature file.
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Treat labels as class ids: anomalous means different from this class.
    /// Without it labels must be 0 (normal) or 1 (anomalous).
    #[arg(long)]
    pub normal_class: Option<u32>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[arg(long, default_value_t = bench::REFERENCE_SEED)]
    pub seed: u64,
    /// Adaptation learning rate on the benchmark.
    #[arg(long, default_value_t = bench::BENCH_LEARNING_RATE)]
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Unadapted,
    PandaEwc,
    PandaSes,
    FixedStop,
    Jo,
    Oe,
    Whitening,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Unadapted => Variant::Unadapted,
            VariantArg::PandaEwc => Variant::PandaEwc,
            VariantArg::PandaSes => Variant::PandaSes,
            VariantArg::FixedStop => Variant::FixedStop,
            VariantArg::Jo => Variant::JointOptimization,
            VariantArg::Oe => Variant::OutlierExposure,
            VariantArg::Whitening => Variant::Whitening,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
#[command(group(clap::ArgGroup::new("data").required(true).args(["train", "synthetic"])))]
pub struct ExperimentArgs {
    /// Labeled training features, all classes.
    #[arg(long, value_name = "FILE", requires = "test")]
    pub train: Option<PathBuf>,
    /// Labeled test features.
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Use the seeded synthetic benchmark (normal class 0) instead of files.
    #[arg(long)]
    pub synthetic: bool,
    /// Labeled auxiliary features [default: the non-target training rows].
    #[arg(long, value_name = "FILE")]
    pub aux: Option<PathBuf>,
    /// Outlier-exposure features [default: the auxiliary rows].
    #[arg(long, value_name = "FILE")]
    pub oe_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::PandaEwc)]
    pub variant: VariantArg,
    /// Scorer [default: ses for panda-ses, oe-logit for oe, knn otherwise].
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerArg>,
    /// Comma-separated normal classes [default: every training label].
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<u32>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = DEFAULT_PRETRAIN_MINIBATCHES)]
    pub pretrain_minibatches: usize,
    /// Adaptation minibatches [default: per variant, 7800 or 2300].
    #[arg(long)]
    pub minibatches: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long, default_value_t = SgdConfig::ADAPTATION.learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = AdaptConfig::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = panda_core::scoring::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = panda_core::evaluation::DEFAULT_KMEANS_MEANS)]
    pub means: usize,
    #[arg(long, value_enum, default_value_t = NormalizerArg::Knn)]
    pub normalizer: NormalizerArg,
    /// Summary table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure after successful argument parsing.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Engine(#[from] panda_core::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

type CliResult = Result<(), CliError>;

/// Splits `--config FILE` / `--config=FILE` out of the argument list.
fn take_config_paths(args: Vec<OsString>) -> (Vec<OsString>, Vec<PathBuf>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut paths = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => match it.next() {
                Some(p) => paths.push(PathBuf::from(p)),
                None => rest.push(a),
            },
            Some(s) if s.starts_with("--config=") => paths.push(PathBuf::from(&s["--config=".len()..])),
            _ => rest.push(a),
        }
    }
    (rest, paths)
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (mut args, config_paths) = take_config_paths(args);
    let mut command = Cli::command();

    if !config_paths.is_empty() {
        // the subcommand is the first argument after the program name that
        // is not an option
        let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
            eprintln!("error: --config needs a subcommand");
            return EXIT_USAGE;
        };
        let pos = pos + 1;
        let name = args[pos].to_string_lossy().into_owned();
        let Some(sub) = command.find_subcommand(&name) else {
            eprintln!("error: unknown subcommand `{name}`");
            return EXIT_USAGE;
        };
        let mut injected = Vec::new();
        for path in &config_paths {
            let text = match RunConfig::load(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_RUNTIME;
                }
            };
            match RunConfig::parse(&text).and_then(|c| c.to_args(sub)) {
                Ok(flags) => injected.extend(flags.into_iter().map(OsString::from)),
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_USAGE;
                }
            }
        }
        args.splice(pos + 1..pos + 1, injected);
    }

    let matches = match command.try_get_matches_from_mut(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Pretrain(a) => cmd_pretrain(&a),
        Cmd::Adapt(a) => cmd_adapt(&a),
        Cmd::Score(a) => cmd_score(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::BenchSynth(a) => cmd_bench_synth(&a),
        Cmd::Experiment(a) => cmd_experiment(&a),
    }
}

fn create_dir(dir: &Path) -> Result<(), io::IoError> {
    std::fs::create_dir_all(dir).map_err(|source| io::IoError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn num_classes(aux: &FeatureMatrix) -> Result<usize, CliError> {
    let labels = aux.require_labels()?;
    Ok(labels.iter().max().map_or(0, |&m| m as usize + 1))
}

pub fn cmd_pretrain(a: &PretrainArgs) -> CliResult {
    let mut aux = io::load_features_any(&a.aux)?;
    if let Some(c) = a.exclude_class {
        aux =
            auxiliary_rows(&aux, c)?.ok_or_else(|| CliError::Failed(format!("no auxiliary rows outside class {c}")))?;
    }
    let d = aux.d();
    let classes = num_classes(&aux)?;
    let sgd = SgdConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        clip_norm: a.clip,
    };
    let a0 = AdapterParams::glorot(&AdapterParams::default_widths(d), a.seed.wrapping_add(10))?;
    let h0 = ClassifierHead::glorot(d, classes, a.seed.wrapping_add(11))?;
    let pre = pretrain_classifier(a0, h0, &aux, sgd, a.minibatches, a.batch_size, a.seed.wrapping_add(12))?;
    let fisher = fisher_diagonal(
        &pre.adapter,
        &pre.head,
        &aux,
        a.fisher_minibatches,
        a.batch_size,
        a.seed.wrapping_add(13),
    )?;
    create_dir(&a.out_dir)?;
    io::save_adapter(&pre.adapter, a.out_dir.join(PSI0_FILE))?;
    io::save_head(&pre.head, a.out_dir.join(HEAD_FILE))?;
    io::save_fisher(&fisher, a.out_dir.join(FISHER_FILE))?;
    let acc = panda_core::adapter::accuracy(&pre.adapter, &pre.head, &aux)?;
    println!(
        "pretrained {:?} on {} rows, {} classes: final loss {:.4}, accuracy {:.3}",
        pre.adapter.widths(),
        aux.n(),
        classes,
        pre.loss_trace.last().copied().unwrap_or(f64::NAN),
        acc
    );
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn adapt_train_config(a: &AdaptArgs) -> TrainConfig {
    let (mode, base) = match a.mode {
        ModeArg::Ewc => (AdaptMode::Ewc, TrainConfig::ewc(a.seed)),
        ModeArg::L2Uniform => (AdaptMode::L2Uniform, TrainConfig::ewc(a.seed)),
        ModeArg::Jo => (AdaptMode::Unregularized, TrainConfig::ewc(a.seed)),
        ModeArg::Unregularized => (AdaptMode::Unregularized, TrainConfig::fixed_stop(a.seed)),
        ModeArg::Oe => (AdaptMode::Unregularized, TrainConfig::outlier_exposure(a.seed)),
    };
    TrainConfig {
        adapt: AdaptConfig {
            lambda: a.lambda,
            alpha: a.alpha,
            mode,
        },
        sgd: SgdConfig {
            learning_rate: a.lr.unwrap_or(base.sgd.learning_rate),
            momentum: a.momentum,
            weight_decay: a.weight_decay.unwrap_or(base.sgd.weight_decay),
            clip_norm: a.clip,
        },
        total_minibatches: a.minibatches.unwrap_or(base.total_minibatches),
        batch_size: a.batch_size,
        checkpoint_interval: a.ckpt_interval,
        sample_cap: Some(a.sample_cap),
        seed: a.seed,
    }
}

fn save_run(out_dir: &Path, trace: &Path, adapted: &Adapted) -> Result<(), io::IoError> {
    io::save_bank(&adapted.bank, &adapted.params, out_dir)?;
    io::save_trace(&adapted.run.loss_trace, trace)
}

pub fn cmd_adapt(a: &AdaptArgs) -> CliResult {
    let psi0 = io::load_adapter(&a.psi0)?;
    let train = io::load_features_any(&a.train)?;
    let cfg = adapt_train_config(a);
    let trace = a.trace.clone().unwrap_or_else(|| a.out_dir.join(TRACE_FILE));
    let result = match a.mode {
        ModeArg::Ewc | ModeArg::L2Uniform | ModeArg::Unregularized => {
            let fisher = match (&a.fisher, a.mode) {
                (Some(f), ModeArg::Ewc) => Some(io::load_fisher(f)?),
                _ => None,
            };
            trainer::adapt(&psi0, &train, fisher.as_ref(), &cfg).map(|r| (r, None, None))
        }
        ModeArg::Jo => {
            let head = io::load_head(a.head.as_ref().expect("required by the parser"))?;
            let aux = io::load_features_any(a.aux.as_ref().expect("required by the parser"))?;
            trainer::train_jo(&psi0, &head, &aux, &train, &cfg).map(|(r, h)| (r, Some(h), None))
        }
        ModeArg::Oe => {
            let oe = io::load_features_any(a.oe_file.as_ref().expect("required by the parser"))?;
            let h0 = OEHead::random(psi0.output_dim(), a.seed.wrapping_add(14));
            trainer::train_oe(&psi0, &h0, &train, &oe, &cfg).map(|(r, h)| (r, None, Some(h)))
        }
    };
    let (adapted, head, oe_head) = match result {
        Ok(r) => r,
        Err(TrainError::Aborted(ab)) => {
            // keep what was gathered before the failure
            let partial = Adapted {
                params: ab.params.clone(),
                bank: ab.bank.clone(),
                run: ab.run.clone(),
                center: None,
            };
            save_run(&a.out_dir, &trace, &partial)?;
            return Err(TrainError::Aborted(ab).into());
        }
        Err(e) => return Err(e.into()),
    };
    save_run(&a.out_dir, &trace, &adapted)?;
    if let Some(h) = head {
        io::save_head(&h, a.out_dir.join(HEAD_FILE))?;
    }
    if let Some(h) = oe_head {
        io::save_oe_head(&h, a.out_dir.join(OE_HEAD_FILE))?;
    }
    let last = adapted.run.loss_trace.last();
    println!(
        "adapted for {} minibatches: {} snapshots, final loss {}",
        adapted.run.loss_trace.len(),
        adapted.bank.len(),
        last.map_or("n/a".to_string(), |t| format!("{:.6}", t.loss))
    );
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn whiten_pair(g: FeatureMatrix, q: FeatureMatrix, eps: f64) -> Result<(FeatureMatrix, FeatureMatrix), CliError> {
    let t = whitening_fit(&g, eps)?;
    Ok((whitening_apply(&t, &g)?, whitening_apply(&t, &q)?))
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult {
    let gallery = io::load_features_any(&a.gallery)?;
    let query = io::load_features_any(&a.query)?;
    let scorer: Scorer = a.scorer.into();
    let (bank, params) = match (&a.bank, &a.checkpoint) {
        (Some(dir), _) => (Some(io::load_bank(dir)?), io::load_bank_final(dir)?),
        (None, Some(f)) => (None, io::load_adapter(f)?),
        (None, None) => unreachable!("the parser requires one of --bank and --checkpoint"),
    };
    if a.whiten && matches!(scorer, Scorer::Ses | Scorer::OeLogit) {
        return Err(CliError::Usage(format!(
            "--whiten does not apply to the {scorer} scorer"
        )));
    }
    let scores = match scorer {
        Scorer::Center | Scorer::Knn | Scorer::KMeans => {
            let (g, q) = (params.forward(&gallery)?, params.forward(&query)?);
            // the center is fixed by the initial extractor when the bank has it
            let psi0 = bank
                .as_ref()
                .map(|b| &b.checkpoints()[0])
                .filter(|c| c.minibatch_index == 0)
                .map(|c| &c.params);
            let (g, q) = if a.whiten {
                whiten_pair(g, q, a.whiten_epsilon)?
            } else {
                (g, q)
            };
            match scorer {
                Scorer::Center => {
                    let c = match psi0 {
                        Some(p) if !a.whiten => center_init(p, &gallery)?,
                        _ => CenterVector::new(g.column_mean())?,
                    };
                    center_distance_score(&c, &q)?
                }
                Scorer::Knn => knn_score(&Gallery::new(g), &q, a.k)?,
                _ => kmeans_score(&kmeans_fit(&Gallery::new(g), a.means, a.seed)?, &q)?,
            }
        }
        Scorer::Ses => {
            let mut bank = match bank {
                Some(b) => b,
                None => panda_core::CheckpointBank::from_checkpoints(vec![snapshot(&params, 0)], 1)?,
            };
            let center = match a.normalizer {
                NormalizerArg::TrainLoss => Some(center_init(&bank.checkpoints()[0].params, &gallery)?),
                NormalizerArg::Knn => None,
            };
            let cfg = SesConfig {
                kind: a.normalizer.into(),
                k: a.k,
                val_fraction: NORMALIZER_VAL_FRACTION,
                seed: a.seed,
                center,
            };
            let usable = fill_normalizers(&mut bank, &gallery, &cfg)?;
            eprintln!("{usable} of {} snapshots have a usable normalizer", bank.len());
            ses_score_with(&bank, &gallery, &query, &cfg)?
        }
        Scorer::OeLogit => {
            let path = match (&a.oe_head, &a.bank) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join(OE_HEAD_FILE),
                (None, None) => return Err(CliError::Usage("the oe-logit scorer needs --oe-head or --bank".into())),
            };
            io::load_oe_head(&path)?.scores(&params, &query)?
        }
    };
    io::save_scores(&scores, &a.out)?;
    println!(
        "scored {} queries with {scorer}; wrote {}",
        scores.len(),
        a.out.display()
    );
    Ok(())
}

fn load_any_labels(path: &Path) -> Result<Vec<u32>, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(io::load_labels(path)?)
    } else {
        let m = io::load_feature_file(path)?;
        Ok(m.require_labels()?.to_vec())
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let scores = io::load_scores(&a.scores)?;
    let labels = load_any_labels(&a.labels)?;
    let anomalous: Vec<bool> = match a.normal_class {
        Some(c) => labels.iter().map(|&l| l != c).collect(),
        None => labels
            .iter()
            .map(|&l| match l {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(CliError::Failed(format!(
                    "label {l} is not 0 or 1; pass --normal-class for class labels"
                ))),
            })
            .collect::<Result<_, _>>()?,
    };
    let auc = roc_auc(&scores, &anomalous)?;
    println!("AUC {auc:.6}");
    Ok(())
}

pub fn cmd_bench_synth(a: &BenchArgs) -> CliResult {
    let results = bench::run_all(&BenchConfig {
        seed: a.seed,
        learning_rate: a.lr,
    });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} criteria passed", results.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{failed} of {} criteria failed",
            results.len()
        )))
    }
}

pub fn cmd_experiment(a: &ExperimentArgs) -> CliResult {
    let (train, test, mut aux) = if a.synthetic {
        let data = make_synthetic(&SyntheticSpec {
            seed: a.seed,
            ..SyntheticSpec::default()
        })?;
        (data.train, data.test, Some(data.aux))
    } else {
        let train = io::load_features_any(a.train.as_ref().expect("required by the parser"))?;
        let test = io::load_features_any(a.test.as_ref().expect("required by the parser"))?;
        (train, test, None)
    };
    if let Some(p) = &a.aux {
        aux = Some(io::load_features_any(p)?);
    }
    let oe = a.oe_file.as_ref().map(io::load_features_any).transpose()?;
    let classes: Vec<u32> = if !a.classes.is_empty() {
        a.classes.clone()
    } else if a.synthetic {
        vec![NORMAL_LABEL]
    } else {
        let mut c = train.require_labels()?.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let base = PipelineConfig {
        variant: a.variant.into(),
        scorer: a.scorer.map(Into::into),
        psi0: Psi0Source::Pretrain {
            minibatches: a.pretrain_minibatches,
        },
        aux,
        oe,
        adapt_sgd: SgdConfig {
            learning_rate: a.lr,
            ..SgdConfig::ADAPTATION
        },
        lambda: a.lambda,
        alpha: a.alpha,
        minibatches: a.minibatches,
        k: a.k,
        kmeans_means: a.means,
        normalizer: a.normalizer.into(),
        seed: a.seed,
        ..PipelineConfig::default()
    };

    let jobs = a.jobs.max(1).min(classes.len());
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; classes.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&class) = classes.get(i) else { break };
                let r = run_one_class_experiment(&train, &test, class, &base);
                if let Ok(rep) = &r {
                    eprintln!("class {class}: AUC {:.4}", rep.auc);
                }
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let reports = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every class was run"))
        .collect::<Result<Vec<_>, _>>()?;
    let table = report(&reports)?;
    print!("{}", table.to_text());
    if let Some(path) = &a.csv {
        std::fs::write(path, table.to_csv()).map_err(|source| io::IoError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}
