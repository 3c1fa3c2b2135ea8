//! The `cctshp` command line: training runs, probing and cluster
//! statistics, committee evaluation, latency and synthetic data.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Every run directory gets a `run.json` holding the full configuration and
//! its hash; JSON artifacts repeat the hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::cluster::{self, ClusterReport, StatsRow};
use crate::committee::{self, PredictionSet};
use crate::data::{self, AugmentConfig, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::build_model;
use crate::probe::{self, FieldOptions, FieldProbe, ProbePoint, ProbeTrainOptions, Tap};
use crate::synthetic::{write_synthetic_cifar, SyntheticConfig};
use crate::trainer::{self, FreezeMask, OptimizerConfig, Schedule, TrainOptions, Trainer};

/// Environment variable consulted when `--data` is absent.
pub const DATA_ENV: &str = "CCTSHP_DATA";

#[derive(Debug, Parser)]
#[command(
    name = "cctshp",
    version,
    about = "Compact convolutional transformers with single-head probing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, history CSV and validation fields.
    Train(TrainArgs),
    /// Probe a trained model: field matrices, clusters and block statistics.
    Probe(ProbeArgs),
    /// Evaluate a soft committee from prediction dumps.
    Committee(CommitteeArgs),
    /// Print layer latency and parameter count of an architecture.
    Latency(LatencyArgs),
    /// Write a synthetic dataset in the CIFAR binary layout.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Dataset file or directory (falls back to $CCTSHP_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "cifar100")]
    pub variant: String,
    /// Inclusive label range or list, e.g. `0..9` or `3,5,7`.
    #[arg(long)]
    pub labels: Option<String>,
    /// Average-pool factor applied to every image.
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
    /// Keep at most this many training images per label.
    #[arg(long)]
    pub train_per_label: Option<usize>,
    /// Keep at most this many validation images per label.
    #[arg(long)]
    pub val_per_label: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Preset name (see `latency --list`) or path to a spec file.
    #[arg(long)]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// `cosine` or `linear:Q:DT`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Disable Mixup, CutMix and Random Erasing.
    #[arg(long)]
    pub no_augment: bool,
    /// Train only tensors matching these dotted prefixes.
    #[arg(long, value_delimiter = ',')]
    pub train_only: Vec<String>,
    /// Sequential gradient accumulation; reruns are bit-identical.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 keeps only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Blocks to probe (1-based); all blocks when absent.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<usize>,
    #[arg(long, default_value = "post_attention")]
    pub tap: String,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6")]
    pub theta: Vec<f64>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub probe_batch_size: Option<usize>,
    /// Also emit single-node matrices and their per-head means.
    #[arg(long)]
    pub nodes: bool,
    /// Mask features before sequence pooling as well.
    #[arg(long)]
    pub silence_before_sp: bool,
    /// Probe classifier without a bias term.
    #[arg(long)]
    pub no_fc_bias: bool,
    /// Heatmap pixels per matrix element.
    #[arg(long, default_value_t = 4)]
    pub cell: u32,
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe even if the checkpoint's run configuration does not match.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value = "runs/probe")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CommitteeArgs {
    /// Prediction dumps (`index,f0,...`), one per member.
    #[arg(long = "dump", required = true)]
    pub dumps: Vec<PathBuf>,
    /// Truth labels, one per line.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value = "committee.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LatencyArgs {
    /// Preset name or spec file.
    pub arch: Option<String>,
    /// List the preset names.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cifar10")]
    pub variant: String,
    #[arg(long, default_value_t = 20)]
    pub train_per_label: usize,
    #[arg(long, default_value_t = 10)]
    pub val_per_label: usize,
    #[arg(long, default_value_t = 30.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Configuration archived beside every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub spec: Option<ArchitectureSpec>,
    pub optimizer: Option<OptimizerConfig>,
    pub train_options: Option<TrainOptions>,
    pub args: serde_json::Value,
    pub data_path: Option<PathBuf>,
}

impl RunConfig {
    /// Hash of the configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("run config serializes");
        if let Some(args) = doc.get_mut("args").and_then(|a| a.as_object_mut()) {
            args.remove("out");
        }
        let text = doc.to_string();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `run.json` (`{"config_hash": .., "config": ..}`) into `dir`.
    pub fn archive(&self, dir: &Path) -> Result<String> {
        let hash = self.hash();
        let doc = serde_json::json!({ "config_hash": hash, "config": self });
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(hash)
    }
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Probe(a) => cmd_probe(&a).map(|_| ()),
        Command::Committee(a) => cmd_committee(&a).map(|_| ()),
        Command::Latency(a) => {
            print!("{}", cmd_latency(&a)?);
            Ok(())
        }
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
    }
}

/// Preset name or path to a `key = value` spec file.
pub fn resolve_arch(arch: &str) -> Result<ArchitectureSpec> {
    let path = Path::new(arch);
    if path.is_file() {
        ArchitectureSpec::from_config_str(&fs::read_to_string(path)?)
    } else {
        ArchitectureSpec::preset(arch)
    }
}

fn dataset_root(args: &DataArgs) -> CliResult<PathBuf> {
    args.data
        .clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("missing dataset path: pass --data or set {DATA_ENV}")))
}

fn prepare(ds: Dataset, args: &DataArgs, per_label: Option<usize>) -> Result<Dataset> {
    let mut ds = match &args.labels {
        Some(spec) => ds.filter_labels(&data::parse_label_subset(spec)?)?,
        None => ds,
    };
    if let Some(n) = per_label {
        ds = ds.take_per_label(n);
    }
    if args.downscale > 1 {
        ds = ds.downscale(args.downscale)?;
    }
    ds.normalized()
}

/// Loads and preprocesses the training and validation splits.
pub fn load_splits(args: &DataArgs) -> CliResult<(PathBuf, Dataset, Dataset)> {
    let root = dataset_root(args)?;
    let variant: CifarVariant = args
        .variant
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let train = data::load_cifar(&root, variant, Split::Train)?;
    let val = data::load_cifar(&root, variant, Split::Validation)?;
    let train = prepare(train, args, args.train_per_label)?;
    let val = prepare(val, args, args.val_per_label)?;
    Ok((root, train, val))
}

fn check_fit(spec: &ArchitectureSpec, ds: &Dataset) -> Result<()> {
    if spec.num_labels != ds.num_labels {
        return Err(Error::config(
            "labels",
            format!(
                "architecture has {} labels, dataset has {}",
                spec.num_labels, ds.num_labels
            ),
        ));
    }
    if spec.input_size != ds.size || spec.input_channels != ds.channels {
        return Err(Error::config(
            "downscale",
            format!(
                "architecture expects {}px images, dataset has {}px",
                spec.input_size, ds.size
            ),
        ));
    }
    Ok(())
}

fn write_predictions(dir: &Path, name: &str, logits: Vec<f64>, labels: usize, truth: &[usize]) -> Result<()> {
    let set = PredictionSet::new(name, logits, labels)?;
    set.write_csv(dir.join(format!("{name}.csv")))?;
    committee::write_truth(dir.join(format!("{name}_truth.csv")), truth)
}

/// Outputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub final_val_acc: f64,
    pub final_train_acc: f64,
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<TrainOutcome> {
    let (root, train, val) = load_splits(&a.data)?;
    let mut opt = OptimizerConfig::main_preset();
    if let Some(v) = a.epochs {
        opt.epochs = v;
    }
    if let Some(v) = a.batch_size {
        opt.batch_size = v;
    }
    if let Some(v) = a.lr {
        opt.lr = v;
    }
    if let Some(v) = a.weight_decay {
        opt.weight_decay = v;
    }
    if let Some(s) = &a.schedule {
        opt.schedule = s.parse::<Schedule>()?;
    }
    let options = TrainOptions {
        augment: if a.no_augment {
            AugmentConfig::disabled()
        } else {
            AugmentConfig::default()
        },
        strict: a.strict,
        seed: a.seed,
        eval_train: true,
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = trainer::load_checkpoint(p)?;
            Trainer::from_checkpoint(ckpt, opt.clone(), options.clone())?
        }
        None => {
            let spec = resolve_arch(&a.arch)?;
            let model = build_model(&spec, a.seed)?;
            let freeze = if a.train_only.is_empty() {
                FreezeMask::Nothing
            } else {
                FreezeMask::AllExcept(a.train_only.clone())
            };
            Trainer::new(model, &spec, opt.clone(), &freeze, options.clone())?
        }
    };
    check_fit(&trainer.spec, &train)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let cfg = RunConfig {
        command: "train".into(),
        spec: Some(trainer.spec.clone()),
        optimizer: Some(opt),
        train_options: Some(options),
        args: serde_json::to_value(a).map_err(Error::from)?,
        data_path: Some(root),
    };
    let hash = cfg.archive(&a.out)?;
    fs::write(a.out.join("spec.cfg"), trainer.spec.to_config_string()).map_err(Error::from)?;

    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.run_epoch(&train, Some(&val))?;
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.4}  train {:.4}  val {:.4}",
            rec.epoch, rec.lr, rec.loss, rec.train_acc, rec.val_acc
        );
        if a.checkpoint_every > 0 && trainer.epoch % a.checkpoint_every == 0 {
            trainer::save_checkpoint(
                &trainer.checkpoint(),
                a.out.join(format!("checkpoint_e{}.bin", trainer.epoch)),
            )?;
        }
    }
    let ckpt_path = a.out.join("checkpoint.bin");
    trainer::save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    trainer::write_history_csv(a.out.join("history.csv"), &trainer.history)?;
    let logits = trainer::predict_logits(&trainer.model, &trainer.spec, &val)?;
    write_predictions(&a.out, "val_fields", logits, trainer.spec.num_labels, &val.labels)?;
    let last = trainer.history.last().copied();
    Ok(TrainOutcome {
        dir: a.out.clone(),
        config_hash: hash,
        checkpoint: ckpt_path,
        final_val_acc: last.map_or(f64::NAN, |r| r.val_acc),
        final_train_acc: last.map_or(f64::NAN, |r| r.train_acc),
    })
}

/// Refuses a checkpoint whose sibling `run.json` describes another spec.
fn check_run_config(ckpt_path: &Path, spec: &ArchitectureSpec, force: bool) -> CliResult<()> {
    let Some(run_json) = ckpt_path.parent().map(|d| d.join("run.json")).filter(|p| p.is_file()) else {
        return Ok(());
    };
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&run_json).map_err(Error::from)?).map_err(Error::from)?;
    let archived: Option<ArchitectureSpec> = doc
        .get("config")
        .and_then(|c| c.get("spec"))
        .and_then(|s| serde_json::from_value(s.clone()).ok());
    match archived {
        Some(s) if s.hash() != spec.hash() && !force => Err(CliError::Runtime(Error::config(
            "checkpoint",
            format!(
                "checkpoint spec hash {:016x} does not match run configuration {:016x}; pass --force to override",
                spec.hash(),
                s.hash()
            ),
        ))),
        _ => Ok(()),
    }
}

/// Results of one probed block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockProbe {
    pub block: usize,
    pub attn_acc: f64,
    /// Cluster reports per θ, one per head.
    pub reports: BTreeMap<String, Vec<ClusterReport>>,
    pub stats: BTreeMap<String, Option<StatsRow>>,
    pub head_scales: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub blocks: Vec<BlockProbe>,
    /// Statistics files, one per θ.
    pub stats_files: Vec<PathBuf>,
}

pub fn theta_tag(theta: f64) -> String {
    format!("{theta}")
}

pub fn cmd_probe(a: &ProbeArgs) -> CliResult<ProbeOutcome> {
    let tap: Tap = a.tap.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    for &t in &a.theta {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Usage(format!("--theta {t} is outside (0, 1]")));
        }
    }
    let ckpt = trainer::load_checkpoint(&a.checkpoint)?;
    let spec = ckpt.spec.clone();
    check_run_config(&a.checkpoint, &spec, a.force)?;
    let (root, train, val) = load_splits(&a.data)?;
    check_fit(&spec, &train)?;
    let blocks: Vec<usize> = if a.blocks.is_empty() {
        (1..=spec.num_blocks).collect()
    } else {
        a.blocks.clone()
    };
    for &m in &blocks {
        ProbePoint::new(m, tap).validate(&spec)?;
    }

    let mut popt = OptimizerConfig::probe_preset();
    if let Some(v) = a.probe_epochs {
        popt.epochs = v;
    }
    if let Some(v) = a.probe_lr {
        popt.lr = v;
    }
    if let Some(v) = a.probe_batch_size {
        popt.batch_size = v;
    }
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let cfg = RunConfig {
        command: "probe".into(),
        spec: Some(spec.clone()),
        optimizer: Some(popt.clone()),
        train_options: None,
        args: serde_json::to_value(a).map_err(Error::from)?,
        data_path: Some(root),
    };
    let hash = cfg.archive(&a.out)?;
    let fingerprint = ckpt.model.fingerprint();
    let fopts = FieldOptions {
        silence_before_sp: a.silence_before_sp,
    };

    let mut results = Vec::new();
    for &m in &blocks {
        let point = ProbePoint::new(m, tap);
        let (extractor, mut head) =
            probe::attach_probe_head(&ckpt.model, &spec, point, a.seed ^ m as u64, !a.no_fc_bias)?;
        let popts = ProbeTrainOptions {
            seed: a.seed.wrapping_add(m as u64),
            strict: a.strict,
        };
        let hist = probe::train_probe_head(&extractor, &mut head, &train, None, &popt, popts)?;
        let acc = probe::probe_accuracy(&extractor, &head, &val)?;
        eprintln!("block {m}: probe accuracy {acc:.4}");
        let dir = a.out.join(format!("m{m}"));
        fs::create_dir_all(&dir).map_err(Error::from)?;
        trainer::write_history_csv(dir.join("probe_history.csv"), &hist)?;

        let fp = FieldProbe::new(&extractor, &head, &val, fopts)?;
        let heads = fp.all_heads()?;
        for (h, mat) in heads.iter().enumerate() {
            mat.write(&dir, &format!("head{h}"))?;
            mat.write_heatmap(dir.join(format!("head{h}.png")), a.cell)?;
        }
        if a.nodes {
            let (n_heads, _) = extractor.heads();
            for h in 0..n_heads {
                let nodes = fp.nodes_of_head(h)?;
                for mat in &nodes {
                    if let probe::Subject::Node { node, .. } = mat.subject {
                        mat.write(&dir, &format!("node{node}"))?;
                    }
                }
                let hp = probe::hp_from_snp(&nodes)?;
                hp.write(&dir, &format!("head{h}_from_nodes"))?;
                hp.write_heatmap(dir.join(format!("head{h}_from_nodes.png")), a.cell)?;
            }
        }

        let mut reports = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for &theta in &a.theta {
            let rs: Vec<ClusterReport> = heads
                .iter()
                .map(|mat| cluster::clip(mat, theta).map(|b| cluster::extract_clusters(&b)))
                .collect::<Result<_>>()?;
            let tag = theta_tag(theta);
            let doc = serde_json::json!({ "config_hash": hash, "block": m, "theta": theta, "heads": rs });
            fs::write(
                dir.join(format!("clusters_theta{tag}.json")),
                serde_json::to_string_pretty(&doc).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
            let row = match cluster::block_statistics(&rs, spec.num_labels, acc, m) {
                Ok(r) => Some(r),
                Err(Error::Numeric(msg)) => {
                    eprintln!("block {m}, theta {tag}: {msg}");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            stats.insert(tag.clone(), row);
            reports.insert(tag, rs);
        }
        results.push(BlockProbe {
            block: m,
            attn_acc: acc,
            reports,
            stats,
            head_scales: heads.iter().map(|h| h.scale).collect(),
        });
    }
    if ckpt.model.fingerprint() != fingerprint {
        return Err(CliError::Runtime(Error::Corrupt("probing modified the model".into())));
    }

    let mut stats_files = Vec::new();
    for &theta in &a.theta {
        let tag = theta_tag(theta);
        let rows: Vec<StatsRow> = results.iter().filter_map(|b| b.stats[&tag]).collect();
        let p = a.out.join(format!("stats_theta{tag}.csv"));
        cluster::write_stats_csv(&p, &rows)?;
        stats_files.push(p);
    }
    let summary = serde_json::json!({ "config_hash": hash, "model_hash": fingerprint, "blocks": results });
    fs::write(
        a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    Ok(ProbeOutcome {
        dir: a.out.clone(),
        config_hash: hash,
        blocks: results,
        stats_files,
    })
}

pub fn cmd_committee(a: &CommitteeArgs) -> CliResult<committee::CommitteeReport> {
    let members: Vec<PredictionSet> = a.dumps.iter().map(PredictionSet::read_csv).collect::<Result<_>>()?;
    let truth = committee::read_truth(&a.truth)?;
    let report = committee::committee_report(&members, &truth)?;
    let cfg = RunConfig {
        command: "committee".into(),
        spec: None,
        optimizer: None,
        train_options: None,
        args: serde_json::to_value(a).map_err(Error::from)?,
        data_path: None,
    };
    let doc = serde_json::json!({ "config_hash": cfg.hash(), "report": report });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&doc).map_err(Error::from)?).map_err(Error::from)?;
    println!(
        "members {}  mean individual {:.4}  committee {:.4}  mean agreement {:.4}",
        report.members.len(),
        report.mean_individual_accuracy,
        report.committee_accuracy,
        report.mean_agreement
    );
    Ok(report)
}

pub fn cmd_latency(a: &LatencyArgs) -> CliResult<String> {
    if a.list {
        return Ok(crate::arch::PRESETS.iter().map(|p| format!("{p}\n")).collect());
    }
    let name = a
        .arch
        .as_deref()
        .ok_or_else(|| CliError::Usage("latency needs an architecture".into()))?;
    let spec = resolve_arch(name)?;
    Ok(format!(
        "layers {}\nparameters {}\n",
        spec.layer_latency(),
        spec.parameter_count()
    ))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    let variant: CifarVariant = a.variant.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let cfg = SyntheticConfig {
        variant,
        train_per_label: a.train_per_label,
        val_per_label: a.val_per_label,
        noise: a.noise,
        seed: a.seed,
    };
    Ok(write_synthetic_cifar(&a.out, &cfg)?)
}
