//! Command-line surface: configuration, run directories and the
//! subcommands tying training, evaluation and the bound probes together.
//!
//! Every subcommand prints one JSON record on success. Failures produce a
//! JSON error record `{"error": <code>, "message": ...}` and a nonzero exit.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bounds::{self, BoundConstants, BoundsLog, BoundsRow, RiskProbeInputs, SampleCloud};
use crate::checkpoint;
use crate::data::{self, Dataset, IdxSources, LoadOptions};
use crate::error::{ensure, Error, Result};
use crate::evalsuite::{self, MetricRecord, MetricsSink};
use crate::grid;
use crate::latent::{self, PriorConfig};
use crate::losses::LossReport;
use crate::nets::{self, ArchitectureSpec, ModelBundle};
use crate::probe::{Probe, ProbeSpec};
use crate::replay::{self, ReplaySnapshot};
use crate::seed;
use crate::synth;
use crate::tape::Mat;
use crate::trainer::{self, EpochContext, Hooks, Mode, TaskData, TrainConfig, TrainState};

pub const RUN_MANIFEST: &str = "manifest.toml";

/// Everything a training run is configured by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub arch: ArchitectureSpec,
    pub train: TrainConfig,
    pub semi: SemiSection,
    pub eval: EvalSection,
    pub bounds: BoundsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            arch: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            semi: SemiSection::default(),
            eval: EvalSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub name: String,
    pub out_dir: PathBuf,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Falls back to the data-root environment variable.
    pub data_root: Option<PathBuf>,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: PathBuf::from("runs/run"),
            seed: 0,
            tasks: vec!["mnist".into(), "fashion".into()],
            data_root: None,
            max_train: None,
            max_test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSection {
    pub n_labelled: usize,
}

impl Default for SemiSection {
    fn default() -> Self {
        Self { n_labelled: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Record per-task test accuracy (or reconstruction error) every epoch.
    pub per_epoch: bool,
    /// Cap on test images used by the per-epoch metrics.
    pub per_epoch_test: usize,
    pub replay_samples: usize,
    pub probe: ProbeSpec,
    pub grid_images: usize,
    pub interp_steps: usize,
    pub traverse_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            per_epoch: true,
            per_epoch_test: 1000,
            replay_samples: 2000,
            probe: ProbeSpec::default(),
            grid_images: 32,
            interp_steps: 10,
            traverse_steps: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsSection {
    pub enabled: bool,
    /// Generated images the risk probe is trained on.
    pub train_samples: usize,
    /// Size of the real and generated evaluation clouds.
    pub eval_samples: usize,
    pub probe: ProbeSpec,
    pub constants: BoundConstants,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            train_samples: 1000,
            eval_samples: 500,
            probe: ProbeSpec::linear(10, 1234),
            constants: BoundConstants::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.run.tasks.is_empty(), || "at least one task is required".into())?;
        ensure(!self.run.name.is_empty(), || "run name must not be empty".into())?;
        self.arch.validate()?;
        self.train.validate()?;
        self.bounds.constants.validate()?;
        ensure(self.arch.num_domains == 1, || "arch.num_domains must be 1 at the start of a run".into())?;
        ensure(self.arch.class_conditional == self.train.mode.uses_labels(), || {
            "arch.class_conditional must be true exactly for the labelled modes".into()
        })?;
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.run.data_root.clone().unwrap_or_else(data::default_root)
    }
}

/// Seeds fanned out from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    #[serde(with = "seed_str")]
    pub master: u64,
    #[serde(with = "seed_str")]
    pub train: u64,
    #[serde(with = "seed_str")]
    pub split: u64,
    #[serde(with = "seed_str")]
    pub eval: u64,
    #[serde(with = "seed_str")]
    pub bounds: u64,
}

/// TOML integers are signed, so full-width seeds are stored as strings.
mod seed_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            train: seed::derive(master, "train", 0),
            split: seed::derive(master, "split", 0),
            eval: seed::derive(master, "eval", 0),
            bounds: seed::derive(master, "bounds", 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub status: RunStatus,
    pub started: String,
    pub finished: Option<String>,
    pub tasks: Vec<String>,
    pub seeds: Seeds,
    pub config: RunConfig,
}

impl RunManifest {
    /// Write via a temporary file and rename.
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        let tmp = run_dir.join(format!("{RUN_MANIFEST}.tmp"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let dest = run_dir.join(RUN_MANIFEST);
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "lvaegan", version, about = "Lifelong VAE-GAN training, evaluation and bound probes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a task sequence and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Interpolate between two test images.
    Interpolate(InterpolateArgs),
    /// Traverse one latent coordinate from lo to hi.
    Traverse(TraverseArgs),
    /// Sample a grid from a replay snapshot.
    ReplaySample(ReplaySampleArgs),
    /// Probe the generalization bound on a stored snapshot.
    Bounds(BoundsArgs),
    /// Convert a dataset into the task directory layout.
    ImportData(ImportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated task names.
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// generative, none, or buffer:<n>
    #[arg(long)]
    pub replay: Option<String>,
    #[arg(long)]
    pub n_labelled: Option<usize>,
    #[arg(long)]
    pub max_train: Option<usize>,
    /// Generic override, `key.path=value` (value parsed as TOML).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CkptArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Output directory; defaults to the run's eval/ directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CkptArgs,
    /// Comma-separated task names, in training order.
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub max_test: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub replay_samples: usize,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub common: CkptArgs,
    #[arg(long, default_value = "mnist")]
    pub task: String,
    /// Task of the second endpoint; defaults to `task`.
    #[arg(long)]
    pub task2: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub from: usize,
    #[arg(long, default_value_t = 1)]
    pub to: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[command(flatten)]
    pub common: CkptArgs,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value = "mnist")]
    pub task: String,
    /// Number of test images, one row each.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    #[arg(long, default_value_t = evalsuite::TRAVERSE_LO, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = evalsuite::TRAVERSE_HI, allow_hyphen_values = true)]
    pub hi: f64,
}

#[derive(Debug, Args)]
pub struct ReplaySampleArgs {
    /// Snapshot directory (or a bundle checkpoint, snapshotted on the fly).
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "replay.png")]
    pub out: PathBuf,
    /// Also write the images and pseudo-labels as `.npy` next to the PNG.
    #[arg(long)]
    pub arrays: bool,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Real task whose test set the snapshot is compared against.
    #[arg(long, default_value = "mnist")]
    pub task: String,
    /// 1-based domain to generate from.
    #[arg(long, default_value_t = 1)]
    pub domain: usize,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta_conf: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a_prime: f64,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// idx or synth-fashion
    #[arg(long)]
    pub format: String,
    /// Directory holding the IDX files (idx format).
    #[arg(long)]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Config merging

fn set_key(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a table")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty key {key:?}")))
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn replay_value(raw: &str) -> Result<toml::Value> {
    match raw {
        "generative" | "none" => Ok(toml::Value::String(raw.into())),
        other => {
            let n = other
                .strip_prefix("buffer:")
                .and_then(|n| n.parse::<i64>().ok())
                .ok_or_else(|| Error::Config(format!("unknown replay kind {other:?}")))?;
            let mut t = toml::Table::new();
            t.insert("buffer".into(), toml::Value::Integer(n));
            Ok(toml::Value::Table(t))
        }
    }
}

/// Merge the config file with flag overrides.
pub fn merge_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut value = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    // validate the file on its own before applying overrides
    let base: RunConfig = value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut overrides: Vec<(String, toml::Value)> = Vec::new();
    if let Some(m) = &args.mode {
        let mode: Mode = m.parse()?;
        overrides.push(("train.mode".into(), toml::Value::try_from(mode).map_err(|e| Error::Config(e.to_string()))?));
        if base.arch.class_conditional != mode.uses_labels() && !args.set.iter().any(|s| s.starts_with("arch.class_conditional=")) {
            overrides.push(("arch.class_conditional".into(), toml::Value::Boolean(mode.uses_labels())));
        }
    }
    if let Some(t) = &args.tasks {
        let list = t.split(',').filter(|s| !s.is_empty()).map(|s| toml::Value::String(s.trim().into())).collect();
        overrides.push(("run.tasks".into(), toml::Value::Array(list)));
    }
    if let Some(v) = args.epochs {
        overrides.push(("train.epochs".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = args.seed {
        overrides.push(("run.seed".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = &args.out {
        overrides.push(("run.out_dir".into(), toml::Value::String(v.display().to_string())));
    }
    if let Some(v) = &args.data_root {
        overrides.push(("run.data_root".into(), toml::Value::String(v.display().to_string())));
    }
    if let Some(v) = args.lr {
        overrides.push(("train.adam.lr".into(), toml::Value::Float(v)));
    }
    if let Some(v) = args.batch_size {
        overrides.push(("train.batch_size".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = &args.replay {
        overrides.push(("train.replay".into(), replay_value(v)?));
    }
    if let Some(v) = args.n_labelled {
        overrides.push(("semi.n_labelled".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = args.max_train {
        overrides.push(("run.max_train".into(), toml::Value::Integer(v as i64)));
    }
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        overrides.push((k.trim().into(), parse_value(v.trim())));
    }
    for (k, v) in overrides {
        set_key(&mut value, &k, v)?;
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Training run

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("task_{t}"))
    }

    pub fn snapshot(&self, t: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("task_{t}"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn bounds(&self) -> PathBuf {
        self.root.join("bounds.csv")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }
}

/// Loaded task with its test split.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_tasks(root: &Path, names: &[String], shape: nets::ImageShape, max_train: Option<usize>, max_test: Option<usize>) -> Result<Vec<LoadedTask>> {
    let opts = LoadOptions {
        target: Some((shape.height, shape.width)),
        max_train,
        max_test,
    };
    names
        .iter()
        .map(|name| {
            let (train, test) = data::load_task(&root.join(name), &opts)?;
            ensure(train.shape.channels == shape.channels, || {
                format!("task {name} has {} channels, architecture expects {}", train.shape.channels, shape.channels)
            })?;
            Ok(LoadedTask {
                name: name.clone(),
                train,
                test,
            })
        })
        .collect()
}

fn head(d: &Dataset, n: usize) -> Dataset {
    d.head(n.min(d.len()))
}

/// Generated images of one domain (`a = e_domain`) with pseudo-labels.
pub fn sample_domain(
    generator: &nets::Network,
    arch: &ArchitectureSpec,
    prior: &PriorConfig,
    domain: usize,
    n: usize,
    seed_value: u64,
) -> Result<(Mat, Option<Vec<usize>>)> {
    ensure(domain >= 1 && domain <= arch.num_domains, || format!("domain {domain} out of range"))?;
    let z = latent::sample_continuous_prior(n, arch.dim_z, seed::derive(seed_value, "z", 0))?;
    let mut a = Mat::zeros((n, arch.num_domains));
    a.column_mut(domain - 1).fill(1.0);
    let c = if arch.class_conditional {
        Some(latent::sample_categorical_prior(n, &prior.class_probs, seed::derive(seed_value, "c", 0))?)
    } else {
        None
    };
    let x = nets::generate_with(generator, arch, &z, &a, c.as_ref())?;
    Ok((x, c.as_ref().map(nets::argmax_rows)))
}

/// Risk tracking on task 1: probe trained on generated task-1 images,
/// risks on real test and generated held-out images.
pub fn risk_report(
    generator: &nets::Network,
    arch: &ArchitectureSpec,
    prior: &PriorConfig,
    real_train: &Dataset,
    real_test: &Dataset,
    section: &BoundsSection,
    seed_value: u64,
) -> Result<bounds::BoundReport> {
    let n_train = section.train_samples;
    let n_eval = section.eval_samples;
    let (gx, gy) = sample_domain(generator, arch, prior, 1, n_train + n_eval, seed_value)?;
    let gy = gy.ok_or_else(|| Error::ModeMismatch("unsupervised".into()))?;
    let gen_train = SampleCloud::new(gx.slice(ndarray::s![..n_train, ..]).to_owned(), Some(gy[..n_train].to_vec()), "generated-train")?;
    let gen_test = SampleCloud::new(gx.slice(ndarray::s![n_train.., ..]).to_owned(), Some(gy[n_train..].to_vec()), "generated")?;
    let rt = head(real_test, n_eval);
    let real_test = SampleCloud::new(rt.images, Some(rt.labels), "real")?;
    let rtr = head(real_train, n_train);
    let real_train = SampleCloud::new(rtr.images, Some(rtr.labels), "real-train")?;
    bounds::risk_probe(
        &RiskProbeInputs {
            real_test: &real_test,
            generated_train: &gen_train,
            generated_test: &gen_test,
            real_train: &real_train,
        },
        arch.image_shape,
        arch.num_classes,
        &section.probe,
        section.constants,
        seed_value,
    )
}

struct RunHooks<'a> {
    cfg: &'a RunConfig,
    seeds: Seeds,
    dir: &'a RunDir,
    tasks: &'a [LoadedTask],
    metrics: MetricsSink,
    bounds: BoundsLog,
    losses: csv::Writer<fs::File>,
}

impl RunHooks<'_> {
    fn record(&mut self, task: usize, epoch: usize, name: impl Into<String>, value: f64, artifact: &str) -> Result<()> {
        self.metrics.push(MetricRecord {
            run: self.cfg.run.name.clone(),
            task,
            epoch,
            name: name.into(),
            value,
            seed: self.seeds.eval,
            artifact: artifact.to_string(),
        })
    }
}

impl Hooks for RunHooks<'_> {
    fn on_epoch_end(&mut self, ctx: &EpochContext<'_>) -> Result<()> {
        let (t, e) = (ctx.task, ctx.global_epoch);
        for (name, v) in LossReport::FIELDS.iter().zip(ctx.mean_report.values()) {
            self.record(t, e, format!("loss_{name}"), v, "")?;
        }
        for r in ctx.state.log.iter().filter(|r| r.task == t && r.epoch == ctx.epoch) {
            let mut row = vec![r.task.to_string(), r.epoch.to_string(), r.step.to_string()];
            row.extend(r.report.values().iter().map(|v| v.to_string()));
            self.losses.write_record(&row)?;
        }
        self.losses.flush().map_err(|e| Error::io(self.dir.losses(), e))?;
        if self.cfg.eval.per_epoch {
            for k in 0..self.tasks.len() {
                let test = head(&self.tasks[k].test, self.cfg.eval.per_epoch_test);
                let name = self.tasks[k].name.clone();
                if ctx.state.bundle.arch.class_conditional {
                    let acc = evalsuite::classifier_accuracy(&ctx.state.bundle, &test)?;
                    self.record(t, e, evalsuite::accuracy_metric(&name), acc, "")?;
                } else {
                    let rec = evalsuite::reconstruction_mse(&ctx.state.bundle, &test.images)?;
                    self.record(t, e, format!("rec_{name}"), rec.per_image, "")?;
                }
            }
        }
        if self.cfg.bounds.enabled && ctx.state.bundle.arch.class_conditional {
            let report = risk_report(
                &ctx.state.bundle.generator,
                &ctx.state.bundle.arch,
                &ctx.state.prior,
                &self.tasks[0].train,
                &self.tasks[0].test,
                &self.cfg.bounds,
                seed::derive(self.seeds.bounds, "epoch", e as u64),
            )?;
            log::info!(
                "epoch {e}: risk1 {:.3} risk2 {:.3} W {:.3} rhs {:.3}",
                report.risk1,
                report.risk2,
                report.w,
                report.rhs
            );
            self.bounds.push(BoundsRow::from_report(e, &report));
            self.bounds.write(&self.dir.bounds())?;
            self.record(t, e, "risk1", report.risk1, "bounds.csv")?;
            self.record(t, e, "risk2", report.risk2, "bounds.csv")?;
        }
        self.metrics.write_csv(&self.dir.metrics())
    }

    fn on_task_end(&mut self, task: usize, _name: &str, state: &TrainState) -> Result<()> {
        checkpoint::save_bundle(&self.dir.checkpoint(task), &state.bundle, &state.prior, task)
    }

    fn on_snapshot(&mut self, snapshot: &ReplaySnapshot) -> Result<()> {
        checkpoint::save_snapshot(&self.dir.snapshot(snapshot.task_count()), snapshot)
    }
}

fn task_data(cfg: &RunConfig, seeds: &Seeds, tasks: &[LoadedTask]) -> Result<Vec<TaskData>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if cfg.train.mode == Mode::Semi {
                let split = data::make_semi_split(&t.train, cfg.semi.n_labelled, seed::derive(seeds.split, &t.name, i as u64))?;
                Ok(TaskData {
                    name: t.name.clone(),
                    train: split.labelled,
                    unlabelled: Some(split.unlabelled),
                })
            } else {
                Ok(TaskData::new(t.name.clone(), t.train.clone()))
            }
        })
        .collect()
}

/// Summary of a finished run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub snapshots: Vec<PathBuf>,
    pub final_accuracy: Vec<(String, f64)>,
    pub bounds_held: Option<f64>,
}

/// `train`: run the sequence, writing every artifact into the run directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let seeds = Seeds::from_master(cfg.run.seed);
    let dir = RunDir::new(&cfg.run.out_dir);
    fs::create_dir_all(dir.eval()).map_err(|e| Error::io(dir.eval(), e))?;
    let mut manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Running,
        started: now(),
        finished: None,
        tasks: cfg.run.tasks.clone(),
        seeds,
        config: cfg.clone(),
    };
    manifest.write(&dir.root)?;
    let result = train_inner(cfg, seeds, &dir);
    manifest.finished = Some(now());
    manifest.status = if result.is_ok() { RunStatus::Completed } else { RunStatus::Failed };
    manifest.write(&dir.root)?;
    result
}

fn train_inner(cfg: &RunConfig, seeds: Seeds, dir: &RunDir) -> Result<TrainSummary> {
    let tasks = load_tasks(&cfg.data_root(), &cfg.run.tasks, cfg.arch.image_shape, cfg.run.max_train, cfg.run.max_test)?;
    let data = task_data(cfg, &seeds, &tasks)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seeds.train;
    let mut hooks = RunHooks {
        cfg,
        seeds,
        dir,
        tasks: &tasks,
        metrics: MetricsSink::new(),
        bounds: BoundsLog::new(),
        losses: csv::Writer::from_path(dir.losses())?,
    };
    let header = ["task", "epoch", "step"].into_iter().chain(LossReport::FIELDS);
    hooks.losses.write_record(header)?;
    let state = trainer::run_sequence(cfg.arch.clone(), &data, &train_cfg, &mut hooks)?;
    let epoch = cfg.train.epochs * tasks.len();
    let k = tasks.len();

    // final evaluation on the last bundle
    let final_snapshot = replay::build_snapshot(&state.bundle, &state.prior, k)?;
    let report = evaluate(
        &state.bundle,
        Some(&final_snapshot),
        &tasks,
        &EvalOptions {
            out: dir.eval(),
            artifact_prefix: "eval/".into(),
            seed: seeds.eval,
            section: cfg.eval.clone(),
        },
    )?;
    for r in &report.records {
        hooks.record(r.task, epoch, r.name.clone(), r.value, &r.artifact)?;
    }
    if state.bundle.arch.class_conditional && cfg.eval.per_epoch {
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        let curve = evalsuite::forgetting_curve(hooks.metrics.records(), &names)?;
        curve.write_csv(&dir.eval().join("forgetting.csv"))?;
    }
    hooks.metrics.write_csv(&dir.metrics())?;
    if cfg.bounds.enabled && !hooks.bounds.rows().is_empty() {
        hooks.bounds.write(&dir.bounds())?;
    }
    let final_accuracy = report
        .records
        .iter()
        .filter_map(|r| r.name.strip_prefix("final_acc_").map(|n| (n.to_string(), r.value)))
        .collect();
    Ok(TrainSummary {
        run_dir: dir.root.clone(),
        checkpoints: (1..=k).map(|t| dir.checkpoint(t)).collect(),
        snapshots: (1..k).map(|t| dir.snapshot(t)).collect(),
        final_accuracy,
        bounds_held: (!hooks.bounds.rows().is_empty()).then(|| hooks.bounds.holds_fraction()),
    })
}

// ---------------------------------------------------------------------------
// Evaluation

pub struct EvalOptions {
    pub out: PathBuf,
    /// Prefix of artifact paths recorded in metrics (relative to the run).
    pub artifact_prefix: String,
    pub seed: u64,
    pub section: EvalSection,
}

/// Metrics of one evaluation; `task` is the 1-based evaluated task.
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
}

fn record(task: usize, name: impl Into<String>, value: f64, artifact: String, seed_value: u64) -> MetricRecord {
    MetricRecord {
        run: String::new(),
        task,
        epoch: 0,
        name: name.into(),
        value,
        seed: seed_value,
        artifact,
    }
}

/// Every evaluation protocol on a frozen bundle, with image grids.
pub fn evaluate(bundle: &ModelBundle, snapshot: Option<&ReplaySnapshot>, tasks: &[LoadedTask], opts: &EvalOptions) -> Result<EvalReport> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let shape = bundle.arch.image_shape;
    let sec = &opts.section;
    let mut records = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let task = i + 1;
        let rec = evalsuite::reconstruction_mse(bundle, &t.test.images)?;
        let n = sec.grid_images.min(t.test.len());
        let sample = t.test.head(n);
        let recon = evalsuite::reconstruct(bundle, &sample.images)?;
        let both = ndarray::concatenate(ndarray::Axis(0), &[sample.images.view(), recon.view()])
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let file = format!("recon_{}.png", t.name);
        grid::save_grid(&opts.out.join(&file), &both, shape, 8)?;
        let art = format!("{}{file}", opts.artifact_prefix);
        records.push(record(task, format!("rec_per_image_{}", t.name), rec.per_image, art.clone(), opts.seed));
        records.push(record(task, format!("rec_per_pixel_{}", t.name), rec.per_pixel, art, opts.seed));
        if bundle.arch.class_conditional {
            let acc = evalsuite::classifier_accuracy(bundle, &t.test)?;
            records.push(record(task, format!("final_acc_{}", t.name), acc, String::new(), opts.seed));
        }
    }
    if tasks.len() <= bundle.arch.num_domains {
        let sets: Vec<&Mat> = tasks.iter().map(|t| &t.test.images).collect();
        let inf = evalsuite::task_inference_accuracy(bundle, &sets)?;
        for (i, (t, v)) in tasks.iter().zip(&inf.per_task).enumerate() {
            records.push(record(i + 1, format!("task_inference_{}", t.name), *v, String::new(), opts.seed));
        }
        records.push(record(tasks.len(), "task_inference_overall", inf.overall, String::new(), opts.seed));
    }
    if let Some(snap) = snapshot.filter(|s| s.arch().class_conditional) {
        let tests: Vec<(&str, &Dataset)> = tasks.iter().map(|t| (t.name.as_str(), &t.test)).collect();
        let (gx, codes) = replay::sample_replay(snap, sec.replay_samples, seed::derive(opts.seed, "replay-acc", 0))?;
        let labels = replay::pseudo_label(&codes)?;
        let probe = Probe::fit(&gx, &labels, shape, snap.arch().num_classes, &sec.probe)?;
        for (i, (name, d)) in tests.iter().enumerate() {
            records.push(record(i + 1, format!("replay_acc_{name}"), probe.accuracy(&d.images, &d.labels), String::new(), opts.seed));
        }
        let file = "replay_samples.png";
        grid::save_grid(&opts.out.join(file), &gx.slice(ndarray::s![..sec.grid_images.min(gx.nrows()), ..]).to_owned(), shape, 8)?;
        // feature distance per task, generating from that task's domain
        for (i, t) in tasks.iter().enumerate() {
            if i + 1 > snap.arch().num_domains {
                break;
            }
            let (dx, _) = sample_domain(snap.generator(), snap.arch(), snap.prior(), i + 1, t.test.len().min(1000), seed::derive(opts.seed, "fid", i as u64))?;
            let real = head(&t.test, 1000);
            let fid = evalsuite::fid_proxy(&probe, &dx, &real.images)?;
            records.push(record(i + 1, format!("fid_proxy_{}", t.name), fid, format!("{}{file}", opts.artifact_prefix), opts.seed));
        }
    }
    // interpolation across the first and last task, traversals on the first
    let first = &tasks[0];
    let last = &tasks[tasks.len() - 1];
    if !first.test.is_empty() && !last.test.is_empty() {
        let x1 = first.test.head(1).images;
        let x2 = if tasks.len() > 1 { last.test.head(1).images } else { first.test.select(&[1.min(first.test.len() - 1)]).images };
        let strip = evalsuite::interpolate(bundle, &x1, &x2, sec.interp_steps)?;
        let file = format!("interp_{}_{}.png", first.name, last.name);
        grid::save_grid(&opts.out.join(&file), &strip, shape, sec.interp_steps)?;
        records.push(record(1, "interp_frames", strip.nrows() as f64, format!("{}{file}", opts.artifact_prefix), opts.seed));
        for dim in 0..bundle.arch.dim_z.min(4) {
            let strip = traverse_grid(bundle, &first.test, dim, 4, sec.traverse_steps, evalsuite::TRAVERSE_LO, evalsuite::TRAVERSE_HI)?;
            let file = format!("traverse_dim{dim}.png");
            grid::save_grid(&opts.out.join(&file), &strip, shape, sec.traverse_steps)?;
            records.push(record(1, format!("traverse_dim{dim}_frames"), strip.nrows() as f64, format!("{}{file}", opts.artifact_prefix), opts.seed));
        }
    }
    Ok(EvalReport { records })
}

/// Traversal strips of the first `images` test images, one row each.
pub fn traverse_grid(bundle: &ModelBundle, test: &Dataset, dim: usize, images: usize, steps: usize, lo: f64, hi: f64) -> Result<Mat> {
    ensure(!test.is_empty(), || "no test images".into())?;
    let rows = (0..images.min(test.len()))
        .map(|i| evalsuite::traverse(bundle, &test.select(&[i]).images, dim, lo, hi, steps))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Output directory for checkpoint-level commands: `<run>/eval` when the
/// checkpoint lives in a run directory, else `<ckpt>/eval`.
fn default_eval_dir(ckpt: &Path) -> PathBuf {
    match ckpt.parent() {
        Some(p) if p.file_name().is_some_and(|n| n == "checkpoints") => {
            p.parent().map(|r| r.join("eval")).unwrap_or_else(|| ckpt.join("eval"))
        }
        _ => ckpt.join("eval"),
    }
}

fn tasks_for(ckpt: &Path, explicit: Option<&str>) -> Vec<String> {
    if let Some(t) = explicit {
        return t.split(',').filter(|s| !s.is_empty()).map(|s| s.trim().to_string()).collect();
    }
    let run = ckpt.parent().and_then(Path::parent);
    run.and_then(|r| RunManifest::read(r).ok())
        .map(|m| m.tasks)
        .unwrap_or_else(|| vec!["mnist".into()])
}

fn data_root_for(flag: &Option<PathBuf>, ckpt: &Path) -> PathBuf {
    if let Some(r) = flag {
        return r.clone();
    }
    let from_manifest = ckpt
        .parent()
        .and_then(Path::parent)
        .and_then(|r| RunManifest::read(r).ok())
        .and_then(|m| m.config.run.data_root);
    from_manifest.unwrap_or_else(data::default_root)
}

fn load_ckpt(ckpt: &Path) -> Result<checkpoint::BundleCheckpoint> {
    if !ckpt.exists() {
        return Err(Error::CheckpointNotFound(ckpt.to_path_buf()));
    }
    checkpoint::load_bundle(ckpt)
}

fn cmd_eval(a: &EvalArgs) -> Result<serde_json::Value> {
    let ck = load_ckpt(&a.common.ckpt)?;
    let names = tasks_for(&a.common.ckpt, a.tasks.as_deref());
    let tasks = load_tasks(&data_root_for(&a.common.data_root, &a.common.ckpt), &names, ck.bundle.arch.image_shape, Some(0), a.max_test)
        .or_else(|_| load_tasks(&data_root_for(&a.common.data_root, &a.common.ckpt), &names, ck.bundle.arch.image_shape, None, a.max_test))?;
    let out = a.common.out.clone().unwrap_or_else(|| default_eval_dir(&a.common.ckpt));
    let snap = replay::build_snapshot(&ck.bundle, &ck.prior, ck.task_count.max(1))?;
    let report = evaluate(
        &ck.bundle,
        Some(&snap),
        &tasks,
        &EvalOptions {
            out: out.clone(),
            artifact_prefix: String::new(),
            seed: a.common.seed,
            section: EvalSection {
                replay_samples: a.replay_samples,
                ..Default::default()
            },
        },
    )?;
    let run = a.common.ckpt.display().to_string();
    let records: Vec<MetricRecord> = report
        .records
        .into_iter()
        .map(|mut r| {
            r.run = run.clone();
            if !r.artifact.is_empty() {
                r.artifact = out.join(&r.artifact).display().to_string();
            }
            r
        })
        .collect();
    let path = out.join("metrics.csv");
    evalsuite::write_metrics_csv(&path, &records)?;
    let metrics: serde_json::Map<String, serde_json::Value> = records.iter().map(|r| (r.name.clone(), json!(r.value))).collect();
    Ok(json!({"status": "ok", "metrics_csv": path, "metrics": metrics}))
}

fn cmd_interpolate(a: &InterpolateArgs) -> Result<serde_json::Value> {
    let ck = load_ckpt(&a.common.ckpt)?;
    let root = data_root_for(&a.common.data_root, &a.common.ckpt);
    let shape = ck.bundle.arch.image_shape;
    let t1 = load_tasks(&root, &[a.task.clone()], shape, Some(0), None)?.remove(0);
    let name2 = a.task2.clone().unwrap_or_else(|| a.task.clone());
    let t2 = load_tasks(&root, &[name2.clone()], shape, Some(0), None)?.remove(0);
    ensure(a.from < t1.test.len() && a.to < t2.test.len(), || "image index out of range".into())?;
    let strip = evalsuite::interpolate(&ck.bundle, &t1.test.select(&[a.from]).images, &t2.test.select(&[a.to]).images, a.steps)?;
    let out = a.common.out.clone().unwrap_or_else(|| default_eval_dir(&a.common.ckpt));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(format!("interp_{}_{}_{}_{}.png", a.task, a.from, name2, a.to));
    grid::save_grid(&path, &strip, shape, a.steps)?;
    Ok(json!({"status": "ok", "image": path, "frames": a.steps}))
}

fn cmd_traverse(a: &TraverseArgs) -> Result<serde_json::Value> {
    let ck = load_ckpt(&a.common.ckpt)?;
    let root = data_root_for(&a.common.data_root, &a.common.ckpt);
    let t = load_tasks(&root, &[a.task.clone()], ck.bundle.arch.image_shape, Some(0), None)?.remove(0);
    let strip = traverse_grid(&ck.bundle, &t.test, a.dim, a.images, a.steps, a.lo, a.hi)?;
    let out = a.common.out.clone().unwrap_or_else(|| default_eval_dir(&a.common.ckpt));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(format!("traverse_dim{}.png", a.dim));
    grid::save_grid(&path, &strip, ck.bundle.arch.image_shape, a.steps)?;
    Ok(json!({
        "status": "ok",
        "image": path,
        "grid": evalsuite::linear_grid(a.lo, a.hi, a.steps),
        "rows": strip.nrows() / a.steps.max(1),
    }))
}

/// A snapshot directory, or a bundle checkpoint snapshotted on the fly.
fn load_any_snapshot(dir: &Path) -> Result<ReplaySnapshot> {
    if !dir.exists() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    checkpoint::load_snapshot(dir).or_else(|_| {
        let ck = checkpoint::load_bundle(dir)?;
        replay::build_snapshot(&ck.bundle, &ck.prior, ck.task_count.max(1))
    })
}

fn cmd_replay_sample(a: &ReplaySampleArgs) -> Result<serde_json::Value> {
    let snap = load_any_snapshot(&a.snapshot)?;
    let (x, codes) = replay::sample_replay(&snap, a.n, a.seed)?;
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    grid::save_grid(&a.out, &x, snap.arch().image_shape, 10)?;
    let labels = replay::pseudo_label(&codes).ok();
    if a.arrays {
        let images = a.out.with_extension("images.npy");
        ndarray_npy::write_npy(&images, &x).map_err(|e| Error::Array(e.to_string()))?;
        if let Some(l) = &labels {
            let arr = ndarray::Array1::from(l.iter().map(|&v| v as i64).collect::<Vec<_>>());
            ndarray_npy::write_npy(a.out.with_extension("labels.npy"), &arr).map_err(|e| Error::Array(e.to_string()))?;
        }
    }
    Ok(json!({"status": "ok", "image": a.out, "n": a.n, "task_count": snap.task_count(), "labels": labels}))
}

fn cmd_bounds(a: &BoundsArgs) -> Result<serde_json::Value> {
    let snap = load_any_snapshot(&a.snapshot)?;
    ensure(snap.arch().class_conditional, || "bound probes need a labelled-mode snapshot".into())?;
    let root = a.data_root.clone().unwrap_or_else(data::default_root);
    let t = load_tasks(&root, &[a.task.clone()], snap.arch().image_shape, None, None)?.remove(0);
    let section = BoundsSection {
        train_samples: a.train_samples,
        eval_samples: a.eval_samples,
        constants: BoundConstants {
            delta_conf: a.delta_conf,
            a_prime: a.a_prime,
            ..Default::default()
        },
        ..Default::default()
    };
    ensure(a.domain >= 1 && a.domain <= snap.arch().num_domains, || "domain out of range".into())?;
    // probes the chosen domain by relabelling it as the first
    let report = if a.domain == 1 {
        risk_report(snap.generator(), snap.arch(), snap.prior(), &t.train, &t.test, &section, a.seed)?
    } else {
        let (gx, gy) = sample_domain(snap.generator(), snap.arch(), snap.prior(), a.domain, a.train_samples + a.eval_samples, a.seed)?;
        let gy = gy.unwrap_or_default();
        let n = a.train_samples;
        let gen_train = SampleCloud::new(gx.slice(ndarray::s![..n, ..]).to_owned(), Some(gy[..n].to_vec()), "generated-train")?;
        let gen_test = SampleCloud::new(gx.slice(ndarray::s![n.., ..]).to_owned(), Some(gy[n..].to_vec()), "generated")?;
        let rt = head(&t.test, a.eval_samples);
        let rtr = head(&t.train, a.train_samples);
        bounds::risk_probe(
            &RiskProbeInputs {
                real_test: &SampleCloud::new(rt.images, Some(rt.labels), "real")?,
                generated_train: &gen_train,
                generated_test: &gen_test,
                real_train: &SampleCloud::new(rtr.images, Some(rtr.labels), "real-train")?,
            },
            snap.arch().image_shape,
            snap.arch().num_classes,
            &section.probe,
            section.constants,
            a.seed,
        )?
    };
    Ok(json!({"status": "ok", "report": report}))
}

fn cmd_import(a: &ImportArgs) -> Result<serde_json::Value> {
    let root = a.root.clone().unwrap_or_else(data::default_root);
    let dir = match a.format.as_str() {
        "idx" => {
            let src = a.src.as_ref().ok_or_else(|| Error::Config("--src is required for the idx format".into()))?;
            data::import_idx(&IdxSources::in_dir(src), &root, &a.name)?
        }
        "synth-fashion" => {
            let train = synth::garments(a.train, seed::derive(a.seed, "synth-train", 0))?;
            let test = synth::garments(a.test, seed::derive(a.seed, "synth-test", 0))?;
            data::write_task(&root, &a.name, &train, &test)?
        }
        other => return Err(Error::Config(format!("unknown import format {other:?}"))),
    };
    let m = data::read_manifest(&dir)?;
    Ok(json!({"status": "ok", "dir": dir, "train": m.train.count, "test": m.test.count}))
}

/// Run a parsed command.
pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Train(a) => {
            let cfg = merge_config(a)?;
            let s = train(&cfg)?;
            Ok(json!({"status": "ok", "summary": s}))
        }
        Command::Eval(a) => cmd_eval(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Traverse(a) => cmd_traverse(a),
        Command::ReplaySample(a) => cmd_replay_sample(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::ImportData(a) => cmd_import(a),
    }
}

/// Machine-readable error record.
pub fn error_record(code: &str, message: &str) -> serde_json::Value {
    json!({"error": code, "message": message})
}

/// Parse and run; returns the exit code and the JSON record to print
/// (stdout on success, stderr on failure).
pub fn run<I, S>(args: I) -> (i32, serde_json::Value)
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => (0, json!({"help": e.to_string()})),
                _ => (2, error_record("usage_error", &e.to_string())),
            };
        }
    };
    match execute(&cli) {
        Ok(v) => (0, v),
        Err(e) => (1, error_record(e.code(), &e.to_string())),
    }
}
