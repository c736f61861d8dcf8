//! Two-phase optimization per mini-batch and the lifelong task loop.
//!
//! Each iteration runs a wake phase (`n_critic` critic updates, then one
//! generator update against the critic) followed by a dreaming phase (one
//! joint update of generator, encoder, task head and class head on the
//! two-source variational objective). After every task but the last the
//! generator is frozen into a replay snapshot and the domain variable grows
//! by one.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{ensure, Error, Result};
use crate::latent::{self, LatentTriple, PriorConfig};
use crate::losses::{self, Bound, ElboDraws, LossReport, LossWeights, SourceBatch};
use crate::nets::{ArchitectureSpec, ModelBundle, NetKind};
use crate::optim::{Adam, AdamConfig};
use crate::replay::{self, LabelledBatch, ReplayBatchSpec, ReplaySnapshot, ReplaySource};
use crate::seed;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Semi,
    Unsupervised,
}

impl Mode {
    pub fn uses_labels(self) -> bool {
        self != Mode::Unsupervised
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "semi" | "semi-supervised" => Ok(Mode::Semi),
            "unsupervised" => Ok(Mode::Unsupervised),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// How earlier tasks are rehearsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayKind {
    /// Frozen-generator replay.
    Generative,
    /// Forgetting ablation.
    None,
    /// Stores this many real samples per finished task.
    Buffer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub temperature: f64,
    pub straight_through: bool,
    pub replay: ReplayKind,
    /// Fixed replay fraction; `None` means `(t − 1) / t`.
    pub rho: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 64,
            weights: LossWeights::default(),
            seed: 0,
            temperature: latent::DEFAULT_TEMPERATURE,
            straight_through: false,
            replay: ReplayKind::Generative,
            rho: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        ensure(self.epochs >= 1, || "epochs must be >= 1".into())?;
        ensure(self.batch_size >= 1, || "batch size must be >= 1".into())?;
        ensure(self.temperature > 0.0, || "temperature must be > 0".into())?;
        if let Some(rho) = self.rho {
            ensure((0.0..1.0).contains(&rho), || "rho must lie in [0, 1)".into())?;
        }
        Ok(())
    }

    fn rho(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.rho.unwrap_or_else(|| replay::default_rho(t))
        }
    }
}

/// Training data of one task. In semi-supervised mode `train` holds the
/// labelled subset and `unlabelled` the rest; otherwise `unlabelled` is
/// `None` (and labels are ignored in the unsupervised mode).
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: Dataset,
    pub unlabelled: Option<Dataset>,
}

impl TaskData {
    pub fn new(name: impl Into<String>, train: Dataset) -> Self {
        Self {
            name: name.into(),
            train,
            unlabelled: None,
        }
    }
}

/// Loss report of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub prior: PriorConfig,
    /// 1-based index of the task being (or last) trained; 0 before training.
    pub task: usize,
    /// Most recent snapshot; sampled for replay.
    pub snapshot: Option<ReplaySnapshot>,
    /// Every snapshot taken so far, in task order.
    pub snapshots: Vec<ReplaySnapshot>,
    pub buffer: Option<LabelledBatch>,
    pub step: u64,
    pub log: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(arch: ArchitectureSpec, cfg: &TrainConfig) -> Result<Self> {
        ensure(arch.num_domains == 1, || "training starts with a single domain".into())?;
        ensure(arch.class_conditional == cfg.mode.uses_labels(), || {
            "class-conditional architecture required exactly for labelled modes".into()
        })?;
        let bundle = ModelBundle::new(arch, seed::derive(cfg.seed, "init", 0))?;
        let mut prior = PriorConfig::uniform(bundle.arch.dim_z, bundle.arch.num_classes, 1);
        prior.temperature = cfg.temperature;
        prior.straight_through = cfg.straight_through;
        Ok(Self {
            bundle,
            prior,
            task: 0,
            snapshot: None,
            snapshots: Vec::new(),
            buffer: None,
            step: 0,
            log: Vec::new(),
        })
    }

    fn replay_source(&self, cfg: &TrainConfig) -> ReplaySource {
        match cfg.replay {
            ReplayKind::None => ReplaySource::None,
            ReplayKind::Generative => match &self.snapshot {
                Some(s) => ReplaySource::Generative(s.clone()),
                None => ReplaySource::None,
            },
            ReplayKind::Buffer(_) => match &self.buffer {
                Some(b) => ReplaySource::Buffer(b.clone()),
                None => ReplaySource::None,
            },
        }
    }
}

/// Optimizer state: separate moments per phase and network. The generator
/// has one set for the adversarial objective and one for the variational.
pub struct Optimizers {
    critic: Adam,
    generator_wake: Adam,
    generator_dream: Adam,
    encoder: Adam,
    task_head: Adam,
    class_head: Adam,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, cfg: AdamConfig) -> Self {
        Self {
            critic: Adam::new(cfg, &bundle.critic.params),
            generator_wake: Adam::new(cfg, &bundle.generator.params),
            generator_dream: Adam::new(cfg, &bundle.generator.params),
            encoder: Adam::new(cfg, &bundle.encoder.params),
            task_head: Adam::new(cfg, &bundle.task_head.params),
            class_head: Adam::new(cfg, &bundle.class_head.params),
        }
    }
}

fn gradients(tape: &mut Tape, loss: Var, params: &[Var]) -> Vec<Mat> {
    let g = tape.grad(loss, params);
    g.iter().map(|v| tape.value(*v).clone()).collect()
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

/// Wake phase on one real-side batch: `n_critic` critic updates, then one
/// generator update. Touches only the critic and the generator.
pub fn wake_step(
    state: &mut TrainState,
    opt: &mut Optimizers,
    real: &Mat,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<LossReport> {
    let n = real.nrows();
    ensure(n >= 1, || "empty wake batch".into())?;
    let class_conditional = state.bundle.arch.class_conditional;
    let mut report = LossReport::default();
    for k in 0..cfg.weights.n_critic {
        let codes = LatentTriple::sample_prior(n, &state.prior, class_conditional, seed::derive(step_seed, "critic-codes", k as u64))?;
        let fake = crate::nets::generate(&state.bundle, &codes.z, &codes.a, codes.c.as_ref())?;
        let mix = losses::sample_mix(n, seed::derive(step_seed, "mix", k as u64));
        let mut tape = Tape::new();
        let params = state.bundle.critic.bind(&mut tape, true);
        let terms = losses::critic_terms(&mut tape, &state.bundle.critic, &params, real, &fake, &mix, cfg.weights.lambda_gp)?;
        report.d_loss = finite(tape.scalar(terms.d_loss), "critic loss", state.step)?;
        report.gp = tape.scalar(terms.gp);
        let grads = gradients(&mut tape, terms.d_loss, &params);
        opt.critic.step(&mut state.bundle.critic.params, &grads);
    }
    let codes = LatentTriple::sample_prior(n, &state.prior, class_conditional, seed::derive(step_seed, "gen-codes", 0))?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &state.bundle, &[NetKind::Generator]);
    let (g_loss, adv, ce_gen) =
        losses::generator_objective_var(&mut tape, &state.bundle, &bound, &codes, cfg.weights.info_weight)?;
    report.g_loss = finite(tape.scalar(adv), "generator loss", state.step)?;
    if let Some(ce) = ce_gen {
        report.ce_gen = finite(tape.scalar(ce), "code consistency", state.step)?;
    }
    let grads = gradients(&mut tape, g_loss, &bound.generator);
    opt.generator_wake.step(&mut state.bundle.generator.params, &grads);
    Ok(report)
}

fn source(state: &TrainState, b: &LabelledBatch, seed_value: u64) -> SourceBatch {
    SourceBatch {
        x: b.x.clone(),
        labels: b.labels.clone(),
        domains: b.domains.clone(),
        draws: ElboDraws::sample(b.len(), &state.bundle, seed_value),
    }
}

/// Dreaming phase: one joint update of generator, encoder, task head and
/// class head. Never touches the critic.
#[allow(clippy::too_many_arguments)]
pub fn dream_step(
    state: &mut TrainState,
    opt: &mut Optimizers,
    current: &LabelledBatch,
    replayed: &LabelledBatch,
    unlabelled: Option<&LabelledBatch>,
    cfg: &TrainConfig,
    step_seed: u64,
    step_in_task: u64,
    ramp_steps: u64,
) -> Result<LossReport> {
    let trainable = [NetKind::Generator, NetKind::Encoder, NetKind::TaskHead, NetKind::ClassHead];
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &state.bundle, &trainable);
    let cur = source(state, current, seed::derive(step_seed, "draws-current", 0));
    let rep = (!replayed.is_empty()).then(|| source(state, replayed, seed::derive(step_seed, "draws-replay", 0)));
    let objective = match cfg.mode {
        Mode::Supervised => losses::dream_loss_supervised(&mut tape, &state.bundle, &bound, &cur, rep.as_ref(), &state.prior)?,
        Mode::Semi => {
            let unl = unlabelled.map(|u| source(state, u, seed::derive(step_seed, "draws-unlabelled", 0)));
            let mut labelled = vec![&cur];
            labelled.extend(rep.as_ref());
            losses::semi_supervised_loss(&mut tape, &state.bundle, &bound, &labelled, unl.as_ref(), &cfg.weights, &state.prior)?
        }
        Mode::Unsupervised => losses::unsup_dream_loss(
            &mut tape,
            &state.bundle,
            &bound,
            &cur,
            rep.as_ref(),
            &cfg.weights,
            &state.prior,
            step_in_task,
            ramp_steps,
        )?,
    };
    finite(objective.report.total, "dreaming loss", state.step)?;
    let all: Vec<Var> = trainable.iter().flat_map(|&k| bound.params(k).to_vec()).collect();
    let mut grads = gradients(&mut tape, objective.loss, &all).into_iter();
    let b = &mut state.bundle;
    let mut take = |n: usize| grads.by_ref().take(n).collect::<Vec<_>>();
    let g = take(b.generator.params.len());
    opt.generator_dream.step(&mut b.generator.params, &g);
    let g = take(b.encoder.params.len());
    opt.encoder.step(&mut b.encoder.params, &g);
    let g = take(b.task_head.params.len());
    opt.task_head.step(&mut b.task_head.params, &g);
    let g = take(b.class_head.params.len());
    opt.class_head.step(&mut b.class_head.params, &g);
    Ok(objective.report)
}

/// What an epoch hook gets to see.
pub struct EpochContext<'a> {
    /// 1-based task index.
    pub task: usize,
    pub task_name: &'a str,
    /// 1-based epoch within the task.
    pub epoch: usize,
    /// 1-based epoch counted over the whole sequence.
    pub global_epoch: usize,
    pub state: &'a TrainState,
    pub cfg: &'a TrainConfig,
    /// Mean loss report over the epoch.
    pub mean_report: LossReport,
}

/// Callbacks invoked by [`train_task`] and [`run_sequence`].
pub trait Hooks {
    fn on_epoch_end(&mut self, _ctx: &EpochContext<'_>) -> Result<()> {
        Ok(())
    }

    fn on_task_end(&mut self, _task: usize, _name: &str, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _snapshot: &ReplaySnapshot) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl Hooks for NoHooks {}

fn one_hot_domain(n: usize, k: usize, t: usize) -> Mat {
    let mut m = Mat::zeros((n, k));
    m.column_mut(t - 1).fill(1.0);
    m
}

fn task_batch(set: &Dataset, rows: &[usize], with_labels: bool, k: usize, t: usize) -> LabelledBatch {
    let sub = set.select(rows);
    LabelledBatch {
        labels: with_labels.then(|| sub.one_hot()),
        domains: one_hot_domain(rows.len(), k, t),
        x: sub.images,
    }
}

/// `train_task(state, task data, cfg)` for task `state.task + 1`, with an
/// explicit replay source. Used directly by tests that swap in a perfect
/// generator; [`run_sequence`] picks the source from the config.
pub fn train_task_with(
    state: &mut TrainState,
    task: &TaskData,
    cfg: &TrainConfig,
    replay_source: &ReplaySource,
    hooks: &mut dyn Hooks,
) -> Result<()> {
    cfg.validate()?;
    ensure(!task.train.is_empty(), || "task has no training data".into())?;
    ensure(task.train.shape == state.bundle.arch.image_shape, || {
        "task image shape does not match the architecture".into()
    })?;
    let t = state.task + 1;
    ensure(state.bundle.arch.num_domains >= t, || {
        format!("task {t} needs {t} domains; expand the domain variable first")
    })?;
    if t >= 2 && cfg.replay == ReplayKind::Generative {
        ensure(state.snapshot.as_ref().map(|s| s.task_count()) == Some(t - 1), || {
            format!("task {t} requires the snapshot of task {}", t - 1)
        })?;
    }
    if cfg.mode == Mode::Semi {
        ensure(task.unlabelled.is_some(), || "semi-supervised mode needs an unlabelled set".into())?;
    }
    state.task = t;
    let k = state.bundle.arch.num_domains;
    let labelled_mode = cfg.mode.uses_labels();
    let classes = state.bundle.arch.num_classes;
    let rho = if replay_source.is_none() { 0.0 } else { cfg.rho(t) };
    let real_per_step = cfg.batch_size;
    let n_rep = if rho > 0.0 {
        ((rho / (1.0 - rho)) * real_per_step as f64).round() as usize
    } else {
        0
    };
    // In semi mode an epoch is a pass over the unlabelled set; labelled
    // batches cycle alongside it.
    let epoch_set = match (&cfg.mode, &task.unlabelled) {
        (Mode::Semi, Some(u)) if !u.is_empty() => u,
        _ => &task.train,
    };
    let steps_per_epoch = epoch_set.len().div_ceil(real_per_step) as u64;
    let ramp_steps = steps_per_epoch * cfg.epochs as u64;

    let mut opt = Optimizers::new(&state.bundle, cfg.adam);
    let mut step_in_task = 0u64;
    for epoch in 1..=cfg.epochs {
        let epoch_seed = seed::derive(cfg.seed, "epoch", ((t as u64) << 32) | epoch as u64);
        let order = data::batches(epoch_set.len(), real_per_step, epoch_seed)?;
        let labelled_order = if cfg.mode == Mode::Semi {
            data::batches(task.train.len(), real_per_step, seed::derive(epoch_seed, "labelled", 0))?
        } else {
            Vec::new()
        };
        let mut sum = LossReport::default();
        for (b, rows) in order.iter().enumerate() {
            let step_seed = seed::derive(cfg.seed, "step", state.step);
            let (current, unlabelled) = if cfg.mode == Mode::Semi {
                let lab_rows = &labelled_order[b % labelled_order.len()];
                (
                    task_batch(&task.train, lab_rows, true, k, t),
                    Some(task_batch(epoch_set, rows, false, k, t)),
                )
            } else {
                (task_batch(&task.train, rows, labelled_mode, k, t), None)
            };
            let n_rep_here = if n_rep > 0 {
                ((rho / (1.0 - rho)) * rows.len() as f64).round() as usize
            } else {
                0
            };
            let replayed = if n_rep_here > 0 {
                replay_source.draw(n_rep_here, k, labelled_mode, classes, seed::derive(step_seed, "replay", 0))?
            } else {
                LabelledBatch::empty(state.bundle.arch.image_shape.pixels(), labelled_mode.then_some(classes), k)
            };
            // real side of the critic: current images (unlabelled ones in
            // semi mode) mixed with replay
            let real_side = unlabelled.as_ref().unwrap_or(&current);
            let spec = ReplayBatchSpec {
                size: real_side.len() + replayed.len(),
                rho: if replayed.is_empty() { 0.0 } else { replayed.len() as f64 / (real_side.len() + replayed.len()) as f64 },
                seed: seed::derive(step_seed, "shuffle", 0),
            };
            let mixed = replay::mix_batches(&without_labels(real_side), &without_labels(&replayed), &spec)?;

            let wake = wake_step(state, &mut opt, &mixed.batch.x, cfg, step_seed)?;
            let mut report = dream_step(
                state,
                &mut opt,
                &current,
                &replayed,
                unlabelled.as_ref(),
                cfg,
                step_seed,
                step_in_task,
                ramp_steps,
            )?;
            report.d_loss = wake.d_loss;
            report.g_loss = wake.g_loss;
            report.gp = wake.gp;
            report.ce_gen = wake.ce_gen;
            report.check_finite()?;
            state.log.push(StepRecord {
                task: t,
                epoch,
                step: state.step,
                report,
            });
            accumulate(&mut sum, &report);
            state.step += 1;
            step_in_task += 1;
        }
        if !state.bundle.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch} of task {t}")));
        }
        let mean = scale(&sum, 1.0 / order.len().max(1) as f64);
        let global_epoch = (t - 1) * cfg.epochs + epoch;
        hooks.on_epoch_end(&EpochContext {
            task: t,
            task_name: &task.name,
            epoch,
            global_epoch,
            state,
            cfg,
            mean_report: mean,
        })?;
    }
    if let ReplayKind::Buffer(per_task) = cfg.replay {
        let rows: Vec<usize> = data::batches(task.train.len(), per_task.max(1), seed::derive(cfg.seed, "buffer", t as u64))?
            .into_iter()
            .next()
            .unwrap_or_default();
        let add = task_batch(&task.train, &rows, labelled_mode, k, t);
        state.buffer = Some(match state.buffer.take() {
            None => add,
            Some(old) => concat_batches(&old, &add, k)?,
        });
    }
    hooks.on_task_end(t, &task.name, state)?;
    Ok(())
}

fn without_labels(b: &LabelledBatch) -> LabelledBatch {
    LabelledBatch {
        x: b.x.clone(),
        labels: None,
        domains: b.domains.clone(),
    }
}

fn concat_batches(a: &LabelledBatch, b: &LabelledBatch, k: usize) -> Result<LabelledBatch> {
    use ndarray::{concatenate, Axis};
    let cat = |x: &Mat, y: &Mat| {
        concatenate(Axis(0), &[x.view(), y.view()]).map_err(|e| Error::ShapeMismatch(e.to_string()))
    };
    Ok(LabelledBatch {
        x: cat(&a.x, &b.x)?,
        labels: match (&a.labels, &b.labels) {
            (Some(x), Some(y)) => Some(cat(x, y)?),
            _ => None,
        },
        domains: cat(&replay::pad_domains(&a.domains, k)?, &replay::pad_domains(&b.domains, k)?)?,
    })
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    let mut v = sum.values();
    v.iter_mut().zip(r.values()).for_each(|(a, b)| *a += b);
    *sum = LossReport::from_values(v);
}

fn scale(r: &LossReport, k: f64) -> LossReport {
    LossReport::from_values(r.values().map(|v| v * k))
}

/// `train_task` with the replay source chosen by the config.
pub fn train_task(state: &mut TrainState, task: &TaskData, cfg: &TrainConfig, hooks: &mut dyn Hooks) -> Result<()> {
    let src = state.replay_source(cfg);
    train_task_with(state, task, cfg, &src, hooks)
}

/// Freeze the current generator and grow the domain variable, ahead of the
/// next task.
pub fn prepare_next_task(state: &mut TrainState, cfg: &TrainConfig) -> Result<()> {
    ensure(state.task >= 1, || "no task trained yet".into())?;
    let snap = replay::build_snapshot(&state.bundle, &state.prior, state.task)?;
    state.snapshots.push(snap.clone());
    state.snapshot = Some(snap);
    let (prior, bundle) = latent::expand_bundle_domain(
        &state.bundle,
        &state.prior,
        false,
        seed::derive(cfg.seed, "expand", state.task as u64),
    )?;
    state.prior = prior;
    state.bundle = bundle;
    Ok(())
}

/// `run_sequence(tasks, cfg)`: train every task in order, snapshotting and
/// expanding the domain variable between tasks.
pub fn run_sequence(
    arch: ArchitectureSpec,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    hooks: &mut dyn Hooks,
) -> Result<TrainState> {
    ensure(!tasks.is_empty(), || "need at least one task".into())?;
    cfg.validate()?;
    let mut state = TrainState::new(arch, cfg)?;
    for (i, task) in tasks.iter().enumerate() {
        if i > 0 {
            prepare_next_task(&mut state, cfg)?;
            if let Some(s) = &state.snapshot {
                hooks.on_snapshot(s)?;
            }
        }
        let unl = task.unlabelled.as_ref().map_or(0, |u| u.len());
        log::info!("task {} ({}): {} labelled, {} unlabelled training samples", i + 1, task.name, task.train.len(), unl);
        train_task(&mut state, task, cfg, hooks)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, ImageShape};

    pub(crate) fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            image_shape: ImageShape::new(2, 2, 1),
            dim_z: 2,
            num_classes: 2,
            generator_hidden: vec![8],
            critic_hidden: vec![8],
            encoder_hidden: vec![8],
            task_hidden: vec![4],
            class_hidden: vec![8],
            activation: Activation::LeakyRelu,
            ..Default::default()
        }
    }

    fn toy_task(n: usize, flip: bool) -> TaskData {
        let x = Mat::from_shape_fn((n, 4), |(i, j)| {
            let on = (i % 2 == 0) ^ (j % 2 == 0) ^ flip;
            if on { 0.9 } else { 0.1 }
        });
        let labels = (0..n).map(|i| i % 2).collect();
        TaskData::new(if flip { "b" } else { "a" }, Dataset::new(x, labels, ImageShape::new(2, 2, 1), 2).unwrap())
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            weights: LossWeights { n_critic: 2, ..Default::default() },
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick_cfg();
        let a = run_sequence(toy_arch(), &[toy_task(8, false)], &cfg, &mut NoHooks).unwrap();
        let b = run_sequence(toy_arch(), &[toy_task(8, false)], &cfg, &mut NoHooks).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
    }

    #[test]
    fn phases_touch_only_their_networks() {
        let cfg = quick_cfg();
        let mut state = TrainState::new(toy_arch(), &cfg).unwrap();
        // two domains, so the task head receives a gradient
        let (prior, bundle) = latent::expand_bundle_domain(&state.bundle, &state.prior, false, 3).unwrap();
        state.prior = prior;
        state.bundle = bundle;
        state.task = 2;
        let task = toy_task(8, false);
        let batch = task_batch(&task.train, &[0, 1, 2, 3], true, 2, 2);
        let mut opt = Optimizers::new(&state.bundle, cfg.adam);

        let before = state.bundle.clone();
        wake_step(&mut state, &mut opt, &batch.x, &cfg, 5).unwrap();
        let changed: Vec<NetKind> = NetKind::ALL
            .into_iter()
            .filter(|&k| before.net(k) != state.bundle.net(k))
            .collect();
        assert_eq!(changed, vec![NetKind::Generator, NetKind::Critic]);

        let before = state.bundle.clone();
        let empty = LabelledBatch::empty(4, Some(2), 2);
        dream_step(&mut state, &mut opt, &batch, &empty, None, &cfg, 6, 0, 1).unwrap();
        let changed: Vec<NetKind> = NetKind::ALL
            .into_iter()
            .filter(|&k| before.net(k) != state.bundle.net(k))
            .collect();
        assert_eq!(
            changed,
            vec![NetKind::Generator, NetKind::Encoder, NetKind::TaskHead, NetKind::ClassHead]
        );
    }

    #[test]
    fn sequence_snapshots_and_expands() {
        let cfg = quick_cfg();
        let single = run_sequence(toy_arch(), &[toy_task(8, false)], &cfg, &mut NoHooks).unwrap();
        assert!(single.snapshot.is_none());
        assert_eq!(single.bundle.arch.num_domains, 1);

        let two = run_sequence(toy_arch(), &[toy_task(8, false), toy_task(8, true)], &cfg, &mut NoHooks).unwrap();
        assert_eq!(two.snapshots.len(), 1);
        assert_eq!(two.snapshot.as_ref().unwrap().task_count(), 1);
        assert_eq!(two.bundle.arch.num_domains, 2);
        assert_eq!(two.prior.domain_probs, vec![0.5, 0.5]);
    }

    #[test]
    fn later_task_without_snapshot_is_rejected() {
        let cfg = quick_cfg();
        let mut state = TrainState::new(toy_arch(), &cfg).unwrap();
        train_task(&mut state, &toy_task(8, false), &cfg, &mut NoHooks).unwrap();
        assert!(train_task(&mut state, &toy_task(8, true), &cfg, &mut NoHooks).is_err());
    }

    #[test]
    fn mode_must_match_architecture() {
        let cfg = TrainConfig { mode: Mode::Unsupervised, ..quick_cfg() };
        assert!(TrainState::new(toy_arch(), &cfg).is_err());
        let arch = ArchitectureSpec { class_conditional: false, ..toy_arch() };
        assert!(TrainState::new(arch, &cfg).is_ok());
    }
}
