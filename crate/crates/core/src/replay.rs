//! Generative replay: frozen generator snapshots and mixed training batches.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::latent::{LatentTriple, PriorConfig};
use crate::nets::{self, ArchitectureSpec, ModelBundle, Network};
use crate::seed;
use crate::tape::Mat;

/// Frozen copy of the generator and priors taken after a task finishes.
/// There are no mutating methods; a snapshot only ever produces samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySnapshot {
    generator: Network,
    class_head: Option<Network>,
    arch: ArchitectureSpec,
    prior: PriorConfig,
    task_count: usize,
}

impl ReplaySnapshot {
    pub fn from_parts(
        generator: Network,
        class_head: Option<Network>,
        arch: ArchitectureSpec,
        prior: PriorConfig,
        task_count: usize,
    ) -> Result<Self> {
        ensure(task_count >= 1, || "snapshot needs at least one finished task".into())?;
        arch.validate()?;
        prior.validate()?;
        ensure(prior.num_domains == arch.num_domains, || {
            "prior and architecture disagree on the number of domains".into()
        })?;
        ensure(generator.input_width() == arch.code_width(), || {
            "generator input does not match the architecture".into()
        })?;
        Ok(Self {
            generator,
            class_head,
            arch,
            prior,
            task_count,
        })
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn class_head(&self) -> Option<&Network> {
        self.class_head.as_ref()
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }
}

/// `build_snapshot(bundle, cfg, t)`: deep copy of the generator (and class
/// head) after task `t`.
pub fn build_snapshot(bundle: &ModelBundle, prior: &PriorConfig, t: usize) -> Result<ReplaySnapshot> {
    if t == 0 {
        return Err(Error::InvalidArgument(
            "snapshot requested before any task was trained".into(),
        ));
    }
    let class_head = bundle.arch.class_conditional.then(|| bundle.class_head.clone());
    ReplaySnapshot::from_parts(
        bundle.generator.clone(),
        class_head,
        bundle.arch.clone(),
        prior.clone(),
        t,
    )
}

/// `sample_replay(snap, n, seed)` → images and the codes that produced them.
pub fn sample_replay(snap: &ReplaySnapshot, n: usize, seed_value: u64) -> Result<(Mat, LatentTriple)> {
    let codes = LatentTriple::sample_prior(n, &snap.prior, snap.arch.class_conditional, seed_value)?;
    let x = nets::generate_with(&snap.generator, &snap.arch, &codes.z, &codes.a, codes.c.as_ref())?;
    Ok((x, codes))
}

/// `pseudo_label(codes)`: the hardened class code used at generation.
pub fn pseudo_label(codes: &LatentTriple) -> Result<Vec<usize>> {
    let c = codes
        .c
        .as_ref()
        .ok_or_else(|| Error::ModeMismatch("unsupervised".into()))?;
    Ok(nets::argmax_rows(c))
}

/// One-hot encoding of class indices.
pub fn one_hot(labels: &[usize], width: usize) -> Result<Mat> {
    let mut m = Mat::zeros((labels.len(), width));
    for (i, &l) in labels.iter().enumerate() {
        ensure(l < width, || format!("label {l} out of range for width {width}"))?;
        m[[i, l]] = 1.0;
    }
    Ok(m)
}

/// Pad one-hot domain rows with zero columns up to `k` domains.
pub fn pad_domains(a: &Mat, k: usize) -> Result<Mat> {
    ensure(a.ncols() <= k, || "cannot shrink the domain code".into())?;
    let mut out = Mat::zeros((a.nrows(), k));
    out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(a);
    Ok(out)
}

/// Images with optional one-hot labels and one-hot task identities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledBatch {
    pub x: Mat,
    pub labels: Option<Mat>,
    pub domains: Mat,
}

impl LabelledBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn empty(pixels: usize, classes: Option<usize>, domains: usize) -> Self {
        Self {
            x: Mat::zeros((0, pixels)),
            labels: classes.map(|c| Mat::zeros((0, c))),
            domains: Mat::zeros((0, domains)),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), rows)),
            domains: self.domains.select(Axis(0), rows),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        ensure(self.domains.nrows() == n, || "domain rows do not match images".into())?;
        if let Some(l) = &self.labels {
            ensure(l.nrows() == n, || "label rows do not match images".into())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayBatchSpec {
    pub size: usize,
    pub rho: f64,
    pub seed: u64,
}

impl ReplayBatchSpec {
    pub fn replay_count(&self) -> usize {
        ((self.rho * self.size as f64) + 1e-9).floor() as usize
    }
}

/// Default replay fraction `(t − 1) / t` for task `t` (1-based).
pub fn default_rho(t: usize) -> f64 {
    if t <= 1 {
        0.0
    } else {
        (t - 1) as f64 / t as f64
    }
}

/// Shuffled training batch with a per-row source flag.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub batch: LabelledBatch,
    pub from_replay: Vec<bool>,
}

impl MixedBatch {
    /// Split back into (current-task rows, replay rows), preserving order.
    pub fn split(&self) -> (LabelledBatch, LabelledBatch) {
        let (mut real, mut rep) = (Vec::new(), Vec::new());
        for (i, &r) in self.from_replay.iter().enumerate() {
            if r {
                rep.push(i);
            } else {
                real.push(i);
            }
        }
        (self.batch.select(&real), self.batch.select(&rep))
    }
}

/// `mix_batches(real, replay, spec)`: `⌊ρ·size⌋` replay rows plus
/// `size − ⌊ρ·size⌋` real rows, shuffled.
pub fn mix_batches(real: &LabelledBatch, replay: &LabelledBatch, spec: &ReplayBatchSpec) -> Result<MixedBatch> {
    ensure((0.0..=1.0).contains(&spec.rho), || "rho must lie in [0, 1]".into())?;
    if real.is_empty() && replay.is_empty() {
        return Err(Error::InvalidArgument("both batch sources are empty".into()));
    }
    real.check()?;
    replay.check()?;
    let n_rep = spec.replay_count();
    let n_real = spec.size - n_rep;
    ensure(replay.len() >= n_rep, || {
        format!("need {n_rep} replay rows, have {}", replay.len())
    })?;
    ensure(real.len() >= n_real, || {
        format!("need {n_real} real rows, have {}", real.len())
    })?;
    if n_rep > 0 && n_real > 0 {
        ensure(real.x.ncols() == replay.x.ncols(), || "pixel counts differ".into())?;
        ensure(real.domains.ncols() == replay.domains.ncols(), || {
            "domain widths differ".into()
        })?;
        ensure(real.labels.is_some() == replay.labels.is_some(), || {
            "only one source carries labels".into()
        })?;
    }
    let mut order: Vec<(bool, usize)> = (0..n_real)
        .map(|i| (false, i))
        .chain((0..n_rep).map(|i| (true, i)))
        .collect();
    order.shuffle(&mut seed::rng(spec.seed));

    let template = if n_real > 0 { real } else { replay };
    let pixels = template.x.ncols();
    let mut x = Mat::zeros((spec.size, pixels));
    let mut domains = Mat::zeros((spec.size, template.domains.ncols()));
    let mut labels = template
        .labels
        .as_ref()
        .map(|l| Mat::zeros((spec.size, l.ncols())));
    for (row, &(is_rep, i)) in order.iter().enumerate() {
        let src = if is_rep { replay } else { real };
        x.row_mut(row).assign(&src.x.row(i));
        domains.row_mut(row).assign(&src.domains.row(i));
        if let (Some(out), Some(l)) = (labels.as_mut(), src.labels.as_ref()) {
            out.row_mut(row).assign(&l.row(i));
        }
    }
    Ok(MixedBatch {
        batch: LabelledBatch { x, labels, domains },
        from_replay: order.iter().map(|&(r, _)| r).collect(),
    })
}

/// Where replay rows come from.
#[derive(Debug, Clone)]
pub enum ReplaySource {
    /// No replay: the forgetting ablation.
    None,
    Generative(ReplaySnapshot),
    /// A stored set of real rows, sampled with replacement. Used for the
    /// buffer-replay baseline and for the perfect-generator stub.
    Buffer(LabelledBatch),
}

impl ReplaySource {
    pub fn is_none(&self) -> bool {
        matches!(self, ReplaySource::None)
    }

    /// `n` replay rows with labels and domain codes padded to `k` domains.
    pub fn draw(&self, n: usize, k: usize, with_labels: bool, num_classes: usize, seed_value: u64) -> Result<LabelledBatch> {
        match self {
            ReplaySource::None => Ok(LabelledBatch::empty(0, with_labels.then_some(num_classes), k)),
            ReplaySource::Generative(snap) => {
                let (x, codes) = sample_replay(snap, n, seed_value)?;
                let labels = if with_labels {
                    Some(one_hot(&pseudo_label(&codes)?, num_classes)?)
                } else {
                    None
                };
                Ok(LabelledBatch {
                    x,
                    labels,
                    domains: pad_domains(&codes.a, k)?,
                })
            }
            ReplaySource::Buffer(buf) => {
                ensure(!buf.is_empty() || n == 0, || "replay buffer is empty".into())?;
                let mut rng = seed::rng(seed_value);
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..buf.len())).collect();
                let mut b = buf.select(&rows);
                b.domains = pad_domains(&b.domains, k)?;
                if !with_labels {
                    b.labels = None;
                }
                Ok(b)
            }
        }
    }
}
