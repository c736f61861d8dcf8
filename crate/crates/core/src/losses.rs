//! Training objectives.
//!
//! Every objective exists in two forms: a tape form (`*_var` / `*_terms`)
//! used by the trainer for gradients, and a plain form returning numbers.
//!
//! Sign convention: the evidence lower bound is reported as-is (larger is
//! better) in `LossReport::total` by [`elbo_joint`]. Every other report's
//! `total` is the quantity the optimizer *minimizes*, i.e. the negated
//! two-source ELBO plus any cross-entropy terms.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::latent::{self, GumbelDraw, LatentTriple, PriorConfig};
use crate::nets::{self, ModelBundle, NetKind, Network};
use crate::seed;
use crate::tape::{Mat, Tape, Var};

/// Linear schedule for the disentanglement capacity `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRamp {
    pub start: f64,
    pub end: f64,
}

impl CapacityRamp {
    /// `C` after `step` of `total` steps; held at `end` afterwards.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.end;
        }
        let frac = (step as f64 / total as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Gradient-penalty weight `λ`.
    pub lambda_gp: f64,
    /// Weight `β` of the unlabelled ELBO in the semi-supervised objective.
    pub beta: f64,
    /// Multiplier `γ` of the capacity penalty.
    pub gamma: f64,
    pub capacity: CapacityRamp,
    /// Replace the z-KL term with `γ·|KL − C|` in the unsupervised mode.
    pub disentangle: bool,
    pub n_critic: usize,
    /// Weight of the code-consistency term `η(q_δ(c|G(z, a, c)), c)` in the
    /// generator's adversarial objective (class-conditional modes only).
    #[serde(default = "default_info_weight")]
    pub info_weight: f64,
}

fn default_info_weight() -> f64 {
    3.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            beta: 1.0,
            gamma: 4.0,
            capacity: CapacityRamp {
                start: 0.5,
                end: 25.0,
            },
            disentangle: false,
            n_critic: 5,
            info_weight: default_info_weight(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lambda_gp >= 0.0, || "lambda_gp must be >= 0".into())?;
        ensure(self.beta >= 0.0, || "beta must be >= 0".into())?;
        ensure(self.gamma >= 0.0, || "gamma must be >= 0".into())?;
        ensure(self.capacity.start <= self.capacity.end, || {
            "capacity ramp start must not exceed its end".into()
        })?;
        ensure(self.n_critic >= 1, || "n_critic must be >= 1".into())?;
        ensure(self.info_weight >= 0.0, || "info_weight must be >= 0".into())?;
        Ok(())
    }
}

/// Named scalars logged for one step. Unused entries stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_a: f64,
    pub kl_c: f64,
    pub ce_a: f64,
    pub ce_c: f64,
    /// Code-consistency cross-entropy of generated samples.
    #[serde(default)]
    pub ce_gen: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 11] = [
        "d_loss", "g_loss", "gp", "recon", "kl_z", "kl_a", "kl_c", "ce_a", "ce_c", "ce_gen", "total",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.d_loss,
            self.g_loss,
            self.gp,
            self.recon,
            self.kl_z,
            self.kl_a,
            self.kl_c,
            self.ce_a,
            self.ce_c,
            self.ce_gen,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        Self {
            d_loss: v[0],
            g_loss: v[1],
            gp: v[2],
            recon: v[3],
            kl_z: v[4],
            kl_a: v[5],
            kl_c: v[6],
            ce_a: v[7],
            ce_c: v[8],
            ce_gen: v[9],
            total: v[10],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, other: &LossReport) {
        self.recon += other.recon;
        self.kl_z += other.kl_z;
        self.kl_a += other.kl_a;
        self.kl_c += other.kl_c;
        self.ce_a += other.ce_a;
        self.ce_c += other.ce_c;
    }
}

/// Parameters of the bundle placed on a tape. Only networks named in
/// `trainable` become leaves; the others are constants.
pub struct Bound {
    pub generator: Vec<Var>,
    pub critic: Vec<Var>,
    pub encoder: Vec<Var>,
    pub task_head: Vec<Var>,
    pub class_head: Vec<Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, bundle: &ModelBundle, trainable: &[NetKind]) -> Self {
        let mut bind = |k: NetKind| bundle.net(k).bind(tape, trainable.contains(&k));
        Self {
            generator: bind(NetKind::Generator),
            critic: bind(NetKind::Critic),
            encoder: bind(NetKind::Encoder),
            task_head: bind(NetKind::TaskHead),
            class_head: bind(NetKind::ClassHead),
        }
    }

    pub fn params(&self, kind: NetKind) -> &[Var] {
        match kind {
            NetKind::Generator => &self.generator,
            NetKind::Critic => &self.critic,
            NetKind::Encoder => &self.encoder,
            NetKind::TaskHead => &self.task_head,
            NetKind::ClassHead => &self.class_head,
        }
    }
}

// ---------------------------------------------------------------------------
// Adversarial terms

fn check_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Tape form of the gradient penalty
/// `mean_i (‖∇ D(x̃_i)‖₂ − 1)²` at `x̃ = u·real + (1−u)·fake`.
pub fn gradient_penalty_var(
    tape: &mut Tape,
    critic: &Network,
    critic_params: &[Var],
    real: &Mat,
    fake: &Mat,
    mix: &[f64],
) -> Result<Var> {
    check_same_shape(real, fake, "gradient penalty real/fake")?;
    ensure(mix.len() == real.nrows(), || {
        format!("expected {} mix coefficients, got {}", real.nrows(), mix.len())
    })?;
    ensure(mix.iter().all(|u| (0.0..=1.0).contains(u)), || {
        "mix coefficients must lie in [0, 1]".into()
    })?;
    let mut interp = fake.clone();
    for (i, &u) in mix.iter().enumerate() {
        let mut row = interp.row_mut(i);
        row.zip_mut_with(&real.row(i), |f, &r| *f = u * r + (1.0 - u) * *f);
    }
    let x = tape.leaf(interp);
    let scores = critic.forward(tape, critic_params, x);
    let total = tape.sum(scores);
    let gx = tape.grad(total, &[x])[0];
    let sq = tape.square(gx);
    let norm_sq = tape.sum_rows(sq);
    let eps = tape.add_scalar(norm_sq, 1e-16);
    let norm = tape.sqrt(eps);
    let dev = tape.add_scalar(norm, -1.0);
    let pen = tape.square(dev);
    Ok(tape.mean(pen))
}

/// `gradient_penalty(ω, real, fake, u)`.
pub fn gradient_penalty(critic: &Network, real: &Mat, fake: &Mat, mix: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = critic.bind(&mut tape, false);
    let gp = gradient_penalty_var(&mut tape, critic, &params, real, fake, mix)?;
    Ok(tape.scalar(gp))
}

pub struct CriticTerms {
    pub d_loss: Var,
    pub gp: Var,
    pub fake_mean: Var,
    pub real_mean: Var,
}

/// Critic objective on explicit samples:
/// `E[D(fake)] − E[D(real)] + λ·gp`.
pub fn critic_terms(
    tape: &mut Tape,
    critic: &Network,
    critic_params: &[Var],
    real: &Mat,
    fake: &Mat,
    mix: &[f64],
    lambda_gp: f64,
) -> Result<CriticTerms> {
    let fv = tape.constant(fake.clone());
    let rv = tape.constant(real.clone());
    let d_fake = critic.forward(tape, critic_params, fv);
    let d_real = critic.forward(tape, critic_params, rv);
    let fake_mean = tape.mean(d_fake);
    let real_mean = tape.mean(d_real);
    let gp = gradient_penalty_var(tape, critic, critic_params, real, fake, mix)?;
    let diff = tape.sub(fake_mean, real_mean);
    let weighted = tape.scale(gp, lambda_gp);
    let d_loss = tape.add(diff, weighted);
    Ok(CriticTerms {
        d_loss,
        gp,
        fake_mean,
        real_mean,
    })
}

/// Images from prior codes, on the tape.
pub fn generate_var(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    codes: &LatentTriple,
) -> Result<Var> {
    let z = tape.constant(codes.z.clone());
    let a = tape.constant(codes.a.clone());
    let c = codes.c.as_ref().map(|c| tape.constant(c.clone()));
    let logits = nets::generator_logits(tape, bundle, &bound.generator, z, a, c)?;
    Ok(tape.sigmoid(logits))
}

/// Generator objective `−E[D(G(codes))]`.
pub fn generator_loss_var(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    codes: &LatentTriple,
) -> Result<Var> {
    let fake = generate_var(tape, bundle, bound, codes)?;
    let scores = bundle.critic.forward(tape, &bound.critic, fake);
    let m = tape.mean(scores);
    Ok(tape.neg(m))
}

/// Generator objective of the wake phase:
/// `−E[D(G(codes))] + w·η(q_δ(c|G(codes)), c)`. The class head enters as a
/// constant; the second term ties generated images to their class code so
/// that replay pseudo-labels are meaningful. Returns `(total, adversarial,
/// consistency)`.
pub fn generator_objective_var(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    codes: &LatentTriple,
    info_weight: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let fake = generate_var(tape, bundle, bound, codes)?;
    let scores = bundle.critic.forward(tape, &bound.critic, fake);
    let m = tape.mean(scores);
    let adv = tape.neg(m);
    match (&codes.c, info_weight > 0.0) {
        (Some(c), true) => {
            let target = latent::harden(c);
            let logits = bundle.class_head.forward(tape, &bound.class_head, fake);
            let ce = cross_entropy_var(tape, logits, &target)?;
            let weighted = tape.scale(ce, info_weight);
            Ok((tape.add(adv, weighted), adv, Some(ce)))
        }
        _ => Ok((adv, adv, None)),
    }
}

/// Uniform mixing coefficients for the penalty's interpolates.
pub fn sample_mix(n: usize, seed_value: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seed::rng(seed_value);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// `(d_loss, g_loss)` for a real batch and prior codes. In the unsupervised
/// mode `codes.c` is `None`.
pub fn wgan_losses(
    bundle: &ModelBundle,
    real: &Mat,
    codes: &LatentTriple,
    weights: &LossWeights,
    seed_value: u64,
) -> Result<(f64, f64)> {
    ensure(real.nrows() == codes.len(), || {
        "real batch and codes must have the same size".into()
    })?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, bundle, &[]);
    let fake_v = generate_var(&mut tape, bundle, &bound, codes)?;
    let fake = tape.value(fake_v).clone();
    let mix = sample_mix(real.nrows(), seed_value);
    let terms = critic_terms(
        &mut tape,
        &bundle.critic,
        &bound.critic,
        real,
        &fake,
        &mix,
        weights.lambda_gp,
    )?;
    let g = tape.scalar(terms.fake_mean);
    let d = tape.scalar(terms.d_loss);
    let g_loss = -g;
    if !d.is_finite() || !g_loss.is_finite() {
        return Err(Error::NonFinite("wgan losses".into()));
    }
    Ok((d, g_loss))
}

// ---------------------------------------------------------------------------
// KL helpers

/// `KL[N(μ, σ²) ‖ N(0, I)]` summed over dimensions, averaged over rows.
pub fn kl_gaussian_std(mu: &Mat, sigma: &Mat) -> Result<f64> {
    check_same_shape(mu, sigma, "kl_gaussian_std")?;
    ensure(sigma.iter().all(|&s| s > 0.0), || "sigma must be positive".into())?;
    let n = mu.nrows().max(1) as f64;
    let total: f64 = mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum();
    Ok(total / n)
}

/// `KL[q ‖ p]` for two categorical distributions.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    ensure(q.len() == p.len(), || "q and p differ in length".into())?;
    latent::validate_probs(q)?;
    latent::validate_probs(p)?;
    let mut kl = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            if pi == 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += qi * (qi.ln() - pi.ln());
        }
    }
    Ok(kl.max(0.0))
}

/// `γ·|KL − C|`.
pub fn capacity_penalty(kl: f64, gamma: f64, capacity: f64) -> f64 {
    gamma * (kl - capacity).abs()
}

fn kl_gaussian_var(tape: &mut Tape, mu: Var, sigma: Var, logvar: Var) -> Var {
    // ½ Σ (μ² + σ² − 1 − logvar), averaged over rows
    let n = tape.shape(mu).0 as f64;
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let a = tape.add(mu2, s2);
    let b = tape.sub(a, logvar);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5 / n)
}

/// Row-averaged `KL[softmax(logits) ‖ Cat(prior)]`.
fn kl_categorical_var(tape: &mut Tape, logits: Var, prior: &[f64]) -> Var {
    let n = tape.shape(logits).0 as f64;
    let logq = tape.log_softmax(logits);
    let q = tape.exp(logq);
    let logp = tape.constant(Mat::from_shape_fn((1, prior.len()), |(_, j)| prior[j].ln()));
    let d = tape.sub(logq, logp);
    let t = tape.mul(q, d);
    let s = tape.sum(t);
    tape.scale(s, 1.0 / n)
}

/// Mean categorical cross-entropy of `softmax(logits)` against one-hot rows.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &Mat) -> Result<Var> {
    if tape.shape(logits) != labels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs labels {:?}",
            tape.shape(logits),
            labels.dim()
        )));
    }
    let n = labels.nrows().max(1) as f64;
    let logq = tape.log_softmax(logits);
    let y = tape.constant(labels.clone());
    let t = tape.mul(logq, y);
    let s = tape.sum(t);
    Ok(tape.scale(s, -1.0 / n))
}

pub fn cross_entropy(logits: &Mat, labels: &Mat) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy_var(&mut tape, l, labels)?;
    Ok(tape.scalar(ce))
}

/// `task_ce(ε, z, a*)`.
pub fn task_ce(bundle: &ModelBundle, z: &Mat, a_star: &Mat) -> Result<f64> {
    cross_entropy(&nets::infer_task(bundle, z)?, a_star)
}

/// `class_ce(δ, x, y)`.
pub fn class_ce(bundle: &ModelBundle, x: &Mat, y: &Mat) -> Result<f64> {
    cross_entropy(&nets::infer_class(bundle, x)?, y)
}

// ---------------------------------------------------------------------------
// ELBO

/// Noise for one ELBO evaluation: the reparameterization noise and the two
/// Gumbel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboDraws {
    pub eps: Mat,
    pub gumbel_a: GumbelDraw,
    pub gumbel_c: GumbelDraw,
}

impl ElboDraws {
    pub fn sample(n: usize, bundle: &ModelBundle, seed_value: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let arch = &bundle.arch;
        let mut rng = seed::rng(seed::derive(seed_value, "eps", 0));
        let eps = Mat::from_shape_fn((n, arch.dim_z), |_| StandardNormal.sample(&mut rng));
        Self {
            eps,
            gumbel_a: GumbelDraw::sample(n, arch.num_domains, seed::derive(seed_value, "ga", 0)),
            gumbel_c: GumbelDraw::sample(n, arch.num_classes, seed::derive(seed_value, "gc", 0)),
        }
    }
}

/// How the z-KL enters the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlZMode {
    Standard,
    /// `γ·|KL − C|` in place of the KL.
    Capacity { gamma: f64, capacity: f64 },
}

/// Tape nodes of one ELBO evaluation. All terms are batch means.
pub struct ElboTerms {
    pub recon: Var,
    pub kl_z: Var,
    /// The z-term actually subtracted (equals `kl_z` in standard mode).
    pub kl_z_term: Var,
    pub kl_a: Var,
    pub kl_c: Option<Var>,
    pub elbo: Var,
    pub z: Var,
    pub class_logits: Var,
}

/// Class code fed to the decoder.
#[derive(Debug, Clone, Copy)]
pub enum ClassCode<'a> {
    /// Gumbel-softmax sample from `q_δ(c|x)`.
    Inferred,
    /// Known one-hot labels substituted for `c`.
    Given(&'a Mat),
    /// Unconditional generator.
    Absent,
}

/// Bernoulli log-likelihood of `x` under pixel logits, summed over pixels,
/// averaged over rows: `Σ x·l − softplus(l)`.
fn bernoulli_loglik_var(tape: &mut Tape, x: &Mat, logits: Var) -> Var {
    let n = x.nrows().max(1) as f64;
    let xv = tape.constant(x.clone());
    let xl = tape.mul(xv, logits);
    let sp = tape.softplus(logits);
    let t = tape.sub(xl, sp);
    let s = tape.sum(t);
    tape.scale(s, 1.0 / n)
}

#[allow(clippy::too_many_arguments)]
pub fn elbo_terms(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    x: &Mat,
    prior: &PriorConfig,
    draws: &ElboDraws,
    class_code: ClassCode<'_>,
    kl_mode: KlZMode,
) -> Result<ElboTerms> {
    let arch = &bundle.arch;
    if x.ncols() != arch.image_shape.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} pixels, got {}",
            arch.image_shape.pixels(),
            x.ncols()
        )));
    }
    if draws.eps.dim() != (x.nrows(), arch.dim_z) {
        return Err(Error::ShapeMismatch("ELBO draws do not match the batch".into()));
    }
    let xv = tape.constant(x.clone());
    let (mu, sigma, logvar) = nets::encoder_outputs(tape, bundle, &bound.encoder, xv);
    let z = latent::reparameterize_var(tape, mu, sigma, &draws.eps);

    let a_logits = bundle.task_head.forward(tape, &bound.task_head, z);
    let a = latent::gumbel_softmax_var(
        tape,
        a_logits,
        prior.temperature,
        &draws.gumbel_a,
        prior.straight_through,
    );

    let class_logits = bundle.class_head.forward(tape, &bound.class_head, xv);
    let c = match class_code {
        ClassCode::Inferred => Some(latent::gumbel_softmax_var(
            tape,
            class_logits,
            prior.temperature,
            &draws.gumbel_c,
            prior.straight_through,
        )),
        ClassCode::Given(labels) => {
            if labels.dim() != (x.nrows(), arch.num_classes) {
                return Err(Error::ShapeMismatch("label matrix does not match batch".into()));
            }
            Some(tape.constant(labels.clone()))
        }
        ClassCode::Absent => None,
    };
    let x_logits = nets::generator_logits(tape, bundle, &bound.generator, z, a, c)?;

    let recon = bernoulli_loglik_var(tape, x, x_logits);
    let kl_z = kl_gaussian_var(tape, mu, sigma, logvar);
    let kl_z_term = match kl_mode {
        KlZMode::Standard => kl_z,
        KlZMode::Capacity { gamma, capacity } => {
            let d = tape.add_scalar(kl_z, -capacity);
            let ad = tape.abs(d);
            tape.scale(ad, gamma)
        }
    };
    let kl_a = kl_categorical_var(tape, a_logits, &prior.domain_probs);
    let kl_c = match class_code {
        ClassCode::Absent => None,
        _ => Some(kl_categorical_var(tape, class_logits, &prior.class_probs)),
    };
    let mut elbo = tape.sub(recon, kl_z_term);
    elbo = tape.sub(elbo, kl_a);
    if let Some(kc) = kl_c {
        elbo = tape.sub(elbo, kc);
    }
    Ok(ElboTerms {
        recon,
        kl_z,
        kl_z_term,
        kl_a,
        kl_c,
        elbo,
        z,
        class_logits,
    })
}

fn report_from(tape: &Tape, t: &ElboTerms) -> LossReport {
    LossReport {
        recon: tape.scalar(t.recon),
        kl_z: tape.scalar(t.kl_z),
        kl_a: tape.scalar(t.kl_a),
        kl_c: t.kl_c.map(|v| tape.scalar(v)).unwrap_or(0.0),
        total: tape.scalar(t.elbo),
        ..Default::default()
    }
}

/// `elbo_joint(bundle, x, cfg, draws)`: single-sample Monte-Carlo estimate of
/// `recon − kl_z − kl_a − kl_c`, reported in `total`.
pub fn elbo_joint(
    bundle: &ModelBundle,
    x: &Mat,
    prior: &PriorConfig,
    draws: &ElboDraws,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, bundle, &[]);
    let code = if bundle.arch.class_conditional {
        ClassCode::Inferred
    } else {
        ClassCode::Absent
    };
    let terms = elbo_terms(
        &mut tape,
        bundle,
        &bound,
        x,
        prior,
        draws,
        code,
        KlZMode::Standard,
    )?;
    let report = report_from(&tape, &terms);
    report.check_finite()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Dreaming-phase objectives

/// One source of the two-source objectives (current task or replay).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBatch {
    pub x: Mat,
    /// One-hot class labels (true labels or replay pseudo-labels).
    pub labels: Option<Mat>,
    /// One-hot task identities `a*`.
    pub domains: Mat,
    pub draws: ElboDraws,
}

impl SourceBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Minimization target and its report.
pub struct Objective {
    pub loss: Var,
    pub report: LossReport,
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, v),
        None => v,
    })
}

/// Supervised dreaming objective: `−(ELBO(current) + ELBO(replay))` plus
/// class and task cross-entropies on both sources. The known label replaces
/// `c` at the decoder input, which keeps the generator class-conditional so
/// that replay pseudo-labels stay meaningful.
pub fn dream_loss_supervised(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    current: &SourceBatch,
    replay: Option<&SourceBatch>,
    prior: &PriorConfig,
) -> Result<Objective> {
    if !bundle.arch.class_conditional {
        return Err(Error::ModeMismatch("unsupervised".into()));
    }
    let mut loss: Option<Var> = None;
    let mut report = LossReport::default();
    for src in std::iter::once(current).chain(replay) {
        if src.is_empty() {
            continue;
        }
        let labels = src
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels("supervised dreaming".into()))?;
        let t = elbo_terms(
            tape,
            bundle,
            bound,
            &src.x,
            prior,
            &src.draws,
            ClassCode::Given(labels),
            KlZMode::Standard,
        )?;
        let ce_c = cross_entropy_var(tape, t.class_logits, labels)?;
        let a_logits = bundle.task_head.forward(tape, &bound.task_head, t.z);
        let ce_a = cross_entropy_var(tape, a_logits, &src.domains)?;
        let mut part = report_from(tape, &t);
        part.ce_c = tape.scalar(ce_c);
        part.ce_a = tape.scalar(ce_a);
        report.accumulate(&part);

        let neg = tape.neg(t.elbo);
        let with_c = tape.add(neg, ce_c);
        let src_loss = tape.add(with_c, ce_a);
        loss = add_opt(tape, loss, src_loss);
    }
    let loss = loss.ok_or_else(|| Error::InvalidArgument("no data for dreaming".into()))?;
    report.total = tape.scalar(loss);
    report.check_finite()?;
    Ok(Objective { loss, report })
}

/// Semi-supervised dreaming objective:
/// `−Σ_labelled L^S − β·L_VAE(unlabelled) + L_c(labelled) + L_a(labelled)`.
///
/// `labelled` holds the labelled current-task batch and, after the first
/// task, the pseudo-labelled replay batch. In `L^S` the known label replaces
/// `c` at the decoder input.
pub fn semi_supervised_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    labelled: &[&SourceBatch],
    unlabelled: Option<&SourceBatch>,
    weights: &LossWeights,
    prior: &PriorConfig,
) -> Result<Objective> {
    ensure(weights.beta >= 0.0, || "beta must be >= 0".into())?;
    if !bundle.arch.class_conditional {
        return Err(Error::ModeMismatch("unsupervised".into()));
    }
    let mut loss: Option<Var> = None;
    let mut report = LossReport::default();
    for src in labelled.iter().filter(|s| !s.is_empty()) {
        let labels = src
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels("labelled source".into()))?;
        let t = elbo_terms(
            tape,
            bundle,
            bound,
            &src.x,
            prior,
            &src.draws,
            ClassCode::Given(labels),
            KlZMode::Standard,
        )?;
        let ce_c = cross_entropy_var(tape, t.class_logits, labels)?;
        let a_logits = bundle.task_head.forward(tape, &bound.task_head, t.z);
        let ce_a = cross_entropy_var(tape, a_logits, &src.domains)?;
        let mut part = report_from(tape, &t);
        part.ce_c = tape.scalar(ce_c);
        part.ce_a = tape.scalar(ce_a);
        report.accumulate(&part);
        let neg = tape.neg(t.elbo);
        let a = tape.add(neg, ce_c);
        let src_loss = tape.add(a, ce_a);
        loss = add_opt(tape, loss, src_loss);
    }
    if let Some(src) = unlabelled.filter(|s| !s.is_empty() && weights.beta > 0.0) {
        let t = elbo_terms(
            tape,
            bundle,
            bound,
            &src.x,
            prior,
            &src.draws,
            ClassCode::Inferred,
            KlZMode::Standard,
        )?;
        let part = report_from(tape, &t);
        report.accumulate(&part);
        let weighted = tape.scale(t.elbo, -weights.beta);
        loss = add_opt(tape, loss, weighted);
    }
    let loss = loss.ok_or_else(|| Error::InvalidArgument("no data for dreaming".into()))?;
    report.total = tape.scalar(loss);
    report.check_finite()?;
    Ok(Objective { loss, report })
}

/// Unsupervised dreaming objective: two-source ELBO without `c`. With
/// `weights.disentangle` the z-KL is replaced by `γ·|KL − C(step)|`.
#[allow(clippy::too_many_arguments)]
pub fn unsup_dream_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    current: &SourceBatch,
    replay: Option<&SourceBatch>,
    weights: &LossWeights,
    prior: &PriorConfig,
    step: u64,
    ramp_steps: u64,
) -> Result<Objective> {
    ensure(weights.gamma >= 0.0, || "gamma must be >= 0".into())?;
    if bundle.arch.class_conditional {
        return Err(Error::ModeMismatch("class-conditional".into()));
    }
    let kl_mode = if weights.disentangle {
        KlZMode::Capacity {
            gamma: weights.gamma,
            capacity: weights.capacity.at(step, ramp_steps),
        }
    } else {
        KlZMode::Standard
    };
    let mut loss: Option<Var> = None;
    let mut report = LossReport::default();
    for src in std::iter::once(current).chain(replay) {
        if src.is_empty() {
            continue;
        }
        let t = elbo_terms(
            tape,
            bundle,
            bound,
            &src.x,
            prior,
            &src.draws,
            ClassCode::Absent,
            kl_mode,
        )?;
        report.accumulate(&report_from(tape, &t));
        let neg = tape.neg(t.elbo);
        loss = add_opt(tape, loss, neg);
    }
    let loss = loss.ok_or_else(|| Error::InvalidArgument("no data for dreaming".into()))?;
    report.total = tape.scalar(loss);
    report.check_finite()?;
    Ok(Objective { loss, report })
}
