//! Latent codes and their samplers: the continuous prior `z ~ N(0, I)`, the
//! categorical priors over classes `c` and domains `a`, the reparameterized
//! posterior sample, the Gumbel-softmax relaxation, and domain expansion when
//! a new task arrives.

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nets::{self, argmax_rows, ModelBundle, Network};
use crate::seed;
use crate::tape::{Mat, Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.67;
const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub dim_z: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub domain_probs: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub temperature: f64,
    /// `m_i`: probability of seeing task `i`, the target for the task head.
    pub empirical_task_probs: Vec<f64>,
    /// Hard one-hot forward pass with the relaxed gradient.
    #[serde(default)]
    pub straight_through: bool,
}

impl PriorConfig {
    /// Uniform class and domain priors.
    pub fn uniform(dim_z: usize, num_classes: usize, num_domains: usize) -> Self {
        Self {
            dim_z,
            num_classes,
            num_domains,
            domain_probs: uniform(num_domains),
            class_probs: uniform(num_classes),
            temperature: DEFAULT_TEMPERATURE,
            empirical_task_probs: uniform(num_domains),
            straight_through: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.dim_z > 0, || "dim_z must be positive".into())?;
        ensure(self.num_classes > 0, || "num_classes must be positive".into())?;
        ensure(self.num_domains > 0, || "num_domains must be positive".into())?;
        ensure(self.temperature > 0.0 && self.temperature.is_finite(), || {
            format!("temperature must be positive, got {}", self.temperature)
        })?;
        for (name, probs, len) in [
            ("domain_probs", &self.domain_probs, self.num_domains),
            ("class_probs", &self.class_probs, self.num_classes),
            ("empirical_task_probs", &self.empirical_task_probs, self.num_domains),
        ] {
            ensure(probs.len() == len, || {
                format!("{name} has {} entries, expected {len}", probs.len())
            })?;
            validate_probs(probs)?;
        }
        Ok(())
    }
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn validate_probs(probs: &[f64]) -> Result<()> {
    ensure(!probs.is_empty(), || "empty probability vector".into())?;
    ensure(probs.iter().all(|p| p.is_finite() && *p >= 0.0), || {
        format!("probabilities must be finite and non-negative: {probs:?}")
    })?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

/// A batch of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTriple {
    pub z: Mat,
    /// Class code, `batch × L`. Absent for unconditional generators.
    pub c: Option<Mat>,
    pub a: Mat,
    pub hard_c: bool,
    pub hard_a: bool,
}

impl LatentTriple {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex_rows(&self.a, self.hard_a, "a")?;
        if let Some(c) = &self.c {
            check_simplex_rows(c, self.hard_c, "c")?;
        }
        Ok(())
    }

    /// Draw every code from the prior: `z ~ N(0, I)`, `c ~ Cat(class_probs)`,
    /// `a ~ Cat(domain_probs)`. The class code is omitted when
    /// `class_conditional` is false.
    pub fn sample_prior(
        n: usize,
        cfg: &PriorConfig,
        class_conditional: bool,
        seed_value: u64,
    ) -> Result<Self> {
        let z = sample_continuous_prior(n, cfg.dim_z, seed::derive(seed_value, "z", 0))?;
        let a = sample_categorical_prior(n, &cfg.domain_probs, seed::derive(seed_value, "a", 0))?;
        let c = if class_conditional {
            Some(sample_categorical_prior(
                n,
                &cfg.class_probs,
                seed::derive(seed_value, "c", 0),
            )?)
        } else {
            None
        };
        Ok(Self {
            z,
            c,
            a,
            hard_c: true,
            hard_a: true,
        })
    }
}

fn check_simplex_rows(m: &Mat, hard: bool, name: &str) -> Result<()> {
    for row in m.axis_iter(Axis(0)) {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("{name} row not on the simplex")));
        }
        if hard && row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("{name} row not one-hot")));
        }
    }
    Ok(())
}

/// Gumbel(0, 1) noise for one relaxation, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    pub g: Mat,
    pub seed: u64,
}

impl GumbelDraw {
    pub fn sample(rows: usize, cols: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let g = Mat::from_shape_fn((rows, cols), |_| {
            // u in (0, 1): open interval keeps both logs finite
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        });
        Self { g, seed: seed_value }
    }
}

pub fn sample_continuous_prior(n: usize, dim_z: usize, seed_value: u64) -> Result<Mat> {
    ensure(n >= 1, || "n must be at least 1".into())?;
    ensure(dim_z >= 1, || "dim_z must be at least 1".into())?;
    let mut rng = seed::rng(seed_value);
    Ok(Mat::from_shape_fn((n, dim_z), |_| StandardNormal.sample(&mut rng)))
}

/// One-hot rows drawn from `Cat(probs)` by inverse-CDF sampling.
pub fn sample_categorical_prior(n: usize, probs: &[f64], seed_value: u64) -> Result<Mat> {
    validate_probs(probs)?;
    let mut rng = seed::rng(seed_value);
    let mut out = Mat::zeros((n, probs.len()));
    let last_nonzero = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = last_nonzero;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                k = j;
                break;
            }
        }
        row[k] = 1.0;
    }
    Ok(out)
}

/// `z = μ + π ⊗ σ`.
pub fn reparameterize(mu: &Mat, sigma: &Mat, noise: &Mat) -> Result<Mat> {
    if mu.dim() != sigma.dim() || mu.dim() != noise.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mu {:?}, sigma {:?}, noise {:?}",
            mu.dim(),
            sigma.dim(),
            noise.dim()
        )));
    }
    ensure(sigma.iter().all(|&s| s > 0.0), || "sigma must be positive".into())?;
    Ok(mu + &(noise * sigma))
}

/// Tape version of [`reparameterize`], differentiable in `μ` and `σ`.
pub fn reparameterize_var(tape: &mut Tape, mu: Var, sigma: Var, noise: &Mat) -> Var {
    let n = tape.constant(noise.clone());
    let scaled = tape.mul(n, sigma);
    tape.add(mu, scaled)
}

fn check_gumbel_args(logits: &Mat, temperature: f64, draw: &GumbelDraw) -> Result<()> {
    ensure(temperature > 0.0 && temperature.is_finite(), || {
        format!("temperature must be positive, got {temperature}")
    })?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits".into()));
    }
    if logits.dim() != draw.g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs gumbel noise {:?}",
            logits.dim(),
            draw.g.dim()
        )));
    }
    Ok(())
}

/// Relaxed one-hot sample: `softmax((log softmax(logits) + g) / T)` per row.
pub fn gumbel_softmax(logits: &Mat, temperature: f64, draw: &GumbelDraw) -> Result<Mat> {
    check_gumbel_args(logits, temperature, draw)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let y = gumbel_softmax_var(&mut tape, l, temperature, draw, false);
    Ok(tape.value(y).clone())
}

/// Tape version of [`gumbel_softmax`]. With `straight_through` the forward
/// value is the hardened one-hot while gradients follow the relaxation.
pub fn gumbel_softmax_var(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    draw: &GumbelDraw,
    straight_through: bool,
) -> Var {
    let log_p = tape.log_softmax(logits);
    let g = tape.constant(draw.g.clone());
    let perturbed = tape.add(log_p, g);
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let y = tape.softmax(scaled);
    if straight_through {
        let soft = tape.value(y).clone();
        let hard = harden(&soft);
        let delta = tape.constant(hard - soft);
        tape.add(y, delta)
    } else {
        y
    }
}

/// Argmax one-hot per row, ties resolved toward the lowest index.
pub fn harden(relaxed: &Mat) -> Mat {
    let mut out = Mat::zeros(relaxed.dim());
    for (i, k) in argmax_rows(relaxed).into_iter().enumerate() {
        if relaxed.ncols() > 0 {
            out[[i, k]] = 1.0;
        }
    }
    out
}

/// Grow the domain variable by one unit for a new task: `K → K+1`, priors
/// reset to uniform over the seen tasks, and the task head gains one output
/// unit. Existing head weights are kept bit-exact.
pub fn expand_domain(
    cfg: &PriorConfig,
    task_head: &Network,
    in_epoch: bool,
    seed_value: u64,
) -> Result<(PriorConfig, Network)> {
    if in_epoch {
        return Err(Error::MidEpochExpansion);
    }
    let k = cfg.num_domains + 1;
    let mut next = cfg.clone();
    next.num_domains = k;
    next.domain_probs = uniform(k);
    next.empirical_task_probs = uniform(k);
    let mut head = task_head.clone();
    let mut rng = seed::rng(seed_value);
    nets::append_output_unit(&mut head, &mut rng)?;
    Ok((next, head))
}

/// Domain expansion applied to a whole bundle: the task head gains an output
/// and the generator gains the matching input column.
pub fn expand_bundle_domain(
    bundle: &ModelBundle,
    cfg: &PriorConfig,
    in_epoch: bool,
    seed_value: u64,
) -> Result<(PriorConfig, ModelBundle)> {
    let (next_cfg, head) = expand_domain(cfg, &bundle.task_head, in_epoch, seed_value)?;
    let mut next = bundle.clone();
    next.task_head = head;
    let mut rng = seed::rng(seed::derive(seed_value, "generator-domain-row", 0));
    let at = bundle.arch.dim_z + bundle.arch.num_domains;
    nets::insert_generator_domain_row(&mut next.generator, at, &mut rng)?;
    next.arch.num_domains += 1;
    next.validate()?;
    Ok((next_cfg, next))
}

/// Mean Shannon entropy of the rows of a simplex matrix.
pub fn mean_row_entropy(m: &Mat) -> f64 {
    let total: f64 = m
        .axis_iter(Axis(0))
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / m.nrows().max(1) as f64
}
