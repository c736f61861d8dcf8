//! Acceptance gate. Runs every criterion at its pinned tolerance, prints
//! one PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! The two training criteria run the full desk-scale experiments (tens of
//! minutes on a CPU); everything else finishes in seconds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lvaegan::bounds::{self, BoundConstants, RiskProbeInputs, SampleCloud};
use lvaegan::cli::{self, RunConfig};
use lvaegan::conjugate::{LinearGaussian, Normal1};
use lvaegan::data::{self, IdxSources, LoadOptions};
use lvaegan::evalsuite;
use lvaegan::latent::{self, GumbelDraw, LatentTriple, PriorConfig};
use lvaegan::losses::{self, Bound, ElboDraws, LossWeights, SourceBatch};
use lvaegan::nets::{self, ArchitectureSpec, ImageShape, ModelBundle, NetKind};
use lvaegan::probe::ProbeSpec;
use lvaegan::replay::{self, LabelledBatch, ReplayBatchSpec, ReplaySource};
use lvaegan::tape::{Mat, Tape, Var};
use lvaegan::trainer::{self, Mode, Optimizers, ReplayKind, TrainConfig, TrainState};

// pinned thresholds
const C1_MIN_ACC: f64 = 0.85;
const C1_MIN_GAP: f64 = 0.30;
const C2_MAX_ERROR: f64 = 0.12;
const C3_SIMPLEX_TOL: f64 = 1e-6;
const C3_FREQ_TOL: f64 = 0.02;
const C3_DRAWS: usize = 100_000;
const C4_GP_TOL: f64 = 1e-6;
const C4_KL_TOL: f64 = 1e-9;
const C4_CE_TOL: f64 = 1e-6;
const C4_FD_REL: f64 = 1e-3;
const C4_MAX_PARAMS: usize = 50;
const C5_PARAMETERIZATIONS: usize = 100;
const C5_GAP_TOL: f64 = 1e-3;
const C6_SHIFT_REL: f64 = 0.05;
const C6_SHIFT_N: usize = 2000;
const C6_AXIOM_TOL: f64 = 1e-6;
const C7_MIN_HOLDS: f64 = 0.95;
const C7_STUB_TOL: f64 = 0.03;
const C8_MARGINAL_TOL: f64 = 0.01;
const C8_MIN_P: f64 = 0.01;
const C10_ENDPOINT_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn check(ok: &mut bool, cond: bool, msg: &mut Vec<String>, what: String) {
    if !cond {
        *ok = false;
        msg.push(format!("FAILED {what}"));
    } else {
        msg.push(what);
    }
}

/// Task directories shared by the training criteria.
struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data_root: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().expect("temp dir");
    let data_root = tmp.path().join("data");
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mnist5k");
    data::import_idx(&IdxSources::in_dir(&fixtures), &data_root, "mnist").expect("import mnist");
    let train = lvaegan::synth::garments(5000, 11).expect("synth train");
    let test = lvaegan::synth::garments(1000, 12).expect("synth test");
    data::write_task(&data_root, "fashion", &train, &test).expect("write fashion");
    Workspace {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
        data_root,
    }
}

fn base_config(ws: &Workspace, name: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.name = name.into();
    cfg.run.out_dir = ws.root.join(name);
    cfg.run.data_root = Some(ws.data_root.clone());
    cfg.run.seed = 2024;
    cfg.train.epochs = 10;
    cfg.train.adam.lr = 1e-3;
    cfg
}

// ---------------------------------------------------------------------------
// 1. forgetting with and without replay

struct ForgettingRuns {
    with_replay: PathBuf,
    outcome: Outcome,
}

fn criterion1(ws: &Workspace) -> ForgettingRuns {
    let mut gen = base_config(ws, "replay");
    gen.run.tasks = vec!["mnist".into(), "fashion".into()];
    gen.train.replay = ReplayKind::Generative;
    let mut none = base_config(ws, "no_replay");
    none.run.tasks = gen.run.tasks.clone();
    none.train.replay = ReplayKind::None;
    none.bounds.enabled = false;

    let a = cli::train(&gen).expect("replay run");
    let b = cli::train(&none).expect("no-replay run");
    let acc = |s: &cli::TrainSummary| s.final_accuracy.iter().find(|(n, _)| n == "mnist").map(|p| p.1).unwrap_or(0.0);
    let (acc_gen, acc_none) = (acc(&a), acc(&b));

    let drop = |dir: &Path| {
        let records = evalsuite::read_metrics_csv(&dir.join("metrics.csv")).ok()?;
        let curve = evalsuite::forgetting_curve(&records, &["mnist", "fashion"]).ok()?;
        curve.drop_from_peak(0, usize::MAX)
    };
    let detail = format!(
        "final MNIST accuracy {acc_gen:.3} with replay (>= {C1_MIN_ACC}), {acc_none:.3} without; gap {:.3} (>= {C1_MIN_GAP}); drop from peak {:.3} vs {:.3}",
        acc_gen - acc_none,
        drop(&a.run_dir).unwrap_or(f64::NAN),
        drop(&b.run_dir).unwrap_or(f64::NAN)
    );
    ForgettingRuns {
        with_replay: a.run_dir,
        outcome: outcome(acc_gen >= C1_MIN_ACC && acc_gen - acc_none >= C1_MIN_GAP, detail),
    }
}

// ---------------------------------------------------------------------------
// 2. semi-supervised benefit

fn criterion2(ws: &Workspace) -> Outcome {
    let run = |name: &str, beta: f64| {
        let mut cfg = base_config(ws, name);
        cfg.run.tasks = vec!["mnist".into()];
        cfg.train.mode = Mode::Semi;
        cfg.semi.n_labelled = 1000;
        cfg.train.weights.beta = beta;
        cfg.bounds.enabled = false;
        let s = cli::train(&cfg).expect("semi run");
        s.final_accuracy.iter().find(|(n, _)| n == "mnist").map(|p| p.1).unwrap_or(0.0)
    };
    let with_beta = run("semi_beta1", 1.0);
    let without = run("semi_beta0", 0.0);
    let err = 1.0 - with_beta;
    outcome(
        err <= C2_MAX_ERROR && without < with_beta,
        format!("test error {err:.4} (<= {C2_MAX_ERROR}); beta=0 error {:.4} (must be larger)", 1.0 - without),
    )
}

// ---------------------------------------------------------------------------
// 3. Gumbel-softmax

fn entropy_rows(m: &Mat) -> f64 {
    let mut total = 0.0;
    for row in m.axis_iter(Axis(0)) {
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    total / m.nrows() as f64
}

fn criterion3() -> Outcome {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let logits_row: Vec<f64> = probs.iter().map(|p: &f64| p.ln() + 0.7).collect();
    let mut msg = Vec::new();
    let mut ok = true;

    // simplex normalization on random logits
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Mat::from_shape_fn((500, 6), |_| rng.gen_range(-8.0..8.0));
    let draw = GumbelDraw::sample(500, 6, 4);
    let mut worst: f64 = 0.0;
    for t in [0.05, 0.67, 5.0] {
        let y = latent::gumbel_softmax(&logits, t, &draw).expect("gumbel");
        for row in y.axis_iter(Axis(0)) {
            worst = worst.max((row.sum() - 1.0).abs());
            if row.iter().any(|&v| v < 0.0) {
                worst = f64::INFINITY;
            }
        }
    }
    check(&mut ok, worst <= C3_SIMPLEX_TOL, &mut msg, format!("simplex error {worst:.1e}"));

    // entropy increases with temperature under fixed noise
    let temps = [0.1, 0.3, 0.67, 1.0, 2.0, 5.0, 20.0];
    let ents: Vec<f64> = temps
        .iter()
        .map(|&t| entropy_rows(&latent::gumbel_softmax(&logits, t, &draw).expect("gumbel")))
        .collect();
    let monotone = ents.windows(2).all(|w| w[1] > w[0]);
    check(&mut ok, monotone, &mut msg, "entropy monotone in T".into());

    // low temperature argmax frequencies against a direct sampler
    let l = Mat::from_shape_fn((C3_DRAWS, 4), |(_, j)| logits_row[j]);
    let y = latent::gumbel_softmax(&l, 0.01, &GumbelDraw::sample(C3_DRAWS, 4, 5)).expect("gumbel");
    let mut freq = [0.0; 4];
    for k in nets::argmax_rows(&y) {
        freq[k] += 1.0 / C3_DRAWS as f64;
    }
    let mut oracle = [0.0; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..C3_DRAWS {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = 3;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                k = i;
                break;
            }
        }
        oracle[k] += 1.0 / C3_DRAWS as f64;
    }
    let dev = freq.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(&mut ok, dev <= C3_FREQ_TOL, &mut msg, format!("max frequency deviation {dev:.4}"));
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 4. analytic loss values and finite-difference gradients

fn toy_arch(class_conditional: bool) -> ArchitectureSpec {
    ArchitectureSpec {
        image_shape: ImageShape::new(1, 2, 1),
        dim_z: 2,
        num_classes: 2,
        num_domains: 2,
        class_conditional,
        generator_hidden: vec![3],
        critic_hidden: vec![3],
        encoder_hidden: vec![3],
        task_hidden: vec![2],
        class_hidden: vec![3],
        activation: nets::Activation::Tanh,
        ..Default::default()
    }
}

fn uniform01(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((n, d), |_| rng.gen_range(0.05..0.95))
}

fn one_hot_rows(n: usize, k: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::zeros((n, k));
    for i in 0..n {
        m[[i, rng.gen_range(0..k)]] = 1.0;
    }
    m
}

fn source(bundle: &ModelBundle, n: usize, seed: u64, labelled: bool) -> SourceBatch {
    SourceBatch {
        x: uniform01(n, bundle.arch.image_shape.pixels(), seed),
        labels: labelled.then(|| one_hot_rows(n, bundle.arch.num_classes, seed + 1)),
        domains: one_hot_rows(n, bundle.arch.num_domains, seed + 2),
        draws: ElboDraws::sample(n, bundle, seed + 3),
    }
}

type LossFn<'a> = dyn Fn(&mut Tape, &ModelBundle, &Bound) -> Var + 'a;

/// Worst relative error between tape gradients and central differences of
/// `loss` with respect to every parameter of `kind`.
fn fd_check(bundle: &ModelBundle, kind: NetKind, loss: &LossFn<'_>) -> (f64, usize, usize) {
    let value = |b: &ModelBundle| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, b, &[]);
        let v = loss(&mut tape, b, &bound);
        tape.scalar(v)
    };
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, bundle, &[kind]);
    let l = loss(&mut tape, bundle, &bound);
    let grads = tape.grad(l, bound.params(kind));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for (pi, g) in grads.iter().enumerate() {
        let analytic = tape.value(*g).clone();
        for ((r, c), &a) in analytic.indexed_iter() {
            let mut bp = bundle.clone();
            bp.net_mut(kind).params[pi][[r, c]] += h;
            let mut bm = bundle.clone();
            bm.net_mut(kind).params[pi][[r, c]] -= h;
            let num = (value(&bp) - value(&bm)) / (2.0 * h);
            // entries below the step's own resolution are compared absolutely
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            worst = worst.max(err);
            nonzero += usize::from(a.abs() > 1e-8);
        }
    }
    (worst, bundle.net(kind).num_parameters(), nonzero)
}

fn criterion4() -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;

    // gradient penalty of a unit-norm linear critic
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let dim = 5;
    let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let weight = Mat::from_shape_fn((dim, 1), |(i, _)| w[i] / norm);
    let critic = nets::Network::from_parts(
        nets::mlp_layers(dim, &[], 1, nets::Activation::Tanh),
        vec![weight, Mat::zeros((1, 1))],
    )
    .expect("linear critic");
    let real = uniform01(8, dim, 41);
    let fake = uniform01(8, dim, 42);
    let gp = losses::gradient_penalty(&critic, &real, &fake, &losses::sample_mix(8, 43)).expect("gp");
    check(&mut ok, gp.abs() <= C4_GP_TOL, &mut msg, format!("unit linear critic penalty {gp:.2e}"));

    let kl = losses::kl_gaussian_std(&Mat::from_elem((1, 1), 1.0), &Mat::from_elem((1, 1), 1.0)).expect("kl");
    check(&mut ok, (kl - 0.5).abs() <= C4_KL_TOL, &mut msg, format!("kl(1,1) = {kl}"));

    let l = 7;
    let ce = losses::cross_entropy(&Mat::from_elem((3, l), 0.3), &one_hot_rows(3, l, 44)).expect("ce");
    check(&mut ok, (ce - (l as f64).ln()).abs() <= C4_CE_TOL, &mut msg, format!("uniform-logit CE - ln L = {:.1e}", ce - (l as f64).ln()));

    // gradients of every objective on tiny networks
    let sup = ModelBundle::new(toy_arch(true), 45).expect("bundle");
    let unsup = ModelBundle::new(toy_arch(false), 46).expect("bundle");
    let prior = PriorConfig::uniform(2, 2, 2);
    let cur = source(&sup, 4, 50, true);
    let rep = source(&sup, 4, 60, true);
    let unl = source(&sup, 5, 70, false);
    let ucur = source(&unsup, 4, 80, false);
    let urep = source(&unsup, 4, 90, false);
    let codes = LatentTriple::sample_prior(4, &prior, true, 47).expect("codes");
    let ucodes = LatentTriple::sample_prior(4, &prior, false, 48).expect("codes");
    let real = uniform01(4, 2, 49);
    let mix = losses::sample_mix(4, 51);
    let weights = LossWeights::default();
    let capacity = LossWeights {
        disentangle: true,
        ..Default::default()
    };

    let cases: Vec<(&str, &ModelBundle, NetKind, Box<LossFn<'_>>)> = vec![
        ("critic loss", &sup, NetKind::Critic, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            let fake = nets::generate(b, &codes.z, &codes.a, codes.c.as_ref()).unwrap();
            losses::critic_terms(t, &b.critic, &bd.critic, &real, &fake, &mix, 10.0).unwrap().d_loss
        })),
        ("gradient penalty", &sup, NetKind::Critic, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            let fake = uniform01(4, 2, 52);
            losses::gradient_penalty_var(t, &b.critic, &bd.critic, &real, &fake, &mix).unwrap()
        })),
        ("generator objective", &sup, NetKind::Generator, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::generator_objective_var(t, b, bd, &codes, 3.0).unwrap().0
        })),
        ("unsupervised generator loss", &unsup, NetKind::Generator, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::generator_loss_var(t, b, bd, &ucodes).unwrap()
        })),
        ("supervised dreaming (generator)", &sup, NetKind::Generator, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::dream_loss_supervised(t, b, bd, &cur, Some(&rep), &prior).unwrap().loss
        })),
        ("supervised dreaming (encoder)", &sup, NetKind::Encoder, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::dream_loss_supervised(t, b, bd, &cur, Some(&rep), &prior).unwrap().loss
        })),
        ("supervised dreaming (task head)", &sup, NetKind::TaskHead, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::dream_loss_supervised(t, b, bd, &cur, Some(&rep), &prior).unwrap().loss
        })),
        ("semi-supervised (class head)", &sup, NetKind::ClassHead, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::semi_supervised_loss(t, b, bd, &[&cur, &rep], Some(&unl), &weights, &prior).unwrap().loss
        })),
        ("semi-supervised (encoder)", &sup, NetKind::Encoder, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::semi_supervised_loss(t, b, bd, &[&cur], Some(&unl), &weights, &prior).unwrap().loss
        })),
        ("unsupervised dreaming", &unsup, NetKind::Encoder, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::unsup_dream_loss(t, b, bd, &ucur, Some(&urep), &weights, &prior, 0, 10).unwrap().loss
        })),
        ("capacity variant", &unsup, NetKind::Encoder, Box::new(|t: &mut Tape, b: &ModelBundle, bd: &Bound| {
            losses::unsup_dream_loss(t, b, bd, &ucur, Some(&urep), &capacity, &prior, 3, 10).unwrap().loss
        })),
    ];
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for (name, bundle, kind, f) in &cases {
        let (err, params, nonzero) = fd_check(bundle, *kind, f.as_ref());
        if params > C4_MAX_PARAMS || err > C4_FD_REL || nonzero == 0 {
            ok = false;
            names.push(format!("{name}: rel {err:.1e}, {params} params, {nonzero} nonzero"));
        }
        worst = worst.max(err);
    }
    check(
        &mut ok,
        names.is_empty(),
        &mut msg,
        format!("{} gradient checks, worst relative error {worst:.1e} {}", cases.len(), names.join(", ")),
    );
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 5. conjugate linear-Gaussian toy

/// Composite Simpson rule on [-L, L].
fn simpson(f: impl Fn(f64) -> f64, half_width: f64, n: usize) -> f64 {
    let h = 2.0 * half_width / n as f64;
    let mut s = f(-half_width) + f(half_width);
    for i in 1..n {
        let x = -half_width + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn gauss_pdf(x: f64, m: f64, sd: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

fn criterion5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst_gap: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..C5_PARAMETERIZATIONS {
        let w = rng.gen_range(-3.0..3.0);
        let b = rng.gen_range(-2.0..2.0);
        let s = rng.gen_range(0.3..2.0);
        let x = b + rng.gen_range(-3.0..3.0);
        let q = Normal1 {
            mean: rng.gen_range(-2.0..2.0),
            sd: rng.gen_range(0.2..1.5),
        };
        let model = LinearGaussian::new(w, b, s).expect("model");
        let elbo = model.elbo(x, q).expect("elbo");
        // oracle: evidence and posterior moments by quadrature
        let joint = |z: f64| gauss_pdf(z, 0.0, 1.0) * gauss_pdf(x, w * z + b, s);
        let evidence = simpson(joint, 12.0, 20_000);
        let m1 = simpson(|z| z * joint(z), 12.0, 20_000) / evidence;
        let m2 = simpson(|z| z * z * joint(z), 12.0, 20_000) / evidence;
        let (pm, psd) = (m1, (m2 - m1 * m1).sqrt());
        let kl = (psd / q.sd).ln() + (q.sd * q.sd + (q.mean - pm).powi(2)) / (2.0 * psd * psd) - 0.5;
        let log_px = evidence.ln();
        if elbo > log_px + 1e-9 {
            violations += 1;
        }
        worst_gap = worst_gap.max(((log_px - elbo) - kl).abs());
    }
    outcome(
        violations == 0 && worst_gap <= C5_GAP_TOL,
        format!("{C5_PARAMETERIZATIONS} parameterizations, {violations} bound violations, worst |gap - KL| {worst_gap:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Wasserstein estimator

fn cloud(m: Mat) -> SampleCloud {
    SampleCloud::new(m, None, "probe").expect("cloud")
}

fn random_cloud(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

fn brute_force_w1(a: &Mat, b: &Mat) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, used: &mut Vec<bool>, cost: &dyn Fn(usize, usize) -> f64, acc: f64, best: &mut f64) {
        let n = used.len();
        if k == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                permute(k + 1, perm, used, cost, acc + cost(k, j), best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let n = a.nrows();
    let cost = |i: usize, j: usize| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut best = f64::INFINITY;
    permute(0, &mut Vec::new(), &mut vec![false; n], &cost, 0.0, &mut best);
    best / n as f64
}

fn criterion6() -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(600);

    let mut worst: f64 = 0.0;
    for n in 1..=7 {
        for _ in 0..6 {
            let a = random_cloud(n, 3, &mut rng);
            let b = random_cloud(n, 3, &mut rng);
            let est = bounds::wasserstein_distance(&cloud(a.clone()), &cloud(b.clone()), 1).expect("w");
            worst = worst.max((est.value - brute_force_w1(&a, &b)).abs());
        }
    }
    check(&mut ok, worst <= 1e-12, &mut msg, format!("exact vs permutation oracle max diff {worst:.1e}"));

    let shift = 1.5;
    let a = random_cloud(C6_SHIFT_N, 1, &mut rng);
    let b = random_cloud(C6_SHIFT_N, 1, &mut rng).mapv(|v| v + shift);
    let w = bounds::wasserstein_distance(&cloud(a), &cloud(b), 2).expect("w").value;
    let rel = (w - shift).abs() / shift;
    check(&mut ok, rel <= C6_SHIFT_REL, &mut msg, format!("shifted Gaussian W1 {w:.4} vs {shift} (rel {rel:.3})"));

    let (mut sym, mut ident, mut tri): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for _ in 0..30 {
        let n = rng.gen_range(2..=40);
        let [a, b, c] = [0, 1, 2].map(|_| cloud(random_cloud(n, 4, &mut rng)));
        let w = |x: &SampleCloud, y: &SampleCloud| bounds::wasserstein_distance(x, y, 3).expect("w").value;
        sym = sym.max((w(&a, &b) - w(&b, &a)).abs());
        ident = ident.max(w(&a, &a).abs());
        tri = tri.max(w(&a, &c) - w(&a, &b) - w(&b, &c));
    }
    let axioms = sym <= C6_AXIOM_TOL && ident <= C6_AXIOM_TOL && tri <= C6_AXIOM_TOL;
    check(&mut ok, axioms, &mut msg, format!("symmetry {sym:.1e}, identity {ident:.1e}, triangle excess {tri:.1e}"));
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 7. bound tracking

fn criterion7(ws: &Workspace, run_dir: &Path) -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;
    match bounds::read_bounds_csv(&run_dir.join("bounds.csv")) {
        Ok(rows) if !rows.is_empty() => {
            let held = rows.iter().filter(|r| r.holds).count() as f64 / rows.len() as f64;
            check(&mut ok, held >= C7_MIN_HOLDS, &mut msg, format!("inequality held in {held:.3} of {} epochs", rows.len()));
        }
        other => check(&mut ok, false, &mut msg, format!("bounds.csv unreadable or empty: {:?}", other.err())),
    }

    // perfect generator: the generated clouds are real labelled images. Each
    // quarter of the training set serves once as the generated test set while
    // the probe trains on the rest; risks are averaged over the folds.
    let opts = LoadOptions::default();
    let (train, test) = data::load_task(&ws.data_root.join("mnist"), &opts).expect("mnist");
    let c = |d: &data::Dataset, name: &str| SampleCloud::new(d.images.clone(), Some(d.labels.clone()), name).expect("cloud");
    let n = train.len();
    let folds = 4;
    let (mut risk1, mut risk2) = (0.0, 0.0);
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let held_rows: Vec<usize> = (lo..hi).collect();
        let probe_rows: Vec<usize> = (0..lo).chain(hi..n).collect();
        let (ptrain, pheld) = (train.select(&probe_rows), train.select(&held_rows));
        let r = bounds::risk_probe(
            &RiskProbeInputs {
                real_test: &c(&test, "real"),
                generated_train: &c(&ptrain, "generated-train"),
                generated_test: &c(&pheld, "generated"),
                real_train: &c(&ptrain, "real-train"),
            },
            train.shape,
            10,
            &ProbeSpec::linear(10, 1234),
            BoundConstants::default(),
            7,
        )
        .expect("risk probe");
        risk1 += r.risk1 / folds as f64;
        risk2 += r.risk2 / folds as f64;
    }
    let diff = (risk1 - risk2).abs();
    check(
        &mut ok,
        diff <= C7_STUB_TOL,
        &mut msg,
        format!("perfect-generator |risk1 - risk2| = {diff:.4} (risk1 {risk1:.4}, risk2 {risk2:.4}, {folds} folds)"),
    );
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 8. replay properties

fn criterion8(ws: &Workspace) -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;
    let arch = ArchitectureSpec {
        image_shape: ImageShape::new(6, 6, 1),
        dim_z: 4,
        num_classes: 5,
        generator_hidden: vec![16],
        critic_hidden: vec![16],
        encoder_hidden: vec![16],
        task_hidden: vec![8],
        class_hidden: vec![16],
        ..Default::default()
    };
    let cfg = TrainConfig {
        batch_size: 8,
        ..Default::default()
    };
    let mut state = TrainState::new(arch.clone(), &cfg).expect("state");
    let snap = replay::build_snapshot(&state.bundle, &state.prior, 1).expect("snapshot");
    let before = replay::sample_replay(&snap, 64, 9).expect("sample").0;
    let mut opt = Optimizers::new(&state.bundle, cfg.adam);
    let real = uniform01(8, 36, 10);
    trainer::wake_step(&mut state, &mut opt, &real, &cfg, 11).expect("wake");
    let after = replay::sample_replay(&snap, 64, 9).expect("sample").0;
    let changed = state.bundle.generator != *snap.generator();
    let bit_exact = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    check(&mut ok, bit_exact && changed, &mut msg, "snapshot sampling bit-exact after trainer mutation".into());

    // counting identity of mixed batches
    let mut count_ok = true;
    let realb = LabelledBatch {
        x: uniform01(64, 3, 12),
        labels: None,
        domains: Mat::ones((64, 1)),
    };
    let repb = LabelledBatch {
        x: uniform01(64, 3, 13),
        labels: None,
        domains: Mat::ones((64, 1)),
    };
    for size in [1, 7, 32, 64] {
        for t in 1..=5 {
            let rho = replay::default_rho(t);
            let m = replay::mix_batches(&realb, &repb, &ReplayBatchSpec { size, rho, seed: t as u64 }).expect("mix");
            let n_rep = m.from_replay.iter().filter(|&&r| r).count();
            let expected = ((rho * size as f64) + 1e-9).floor() as usize;
            let (r, p) = m.split();
            count_ok &= m.batch.len() == size && n_rep == expected && p.len() == expected && r.len() == size - expected;
        }
    }
    check(&mut ok, count_ok, &mut msg, "mixed-batch counting identity".into());

    // pseudo-label marginal against a non-uniform class prior
    let mut prior = snap.prior().clone();
    prior.class_probs = vec![0.05, 0.1, 0.2, 0.25, 0.4];
    let skewed = replay::ReplaySnapshot::from_parts(snap.generator().clone(), snap.class_head().cloned(), arch.clone(), prior.clone(), 1).expect("snapshot");
    let n = 20_000;
    let (_, codes) = replay::sample_replay(&skewed, n, 14).expect("sample");
    let labels = replay::pseudo_label(&codes).expect("labels");
    let mut freq = vec![0.0; 5];
    for l in labels {
        freq[l] += 1.0 / n as f64;
    }
    let dev = freq.iter().zip(&prior.class_probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(&mut ok, dev <= C8_MARGINAL_TOL, &mut msg, format!("pseudo-label marginal deviation {dev:.4}"));

    // perfect replay of task 1 mixed with task 2 against joint sampling
    let opts = LoadOptions {
        target: Some((14, 14)),
        ..Default::default()
    };
    let (m_train, _) = data::load_task(&ws.data_root.join("mnist"), &opts).expect("mnist");
    let (f_train, _) = data::load_task(&ws.data_root.join("fashion"), &opts).expect("fashion");
    let task1 = LabelledBatch {
        x: m_train.images.clone(),
        labels: None,
        domains: Mat::ones((m_train.len(), 1)),
    };
    let perfect = ReplaySource::Buffer(task1);
    let current = LabelledBatch {
        x: f_train.images.clone(),
        labels: None,
        domains: Mat::ones((f_train.len(), 1)),
    };
    let mut mixed = Vec::new();
    let mut joint = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let union = ndarray::concatenate(Axis(0), &[m_train.images.view(), f_train.images.view()]).unwrap();
    for step in 0..40u64 {
        let rep = perfect.draw(32, 1, false, 10, 100 + step).expect("draw");
        let rows: Vec<usize> = (0..32).map(|_| rng.gen_range(0..current.len())).collect();
        let cur = current.select(&rows);
        let m = replay::mix_batches(&cur, &rep, &ReplayBatchSpec { size: 64, rho: 0.5, seed: step }).expect("mix");
        mixed.push(m.batch.x);
        // joint training draws each task with its mixing weight
        let rows: Vec<usize> = (0..64)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..m_train.len()) } else { m_train.len() + rng.gen_range(0..f_train.len()) })
            .collect();
        joint.push(union.select(Axis(0), &rows));
    }
    let stack = |v: &[Mat]| ndarray::concatenate(Axis(0), &v.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
    let test = bounds::classifier_two_sample_test(&stack(&mixed), &stack(&joint), 20, 16).expect("c2st");
    check(
        &mut ok,
        test.p_value > C8_MIN_P,
        &mut msg,
        format!("two-sample test accuracy {:.3}, p = {:.3}", test.accuracy, test.p_value),
    );
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 9. phase isolation and determinism

fn criterion9(ws: &Workspace) -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;
    let cfg = TrainConfig {
        batch_size: 8,
        ..Default::default()
    };
    let arch = ArchitectureSpec {
        image_shape: ImageShape::new(4, 4, 1),
        dim_z: 3,
        num_classes: 3,
        generator_hidden: vec![8],
        critic_hidden: vec![8],
        encoder_hidden: vec![8],
        task_hidden: vec![4],
        class_hidden: vec![8],
        ..Default::default()
    };
    let mut state = TrainState::new(arch, &cfg).expect("state");
    let (prior, bundle) = latent::expand_bundle_domain(&state.bundle, &state.prior, false, 3).expect("expand");
    state.prior = prior;
    state.bundle = bundle;
    state.task = 2;
    let mut opt = Optimizers::new(&state.bundle, cfg.adam);
    let batch = LabelledBatch {
        x: uniform01(8, 16, 20),
        labels: Some(one_hot_rows(8, 3, 21)),
        domains: one_hot_rows(8, 2, 22),
    };
    let changed = |a: &ModelBundle, b: &ModelBundle| -> Vec<NetKind> { NetKind::ALL.into_iter().filter(|&k| a.net(k) != b.net(k)).collect() };
    let before = state.bundle.clone();
    trainer::wake_step(&mut state, &mut opt, &batch.x, &cfg, 5).expect("wake");
    let wake = changed(&before, &state.bundle);
    let before = state.bundle.clone();
    let empty = LabelledBatch::empty(16, Some(3), 2);
    trainer::dream_step(&mut state, &mut opt, &batch, &empty, None, &cfg, 6, 0, 1).expect("dream");
    let dream = changed(&before, &state.bundle);
    let mut w = wake.clone();
    w.sort_by_key(|k| k.name());
    let mut d = dream.clone();
    d.sort_by_key(|k| k.name());
    let mut want_w = vec![NetKind::Critic, NetKind::Generator];
    want_w.sort_by_key(|k| k.name());
    let mut want_d = vec![NetKind::Generator, NetKind::Encoder, NetKind::TaskHead, NetKind::ClassHead];
    want_d.sort_by_key(|k| k.name());
    check(
        &mut ok,
        w == want_w && d == want_d,
        &mut msg,
        format!("wake updated {:?}, dreaming updated {:?}", wake.iter().map(|k| k.name()).collect::<Vec<_>>(), dream.iter().map(|k| k.name()).collect::<Vec<_>>()),
    );

    // two runs from the same manifest
    let small = |name: &str| {
        let mut cfg = base_config(ws, name);
        cfg.run.name = "determinism".into();
        cfg.run.tasks = vec!["mnist".into(), "fashion".into()];
        cfg.run.max_train = Some(192);
        cfg.run.max_test = Some(128);
        cfg.train.epochs = 1;
        cfg.eval.per_epoch_test = 128;
        cfg.eval.replay_samples = 256;
        cfg.eval.probe.epochs = 1;
        cfg.bounds.train_samples = 128;
        cfg.bounds.eval_samples = 64;
        cfg
    };
    let a = cli::train(&small("det_a")).expect("run a");
    let b = cli::train(&small("det_b")).expect("run b");
    let ma = fs::read(a.run_dir.join("metrics.csv")).unwrap_or_default();
    let mb = fs::read(b.run_dir.join("metrics.csv")).unwrap_or_default();
    check(&mut ok, !ma.is_empty() && ma == mb, &mut msg, format!("identical metrics.csv ({} bytes)", ma.len()));

    let layout = a.run_dir.join("checkpoints/task_1/manifest.toml").is_file()
        && a.run_dir.join("checkpoints/task_2/manifest.toml").is_file()
        && a.run_dir.join("snapshots/task_1/manifest.toml").is_file()
        && !a.run_dir.join("snapshots/task_2").exists()
        && a.run_dir.join(cli::RUN_MANIFEST).is_file();
    let records = evalsuite::read_metrics_csv(&a.run_dir.join("metrics.csv")).unwrap_or_default();
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !r.artifact.is_empty() && !a.run_dir.join(&r.artifact).is_file())
        .map(|r| r.artifact.as_str())
        .collect();
    check(&mut ok, layout && missing.is_empty(), &mut msg, format!("run layout complete, missing artifacts {missing:?}"));
    outcome(ok, msg.join("; "))
}

// ---------------------------------------------------------------------------
// 10. evaluation protocol integrity

fn criterion10(ws: &Workspace, run_dir: &Path) -> Outcome {
    let mut msg = Vec::new();
    let mut ok = true;
    let ckpt = run_dir.join("checkpoints/task_2");
    let bundle = match lvaegan::checkpoint::load_bundle(&ckpt) {
        Ok(c) => c.bundle,
        Err(e) => return outcome(false, format!("checkpoint: {e}")),
    };
    let (_, test) = data::load_task(&ws.data_root.join("mnist"), &LoadOptions::default()).expect("mnist");

    let mut exact = true;
    for start in [0, 10, 500] {
        let rows: Vec<usize> = (start..start + 10).collect();
        let x = test.select(&rows).images;
        let rec = evalsuite::reconstruction_mse(&bundle, &x).expect("mse");
        let r = evalsuite::reconstruct(&bundle, &x).expect("reconstruct");
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let mut per = 0.0;
            for j in 0..x.ncols() {
                per += (x[[i, j]] - r[[i, j]]).powi(2);
            }
            total += per;
        }
        exact &= rec.per_image == total / 10.0;
    }
    check(&mut ok, exact, &mut msg, "reconstruction error equals brute force".into());

    let x1 = test.select(&[0]).images;
    let x2 = test.select(&[1]).images;
    let strip = evalsuite::interpolate(&bundle, &x1, &x2, 9).expect("interpolate");
    let r1 = evalsuite::reconstruct(&bundle, &x1).unwrap();
    let r2 = evalsuite::reconstruct(&bundle, &x2).unwrap();
    let maxdiff = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let interp_err = maxdiff(strip.row(0), r1.row(0)).max(maxdiff(strip.row(8), r2.row(0)));

    let (mu, a, c) = evalsuite::mean_codes(&bundle, &x1).unwrap();
    let dim = 3;
    let trav = evalsuite::traverse(&bundle, &x1, dim, evalsuite::TRAVERSE_LO, evalsuite::TRAVERSE_HI, 7).unwrap();
    let frame = |v: f64| {
        let mut z = mu.clone();
        z[[0, dim]] = v;
        nets::generate(&bundle, &z, &a, c.as_ref()).unwrap()
    };
    let trav_err = maxdiff(trav.row(0), frame(-3.0).row(0)).max(maxdiff(trav.row(6), frame(3.0).row(0)));
    let at_mu = evalsuite::traverse(&bundle, &x1, dim, mu[[0, dim]], mu[[0, dim]], 3).unwrap();
    let mu_err = maxdiff(at_mu.row(1), r1.row(0));
    check(
        &mut ok,
        interp_err <= C10_ENDPOINT_TOL && trav_err <= C10_ENDPOINT_TOL && mu_err <= C10_ENDPOINT_TOL,
        &mut msg,
        format!("endpoint errors: interpolation {interp_err:.1e}, traversal {trav_err:.1e}, at mu {mu_err:.1e}"),
    );

    let out = ws.root.join("traverse_out");
    let (code, v) = cli::run([
        "lvaegan",
        "traverse",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--dim",
        "3",
        "--data-root",
        ws.data_root.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let grid: Vec<f64> = v["grid"].as_array().map(|g| g.iter().filter_map(|x| x.as_f64()).collect()).unwrap_or_default();
    let spans = grid.first() == Some(&-3.0) && grid.last() == Some(&3.0) && grid.windows(2).all(|w| w[1] > w[0]);
    check(
        &mut ok,
        code == 0 && spans && out.join("traverse_dim3.png").is_file(),
        &mut msg,
        format!("traverse_dim3.png over {:?}", grid),
    );
    outcome(ok, msg.join("; "))
}

fn main() {
    // honor a test-name filter so `cargo test <other>` skips the long runs
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let ws = workspace();
    // ACCEPTANCE_CRITERIA=3,4 runs a subset; 7 and 10 reuse the run of 1
    let selected: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: usize| match &selected {
        None => true,
        Some(list) => list.contains(&n) || (n == 1 && (list.contains(&7) || list.contains(&10))),
    };
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let t0 = Instant::now();
    let timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome, results: &mut Vec<(usize, &str, Outcome)>| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = f();
        eprintln!("criterion {n} finished in {:.0}s", start.elapsed().as_secs_f64());
        results.push((n, name, o));
    };

    let mut run_dir = PathBuf::new();
    timed(1, "forgetting with replay", &mut || {
        let r = criterion1(&ws);
        run_dir = r.with_replay;
        r.outcome
    }, &mut results);
    timed(2, "semi-supervised benefit", &mut || criterion2(&ws), &mut results);
    timed(3, "gumbel-softmax suite", &mut criterion3, &mut results);
    timed(4, "analytic losses and gradients", &mut criterion4, &mut results);
    timed(5, "ELBO on the conjugate toy", &mut criterion5, &mut results);
    timed(6, "wasserstein estimator", &mut criterion6, &mut results);
    timed(7, "bound tracking", &mut || criterion7(&ws, &run_dir), &mut results);
    timed(8, "replay properties", &mut || criterion8(&ws), &mut results);
    timed(9, "phase isolation and determinism", &mut || criterion9(&ws), &mut results);
    timed(10, "evaluation protocol integrity", &mut || criterion10(&ws, &run_dir), &mut results);

    println!();
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {:<32} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed ({:.0}s)", results.len() - failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
