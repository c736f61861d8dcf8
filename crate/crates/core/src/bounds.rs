//! Numerical probes for the generalization bounds: empirical risks,
//! Wasserstein distances between sample clouds, the single-task bound, its
//! accumulation over tasks, and the ELBO-based lower bound.

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use pathfinding::matrix::Matrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::probe::{Probe, ProbeSpec};
use crate::seed;
use crate::tape::Mat;

/// Points `[n × s]` with optional labels and a free-form source tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    pub points: Mat,
    pub labels: Option<Vec<usize>>,
    pub source: String,
}

impl SampleCloud {
    pub fn new(points: Mat, labels: Option<Vec<usize>>, source: impl Into<String>) -> Result<Self> {
        ensure(points.nrows() >= 1, || "a sample cloud needs at least one point".into())?;
        ensure(points.iter().all(|v| v.is_finite()), || "sample cloud has non-finite entries".into())?;
        if let Some(l) = &labels {
            ensure(l.len() == points.nrows(), || "label count does not match points".into())?;
        }
        Ok(Self {
            points,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// `empirical_risk(h, cloud)`: mean 0-1 loss.
pub fn empirical_risk(h: impl Fn(&Mat) -> Vec<usize>, cloud: &SampleCloud) -> Result<f64> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels("empirical risk".into()))?;
    let pred = h(&cloud.points);
    ensure(pred.len() == labels.len(), || "classifier returned the wrong number of predictions".into())?;
    let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Largest cloud size for the exact (assignment) estimator.
pub const EXACT_LIMIT: usize = 512;
pub const SLICED_PROJECTIONS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Sliced { projections: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WassersteinEstimate {
    pub value: f64,
    pub estimator: Estimator,
}

fn subsample(m: &Mat, n: usize, seed_value: u64) -> Mat {
    if m.nrows() == n {
        return m.clone();
    }
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.shuffle(&mut seed::rng(seed_value));
    idx.truncate(n);
    idx.sort_unstable();
    m.select(Axis(0), &idx)
}

/// Euclidean cost matrix between the rows of `a` and `b`.
pub fn cost_matrix(a: &Mat, b: &Mat) -> Mat {
    Mat::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    })
}

/// Exact optimal assignment cost (mean over matched pairs) for equal-size
/// clouds. Also returns the assignment `row → column`.
pub fn exact_transport(cost: &Mat) -> Result<(f64, Vec<usize>)> {
    let n = cost.nrows();
    ensure(n == cost.ncols() && n >= 1, || "exact transport needs a square, non-empty cost matrix".into())?;
    // integer costs for the assignment solver; the reported value is
    // recomputed from the float costs of the chosen assignment
    let max = cost.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1e15 / (max * n as f64) } else { 1.0 };
    let weights = Matrix::from_fn(n, n, |(i, j)| (cost[[i, j]] * scale).round() as i64);
    let (_, assign) = pathfinding::kuhn_munkres::kuhn_munkres_min(&weights);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total / n as f64, assign))
}

fn sliced(a: &Mat, b: &Mat, projections: usize, seed_value: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let s = a.ncols();
    let mut rng = seed::rng(seed_value);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..s).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let d = ndarray::Array1::from(dir);
        let mut pa = a.dot(&d).to_vec();
        let mut pb = b.dot(&d).to_vec();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    total / projections as f64
}

/// `wasserstein_distance(A, B)` (order 1, Euclidean ground cost).
///
/// The larger cloud is subsampled (with `seed`) to the size of the smaller.
/// Up to [`EXACT_LIMIT`] points the optimal assignment is solved exactly;
/// beyond that a sliced estimate with [`SLICED_PROJECTIONS`] directions is
/// used. One-dimensional clouds are always exact (sorted matching).
pub fn wasserstein_distance(a: &SampleCloud, b: &SampleCloud, seed_value: u64) -> Result<WassersteinEstimate> {
    ensure(a.points.ncols() == b.points.ncols(), || {
        format!("clouds differ in dimension: {} vs {}", a.points.ncols(), b.points.ncols())
    })?;
    let n = a.len().min(b.len());
    let pa = subsample(&a.points, n, seed::derive(seed_value, "w-sub-a", 0));
    let pb = subsample(&b.points, n, seed::derive(seed_value, "w-sub-b", 0));
    let est = if pa.ncols() == 1 {
        let mut x: Vec<f64> = pa.column(0).to_vec();
        let mut y: Vec<f64> = pb.column(0).to_vec();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let v = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / n as f64;
        WassersteinEstimate { value: v, estimator: Estimator::Exact }
    } else if n <= EXACT_LIMIT {
        let (v, _) = exact_transport(&cost_matrix(&pa, &pb))?;
        WassersteinEstimate { value: v, estimator: Estimator::Exact }
    } else {
        let v = sliced(&pa, &pb, SLICED_PROJECTIONS, seed::derive(seed_value, "w-proj", 0));
        WassersteinEstimate {
            value: v,
            estimator: Estimator::Sliced { projections: SLICED_PROJECTIONS },
        }
    };
    log::debug!("wasserstein {} vs {}: {:?}", a.source, b.source, est);
    Ok(est)
}

/// Constants of the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConstants {
    pub delta_conf: f64,
    pub a_prime: f64,
    /// Recorded only; it conditions the sample-size regime of the bound.
    pub s_prime: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self {
            delta_conf: 0.05,
            a_prime: 1.0,
            s_prime: 1.0,
        }
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        ensure(self.delta_conf > 0.0 && self.delta_conf < 1.0, || "delta_conf must lie in (0, 1)".into())?;
        ensure(self.a_prime > 0.0 && self.a_prime < 2f64.sqrt(), || "a' must lie in (0, sqrt 2)".into())?;
        Ok(())
    }
}

/// `√(2·ln(1/δ)/a')·(√(1/n) + √(1/n'))`; infinite sizes give 0.
pub fn confidence_term(n: f64, n_prime: f64, c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    ensure(n > 0.0 && n_prime > 0.0, || "sample sizes must be positive".into())?;
    Ok((2.0 * (1.0 / c.delta_conf).ln() / c.a_prime).sqrt() * ((1.0 / n).sqrt() + (1.0 / n_prime).sqrt()))
}

/// `risk_bound_rhs(risk on generated, W, n_t, n_t', δ, a', D)`.
pub fn risk_bound_rhs(risk_generated: f64, w: f64, n_t: f64, n_tp: f64, c: &BoundConstants, d: f64) -> Result<f64> {
    Ok(risk_generated + w + confidence_term(n_t, n_tp, c)? + d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Risk on real data (left-hand side).
    pub risk1: f64,
    /// Risk on generated data.
    pub risk2: f64,
    pub w: f64,
    pub n_t: f64,
    pub n_tp: f64,
    pub constants: BoundConstants,
    pub d: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundReport {
    pub fn new(risk1: f64, risk2: f64, w: f64, n_t: f64, n_tp: f64, constants: BoundConstants, d: f64) -> Result<Self> {
        let rhs = risk_bound_rhs(risk2, w, n_t, n_tp, &constants, d)?;
        Ok(Self {
            risk1,
            risk2,
            w,
            n_t,
            n_tp,
            constants,
            d,
            rhs,
            holds: risk1 <= rhs + 1e-9,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedReport {
    pub tasks: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `accumulate_bounds(reports)`: sums both sides over tasks.
pub fn accumulate_bounds(reports: &[BoundReport]) -> Result<AccumulatedReport> {
    ensure(!reports.is_empty(), || "need at least one per-task report".into())?;
    let lhs: f64 = reports.iter().map(|r| r.risk1).sum();
    let rhs: f64 = reports.iter().map(|r| r.rhs).sum();
    Ok(AccumulatedReport {
        tasks: reports.len(),
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboGapReport {
    pub elbo: f64,
    pub w: f64,
    pub confidence: f64,
    pub d_star: f64,
    /// `elbo − W − confidence − D*`.
    pub bound: f64,
}

/// `elbo_gap_bound(two-source ELBO, W, n, n', δ, a', D*)`.
pub fn elbo_gap_bound(elbo_two_source: f64, w: f64, n: f64, n_prime: f64, c: &BoundConstants, d_star: f64) -> Result<ElboGapReport> {
    ensure(elbo_two_source.is_finite(), || "ELBO must be finite".into())?;
    let confidence = confidence_term(n, n_prime, c)?;
    Ok(ElboGapReport {
        elbo: elbo_two_source,
        w,
        confidence,
        d_star,
        bound: elbo_two_source - w - confidence - d_star,
    })
}

/// Sweep used to approximate the optimal combined error `D`.
pub fn d_sweep(base: &ProbeSpec) -> Vec<ProbeSpec> {
    vec![
        ProbeSpec { lr: 1e-3, ..base.clone() },
        ProbeSpec { lr: 3e-3, ..base.clone() },
        ProbeSpec { lr: 1e-3, epochs: base.epochs * 2, ..base.clone() },
    ]
}

/// Inputs of one risk-tracking measurement.
pub struct RiskProbeInputs<'a> {
    /// Real test data of the tracked task (`ν_t`).
    pub real_test: &'a SampleCloud,
    /// Generated training samples for the probe.
    pub generated_train: &'a SampleCloud,
    /// Held-out generated samples (`ν_t'`).
    pub generated_test: &'a SampleCloud,
    /// Real training samples, joined with `generated_train` for the `D` sweep.
    pub real_train: &'a SampleCloud,
}

/// Train the probe `h` on generated samples and measure both risks, the
/// distance between the evaluation clouds and the combined-error constant.
pub fn risk_probe(
    inp: &RiskProbeInputs<'_>,
    shape: crate::nets::ImageShape,
    classes: usize,
    probe: &ProbeSpec,
    constants: BoundConstants,
    seed_value: u64,
) -> Result<BoundReport> {
    let gen_labels = inp
        .generated_train
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels("generated training cloud".into()))?;
    let h = Probe::fit(&inp.generated_train.points, gen_labels, shape, classes, probe)?;
    let risk1 = empirical_risk(|x| h.predict(x), inp.real_test)?;
    let risk2 = empirical_risk(|x| h.predict(x), inp.generated_test)?;
    let w = wasserstein_distance(inp.real_test, inp.generated_test, seed_value)?.value;

    let union_x = ndarray::concatenate(Axis(0), &[inp.real_train.points.view(), inp.generated_train.points.view()])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let real_labels = inp
        .real_train
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels("real training cloud".into()))?;
    let union_y: Vec<usize> = real_labels.iter().chain(gen_labels).copied().collect();
    let mut d = f64::INFINITY;
    for spec in d_sweep(probe) {
        let g = Probe::fit(&union_x, &union_y, shape, classes, &spec)?;
        let joint = empirical_risk(|x| g.predict(x), inp.real_test)? + empirical_risk(|x| g.predict(x), inp.generated_test)?;
        d = d.min(joint);
    }
    BoundReport::new(
        risk1,
        risk2,
        w,
        inp.real_test.len() as f64,
        inp.generated_test.len() as f64,
        constants,
        d,
    )
}

/// One `bounds.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub epoch: usize,
    pub risk1: f64,
    pub risk2: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundsRow {
    pub fn from_report(epoch: usize, r: &BoundReport) -> Self {
        Self {
            epoch,
            risk1: r.risk1,
            risk2: r.risk2,
            w: r.w,
            rhs: r.rhs,
            holds: r.holds,
        }
    }
}

/// Write `bounds.csv`; epochs must be strictly increasing.
pub fn write_bounds_csv(path: &Path, rows: &[BoundsRow]) -> Result<()> {
    ensure(rows.windows(2).all(|w| w[0].epoch < w[1].epoch), || "bounds rows must have increasing epochs".into())?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_bounds_csv(path: &Path) -> Result<Vec<BoundsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Outcome of a classifier two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub accuracy: f64,
    pub n_test: usize,
    /// One-sided binomial p-value of the held-out accuracy against chance.
    pub p_value: f64,
}

/// Classifier two-sample test: a linear probe is trained to tell `a` from
/// `b` on half of each set and scored on the other half.
pub fn classifier_two_sample_test(a: &Mat, b: &Mat, epochs: usize, seed_value: u64) -> Result<TwoSampleResult> {
    use statrs::distribution::{Binomial, DiscreteCDF};
    ensure(a.ncols() == b.ncols(), || "two-sample inputs differ in dimension".into())?;
    let n = a.nrows().min(b.nrows());
    ensure(n >= 4, || "two-sample test needs at least 4 samples per set".into())?;
    let a = subsample(a, n, seed::derive(seed_value, "c2st-a", 0));
    let b = subsample(b, n, seed::derive(seed_value, "c2st-b", 0));
    let half = n / 2;
    let stack = |x: &Mat, y: &Mat| ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("same width");
    let train_x = stack(&a.slice(ndarray::s![..half, ..]).to_owned(), &b.slice(ndarray::s![..half, ..]).to_owned());
    let test_x = stack(&a.slice(ndarray::s![half.., ..]).to_owned(), &b.slice(ndarray::s![half.., ..]).to_owned());
    let train_y: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
    let m = n - half;
    let test_y: Vec<usize> = (0..2 * m).map(|i| usize::from(i >= m)).collect();
    let shape = crate::nets::ImageShape::new(1, a.ncols(), 1);
    let probe = Probe::fit(&train_x, &train_y, shape, 2, &ProbeSpec::linear(epochs, seed_value))?;
    let pred = probe.predict(&test_x);
    let correct = pred.iter().zip(&test_y).filter(|(p, y)| p == y).count();
    let n_test = test_y.len();
    let binom = Binomial::new(0.5, n_test as u64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_value = if correct == 0 { 1.0 } else { binom.sf(correct as u64 - 1) };
    Ok(TwoSampleResult {
        accuracy: correct as f64 / n_test as f64,
        n_test,
        p_value,
    })
}

/// Append-only writer used while training.
pub struct BoundsLog {
    rows: Vec<BoundsRow>,
}

impl BoundsLog {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn push(&mut self, row: BoundsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[BoundsRow] {
        &self.rows
    }

    pub fn holds_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.holds).count() as f64 / self.rows.len() as f64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bounds_csv(path, &self.rows)
    }

    pub fn summary(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{} epochs logged, bound held in {:.1}%", self.rows.len(), 100.0 * self.holds_fraction())
    }
}

impl Default for BoundsLog {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Mat) -> SampleCloud {
        SampleCloud::new(points, None, "t").unwrap()
    }

    #[test]
    fn wasserstein_basics() {
        let a = Mat::from_shape_fn((20, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        assert!(wasserstein_distance(&cloud(a.clone()), &cloud(a.clone()), 1).unwrap().value.abs() < 1e-9);
        let p = cloud(Mat::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap());
        let q = cloud(Mat::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
        assert_eq!(wasserstein_distance(&p, &q, 1).unwrap().value, 5.0);
        assert!(wasserstein_distance(&p, &cloud(Mat::zeros((1, 3))), 1).is_err());
    }

    #[test]
    fn risk_bound_closed_forms() {
        let c = BoundConstants { delta_conf: (-1.0f64).exp(), a_prime: 1.0, s_prime: 1.0 };
        let rhs = risk_bound_rhs(0.0, 0.0, 1.0, 1.0, &c, 0.0).unwrap();
        assert!((rhs - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        let d = BoundConstants::default();
        let big = risk_bound_rhs(0.2, 0.0, 1e18, 1e18, &d, 0.0).unwrap();
        assert!((big - 0.2).abs() < 1e-8);
        let c1 = confidence_term(100.0, 50.0, &d).unwrap();
        let c2 = confidence_term(200.0, 100.0, &d).unwrap();
        assert!((c1 / c2 - 2f64.sqrt()).abs() < 1e-12);
        assert!(risk_bound_rhs(0.0, 0.0, 1.0, 1.0, &BoundConstants { a_prime: 1.5, ..d }, 0.0).is_err());
        assert!(risk_bound_rhs(0.0, 0.0, 1.0, 1.0, &BoundConstants { delta_conf: 1.0, ..d }, 0.0).is_err());
    }

    #[test]
    fn accumulated_and_elbo_bounds() {
        let c = BoundConstants::default();
        let r1 = BoundReport::new(0.1, 0.05, 0.3, 100.0, 100.0, c, 0.02).unwrap();
        let r2 = BoundReport::new(0.2, 0.1, 0.5, 80.0, 120.0, c, 0.04).unwrap();
        let one = accumulate_bounds(&[r1]).unwrap();
        assert_eq!((one.lhs, one.rhs, one.holds), (r1.risk1, r1.rhs, r1.holds));
        let two = accumulate_bounds(&[r1, r2]).unwrap();
        assert!((two.rhs - (r1.rhs + r2.rhs)).abs() < 1e-9);
        let zero = BoundReport::new(0.0, 0.0, 0.0, 10.0, 10.0, c, 0.0).unwrap();
        let z = accumulate_bounds(&[zero, zero]).unwrap();
        assert!(z.holds && z.lhs == 0.0 && z.rhs > 0.0);
        assert!(accumulate_bounds(&[]).is_err());

        let l = elbo_gap_bound(-50.0, 0.0, 1e18, 1e18, &c, 0.0).unwrap();
        assert!((l.bound + 50.0).abs() < 1e-8);
        let l2 = elbo_gap_bound(-50.0, 1.5, 1e18, 1e18, &c, 0.0).unwrap();
        assert!((l.bound - l2.bound - 1.5).abs() < 1e-12);
    }

    #[test]
    fn risk_counts() {
        let c = SampleCloud::new(Mat::zeros((10, 1)), Some((0..10).map(|i| i % 2).collect()), "b").unwrap();
        assert_eq!(empirical_risk(|x| vec![0; x.nrows()], &c).unwrap(), 0.5);
        assert_eq!(empirical_risk(|_| (0..10).map(|i| i % 2).collect(), &c).unwrap(), 0.0);
        assert!(empirical_risk(|x| vec![0; x.nrows()], &cloud(Mat::zeros((3, 1)))).is_err());
    }

    #[test]
    fn bounds_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bounds.csv");
        let rows = vec![
            BoundsRow { epoch: 1, risk1: 0.1, risk2: 0.05, w: 0.3, rhs: 0.7, holds: true },
            BoundsRow { epoch: 2, risk1: 0.2, risk2: 0.05, w: 0.1, rhs: 0.1, holds: false },
        ];
        write_bounds_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,risk1,risk2,W,rhs,holds\n"));
        assert_eq!(read_bounds_csv(&p).unwrap(), rows);
        assert!(write_bounds_csv(&p, &[rows[1], rows[0]]).is_err());
    }
}
