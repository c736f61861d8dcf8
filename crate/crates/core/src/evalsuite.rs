//! Evaluation protocols: reconstruction error, classifier accuracies,
//! interpolation and traversal strips, forgetting curves and a
//! feature-space distance between generated and real images.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::latent;
use crate::nets::{self, ImageShape, ModelBundle};
use crate::probe::{Probe, ProbeSpec};
use crate::replay::{self, ReplaySnapshot};
use crate::tape::Mat;

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: String,
    pub task: usize,
    pub epoch: usize,
    pub name: String,
    pub value: f64,
    pub seed: u64,
    /// Run-relative path of a file the metric refers to, if any.
    #[serde(default)]
    pub artifact: String,
}

/// Append-only metric store; `(run, task, epoch, name)` is unique.
#[derive(Debug, Clone, Default)]
pub struct MetricsSink {
    records: Vec<MetricRecord>,
    keys: BTreeSet<(String, usize, usize, String)>,
}

impl MetricsSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        let key = (r.run.clone(), r.task, r.epoch, r.name.clone());
        ensure(!self.keys.contains(&key), || {
            format!("duplicate metric {} for task {} epoch {}", r.name, r.task, r.epoch)
        })?;
        ensure(r.value.is_finite(), || format!("metric {} is not finite", r.name))?;
        self.keys.insert(key);
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_metrics_csv(path, &self.records)
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Deterministic codes for `x`: `μ`, hardened `a` and hardened `c`.
pub fn mean_codes(bundle: &ModelBundle, x: &Mat) -> Result<(Mat, Mat, Option<Mat>)> {
    let (mu, _) = nets::infer_z(bundle, x)?;
    let a = latent::harden(&nets::infer_task(bundle, &mu)?);
    let c = if bundle.arch.class_conditional {
        Some(latent::harden(&nets::infer_class(bundle, x)?))
    } else {
        None
    };
    Ok((mu, a, c))
}

/// `generate(θ, infer-codes(x))` with mean codes.
pub fn reconstruct(bundle: &ModelBundle, x: &Mat) -> Result<Mat> {
    let (z, a, c) = mean_codes(bundle, x)?;
    nets::generate(bundle, &z, &a, c.as_ref())
}

/// Both normalizations of the reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecError {
    /// Mean over images of the summed squared pixel error.
    pub per_image: f64,
    /// `per_image` divided by the pixel count.
    pub per_pixel: f64,
}

/// Squared error between images and their reconstructions, accumulated
/// image by image in pixel order.
pub fn mse_between(x: &Mat, recon: &Mat) -> Result<RecError> {
    ensure(x.dim() == recon.dim(), || "reconstructions differ in shape from inputs".into())?;
    ensure(x.nrows() >= 1, || "no images".into())?;
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let mut s = 0.0;
        for j in 0..x.ncols() {
            let d = x[[i, j]] - recon[[i, j]];
            s += d * d;
        }
        total += s;
    }
    let per_image = total / x.nrows() as f64;
    Ok(RecError {
        per_image,
        per_pixel: per_image / x.ncols() as f64,
    })
}

/// `reconstruction_mse(bundle, test set)`.
pub fn reconstruction_mse(bundle: &ModelBundle, x: &Mat) -> Result<RecError> {
    mse_between(x, &reconstruct(bundle, x)?)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// `classifier_accuracy(bundle, test set)` of the class head.
pub fn classifier_accuracy(bundle: &ModelBundle, test: &Dataset) -> Result<f64> {
    ensure(bundle.arch.class_conditional, || "bundle has no class head in use".into())?;
    let logits = nets::infer_class(bundle, &test.images)?;
    Ok(accuracy(&nets::argmax_rows(&logits), &test.labels))
}

/// Train the fixed probe on `(x, labels)` and score it on each test set.
pub fn probe_accuracy(
    x: &Mat,
    labels: &[usize],
    shape: ImageShape,
    classes: usize,
    tests: &[(&str, &Dataset)],
    spec: &ProbeSpec,
) -> Result<Vec<(String, f64)>> {
    let probe = Probe::fit(x, labels, shape, classes, spec)?;
    Ok(tests
        .iter()
        .map(|(name, d)| (name.to_string(), probe.accuracy(&d.images, &d.labels)))
        .collect())
}

/// `replay_classifier_accuracy(snapshot, test sets)`: the probe is trained
/// on `n` generated images with their pseudo-labels.
pub fn replay_classifier_accuracy(
    snap: &ReplaySnapshot,
    n: usize,
    tests: &[(&str, &Dataset)],
    spec: &ProbeSpec,
    seed_value: u64,
) -> Result<Vec<(String, f64)>> {
    if !snap.arch().class_conditional {
        return Err(Error::ModeMismatch("unsupervised".into()));
    }
    let (x, codes) = replay::sample_replay(snap, n, seed_value)?;
    let labels = replay::pseudo_label(&codes)?;
    probe_accuracy(&x, &labels, snap.arch().image_shape, snap.arch().num_classes, tests, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInference {
    /// Accuracy per task, in the order given.
    pub per_task: Vec<f64>,
    pub overall: f64,
}

/// `task_inference_accuracy(bundle, sets)`: `sets[i]` are images of task
/// `i + 1`; `a` is inferred from `μ`.
pub fn task_inference_accuracy(bundle: &ModelBundle, sets: &[&Mat]) -> Result<TaskInference> {
    ensure(!sets.is_empty(), || "no task sets".into())?;
    ensure(sets.len() <= bundle.arch.num_domains, || "more task sets than domains".into())?;
    let mut per_task = Vec::new();
    let (mut hit, mut total) = (0usize, 0usize);
    for (t, x) in sets.iter().enumerate() {
        let (mu, _) = nets::infer_z(bundle, x)?;
        let pred = nets::argmax_rows(&nets::infer_task(bundle, &mu)?);
        let h = pred.iter().filter(|&&p| p == t).count();
        per_task.push(if pred.is_empty() { 0.0 } else { h as f64 / pred.len() as f64 });
        hit += h;
        total += pred.len();
    }
    Ok(TaskInference {
        per_task,
        overall: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
    })
}

fn lerp(a: &Mat, b: &Mat, t: f64) -> Mat {
    a.mapv(|v| (1.0 - t) * v) + &b.mapv(|v| t * v)
}

/// `interpolate(bundle, x₁, x₂, steps)`: one generated frame per row. `z`
/// moves linearly; `a` and `c` move linearly on the simplex between their
/// hardened endpoints.
pub fn interpolate(bundle: &ModelBundle, x1: &Mat, x2: &Mat, steps: usize) -> Result<Mat> {
    ensure(steps >= 2, || "interpolation needs at least 2 steps".into())?;
    ensure(x1.nrows() == 1 && x2.nrows() == 1, || "interpolation takes single images".into())?;
    let (z1, a1, c1) = mean_codes(bundle, x1)?;
    let (z2, a2, c2) = mean_codes(bundle, x2)?;
    let rows = |f: &dyn Fn(f64) -> Mat| -> Result<Mat> {
        let frames: Vec<Mat> = (0..steps).map(|i| f(i as f64 / (steps - 1) as f64)).collect();
        let views: Vec<_> = frames.iter().map(|m| m.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
    };
    let z = rows(&|t| lerp(&z1, &z2, t))?;
    let a = rows(&|t| lerp(&a1, &a2, t))?;
    let c = match (&c1, &c2) {
        (Some(c1), Some(c2)) => Some(rows(&|t| lerp(c1, c2, t))?),
        _ => None,
    };
    nets::generate(bundle, &z, &a, c.as_ref())
}

pub const TRAVERSE_LO: f64 = -3.0;
pub const TRAVERSE_HI: f64 = 3.0;

/// Evenly spaced grid from `lo` to `hi` with exact endpoints.
pub fn linear_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| {
            if i == steps - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect()
}

/// `traverse(bundle, x, dim, lo, hi, steps)`: vary `z[dim]` over the grid,
/// holding the other coordinates and the hardened codes of `x` fixed.
pub fn traverse(bundle: &ModelBundle, x: &Mat, dim: usize, lo: f64, hi: f64, steps: usize) -> Result<Mat> {
    ensure(dim < bundle.arch.dim_z, || format!("dim {dim} out of range for dim_z {}", bundle.arch.dim_z))?;
    ensure(steps >= 1, || "traversal needs at least one step".into())?;
    ensure(x.nrows() == 1, || "traversal takes a single image".into())?;
    let (mu, a, c) = mean_codes(bundle, x)?;
    let grid = linear_grid(lo, hi, steps);
    let mut z = Mat::zeros((steps, mu.ncols()));
    for (i, &g) in grid.iter().enumerate() {
        z.row_mut(i).assign(&mu.row(0));
        z[[i, dim]] = g;
    }
    let rep = |m: &Mat| {
        let views = vec![m.view(); steps];
        ndarray::concatenate(ndarray::Axis(0), &views).expect("same width")
    };
    nets::generate(bundle, &z, &rep(&a), c.as_ref().map(rep).as_ref())
}

/// Per-task accuracy for every logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    pub epochs: Vec<usize>,
    pub tasks: Vec<String>,
    /// `acc[e][k]`: accuracy on task `k` after epoch `epochs[e]`.
    pub acc: Vec<Vec<f64>>,
}

/// Metric name used for per-task accuracy records.
pub fn accuracy_metric(task_name: &str) -> String {
    format!("acc_{task_name}")
}

/// `forgetting_curve(history)`: builds the epoch × task grid from
/// `acc_<task>` records (epochs counted over the whole run).
pub fn forgetting_curve(records: &[MetricRecord], tasks: &[&str]) -> Result<ForgettingCurve> {
    let names: Vec<String> = tasks.iter().map(|t| accuracy_metric(t)).collect();
    let epochs: BTreeSet<usize> = records.iter().filter(|r| names.contains(&r.name)).map(|r| r.epoch).collect();
    let epochs: Vec<usize> = epochs.into_iter().collect();
    let mut acc = Vec::new();
    for &e in &epochs {
        let row = names
            .iter()
            .map(|n| {
                records
                    .iter()
                    .find(|r| r.epoch == e && &r.name == n)
                    .map(|r| r.value)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing {n} at epoch {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        acc.push(row);
    }
    Ok(ForgettingCurve {
        epochs,
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
        acc,
    })
}

impl ForgettingCurve {
    /// Peak accuracy of task `k` over epochs `≤ until` minus its final value.
    pub fn drop_from_peak(&self, k: usize, until: usize) -> Option<f64> {
        let peak = self
            .epochs
            .iter()
            .zip(&self.acc)
            .filter(|(e, _)| **e <= until)
            .map(|(_, row)| row[k])
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))?;
        Some(peak - self.acc.last()?[k])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "task", "accuracy"])?;
        for (e, row) in self.epochs.iter().zip(&self.acc) {
            for (t, v) in self.tasks.iter().zip(row) {
                w.write_record([e.to_string(), t.clone(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn column_moments(f: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = f.nrows() as f64;
    let mean: Vec<f64> = f.columns().into_iter().map(|c| c.sum() / n).collect();
    let sd = f
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, sd)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians fitted to the
/// probe's penultimate features of the two sets.
pub fn fid_proxy(probe: &Probe, generated: &Mat, real: &Mat) -> Result<f64> {
    ensure(generated.nrows() >= 2 && real.nrows() >= 2, || "fid_proxy needs at least 2 images per set".into())?;
    let (mg, sg) = column_moments(&probe.features(generated));
    let (mr, sr) = column_moments(&probe.features(real));
    Ok(mg.iter().zip(&mr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        + sg.iter().zip(&sr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}
