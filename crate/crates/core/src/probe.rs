//! Small stand-alone classifiers used as measuring instruments: the replay
//! probe (two strided convolutions plus a linear read-out), and linear
//! probes for two-sample tests.

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{ensure, Result};
use crate::losses;
use crate::nets::{self, Activation, ImageShape, Layer, Network};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    /// Two entries for the convolutional probe; empty for a linear one.
    pub conv_channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32],
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 1234,
        }
    }
}

impl ProbeSpec {
    pub fn linear(epochs: usize, seed_value: u64) -> Self {
        Self {
            conv_channels: Vec::new(),
            epochs,
            seed: seed_value,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub net: Network,
    pub num_classes: usize,
    /// Index of the first layer after the feature extractor.
    readout: usize,
}

fn layers(spec: &ProbeSpec, shape: ImageShape, classes: usize) -> Result<Vec<Layer>> {
    match spec.conv_channels.len() {
        0 => Ok(nets::mlp_layers(shape.pixels(), &[], classes, Activation::LeakyRelu)),
        2 => {
            ensure(shape.height % 4 == 0 && shape.width % 4 == 0, || {
                "convolutional probe needs image sides divisible by 4".into()
            })?;
            Ok(nets::conv_trunk_layers(shape, &spec.conv_channels, &[], classes, Activation::LeakyRelu))
        }
        _ => Err(crate::Error::InvalidArgument("probe takes zero or two conv layers".into())),
    }
}

impl Probe {
    /// Train a fresh probe on `(x, labels)` with the seed fixed in its `ProbeSpec`.
    pub fn fit(x: &Mat, labels: &[usize], shape: ImageShape, classes: usize, spec: &ProbeSpec) -> Result<Self> {
        ensure(x.nrows() == labels.len(), || "probe inputs and labels differ in count".into())?;
        ensure(x.nrows() >= 1, || "probe needs training data".into())?;
        ensure(x.ncols() == shape.pixels(), || "probe input width does not match shape".into())?;
        ensure(labels.iter().all(|&l| l < classes), || "probe label out of range".into())?;
        let layers = layers(spec, shape, classes)?;
        let readout = layers.len() - 1;
        let mut net = Network::new(layers, &mut seed::rng(seed::derive(spec.seed, "probe-init", 0)));
        let mut opt = Adam::new(AdamConfig { lr: spec.lr, ..Default::default() }, &net.params);
        let onehot = {
            let mut m = Mat::zeros((labels.len(), classes));
            for (i, &l) in labels.iter().enumerate() {
                m[[i, l]] = 1.0;
            }
            m
        };
        for epoch in 0..spec.epochs {
            let order = data::batches(x.nrows(), spec.batch_size, seed::derive(spec.seed, "probe-epoch", epoch as u64))?;
            for rows in order {
                let xb = x.select(ndarray::Axis(0), &rows);
                let yb = onehot.select(ndarray::Axis(0), &rows);
                let mut tape = Tape::new();
                let params = net.bind(&mut tape, true);
                let xv = tape.constant(xb);
                let logits = net.forward(&mut tape, &params, xv);
                let loss = losses::cross_entropy_var(&mut tape, logits, &yb)?;
                let g = tape.grad(loss, &params);
                let grads: Vec<Mat> = g.iter().map(|v| tape.value(*v).clone()).collect();
                opt.step(&mut net.params, &grads);
            }
        }
        Ok(Self {
            net,
            num_classes: classes,
            readout,
        })
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        chunked(x, |c| self.net.apply(c))
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        nets::argmax_rows(&self.logits(x))
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let p = self.predict(x);
        p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    }

    /// Penultimate activations (input of the linear read-out).
    pub fn features(&self, x: &Mat) -> Mat {
        if self.readout == 0 {
            return x.clone();
        }
        let head = Network {
            layers: self.net.layers[..self.readout].to_vec(),
            params: self.net.params[..self.net.params.len() - 2].to_vec(),
        };
        chunked(x, |c| head.apply(c))
    }
}

/// Apply `f` to row blocks of `x` to bound tape memory.
fn chunked(x: &Mat, f: impl Fn(&Mat) -> Mat) -> Mat {
    const CHUNK: usize = 500;
    if x.nrows() <= CHUNK {
        return f(x);
    }
    let parts: Vec<Mat> = (0..x.nrows())
        .step_by(CHUNK)
        .map(|s| f(&x.slice(ndarray::s![s..(s + CHUNK).min(x.nrows()), ..]).to_owned()))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent chunk widths")
}
