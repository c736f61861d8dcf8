//! The five parameterized networks and their architecture descriptors.
//!
//! * generator `θ`: `(z, a, c) ↦ x`, codes concatenated at the input
//! * critic `ω`: `x ↦ score`, unconditional and unsquashed
//! * z-encoder `ς`: `x ↦ (μ, σ)` with `σ = exp(½·logvar)`
//! * task head `ε`: `z ↦ logits over K domains`
//! * class head `δ`: `x ↦ logits over L classes`
//!
//! Networks are stacks of [`Layer`]s whose parameters live in a flat list of
//! matrices. Forward passes are recorded on a [`Tape`] so every network is
//! differentiable with respect to its parameters and its inputs.

use std::rc::Rc;

use ndarray::{s, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::tape::{GatherMap, Mat, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trunk {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    ConcatInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureSpec {
    pub image_shape: ImageShape,
    pub dim_z: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    /// Whether the generator consumes the class code `c`. Off in the
    /// unsupervised mode, where the generator sees `(z, a)` only.
    pub class_conditional: bool,
    pub trunk: Trunk,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub task_hidden: Vec<usize>,
    pub class_hidden: Vec<usize>,
    /// Channel widths of the two convolutional stages (conv trunk only).
    pub conv_channels: Vec<usize>,
    pub activation: Activation,
    pub conditioning: Conditioning,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            image_shape: ImageShape::new(28, 28, 1),
            dim_z: 16,
            num_classes: 10,
            num_domains: 1,
            class_conditional: true,
            trunk: Trunk::Mlp,
            generator_hidden: vec![256, 512],
            critic_hidden: vec![512, 256],
            encoder_hidden: vec![512, 256],
            task_hidden: vec![64],
            class_hidden: vec![512, 256],
            conv_channels: vec![32, 64],
            activation: Activation::LeakyRelu,
            conditioning: Conditioning::ConcatInput,
        }
    }
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let img = self.image_shape;
        ensure(img.height > 0 && img.width > 0 && img.channels > 0, || {
            format!("image shape must be positive, got {img:?}")
        })?;
        ensure(self.dim_z > 0, || "dim_z must be positive".into())?;
        ensure(self.num_classes > 0, || "num_classes must be positive".into())?;
        ensure(self.num_domains > 0, || "num_domains must be positive".into())?;
        for (name, widths) in [
            ("generator_hidden", &self.generator_hidden),
            ("critic_hidden", &self.critic_hidden),
            ("encoder_hidden", &self.encoder_hidden),
            ("task_hidden", &self.task_hidden),
            ("class_hidden", &self.class_hidden),
        ] {
            ensure(widths.iter().all(|&w| w >= 1), || {
                format!("{name} widths must be >= 1")
            })?;
        }
        if self.trunk == Trunk::Conv {
            ensure(self.conv_channels.len() == 2, || {
                "conv trunk needs exactly two conv_channels".into()
            })?;
            ensure(img.height % 4 == 0 && img.width % 4 == 0, || {
                "conv trunk needs image sides divisible by 4".into()
            })?;
        }
        Ok(())
    }

    /// Width of the generator input `[z | a | c]`.
    pub fn code_width(&self) -> usize {
        self.dim_z + self.num_domains + if self.class_conditional { self.num_classes } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Convolution over `channels × height × width` rows, lowered to a
    /// patch-gather followed by a matrix product.
    Conv {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Nearest-neighbour ×2 upsampling.
    Upsample {
        channels: usize,
        height: usize,
        width: usize,
    },
    Act(Activation),
}

impl Layer {
    fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
        (h + 2 * p - k) / s + 1
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Layer::Dense { inputs, outputs } => vec![(inputs, outputs), (1, outputs)],
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![(in_channels * kernel * kernel, out_channels), (1, out_channels)],
            _ => vec![],
        }
    }
}

/// A feed-forward stack with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: Vec<Mat>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let (fan_in, fan_out) = shapes[0];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.push(Mat::from_shape_fn(shapes[0], |_| rng.gen_range(-bound..bound)));
            params.push(Mat::zeros(shapes[1]));
        }
        Self { layers, params }
    }

    /// Rebuild from layers and stored parameters, checking shapes.
    pub fn from_parts(layers: Vec<Layer>, params: Vec<Mat>) -> Result<Self> {
        let expected: Vec<_> = layers.iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (e, p)) in expected.iter().zip(&params).enumerate() {
            if *e != p.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {i}: expected {e:?}, got {:?}",
                    p.dim()
                )));
            }
        }
        Ok(Self { layers, params })
    }

    pub fn input_width(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Dense { inputs, .. }) => *inputs,
            Some(Layer::Conv {
                in_channels,
                height,
                width,
                ..
            }) => in_channels * height * width,
            Some(Layer::Upsample {
                channels,
                height,
                width,
            }) => channels * height * width,
            _ => 0,
        }
    }

    pub fn output_width(&self) -> usize {
        let mut w = self.input_width();
        for layer in &self.layers {
            w = match *layer {
                Layer::Dense { outputs, .. } => outputs,
                Layer::Conv {
                    out_channels,
                    height,
                    width,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    out_channels
                        * Layer::conv_out(height, kernel, stride, padding)
                        * Layer::conv_out(width, kernel, stride, padding)
                }
                Layer::Upsample {
                    channels,
                    height,
                    width,
                } => channels * height * width * 4,
                Layer::Act(_) => w,
            };
        }
        w
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Place parameters on the tape; `trainable` selects leaves over constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let (batch, width) = tape.shape(x);
        assert_eq!(
            width,
            self.input_width(),
            "network input width mismatch"
        );
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { .. } => {
                    let m = tape.matmul(h, params[p]);
                    let out = tape.add(m, params[p + 1]);
                    p += 2;
                    out
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    height,
                    width,
                    kernel,
                    stride,
                    padding,
                } => {
                    let oh = Layer::conv_out(height, kernel, stride, padding);
                    let ow = Layer::conv_out(width, kernel, stride, padding);
                    let cols = tape.gather(
                        h,
                        Rc::new(im2col_map(
                            batch, in_channels, height, width, kernel, stride, padding,
                        )),
                    );
                    let m = tape.matmul(cols, params[p]);
                    let biased = tape.add(m, params[p + 1]);
                    p += 2;
                    tape.gather(biased, Rc::new(patches_to_rows_map(batch, out_channels, oh * ow)))
                }
                Layer::Upsample {
                    channels,
                    height,
                    width,
                } => tape.gather(h, Rc::new(upsample_map(batch, channels, height, width))),
                Layer::Act(a) => a.apply(tape, h),
            };
        }
        h
    }

    /// Evaluate without keeping a tape around.
    pub fn apply(&self, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv);
        tape.value(out).clone()
    }

    /// Zero the final parametric layer, so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        if n >= 2 {
            self.params[n - 1].fill(0.0);
            self.params[n - 2].fill(0.0);
        }
    }
}

fn im2col_map(
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> GatherMap {
    let oh = Layer::conv_out(h, k, stride, pad);
    let ow = Layer::conv_out(w, k, stride, pad);
    let chw = c * h * w;
    let cols = c * k * k;
    let mut index = Vec::with_capacity(batch * oh * ow * cols);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                index.push(GatherMap::ZERO);
                            } else {
                                index.push(
                                    (b * chw + ch * h * w + iy as usize * w + ix as usize) as u32,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    GatherMap::new((batch, chw), (batch * oh * ow, cols), index)
}

fn patches_to_rows_map(batch: usize, channels: usize, positions: usize) -> GatherMap {
    let mut index = Vec::with_capacity(batch * channels * positions);
    for b in 0..batch {
        for co in 0..channels {
            for p in 0..positions {
                index.push(((b * positions + p) * channels + co) as u32);
            }
        }
    }
    GatherMap::new(
        (batch * positions, channels),
        (batch, channels * positions),
        index,
    )
}

fn upsample_map(batch: usize, c: usize, h: usize, w: usize) -> GatherMap {
    let (h2, w2) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(batch * c * h2 * w2);
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    index.push((b * c * h * w + ch * h * w + (y / 2) * w + x / 2) as u32);
                }
            }
        }
    }
    GatherMap::new((batch, c * h * w), (batch, c * h2 * w2), index)
}

pub fn mlp_layers(inputs: usize, hidden: &[usize], outputs: usize, act: Activation) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut w = inputs;
    for &h in hidden {
        layers.push(Layer::Dense { inputs: w, outputs: h });
        layers.push(Layer::Act(act));
        w = h;
    }
    layers.push(Layer::Dense { inputs: w, outputs });
    layers
}

/// Two stride-2 convolutions followed by an MLP head.
pub fn conv_trunk_layers(
    img: ImageShape,
    channels: &[usize],
    hidden: &[usize],
    outputs: usize,
    act: Activation,
) -> Vec<Layer> {
    let (c1, c2) = (channels[0], channels[1]);
    let (h1, w1) = (img.height / 2, img.width / 2);
    let (h2, w2) = (img.height / 4, img.width / 4);
    let mut layers = vec![
        Layer::Conv {
            in_channels: img.channels,
            out_channels: c1,
            height: img.height,
            width: img.width,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        Layer::Act(act),
        Layer::Conv {
            in_channels: c1,
            out_channels: c2,
            height: h1,
            width: w1,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        Layer::Act(act),
    ];
    layers.extend(mlp_layers(c2 * h2 * w2, hidden, outputs, act));
    layers
}

fn generator_layers(arch: &ArchitectureSpec) -> Vec<Layer> {
    let img = arch.image_shape;
    let act = arch.activation;
    match arch.trunk {
        Trunk::Mlp => mlp_layers(arch.code_width(), &arch.generator_hidden, img.pixels(), act),
        Trunk::Conv => {
            let (c0, c1) = (arch.conv_channels[1], arch.conv_channels[0]);
            let (h, w) = (img.height / 4, img.width / 4);
            let mut layers = mlp_layers(arch.code_width(), &arch.generator_hidden, c0 * h * w, act);
            layers.extend([
                Layer::Act(act),
                Layer::Upsample {
                    channels: c0,
                    height: h,
                    width: w,
                },
                Layer::Conv {
                    in_channels: c0,
                    out_channels: c1,
                    height: 2 * h,
                    width: 2 * w,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Act(act),
                Layer::Upsample {
                    channels: c1,
                    height: 2 * h,
                    width: 2 * w,
                },
                Layer::Conv {
                    in_channels: c1,
                    out_channels: img.channels,
                    height: 4 * h,
                    width: 4 * w,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ]);
            layers
        }
    }
}

fn image_trunk(arch: &ArchitectureSpec, hidden: &[usize], outputs: usize) -> Vec<Layer> {
    match arch.trunk {
        Trunk::Mlp => mlp_layers(arch.image_shape.pixels(), hidden, outputs, arch.activation),
        Trunk::Conv => conv_trunk_layers(
            arch.image_shape,
            &arch.conv_channels,
            hidden,
            outputs,
            arch.activation,
        ),
    }
}

/// All five parameter sets plus the architecture they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub generator: Network,
    pub critic: Network,
    pub encoder: Network,
    pub task_head: Network,
    pub class_head: Network,
    pub arch: ArchitectureSpec,
}

/// Identifies one of the five networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    Critic,
    Encoder,
    TaskHead,
    ClassHead,
}

impl NetKind {
    pub const ALL: [NetKind; 5] = [
        NetKind::Generator,
        NetKind::Critic,
        NetKind::Encoder,
        NetKind::TaskHead,
        NetKind::ClassHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Generator => "generator",
            NetKind::Critic => "critic",
            NetKind::Encoder => "encoder",
            NetKind::TaskHead => "task_head",
            NetKind::ClassHead => "class_head",
        }
    }
}

impl ModelBundle {
    pub fn new(arch: ArchitectureSpec, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed_value);
        let generator = Network::new(generator_layers(&arch), &mut rng);
        let critic = Network::new(image_trunk(&arch, &arch.critic_hidden, 1), &mut rng);
        let encoder = Network::new(
            image_trunk(&arch, &arch.encoder_hidden, 2 * arch.dim_z),
            &mut rng,
        );
        let task_head = Network::new(
            mlp_layers(arch.dim_z, &arch.task_hidden, arch.num_domains, arch.activation),
            &mut rng,
        );
        let class_head = Network::new(
            image_trunk(&arch, &arch.class_hidden, arch.num_classes),
            &mut rng,
        );
        Ok(Self {
            generator,
            critic,
            encoder,
            task_head,
            class_head,
            arch,
        })
    }

    pub fn net(&self, kind: NetKind) -> &Network {
        match kind {
            NetKind::Generator => &self.generator,
            NetKind::Critic => &self.critic,
            NetKind::Encoder => &self.encoder,
            NetKind::TaskHead => &self.task_head,
            NetKind::ClassHead => &self.class_head,
        }
    }

    pub fn net_mut(&mut self, kind: NetKind) -> &mut Network {
        match kind {
            NetKind::Generator => &mut self.generator,
            NetKind::Critic => &mut self.critic,
            NetKind::Encoder => &mut self.encoder,
            NetKind::TaskHead => &mut self.task_head,
            NetKind::ClassHead => &mut self.class_head,
        }
    }

    pub fn all_finite(&self) -> bool {
        NetKind::ALL.iter().all(|&k| self.net(k).all_finite())
    }

    /// Check that the networks agree with `arch`.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.arch;
        let checks = [
            (NetKind::Generator, arch.code_width(), arch.image_shape.pixels()),
            (NetKind::Critic, arch.image_shape.pixels(), 1),
            (NetKind::Encoder, arch.image_shape.pixels(), 2 * arch.dim_z),
            (NetKind::TaskHead, arch.dim_z, arch.num_domains),
            (NetKind::ClassHead, arch.image_shape.pixels(), arch.num_classes),
        ];
        for (kind, i, o) in checks {
            let net = self.net(kind);
            if net.input_width() != i || net.output_width() != o {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {i}->{o}, got {}->{}",
                    kind.name(),
                    net.input_width(),
                    net.output_width()
                )));
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Assemble the generator input `[z | a | c]`.
pub fn concat_codes(tape: &mut Tape, arch: &ArchitectureSpec, z: Var, a: Var, c: Option<Var>) -> Result<Var> {
    let batch = tape.shape(z).0;
    let check = |name: &str, got: (usize, usize), cols: usize| {
        if got != (batch, cols) {
            Err(Error::ShapeMismatch(format!(
                "{name}: expected ({batch}, {cols}), got {got:?}"
            )))
        } else {
            Ok(())
        }
    };
    check("z", tape.shape(z), arch.dim_z)?;
    check("a", tape.shape(a), arch.num_domains)?;
    match (arch.class_conditional, c) {
        (true, Some(c)) => {
            check("c", tape.shape(c), arch.num_classes)?;
            Ok(tape.concat_cols(&[z, a, c]))
        }
        (false, None) => Ok(tape.concat_cols(&[z, a])),
        (true, None) => Err(Error::ShapeMismatch(
            "class-conditional generator needs c".into(),
        )),
        (false, Some(_)) => Err(Error::ShapeMismatch(
            "unconditional generator does not take c".into(),
        )),
    }
}

/// Generator logits on the tape; `sigmoid` of these is the image.
pub fn generator_logits(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &[Var],
    z: Var,
    a: Var,
    c: Option<Var>,
) -> Result<Var> {
    let codes = concat_codes(tape, &bundle.arch, z, a, c)?;
    Ok(bundle.generator.forward(tape, params, codes))
}

/// `generate(θ, z, a, c)` → images in `[0, 1]`, one row per sample.
pub fn generate(bundle: &ModelBundle, z: &Mat, a: &Mat, c: Option<&Mat>) -> Result<Mat> {
    generate_with(&bundle.generator, &bundle.arch, z, a, c)
}

/// Like [`generate`] but for a standalone generator (e.g. a replay snapshot).
pub fn generate_with(
    generator: &Network,
    arch: &ArchitectureSpec,
    z: &Mat,
    a: &Mat,
    c: Option<&Mat>,
) -> Result<Mat> {
    if z.nrows() == 0 {
        return Ok(Mat::zeros((0, arch.image_shape.pixels())));
    }
    let mut tape = Tape::new();
    let params = generator.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let av = tape.constant(a.clone());
    let cv = c.map(|c| tape.constant(c.clone()));
    let codes = concat_codes(&mut tape, arch, zv, av, cv)?;
    let logits = generator.forward(&mut tape, &params, codes);
    let img = tape.sigmoid(logits);
    Ok(tape.value(img).clone())
}

fn check_images(arch: &ArchitectureSpec, x: &Mat) -> Result<()> {
    if x.ncols() != arch.image_shape.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} pixels per image, got {}",
            arch.image_shape.pixels(),
            x.ncols()
        )));
    }
    Ok(())
}

/// `criticize(ω, x)` → one unbounded score per sample.
pub fn criticize(bundle: &ModelBundle, x: &Mat) -> Result<Vec<f64>> {
    check_images(&bundle.arch, x)?;
    if x.nrows() == 0 {
        return Ok(vec![]);
    }
    Ok(bundle.critic.apply(x).column(0).to_vec())
}

/// Split the encoder output into `(μ, σ)` on the tape; also returns logvar.
pub fn encoder_outputs(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &[Var],
    x: Var,
) -> (Var, Var, Var) {
    let dz = bundle.arch.dim_z;
    let out = bundle.encoder.forward(tape, params, x);
    let mu = tape.slice_cols(out, 0, dz);
    let logvar = tape.slice_cols(out, dz, 2 * dz);
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    (mu, sigma, logvar)
}

/// `infer_z(ς, x)` → `(μ, σ)`.
pub fn infer_z(bundle: &ModelBundle, x: &Mat) -> Result<(Mat, Mat)> {
    check_images(&bundle.arch, x)?;
    let mut tape = Tape::new();
    let params = bundle.encoder.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (mu, sigma, _) = encoder_outputs(&mut tape, bundle, &params, xv);
    let (mu, sigma) = (tape.value(mu).clone(), tape.value(sigma).clone());
    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    Ok((mu, sigma))
}

/// `infer_task(ε, z)` → logits over the K domains.
pub fn infer_task(bundle: &ModelBundle, z: &Mat) -> Result<Mat> {
    if bundle.arch.num_domains == 0 {
        return Err(Error::InvalidArgument("K = 0".into()));
    }
    if z.ncols() != bundle.arch.dim_z {
        return Err(Error::ShapeMismatch(format!(
            "expected z width {}, got {}",
            bundle.arch.dim_z,
            z.ncols()
        )));
    }
    Ok(bundle.task_head.apply(z))
}

/// `infer_class(δ, x)` → logits over the L classes.
pub fn infer_class(bundle: &ModelBundle, x: &Mat) -> Result<Mat> {
    check_images(&bundle.arch, x)?;
    Ok(bundle.class_head.apply(x))
}

/// Row-wise softmax of plain logits.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Grow the generator's input by one domain column at position `dim_z + K`.
/// Existing weights are copied bit-exact; the new row gets small random values.
pub(crate) fn insert_generator_domain_row(
    generator: &mut Network,
    at: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let Some(Layer::Dense { inputs, .. }) = generator.layers.first_mut() else {
        return Err(Error::ShapeMismatch("generator must start with a dense layer".into()));
    };
    let w = &generator.params[0];
    let (rows, cols) = w.dim();
    let mut grown = Mat::zeros((rows + 1, cols));
    grown.slice_mut(s![..at, ..]).assign(&w.slice(s![..at, ..]));
    grown.slice_mut(s![at + 1.., ..]).assign(&w.slice(s![at.., ..]));
    for v in grown.row_mut(at).iter_mut() {
        *v = rng.gen_range(-0.01..0.01);
    }
    generator.params[0] = grown;
    *inputs += 1;
    Ok(())
}

/// Grow the last dense layer of a head by one output unit.
pub(crate) fn append_output_unit(head: &mut Network, rng: &mut ChaCha8Rng) -> Result<()> {
    let Some(Layer::Dense { outputs, .. }) = head.layers.iter_mut().rev().find(|l| matches!(l, Layer::Dense { .. })) else {
        return Err(Error::ShapeMismatch("head has no dense layer".into()));
    };
    *outputs += 1;
    let n = head.params.len();
    let w = &head.params[n - 2];
    let (rows, cols) = w.dim();
    let mut grown_w = Mat::zeros((rows, cols + 1));
    grown_w.slice_mut(s![.., ..cols]).assign(w);
    for v in grown_w.column_mut(cols).iter_mut() {
        *v = rng.gen_range(-0.01..0.01);
    }
    let b = &head.params[n - 1];
    let mut grown_b = Mat::zeros((1, cols + 1));
    grown_b.slice_mut(s![.., ..cols]).assign(b);
    head.params[n - 2] = grown_w;
    head.params[n - 1] = grown_b;
    Ok(())
}
