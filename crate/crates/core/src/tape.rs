//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D array; scalars are `1×1`. Operations append nodes to a
//! [`Tape`] and return lightweight [`Var`] handles. [`Tape::grad`] records the
//! backward pass on the same tape using the same primitive operations, so a
//! gradient is itself a differentiable expression. The critic's gradient
//! penalty relies on this: it differentiates a norm of an input-gradient with
//! respect to the critic weights.
//!
//! Binary operations broadcast a `1×n`, `m×1` or `1×1` operand against the
//! other operand's shape.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map used by [`Tape::gather`]: `out.flat[i] = input.flat[index[i]]`,
/// or zero where `index[i]` is [`GatherMap::ZERO`].
#[derive(Debug, Clone)]
pub struct GatherMap {
    pub in_shape: (usize, usize),
    pub out_shape: (usize, usize),
    pub index: Vec<u32>,
}

impl GatherMap {
    pub const ZERO: u32 = u32::MAX;

    pub fn new(in_shape: (usize, usize), out_shape: (usize, usize), index: Vec<u32>) -> Self {
        assert_eq!(index.len(), out_shape.0 * out_shape.1, "gather index length");
        let n_in = (in_shape.0 * in_shape.1) as u32;
        debug_assert!(index.iter().all(|&i| i == Self::ZERO || i < n_in));
        Self {
            in_shape,
            out_shape,
            index,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Abs(Var),
    SumTo(Var),
    BroadcastTo(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    Gather(Var, Rc<GatherMap>),
    ScatterAdd(Var, Rc<GatherMap>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// An append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Sum `m` down to `target`, reversing a broadcast.
pub fn sum_to(m: &Mat, target: (usize, usize)) -> Mat {
    let mut out = m.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(out.dim(), target, "sum_to target mismatch");
    out
}

fn broadcast_to(m: &Mat, target: (usize, usize)) -> Mat {
    m.broadcast(target)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {target:?}", m.dim()))
        .to_owned()
}

fn matmul(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    match (ta, tb) {
        (false, false) => a.dot(b),
        (false, true) => a.dot(&b.t()),
        (true, false) => a.t().dot(b),
        (true, true) => a.t().dot(&b.t()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that gradients never flow through.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Reduce by summation to `target`, which must be `1×n`, `m×1`, `1×1` or
    /// the node's own shape.
    pub fn sum_to(&mut self, a: Var, target: (usize, usize)) -> Var {
        let v = sum_to(self.value(a), target);
        self.push(v, Op::SumTo(a))
    }

    pub fn broadcast_to(&mut self, a: Var, target: (usize, usize)) -> Var {
        let v = broadcast_to(self.value(a), target);
        self.push(v, Op::BroadcastTo(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, (1, 1))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Per-row sums, `m×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let r = self.shape(a).0;
        self.sum_to(a, (r, 1))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Embed `a` into a zero matrix with `total` columns starting at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((src.nrows(), total));
        v.slice_mut(ndarray::s![.., start..start + src.ncols()])
            .assign(src);
        self.push(v, Op::PadCols(a, start))
    }

    pub fn gather(&mut self, a: Var, map: Rc<GatherMap>) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), map.in_shape, "gather input shape");
        let v = gather_values(src, &map);
        self.push(v, Op::Gather(a, map))
    }

    /// Adjoint of [`Tape::gather`]: accumulate `a` back into `map.in_shape`.
    pub fn scatter_add(&mut self, a: Var, map: Rc<GatherMap>) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), map.out_shape, "scatter input shape");
        let v = scatter_values(src, &map);
        self.push(v, Op::ScatterAdd(a, map))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let rows = x.nrows();
        let max = x
            .map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .insert_axis(Axis(1));
        let m = self.constant(max);
        let shifted = self.sub(a, m);
        let e = self.exp(shifted);
        let s = self.sum_to(e, (rows, 1));
        let lse = self.log(s);
        self.sub(shifted, lse)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let l = self.log_softmax(a);
        self.exp(l)
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`, recorded on
    /// this tape. Inputs that `y` does not depend on get a zero constant.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), (1, 1), "grad() needs a scalar output");
        let seed = self.constant(Mat::from_elem((1, 1), 1.0));
        self.grad_with_seed(y, seed, wrt)
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `y`) backwards.
    pub fn grad_with_seed(&mut self, y: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        let n = y.0 + 1;
        let mut needed = vec![false; n];
        for w in wrt {
            if w.0 < n {
                needed[w.0] = true;
            }
        }
        for i in 0..n {
            if needed[i] {
                continue;
            }
            needed[i] = match &self.nodes[i].op {
                Op::Leaf | Op::Const => false,
                op => parents(op).iter().any(|p| needed[p.0]),
            };
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[y.0] = Some(seed);
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            for (p, gp) in self.backward(&op, out, g) {
                if p.0 < n && needed[p.0] {
                    grads[p.0] = Some(match grads[p.0] {
                        Some(acc) => self.add(acc, gp),
                        None => gp,
                    });
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Mat::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect()
    }

    fn unbroadcast(&mut self, g: Var, target: (usize, usize)) -> Var {
        if self.shape(g) == target {
            g
        } else {
            self.sum_to(g, target)
        }
    }

    fn backward(&mut self, op: &Op, out: Var, g: Var) -> Vec<(Var, Var)> {
        match *op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let ga = self.unbroadcast(g, sa);
                let gb = self.unbroadcast(g, sb);
                vec![(a, ga), (b, gb)]
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let ga = self.unbroadcast(g, sa);
                let ng = self.neg(g);
                let gb = self.unbroadcast(ng, sb);
                vec![(a, ga), (b, gb)]
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let gab = self.mul(g, b);
                let ga = self.unbroadcast(gab, sa);
                let gba = self.mul(g, a);
                let gb = self.unbroadcast(gba, sb);
                vec![(a, ga), (b, gb)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (
                        self.matmul_t(g, b, false, true),
                        self.matmul_t(a, g, true, false),
                    ),
                    (false, true) => (
                        self.matmul_t(g, b, false, false),
                        self.matmul_t(g, a, true, false),
                    ),
                    (true, false) => (
                        self.matmul_t(b, g, false, true),
                        self.matmul_t(a, g, false, false),
                    ),
                    (true, true) => (
                        self.matmul_t(b, g, true, true),
                        self.matmul_t(g, a, true, true),
                    ),
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, k) => vec![(a, self.scale(g, k))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Exp(a) => vec![(a, self.mul(g, out))],
            Op::Log(a) => {
                let r = self.recip(a);
                vec![(a, self.mul(g, r))]
            }
            Op::Sigmoid(a) => {
                // s * (1 - s)
                let one_minus = {
                    let n = self.neg(out);
                    self.add_scalar(n, 1.0)
                };
                let d = self.mul(out, one_minus);
                vec![(a, self.mul(g, d))]
            }
            Op::Tanh(a) => {
                let sq = self.square(out);
                let n = self.neg(sq);
                let d = self.add_scalar(n, 1.0);
                vec![(a, self.mul(g, d))]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                vec![(a, self.mul(g, s))]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self
                    .value(a)
                    .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m))]
            }
            Op::Sqrt(a) => {
                let r = self.recip(out);
                let h = self.scale(r, 0.5);
                vec![(a, self.mul(g, h))]
            }
            Op::Recip(a) => {
                let sq = self.square(out);
                let d = self.mul(g, sq);
                vec![(a, self.neg(d))]
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0);
                vec![(a, self.mul(g, two_a))]
            }
            Op::Abs(a) => {
                let sign = self.value(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.constant(sign);
                vec![(a, self.mul(g, s))]
            }
            Op::SumTo(a) => {
                let s = self.shape(a);
                vec![(a, self.broadcast_to(g, s))]
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a);
                vec![(a, self.sum_to(g, s))]
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.shape(p).1;
                    out.push((p, self.slice_cols(g, start, start + w)));
                    start += w;
                }
                out
            }
            Op::SliceCols(a, start) => {
                let total = self.shape(a).1;
                vec![(a, self.pad_cols(g, start, total))]
            }
            Op::PadCols(a, start) => {
                let w = self.shape(a).1;
                vec![(a, self.slice_cols(g, start, start + w))]
            }
            Op::Gather(a, ref map) => vec![(a, self.scatter_add(g, map.clone()))],
            Op::ScatterAdd(a, ref map) => vec![(a, self.gather(g, map.clone()))],
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf | Op::Const => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![a, b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Softplus(a)
        | Op::LeakyRelu(a, _)
        | Op::Sqrt(a)
        | Op::Recip(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _)
        | Op::Gather(a, _)
        | Op::ScatterAdd(a, _) => vec![a],
        Op::ConcatCols(ref parts) => parts.clone(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gather_values(src: &Mat, map: &GatherMap) -> Mat {
    let flat = src.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    let data: Vec<f64> = map
        .index
        .iter()
        .map(|&i| {
            if i == GatherMap::ZERO {
                0.0
            } else {
                flat[i as usize]
            }
        })
        .collect();
    Mat::from_shape_vec(map.out_shape, data).expect("gather shape")
}

fn scatter_values(src: &Mat, map: &GatherMap) -> Mat {
    let mut out = vec![0.0; map.in_shape.0 * map.in_shape.1];
    let flat = src.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    for (&i, &v) in map.index.iter().zip(flat) {
        if i != GatherMap::ZERO {
            out[i as usize] += v;
        }
    }
    Mat::from_shape_vec(map.in_shape, out).expect("scatter shape")
}

/// Elementwise `a += k * b` for in-place parameter updates outside a tape.
pub fn axpy(a: &mut Mat, k: f64, b: &Mat) {
    Zip::from(a).and(b).for_each(|x, &y| *x += k * y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of a scalar function of one matrix.
    fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, rel: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < rel, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let a = if ta { random(4, 3, 1) } else { random(3, 4, 1) };
            let b = if tb { random(2, 4, 2) } else { random(4, 2, 2) };
            let f = |a: &Mat, b: &Mat| {
                let mut t = Tape::new();
                let va = t.leaf(a.clone());
                let vb = t.leaf(b.clone());
                let c = t.matmul_t(va, vb, ta, tb);
                let s = t.square(c);
                let y = t.sum(s);
                (t, va, vb, y)
            };
            let (mut t, va, vb, y) = f(&a, &b);
            let g = t.grad(y, &[va, vb]);
            let ga = t.value(g[0]).clone();
            let gb = t.value(g[1]).clone();
            let na = numeric_grad(&|x| { let (t, _, _, y) = f(x, &b); t.scalar(y) }, &a, 1e-5);
            let nb = numeric_grad(&|x| { let (t, _, _, y) = f(&a, x); t.scalar(y) }, &b, 1e-5);
            assert_close(&ga, &na, 1e-6);
            assert_close(&gb, &nb, 1e-6);
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x = random(3, 4, 7).mapv(|v| v + 1.5); // positive for log/sqrt
        type Build = fn(&mut Tape, Var) -> Var;
        let ops: Vec<(&str, Build)> = vec![
            ("exp", |t, v| t.exp(v)),
            ("log", |t, v| t.log(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("tanh", |t, v| t.tanh(v)),
            ("softplus", |t, v| t.softplus(v)),
            ("sqrt", |t, v| t.sqrt(v)),
            ("recip", |t, v| t.recip(v)),
            ("log_softmax", |t, v| t.log_softmax(v)),
            ("leaky", |t, v| {
                let s = t.add_scalar(v, -1.5);
                t.leaky_relu(s, 0.2)
            }),
            ("abs", |t, v| {
                let s = t.add_scalar(v, -1.5);
                t.abs(s)
            }),
        ];
        let w = random(3, 4, 8);
        for (name, build) in ops {
            let eval = |x: &Mat| {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let o = build(&mut t, v);
                let wc = t.constant(w.clone());
                let p = t.mul(o, wc);
                let y = t.sum(p);
                (t, v, y)
            };
            let (mut t, v, y) = eval(&x);
            let g = t.grad(y, &[v])[0];
            let got = t.value(g).clone();
            let num = numeric_grad(&|m| { let (t, _, y) = eval(m); t.scalar(y) }, &x, 1e-6);
            for (a, b) in got.iter().zip(num.iter()) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn broadcasting_add_and_mul_reduce_gradients() {
        let x = random(5, 3, 3);
        let b = random(1, 3, 4);
        let c = random(5, 1, 5);
        let mut t = Tape::new();
        let vx = t.leaf(x);
        let vb = t.leaf(b);
        let vc = t.leaf(c.clone());
        let s = t.add(vx, vb);
        let m = t.mul(s, vc);
        let y = t.sum(m);
        let g = t.grad(y, &[vb, vc]);
        assert_eq!(t.shape(g[0]), (1, 3));
        assert_eq!(t.shape(g[1]), (5, 1));
        let expect_b = c.sum();
        for v in t.value(g[0]).iter() {
            assert!((v - expect_b).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_gradient_of_cubic() {
        // f(x) = sum(x^3); df = 3x^2; d/dx sum(df) = 6x
        let x = array![[0.5, -1.0, 2.0]];
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let sq = t.square(v);
        let cube = t.mul(sq, v);
        let y = t.sum(cube);
        let g = t.grad(y, &[v])[0];
        let gs = t.sum(g);
        let h = t.grad(gs, &[v])[0];
        for (hv, xv) in t.value(h).iter().zip(x.iter()) {
            assert!((hv - 6.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let x = random(2, 3, 9);
        let map = Rc::new(GatherMap::new(
            (2, 3),
            (3, 3),
            vec![0, 5, GatherMap::ZERO, 1, 1, 2, 4, 3, GatherMap::ZERO],
        ));
        let w = random(3, 3, 10);
        let eval = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let o = t.gather(v, map.clone());
            let wc = t.constant(w.clone());
            let p = t.mul(o, wc);
            let sq = t.square(p);
            let y = t.sum(sq);
            (t, v, y)
        };
        let (mut t, v, y) = eval(&x);
        let g = t.grad(y, &[v])[0];
        let got = t.value(g).clone();
        let num = numeric_grad(&|m| { let (t, _, y) = eval(m); t.scalar(y) }, &x, 1e-6);
        assert_close(&got, &num, 1e-6);
    }

    #[test]
    fn concat_slice_pad_roundtrip_gradients() {
        let a = random(2, 2, 11);
        let b = random(2, 3, 12);
        let mut t = Tape::new();
        let va = t.leaf(a);
        let vb = t.leaf(b);
        let c = t.concat_cols(&[va, vb]);
        let s = t.slice_cols(c, 1, 4);
        let sq = t.square(s);
        let y = t.sum(sq);
        let g = t.grad(y, &[va, vb]);
        let ga = t.value(g[0]);
        assert_eq!(ga[[0, 0]], 0.0);
        assert!(ga[[0, 1]] != 0.0);
        assert_eq!(t.value(g[1])[[1, 2]], 0.0);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::ones((2, 2)));
        let b = t.leaf(Mat::ones((3, 1)));
        let y = t.sum(a);
        let g = t.grad(y, &[b]);
        assert_eq!(t.value(g[0]), &Mat::zeros((3, 1)));
    }
}
