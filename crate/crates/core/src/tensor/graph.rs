//! Reverse-mode differentiation over a linear tape of matrix operations.

use std::fmt::Debug;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{conv_backward_input, conv_backward_weight, conv_forward, KernelMap, Mat};

const LN2: f64 = std::f64::consts::LN_2;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// An operation whose forward value is computed by the caller and whose
/// backward rule is supplied here.
pub trait CustomOp: Debug {
    /// Gradients with respect to every input, in input order.
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad_out: &Mat) -> Vec<Mat>;
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, map: Arc<KernelMap> },
    AddBias { x: Var, b: Var },
    Relu(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Dot(Var, Arc<Mat>),
    SoftmaxBits { logits: Var, targets: Arc<Vec<u8>> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// The tape. Parameters are read from the borrowed store, never copied.
#[derive(Debug)]
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Option<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    /// A constant.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Some(m), Op::Input, false)
    }

    /// A leaf whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, m: Mat) -> Var {
        self.push(Some(m), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), true)
    }

    /// Sparse convolution with stacked weights `(n_offsets * cin) x cout`.
    pub fn conv(&mut self, x: Var, w: Var, map: Arc<KernelMap>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rows, map.n_in, "conv input rows vs kernel map");
        assert_eq!(wv.rows, map.n_offsets * xv.cols, "conv weight shape vs input channels");
        let y = conv_forward(xv, wv, &map);
        let ng = self.ng(x) || self.ng(w);
        self.push(Some(y), Op::Conv { x, w, map }, ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.data.len(), xv.cols, "bias width");
        let mut y = xv.clone();
        for r in 0..y.rows {
            for (v, bb) in y.row_mut(r).iter_mut().zip(&bv.data) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(Some(y), Op::AddBias { x, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(Some(y), Op::Relu(x), ng)
    }

    /// Channel-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut y = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                y.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Some(y), Op::Concat(parts.to_vec()), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut y = av.clone();
        y.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(y), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let mut y = av.clone();
        for (v, w) in y.data.iter_mut().zip(&bv.data) {
            *v -= w;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(y), Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(Some(y), Op::Scale(x, s), ng)
    }

    /// `sum(x * m)` as a 1x1 value.
    pub fn dot_const(&mut self, x: Var, m: Arc<Mat>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), m.shape(), "dot shape mismatch");
        let y = Mat::scalar(xv.dot(&m));
        let ng = self.ng(x);
        self.push(Some(y), Op::Dot(x, m), ng)
    }

    /// Cross-entropy in bits of row-wise softmax(logits) against byte targets.
    pub fn softmax_bits(&mut self, logits: Var, targets: Arc<Vec<u8>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let mut bits = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            bits -= (row[t as usize] - m - s.ln()) / LN2;
        }
        let ng = self.ng(logits);
        self.push(Some(Mat::scalar(bits)), Op::SoftmaxBits { logits, targets }, ng)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            Some(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Gradients of the 1x1 value `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv { x, w, map } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.ng(*x) {
                        acc(&mut grads, *x, conv_backward_input(&g, wv, map, xv.cols));
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, conv_backward_weight(xv, &g, map));
                    }
                }
                Op::AddBias { x, b } => {
                    if self.ng(*b) {
                        let mut gb = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (a, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                        let bshape = self.value(*b).shape();
                        gb.rows = bshape.0;
                        gb.cols = bshape.1;
                        acc(&mut grads, *b, gb);
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g.clone());
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g.clone();
                    for (gv, yv) in gx.data.iter_mut().zip(&y.data) {
                        if *yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.ng(p) {
                            let mut gp = Mat::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.map(|v| v * s)),
                Op::Dot(x, m) => {
                    let gs = g.data[0];
                    acc(&mut grads, *x, m.map(|v| v * gs));
                }
                Op::SoftmaxBits { logits, targets } => {
                    let lv = self.value(*logits);
                    let gs = g.data[0] / LN2;
                    let mut gl = Mat::zeros(lv.rows, lv.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                        let out = gl.row_mut(r);
                        for (o, &z) in out.iter_mut().zip(row) {
                            *o = gs * (z - m).exp() / s;
                        }
                        out[t as usize] -= gs;
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Mat> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gin = op.backward(&ins, node.value.as_ref().unwrap(), &g);
                    for (&v, gv) in inputs.iter().zip(gin) {
                        if self.ng(v) {
                            acc(&mut grads, v, gv);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Grads { nodes: grads, params }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: Vec<(usize, ParamId)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradients of every parameter node on the tape.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(|&(i, id)| self.nodes[i].as_ref().map(|g| (id, g)))
    }
}

/// Row-wise softmax, for inference.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for r in 0..p.rows {
        let row = p.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CoordSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn constant_loss_has_zero_param_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 2], Mat::filled(2, 2, 0.3));
        let mut g = Graph::new(&store);
        let _wv = g.param(w);
        let c = g.input(Mat::scalar(4.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss);
        store.accumulate(&grads);
        assert!(store.get(w).grad.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = CoordSet::from_unsorted(vec![[0, 0, 0], [0, 0, 1], [1, 1, 1]]);
        let mut store = ParamStore::new();
        let w = store.add("w", vec![27, 2, 3], rand_mat(&mut rng, 54, 3));
        let x = rand_mat(&mut rng, 3, 2);
        let m = Arc::new(rand_mat(&mut rng, 3, 3));
        let run = |s: f64| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let y = g.conv(xv, wv, set.self_map(3));
            let y = g.relu(y);
            let l = g.dot_const(y, m.clone());
            let l = g.scale(l, s);
            g.backward(l).get(wv).unwrap().clone()
        };
        let g1 = run(1.0);
        let g3 = run(0.37);
        for (a, b) in g1.data.iter().zip(&g3.data) {
            assert!((a * 0.37 - b).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = softmax_rows(&rand_mat(&mut rng, 5, 256).map(|v| 20.0 * v));
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_logits_cost_eight_bits() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(Mat::zeros(3, 256));
        let b = g.softmax_bits(l, Arc::new(vec![1, 77, 255]));
        assert!((g.value(b).data[0] - 24.0).abs() < 1e-12);
    }
}
