use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{CoordSet, KernelMap, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 1x1x1, stride 1.
    Cube1,
    /// 3x3x3, stride 1.
    Cube3,
    /// Kernel 2, stride 2, onto parents.
    Down,
    /// Transposed kernel 2, stride 2, onto children.
    Up,
}

impl ConvKind {
    pub fn n_offsets(self) -> usize {
        match self {
            ConvKind::Cube1 => 1,
            ConvKind::Cube3 => 27,
            ConvKind::Down | ConvKind::Up => 8,
        }
    }
}

/// A sparse convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
}

impl ConvLayer {
    /// Uniform init with variance `gain / fan_in`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = kind.n_offsets();
        let a = (3.0 * gain / (k * cin) as f64).sqrt();
        let data = (0..k * cin * cout).map(|_| rng.gen_range(-a..a)).collect();
        let w = store.add(format!("{name}.w"), vec![k, cin, cout], Mat::from_vec(k * cin, cout, data));
        let b = bias.then(|| store.add(format!("{name}.b"), vec![cout], Mat::zeros(1, cout)));
        ConvLayer { w, b, kind, cin, cout }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, map: Arc<KernelMap>) -> Var {
        debug_assert_eq!(map.n_offsets, self.kind.n_offsets());
        let w = g.param(self.w);
        let mut y = g.conv(x, w, map);
        if let Some(b) = self.b {
            let bv = g.param(b);
            y = g.add_bias(y, bv);
        }
        y
    }

    /// Stride-1 application on a single coordinate set.
    pub fn apply(&self, g: &mut Graph, x: Var, set: &CoordSet) -> Var {
        let map = match self.kind {
            ConvKind::Cube1 => set.self_map(1),
            ConvKind::Cube3 => set.self_map(3),
            _ => panic!("strided layer needs an explicit kernel map"),
        };
        self.forward(g, x, map)
    }
}

/// Inception-residual block: two parallel branches (1-3 and 1-3-3), each
/// of half width, concatenated and added back to the input.
#[derive(Debug, Clone)]
pub struct Irn {
    a1: ConvLayer,
    a2: ConvLayer,
    b1: ConvLayer,
    b2: ConvLayer,
    b3: ConvLayer,
}

impl Irn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        assert!(channels >= 2 && channels % 2 == 0, "IRN width must be even");
        let h = channels / 2;
        let mut conv = |n: &str, kind, cin, gain| {
            ConvLayer::new(store, &format!("{name}.{n}"), kind, cin, h, true, gain, rng)
        };
        Irn {
            a1: conv("a1", ConvKind::Cube1, channels, 2.0),
            a2: conv("a2", ConvKind::Cube3, h, 0.5),
            b1: conv("b1", ConvKind::Cube1, channels, 2.0),
            b2: conv("b2", ConvKind::Cube3, h, 2.0),
            b3: conv("b3", ConvKind::Cube3, h, 0.5),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, set: &CoordSet) -> Var {
        let a = self.a1.apply(g, x, set);
        let a = g.relu(a);
        let a = self.a2.apply(g, a, set);
        let b = self.b1.apply(g, x, set);
        let b = g.relu(b);
        let b = self.b2.apply(g, b, set);
        let b = g.relu(b);
        let b = self.b3.apply(g, b, set);
        let cat = g.concat(&[a, b]);
        g.add(x, cat)
    }

    pub fn layers(&self) -> [&ConvLayer; 5] {
        [&self.a1, &self.a2, &self.b1, &self.b2, &self.b3]
    }
}
