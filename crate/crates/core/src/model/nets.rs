use std::sync::Arc;

use rand::Rng;

use crate::tensor::{ConvKind, ConvLayer, CoordSet, Graph, Irn, KernelMap, Mat, ParamStore, Var};

/// Occupancy embedding: one-hot bytes through 1^3, 3^3, 3^3 convolutions.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub c1: ConvLayer,
    pub c2: ConvLayer,
    pub c3: ConvLayer,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            c1: ConvLayer::new(store, "embed.c1", ConvKind::Cube1, 256, width, true, 2.0 * 256.0, rng),
            c2: ConvLayer::new(store, "embed.c2", ConvKind::Cube3, width, width, true, 2.0, rng),
            c3: ConvLayer::new(store, "embed.c3", ConvKind::Cube3, width, width, true, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, set: &CoordSet, bytes: &[u8]) -> Var {
        let x = g.input(one_hot(bytes));
        let h = self.c1.apply(g, x, set);
        let h = g.relu(h);
        let h = self.c2.apply(g, h, set);
        let h = g.relu(h);
        self.c3.apply(g, h, set)
    }
}

pub fn one_hot(bytes: &[u8]) -> Mat {
    let mut m = Mat::zeros(bytes.len(), 256);
    for (r, &b) in bytes.iter().enumerate() {
        m.data[r * 256 + b as usize] = 1.0;
    }
    m
}

/// Per-layer analysis transform.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub down: ConvLayer,
    pub irn: Vec<Irn>,
    pub fuse: ConvLayer,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, e: usize, irn: usize, rng: &mut impl Rng) -> Self {
        let down = ConvLayer::new(store, &format!("{name}.down"), ConvKind::Down, d, d, true, 2.0, rng);
        let irn = (0..irn).map(|i| Irn::new(store, &format!("{name}.irn{i}"), d, rng)).collect();
        let fuse = ConvLayer::new(store, &format!("{name}.fuse"), ConvKind::Cube3, d + e, d, true, 1.0, rng);
        Encoder { down, irn, fuse }
    }

    /// `f_above` lives on the child set; `down` maps it onto `set`.
    pub fn forward(&self, g: &mut Graph, f_above: Var, down: Arc<KernelMap>, set: &CoordSet, emb: Var) -> Var {
        let h = self.down.forward(g, f_above, down);
        let mut h = g.relu(h);
        for block in &self.irn {
            h = block.forward(g, h, set);
        }
        let cat = g.concat(&[h, emb]);
        self.fuse.apply(g, cat, set)
    }
}

/// Two stacked bias-free upsamplings for contexts two layers up.
#[derive(Debug, Clone)]
pub struct UpTwice {
    pub a: ConvLayer,
    pub b: ConvLayer,
}

impl UpTwice {
    fn new(store: &mut ParamStore, name: &str, cin: usize, h: usize, rng: &mut impl Rng) -> Self {
        UpTwice {
            a: ConvLayer::new(store, &format!("{name}.a"), ConvKind::Up, cin, h, false, 2.0, rng),
            b: ConvLayer::new(store, &format!("{name}.b"), ConvKind::Up, h, h, false, 1.0, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, first: Arc<KernelMap>, second: Arc<KernelMap>) -> Var {
        let t = self.a.forward(g, x, first);
        let t = g.relu(t);
        self.b.forward(g, t, second)
    }
}

/// Context tensors for one learned step, working from layer `l` to `l + 1`.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    /// `e^(l)` and `f^(l)` on layer `l`.
    pub e_cur: Var,
    pub f_cur: Var,
    /// `e^(l-1)` and `f^(l-1)` on layer `l - 1`, when that layer exists.
    pub prev: Option<(Var, Var)>,
}

/// Maps from layer `l - 1` to `l` (when present) and from `l` to `l + 1`.
#[derive(Debug, Clone)]
pub struct Links {
    pub up: Arc<KernelMap>,
    pub up_prev: Option<Arc<KernelMap>>,
    pub target: Arc<CoordSet>,
}

/// Latent prediction head: `f_bar^(l+1)` from upsampled contexts.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub up: ConvLayer,
    pub up2: Option<UpTwice>,
    pub mid: ConvLayer,
    pub out: ConvLayer,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, e: usize, h: usize, order2: bool, rng: &mut impl Rng) -> Self {
        Predictor {
            up: ConvLayer::new(store, &format!("{name}.up"), ConvKind::Up, e + d, h, false, 2.0, rng),
            up2: order2.then(|| UpTwice::new(store, &format!("{name}.up2"), e + d, h, rng)),
            mid: ConvLayer::new(store, &format!("{name}.mid"), ConvKind::Cube3, h, h, true, 2.0, rng),
            out: ConvLayer::new(store, &format!("{name}.out"), ConvKind::Cube1, h, d, true, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Context, links: &Links) -> Var {
        let cat = g.concat(&[ctx.e_cur, ctx.f_cur]);
        let mut h = self.up.forward(g, cat, links.up.clone());
        if let (Some(up2), Some((e, f)), Some(first)) = (&self.up2, ctx.prev, &links.up_prev) {
            let cat = g.concat(&[e, f]);
            let t = up2.forward(g, cat, first.clone(), links.up.clone());
            h = g.add(h, t);
        }
        let h = g.relu(h);
        let h = self.mid.apply(g, h, &links.target);
        let h = g.relu(h);
        self.out.apply(g, h, &links.target)
    }
}

/// Occupancy head: 256 logits per node of layer `l + 1`.
#[derive(Debug, Clone)]
pub struct OccupancyHead {
    pub own: ConvLayer,
    pub up_e: ConvLayer,
    pub up_f: Option<ConvLayer>,
    pub up2: Option<UpTwice>,
    pub mid: ConvLayer,
    pub out: ConvLayer,
}

impl OccupancyHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, e: usize, h: usize, order2: bool, rng: &mut impl Rng) -> Self {
        OccupancyHead {
            own: ConvLayer::new(store, &format!("{name}.own"), ConvKind::Cube1, d, h, true, 2.0, rng),
            up_e: ConvLayer::new(store, &format!("{name}.up_e"), ConvKind::Up, e, h, false, 2.0, rng),
            up_f: order2.then(|| ConvLayer::new(store, &format!("{name}.up_f"), ConvKind::Up, d, h, false, 2.0, rng)),
            up2: order2.then(|| UpTwice::new(store, &format!("{name}.up2"), e, h, rng)),
            mid: ConvLayer::new(store, &format!("{name}.mid"), ConvKind::Cube3, h, h, true, 2.0, rng),
            out: ConvLayer::new(store, &format!("{name}.out"), ConvKind::Cube1, h, 256, true, 0.1, rng),
        }
    }

    /// `f_new` is `f_hat^(l+1)` on the target set.
    pub fn forward(&self, g: &mut Graph, f_new: Var, ctx: &Context, links: &Links) -> Var {
        let a = self.own.apply(g, f_new, &links.target);
        let b = self.up_e.forward(g, ctx.e_cur, links.up.clone());
        let mut h = g.add(a, b);
        if let Some(up_f) = &self.up_f {
            let c = up_f.forward(g, ctx.f_cur, links.up.clone());
            h = g.add(h, c);
        }
        if let (Some(up2), Some((e, _)), Some(first)) = (&self.up2, ctx.prev, &links.up_prev) {
            let t = up2.forward(g, e, first.clone(), links.up.clone());
            h = g.add(h, t);
        }
        let h = g.relu(h);
        let h = self.mid.apply(g, h, &links.target);
        let h = g.relu(h);
        self.out.apply(g, h, &links.target)
    }
}

/// Learned correction `h(x, y)`: concat, 3^3 conv to `2d`, ReLU, 1^3 conv to `d`.
#[derive(Debug, Clone)]
pub struct SoftOp {
    pub c1: ConvLayer,
    pub c2: ConvLayer,
    pub d: usize,
}

impl SoftOp {
    /// Starts at the projection onto the first argument plus small noise.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let c1 = ConvLayer::new(store, &format!("{name}.c1"), ConvKind::Cube3, 2 * d, 2 * d, true, 1e-4, rng);
        let c2 = ConvLayer::new(store, &format!("{name}.c2"), ConvKind::Cube1, 2 * d, d, true, 1e-4, rng);
        let op = SoftOp { c1, c2, d };
        op.add_projection(store);
        op
    }

    /// Adds weights realizing `h(x, y) = x` (as `relu(x) - relu(-x)`).
    pub fn add_projection(&self, store: &mut ParamStore) {
        let d = self.d;
        let centre = 13; // index of the zero offset among the 27
        let w1 = &mut store.get_mut(self.c1.w).value;
        let cols = w1.cols;
        for i in 0..d {
            let row = centre * 2 * d + i;
            w1.data[row * cols + i] += 1.0;
            w1.data[row * cols + d + i] -= 1.0;
        }
        let w2 = &mut store.get_mut(self.c2.w).value;
        let cols = w2.cols;
        for i in 0..d {
            w2.data[i * cols + i] += 1.0;
            w2.data[(d + i) * cols + i] -= 1.0;
        }
    }

    /// Overwrites every weight and bias with zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for layer in [&self.c1, &self.c2] {
            store.get_mut(layer.w).value.data.fill(0.0);
            if let Some(b) = layer.b {
                store.get_mut(b).value.data.fill(0.0);
            }
        }
    }

    /// Exactly the projection, no noise.
    pub fn set_projection(&self, store: &mut ParamStore) {
        self.zero(store);
        self.add_projection(store);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, y: Var, set: &CoordSet) -> Var {
        let cat = g.concat(&[x, y]);
        let h = self.c1.apply(g, cat, set);
        let h = g.relu(h);
        self.c2.apply(g, h, set)
    }
}
