use std::sync::Arc;

use super::{Context, Links, Model};
use crate::error::{invalid, Result};
use crate::octree::{expand_nodes, Layer, Octree};
use crate::tensor::{CoordSet, Graph, KernelMap, Mat, Var};

/// Coordinate sets of the layers known so far, growing as bytes arrive.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub depth: u32,
    /// `sets[l - 1]` holds layer `l`; `sets[depth]` holds the leaves.
    sets: Vec<Arc<CoordSet>>,
    bytes: Vec<Vec<u8>>,
}

impl Geometry {
    /// Only the root position, no bytes yet.
    pub fn new(depth: u32) -> Result<Self> {
        if depth == 0 {
            return invalid("depth must be at least 1");
        }
        Ok(Geometry {
            depth,
            sets: vec![CoordSet::new(vec![[0, 0, 0]])?],
            bytes: Vec::new(),
        })
    }

    /// Starts from the first layers' occupancy bytes.
    pub fn from_top(depth: u32, top: Vec<Vec<u8>>) -> Result<Self> {
        if top.len() > depth as usize {
            return invalid("more top layers than the depth");
        }
        let mut geo = Geometry::new(depth)?;
        for (i, b) in top.into_iter().enumerate() {
            geo.push(i + 1, b)?;
        }
        Ok(geo)
    }

    pub fn from_octree(tree: &Octree) -> Result<Self> {
        Geometry::from_top(tree.depth, tree.layers.iter().map(|l| l.bytes.clone()).collect())
    }

    /// Number of layers whose bytes are known.
    pub fn known(&self) -> usize {
        self.bytes.len()
    }

    /// Layer `l` for `l` in `1..=depth`, or the leaves for `l = depth + 1`.
    pub fn set(&self, l: usize) -> Result<Arc<CoordSet>> {
        match l.checked_sub(1).and_then(|i| self.sets.get(i)) {
            Some(s) => Ok(s.clone()),
            None => invalid(format!("layer {l} is not known yet")),
        }
    }

    pub fn bytes(&self, l: usize) -> Result<&[u8]> {
        match l.checked_sub(1).and_then(|i| self.bytes.get(i)) {
            Some(b) => Ok(b),
            None => invalid(format!("bytes of layer {l} are not known yet")),
        }
    }

    /// Records the bytes of layer `l`, which must be the next unknown layer
    /// or repeat an already known one exactly.
    pub fn push(&mut self, l: usize, bytes: Vec<u8>) -> Result<()> {
        if l == 0 || l > self.depth as usize {
            return invalid(format!("layer {l} outside depth {}", self.depth));
        }
        if l <= self.known() {
            if self.bytes[l - 1] != bytes {
                return invalid(format!("layer {l} bytes disagree with the known octree"));
            }
            return Ok(());
        }
        if l != self.known() + 1 {
            return invalid(format!("layer {l} pushed before layer {}", self.known() + 1));
        }
        let set = self.set(l)?;
        if bytes.len() != set.len() {
            return invalid(format!("layer {l} has {} nodes but {} bytes", set.len(), bytes.len()));
        }
        let children = expand_nodes(set.coords(), &bytes)?;
        self.sets.push(CoordSet::new(children)?);
        self.bytes.push(bytes);
        Ok(())
    }

    /// Upsampling map from layer `l` onto layer `l + 1`.
    pub fn up(&self, l: usize) -> Result<Arc<KernelMap>> {
        Ok(self.set(l + 1)?.link_to_parents(&self.set(l)?)?.up)
    }

    /// Downsampling map from layer `l + 1` onto layer `l`.
    pub fn down(&self, l: usize) -> Result<Arc<KernelMap>> {
        Ok(self.set(l + 1)?.link_to_parents(&self.set(l)?)?.down)
    }

    pub fn to_octree(&self) -> Result<Octree> {
        if self.known() != self.depth as usize {
            return invalid("octree is incomplete");
        }
        let layers = self
            .bytes
            .iter()
            .enumerate()
            .map(|(i, b)| Layer {
                coords: self.sets[i].coords().to_vec(),
                bytes: b.clone(),
            })
            .collect();
        Ok(Octree {
            depth: self.depth,
            layers,
        })
    }
}

/// Embeddings already recorded on a graph, by layer.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    vars: Vec<Option<Var>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, model: &Model, g: &mut Graph, geo: &Geometry, l: usize) -> Result<Var> {
        if self.vars.len() <= l {
            self.vars.resize(l + 1, None);
        }
        if let Some(v) = self.vars[l] {
            return Ok(v);
        }
        let set = geo.set(l)?;
        let v = model.embed(g, &set, geo.bytes(l)?);
        self.vars[l] = Some(v);
        Ok(v)
    }
}

/// What happens to each coded quantity: the encoder writes it, the decoder
/// reads it, training and evaluation measure it.
pub trait Side {
    /// `f_hat^(base)` on `set`.
    fn root(&mut self, g: &mut Graph, model: &Model, set: &Arc<CoordSet>) -> Result<Var>;
    /// `r_hat` for step `j`, given the prediction `f_bar` on `set`.
    fn residual(&mut self, g: &mut Graph, model: &Model, j: usize, f_bar: Var, set: &Arc<CoordSet>) -> Result<Var>;
    /// Occupancy bytes of the nodes of `set` under the head's `logits`.
    fn occupancy(&mut self, g: &mut Graph, model: &Model, j: usize, logits: Var, set: &Arc<CoordSet>) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WalkOptions {
    /// Feed zeros instead of reconstructed latents to the occupancy heads.
    pub zero_latent: bool,
}

#[derive(Debug, Clone, Default)]
pub struct WalkOutput {
    /// `f_hat^(base)..=f_hat^(L)`.
    pub latents: Vec<Var>,
}

/// Runs the learned steps. `geo` must know layers `1..=L-k`; each step adds one.
pub fn walk(
    model: &Model,
    g: &mut Graph,
    geo: &mut Geometry,
    emb: &mut EmbeddingCache,
    side: &mut dyn Side,
    opts: WalkOptions,
) -> Result<WalkOutput> {
    let k = model.k();
    let depth = geo.depth as usize;
    if k == 0 {
        return Ok(WalkOutput::default());
    }
    if depth < k + 1 {
        return invalid(format!("depth {depth} is too small for {k} learned layers"));
    }
    let base = depth - k;
    if geo.known() < base {
        return invalid("the walk needs every layer above the learned ones");
    }
    let d = model.latent();
    let f_root = side.root(g, model, &geo.set(base)?)?;
    let mut latents = vec![f_root];
    let mut f_prev: Option<Var> = None;
    let mut f_cur = f_root;
    for j in 0..k {
        let l = base + j;
        let target = geo.set(l + 1)?;
        let links = Links {
            up: geo.up(l)?,
            up_prev: if l >= 2 && model.config.markov == 2 { Some(geo.up(l - 1)?) } else { None },
            target: target.clone(),
        };
        let e_cur = emb.get(model, g, geo, l)?;
        let prev = if l >= 2 && model.config.markov == 2 {
            let e_prev = emb.get(model, g, geo, l - 1)?;
            let f = match f_prev {
                Some(f) => f,
                None => g.input(Mat::zeros(geo.set(l - 1)?.len(), d)),
            };
            Some((e_prev, f))
        } else {
            None
        };
        let ctx = Context { e_cur, f_cur, prev };
        let f_bar = model.predict(g, j, &ctx, &links);
        let r_hat = side.residual(g, model, j, f_bar, &target)?;
        let f_hat = model.soft_add(g, j, f_bar, r_hat, &target);

        let (f_new, head_ctx) = if opts.zero_latent {
            let zero_new = g.input(Mat::zeros(target.len(), d));
            let zero_cur = g.input(Mat::zeros(geo.set(l)?.len(), d));
            let prev = match ctx.prev {
                Some((e, f)) => {
                    let rows = g.value(f).rows;
                    Some((e, g.input(Mat::zeros(rows, d))))
                }
                None => None,
            };
            (zero_new, Context { e_cur, f_cur: zero_cur, prev })
        } else {
            (f_hat, ctx)
        };
        let logits = model.occupancy_logits(g, j, f_new, &head_ctx, &links);
        let bytes = side.occupancy(g, model, j, logits, &target)?;
        geo.push(l + 1, bytes)?;

        latents.push(f_hat);
        f_prev = Some(f_cur);
        f_cur = f_hat;
    }
    Ok(WalkOutput { latents })
}
