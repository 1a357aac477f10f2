//! The learned networks and the layer-by-layer walk shared by training,
//! encoding, decoding and evaluation.
//!
//! With depth `L` and `k` learned layers, let `base = L - k`. Layers
//! `1..=base` are coded without the model. The latent `f^(base)` is coded
//! directly; then for every step `j` in `0..k`, working from `l = base + j`:
//! predict `f_bar^(l+1)`, code the residual, reconstruct `f_hat^(l+1)`, and
//! code the occupancy bytes of layer `l + 1` with the occupancy head.

mod nets;
mod walk;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use nets::{one_hot, Context, Embedding, Encoder, Links, OccupancyHead, Predictor, SoftOp};
pub use walk::{walk, EmbeddingCache, Geometry, Side, WalkOptions, WalkOutput};

use crate::entropy::FactorizedDensity;
use crate::error::{invalid, Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, CoordSet, Graph, Mat, ParamStore, Var};

/// Network and coding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Learned layers.
    pub k: u32,
    /// Latent channels `D`.
    pub latent: usize,
    /// Embedding channels `E`.
    pub embed: usize,
    /// Hidden width of the decoder heads.
    pub hidden: usize,
    /// IRN blocks per encoder.
    pub irn: usize,
    /// Markov order of the contexts, 1 or 2.
    pub markov: u8,
    /// Learned add/subtract instead of plain arithmetic.
    pub soft: bool,
    /// Residual support is `[-clamp, clamp]`.
    pub clamp: i32,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            latent: 8,
            embed: 16,
            hidden: 16,
            irn: 1,
            markov: 2,
            soft: true,
            clamp: 64,
            init_scale: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.embed == 0 || self.hidden == 0 {
            return invalid("channel widths must be positive");
        }
        if self.irn > 0 && self.latent % 2 != 0 {
            return invalid("latent width must be even when IRN blocks are used");
        }
        if !matches!(self.markov, 1 | 2) {
            return invalid("markov order must be 1 or 2");
        }
        if !(1..=16_000).contains(&self.clamp) {
            return invalid("clamp must be in 1..=16000");
        }
        if self.k > 20 {
            return invalid("at most 20 learned layers");
        }
        if !(self.init_scale > 0.0) {
            return invalid("init_scale must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Invalid(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Forward-pass counters, for checking that decoding runs each head once per layer.
#[derive(Debug, Default)]
pub struct Counters {
    pub occupancy: AtomicUsize,
    pub prediction: AtomicUsize,
}

impl Counters {
    pub fn reset(&self) {
        self.occupancy.store(0, Ordering::Relaxed);
        self.prediction.store(0, Ordering::Relaxed);
    }

    pub fn get(&self) -> (usize, usize) {
        (self.occupancy.load(Ordering::Relaxed), self.prediction.load(Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    /// `encoders[j]` produces `f^(base + j)`, for `j` in `0..=k`.
    pub encoders: Vec<Encoder>,
    pub predictors: Vec<Predictor>,
    pub heads: Vec<OccupancyHead>,
    pub soft_sub: Vec<SoftOp>,
    pub soft_add: Vec<SoftOp>,
    /// `densities[0]` codes the root latent, `densities[j + 1]` the residual of step `j`.
    pub densities: Vec<FactorizedDensity>,
    pub counters: Counters,
}

impl Model {
    /// Seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (k, d, e, h) = (config.k as usize, config.latent, config.embed, config.hidden);
        let order2 = config.markov == 2;
        let embedding = Embedding::new(&mut store, e, &mut rng);
        let encoders = if k > 0 {
            (0..=k)
                .map(|j| Encoder::new(&mut store, &format!("enc{j}"), d, e, config.irn, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let predictors = (0..k)
            .map(|j| Predictor::new(&mut store, &format!("pred{j}"), d, e, h, order2, &mut rng))
            .collect();
        let heads = (0..k)
            .map(|j| OccupancyHead::new(&mut store, &format!("occ{j}"), d, e, h, order2, &mut rng))
            .collect();
        let (soft_sub, soft_add) = if config.soft {
            (
                (0..k).map(|j| SoftOp::new(&mut store, &format!("hs{j}"), d, &mut rng)).collect(),
                (0..k).map(|j| SoftOp::new(&mut store, &format!("ha{j}"), d, &mut rng)).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let densities = if k > 0 {
            (0..=k)
                .map(|j| FactorizedDensity::new(&mut store, &format!("density{j}"), d, config.clamp, config.init_scale))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Model {
            config,
            store,
            embedding,
            encoders,
            predictors,
            heads,
            soft_sub,
            soft_add,
            densities,
            counters: Counters::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k as usize
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    /// First 8 bytes of SHA-256 over the configuration and every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.to_text().as_bytes());
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn write_checkpoint(&self, w: impl Write) -> Result<()> {
        save_checkpoint(w, &self.store.to_checkpoint(self.config.to_text()))
    }

    /// Rebuilds a model from the configuration stored in the checkpoint.
    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let ckpt = load_checkpoint(r)?;
        let config = ModelConfig::from_text(&ckpt.config)?;
        let mut model = Model::new(config)?;
        model.store.load_values(&ckpt)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Model::read_checkpoint(f)
    }

    /// Loads a checkpoint and rejects it unless its configuration equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let m = Model::load(path)?;
        if &m.config != expected {
            return invalid("checkpoint configuration does not match the requested configuration");
        }
        Ok(m)
    }

    pub fn embed(&self, g: &mut Graph, set: &CoordSet, bytes: &[u8]) -> Var {
        self.embedding.forward(g, set, bytes)
    }

    /// Latents `f^(base)..=f^(L)` for a fully known octree, coarsest first.
    pub fn encode_latents(&self, g: &mut Graph, geo: &Geometry, emb: &mut EmbeddingCache) -> Result<Vec<Var>> {
        let depth = geo.depth as usize;
        let k = self.k();
        if k == 0 {
            return Ok(Vec::new());
        }
        let base = depth - k;
        let leaves = geo.set(depth + 1)?;
        let mut f = g.input(Mat::zeros(leaves.len(), self.latent()));
        let mut out = Vec::with_capacity(k + 1);
        for l in (base..=depth).rev() {
            let j = l - base;
            let down = geo.down(l)?;
            let e = emb.get(self, g, geo, l)?;
            let set = geo.set(l)?;
            f = self.encoders[j].forward(g, f, down, &set, e);
            out.push(f);
        }
        out.reverse();
        Ok(out)
    }

    pub fn predict(&self, g: &mut Graph, j: usize, ctx: &Context, links: &Links) -> Var {
        self.counters.prediction.fetch_add(1, Ordering::Relaxed);
        self.predictors[j].forward(g, ctx, links)
    }

    pub fn occupancy_logits(&self, g: &mut Graph, j: usize, f_new: Var, ctx: &Context, links: &Links) -> Var {
        self.counters.occupancy.fetch_add(1, Ordering::Relaxed);
        self.heads[j].forward(g, f_new, ctx, links)
    }

    /// `r = f - h_s(f_bar, f)`, or `f - f_bar` without soft operators.
    pub fn soft_subtract(&self, g: &mut Graph, j: usize, f: Var, f_bar: Var, set: &CoordSet) -> Var {
        if self.config.soft {
            let h = self.soft_sub[j].forward(g, f_bar, f, set);
            g.sub(f, h)
        } else {
            g.sub(f, f_bar)
        }
    }

    /// `f_hat = f_bar + h_a(r_hat, f_bar)`, or `f_bar + r_hat` without soft operators.
    pub fn soft_add(&self, g: &mut Graph, j: usize, f_bar: Var, r_hat: Var, set: &CoordSet) -> Var {
        if self.config.soft {
            let h = self.soft_add[j].forward(g, r_hat, f_bar, set);
            g.add(f_bar, h)
        } else {
            g.add(f_bar, r_hat)
        }
    }

    pub fn density(&self, slot: usize) -> &FactorizedDensity {
        &self.densities[slot]
    }
}

/// Rounding (half away from zero) clamped to `[-clamp, clamp]`.
pub fn quantize_residual(r: &Mat, clamp: i32) -> Mat {
    let b = clamp as f64;
    r.map(|v| v.round().clamp(-b, b))
}

/// Training surrogate: additive uniform noise on `(-1/2, 1/2)`.
pub fn residual_noise(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

/// Shared-ownership handle used by the pipeline and the FFI layer.
pub type SharedModel = Arc<Model>;
