use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{total_loss_var, LayerRate, RateReport};
use crate::error::{invalid, Error, Result};
use crate::model::{residual_noise, walk, EmbeddingCache, Geometry, Model, ModelConfig, Side, WalkOptions};
use crate::octree::{build_octree, Octree};
use crate::pcio::{quantize, PointCloud};
use crate::tensor::{AdamConfig, CoordSet, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early after this many optimizer steps (one cloud per step).
    pub max_steps: Option<usize>,
    pub lr: f64,
    /// Epochs trained with the low rate weight before switching to the high one.
    pub warmup_epochs: usize,
    pub alpha_warmup: f64,
    pub alpha: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub depth: u32,
    pub seed: u64,
    /// Where to write the parameters if the loss diverges.
    pub dump: Option<PathBuf>,
    /// Rounded residuals (straight-through) feed the reconstruction while
    /// the rate term still sees additive noise.
    pub mixed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            max_steps: None,
            lr: 3e-3,
            warmup_epochs: 5,
            alpha_warmup: 0.5,
            alpha: 0.95,
            lr_decay: 0.7,
            decay_every: 20,
            depth: 6,
            seed: 0,
            dump: None,
            mixed: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be positive");
        }
        for a in [self.alpha, self.alpha_warmup] {
            if !(a > 0.0 && a <= 1.0) {
                return invalid("alpha must be in (0, 1]");
            }
        }
        if self.decay_every == 0 {
            return invalid("decay_every must be positive");
        }
        Ok(())
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.alpha_warmup
        } else {
            self.alpha
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Model and training settings read from one file, as two tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn from_text(text: &str) -> Result<Self> {
        let f: TrainFile = toml::from_str(text).map_err(|e| Error::Invalid(format!("training config: {e}")))?;
        f.model.validate()?;
        f.train.validate()?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub alpha: f64,
    pub lr: f64,
    /// Mean normalized loss over the epoch.
    pub loss: f64,
    /// Noise-surrogate rates summed over the epoch.
    pub rates: RateReport,
}

struct TrainSide<'r, 't> {
    latents: Vec<Var>,
    tree: &'t Octree,
    base: usize,
    rng: &'r mut ChaCha8Rng,
    mixed: bool,
    clamp: i32,
    residual: Vec<Var>,
    occupancy: Vec<Var>,
    nodes: Vec<usize>,
}

impl TrainSide<'_, '_> {
    fn noisy(&mut self, g: &mut Graph, model: &Model, slot: usize, r: Var) -> Var {
        let (rows, cols) = g.value(r).shape();
        let u = g.input(residual_noise(rows, cols, self.rng));
        let noisy = g.add(r, u);
        let bits = model.density(slot).bits(g, noisy);
        self.residual.push(bits);
        if !self.mixed {
            return noisy;
        }
        let b = self.clamp as f64;
        let offset = g.value(r).map(|x| x.round().clamp(-b, b) - x);
        let offset = g.input(offset);
        g.add(r, offset)
    }
}

impl Side for TrainSide<'_, '_> {
    fn root(&mut self, g: &mut Graph, model: &Model, _set: &Arc<CoordSet>) -> Result<Var> {
        Ok(self.noisy(g, model, 0, self.latents[0]))
    }

    fn residual(&mut self, g: &mut Graph, model: &Model, j: usize, f_bar: Var, set: &Arc<CoordSet>) -> Result<Var> {
        let r = model.soft_subtract(g, j, self.latents[j + 1], f_bar, set);
        self.nodes.push(set.len());
        Ok(self.noisy(g, model, j + 1, r))
    }

    fn occupancy(&mut self, g: &mut Graph, _model: &Model, j: usize, logits: Var, _set: &Arc<CoordSet>) -> Result<Vec<u8>> {
        let bytes = self.tree.layer(self.base + j + 1).bytes.clone();
        let bits = g.softmax_bits(logits, Arc::new(bytes.clone()));
        self.occupancy.push(bits);
        Ok(bytes)
    }
}

/// A training example: the octree and its geometry, kept across steps so
/// cached neighbourhood maps are reused.
pub struct Example {
    pub tree: Octree,
    geo: Geometry,
}

impl Example {
    pub fn new(tree: Octree) -> Result<Self> {
        let geo = Geometry::from_octree(&tree)?;
        Ok(Example { tree, geo })
    }

    pub fn from_cloud(cloud: &PointCloud, depth: u32) -> Result<Self> {
        let q = quantize(cloud, depth)?;
        Example::new(build_octree(&q.voxels, depth)?)
    }
}

struct Step {
    loss: f64,
    rates: RateReport,
}

fn forward_backward(model: &mut Model, ex: &mut Example, alpha: f64, mixed: bool, rng: &mut ChaCha8Rng) -> Result<Step> {
    let k = model.k();
    let depth = ex.tree.depth as usize;
    if k == 0 {
        return invalid("nothing to train with zero learned layers");
    }
    if depth < k + 1 {
        return invalid(format!("depth {depth} is too small for {k} learned layers"));
    }
    let base = depth - k;
    let leaves = ex.geo.set(depth + 1)?.len();
    let (loss, grads, rates) = {
        let mut g = Graph::new(&model.store);
        let mut emb = EmbeddingCache::new();
        let latents = model.encode_latents(&mut g, &ex.geo, &mut emb)?;
        let mut side = TrainSide {
            latents,
            tree: &ex.tree,
            base,
            rng,
            mixed,
            clamp: model.config.clamp,
            residual: Vec::new(),
            occupancy: Vec::new(),
            nodes: Vec::new(),
        };
        walk(model, &mut g, &mut ex.geo, &mut emb, &mut side, WalkOptions::default())?;
        let s = side;
        let loss = total_loss_var(&mut g, &s.residual, &s.occupancy, alpha, 1.0 / leaves.max(1) as f64);
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss is {value}")));
        }
        let scalar = |v: Var| g.value(v).data[0];
        let rates = RateReport {
            top_occupancy_bits: 0.0,
            root_latent_bits: scalar(s.residual[0]),
            layers: (0..k)
                .map(|j| LayerRate {
                    layer: (s.base + j + 1) as u32,
                    nodes: s.nodes[j],
                    residual_bits: scalar(s.residual[j + 1]),
                    occupancy_bits: scalar(s.occupancy[j]),
                })
                .collect(),
            header_bits: 0.0,
            output_points: leaves,
        };
        let grads = g.backward(loss);
        (value, grads, rates)
    };
    model.store.accumulate(&grads);
    Ok(Step { loss, rates })
}

fn add_rates(acc: &mut RateReport, r: &RateReport) {
    acc.root_latent_bits += r.root_latent_bits;
    acc.output_points += r.output_points;
    if acc.layers.is_empty() {
        acc.layers = r.layers.clone();
        return;
    }
    for (a, b) in acc.layers.iter_mut().zip(&r.layers) {
        a.nodes += b.nodes;
        a.residual_bits += b.residual_bits;
        a.occupancy_bits += b.occupancy_bits;
    }
}

/// Trains in place. Calls `on_epoch` after every epoch.
pub fn train_examples(
    model: &mut Model,
    examples: &mut [Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if examples.is_empty() {
        return invalid("training corpus is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut steps = 0;
    let mut reports = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let alpha = cfg.alpha_at(epoch);
        let adam = AdamConfig {
            lr: cfg.lr_at(epoch),
            ..AdamConfig::default()
        };
        order.shuffle(&mut rng);
        let mut report = EpochReport {
            epoch,
            steps: 0,
            alpha,
            lr: adam.lr,
            loss: 0.0,
            rates: RateReport::default(),
        };
        for &i in &order {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let step = match forward_backward(model, &mut examples[i], alpha, cfg.mixed, &mut rng) {
                Ok(s) => s,
                Err(e @ Error::Numerical(_)) => {
                    if let Some(path) = &cfg.dump {
                        model.save(path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            model.store.adam_step(&adam)?;
            steps += 1;
            report.steps += 1;
            report.loss += step.loss;
            add_rates(&mut report.rates, &step.rates);
        }
        if report.steps == 0 {
            break 'outer;
        }
        report.loss /= report.steps as f64;
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Builds a model from `model_cfg` and trains it on `corpus`.
pub fn train(
    corpus: &[PointCloud],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(Model, Vec<EpochReport>)> {
    if corpus.is_empty() {
        return invalid("training corpus is empty");
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut examples = corpus
        .iter()
        .map(|c| Example::from_cloud(c, cfg.depth))
        .collect::<Result<Vec<_>>>()?;
    let reports = train_examples(&mut model, &mut examples, cfg, on_epoch)?;
    Ok((model, reports))
}
