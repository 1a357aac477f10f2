//! Rate estimation: a fully factorized learned density for latent residuals,
//! occupancy cross-entropy, and the weighted training objective.
//!
//! Each latent channel has its own monotone CDF network
//! `c(t) = sigmoid(g(t))`, where `g` stacks four scalar affine layers of
//! widths 1 -> 3 -> 3 -> 3 -> 1. Matrix entries pass through softplus so
//! they stay positive, and each hidden layer adds `tanh(a) * tanh(z)` with
//! `tanh(a) > -1`, so `g` is strictly increasing. An integer value `k` has
//! probability `c(k + 1/2) - c(k - 1/2)`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{CustomOp, Graph, Mat, ParamId, ParamStore, Var};

const LN2: f64 = std::f64::consts::LN_2;

/// Smallest probability any integer bin may carry.
pub const PROB_FLOOR: f64 = 1.0 / 4_294_967_296.0;

/// Per-channel parameter count: 3 layers of (H, b, a) plus the output layer.
pub const PARAMS_PER_CHANNEL: usize = 43;

// Offsets of each layer's H, b, a blocks inside a channel's parameter row.
const LAYERS: [LayerShape; 4] = [
    LayerShape { n_in: 1, n_out: 3, h: 0, b: 3, a: Some(6) },
    LayerShape { n_in: 3, n_out: 3, h: 9, b: 18, a: Some(21) },
    LayerShape { n_in: 3, n_out: 3, h: 24, b: 33, a: Some(36) },
    LayerShape { n_in: 3, n_out: 1, h: 39, b: 42, a: None },
];

#[derive(Clone, Copy)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    h: usize,
    b: usize,
    a: Option<usize>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values of one evaluation of the CDF logit network.
struct Trace {
    // inputs to each layer (h) and pre-activations (z); at most width 3
    h: [[f64; 3]; 4],
    z: [[f64; 3]; 4],
}

fn logit_forward(t: f64, p: &[f64]) -> (f64, Trace) {
    let mut tr = Trace {
        h: [[0.0; 3]; 4],
        z: [[0.0; 3]; 4],
    };
    let mut cur = [t, 0.0, 0.0];
    for (li, l) in LAYERS.iter().enumerate() {
        tr.h[li] = cur;
        let mut next = [0.0; 3];
        for j in 0..l.n_out {
            let mut z = p[l.b + j];
            for k in 0..l.n_in {
                z += softplus(p[l.h + j * l.n_in + k]) * cur[k];
            }
            tr.z[li][j] = z;
            next[j] = match l.a {
                Some(a) => z + p[a + j].tanh() * z.tanh(),
                None => z,
            };
        }
        cur = next;
    }
    (cur[0], tr)
}

/// Accumulates `g * d logit / d params` into `dp`; returns `g * d logit / dt`.
fn logit_backward(p: &[f64], tr: &Trace, g: f64, dp: &mut [f64]) -> f64 {
    let mut dh = [g, 0.0, 0.0];
    for (li, l) in LAYERS.iter().enumerate().rev() {
        let mut dprev = [0.0; 3];
        for j in 0..l.n_out {
            let z = tr.z[li][j];
            let dz = match l.a {
                Some(a) => {
                    let ta = p[a + j].tanh();
                    let tz = z.tanh();
                    dp[a + j] += dh[j] * (1.0 - ta * ta) * tz;
                    dh[j] * (1.0 + ta * (1.0 - tz * tz))
                }
                None => dh[j],
            };
            dp[l.b + j] += dz;
            for k in 0..l.n_in {
                let hk = p[l.h + j * l.n_in + k];
                dp[l.h + j * l.n_in + k] += dz * sigmoid(hk) * tr.h[li][k];
                dprev[k] += dz * softplus(hk);
            }
        }
        dh = dprev;
    }
    dh[0]
}

/// Probability mass of the unit interval around `v`, with the derivatives of
/// that mass with respect to the upper and lower logits.
#[inline]
fn interval_mass(upper: f64, lower: f64) -> (f64, f64, f64) {
    let mass = if upper + lower > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    };
    let du = sigmoid(upper) * sigmoid(-upper);
    let dl = -sigmoid(lower) * sigmoid(-lower);
    (mass, du, dl)
}

/// A learned factorized density with one CDF network per channel.
#[derive(Debug, Clone)]
pub struct FactorizedDensity {
    pub phi: ParamId,
    pub channels: usize,
    /// Integer support is `[-clamp, clamp]`; outer mass folds into the edges.
    pub clamp: i32,
}

impl FactorizedDensity {
    /// Registers the parameters. Biases start at zero, which makes every
    /// logit network odd and every pmf symmetric about zero.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, clamp: i32, init_scale: f64) -> Self {
        let scale = init_scale.powf(1.0 / 4.0);
        let mut row = vec![0.0; PARAMS_PER_CHANNEL];
        for l in LAYERS {
            let init = (1.0 / scale / l.n_out as f64).exp_m1().ln();
            for i in 0..l.n_in * l.n_out {
                row[l.h + i] = init;
            }
        }
        let mut data = Vec::with_capacity(channels * PARAMS_PER_CHANNEL);
        for _ in 0..channels {
            data.extend_from_slice(&row);
        }
        let phi = store.add(
            format!("{name}.phi"),
            vec![channels, PARAMS_PER_CHANNEL],
            Mat::from_vec(channels, PARAMS_PER_CHANNEL, data),
        );
        FactorizedDensity { phi, channels, clamp }
    }

    /// Perturbs the biases, breaking the initial symmetry (tests only need
    /// this to exercise asymmetric densities).
    pub fn jitter(&self, store: &mut ParamStore, amount: f64, rng: &mut impl Rng) {
        let p = &mut store.get_mut(self.phi).value;
        for c in 0..self.channels {
            for l in LAYERS {
                for j in 0..l.n_out {
                    p.data[c * PARAMS_PER_CHANNEL + l.b + j] += rng.gen_range(-amount..amount);
                }
            }
        }
    }

    fn channel_params<'s>(&self, store: &'s ParamStore, channel: usize) -> &'s [f64] {
        store.get(self.phi).value.row(channel)
    }

    /// The CDF `c_i(t)` of one channel.
    pub fn cdf(&self, store: &ParamStore, channel: usize, t: f64) -> f64 {
        sigmoid(logit_forward(t, self.channel_params(store, channel)).0)
    }

    /// Integer-bin probabilities over `[-clamp, clamp]`: tails folded into the
    /// edge bins, floored at [`PROB_FLOOR`], then renormalized.
    pub fn pmf_table(&self, store: &ParamStore, channel: usize) -> Vec<f64> {
        let p = self.channel_params(store, channel);
        let b = self.clamp;
        let logit = |t: f64| logit_forward(t, p).0;
        let mut edges: Vec<f64> = (-b..=b + 1).map(|k| logit(k as f64 - 0.5)).collect();
        // first and last edges are the folded tails
        edges[0] = f64::NEG_INFINITY;
        *edges.last_mut().unwrap() = f64::INFINITY;
        let mut pmf: Vec<f64> = edges
            .windows(2)
            .map(|w| {
                let (m, _, _) = interval_mass(w[1], w[0]);
                m.max(PROB_FLOOR)
            })
            .collect();
        let s: f64 = pmf.iter().sum();
        for v in &mut pmf {
            *v /= s;
        }
        pmf
    }

    pub fn pmf_tables(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.pmf_table(store, c)).collect()
    }

    /// Rate in bits of continuous (noise-perturbed) values under the density
    /// convolved with the unit box. Recorded on the graph for training.
    pub fn bits(&self, g: &mut Graph, x: Var) -> Var {
        let phi = g.param(self.phi);
        let xv = g.value(x);
        assert_eq!(xv.cols, self.channels, "density channel count");
        let params = g.value(phi);
        let mut bits = 0.0;
        for r in 0..xv.rows {
            for (c, &v) in xv.row(r).iter().enumerate() {
                let p = params.row(c);
                let (m, _, _) = interval_mass(logit_forward(v + 0.5, p).0, logit_forward(v - 0.5, p).0);
                bits -= m.max(PROB_FLOOR).log2();
            }
        }
        g.custom(&[x, phi], Mat::scalar(bits), Box::new(BoxedDensityBits))
    }

    /// Continuous-surrogate rate without recording a graph.
    pub fn bits_value(&self, store: &ParamStore, x: &Mat) -> f64 {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let b = self.bits(&mut g, xv);
        g.value(b).data[0]
    }
}

#[derive(Debug)]
struct BoxedDensityBits;

impl CustomOp for BoxedDensityBits {
    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad_out: &Mat) -> Vec<Mat> {
        let (x, phi) = (inputs[0], inputs[1]);
        let go = grad_out.data[0];
        let mut gx = Mat::zeros(x.rows, x.cols);
        let mut gphi = Mat::zeros(phi.rows, phi.cols);
        for r in 0..x.rows {
            for c in 0..x.cols {
                let v = x.at(r, c);
                let p = phi.row(c);
                let (lu, tu) = logit_forward(v + 0.5, p);
                let (ll, tl) = logit_forward(v - 0.5, p);
                let (m, du, dl) = interval_mass(lu, ll);
                // d(-log2 m)/dm, passed straight through the floor
                let dm = -go / (LN2 * m.max(PROB_FLOOR));
                let dp = gphi.row_mut(c);
                let dxu = logit_backward(p, &tu, dm * du, dp);
                let dxl = logit_backward(p, &tl, dm * dl, dp);
                gx.data[r * x.cols + c] = dxu + dxl;
            }
        }
        vec![gx, gphi]
    }
}

/// Bits for integer values under per-channel pmf tables over `[-b, b]`.
/// Values outside the support are clipped to the edge bins.
pub fn discrete_bits(values: &Mat, tables: &[Vec<f64>]) -> Result<f64> {
    if values.cols != tables.len() {
        return invalid("one pmf table per channel required");
    }
    let mut bits = 0.0;
    for r in 0..values.rows {
        for (c, &v) in values.row(r).iter().enumerate() {
            let t = &tables[c];
            let b = (t.len() / 2) as i64;
            let k = (v.round() as i64).clamp(-b, b);
            bits -= t[(k + b) as usize].log2();
        }
    }
    Ok(bits)
}

/// Occupancy cost of `targets` under row distributions `probs` (N x 256).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyRate {
    pub bits: f64,
    /// Bits divided by the node count of the layer.
    pub bits_per_node: f64,
}

pub fn occupancy_rate(probs: &Mat, targets: &[u8]) -> Result<OccupancyRate> {
    if probs.rows != targets.len() || probs.cols != 256 {
        return invalid("occupancy distribution must be N x 256 with N targets");
    }
    let mut bits = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let p = probs.at(r, t as usize);
        if p <= 0.0 {
            return invalid(format!("zero probability for the true symbol at node {r}"));
        }
        bits -= p.log2();
    }
    let n = targets.len().max(1) as f64;
    Ok(OccupancyRate {
        bits,
        bits_per_node: bits / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerRate {
    /// Octree layer index (1-based).
    pub layer: u32,
    pub nodes: usize,
    pub residual_bits: f64,
    pub occupancy_bits: f64,
}

impl LayerRate {
    pub fn residual_bits_per_node(&self) -> f64 {
        self.residual_bits / self.nodes.max(1) as f64
    }
    pub fn occupancy_bits_per_node(&self) -> f64 {
        self.occupancy_bits / self.nodes.max(1) as f64
    }
}

/// Bits spent per part of a frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateReport {
    /// Upper octree layers coded without the learned model.
    pub top_occupancy_bits: f64,
    /// The coarsest latent, coded directly.
    pub root_latent_bits: f64,
    pub layers: Vec<LayerRate>,
    pub header_bits: f64,
    /// Number of decoded (output) points.
    pub output_points: usize,
}

impl RateReport {
    pub fn residual_bits(&self) -> f64 {
        self.root_latent_bits + self.layers.iter().map(|l| l.residual_bits).sum::<f64>()
    }

    /// Occupancy bits of the learned layers only.
    pub fn learned_occupancy_bits(&self) -> f64 {
        self.layers.iter().map(|l| l.occupancy_bits).sum()
    }

    pub fn occupancy_bits(&self) -> f64 {
        self.top_occupancy_bits + self.learned_occupancy_bits()
    }

    pub fn payload_bits(&self) -> f64 {
        self.residual_bits() + self.occupancy_bits()
    }

    pub fn total_bits(&self) -> f64 {
        self.payload_bits() + self.header_bits
    }

    /// Bits per output point, header included.
    pub fn bpop(&self) -> f64 {
        self.total_bits() / self.output_points.max(1) as f64
    }

    /// Percentage of payload bits spent on latents.
    pub fn latent_share(&self) -> f64 {
        let p = self.payload_bits();
        if p == 0.0 {
            0.0
        } else {
            100.0 * self.residual_bits() / p
        }
    }

    /// Training objective over the learned parts: `alpha * latent + occupancy`.
    pub fn loss(&self, alpha: f64) -> f64 {
        let mut residual = vec![self.root_latent_bits];
        residual.extend(self.layers.iter().map(|l| l.residual_bits));
        let occ: Vec<f64> = self.layers.iter().map(|l| l.occupancy_bits).collect();
        total_loss(&residual, &occ, alpha)
    }
}

/// `alpha * sum(residual) + sum(occupancy)`.
pub fn total_loss(residual: &[f64], occupancy: &[f64], alpha: f64) -> f64 {
    alpha * residual.iter().sum::<f64>() + occupancy.iter().sum::<f64>()
}

/// Graph form of [`total_loss`], scaled by `norm` (typically 1 / output points).
pub fn total_loss_var(g: &mut Graph, residual: &[Var], occupancy: &[Var], alpha: f64, norm: f64) -> Var {
    let mut acc: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Var, w: f64| {
        let s = g.scale(v, w * norm);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    };
    for &r in residual {
        push(g, r, alpha);
    }
    for &o in occupancy {
        push(g, o, 1.0);
    }
    acc.unwrap_or_else(|| g.input(Mat::scalar(0.0)))
}

/// Shared handle used when several owners need the same tables.
pub type PmfTables = Arc<Vec<Vec<f64>>>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn density(channels: usize) -> (ParamStore, FactorizedDensity) {
        let mut s = ParamStore::new();
        let d = FactorizedDensity::new(&mut s, "d", channels, 64, 10.0);
        (s, d)
    }

    #[test]
    fn symmetric_init_gives_symmetric_pmf() {
        let (s, d) = density(2);
        for c in 0..2 {
            let t = d.pmf_table(&s, c);
            for k in 0..=64usize {
                assert!((t[64 + k] - t[64 - k]).abs() < 1e-15);
            }
            let x = 1.37;
            assert!((d.cdf(&s, c, x) + d.cdf(&s, c, -x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pmf_sums_to_one_and_is_floored() {
        let (mut s, d) = density(3);
        d.jitter(&mut s, 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        for c in 0..3 {
            let t = d.pmf_table(&s, c);
            let sum: f64 = t.iter().sum();
            assert!(sum >= 1.0 - 1e-9 && sum <= 1.0 + 1e-12, "{sum}");
            assert!(t.iter().all(|&p| p >= PROB_FLOOR * 0.999_999));
        }
    }

    #[test]
    fn cdf_is_monotone_on_dense_grid() {
        let (mut s, d) = density(2);
        d.jitter(&mut s, 3.0, &mut ChaCha8Rng::seed_from_u64(2));
        // random matrix entries too; softplus keeps them positive
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in s.get_mut(d.phi).value.data.iter_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        for c in 0..2 {
            let mut prev = 0.0;
            for i in 0..=2600 {
                let x = -65.0 + i as f64 * 0.05;
                let y = d.cdf(&s, c, x);
                assert!(y >= prev, "cdf decreased at {x}");
                prev = y;
            }
        }
    }

    #[test]
    fn discrete_bits_examples() {
        let half = vec![vec![0.25, 0.5, 0.25]];
        assert_eq!(discrete_bits(&Mat::scalar(0.0), &half).unwrap(), 1.0);
        assert_eq!(discrete_bits(&Mat::zeros(0, 1), &half).unwrap(), 0.0);
        let b = 64usize;
        let uniform = vec![vec![1.0 / (2 * b + 1) as f64; 2 * b + 1]; 2];
        let vals = Mat::from_vec(50, 2, (0..100).map(|i| (i % 129) as f64 - 64.0).collect());
        let bits = discrete_bits(&vals, &uniform).unwrap();
        assert!((bits - 100.0 * (129f64).log2()).abs() < 1e-9);
    }

    #[test]
    fn occupancy_rate_examples() {
        let uniform = Mat::filled(4, 256, 1.0 / 256.0);
        let r = occupancy_rate(&uniform, &[1, 2, 3, 255]).unwrap();
        assert!((r.bits_per_node - 8.0).abs() < 1e-12);
        assert!((r.bits - 32.0).abs() < 1e-12);

        let mut onehot = Mat::zeros(2, 256);
        onehot.data[7] = 1.0;
        onehot.data[256 + 9] = 1.0;
        assert_eq!(occupancy_rate(&onehot, &[7, 9]).unwrap().bits, 0.0);
        assert!(occupancy_rate(&onehot, &[8, 9]).is_err());

        let mut half = Mat::filled(3, 256, 0.5 / 255.0);
        for r in 0..3 {
            half.data[r * 256 + 40] = 0.5;
        }
        assert!((occupancy_rate(&half, &[40, 40, 40]).unwrap().bits_per_node - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(total_loss(&[2.0, 3.0], &[4.0, 5.0], 0.5), 11.5);
        assert_eq!(total_loss(&[2.0, 3.0], &[4.0, 5.0], 1.0), 14.0);
        assert!((total_loss(&[2.0, 3.0], &[4.0, 5.0], 1e-12) - 9.0).abs() < 1e-10);
        let r = RateReport {
            root_latent_bits: 2.0,
            layers: vec![LayerRate {
                layer: 3,
                nodes: 1,
                residual_bits: 3.0,
                occupancy_bits: 9.0,
            }],
            ..Default::default()
        };
        assert_eq!(r.loss(0.5), 11.5);
    }
}
