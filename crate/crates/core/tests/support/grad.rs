//! Central finite-difference gradient checks. Each primitive builds a random
//! small instance; [`worst`] runs 20 of them.

use std::sync::Arc;

use lpcc::entropy::{total_loss_var, FactorizedDensity};
use lpcc::model::{Context, Embedding, Links, OccupancyHead, Predictor, SoftOp};
use lpcc::tensor::{ConvKind, ConvLayer, CoordSet, Graph, Irn, Mat, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
/// Coordinates sampled per tensor for the numerical side.
const SAMPLES: usize = 24;

fn rand_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// A random subset of an `n^3` grid with at least two points.
fn rand_set(n: i32, density: f64, rng: &mut impl Rng) -> Arc<CoordSet> {
    loop {
        let coords: Vec<[i32; 3]> = (0..n * n * n)
            .map(|i| [i / (n * n), (i / n) % n, i % n])
            .filter(|_| rng.gen_bool(density))
            .collect();
        if coords.len() >= 2 {
            return CoordSet::new(coords).unwrap();
        }
    }
}

/// Perturbs every parameter so no weight sits at a special value.
fn shake(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in &mut store.get_mut(id).value.data {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Builds `f`, reduces its output with fixed random weights, and compares
/// gradients. Returns the worst relative error over the checked tensors.
fn check<F>(store: &mut ParamStore, inputs: &[Mat], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let weights = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let (r, c) = g.value(out).shape();
        Arc::new(rand_mat(r, c, 1.0, rng))
    };
    let eval = |store: &ParamStore, inputs: &[Mat]| {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = g.dot_const(out, weights.clone());
        g.value(loss).data[0]
    };

    let (input_grads, grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input_with_grad(m.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = g.dot_const(out, weights.clone());
        let grads = g.backward(loss);
        let ig: Vec<Mat> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
            .collect();
        (ig, grads)
    };
    store.zero_grad();
    store.accumulate(&grads);

    let mut worst: f64 = 0.0;
    let mut compare = |analytic: Vec<f64>, numeric: Vec<f64>| {
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-9 { diff } else { diff / scale };
        worst = worst.max(rel);
    };

    for (i, m) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..m.data.len()).collect();
        idx.shuffle(rng);
        idx.truncate(SAMPLES);
        let mut num = Vec::new();
        for &j in &idx {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= STEP;
            num.push((eval(store, &plus) - eval(store, &minus)) / (2.0 * STEP));
        }
        compare(idx.iter().map(|&j| input_grads[i].data[j]).collect(), num);
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(SAMPLES);
        let analytic: Vec<f64> = idx.iter().map(|&j| store.get(id).grad.data[j]).collect();
        let mut num = Vec::new();
        for &j in &idx {
            let orig = store.get(id).value.data[j];
            store.get_mut(id).value.data[j] = orig + STEP;
            let up = eval(store, inputs);
            store.get_mut(id).value.data[j] = orig - STEP;
            let down = eval(store, inputs);
            store.get_mut(id).value.data[j] = orig;
            num.push((up - down) / (2.0 * STEP));
        }
        compare(analytic, num);
    }
    worst
}

pub const PRIMITIVES: [(&str, fn(&mut ChaCha8Rng) -> f64); 9] = [
    ("sparse_conv", sparse_convolution),
    ("downsample", downsample),
    ("upsample", upsample),
    ("irn", irn_block),
    ("embedding", occupancy_embedding),
    ("soft_ops", soft_add_and_subtract),
    ("density", factorized_density),
    ("softmax_head", softmax_occupancy_head),
    ("total_loss", total_loss),
];

/// Largest relative error over [`INSTANCES`] seeded instances.
pub fn worst(name: &str, instance: fn(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..INSTANCES)
        .map(|seed| instance(&mut ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64)))
        .fold(0.0, f64::max)
}

pub fn sparse_convolution(rng: &mut ChaCha8Rng) -> f64 {
    let set = rand_set(4, 0.4, rng);
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let mut store = ParamStore::new();
    let kind = if rng.gen_bool(0.5) { ConvKind::Cube3 } else { ConvKind::Cube1 };
    let layer = ConvLayer::new(&mut store, "c", kind, cin, cout, true, 1.0, rng);
    shake(&mut store, 0.1, rng);
    let x = rand_mat(set.len(), cin, 1.0, rng);
    check(&mut store, &[x], rng, |g, v| layer.apply(g, v[0], &set))
}

pub fn downsample(rng: &mut ChaCha8Rng) -> f64 {
    let children = rand_set(4, 0.35, rng);
    let parents = children.parent_set();
    let link = children.link_to_parents(&parents).unwrap();
    let mut store = ParamStore::new();
    let layer = ConvLayer::new(&mut store, "d", ConvKind::Down, 2, 3, true, 1.0, rng);
    shake(&mut store, 0.1, rng);
    let x = rand_mat(children.len(), 2, 1.0, rng);
    check(&mut store, &[x], rng, |g, v| layer.forward(g, v[0], link.down.clone()))
}

pub fn upsample(rng: &mut ChaCha8Rng) -> f64 {
    let children = rand_set(4, 0.35, rng);
    let parents = children.parent_set();
    let link = children.link_to_parents(&parents).unwrap();
    let mut store = ParamStore::new();
    let layer = ConvLayer::new(&mut store, "u", ConvKind::Up, 3, 2, false, 1.0, rng);
    shake(&mut store, 0.1, rng);
    let x = rand_mat(parents.len(), 3, 1.0, rng);
    check(&mut store, &[x], rng, |g, v| layer.forward(g, v[0], link.up.clone()))
}

pub fn irn_block(rng: &mut ChaCha8Rng) -> f64 {
    let set = rand_set(4, 0.4, rng);
    let mut store = ParamStore::new();
    let block = Irn::new(&mut store, "irn", 4, rng);
    shake(&mut store, 0.1, rng);
    let x = rand_mat(set.len(), 4, 1.0, rng);
    check(&mut store, &[x], rng, |g, v| block.forward(g, v[0], &set))
}

pub fn occupancy_embedding(rng: &mut ChaCha8Rng) -> f64 {
    let set = rand_set(4, 0.4, rng);
    let bytes: Vec<u8> = (0..set.len()).map(|_| rng.gen_range(1..=255)).collect();
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, 3, rng);
    shake(&mut store, 0.05, rng);
    check(&mut store, &[], rng, |g, _| emb.forward(g, &set, &bytes))
}

pub fn soft_add_and_subtract(rng: &mut ChaCha8Rng) -> f64 {
    let set = rand_set(4, 0.4, rng);
    let mut store = ParamStore::new();
    let op = SoftOp::new(&mut store, "s", 3, rng);
    shake(&mut store, 0.2, rng);
    let x = rand_mat(set.len(), 3, 1.0, rng);
    let y = rand_mat(set.len(), 3, 1.0, rng);
    let subtract = rng.gen_bool(0.5);
    check(&mut store, &[x, y], rng, |g, v| {
        let h = op.forward(g, v[0], v[1], &set);
        if subtract {
            g.sub(v[1], h)
        } else {
            g.add(v[0], h)
        }
    })
}

pub fn factorized_density(rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let d = FactorizedDensity::new(&mut store, "p", 3, 64, rng.gen_range(1.0..10.0));
    d.jitter(&mut store, 0.5, rng);
    shake(&mut store, 0.05, rng);
    let x = rand_mat(rng.gen_range(2..6), 3, 4.0, rng);
    check(&mut store, &[x], rng, |g, v| d.bits(g, v[0]))
}

fn children(parents: &CoordSet, rng: &mut impl Rng) -> Arc<CoordSet> {
    let mut c = Vec::new();
    for p in parents.coords() {
        for o in 0..8 {
            if o == 0 || rng.gen_bool(0.3) {
                c.push([2 * p[0] + (o >> 2), 2 * p[1] + ((o >> 1) & 1), 2 * p[2] + (o & 1)]);
            }
        }
    }
    CoordSet::from_unsorted(c)
}

/// Occupancy head and latent predictor, both Markov orders, under the
/// softmax cross-entropy.
pub fn softmax_occupancy_head(rng: &mut ChaCha8Rng) -> f64 {
    let (d, e, h) = (2, 2, 3);
    let l0 = rand_set(2, 0.5, rng);
    let l1 = children(&l0, rng);
    let l2 = children(&l1, rng);
    let order2 = rng.gen_bool(0.5);
    let links = Links {
        up: l2.link_to_parents(&l1).unwrap().up,
        up_prev: order2.then(|| l1.link_to_parents(&l0).unwrap().up),
        target: l2.clone(),
    };
    let mut store = ParamStore::new();
    let head = OccupancyHead::new(&mut store, "o", d, e, h, order2, rng);
    let pred = Predictor::new(&mut store, "p", d, e, h, order2, rng);
    shake(&mut store, 0.1, rng);
    let targets = Arc::new((0..l2.len()).map(|_| rng.gen_range(1..=255u8)).collect::<Vec<_>>());
    let probe = Arc::new(rand_mat(l2.len(), d, 1.0, rng));
    let inputs = [
        rand_mat(l1.len(), e, 1.0, rng),
        rand_mat(l1.len(), d, 1.0, rng),
        rand_mat(l2.len(), d, 1.0, rng),
        rand_mat(l0.len(), e, 1.0, rng),
        rand_mat(l0.len(), d, 1.0, rng),
    ];
    check(&mut store, &inputs, rng, |g, v| {
        let ctx = Context {
            e_cur: v[0],
            f_cur: v[1],
            prev: order2.then(|| (v[3], v[4])),
        };
        let logits = head.forward(g, v[2], &ctx, &links);
        let bits = g.softmax_bits(logits, targets.clone());
        let f_bar = pred.forward(g, &ctx, &links);
        let p = g.dot_const(f_bar, probe.clone());
        g.add(bits, p)
    })
}

pub fn total_loss(rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let alpha = rng.gen_range(0.05..1.0);
    let norm = rng.gen_range(0.01..1.0);
    let inputs: Vec<Mat> = (0..5).map(|_| rand_mat(1, 1, 10.0, rng)).collect();
    check(&mut store, &inputs, rng, |g, v| total_loss_var(g, &v[..2], &v[2..], alpha, norm))
}
