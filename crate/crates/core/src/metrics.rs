//! Rate and distortion measures.
//!
//! Nearest neighbours are exact. PSNR values use the `3 p^2` numerator and
//! report `f64::INFINITY` for zero error.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::pipeline::CompressedFrame;
use crate::tensor::{CoordSet, Graph};

/// Neighbours used for normal estimation, the point itself included.
pub const NORMAL_NEIGHBOURS: usize = 9;

const LEAF: usize = 16;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact nearest-neighbour index over a fixed point set (k-d tree with
/// median splits; duplicates are fine).
pub struct NearestIndex<'p> {
    points: &'p [[f64; 3]],
    order: Vec<usize>,
    root: Node,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = diff(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn build(points: &[[f64; 3]], order: &mut [usize], start: usize) -> Node {
    let n = order.len();
    if n <= LEAF {
        return Node::Leaf { start, end: start + n };
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    if hi[axis] == lo[axis] {
        return Node::Leaf { start, end: start + n };
    }
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    let (l, r) = order.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l, start)),
        right: Box::new(build(points, r, start + mid)),
    }
}

/// Bounded max-heap of `(squared distance, index)`, ties broken by index.
struct Best {
    cap: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn worst(&self) -> f64 {
        if self.items.len() < self.cap {
            f64::INFINITY
        } else {
            self.items.last().map_or(f64::INFINITY, |x| x.0)
        }
    }

    fn offer(&mut self, d: f64, i: usize) {
        if self.items.len() == self.cap {
            let last = *self.items.last().unwrap();
            if (d, i) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&x| x < (d, i));
        self.items.insert(pos, (d, i));
    }
}

impl<'p> NearestIndex<'p> {
    pub fn new(points: &'p [[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return invalid("point cloud is empty");
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("point cloud has non-finite coordinates");
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build(points, &mut order, 0);
        Ok(NearestIndex { points, order, root })
    }

    fn search(&self, node: &Node, q: &[f64; 3], best: &mut Best) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    best.offer(dist2(q, &self.points[i]), i);
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if delta * delta <= best.worst() {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let mut best = Best { cap: 1, items: Vec::with_capacity(1) };
        self.search(&self.root, q, &mut best);
        let (d, i) = best.items[0];
        (i, d)
    }

    /// Indices of the `count` nearest points, closest first.
    pub fn nearest_n(&self, q: &[f64; 3], count: usize) -> Vec<usize> {
        let mut best = Best {
            cap: count.min(self.points.len()),
            items: Vec::with_capacity(count + 1),
        };
        self.search(&self.root, q, &mut best);
        best.items.into_iter().map(|x| x.1).collect()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        self.points
    }
}

fn diff(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn directed_mean(from: &[[f64; 3]], to: &NearestIndex, f: impl Fn(f64) -> f64) -> f64 {
    from.iter().map(|p| f(to.nearest(p).1)).sum::<f64>() / from.len() as f64
}

/// Larger of the two directed mean nearest-neighbour distances.
pub fn chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    let (ip, iq) = (NearestIndex::new(p)?, NearestIndex::new(q)?);
    Ok(directed_chamfer(p, &iq).max(directed_chamfer(q, &ip)))
}

/// Mean distance from each point of `from` to its nearest point in `to`.
pub fn directed_chamfer(from: &[[f64; 3]], to: &NearestIndex) -> f64 {
    directed_mean(from, to, f64::sqrt)
}

pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

fn check_peak(peak: f64) -> Result<()> {
    if peak > 0.0 && peak.is_finite() {
        Ok(())
    } else {
        invalid("peak must be positive")
    }
}

/// Point-to-point PSNR over the worse direction.
pub fn d1_psnr(p: &[[f64; 3]], q: &[[f64; 3]], peak: f64) -> Result<f64> {
    check_peak(peak)?;
    let (ip, iq) = (NearestIndex::new(p)?, NearestIndex::new(q)?);
    let mse = directed_mean(p, &iq, |d| d).max(directed_mean(q, &ip, |d| d));
    Ok(psnr(mse, peak))
}

/// Orients a unit normal: positive z, then positive y, then positive x.
fn orient(n: Vector3<f64>) -> [f64; 3] {
    let s = if n.z != 0.0 {
        n.z.signum()
    } else if n.y != 0.0 {
        n.y.signum()
    } else {
        n.x.signum()
    };
    [s * n.x, s * n.y, s * n.z]
}

/// Unit normals from PCA over each point's nearest neighbours: the
/// eigenvector of the smallest covariance eigenvalue.
pub fn estimate_normals(index: &NearestIndex, neighbours: usize) -> Vec<[f64; 3]> {
    let pts = index.points();
    pts.iter()
        .map(|p| {
            let nb = index.nearest_n(p, neighbours);
            let m = nb.len() as f64;
            let mut mean = Vector3::zeros();
            for &i in &nb {
                mean += Vector3::from(pts[i]);
            }
            mean /= m;
            let mut cov = Matrix3::zeros();
            for &i in &nb {
                let d = Vector3::from(pts[i]) - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov / m);
            let min = eig.eigenvalues.imin();
            orient(eig.eigenvectors.column(min).into_owned())
        })
        .collect()
}

/// Point-to-plane PSNR. Normals come from the reference cloud `p`; in both
/// directions the displacement is projected onto the normal of the
/// reference point of the pair.
pub fn d2_psnr(p: &[[f64; 3]], q: &[[f64; 3]], peak: f64) -> Result<f64> {
    check_peak(peak)?;
    if p.len() < NORMAL_NEIGHBOURS {
        return invalid(format!("reference needs at least {NORMAL_NEIGHBOURS} points for normals"));
    }
    let (ip, iq) = (NearestIndex::new(p)?, NearestIndex::new(q)?);
    let normals = estimate_normals(&ip, NORMAL_NEIGHBOURS);
    let proj = |d: [f64; 3], n: &[f64; 3]| {
        let t = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
        t * t
    };
    let forward = p
        .iter()
        .zip(&normals)
        .map(|(a, n)| proj(diff(a, &q[iq.nearest(a).0]), n))
        .sum::<f64>()
        / p.len() as f64;
    let backward = q
        .iter()
        .map(|b| {
            let i = ip.nearest(b).0;
            proj(diff(b, &p[i]), &normals[i])
        })
        .sum::<f64>()
        / q.len() as f64;
    Ok(psnr(forward.max(backward), peak))
}

/// Total frame bits, header included, per input point.
pub fn bpip(frame: &CompressedFrame, input_points: usize) -> Result<f64> {
    bpip_bytes(frame.total_len(), input_points)
}

pub fn bpip_bytes(bytes: usize, input_points: usize) -> Result<f64> {
    if input_points == 0 {
        return invalid("bpip needs at least one input point");
    }
    Ok(8.0 * bytes as f64 / input_points as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub d1_db: f64,
    pub d2_db: f64,
    pub chamfer: f64,
}

/// Least-squares cubic through `(x, y)`, coefficients lowest order first.
fn cubic_fit(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let n = x.len();
    let a = DMatrix::from_fn(n, 4, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-12).map_err(|e| crate::Error::Numerical(e.to_string()))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integrate(c: &[f64; 4], lo: f64, hi: f64, samples: usize) -> f64 {
    let f = |x: f64| c[0] + x * (c[1] + x * (c[2] + x * c[3]));
    let h = (hi - lo) / (samples - 1) as f64;
    let inner: f64 = (1..samples - 1).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

/// Average rate difference of curve `b` against curve `a`, in percent, at
/// equal distortion. Each curve is `(rate, distortion)` pairs.
pub fn bd_rate_pairs(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    const SAMPLES: usize = 1000;
    for c in [a, b] {
        if c.len() < 4 {
            return invalid("each curve needs at least four points");
        }
        if c.iter().any(|&(r, d)| !(r > 0.0) || !r.is_finite() || !d.is_finite()) {
            return invalid("rates must be positive and distortions finite");
        }
    }
    let range = |c: &[(f64, f64)]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, d)| (lo.min(d), hi.max(d)))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) {
        return invalid("curves do not overlap in distortion");
    }
    // centre and scale distortion for conditioning; the cubic space is unchanged
    let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    let fit = |c: &[(f64, f64)]| {
        let x: Vec<f64> = c.iter().map(|p| (p.1 - mid) / half).collect();
        let y: Vec<f64> = c.iter().map(|p| p.0.ln()).collect();
        cubic_fit(&x, &y)
    };
    let (ca, cb) = (fit(a)?, fit(b)?);
    let avg = (integrate(&cb, -1.0, 1.0, SAMPLES) - integrate(&ca, -1.0, 1.0, SAMPLES)) / 2.0;
    Ok((avg.exp() - 1.0) * 100.0)
}

/// BD-rate on D1 PSNR.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    let pairs = |c: &[RdPoint]| c.iter().map(|p| (p.rate, p.d1_db)).collect::<Vec<_>>();
    bd_rate_pairs(&pairs(a), &pairs(b))
}

/// Euclidean distances between the embedding of `base` and of each byte in
/// `others`, each embedded as a lone node.
pub fn embedding_distance(model: &Model, base: u8, others: &[u8]) -> Result<Vec<f64>> {
    let set = CoordSet::new(vec![[0, 0, 0]])?;
    let embed = |b: u8| {
        let mut g = Graph::new(&model.store);
        let v = model.embed(&mut g, &set, &[b]);
        g.value(v).data.clone()
    };
    let e0 = embed(base);
    Ok(others
        .iter()
        .map(|&b| {
            let e = embed(b);
            e0.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect())
}
