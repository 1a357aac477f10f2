//! Seeded synthetic scenes built from planes, line segments and Gaussian
//! clusters, standing in for LiDAR sweeps in tests and training.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::pcio::PointCloud;

/// Side length of the cube that scenes are drawn in.
pub const SCENE_EXTENT: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub points: usize,
    pub planes: (usize, usize),
    pub segments: (usize, usize),
    pub clusters: (usize, usize),
    /// Standard deviation of the jitter added to every point.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            points: 4000,
            planes: (1, 3),
            segments: (2, 6),
            clusters: (1, 4),
            noise: 0.05,
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn random_point(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.gen_range(0.0..SCENE_EXTENT))
}

enum Primitive {
    Plane { origin: [f64; 3], u: [f64; 3], v: [f64; 3], size: (f64, f64) },
    Segment { a: [f64; 3], b: [f64; 3] },
    Cluster { centre: [f64; 3], sigma: f64 },
}

impl Primitive {
    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match self {
            Primitive::Plane { origin, u, v, size } => {
                let s = rng.gen_range(0.0..size.0);
                let t = rng.gen_range(0.0..size.1);
                [0, 1, 2].map(|i| origin[i] + s * u[i] + t * v[i])
            }
            Primitive::Segment { a, b } => {
                let t: f64 = rng.gen();
                [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
            }
            Primitive::Cluster { centre, sigma } => {
                let n = Normal::new(0.0, *sigma).unwrap();
                [0, 1, 2].map(|i| centre[i] + n.sample(rng))
            }
        }
    }
}

/// A scene of `params.points` points (before quantization).
pub fn structured_cloud(rng: &mut impl Rng, params: &SceneParams) -> PointCloud {
    let mut prims = Vec::new();
    // a ground plane most of the time, like a road under a sensor
    if rng.gen_bool(0.8) {
        prims.push(Primitive::Plane {
            origin: [0.0, 0.0, rng.gen_range(0.0..4.0)],
            u: [1.0, 0.0, 0.0],
            v: [0.0, 1.0, 0.0],
            size: (SCENE_EXTENT, SCENE_EXTENT),
        });
    }
    for _ in 0..rng.gen_range(params.planes.0..=params.planes.1) {
        let n: [f64; 3] = UnitSphere.sample(rng);
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = norm(cross(n, helper));
        let v = cross(n, u);
        prims.push(Primitive::Plane {
            origin: random_point(rng),
            u,
            v,
            size: (rng.gen_range(8.0..30.0), rng.gen_range(4.0..20.0)),
        });
    }
    for _ in 0..rng.gen_range(params.segments.0..=params.segments.1) {
        let a = random_point(rng);
        let d: [f64; 3] = UnitSphere.sample(rng);
        let len = rng.gen_range(5.0..30.0);
        prims.push(Primitive::Segment {
            a,
            b: [0, 1, 2].map(|i| a[i] + len * d[i]),
        });
    }
    for _ in 0..rng.gen_range(params.clusters.0..=params.clusters.1) {
        prims.push(Primitive::Cluster {
            centre: random_point(rng),
            sigma: rng.gen_range(0.5..3.0),
        });
    }
    // planes are sampled in proportion to a larger weight, as in real sweeps
    let weights: Vec<f64> = prims
        .iter()
        .map(|p| match p {
            Primitive::Plane { size, .. } => (size.0 * size.1).sqrt(),
            Primitive::Segment { a, b } => {
                let d = sub(*b, *a);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * 0.5
            }
            Primitive::Cluster { .. } => 6.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let jitter = Normal::new(0.0, params.noise.max(1e-12)).unwrap();
    let mut points = Vec::with_capacity(params.points);
    while points.len() < params.points {
        let mut pick = rng.gen_range(0.0..total);
        let mut idx = 0;
        while idx + 1 < weights.len() && pick >= weights[idx] {
            pick -= weights[idx];
            idx += 1;
        }
        let p = prims[idx].sample(rng);
        points.push([0, 1, 2].map(|i| p[i] + jitter.sample(rng)));
    }
    PointCloud::new(points)
}

/// `count` scenes with sizes drawn uniformly from `sizes`.
pub fn corpus(rng: &mut impl Rng, count: usize, sizes: (usize, usize)) -> Vec<PointCloud> {
    (0..count)
        .map(|_| {
            let params = SceneParams {
                points: rng.gen_range(sizes.0..=sizes.1),
                ..SceneParams::default()
            };
            structured_cloud(rng, &params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_and_sized() {
        let a = corpus(&mut ChaCha8Rng::seed_from_u64(4), 3, (1000, 2000));
        let b = corpus(&mut ChaCha8Rng::seed_from_u64(4), 3, (1000, 2000));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.points, y.points);
            assert!((1000..=2000).contains(&x.len()));
            assert!(x.validate().is_ok());
        }
    }
}
