//! Dense reference convolution on a fully occupied `n^3` grid.

use lpcc::tensor::{cube_offsets, sparse_conv, CoordSet, KernelWeights, Mat, SparseTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zero-padded dense 3D convolution: `y[p] = sum_k x[p + o_k] W_k + b`.
pub fn dense_conv(n: i32, x: &[Vec<f64>], offsets: &[[i32; 3]], w: &Mat, bias: &[f64]) -> Vec<Vec<f64>> {
    let cin = x[0].len();
    let cout = w.cols;
    let at = |p: [i32; 3]| ((p[0] * n + p[1]) * n + p[2]) as usize;
    let mut y = vec![bias.to_vec(); (n * n * n) as usize];
    for px in 0..n {
        for py in 0..n {
            for pz in 0..n {
                for (k, o) in offsets.iter().enumerate() {
                    let q = [px + o[0], py + o[1], pz + o[2]];
                    if q.iter().any(|&c| c < 0 || c >= n) {
                        continue;
                    }
                    for ci in 0..cin {
                        let xv = x[at(q)][ci];
                        for co in 0..cout {
                            y[at([px, py, pz])][co] += xv * w.at(k * cin + ci, co);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Worst relative error of the sparse engine against [`dense_conv`] over
/// `draws` random weight draws on a full 4^3 grid.
pub fn dense_oracle_worst(draws: u64) -> f64 {
    let n = 4;
    let coords: Vec<[i32; 3]> = (0..n * n * n).map(|i| [i / (n * n), (i / n) % n, i % n]).collect();
    let set = CoordSet::new(coords).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let offsets = cube_offsets(if seed % 4 == 0 { 1 } else { 3 });
        let w = Mat::from_vec(
            offsets.len() * cin,
            cout,
            (0..offsets.len() * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<Vec<f64>> = (0..set.len()).map(|_| (0..cin).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let input = SparseTensor::new(set.clone(), Mat::from_vec(set.len(), cin, x.concat())).unwrap();
        let kw = KernelWeights::new(offsets.clone(), cin, w.clone(), Some(bias.clone())).unwrap();
        let sparse = sparse_conv(&input, &kw, None).unwrap();
        let dense = dense_conv(n, &x, &offsets, &w, &bias);
        for (r, want) in dense.iter().enumerate() {
            for (c, &d) in want.iter().enumerate() {
                let s = sparse.features.at(r, c);
                worst = worst.max((s - d).abs() / d.abs().max(1.0));
            }
        }
    }
    worst
}
