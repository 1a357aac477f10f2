use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::frame::{seg_occupancy, seg_residual, CompressedFrame, SEG_ROOT, SEG_TOP};
use crate::coder::adaptive_code_length;
use crate::entropy::{LayerRate, RateReport};
use crate::octree::Octree;
use crate::tensor::SparseTensor;

/// Bits per segment, read from the frame alone. Node and point counts are
/// not stored in a frame and are left at zero.
pub fn bit_breakdown(frame: &CompressedFrame) -> RateReport {
    let bits = |id: u8| 8.0 * frame.segment(id).map_or(0, <[u8]>::len) as f64;
    let k = frame.header.k as usize;
    let base = frame.header.depth as usize - k.min(frame.header.depth as usize);
    RateReport {
        top_occupancy_bits: bits(SEG_TOP),
        root_latent_bits: bits(SEG_ROOT),
        layers: (0..k)
            .map(|j| LayerRate {
                layer: (base + j + 1) as u32,
                nodes: 0,
                residual_bits: bits(seg_residual(j)),
                occupancy_bits: bits(seg_occupancy(j)),
            })
            .collect(),
        header_bits: 8.0 * frame.header_len() as f64,
        output_points: 0,
    }
}

/// Adaptive order-0 code length of layers `from..=to`, each layer coded on its own.
pub fn order0_bits(tree: &Octree, from: usize, to: usize) -> f64 {
    (from..=to).map(|l| adaptive_code_length(&tree.layer(l).bytes)).sum()
}

/// Colors from a seeded random projection of the features to three
/// channels, each min-max scaled to 0..=255. A channel with no spread maps to 128.
pub fn visualize_features(t: &SparseTensor, seed: u64) -> Vec<[u8; 3]> {
    let c = t.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..3 * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = t.features.rows;
    let projected: Vec<[f64; 3]> = (0..n)
        .map(|r| {
            let row = t.features.row(r);
            [0, 1, 2].map(|o| row.iter().zip(&proj[o * c..(o + 1) * c]).map(|(a, b)| a * b).sum())
        })
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &projected {
        for o in 0..3 {
            lo[o] = lo[o].min(p[o]);
            hi[o] = hi[o].max(p[o]);
        }
    }
    projected
        .iter()
        .map(|p| {
            [0, 1, 2].map(|o| {
                let range = hi[o] - lo[o];
                if !(range > 0.0) {
                    128
                } else {
                    ((p[o] - lo[o]) / range * 255.0).round() as u8
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{CoordSet, Mat};

    fn tensor(rows: Vec<Vec<f64>>) -> SparseTensor {
        let n = rows.len();
        let c = rows[0].len();
        let coords = CoordSet::new((0..n as i32).map(|i| [i, 0, 0]).collect()).unwrap();
        SparseTensor::new(coords, Mat::from_vec(n, c, rows.concat())).unwrap()
    }

    #[test]
    fn colors_follow_features() {
        let t = tensor(vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![1.0, 2.0]]);
        let a = visualize_features(&t, 3);
        assert_eq!(a[0], a[2]);
        assert_ne!(a[0], a[1]);
        assert_eq!(a, visualize_features(&t, 3));
        let flat = tensor(vec![vec![0.7, 0.7]; 4]);
        assert!(visualize_features(&flat, 1).iter().all(|c| *c == [128, 128, 128]));
    }
}
