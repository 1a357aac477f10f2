//! Worked metric examples with known answers.

use lpcc::metrics::{bd_rate, bd_rate_pairs, bpip_bytes, chamfer, d1_psnr, d2_psnr, embedding_distance, RdPoint};
use lpcc::metrics::bpip;
use lpcc::model::{Model, ModelConfig};
use lpcc::pcio::PointCloud;
use lpcc::pipeline::{bit_breakdown, compress};

const EPS: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EPS * b.abs().max(1.0)
}

fn grid_plane(n: i32, step: f64) -> Vec<[f64; 3]> {
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..n {
            v.push([i as f64 * step, j as f64 * step, 0.0]);
        }
    }
    v
}

fn curve(scale: f64) -> Vec<RdPoint> {
    [(0.5, 60.0), (1.0, 66.0), (2.0, 71.0), (4.0, 75.0), (8.0, 78.0)]
        .iter()
        .map(|&(r, d)| RdPoint { rate: r * scale, d1_db: d, d2_db: d + 5.0, chamfer: 1.0 / d })
        .collect()
}

/// Each example with whether it held.
pub fn cases() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let a = [[0.0, 0.0, 0.0]];
    let b = [[3.0, 4.0, 0.0]];
    let two = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
    let plane = grid_plane(6, 1.0);

    out.push(("bpip 1000 bytes over 1000 points", bpip_bytes(1000, 1000).unwrap() == 8.0));
    out.push((
        "bpip halves when points double",
        bpip_bytes(777, 2000).unwrap() * 2.0 == bpip_bytes(777, 1000).unwrap(),
    ));
    let model = Model::new(ModelConfig { k: 1, latent: 4, embed: 4, hidden: 4, ..ModelConfig::default() }).unwrap();
    let cloud = PointCloud::new(grid_plane(12, 0.5));
    let frame = compress(&cloud, &model, 5).unwrap();
    out.push((
        "bpip equals the breakdown total per point",
        close(bpip(&frame, cloud.len()).unwrap(), bit_breakdown(&frame).total_bits() / cloud.len() as f64),
    ));
    out.push(("bpip rejects zero points", bpip_bytes(10, 0).is_err()));

    out.push(("chamfer of identical clouds", chamfer(&plane, &plane).unwrap() == 0.0));
    out.push(("chamfer of a 3-4-5 pair", close(chamfer(&a, &b).unwrap(), 5.0)));
    out.push(("chamfer takes the larger direction", close(chamfer(&two, &a).unwrap(), 5.0)));
    out.push(("chamfer rejects empty clouds", chamfer(&[], &a).is_err()));

    out.push(("d1 of identical clouds", d1_psnr(&plane, &plane, 1.0).unwrap() == f64::INFINITY));
    let (d, p) = (0.25f64, 2.0f64);
    let want = 10.0 * (3.0 * p * p / (d * d)).log10();
    let shifted = [[d, 0.0, 0.0]];
    out.push(("d1 closed form for one pair", close(d1_psnr(&a, &shifted, p).unwrap(), want)));
    let far = [[2.0 * d, 0.0, 0.0]];
    out.push((
        "d1 decreases as error grows",
        d1_psnr(&a, &far, p).unwrap() < d1_psnr(&a, &shifted, p).unwrap(),
    ));

    out.push(("d2 of identical clouds", d2_psnr(&plane, &plane, 1.0).unwrap() == f64::INFINITY));
    let in_plane: Vec<[f64; 3]> = plane.iter().map(|q| [q[0] + 0.3, q[1] + 0.1, 0.0]).collect();
    let d1 = d1_psnr(&plane, &in_plane, 1.0).unwrap();
    let d2 = d2_psnr(&plane, &in_plane, 1.0).unwrap();
    out.push(("in-plane shift has zero d2 error", d2 == f64::INFINITY && d1.is_finite()));
    let lifted: Vec<[f64; 3]> = plane.iter().map(|q| [q[0], q[1], 0.2]).collect();
    let d1 = d1_psnr(&plane, &lifted, 1.0).unwrap();
    let d2 = d2_psnr(&plane, &lifted, 1.0).unwrap();
    out.push(("normal shift has d2 equal to d1", close(d2, d1)));
    out.push(("d2 needs nine reference points", d2_psnr(&two, &two, 1.0).is_err()));

    out.push(("bd-rate of identical curves", bd_rate(&curve(1.0), &curve(1.0)).unwrap().abs() < EPS));
    let shift = bd_rate(&curve(1.0), &curve(0.8)).unwrap();
    out.push(("bd-rate of a 0.8x rate curve", (shift + 20.0).abs() <= 0.02));
    let disjoint = [(1.0, 10.0), (2.0, 11.0), (3.0, 12.0), (4.0, 13.0)];
    let later = [(1.0, 20.0), (2.0, 21.0), (3.0, 22.0), (4.0, 23.0)];
    out.push(("bd-rate rejects disjoint curves", bd_rate_pairs(&disjoint, &later).is_err()));

    let dist = embedding_distance(&model, 0xF0, &[0xF0, 0xE0, 0x0F]).unwrap();
    out.push(("embedding distance to itself", dist[0] == 0.0 && dist[1] > 0.0 && dist[2] > 0.0));
    let one_hot = |b: u8| (0..256).map(move |i| if i == b as usize { 1.0f64 } else { 0.0 });
    let raw: f64 = one_hot(0xF0).zip(one_hot(0xE0)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    out.push(("one-hot bytes are sqrt 2 apart", close(raw, 2f64.sqrt())));
    out
}
