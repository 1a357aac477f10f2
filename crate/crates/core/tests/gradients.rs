//! Finite-difference checks of every differentiable primitive.

mod support;

use support::grad::{worst, PRIMITIVES, TOL};

fn check(name: &str) {
    let (_, f) = PRIMITIVES.iter().find(|(n, _)| *n == name).unwrap();
    let e = worst(name, *f);
    println!("{name}: worst relative error {e:.2e}");
    assert!(e < TOL, "{name}: relative error {e:e}");
}

#[test]
fn sparse_convolution() {
    check("sparse_conv");
}

#[test]
fn downsample() {
    check("downsample");
}

#[test]
fn upsample() {
    check("upsample");
}

#[test]
fn irn_block() {
    check("irn");
}

#[test]
fn occupancy_embedding() {
    check("embedding");
}

#[test]
fn soft_add_and_subtract() {
    check("soft_ops");
}

#[test]
fn factorized_density() {
    check("density");
}

#[test]
fn softmax_occupancy_head() {
    check("softmax_head");
}

#[test]
fn total_loss() {
    check("total_loss");
}
