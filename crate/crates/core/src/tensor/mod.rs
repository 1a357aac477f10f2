//! Coordinate-sparse tensors and the generalized sparse convolution.
//!
//! Every coordinate set is kept in canonical lexicographic order. Kernel
//! maps (which input row feeds which output row through which kernel
//! offset) are computed once per coordinate set and shared by all the
//! convolutions that run over it.

mod graph;
mod layers;
mod params;

use std::sync::{Arc, OnceLock};

pub use graph::{softmax_rows, CustomOp, Grads, Graph, Var};
pub use layers::{ConvKind, ConvLayer, Irn};
pub use params::{load_checkpoint, save_checkpoint, AdamConfig, Checkpoint, Param, ParamId, ParamStore};

use crate::error::{invalid, Result};
use crate::octree::{child_index, offset_unchecked, parent, Coord};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat::from_vec(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dot(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A canonical (sorted, duplicate-free) set of lattice coordinates.
#[derive(Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    k1: OnceLock<Arc<KernelMap>>,
    k3: OnceLock<Arc<KernelMap>>,
    parent_link: OnceLock<ParentLink>,
}

/// Down- and up-sampling maps between a child set and its parent set.
#[derive(Debug, Clone)]
pub struct ParentLink {
    pub parents: Arc<CoordSet>,
    pub down: Arc<KernelMap>,
    pub up: Arc<KernelMap>,
}

impl CoordSet {
    /// Wraps coordinates that must already be strictly increasing.
    pub fn new(coords: Vec<Coord>) -> Result<Arc<Self>> {
        if !coords.windows(2).all(|w| w[0] < w[1]) {
            return invalid("coordinates are not strictly increasing");
        }
        Ok(Arc::new(CoordSet {
            coords,
            k1: OnceLock::new(),
            k3: OnceLock::new(),
            parent_link: OnceLock::new(),
        }))
    }

    /// Sorts and deduplicates.
    pub fn from_unsorted(mut coords: Vec<Coord>) -> Arc<Self> {
        coords.sort_unstable();
        coords.dedup();
        CoordSet::new(coords).expect("sorted")
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn find(&self, c: &Coord) -> Option<usize> {
        self.coords.binary_search(c).ok()
    }

    /// Stride-1 map for a cubic kernel of side 1 or 3 onto the same set.
    pub fn self_map(&self, side: usize) -> Arc<KernelMap> {
        let cell = match side {
            1 => &self.k1,
            3 => &self.k3,
            _ => panic!("unsupported kernel side {side}"),
        };
        cell.get_or_init(|| Arc::new(KernelMap::conv(self, self, &cube_offsets(side))))
            .clone()
    }

    /// The set `{floor(c / 2)}` of this set's parents.
    pub fn parent_set(&self) -> Arc<CoordSet> {
        let mut p: Vec<Coord> = self.coords.iter().map(|&c| parent(c)).collect();
        p.sort_unstable();
        p.dedup();
        CoordSet::new(p).expect("sorted")
    }

    /// Maps between this (child) set and `parents`. Every child must have its
    /// parent in `parents`; parents without children are allowed.
    pub fn link_to_parents(&self, parents: &Arc<CoordSet>) -> Result<ParentLink> {
        if let Some(link) = self.parent_link.get() {
            if Arc::ptr_eq(&link.parents, parents) {
                return Ok(link.clone());
            }
        }
        let mut triples = Vec::with_capacity(self.len());
        for (ci, &c) in self.coords.iter().enumerate() {
            let p = parent(c);
            let Some(pi) = parents.find(&p) else {
                return invalid(format!("coordinate {c:?} has no parent {p:?}"));
            };
            triples.push((child_index(c) as u32, ci as u32, pi as u32));
        }
        let down = Arc::new(KernelMap::from_triples(8, self.len(), parents.len(), &triples));
        let up = Arc::new(down.transposed());
        let link = ParentLink {
            parents: parents.clone(),
            down,
            up,
        };
        let _ = self.parent_link.set(link.clone());
        Ok(link)
    }
}

/// Offsets of a cubic kernel in lexicographic order, centred for odd sides.
pub fn cube_offsets(side: usize) -> Vec<[i32; 3]> {
    let r = (side / 2) as i32;
    let mut out = Vec::with_capacity(side * side * side);
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Offsets of the stride-2 kernel, indexed by child index.
pub fn child_offsets() -> Vec<[i32; 3]> {
    (0..8).map(offset_unchecked).collect()
}

/// Sparse routing of a convolution: a list of (offset, input row, output
/// row) triples, kept in three orders so that forward and both backward
/// products can each be computed row-by-row in a fixed summation order.
#[derive(Debug)]
pub struct KernelMap {
    pub n_offsets: usize,
    pub n_in: usize,
    pub n_out: usize,
    out_ptr: Vec<u32>,
    out_entries: Vec<(u32, u32)>,
    in_ptr: Vec<u32>,
    in_entries: Vec<(u32, u32)>,
    by_offset: Vec<Vec<(u32, u32)>>,
}

impl KernelMap {
    /// Generalized sparse convolution routing: output `u` reads input
    /// `u + offset` for every offset present in `input`.
    pub fn conv(input: &CoordSet, output: &CoordSet, offsets: &[[i32; 3]]) -> Self {
        let mut triples = Vec::new();
        for (oi, u) in output.coords.iter().enumerate() {
            for (k, d) in offsets.iter().enumerate() {
                let q = [u[0] + d[0], u[1] + d[1], u[2] + d[2]];
                if let Some(ii) = input.find(&q) {
                    triples.push((k as u32, ii as u32, oi as u32));
                }
            }
        }
        KernelMap::from_triples(offsets.len(), input.len(), output.len(), &triples)
    }

    pub fn from_triples(n_offsets: usize, n_in: usize, n_out: usize, triples: &[(u32, u32, u32)]) -> Self {
        let mut sorted = triples.to_vec();
        // (output row, offset) order fixes the forward summation order
        sorted.sort_unstable_by_key(|&(k, i, o)| (o, k, i));
        let (out_ptr, out_entries) = csr(n_out, sorted.iter().map(|&(k, i, o)| (o, (k, i))));
        sorted.sort_unstable_by_key(|&(k, i, o)| (i, k, o));
        let (in_ptr, in_entries) = csr(n_in, sorted.iter().map(|&(k, i, o)| (i, (k, o))));
        let mut by_offset = vec![Vec::new(); n_offsets];
        sorted.sort_unstable_by_key(|&(k, i, o)| (k, o, i));
        for &(k, i, o) in &sorted {
            by_offset[k as usize].push((i, o));
        }
        KernelMap {
            n_offsets,
            n_in,
            n_out,
            out_ptr,
            out_entries,
            in_ptr,
            in_entries,
            by_offset,
        }
    }

    pub fn transposed(&self) -> Self {
        let triples: Vec<_> = self
            .by_offset
            .iter()
            .enumerate()
            .flat_map(|(k, v)| v.iter().map(move |&(i, o)| (k as u32, o, i)))
            .collect();
        KernelMap::from_triples(self.n_offsets, self.n_out, self.n_in, &triples)
    }

    pub fn pair_count(&self) -> usize {
        self.out_entries.len()
    }

    /// `(offset, input row)` pairs feeding output row `o`, offset-ordered.
    pub fn inputs_of(&self, o: usize) -> &[(u32, u32)] {
        &self.out_entries[self.out_ptr[o] as usize..self.out_ptr[o + 1] as usize]
    }

    /// `(offset, output row)` pairs fed by input row `i`.
    pub fn outputs_of(&self, i: usize) -> &[(u32, u32)] {
        &self.in_entries[self.in_ptr[i] as usize..self.in_ptr[i + 1] as usize]
    }

    pub fn pairs_for_offset(&self, k: usize) -> &[(u32, u32)] {
        &self.by_offset[k]
    }
}

fn csr(n: usize, items: impl Iterator<Item = (u32, (u32, u32))>) -> (Vec<u32>, Vec<(u32, u32)>) {
    let mut ptr = vec![0u32; n + 1];
    let mut entries = Vec::new();
    for (row, e) in items {
        ptr[row as usize + 1] += 1;
        entries.push(e);
    }
    for r in 0..n {
        ptr[r + 1] += ptr[r];
    }
    (ptr, entries)
}

/// `y[o] = sum over (k, i) of x[i] * W_k`, with `W` stacked as
/// `(n_offsets * cin) x cout`.
pub(crate) fn conv_forward(x: &Mat, w: &Mat, map: &KernelMap) -> Mat {
    let cin = x.cols;
    let cout = w.cols;
    debug_assert_eq!(w.rows, map.n_offsets * cin);
    let mut y = Mat::zeros(map.n_out, cout);
    for o in 0..map.n_out {
        let acc = y.row_mut(o);
        for &(k, i) in map.inputs_of(o) {
            let xr = x.row(i as usize);
            let wk = &w.data[k as usize * cin * cout..(k as usize + 1) * cin * cout];
            for (c, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wk[c * cout..(c + 1) * cout];
                for (a, &wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
        }
    }
    y
}

/// Gradient with respect to the conv input.
pub(crate) fn conv_backward_input(gy: &Mat, w: &Mat, map: &KernelMap, cin: usize) -> Mat {
    let cout = gy.cols;
    let mut gx = Mat::zeros(map.n_in, cin);
    for i in 0..map.n_in {
        let acc = gx.row_mut(i);
        for &(k, o) in map.outputs_of(i) {
            let g = gy.row(o as usize);
            let wk = &w.data[k as usize * cin * cout..(k as usize + 1) * cin * cout];
            for (c, a) in acc.iter_mut().enumerate() {
                let wrow = &wk[c * cout..(c + 1) * cout];
                let mut s = 0.0;
                for (gv, wv) in g.iter().zip(wrow) {
                    s += gv * wv;
                }
                *a += s;
            }
        }
    }
    gx
}

/// Gradient with respect to the stacked conv weights.
pub(crate) fn conv_backward_weight(x: &Mat, gy: &Mat, map: &KernelMap) -> Mat {
    let cin = x.cols;
    let cout = gy.cols;
    let mut gw = Mat::zeros(map.n_offsets * cin, cout);
    for k in 0..map.n_offsets {
        let gk = &mut gw.data[k * cin * cout..(k + 1) * cin * cout];
        for &(i, o) in map.pairs_for_offset(k) {
            let xr = x.row(i as usize);
            let g = gy.row(o as usize);
            for (c, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let row = &mut gk[c * cout..(c + 1) * cout];
                for (a, gv) in row.iter_mut().zip(g) {
                    *a += xv * gv;
                }
            }
        }
    }
    gw
}

/// A feature map attached to canonical coordinates.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub features: Mat,
}

impl SparseTensor {
    pub fn new(coords: Arc<CoordSet>, features: Mat) -> Result<Self> {
        if features.rows != coords.len() {
            return invalid(format!(
                "{} feature rows for {} coordinates",
                features.rows,
                coords.len()
            ));
        }
        Ok(SparseTensor { coords, features })
    }

    pub fn zeros(coords: Arc<CoordSet>, channels: usize) -> Self {
        let n = coords.len();
        SparseTensor {
            coords,
            features: Mat::zeros(n, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.cols
    }
}

/// Kernel weights for the functional convolution API.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    pub offsets: Vec<[i32; 3]>,
    pub cin: usize,
    /// `W_k` stacked vertically: `(offsets.len() * cin) x cout`.
    pub weights: Mat,
    pub bias: Option<Vec<f64>>,
}

impl KernelWeights {
    pub fn new(offsets: Vec<[i32; 3]>, cin: usize, weights: Mat, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.rows != offsets.len() * cin {
            return invalid("weight rows must equal offsets * input channels");
        }
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != offsets.len() {
            return invalid("kernel offsets must be unique");
        }
        if let Some(b) = &bias {
            if b.len() != weights.cols {
                return invalid("bias length must equal output channels");
            }
        }
        Ok(KernelWeights {
            offsets,
            cin,
            weights,
            bias,
        })
    }

    pub fn cout(&self) -> usize {
        self.weights.cols
    }

    fn is_child_kernel(&self) -> bool {
        self.offsets == child_offsets()
    }

    fn apply(&self, x: &Mat, map: &KernelMap) -> Result<Mat> {
        if x.cols != self.cin {
            return invalid(format!("input has {} channels, kernel expects {}", x.cols, self.cin));
        }
        let mut y = conv_forward(x, &self.weights, map);
        if let Some(b) = &self.bias {
            for r in 0..y.rows {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }
}

/// Generalized sparse convolution evaluated at `out_coords`.
pub fn sparse_conv(input: &SparseTensor, w: &KernelWeights, out_coords: Option<&Arc<CoordSet>>) -> Result<SparseTensor> {
    let out = out_coords.unwrap_or(&input.coords).clone();
    let map = KernelMap::conv(&input.coords, &out, &w.offsets);
    let features = w.apply(&input.features, &map)?;
    SparseTensor::new(out, features)
}

/// Stride-2, kernel-2 convolution onto the parent coordinates.
pub fn downsample_conv(input: &SparseTensor, w: &KernelWeights) -> Result<SparseTensor> {
    if !w.is_child_kernel() {
        return invalid("downsampling kernel must have support {0,1}^3 in child order");
    }
    let parents = input.coords.parent_set();
    let link = input.coords.link_to_parents(&parents)?;
    let features = w.apply(&input.features, &link.down)?;
    SparseTensor::new(parents, features)
}

/// Stride-2 transposed convolution, emitting features only at `targets`.
pub fn upsample_conv(input: &SparseTensor, w: &KernelWeights, targets: &Arc<CoordSet>) -> Result<SparseTensor> {
    if !w.is_child_kernel() {
        return invalid("upsampling kernel must have support {0,1}^3 in child order");
    }
    let link = targets.link_to_parents(&input.coords)?;
    let features = w.apply(&input.features, &link.up)?;
    SparseTensor::new(targets.clone(), features)
}
