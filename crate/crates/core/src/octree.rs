//! Breadth-first occupancy octree.
//!
//! Layer `l` (1-based) holds the occupied nodes at resolution `2^(l-1)` in
//! canonical lexicographic order, each with an 8-bit mask of its occupied
//! children at resolution `2^l`. Expanding the last layer yields the voxels.

use crate::error::{invalid, Result};

pub type Coord = [i32; 3];

/// Child `b` of node `u` sits at `2u + child_offset(b)`; bit `b` of the
/// occupancy byte (LSB first) marks it occupied. `b = 4x + 2y + z`.
pub fn child_offset(child: usize) -> Result<[i32; 3]> {
    if child > 7 {
        return invalid(format!("child index {child} out of range 0..=7"));
    }
    Ok(offset_unchecked(child))
}

#[inline]
pub(crate) fn offset_unchecked(child: usize) -> [i32; 3] {
    [
        ((child >> 2) & 1) as i32,
        ((child >> 1) & 1) as i32,
        (child & 1) as i32,
    ]
}

#[inline]
pub(crate) fn child_index(c: Coord) -> usize {
    (((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)) as usize
}

#[inline]
pub(crate) fn parent(c: Coord) -> Coord {
    [c[0] >> 1, c[1] >> 1, c[2] >> 1]
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layer {
    pub coords: Vec<Coord>,
    pub bytes: Vec<u8>,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (Coord, u8)> + '_ {
        self.coords.iter().copied().zip(self.bytes.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Octree {
    pub depth: u32,
    /// `layers[i]` is layer `i + 1`.
    pub layers: Vec<Layer>,
}

impl Octree {
    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn leaves(&self) -> Vec<Coord> {
        // cannot fail: bytes were validated at construction
        expand_layer(&self.layers[self.layers.len() - 1]).expect("valid octree")
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::len).collect()
    }

    /// Checks every structural invariant: root shape, nonzero bytes, canonical
    /// order, and that each layer's coordinates are the expansion of the
    /// previous one.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.layers.len() != self.depth as usize {
            return invalid("octree layer count does not match depth");
        }
        let root = &self.layers[0];
        if root.coords != [[0, 0, 0]] || root.bytes.len() != 1 {
            return invalid("layer 1 must hold exactly the root node");
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.coords.len() != layer.bytes.len() {
                return invalid(format!("layer {} has mismatched byte count", i + 1));
            }
            if i + 1 < self.layers.len() {
                let expanded = expand_layer(layer)?;
                if expanded != self.layers[i + 1].coords {
                    return invalid(format!(
                        "layer {} coordinates are not the expansion of layer {}",
                        i + 2,
                        i + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn build_octree(voxels: &[[u32; 3]], depth: u32) -> Result<Octree> {
    if voxels.is_empty() {
        return invalid("cannot build an octree from zero voxels");
    }
    if depth == 0 || depth > crate::pcio::MAX_DEPTH {
        return invalid(format!("unsupported octree depth {depth}"));
    }
    let max = (1u32 << depth) - 1;
    if let Some(v) = voxels.iter().find(|v| v.iter().any(|&c| c > max)) {
        return invalid(format!("voxel {v:?} outside the 2^{depth} lattice"));
    }

    let mut current: Vec<Coord> = voxels
        .iter()
        .map(|v| [v[0] as i32, v[1] as i32, v[2] as i32])
        .collect();
    current.sort_unstable();
    current.dedup();

    // Walk upwards from the leaves, forming each layer from its children.
    let mut layers = Vec::with_capacity(depth as usize);
    for _ in 0..depth {
        let mut tagged: Vec<(Coord, u8)> = current
            .iter()
            .map(|&c| (parent(c), 1u8 << child_index(c)))
            .collect();
        tagged.sort_unstable_by_key(|t| t.0);
        let mut layer = Layer::default();
        for (p, bit) in tagged {
            if layer.coords.last() == Some(&p) {
                *layer.bytes.last_mut().unwrap() |= bit;
            } else {
                layer.coords.push(p);
                layer.bytes.push(bit);
            }
        }
        current = layer.coords.clone();
        layers.push(layer);
    }
    layers.reverse();
    Ok(Octree { depth, layers })
}

/// Children of every node, in canonical order.
pub fn expand_layer(layer: &Layer) -> Result<Vec<Coord>> {
    expand_nodes(&layer.coords, &layer.bytes)
}

pub fn expand_nodes(coords: &[Coord], bytes: &[u8]) -> Result<Vec<Coord>> {
    if coords.len() != bytes.len() {
        return invalid("coordinate and byte counts differ");
    }
    let mut out = Vec::with_capacity(bytes.iter().map(|b| b.count_ones() as usize).sum());
    for (&u, &b) in coords.iter().zip(bytes) {
        if b == 0 {
            return invalid(format!("zero occupancy byte at node {u:?}"));
        }
        for child in 0..8 {
            if b >> child & 1 == 1 {
                let o = offset_unchecked(child);
                out.push([2 * u[0] + o[0], 2 * u[1] + o[1], 2 * u[2] + o[2]]);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn octree_to_voxels(tree: &Octree) -> Result<Vec<[u32; 3]>> {
    tree.validate()?;
    Ok(tree
        .leaves()
        .into_iter()
        .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
        .collect())
}

/// Rebuild an octree from per-layer occupancy bytes alone, deriving every
/// layer's coordinates by expansion from the root.
pub fn octree_from_bytes(depth: u32, layer_bytes: Vec<Vec<u8>>) -> Result<Octree> {
    if layer_bytes.len() != depth as usize {
        return invalid("layer byte list does not match depth");
    }
    let mut coords = vec![[0, 0, 0]];
    let mut layers = Vec::with_capacity(layer_bytes.len());
    for bytes in layer_bytes {
        if bytes.len() != coords.len() {
            return invalid("layer byte count does not match expanded node count");
        }
        let next = expand_nodes(&coords, &bytes)?;
        layers.push(Layer {
            coords: std::mem::replace(&mut coords, next),
            bytes,
        });
    }
    Ok(Octree { depth, layers })
}
