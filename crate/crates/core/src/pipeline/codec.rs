use std::sync::Arc;

use super::frame::{seg_occupancy, seg_residual, CompressedFrame, FrameHeader, SEG_ROOT, SEG_TOP, VERSION};
use crate::coder::{
    adaptive_code_length, adaptive_encode, quantize_pmf, AdaptiveDecoder, CdfTable, RangeDecoder, RangeEncoder,
};
use crate::entropy::{discrete_bits, occupancy_rate, LayerRate, RateReport};
use crate::error::{corrupt, invalid, Error, Result};
use crate::model::{quantize_residual, walk, EmbeddingCache, Geometry, Model, Side, WalkOptions};
use crate::octree::{build_octree, Octree};
use crate::pcio::{dequantize_voxels, quantize, PointCloud, QuantParams, MAX_DEPTH};
use crate::tensor::{softmax_rows, CoordSet, Graph, Mat, SparseTensor, Var};

/// Per-segment accounting gathered while encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub id: u8,
    pub symbols: usize,
    pub bytes: usize,
    /// Ideal bits under the integer tables actually used for coding.
    pub table_bits: f64,
    /// Ideal bits under the real-valued model (adaptive model for the top segment).
    pub model_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeStats {
    /// Coded sizes, with node counts and the output point count.
    pub report: RateReport,
    pub segments: Vec<SegmentStats>,
    /// Largest residual magnitude before clamping.
    pub max_residual: f64,
}

struct LatentCode {
    pmfs: Vec<Vec<f64>>,
    tables: Vec<CdfTable>,
    clamp: i32,
}

impl LatentCode {
    fn new(model: &Model, slot: usize) -> Result<Self> {
        let d = model.density(slot);
        let pmfs = d.pmf_tables(&model.store);
        let tables = pmfs.iter().map(|p| quantize_pmf(p)).collect::<Result<_>>()?;
        Ok(LatentCode {
            pmfs,
            tables,
            clamp: d.clamp,
        })
    }

    /// Integer values, already clamped, coded row by row.
    fn encode(&self, values: &Mat) -> Result<(Vec<u8>, f64, f64)> {
        let mut enc = RangeEncoder::new();
        let mut table_bits = 0.0;
        for r in 0..values.rows {
            for (c, &v) in values.row(r).iter().enumerate() {
                let s = (v as i64 + self.clamp as i64) as usize;
                enc.encode_symbol(s, &self.tables[c])?;
                table_bits -= self.tables[c].prob(s).log2();
            }
        }
        let model_bits = discrete_bits(values, &self.pmfs)?;
        let bytes = if values.data.is_empty() { Vec::new() } else { enc.finish() };
        Ok((bytes, table_bits, model_bits))
    }

    fn decode(&self, data: &[u8], rows: usize) -> Result<Mat> {
        let cols = self.tables.len();
        let mut m = Mat::zeros(rows, cols);
        if rows == 0 {
            return Ok(m);
        }
        let mut dec = RangeDecoder::new(data)?;
        for r in 0..rows {
            for c in 0..cols {
                let s = dec.decode_symbol(&self.tables[c])?;
                m.data[r * cols + c] = s as f64 - self.clamp as f64;
            }
        }
        Ok(m)
    }
}

fn node_tables(probs: &Mat) -> Result<Vec<CdfTable>> {
    (0..probs.rows).map(|r| quantize_pmf(probs.row(r))).collect()
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

struct EncoderSide<'t> {
    latents: Vec<Var>,
    tree: &'t Octree,
    base: usize,
    codes: Vec<LatentCode>,
    segments: Vec<(u8, Vec<u8>)>,
    stats: Vec<SegmentStats>,
    layers: Vec<LayerRate>,
    max_residual: f64,
}

impl EncoderSide<'_> {
    fn push_latent(&mut self, id: u8, slot: usize, values: &Mat) -> Result<f64> {
        let (bytes, table_bits, model_bits) = self.codes[slot].encode(values)?;
        let bits = 8.0 * bytes.len() as f64;
        self.stats.push(SegmentStats {
            id,
            symbols: values.data.len(),
            bytes: bytes.len(),
            table_bits,
            model_bits,
        });
        self.segments.push((id, bytes));
        Ok(bits)
    }

    fn note_residual(&mut self, r: &Mat) -> Result<Mat> {
        check_finite(r, "latent residual")?;
        self.max_residual = self.max_residual.max(r.max_abs());
        Ok(quantize_residual(r, self.codes[0].clamp))
    }
}

impl Side for EncoderSide<'_> {
    fn root(&mut self, g: &mut Graph, _model: &Model, _set: &Arc<CoordSet>) -> Result<Var> {
        let q = self.note_residual(g.value(self.latents[0]))?;
        self.push_latent(SEG_ROOT, 0, &q)?;
        Ok(g.input(q))
    }

    fn residual(&mut self, g: &mut Graph, model: &Model, j: usize, f_bar: Var, set: &Arc<CoordSet>) -> Result<Var> {
        let r = model.soft_subtract(g, j, self.latents[j + 1], f_bar, set);
        let q = self.note_residual(g.value(r))?;
        let bits = self.push_latent(seg_residual(j), j + 1, &q)?;
        self.layers.push(LayerRate {
            layer: (self.base + j + 1) as u32,
            nodes: set.len(),
            residual_bits: bits,
            occupancy_bits: 0.0,
        });
        Ok(g.input(q))
    }

    fn occupancy(&mut self, g: &mut Graph, _model: &Model, j: usize, logits: Var, _set: &Arc<CoordSet>) -> Result<Vec<u8>> {
        let probs = softmax_rows(g.value(logits));
        check_finite(&probs, "occupancy distribution")?;
        let bytes = self.tree.layer(self.base + j + 1).bytes.clone();
        let tables = node_tables(&probs)?;
        let mut enc = RangeEncoder::new();
        let mut table_bits = 0.0;
        for (t, &b) in tables.iter().zip(&bytes) {
            enc.encode_symbol(b as usize, t)?;
            table_bits -= t.prob(b as usize).log2();
        }
        let coded = enc.finish();
        let model_bits = occupancy_rate(&probs, &bytes)?.bits;
        self.layers[j].occupancy_bits = 8.0 * coded.len() as f64;
        self.stats.push(SegmentStats {
            id: seg_occupancy(j),
            symbols: bytes.len(),
            bytes: coded.len(),
            table_bits,
            model_bits,
        });
        self.segments.push((seg_occupancy(j), coded));
        Ok(bytes)
    }
}

fn check_depth(depth: u32, k: usize) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return invalid(format!("depth must be in 1..={MAX_DEPTH}"));
    }
    if k > 0 && (depth as usize) < k + 1 {
        return invalid(format!("depth {depth} is too small for {k} learned layers (need at least {})", k + 1));
    }
    Ok(())
}

pub fn compress(cloud: &PointCloud, model: &Model, depth: u32) -> Result<CompressedFrame> {
    Ok(compress_with_stats(cloud, model, depth)?.0)
}

pub fn compress_with_stats(cloud: &PointCloud, model: &Model, depth: u32) -> Result<(CompressedFrame, EncodeStats)> {
    check_depth(depth, model.k())?;
    let q = quantize(cloud, depth)?;
    let tree = build_octree(&q.voxels, depth)?;
    compress_tree(&tree, &q.params, model)
}

/// Codes an already built octree.
pub fn compress_tree(tree: &Octree, params: &QuantParams, model: &Model) -> Result<(CompressedFrame, EncodeStats)> {
    let depth = tree.depth;
    let k = model.k();
    check_depth(depth, k)?;
    let base = depth as usize - k;

    let top: Vec<u8> = (1..=base).flat_map(|l| tree.layer(l).bytes.iter().copied()).collect();
    let top_bytes = adaptive_encode(&top);
    let mut segments = vec![(SEG_TOP, top_bytes)];
    let mut stats = vec![SegmentStats {
        id: SEG_TOP,
        symbols: top.len(),
        bytes: segments[0].1.len(),
        table_bits: adaptive_code_length(&top),
        model_bits: adaptive_code_length(&top),
    }];

    let mut geo = Geometry::from_octree(tree)?;
    let mut layers = Vec::new();
    let mut max_residual = 0.0;
    if k > 0 {
        let codes = (0..=k).map(|s| LatentCode::new(model, s)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(&model.store);
        let mut emb = EmbeddingCache::new();
        let latents = model.encode_latents(&mut g, &geo, &mut emb)?;
        let mut side = EncoderSide {
            latents,
            tree,
            base,
            codes,
            segments: Vec::new(),
            stats: Vec::new(),
            layers: Vec::new(),
            max_residual: 0.0,
        };
        walk(model, &mut g, &mut geo, &mut emb, &mut side, WalkOptions::default())?;
        segments.extend(side.segments);
        stats.extend(side.stats);
        layers = side.layers;
        max_residual = side.max_residual;
    }

    let cfg = &model.config;
    let frame = CompressedFrame {
        header: FrameHeader {
            version: VERSION,
            depth: depth as u8,
            k: k as u8,
            markov: cfg.markov,
            soft: cfg.soft,
            bias: params.bias,
            qs: params.qs,
            checksum: model.checksum(),
        },
        segments,
    };
    let seg_bits = |id: u8| 8.0 * frame.segment(id).map_or(0, <[u8]>::len) as f64;
    let report = RateReport {
        top_occupancy_bits: seg_bits(SEG_TOP),
        root_latent_bits: if k > 0 { seg_bits(SEG_ROOT) } else { 0.0 },
        layers,
        header_bits: 8.0 * frame.header_len() as f64,
        output_points: tree.leaves().len(),
    };
    Ok((
        frame,
        EncodeStats {
            report,
            segments: stats,
            max_residual,
        },
    ))
}

struct DecoderSide<'f> {
    frame: &'f CompressedFrame,
    codes: Vec<LatentCode>,
}

impl DecoderSide<'_> {
    fn segment(&self, id: u8) -> Result<&[u8]> {
        match self.frame.segment(id) {
            Some(s) => Ok(s),
            None => corrupt(format!("segment {id} is missing")),
        }
    }
}

impl Side for DecoderSide<'_> {
    fn root(&mut self, g: &mut Graph, _model: &Model, set: &Arc<CoordSet>) -> Result<Var> {
        let m = self.codes[0].decode(self.segment(SEG_ROOT)?, set.len())?;
        Ok(g.input(m))
    }

    fn residual(&mut self, g: &mut Graph, _model: &Model, j: usize, _f_bar: Var, set: &Arc<CoordSet>) -> Result<Var> {
        let m = self.codes[j + 1].decode(self.segment(seg_residual(j))?, set.len())?;
        Ok(g.input(m))
    }

    fn occupancy(&mut self, g: &mut Graph, _model: &Model, j: usize, logits: Var, _set: &Arc<CoordSet>) -> Result<Vec<u8>> {
        let probs = softmax_rows(g.value(logits));
        check_finite(&probs, "occupancy distribution")?;
        let tables = node_tables(&probs)?;
        let data = self.segment(seg_occupancy(j))?;
        let mut dec = RangeDecoder::new(data)?;
        let mut out = Vec::with_capacity(tables.len());
        for t in &tables {
            let b = dec.decode_symbol(t)?;
            if b == 0 {
                return corrupt("decoded an empty occupancy byte");
            }
            out.push(b as u8);
        }
        Ok(out)
    }
}

/// Decodes the voxel set and the quantization parameters.
pub fn decompress_voxels(frame: &CompressedFrame, model: &Model) -> Result<(Vec<[u32; 3]>, QuantParams)> {
    let h = &frame.header;
    let actual = model.checksum();
    if h.checksum != actual {
        return Err(Error::ChecksumMismatch {
            expected: h.checksum,
            actual,
        });
    }
    let cfg = &model.config;
    if h.k as u32 != cfg.k || h.markov != cfg.markov || h.soft != cfg.soft {
        return corrupt("frame header disagrees with the model configuration");
    }
    let depth = h.depth as u32;
    if depth == 0 || depth > MAX_DEPTH || (h.k > 0 && depth <= h.k as u32) {
        return corrupt(format!("invalid depth {depth} for {} learned layers", h.k));
    }
    let k = h.k as usize;
    let expected = if k > 0 { 2 + 2 * k } else { 1 };
    if frame.segments.len() != expected || frame.segments.iter().any(|(id, _)| *id as usize >= expected) {
        return corrupt(format!("expected segments 0..{expected}"));
    }
    let base = depth as usize - k;

    let mut geo = Geometry::new(depth)?;
    let top = frame.segment(SEG_TOP).unwrap_or(&[]);
    let mut dec = AdaptiveDecoder::new(top)?;
    for l in 1..=base {
        let n = geo.set(l)?.len();
        let bytes = (0..n).map(|_| dec.decode()).collect::<Result<Vec<u8>>>()?;
        if bytes.contains(&0) {
            return corrupt("decoded an empty occupancy byte");
        }
        geo.push(l, bytes)?;
    }
    if k > 0 {
        let codes = (0..=k).map(|s| LatentCode::new(model, s)).collect::<Result<Vec<_>>>()?;
        let mut side = DecoderSide { frame, codes };
        let mut g = Graph::new(&model.store);
        walk(model, &mut g, &mut geo, &mut EmbeddingCache::new(), &mut side, WalkOptions::default())?;
    }
    let voxels = geo
        .set(depth as usize + 1)?
        .coords()
        .iter()
        .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
        .collect();
    let params = QuantParams {
        bias: h.bias,
        qs: h.qs,
        depth,
    };
    Ok((voxels, params))
}

pub fn decompress(frame: &CompressedFrame, model: &Model) -> Result<PointCloud> {
    let (voxels, params) = decompress_voxels(frame, model)?;
    Ok(PointCloud::new(dequantize_voxels(&voxels, &params)))
}

/// Ideal rates with hard rounding, without producing a bitstream.
struct MeasureSide<'t> {
    latents: Vec<Var>,
    tree: &'t Octree,
    base: usize,
    pmfs: Vec<Vec<Vec<f64>>>,
    clamp: i32,
    root_bits: f64,
    layers: Vec<LayerRate>,
}

impl Side for MeasureSide<'_> {
    fn root(&mut self, g: &mut Graph, _model: &Model, _set: &Arc<CoordSet>) -> Result<Var> {
        let q = quantize_residual(g.value(self.latents[0]), self.clamp);
        self.root_bits = discrete_bits(&q, &self.pmfs[0])?;
        Ok(g.input(q))
    }

    fn residual(&mut self, g: &mut Graph, model: &Model, j: usize, f_bar: Var, set: &Arc<CoordSet>) -> Result<Var> {
        let r = model.soft_subtract(g, j, self.latents[j + 1], f_bar, set);
        let q = quantize_residual(g.value(r), self.clamp);
        self.layers.push(LayerRate {
            layer: (self.base + j + 1) as u32,
            nodes: set.len(),
            residual_bits: discrete_bits(&q, &self.pmfs[j + 1])?,
            occupancy_bits: 0.0,
        });
        Ok(g.input(q))
    }

    fn occupancy(&mut self, g: &mut Graph, _model: &Model, j: usize, logits: Var, _set: &Arc<CoordSet>) -> Result<Vec<u8>> {
        let probs = softmax_rows(g.value(logits));
        let bytes = self.tree.layer(self.base + j + 1).bytes.clone();
        self.layers[j].occupancy_bits = occupancy_rate(&probs, &bytes)?.bits;
        Ok(bytes)
    }
}

fn measure_walk(model: &Model, tree: &Octree, opts: WalkOptions) -> Result<(RateReport, Vec<SparseTensor>)> {
    let k = model.k();
    check_depth(tree.depth, k)?;
    let base = tree.depth as usize - k;
    let top: Vec<u8> = (1..=base).flat_map(|l| tree.layer(l).bytes.iter().copied()).collect();
    let mut report = RateReport {
        top_occupancy_bits: adaptive_code_length(&top),
        output_points: tree.leaves().len(),
        ..RateReport::default()
    };
    if k == 0 {
        return Ok((report, Vec::new()));
    }
    let mut geo = Geometry::from_octree(tree)?;
    let mut g = Graph::new(&model.store);
    let mut emb = EmbeddingCache::new();
    let latents = model.encode_latents(&mut g, &geo, &mut emb)?;
    let mut side = MeasureSide {
        latents,
        tree,
        base,
        pmfs: model.densities.iter().map(|d| d.pmf_tables(&model.store)).collect(),
        clamp: model.config.clamp,
        root_bits: 0.0,
        layers: Vec::new(),
    };
    let out = walk(model, &mut g, &mut geo, &mut emb, &mut side, opts)?;
    report.root_latent_bits = side.root_bits;
    report.layers = side.layers;
    let tensors = out
        .latents
        .iter()
        .enumerate()
        .map(|(i, &v)| SparseTensor::new(geo.set(base + i)?, g.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok((report, tensors))
}

/// Model cross-entropy of an octree in bits, using hard-rounded latents.
/// The top layers are charged their adaptive order-0 code length.
pub fn measure(model: &Model, tree: &Octree, opts: WalkOptions) -> Result<RateReport> {
    Ok(measure_walk(model, tree, opts)?.0)
}

/// Decoder-side latents `f_hat^(L-k)..=f_hat^(L)`, coarsest first.
pub fn reconstructed_latents(model: &Model, tree: &Octree) -> Result<Vec<SparseTensor>> {
    Ok(measure_walk(model, tree, WalkOptions::default())?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{structured_cloud, SceneParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: usize) -> PointCloud {
        let params = SceneParams {
            points,
            ..SceneParams::default()
        };
        structured_cloud(&mut ChaCha8Rng::seed_from_u64(11), &params)
    }

    fn small(k: u32, markov: u8, soft: bool) -> Model {
        Model::new(ModelConfig {
            k,
            markov,
            soft,
            latent: 4,
            embed: 4,
            hidden: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_lossless_on_the_lattice() {
        let pc = cloud(600);
        for (k, markov, soft) in [(0, 2, true), (2, 1, false), (3, 2, true)] {
            let model = small(k, markov, soft);
            let (frame, stats) = compress_with_stats(&pc, &model, 6).unwrap();
            let bytes = frame.to_bytes();
            let back = CompressedFrame::from_bytes(&bytes).unwrap();
            let (voxels, _) = decompress_voxels(&back, &model).unwrap();
            let q = quantize(&pc, 6).unwrap();
            assert_eq!(voxels, q.voxels, "k={k} markov={markov} soft={soft}");
            assert_eq!(stats.report.total_bits(), 8.0 * bytes.len() as f64);
        }
    }

    #[test]
    fn measured_rate_tracks_coded_rate() {
        let pc = cloud(800);
        let model = small(2, 2, true);
        let q = quantize(&pc, 6).unwrap();
        let tree = build_octree(&q.voxels, 6).unwrap();
        let (_, stats) = compress_tree(&tree, &q.params, &model).unwrap();
        let ideal = measure(&model, &tree, WalkOptions::default()).unwrap();
        let coded = stats.report.payload_bits();
        assert!((coded - ideal.payload_bits()).abs() < 0.02 * coded + 64.0 * 8.0);
    }

    #[test]
    fn wrong_model_and_bad_depth_are_rejected() {
        let pc = cloud(300);
        let model = small(2, 2, true);
        let frame = compress(&pc, &model, 5).unwrap();
        let other = Model::new(ModelConfig { seed: 9, ..model.config.clone() }).unwrap();
        assert!(matches!(decompress(&frame, &other), Err(Error::ChecksumMismatch { .. })));
        assert!(matches!(compress(&pc, &model, 2), Err(Error::Invalid(_))));
    }
}
