//! Point cloud file I/O and the world <-> lattice quantization.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Largest supported octree depth. Lattice coordinates must fit an `i32`
/// after the tensor code shifts them by one level.
pub const MAX_DEPTH: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    /// Velodyne scans: little-endian `f32` records of (x, y, z, reflectance).
    KittiBin,
    /// ASCII PLY with x, y, z vertex properties.
    PlyAscii,
}

impl PointFormat {
    /// Guess the format from a file extension (`.bin` or `.ply`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("bin") => Ok(PointFormat::KittiBin),
            Some(e) if e.eq_ignore_ascii_case("ply") => Ok(PointFormat::PlyAscii),
            _ => invalid(format!("cannot infer point format of {}", path.display())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub attribute: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            attribute: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return invalid(format!("point {i} has a non-finite coordinate"));
        }
        if let Some(attr) = &self.attribute {
            if attr.len() != self.points.len() {
                return invalid("attribute length differs from point count");
            }
        }
        Ok(())
    }
}

pub fn load_points(path: impl AsRef<Path>, format: PointFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let cloud = match format {
        PointFormat::KittiBin => parse_kitti_bin(&fs::read(path)?)?,
        PointFormat::PlyAscii => {
            let file = fs::File::open(path)?;
            parse_ply_ascii(BufReader::new(file))?
        }
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "kitti-bin length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut attr = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        points.push([f(0) as f64, f(1) as f64, f(2) as f64]);
        attr.push(f(3));
    }
    Ok(PointCloud {
        points,
        attribute: Some(attr),
    })
}

pub fn parse_ply_ascii<R: BufRead>(reader: R) -> Result<PointCloud> {
    let bad = |m: &str| Error::Format(format!("ply: {m}"));
    let mut lines = reader.lines();
    let mut next_line = || -> Result<String> {
        match lines.next() {
            Some(l) => Ok(l?),
            None => Err(bad("unexpected end of file")),
        }
    };

    if next_line()?.trim() != "ply" {
        return Err(bad("missing 'ply' magic"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let line = next_line()?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => continue,
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(bad("only 'format ascii 1.0' is supported")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are not supported"))
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => break,
            _ => return Err(bad(&format!("unrecognised header line '{line}'"))),
        }
    }
    let n = vertex_count.ok_or_else(|| bad("no vertex element"))?;
    let axis = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| bad(&format!("vertex element lacks property '{name}'")))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);

    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let line = next_line()?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != props.len() {
            return Err(bad(&format!(
                "vertex {} has {} values, header declares {}",
                points.len(),
                vals.len(),
                props.len()
            )));
        }
        let get = |i: usize| -> Result<f64> {
            vals[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("bad number '{}'", vals[i])))
        };
        points.push([get(ix)?, get(iy)?, get(iz)?]);
    }
    Ok(PointCloud::new(points))
}

pub fn save_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        let a = cloud.attribute.as_ref().map_or(0.0, |a| a[i]);
        out.extend_from_slice(&a.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write an ASCII PLY, optionally with per-vertex RGB colors.
pub fn save_ply(
    path: impl AsRef<Path>,
    points: &[[f64; 3]],
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return invalid("color count differs from point count");
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if colors.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        // `{:?}` prints the shortest representation that round-trips exactly.
        write!(w, "{:?} {:?} {:?}", p[0], p[1], p[2])?;
        if let Some(c) = colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bias: [f64; 3],
    pub qs: f64,
    pub depth: u32,
}

impl QuantParams {
    pub fn lattice_max(&self) -> u32 {
        (1u32 << self.depth) - 1
    }
}

/// Deduplicated voxels on the `2^L` lattice, sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCloud {
    pub voxels: Vec<[u32; 3]>,
    pub params: QuantParams,
}

pub fn quantize(cloud: &PointCloud, depth: u32) -> Result<QuantizedCloud> {
    if cloud.is_empty() {
        return invalid("cannot quantize an empty point cloud");
    }
    if depth == 0 || depth > MAX_DEPTH {
        return invalid(format!("depth must be in 1..={MAX_DEPTH}, got {depth}"));
    }
    cloud.validate()?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let bounding = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let max = (1u32 << depth) - 1;
    let qs = if bounding > 0.0 {
        bounding / max as f64
    } else {
        1.0
    };
    let params = QuantParams {
        bias: lo,
        qs,
        depth,
    };
    Ok(QuantizedCloud {
        voxels: quantize_with(&cloud.points, &params),
        params,
    })
}

/// Quantize points against fixed parameters, clamping into the lattice.
pub fn quantize_with(points: &[[f64; 3]], params: &QuantParams) -> Vec<[u32; 3]> {
    let max = params.lattice_max() as f64;
    let mut voxels: Vec<[u32; 3]> = points
        .iter()
        .map(|p| {
            let mut v = [0u32; 3];
            for a in 0..3 {
                // f64::round is half-away-from-zero.
                v[a] = ((p[a] - params.bias[a]) / params.qs).round().clamp(0.0, max) as u32;
            }
            v
        })
        .collect();
    voxels.sort_unstable();
    voxels.dedup();
    voxels
}

pub fn dequantize(q: &QuantizedCloud) -> PointCloud {
    PointCloud::new(dequantize_voxels(&q.voxels, &q.params))
}

pub fn dequantize_voxels(voxels: &[[u32; 3]], params: &QuantParams) -> Vec<[f64; 3]> {
    voxels
        .iter()
        .map(|v| {
            [
                v[0] as f64 * params.qs + params.bias[0],
                v[1] as f64 * params.qs + params.bias[1],
                v[2] as f64 * params.qs + params.bias[2],
            ]
        })
        .collect()
}
