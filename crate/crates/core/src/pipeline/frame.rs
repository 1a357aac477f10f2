//! Frame container. All fields little-endian, in this order:
//!
//! ```text
//! magic      4 bytes "LPCF"
//! version    u16
//! depth      u8      L
//! k          u8      learned layers
//! markov     u8
//! soft       u8      0 or 1
//! bias       3 x f64
//! qs         f64
//! checksum   u64     model checksum
//! count      u32     number of segments
//! table      count x (u8 id, u32 byte length)
//! payload    segments back to back, in table order
//! ```
//!
//! Segment ids: 0 top-layer occupancy, 1 coarsest latent, `2 + 2j` residual
//! of learned step `j`, `3 + 2j` occupancy of learned step `j`.

use crate::error::{corrupt, Result};

pub const MAGIC: &[u8; 4] = b"LPCF";
pub const VERSION: u16 = 1;

pub const SEG_TOP: u8 = 0;
pub const SEG_ROOT: u8 = 1;

pub fn seg_residual(j: usize) -> u8 {
    (2 + 2 * j) as u8
}

pub fn seg_occupancy(j: usize) -> u8 {
    (3 + 2 * j) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameHeader {
    pub version: u16,
    pub depth: u8,
    pub k: u8,
    pub markov: u8,
    pub soft: bool,
    pub bias: [f64; 3],
    pub qs: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFrame {
    pub header: FrameHeader,
    pub segments: Vec<(u8, Vec<u8>)>,
}

impl CompressedFrame {
    pub fn header_len(&self) -> usize {
        4 + 2 + 4 + 32 + 8 + 4 + 5 * self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + self.segments.iter().map(|(_, s)| s.len()).sum::<usize>()
    }

    pub fn segment(&self, id: u8) -> Option<&[u8]> {
        self.segments.iter().find(|(i, _)| *i == id).map(|(_, s)| s.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&[h.depth, h.k, h.markov, h.soft as u8]);
        for b in h.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&h.qs.to_le_bytes());
        out.extend_from_slice(&h.checksum.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for (id, s) in &self.segments {
            out.push(*id);
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        }
        for (_, s) in &self.segments {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return corrupt("not a frame (bad magic)");
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return corrupt(format!("unsupported frame version {version}"));
        }
        let [depth, k, markov, soft] = r.array()?;
        if soft > 1 {
            return corrupt("soft flag must be 0 or 1");
        }
        let mut bias = [0.0; 3];
        for b in &mut bias {
            *b = f64::from_le_bytes(r.array()?);
        }
        let qs = f64::from_le_bytes(r.array()?);
        if !(qs > 0.0 && qs.is_finite()) || bias.iter().any(|b| !b.is_finite()) {
            return corrupt("non-finite or non-positive quantization parameters");
        }
        let checksum = u64::from_le_bytes(r.array()?);
        let count = u32::from_le_bytes(r.array()?) as usize;
        if count > 256 {
            return corrupt("too many segments");
        }
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let [id] = r.array()?;
            let len = u32::from_le_bytes(r.array()?) as usize;
            table.push((id, len));
        }
        let mut segments = Vec::with_capacity(count);
        for (id, len) in table {
            if segments.iter().any(|(i, _): &(u8, Vec<u8>)| *i == id) {
                return corrupt(format!("duplicate segment {id}"));
            }
            segments.push((id, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return corrupt("trailing bytes after the last segment");
        }
        Ok(CompressedFrame {
            header: FrameHeader {
                version,
                depth,
                k,
                markov,
                soft: soft == 1,
                bias,
                qs,
                checksum,
            },
            segments,
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return corrupt("frame truncated");
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}
