//! The `SPRT` binary tensor container.
//!
//! Layout (all little-endian):
//!
//! | bytes          | field                         |
//! |----------------|-------------------------------|
//! | 4              | magic `b"SPRT"`               |
//! | 2              | format version (`u16`)        |
//! | 1              | rank (`u8`, 1..=4)            |
//! | 4 · rank       | extents (`u32` each)          |
//! | 4 · Π extents  | values (`f32` IEEE-754)       |
//!
//! Values are narrowed to `f32` on write. Label maps use the same container
//! with rank 2 and integral values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPRT";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "bad magic, expected SPRT".into(),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let rank_at = r.pos;
    let rank = r.take(1, "rank")?[0] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Corrupt {
            offset: rank_at,
            reason: format!("rank {rank} outside 1..=4"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.pos;
        let d = u32::from_le_bytes(r.take(4, "extent")?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Corrupt {
                offset: at,
                reason: "zero extent".into(),
            });
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let values_at = r.pos;
    let raw = r.take(4 * n, "values")?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Corrupt {
            offset: values_at + 4 * i,
            reason: "non-finite value".into(),
        });
    }
    Tensor::new(&shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// A `height × width` grid of class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "label map {height}×{width} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = t.shape() else {
            return Err(Error::dim(format!("label map must be rank 2, got {:?}", t.shape())));
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Domain(format!("label value {v} is not a u8")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(*h, *w, labels)
    }
}
