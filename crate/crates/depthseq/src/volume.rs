//! Volume and mask data model with a bit-exact on-disk format (`.dstvol`).
//!
//! A `.dstvol` file is a single UTF-8 JSON header line terminated by `\n`,
//! followed immediately by the raw little-endian payload. Voxel order is
//! x-fastest, then y, then z, so axial slices are contiguous.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "DSTVOL1";
const UNIT_TOL: f64 = 1e-6;

/// Dense H×W×D voxel grid in Hounsfield units with scanner geometry.
///
/// `row_dir`/`col_dir` carry ImageOrientationPatient-style direction
/// cosines; the depth direction is their cross product.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Vec<f32>,
    pub dims: (usize, usize, usize),
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub row_dir: [f64; 3],
    pub col_dir: [f64; 3],
}

/// Boolean voxel grid tied to the dims of a source volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
    pub dims: (usize, usize, usize),
}

/// Voxel labels over {0 = background, 1..=8 segment classes}.
/// Labels 1-4: left cervical/petrous/cavernous/supraclinoid; 5-8 right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Vec<u8>,
    pub dims: (usize, usize, usize),
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    row_dir: [f64; 3],
    col_dir: [f64; 3],
    dtype: String,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

impl Volume {
    pub fn new_filled(dims: (usize, usize, usize), value: f32, spacing: [f64; 3]) -> Volume {
        Volume {
            voxels: vec![value; dims.0 * dims.1 * dims.2],
            dims,
            spacing,
            origin: [0.0; 3],
            row_dir: [1.0, 0.0, 0.0],
            col_dir: [0.0, 1.0, 0.0],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    /// Depth direction, completing the right-handed frame.
    pub fn depth_dir(&self) -> [f64; 3] {
        cross(self.row_dir, self.col_dir)
    }

    /// World coordinate of a voxel index in mm.
    pub fn world(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let d = self.depth_dir();
        let (sx, sy, sz) = (self.spacing[0], self.spacing[1], self.spacing[2]);
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = self.origin[k]
                + self.row_dir[k] * (x as f64) * sx
                + self.col_dir[k] * (y as f64) * sy
                + d[k] * (z as f64) * sz;
        }
        out
    }

    /// Returns a description of every violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let (h, w, d) = self.dims;
        if self.voxels.len() != h * w * d {
            v.push(format!(
                "voxel count {} does not equal H*W*D = {}",
                self.voxels.len(),
                h * w * d
            ));
        }
        if h == 0 || w == 0 || d == 0 {
            v.push("zero dimension".to_string());
        }
        if (norm(self.row_dir) - 1.0).abs() > UNIT_TOL {
            v.push("row_dir not unit length".to_string());
        }
        if (norm(self.col_dir) - 1.0).abs() > UNIT_TOL {
            v.push("col_dir not unit length".to_string());
        }
        if dot(self.row_dir, self.col_dir).abs() > UNIT_TOL {
            v.push("row_dir and col_dir not orthogonal".to_string());
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            v.push("non-positive spacing".to_string());
        }
        v
    }

    fn header(&self, dtype: &str) -> Header {
        Header {
            magic: MAGIC.to_string(),
            dims: [self.dims.0, self.dims.1, self.dims.2],
            spacing: self.spacing,
            origin: self.origin,
            row_dir: self.row_dir,
            col_dir: self.col_dir,
            dtype: dtype.to_string(),
        }
    }
}

impl BinaryMask {
    pub fn new(dims: (usize, usize, usize)) -> BinaryMask {
        BinaryMask {
            bits: vec![false; dims.0 * dims.1 * dims.2],
            dims,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl LabelMask {
    pub fn new(dims: (usize, usize, usize)) -> LabelMask {
        LabelMask {
            labels: vec![0; dims.0 * dims.1 * dims.2],
            dims,
        }
    }

    /// Invariant check against the source calcification mask.
    pub fn validate(&self, source: &BinaryMask) -> Vec<String> {
        let mut v = Vec::new();
        if self.dims != source.dims {
            v.push("dims do not match source mask".to_string());
            return v;
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 8 {
                v.push(format!("label {} out of range at voxel {}", l, i));
                break;
            }
            if l != 0 && !source.bits[i] {
                v.push(format!("nonzero label outside source support at voxel {}", i));
                break;
            }
        }
        v
    }
}

fn read_header(reader: &mut impl Read) -> Result<Header> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Header("unexpected EOF before newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::Header("header line too long".into()));
        }
    }
    let text = std::str::from_utf8(&line).map_err(|_| Error::Header("not UTF-8".into()))?;
    let header: Header =
        serde_json::from_str(text).map_err(|e| Error::Header(format!("bad JSON: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Header(format!("bad magic {:?}", header.magic)));
    }
    Ok(header)
}

fn read_payload_exact(reader: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::PayloadSize);
    }
    Ok(payload)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let violations = v.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidVolume(violations.join("; ")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &v.header("f32le"))?;
    w.write_all(b"\n")?;
    for &x in &v.voxels {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.dtype != "f32le" {
        return Err(Error::Header(format!("unexpected dtype {:?}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let payload = read_payload_exact(&mut r, n * 4)?;
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let v = Volume {
        voxels,
        dims: (header.dims[0], header.dims[1], header.dims[2]),
        spacing: header.spacing,
        origin: header.origin,
        row_dir: header.row_dir,
        col_dir: header.col_dir,
    };
    let violations = v.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidVolume(violations.join("; ")));
    }
    Ok(v)
}

/// Masks share the `.dstvol` layout with dtype "u8"; geometry comes from
/// the associated volume and is stored for self-description.
pub fn save_mask(m: &BinaryMask, geom: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if m.dims != geom.dims {
        return Err(Error::Shape("mask dims do not match volume".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &geom.header("u8"))?;
    w.write_all(b"\n")?;
    let bytes: Vec<u8> = m.bits.iter().map(|&b| b as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.dtype != "u8" {
        return Err(Error::Header(format!("unexpected dtype {:?}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let payload = read_payload_exact(&mut r, n)?;
    Ok(BinaryMask {
        bits: payload.iter().map(|&b| b != 0).collect(),
        dims: (header.dims[0], header.dims[1], header.dims[2]),
    })
}

/// Label masks reuse the u8 layout; values above 8 are rejected on load.
pub fn save_label_mask(m: &LabelMask, geom: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if m.dims != geom.dims {
        return Err(Error::Shape("label mask dims do not match volume".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &geom.header("u8"))?;
    w.write_all(b"\n")?;
    w.write_all(&m.labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.dtype != "u8" {
        return Err(Error::Header(format!("unexpected dtype {:?}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let payload = read_payload_exact(&mut r, n)?;
    if let Some(&bad) = payload.iter().find(|&&b| b > 8) {
        return Err(Error::Header(format!("label {} out of range", bad)));
    }
    Ok(LabelMask {
        labels: payload,
        dims: (header.dims[0], header.dims[1], header.dims[2]),
    })
}
