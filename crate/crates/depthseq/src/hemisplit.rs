//! Deterministic hemisphere separation.
//!
//! Skull isolation (threshold, largest 3D component, per-slice hole fill),
//! centroid, midsagittal plane from the orientation cosines, and a
//! left/right split of the whole voxel grid.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};

/// Neighborhood used for 3D connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

/// Midsagittal split plane: point is the skull centroid, normal the row
/// direction cosine triple.
#[derive(Debug, Clone, Copy)]
pub struct SplitPlane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

/// Complementary left/right masks covering every voxel.
#[derive(Debug, Clone)]
pub struct HemisphereResult {
    pub left: BinaryMask,
    pub right: BinaryMask,
}

pub fn threshold_mask(v: &Volume, hu_min: f32) -> BinaryMask {
    BinaryMask {
        bits: v.voxels.iter().map(|&x| x >= hu_min).collect(),
        dims: v.dims,
    }
}

fn neighbors(conn: Connectivity) -> Vec<(i64, i64, i64)> {
    let mut out = Vec::new();
    match conn {
        Connectivity::Six => {
            out.extend_from_slice(&[
                (1, 0, 0),
                (-1, 0, 0),
                (0, 1, 0),
                (0, -1, 0),
                (0, 0, 1),
                (0, 0, -1),
            ]);
        }
        Connectivity::TwentySix => {
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        if dx != 0 || dy != 0 || dz != 0 {
                            out.push((dx, dy, dz));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Keeps only the maximal connected component; ties broken by the
/// component containing the smallest linear voxel index.
pub fn largest_component(m: &BinaryMask, conn: Connectivity) -> Result<BinaryMask> {
    let (h, w, d) = m.dims;
    let offs = neighbors(conn);
    let mut label = vec![0u32; m.bits.len()];
    let mut next = 1u32;
    let mut best: Option<(usize, usize, u32)> = None; // (size, min_index, label)
    let mut stack = Vec::new();
    for start in 0..m.bits.len() {
        if !m.bits[start] || label[start] != 0 {
            continue;
        }
        let lab = next;
        next += 1;
        let mut size = 0usize;
        label[start] = lab;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let x = (i % h) as i64;
            let y = ((i / h) % w) as i64;
            let z = (i / (h * w)) as i64;
            for &(dx, dy, dz) in &offs {
                let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= h as i64 || ny >= w as i64 || nz >= d as i64
                {
                    continue;
                }
                let j = nx as usize + h * (ny as usize + w * nz as usize);
                if m.bits[j] && label[j] == 0 {
                    label[j] = lab;
                    stack.push(j);
                }
            }
        }
        // start is the minimum linear index of this component by scan order
        let better = match best {
            None => true,
            Some((bs, bi, _)) => size > bs || (size == bs && start < bi),
        };
        if better {
            best = Some((size, start, lab));
        }
    }
    let (_, _, keep) = best.ok_or(Error::NoComponents)?;
    Ok(BinaryMask {
        bits: label.iter().map(|&l| l == keep).collect(),
        dims: m.dims,
    })
}

/// Per-axial-slice 2D hole fill: background 4-connected to the slice
/// border stays background, everything else becomes foreground.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (h, w, d) = m.dims;
    let mut out = m.clone();
    let mut reach = vec![false; h * w];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for z in 0..d {
        reach.iter_mut().for_each(|r| *r = false);
        stack.clear();
        for x in 0..h {
            for y in [0, w - 1] {
                if !m.get(x, y, z) && !reach[x + h * y] {
                    reach[x + h * y] = true;
                    stack.push((x, y));
                }
            }
        }
        for y in 0..w {
            for x in [0, h - 1] {
                if !m.get(x, y, z) && !reach[x + h * y] {
                    reach[x + h * y] = true;
                    stack.push((x, y));
                }
            }
        }
        while let Some((x, y)) = stack.pop() {
            let mut visit = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
                if !m.get(nx, ny, z) && !reach[nx + h * ny] {
                    reach[nx + h * ny] = true;
                    stack.push((nx, ny));
                }
            };
            if x > 0 {
                visit(x - 1, y, &mut stack);
            }
            if x + 1 < h {
                visit(x + 1, y, &mut stack);
            }
            if y > 0 {
                visit(x, y - 1, &mut stack);
            }
            if y + 1 < w {
                visit(x, y + 1, &mut stack);
            }
        }
        for y in 0..w {
            for x in 0..h {
                if !m.get(x, y, z) && !reach[x + h * y] {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

/// Mean world coordinate of the set voxels.
pub fn centroid(m: &BinaryMask, v: &Volume) -> Result<[f64; 3]> {
    if m.dims != v.dims {
        return Err(Error::Shape("mask dims do not match volume".into()));
    }
    let (h, w, d) = m.dims;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                if m.get(x, y, z) {
                    let p = v.world(x, y, z);
                    sum[0] += p[0];
                    sum[1] += p[1];
                    sum[2] += p[2];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

pub fn plane_from_orientation(c: [f64; 3], v: &Volume) -> SplitPlane {
    SplitPlane {
        point: c,
        normal: v.row_dir,
    }
}

/// Voxels with a strictly positive signed distance go right; the rest,
/// including exact-zero boundary voxels, go left.
pub fn split_by_plane(v: &Volume, p: &SplitPlane) -> HemisphereResult {
    let (h, w, d) = v.dims;
    let mut left = BinaryMask::new(v.dims);
    let mut right = BinaryMask::new(v.dims);
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let world = v.world(x, y, z);
                let dot = (world[0] - p.point[0]) * p.normal[0]
                    + (world[1] - p.point[1]) * p.normal[1]
                    + (world[2] - p.point[2]) * p.normal[2];
                if dot > 0.0 {
                    right.set(x, y, z, true);
                } else {
                    left.set(x, y, z, true);
                }
            }
        }
    }
    HemisphereResult { left, right }
}

/// Full deterministic pipeline: threshold, largest component, hole fill,
/// centroid, plane from orientation, split.
pub fn separate_hemispheres(v: &Volume, hu_min: f32) -> Result<HemisphereResult> {
    separate_hemispheres_with(v, hu_min, Connectivity::TwentySix)
}

pub fn separate_hemispheres_with(
    v: &Volume,
    hu_min: f32,
    conn: Connectivity,
) -> Result<HemisphereResult> {
    let skull = fill_holes(&largest_component(&threshold_mask(v, hu_min), conn)?);
    let c = centroid(&skull, v)?;
    let plane = plane_from_orientation(c, v);
    Ok(split_by_plane(v, &plane))
}
