//! Synthetic head-like phantoms with known landmark slices, optional
//! 3-class depth-texture cases, patient-level k-fold splitting, and the
//! versioned dataset manifest.
//!
//! Landmark planes are marked by vessel-adjacent discs whose in-plane
//! radius encodes the landmark type (canal 1, petrolingual 2, anterior
//! clinoid 3). Each side optionally carries one distractor disc of a
//! real type's radius at a depth that violates the proximal-to-distal
//! ordering, so resolving the true landmark requires depth-global
//! context rather than a purely local signature.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LandmarkSet;
use crate::volume::{
    load_mask, load_volume, save_mask, save_volume, BinaryMask, Volume,
};

/// In-plane disc radius for each landmark type, proximal to distal.
pub const LANDMARK_RADII: [f64; 3] = [1.0, 2.0, 3.0];
pub const DISC_HU: f32 = 1000.0;
pub const VESSEL_HU: f32 = 150.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
/// Lateral offset of each vessel track from the midplane, in voxels.
pub const VESSEL_OFFSET: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing: [f64; 3],
    /// Skull shell radius range in voxels.
    pub skull_radius: (f64, f64),
    /// Minimum slice gap between adjacent landmarks on a side.
    pub landmark_margin: usize,
    pub calc_count: usize,
    /// Calcification intensity range in HU.
    pub calc_intensity: (f32, f32),
    /// Soft-tissue noise sigma in HU.
    pub noise_sigma: f64,
    /// Per-case depth reduction sampled from 0..=depth_jitter; landmarks
    /// stay anchored to the distal (high-z) end.
    pub depth_jitter: usize,
    /// Extra proximal shift of the whole landmark block, sampled per
    /// side from 0..=landmark_spread. Zero keeps landmarks end-anchored
    /// (strong positional prior); larger values force models to read the
    /// anatomy instead of memorizing positions.
    #[serde(default)]
    pub landmark_spread: usize,
    /// Place one ordering-violating distractor disc per side.
    pub distractors: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (32, 32, 24),
            spacing: [1.0, 1.0, 2.0],
            skull_radius: (12.0, 14.0),
            landmark_margin: 3,
            calc_count: 3,
            calc_intensity: (400.0, 1200.0),
            noise_sigma: 5.0,
            depth_jitter: 0,
            landmark_spread: 0,
            distractors: true,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.dims;
        let d_min = d.saturating_sub(self.depth_jitter);
        // distal anchor needs c1 >= 3 (room for a proximal distractor)
        // and c3 <= d_min - 2, with two margins in between
        let needed = 3 + 2 * (self.landmark_margin + 1) + 3 + self.landmark_spread;
        if d_min < needed {
            return Err(Error::Argument(format!(
                "dims too small for margins: depth {d_min} < {needed}"
            )));
        }
        if h < 24 || w < 24 {
            return Err(Error::Argument("in-plane dims must be at least 24".into()));
        }
        if self.skull_radius.0 > self.skull_radius.1
            || self.skull_radius.1 + 2.0 > (h.min(w) as f64) / 2.0
        {
            return Err(Error::Argument("skull radius range invalid for dims".into()));
        }
        if self.calc_intensity.0 > self.calc_intensity.1 || self.noise_sigma < 0.0 {
            return Err(Error::Argument("intensity/noise ranges invalid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub case_id: String,
    pub volume: Volume,
    pub landmarks: LandmarkSet,
    pub calc_mask: BinaryMask,
    pub class_label: Option<u8>,
}

fn case_rng(spec: &PhantomSpec, case_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(case_seed),
    )
}

/// Vessel track centers (x, y): left is on the low-x side of the
/// midplane, right on the high-x side.
pub fn vessel_centers(dims: (usize, usize, usize)) -> ((usize, usize), (usize, usize)) {
    let (h, w, _) = dims;
    let (cx, cy) = (h / 2, w / 2);
    ((cx - VESSEL_OFFSET, cy), (cx + VESSEL_OFFSET, cy))
}

fn base_volume(spec: &PhantomSpec, d: usize, rng: &mut ChaCha8Rng) -> Volume {
    let (h, w, _) = spec.dims;
    let mut v = Volume::new_filled((h, w, d), 0.0, spec.spacing);
    let noise = Normal::new(SOFT_TISSUE_HU, spec.noise_sigma.max(1e-12)).unwrap();
    let r = rng.gen_range(spec.skull_radius.0..=spec.skull_radius.1);
    let (cx, cy) = ((h / 2) as f64 - 0.5, (w / 2) as f64 - 0.5);
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let hu = if (dist - r).abs() <= 1.0 {
                    rng.gen_range(700.0..1400.0)
                } else if dist < r {
                    noise.sample(rng)
                } else {
                    -1000.0
                };
                v.set(x, y, z, hu as f32);
            }
        }
    }
    v
}

fn stamp_disc(v: &mut Volume, center: (usize, usize), z: usize, radius: f64, hu: f32) {
    let (h, w, _) = v.dims;
    let (cx, cy) = (center.0 as f64, center.1 as f64);
    for y in 0..w {
        for x in 0..h {
            let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if dist <= radius {
                v.set(x, y, z, hu);
            }
        }
    }
}

/// Sample c1 <= c2 <= c3 anchored to the distal end, with margins, and
/// optionally shifted proximally by up to `spread` slices. Returns the
/// landmarks and the sampled block shift.
fn sample_side_landmarks(
    d: usize,
    margin: usize,
    spread: usize,
    rng: &mut ChaCha8Rng,
) -> ([usize; 3], usize) {
    let shift = if spread > 0 { rng.gen_range(0..=spread) } else { 0 };
    let c3 = d - 2 - rng.gen_range(0..2) - shift;
    let c2 = c3 - margin - rng.gen_range(0..2);
    let c1 = (c2 - margin - rng.gen_range(0..2)).max(3);
    ([c1, c2, c3], shift)
}

/// A depth for one distractor disc of landmark type `t`, inconsistent
/// with the side's proximal-to-distal ordering, at least one slice away
/// from every real landmark.
fn distractor_slice(t: usize, lm: [usize; 3], rng: &mut ChaCha8Rng) -> usize {
    let [c1, c2, c3] = lm;
    match t {
        // a canal disc between petrolingual and clinoid cannot be the canal
        0 => c2 + 1 + rng.gen_range(0..(c3 - c2 - 1).max(1)),
        // petrolingual or clinoid below the canal violate ordering
        _ => 1 + rng.gen_range(0..(c1 - 2).max(1)),
    }
}

/// A "ghost" distractor for spread phantoms: the slice landmark `t`
/// would occupy under a different block shift. The ghost disc is locally
/// identical to the real one; only consistency with the other two discs
/// of the side (margin slices away) disambiguates them.
fn ghost_slice(
    t: usize,
    lm: [usize; 3],
    shift: usize,
    spread: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    for _ in 0..16 {
        let s2 = rng.gen_range(0..=spread);
        if s2.abs_diff(shift) < 2 {
            continue;
        }
        let z = lm[t] as i64 + shift as i64 - s2 as i64;
        if z < 2 || z > d as i64 - 2 {
            continue;
        }
        let z = z as usize;
        if lm.iter().all(|&l| z.abs_diff(l) >= 2) {
            return Some(z);
        }
    }
    None
}

pub fn generate_phantom(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = case_rng(spec, case_seed);
    let d = spec.dims.2 - rng.gen_range(0..=spec.depth_jitter);
    let mut v = base_volume(spec, d, &mut rng);
    let (left_c, right_c) = vessel_centers(spec.dims);

    // vessel tracks across the whole depth
    for z in 0..d {
        for &(vx, vy) in &[left_c, right_c] {
            v.set(vx, vy, z, VESSEL_HU);
        }
    }

    let mut indices = Vec::with_capacity(6);
    for &center in &[left_c, right_c] {
        let (lm, shift) =
            sample_side_landmarks(d, spec.landmark_margin, spec.landmark_spread, &mut rng);
        for (t, &z) in lm.iter().enumerate() {
            stamp_disc(&mut v, center, z, LANDMARK_RADII[t], DISC_HU);
        }
        if spec.distractors {
            let t = rng.gen_range(0..3);
            let z = if spec.landmark_spread > 0 {
                ghost_slice(t, lm, shift, spec.landmark_spread, d, &mut rng)
            } else {
                None
            }
            .unwrap_or_else(|| distractor_slice(t, lm, &mut rng));
            stamp_disc(&mut v, center, z, LANDMARK_RADII[t], DISC_HU);
        }
        indices.extend_from_slice(&lm);
    }
    let landmarks = LandmarkSet::new(indices);
    landmarks.validate(d)?;

    // calcification blobs hugging the vessel tracks, away from the discs
    let mut calc = BinaryMask {
        bits: vec![false; v.voxels.len()],
        dims: v.dims,
    };
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.calc_count && attempts < spec.calc_count * 20 {
        attempts += 1;
        let z = rng.gen_range(0..d);
        if landmarks.indices.iter().any(|&l| z.abs_diff(l) <= 1) {
            continue;
        }
        let &(vx, vy) = if rng.gen_bool(0.5) { &left_c } else { &right_c };
        let x = (vx as i64 + rng.gen_range(-1..=1)).clamp(0, spec.dims.0 as i64 - 1) as usize;
        let y = (vy as i64 + rng.gen_range(-1..=1)).clamp(0, spec.dims.1 as i64 - 1) as usize;
        let hu = rng.gen_range(spec.calc_intensity.0..=spec.calc_intensity.1);
        v.set(x, y, z, hu);
        calc.bits[v.index(x, y, z)] = true;
        placed += 1;
    }

    Ok(PhantomCase {
        case_id: format!("case_{case_seed:04}"),
        volume: v,
        landmarks,
        calc_mask: calc,
        class_label: None,
    })
}

/// A 3-class case where the class is how far down the depth axis a
/// zero-mean checkerboard texture extends (first third, two thirds, or
/// full depth). Per-slice mean intensity is identical across classes and
/// no single slice separates all three classes, so only depth-global
/// aggregation can classify.
pub fn generate_classification_case(
    spec: &PhantomSpec,
    class_label: u8,
    case_seed: u64,
) -> Result<PhantomCase> {
    spec.validate()?;
    if class_label > 2 {
        return Err(Error::Argument(format!("invalid class label {class_label}")));
    }
    let mut rng = case_rng(spec, case_seed ^ 0x5EED_C1A5);
    let d = spec.dims.2 - rng.gen_range(0..=spec.depth_jitter);
    let mut v = base_volume(spec, d, &mut rng);
    let (h, w, _) = spec.dims;
    let (cx, cy) = (h / 2, w / 2);
    let z0 = 0;
    let z1 = (class_label as usize + 1) * d / 3;
    for z in z0..z1 {
        for y in cy - 8..cy + 8 {
            for x in cx - 8..cx + 8 {
                // zero-mean per slice: +300 on every fourth pixel, -100 on
                // the rest, staying above the -100 HU clip floor
                let delta = if x % 2 == 0 && y % 2 == 0 { 300.0 } else { -100.0 };
                let cur = v.get(x, y, z);
                v.set(x, y, z, cur + delta);
            }
        }
    }
    Ok(PhantomCase {
        case_id: format!("cls_{case_seed:04}"),
        volume: v,
        landmarks: LandmarkSet::new(vec![]),
        calc_mask: BinaryMask {
            bits: vec![false; h * w * d],
            dims: (h, w, d),
        },
        class_label: Some(class_label),
    })
}

// ---------------------------------------------------------------- folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<FoldSplit>,
}

/// Deterministic k-fold plan with a 70/10/20 split per fold built from
/// rotating tenth-blocks of a seed-shuffled cohort; the k test sets
/// partition the cohort.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = case_ids.len();
    if k < 2 || n < 2 * k {
        return Err(Error::Argument(format!("too few cases: {n} for k={k}")));
    }
    let mut ids = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    // 2k blocks; fold i tests on blocks (2i, 2i+1), validates on the
    // next block, trains on the remaining 70%
    let nb = 2 * k;
    let bound = |j: usize| j * n / nb;
    let block = |j: usize| &ids[bound(j)..bound(j + 1)];
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let (t0, t1, vb) = (2 * i, 2 * i + 1, (2 * i + 2) % nb);
        let mut test = block(t0).to_vec();
        test.extend_from_slice(block(t1));
        let val = block(vb).to_vec();
        let mut train = Vec::new();
        for j in 0..nb {
            if j != t0 && j != t1 && j != vb {
                train.extend_from_slice(block(j));
            }
        }
        folds.push(FoldSplit { train, val, test });
    }
    Ok(FoldPlan { folds })
}

// ---------------------------------------------------------------- manifest

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub volume: String,
    pub calc_mask: String,
    pub landmarks: Vec<usize>,
    pub class_label: Option<u8>,
    pub dims: (usize, usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub magic: String,
    pub version: u32,
    pub spec: PhantomSpec,
    pub cases: Vec<ManifestCase>,
}

const MANIFEST_MAGIC: &str = "DSTDATA";

impl DataManifest {
    pub fn new(spec: PhantomSpec) -> DataManifest {
        DataManifest {
            magic: MANIFEST_MAGIC.to_string(),
            version: MANIFEST_VERSION,
            spec,
            cases: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DataManifest> {
        let text = fs::read_to_string(&path)?;
        let m: DataManifest = serde_json::from_str(&text)?;
        if m.magic != MANIFEST_MAGIC {
            return Err(Error::Header("bad manifest magic".into()));
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::Header(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &m.cases {
            if !seen.insert(&c.case_id) {
                return Err(Error::Header(format!("duplicate case id {}", c.case_id)));
            }
        }
        Ok(m)
    }

    pub fn case(&self, id: &str) -> Result<&ManifestCase> {
        self.cases
            .iter()
            .find(|c| c.case_id == id)
            .ok_or_else(|| Error::Argument(format!("unknown case id {id}")))
    }
}

/// Write a case's volume and mask under `dir` and return its manifest
/// entry (paths relative to `dir`).
pub fn save_case(case: &PhantomCase, dir: impl AsRef<Path>) -> Result<ManifestCase> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let vol_name = format!("{}.dstvol", case.case_id);
    let mask_name = format!("{}_calc.dstvol", case.case_id);
    save_volume(&case.volume, dir.join(&vol_name))?;
    save_mask(&case.calc_mask, &case.volume, dir.join(&mask_name))?;
    Ok(ManifestCase {
        case_id: case.case_id.clone(),
        volume: vol_name,
        calc_mask: mask_name,
        landmarks: case.landmarks.indices.clone(),
        class_label: case.class_label,
        dims: case.volume.dims,
    })
}

pub fn load_case(entry: &ManifestCase, dir: impl AsRef<Path>) -> Result<PhantomCase> {
    let dir = dir.as_ref();
    let volume = load_volume(dir.join(&entry.volume))?;
    let calc_mask = load_mask(dir.join(&entry.calc_mask))?;
    Ok(PhantomCase {
        case_id: entry.case_id.clone(),
        volume,
        landmarks: LandmarkSet::new(entry.landmarks.clone()),
        calc_mask,
        class_label: entry.class_label,
    })
}

/// Base data directory: `DEPTHSEQ_DATA_DIR` or the given fallback.
pub fn data_dir(fallback: &Path) -> PathBuf {
    std::env::var_os("DEPTHSEQ_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}
