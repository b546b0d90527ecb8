//! Deterministic synthetic head phantoms.
//!
//! A phantom is a set of nested axis-aligned ellipsoids (skull shell,
//! parenchyma, ventricle core) in canonical intensity units, optionally carrying
//! spherical lesions, an enlarged ventricle, or a skull defect. Canonical
//! intensities are converted to CT-like or MR-like values by
//! [`render_modality`]. Every output is a pure function of the spec and seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, rng_indexed, sub_seed};
use crate::volume::{Grid3, Modality, RawVolume};

/// Fixed label vocabulary.
pub const LABELS: [&str; 8] = [
    "hyper-left",
    "hyper-right",
    "hypo-left",
    "hypo-right",
    "ventriculomegaly",
    "skull-defect",
    "any-lesion",
    "midline-lesion",
];
pub const NUM_LABELS: usize = LABELS.len();

pub mod label {
    pub const HYPER_LEFT: usize = 0;
    pub const HYPER_RIGHT: usize = 1;
    pub const HYPO_LEFT: usize = 2;
    pub const HYPO_RIGHT: usize = 3;
    pub const VENTRICULOMEGALY: usize = 4;
    pub const SKULL_DEFECT: usize = 5;
    pub const ANY_LESION: usize = 6;
    pub const MIDLINE_LESION: usize = 7;
}

/// Labels whose ground truth is a focal lesion mask.
pub const LESION_LABELS: [usize; 6] = [
    label::HYPER_LEFT,
    label::HYPER_RIGHT,
    label::HYPO_LEFT,
    label::HYPO_RIGHT,
    label::ANY_LESION,
    label::MIDLINE_LESION,
];

pub const NOMINAL_NOISE_STD: f64 = 0.02;
/// Lesion contrast is pinned to five nominal noise standard deviations.
pub const LESION_CONTRAST: f64 = 5.0 * NOMINAL_NOISE_STD;

pub const INTENSITY_SKULL: f64 = 0.95;
pub const INTENSITY_BRAIN: f64 = 0.5;
pub const INTENSITY_VENTRICLE: f64 = 0.3;

const OUTER_FRACTION: f64 = 0.42;
const SKULL_FRACTION: f64 = 0.15;
const VENTRICLE_FRACTION: f64 = 0.22;
const VENTRICLE_FRACTION_ENLARGED: f64 = 0.38;
const RADIUS_JITTER: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionKind {
    #[serde(rename = "HYPER")]
    Hyper,
    #[serde(rename = "HYPO")]
    Hypo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "LEFT")]
    Left,
    #[serde(rename = "RIGHT")]
    Right,
    #[serde(rename = "MIDLINE")]
    Midline,
}

impl Side {
    pub fn mirrored(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Midline => Side::Midline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub kind: LesionKind,
    pub radius_vox: f64,
    pub side: Side,
}

impl LesionSpec {
    /// Side-specific label; `None` never occurs, midline lesions map to their own label.
    pub fn label_id(&self) -> usize {
        match (self.kind, self.side) {
            (_, Side::Midline) => label::MIDLINE_LESION,
            (LesionKind::Hyper, Side::Left) => label::HYPER_LEFT,
            (LesionKind::Hyper, Side::Right) => label::HYPER_RIGHT,
            (LesionKind::Hypo, Side::Left) => label::HYPO_LEFT,
            (LesionKind::Hypo, Side::Right) => label::HYPO_RIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(depth, height, width)`.
    pub grid_shape: [usize; 3],
    /// `(z, y, x)` in millimetres.
    pub spacing_mm: [f64; 3],
    pub pseudo_modality: Modality,
    #[serde(default)]
    pub lesion_config: Vec<LesionSpec>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub ventriculomegaly: bool,
    #[serde(default)]
    pub skull_defect: Option<Side>,
}

fn default_noise() -> f64 {
    NOMINAL_NOISE_STD
}

impl PhantomSpec {
    pub fn new(seed: u64, grid_shape: [usize; 3], spacing_mm: [f64; 3], modality: Modality) -> Self {
        Self {
            seed,
            grid_shape,
            spacing_mm,
            pseudo_modality: modality,
            lesion_config: Vec::new(),
            noise_std: NOMINAL_NOISE_STD,
            ventriculomegaly: false,
            skull_defect: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&s| s < 8) {
            return Err(Error::InvalidSpec(format!(
                "grid shape {:?}: every axis needs at least 8 voxels",
                self.grid_shape
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "spacing {:?} must be positive",
                self.spacing_mm
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidSpec(format!("noise std {}", self.noise_std)));
        }
        for l in &self.lesion_config {
            if !(l.radius_vox > 0.0) {
                return Err(Error::InvalidSpec(format!("lesion radius {}", l.radius_vox)));
            }
        }
        Ok(())
    }
}

/// Tissue class codes stored in the tissue mask.
pub mod tissue {
    pub const BACKGROUND: u8 = 0;
    pub const SKULL: u8 = 1;
    pub const BRAIN: u8 = 2;
    pub const VENTRICLE: u8 = 3;
}

pub type TissueMask = Grid3<u8>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub volumes: Vec<RawVolume>,
    pub labels: [u8; NUM_LABELS],
    /// One mask per label; `None` for negative labels.
    pub lesion_masks: Vec<Option<Grid3<bool>>>,
    pub tissue: TissueMask,
    pub laterality: Option<Side>,
}

impl SyntheticStudy {
    /// Mirror along the left-right (x) axis, swapping side-specific labels.
    pub fn flip_lr(&self) -> Self {
        let swap = |i: usize| match i {
            label::HYPER_LEFT => label::HYPER_RIGHT,
            label::HYPER_RIGHT => label::HYPER_LEFT,
            label::HYPO_LEFT => label::HYPO_RIGHT,
            label::HYPO_RIGHT => label::HYPO_LEFT,
            other => other,
        };
        let mut labels = [0u8; NUM_LABELS];
        let mut masks = vec![None; NUM_LABELS];
        for i in 0..NUM_LABELS {
            labels[swap(i)] = self.labels[i];
            masks[swap(i)] = self.lesion_masks[i].as_ref().map(|m| m.flip(2));
        }
        Self {
            volumes: self
                .volumes
                .iter()
                .map(|v| RawVolume {
                    voxels: v.voxels.flip(2),
                    ..v.clone()
                })
                .collect(),
            labels,
            lesion_masks: masks,
            tissue: self.tissue.flip(2),
            laterality: self.laterality.map(Side::mirrored),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadGeometry {
    center: [f64; 3],
    outer: [f64; 3],
    inner: [f64; 3],
    ventricle: [f64; 3],
}

fn ellipsoid_value(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

fn head_geometry(spec: &PhantomSpec) -> Result<HeadGeometry> {
    let mut rng = rng_for(spec.seed, "phantom/geometry");
    let s = spec.grid_shape;
    let center = [0, 1, 2].map(|a| (s[a] as f64 - 1.0) / 2.0);
    let jitter: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-RADIUS_JITTER..RADIUS_JITTER));
    let outer = [0, 1, 2].map(|a| OUTER_FRACTION * s[a] as f64 * (1.0 + jitter[a]));
    let inner = outer.map(|r| r * (1.0 - SKULL_FRACTION));
    for a in 0..3 {
        if outer[a] - inner[a] < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "grid {:?} too small: skull shell on axis {a} is {:.2} voxels thick (needs >= 1); \
                 use at least 16 voxels per axis",
                s,
                outer[a] - inner[a]
            )));
        }
    }
    let vf = if spec.ventriculomegaly {
        VENTRICLE_FRACTION_ENLARGED
    } else {
        VENTRICLE_FRACTION
    };
    let ventricle = outer.map(|r| (r * vf).max(1.0));
    Ok(HeadGeometry {
        center,
        outer,
        inner,
        ventricle,
    })
}

/// Analytic voxel count of the outer head ellipsoid.
pub fn head_ellipsoid_volume(spec: &PhantomSpec) -> Result<f64> {
    let g = head_geometry(spec)?;
    Ok(4.0 / 3.0 * std::f64::consts::PI * g.outer[0] * g.outer[1] * g.outer[2])
}

/// Builds the nested-ellipsoid head in canonical intensity units.
pub fn generate_head(spec: &PhantomSpec) -> Result<(RawVolume, TissueMask)> {
    spec.validate()?;
    let g = head_geometry(spec)?;
    let tissue_mask = Grid3::from_fn(spec.grid_shape, |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        if ellipsoid_value(p, g.center, g.outer) > 1.0 {
            tissue::BACKGROUND
        } else if ellipsoid_value(p, g.center, g.inner) > 1.0 {
            tissue::SKULL
        } else if ellipsoid_value(p, g.center, g.ventricle) <= 1.0 {
            tissue::VENTRICLE
        } else {
            tissue::BRAIN
        }
    });

    let mut rng = rng_for(spec.seed, "phantom/noise");
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid std");
    let data = tissue_mask
        .data()
        .iter()
        .map(|&t| {
            let base = match t {
                tissue::SKULL => INTENSITY_SKULL,
                tissue::BRAIN => INTENSITY_BRAIN,
                tissue::VENTRICLE => INTENSITY_VENTRICLE,
                _ => return 0.0f32,
            };
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (base + n) as f32
        })
        .collect();
    let mut volume = RawVolume {
        voxels: Grid3::new(spec.grid_shape, data)?,
        spacing_mm: spec.spacing_mm,
        modality: spec.pseudo_modality,
        acquisition_axis: 0,
    };
    let mut tissue_mask = tissue_mask;
    if let Some(side) = spec.skull_defect {
        apply_skull_defect(&mut volume, &mut tissue_mask, &g, side);
    }
    Ok((volume, tissue_mask))
}

fn skull_defect_center(g: &HeadGeometry, side: Side) -> [f64; 3] {
    let mid = 1.0 - SKULL_FRACTION / 2.0;
    match side {
        Side::Left => [g.center[0], g.center[1], g.center[2] - g.outer[2] * mid],
        Side::Right => [g.center[0], g.center[1], g.center[2] + g.outer[2] * mid],
        Side::Midline => [g.center[0], g.center[1] - g.outer[1] * mid, g.center[2]],
    }
}

fn apply_skull_defect(volume: &mut RawVolume, tissue_mask: &mut TissueMask, g: &HeadGeometry, side: Side) {
    let c = skull_defect_center(g, side);
    let r = 0.25 * g.outer[1].min(g.outer[2]);
    for i in 0..tissue_mask.len() {
        if tissue_mask.data()[i] != tissue::SKULL {
            continue;
        }
        let [z, y, x] = tissue_mask.coords(i);
        let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
        if d2 <= r * r {
            tissue_mask.data_mut()[i] = tissue::BRAIN;
            let v = &mut volume.voxels.data_mut()[i];
            *v = (f64::from(*v) - INTENSITY_SKULL + INTENSITY_BRAIN) as f32;
        }
    }
}

fn skull_defect_mask(spec: &PhantomSpec, tissue_mask: &TissueMask) -> Result<Option<Grid3<bool>>> {
    let Some(side) = spec.skull_defect else {
        return Ok(None);
    };
    let g = head_geometry(spec)?;
    let c = skull_defect_center(&g, side);
    let r = 0.25 * g.outer[1].min(g.outer[2]);
    let mask = Grid3::from_fn(spec.grid_shape, |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let d2 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
        d2 <= r * r
            && ellipsoid_value(p, g.center, g.outer) <= 1.0
            && ellipsoid_value(p, g.center, g.inner) > 1.0
            && tissue_mask.get(z, y, x) == tissue::BRAIN
    });
    Ok((mask.count() > 0).then_some(mask))
}

fn sphere_offsets(r: f64) -> Vec<[isize; 3]> {
    let ri = r.floor() as isize;
    let mut out = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dz * dz + dy * dy + dx * dx) as f64) <= r * r {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn side_ok(side: Side, cx: usize, r: f64, width: usize) -> bool {
    let ri = r.floor() as isize;
    let lo = cx as isize - ri;
    let hi = cx as isize + ri;
    let mid = (width / 2) as isize;
    match side {
        Side::Left => hi < mid,
        Side::Right => lo >= mid,
        Side::Midline => lo < mid && hi >= mid,
    }
}

/// Places spherical lesions inside parenchyma on the requested sides.
pub fn inject_lesions(
    volume: &RawVolume,
    tissue_mask: &TissueMask,
    lesions: &[LesionSpec],
    seed: u64,
) -> Result<SyntheticStudy> {
    let shape = tissue_mask.shape();
    let mut rng = rng_for(seed, "phantom/lesions");
    let mut out = volume.clone();
    let mut masks: Vec<Option<Grid3<bool>>> = vec![None; NUM_LABELS];
    let mut placed: Vec<([usize; 3], f64)> = Vec::new();
    let mut occupied = Grid3::filled(shape, false);

    for (li, lesion) in lesions.iter().enumerate() {
        let offsets = sphere_offsets(lesion.radius_vox);
        let candidates: Vec<usize> = (0..tissue_mask.len())
            .filter(|&i| {
                tissue_mask.data()[i] == tissue::BRAIN
                    && side_ok(lesion.side, tissue_mask.coords(i)[2], lesion.radius_vox, shape[2])
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::Placement(format!(
                "lesion {li} ({:?}, {:?}): no brain voxels on that side",
                lesion.kind, lesion.side
            )));
        }
        let fits = |i: usize| -> bool {
            let c = tissue_mask.coords(i);
            let clear = placed.iter().all(|(pc, pr)| {
                let d2: f64 = (0..3).map(|a| (c[a] as f64 - pc[a] as f64).powi(2)).sum();
                d2.sqrt() > lesion.radius_vox + pr + 1.0
            });
            clear
                && offsets.iter().all(|o| {
                    let p = [0, 1, 2].map(|a| c[a] as isize + o[a]);
                    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < shape[a])
                        && tissue_mask.get(p[0] as usize, p[1] as usize, p[2] as usize) == tissue::BRAIN
                })
        };
        let mut chosen = None;
        for _ in 0..400 {
            let &i = candidates.choose(&mut rng).expect("non-empty");
            if fits(i) {
                chosen = Some(i);
                break;
            }
        }
        if chosen.is_none() {
            let valid: Vec<usize> = candidates.iter().copied().filter(|&i| fits(i)).collect();
            chosen = valid.choose(&mut rng).copied();
        }
        let Some(ci) = chosen else {
            return Err(Error::Placement(format!(
                "lesion {li} ({:?}, {:?}, radius {}) does not fit inside parenchyma",
                lesion.kind, lesion.side, lesion.radius_vox
            )));
        };
        let c = tissue_mask.coords(ci);
        placed.push((c, lesion.radius_vox));
        let delta = match lesion.kind {
            LesionKind::Hyper => LESION_CONTRAST,
            LesionKind::Hypo => -LESION_CONTRAST,
        };
        for lid in [lesion.label_id(), label::ANY_LESION] {
            let m = masks[lid].get_or_insert_with(|| Grid3::filled(shape, false));
            for o in &offsets {
                let p = [0, 1, 2].map(|a| (c[a] as isize + o[a]) as usize);
                m.set(p[0], p[1], p[2], true);
            }
        }
        for o in &offsets {
            let p = [0, 1, 2].map(|a| (c[a] as isize + o[a]) as usize);
            if !occupied.get(p[0], p[1], p[2]) {
                occupied.set(p[0], p[1], p[2], true);
                let i = out.voxels.index(p[0], p[1], p[2]);
                let v = &mut out.voxels.data_mut()[i];
                *v = (f64::from(*v) + delta) as f32;
            }
        }
    }

    let mut labels = [0u8; NUM_LABELS];
    for (i, m) in masks.iter().enumerate() {
        labels[i] = u8::from(m.is_some());
    }
    let sides: Vec<Side> = lesions
        .iter()
        .map(|l| l.side)
        .filter(|s| *s != Side::Midline)
        .collect();
    let laterality = match sides.first() {
        Some(&s) if sides.iter().all(|&t| t == s) => Some(s),
        _ => None,
    };
    Ok(SyntheticStudy {
        volumes: vec![out],
        labels,
        lesion_masks: masks,
        tissue: tissue_mask.clone(),
        laterality,
    })
}

/// Piecewise-linear canonical → Hounsfield transfer.
const CT_CONTROL: [(f64, f64); 6] = [
    (0.0, -1000.0),
    (0.2, 10.0),
    (0.5, 40.0),
    (0.7, 70.0),
    (0.95, 1000.0),
    (1.2, 1400.0),
];

pub fn canonical_to_hu(v: f64) -> f64 {
    let pts = &CT_CONTROL;
    let seg = pts
        .windows(2)
        .position(|w| v <= w[1].0)
        .unwrap_or(pts.len() - 2);
    let (a, b) = (pts[seg], pts[seg + 1]);
    a.1 + (v - a.0) * (b.1 - a.1) / (b.0 - a.0)
}

const MR_GAMMA: f64 = 0.5;
const MR_SCALE: f64 = 1000.0;

/// Low-order polynomial multiplicative bias field over normalized coordinates.
pub fn mr_bias_field(shape: [usize; 3], z: usize, y: usize, x: usize) -> f64 {
    let u = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let (uz, uy, ux) = (u(z, shape[0]), u(y, shape[1]), u(x, shape[2]));
    1.0 + 0.06 * uz + 0.05 * uy - 0.04 * ux + 0.03 * uy * ux - 0.03 * uz * uz
}

pub fn mr_remap(v: f64) -> f64 {
    v.max(0.0).powf(MR_GAMMA)
}

/// Converts canonical intensities to a pseudo-modality rendering.
pub fn render_modality(volume: &RawVolume, modality: Modality) -> RawVolume {
    let shape = volume.voxels.shape();
    let voxels = match modality {
        Modality::SynthCt => volume.voxels.map(|v| canonical_to_hu(f64::from(v)) as f32),
        Modality::SynthMr => Grid3::from_fn(shape, |z, y, x| {
            let v = f64::from(volume.voxels.get(z, y, x));
            (MR_SCALE * mr_remap(v) * mr_bias_field(shape, z, y, x)) as f32
        }),
    };
    RawVolume {
        voxels,
        spacing_mm: volume.spacing_mm,
        modality,
        acquisition_axis: volume.acquisition_axis,
    }
}

/// Full phantom: head, lesions, modality rendering.
pub fn generate_study(spec: &PhantomSpec) -> Result<SyntheticStudy> {
    let (head, tissue_mask) = generate_head(spec)?;
    let mut study = inject_lesions(&head, &tissue_mask, &spec.lesion_config, spec.seed)?;
    study.volumes = study
        .volumes
        .iter()
        .map(|v| render_modality(v, spec.pseudo_modality))
        .collect();
    if spec.ventriculomegaly {
        let m = tissue_mask.map(|t| t == tissue::VENTRICLE);
        study.labels[label::VENTRICULOMEGALY] = 1;
        study.lesion_masks[label::VENTRICULOMEGALY] = Some(m);
    }
    if let Some(m) = skull_defect_mask(spec, &tissue_mask)? {
        study.labels[label::SKULL_DEFECT] = 1;
        study.lesion_masks[label::SKULL_DEFECT] = Some(m);
    }
    Ok(study)
}

// ---------------------------------------------------------------------------
// Volume file format

pub const VOLUME_MAGIC: &[u8; 4] = b"VPHA";
pub const VOLUME_VERSION: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 64;

/// Header layout (little-endian): magic[4], version u32, shape 3×u32,
/// spacing 3×f64, modality u8, acquisition axis u8, zero padding to 64 bytes.
pub fn encode_volume(v: &RawVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.voxels.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for s in v.shape() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for s in v.spacing_mm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.modality.code());
    out.push(v.acquisition_axis as u8);
    out.resize(VOLUME_HEADER_LEN, 0);
    for x in v.voxels.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<RawVolume> {
    if bytes.len() < VOLUME_HEADER_LEN || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::Corruption("not a VPHA volume".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::Corruption(format!("unsupported VPHA version {version}")));
    }
    let shape = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing_mm = [f64_at(20), f64_at(28), f64_at(36)];
    let modality = Modality::from_code(bytes[44])
        .ok_or_else(|| Error::Corruption(format!("modality code {}", bytes[44])))?;
    let acquisition_axis = bytes[45] as usize;
    let n: usize = shape.iter().product();
    let payload = &bytes[VOLUME_HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(Error::Corruption(format!(
            "VPHA payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawVolume {
        voxels: Grid3::new(shape, data)?,
        spacing_mm,
        modality,
        acquisition_axis,
    })
}

pub fn write_volume(path: &Path, v: &RawVolume) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn mask_to_volume(mask: &Grid3<bool>, like: &RawVolume) -> RawVolume {
    RawVolume {
        voxels: mask.map(|b| if b { 1.0 } else { 0.0 }),
        ..like.clone()
    }
}

pub fn labels_to_volume(labels: &Grid3<u8>, like: &RawVolume) -> RawVolume {
    RawVolume {
        voxels: labels.map(f32::from),
        ..like.clone()
    }
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityPolicy {
    Ct,
    Mr,
    /// Even phantom indices CT, odd MR.
    Alternate,
    /// Every phantom rendered twice, once per modality, sharing seed and split.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub grid_shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub noise_std: f64,
    pub modality_policy: ModalityPolicy,
    /// Independent per-finding probabilities.
    pub p_hyper_left: f64,
    pub p_hyper_right: f64,
    pub p_hypo_left: f64,
    pub p_hypo_right: f64,
    pub p_midline: f64,
    pub p_ventriculomegaly: f64,
    pub p_skull_defect: f64,
    pub lesion_radius_vox: [f64; 2],
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            grid_shape: [32, 96, 96],
            spacing_mm: [2.0, 1.0, 1.0],
            noise_std: NOMINAL_NOISE_STD,
            modality_policy: ModalityPolicy::Alternate,
            p_hyper_left: 0.3,
            p_hyper_right: 0.3,
            p_hypo_left: 0.15,
            p_hypo_right: 0.15,
            p_midline: 0.05,
            p_ventriculomegaly: 0.1,
            p_skull_defect: 0.05,
            lesion_radius_vox: [4.0, 6.0],
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split sizes `(train, val, test)` from fractions, rounding half up and
/// giving the remainder to test.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let total: f64 = fractions.iter().sum();
    let train = ((fractions[0] / total) * n as f64 + 0.5).floor() as usize;
    let train = train.min(n);
    let val = (((fractions[1] / total) * n as f64 + 0.5).floor() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Deterministic split assignment for `n` phantoms.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let [tr, va, _] = split_counts(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "corpus/split"));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Samples the phantom spec for phantom `index` of a corpus.
pub fn sample_phantom_spec(config: &CorpusConfig, index: usize, modality: Modality) -> PhantomSpec {
    let mut rng = rng_indexed(sub_seed(config.seed, "corpus/findings"), index as u64);
    let phantom_seed = crate::seed::indexed_seed(sub_seed(config.seed, "corpus/phantom"), index as u64);
    let mut lesions = Vec::new();
    let [rlo, rhi] = config.lesion_radius_vox;
    let radius = |rng: &mut crate::seed::Rng| {
        if rhi > rlo {
            rng.random_range(rlo..rhi)
        } else {
            rlo
        }
    };
    let findings = [
        (config.p_hyper_left, LesionKind::Hyper, Side::Left),
        (config.p_hyper_right, LesionKind::Hyper, Side::Right),
        (config.p_hypo_left, LesionKind::Hypo, Side::Left),
        (config.p_hypo_right, LesionKind::Hypo, Side::Right),
    ];
    for (p, kind, side) in findings {
        if rng.random_bool(p.clamp(0.0, 1.0)) {
            lesions.push(LesionSpec {
                kind,
                radius_vox: radius(&mut rng),
                side,
            });
        }
    }
    if rng.random_bool(config.p_midline.clamp(0.0, 1.0)) {
        let kind = if rng.random_bool(0.5) {
            LesionKind::Hyper
        } else {
            LesionKind::Hypo
        };
        lesions.push(LesionSpec {
            kind,
            radius_vox: radius(&mut rng),
            side: Side::Midline,
        });
    }
    let ventriculomegaly = rng.random_bool(config.p_ventriculomegaly.clamp(0.0, 1.0));
    let skull_defect = if rng.random_bool(config.p_skull_defect.clamp(0.0, 1.0)) {
        Some(if rng.random_bool(0.5) { Side::Left } else { Side::Right })
    } else {
        None
    };
    PhantomSpec {
        seed: phantom_seed,
        grid_shape: config.grid_shape,
        spacing_mm: config.spacing_mm,
        pseudo_modality: modality,
        lesion_config: lesions,
        noise_std: config.noise_std,
        ventriculomegaly,
        skull_defect,
    }
}

/// Expected labels implied by a spec without rendering it.
pub fn spec_labels(spec: &PhantomSpec) -> [u8; NUM_LABELS] {
    let mut labels = [0u8; NUM_LABELS];
    for l in &spec.lesion_config {
        labels[l.label_id()] = 1;
        labels[label::ANY_LESION] = 1;
    }
    labels[label::VENTRICULOMEGALY] = u8::from(spec.ventriculomegaly);
    labels[label::SKULL_DEFECT] = u8::from(spec.skull_defect.is_some());
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    /// Phantom index; renderings of one phantom share it.
    pub phantom: usize,
    pub phantom_seed: u64,
    pub volume_paths: Vec<String>,
    pub modality: Modality,
    pub labels: BTreeMap<String, u8>,
    pub split: Split,
    #[serde(default)]
    pub mask_paths: BTreeMap<String, String>,
    #[serde(default)]
    pub tissue_path: Option<String>,
    #[serde(default)]
    pub laterality: Option<Side>,
    pub spec: PhantomSpec,
}

impl StudyRecord {
    pub fn label_vector(&self) -> [u8; NUM_LABELS] {
        let mut out = [0u8; NUM_LABELS];
        for (i, name) in LABELS.iter().enumerate() {
            out[i] = self.labels.get(*name).copied().unwrap_or(0);
        }
        out
    }
}

pub type Prevalence = BTreeMap<String, BTreeMap<String, usize>>;

pub fn prevalence_table(records: &[StudyRecord]) -> Prevalence {
    let mut table: Prevalence = BTreeMap::new();
    for r in records {
        let row = table.entry(r.split.as_str().to_string()).or_default();
        *row.entry("studies".to_string()).or_default() += 1;
        for (name, &v) in &r.labels {
            *row.entry(name.clone()).or_default() += v as usize;
        }
    }
    table
}

fn modalities_for(policy: ModalityPolicy, index: usize) -> Vec<Modality> {
    match policy {
        ModalityPolicy::Ct => vec![Modality::SynthCt],
        ModalityPolicy::Mr => vec![Modality::SynthMr],
        ModalityPolicy::Alternate => {
            if index.is_multiple_of(2) {
                vec![Modality::SynthCt]
            } else {
                vec![Modality::SynthMr]
            }
        }
        ModalityPolicy::Both => vec![Modality::SynthCt, Modality::SynthMr],
    }
}

/// Study records without touching disk (paths are relative names).
pub fn plan_corpus(n_studies: usize, config: &CorpusConfig) -> Result<Vec<StudyRecord>> {
    if n_studies == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one study".into()));
    }
    let splits = assign_splits(n_studies, config.split, config.seed);
    let mut records = Vec::new();
    for (i, &split) in splits.iter().enumerate() {
        for m in modalities_for(config.modality_policy, i) {
            let spec = sample_phantom_spec(config, i, m);
            let labels = spec_labels(&spec);
            let suffix = match m {
                Modality::SynthCt => "ct",
                Modality::SynthMr => "mr",
            };
            let study_id = format!("s{i:05}_{suffix}");
            let mut label_map = BTreeMap::new();
            let mut mask_paths = BTreeMap::new();
            for (k, name) in LABELS.iter().enumerate() {
                label_map.insert(name.to_string(), labels[k]);
                if labels[k] == 1 {
                    mask_paths.insert(name.to_string(), format!("{study_id}/mask_{name}.vpha"));
                }
            }
            records.push(StudyRecord {
                volume_paths: vec![format!("{study_id}/volume.vpha")],
                tissue_path: Some(format!("{study_id}/tissue.vpha")),
                study_id,
                phantom: i,
                phantom_seed: spec.seed,
                modality: m,
                labels: label_map,
                split,
                mask_paths,
                laterality: None,
                spec,
            });
        }
    }
    Ok(records)
}

/// Renders every planned study under `root` and returns the manifest records.
pub fn build_corpus(n_studies: usize, config: &CorpusConfig, root: &Path) -> Result<Vec<StudyRecord>> {
    let records = plan_corpus(n_studies, config)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let rendered: Vec<Result<StudyRecord>> = records
        .into_par_iter()
        .map(|mut rec| {
            let dir = root.join(&rec.study_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let study = generate_study(&rec.spec)?;
            let vol = &study.volumes[0];
            write_volume(&root.join(&rec.volume_paths[0]), vol)?;
            if let Some(tp) = &rec.tissue_path {
                write_volume(&root.join(tp), &labels_to_volume(&study.tissue, vol))?;
            }
            for (k, name) in LABELS.iter().enumerate() {
                let got = study.labels[k];
                let expected = rec.labels.get(*name).copied().unwrap_or(0);
                if got != expected {
                    return Err(Error::Placement(format!(
                        "{}: label {name} expected {expected}, rendered {got}",
                        rec.study_id
                    )));
                }
                if let (Some(mask), Some(p)) = (&study.lesion_masks[k], rec.mask_paths.get(*name)) {
                    write_volume(&root.join(p), &mask_to_volume(mask, vol))?;
                }
            }
            rec.laterality = study.laterality;
            Ok(rec)
        })
        .collect();
    rendered.into_iter().collect()
}

pub fn write_manifest(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let json = serde_json::to_vec_pretty(records).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads a stored volume relative to the corpus root.
pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}
