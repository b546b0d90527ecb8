//! Patch tokenization, context/target mask plans and paired augmentation.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};
use crate::volume::{Grid3, Modality};

/// Patch extent in voxels along `(z, y, x)`.
pub const PATCH: [usize; 3] = [4, 16, 16];
pub const PATCH_VOXELS: usize = PATCH[0] * PATCH[1] * PATCH[2];
/// A token is foreground when strictly more than this fraction of its voxels are.
pub const FG_TOKEN_FRACTION: f64 = 0.125;
pub const MAX_PATCHES_PER_AXIS: usize = 20;
pub const MULTI_BLOCK_MIN_MASKED: f64 = 0.85;
pub const PATCH_DROPOUT: f64 = 0.2;
pub const MR_CONTEXT_RATIO: f64 = 0.25;
pub const CT_CONTEXT_RATIO: f64 = 0.20;

/// Foreground tokens of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// Patch lattice extent, after padding.
    pub grid_dims: [usize; 3],
    /// Lattice coordinates of retained tokens, lexicographically sorted.
    pub coords: Vec<[usize; 3]>,
    /// `coords.len() × PATCH_VOXELS` values, each patch in `z, y, x` order.
    pub payloads: Vec<f32>,
    /// Voxel position of lattice coordinate `(0,0,0)` in the source volume.
    pub origin_vox: [usize; 3],
    /// Shape of the source volume (unpadded).
    pub volume_shape: [usize; 3],
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn payload(&self, i: usize) -> &[f32] {
        &self.payloads[i * PATCH_VOXELS..(i + 1) * PATCH_VOXELS]
    }

    /// Source-volume voxel range covered by token `i`, clipped to the volume.
    pub fn voxel_box(&self, i: usize) -> ([usize; 3], [usize; 3]) {
        let c = self.coords[i];
        let lo = [0, 1, 2].map(|a| self.origin_vox[a] + c[a] * PATCH[a]);
        let hi = [0, 1, 2].map(|a| (lo[a] + PATCH[a]).min(self.volume_shape[a]));
        (lo, hi)
    }

    pub fn subset(&self, ids: &[usize]) -> PatchGrid {
        let mut payloads = Vec::with_capacity(ids.len() * PATCH_VOXELS);
        for &i in ids {
            payloads.extend_from_slice(self.payload(i));
        }
        PatchGrid {
            grid_dims: self.grid_dims,
            coords: ids.iter().map(|&i| self.coords[i]).collect(),
            payloads,
            origin_vox: self.origin_vox,
            volume_shape: self.volume_shape,
        }
    }
}

/// Tokenizes with a voxel accessor `f(z, y, x) -> (value, foreground)`,
/// starting at voxel `origin`. Voxels outside the volume read as `(0, false)`.
pub fn patchify_with(
    shape: [usize; 3],
    origin: [usize; 3],
    f: impl Fn(usize, usize, usize) -> (f32, bool),
) -> Result<PatchGrid> {
    let extent = [0, 1, 2].map(|a| shape[a].saturating_sub(origin[a]));
    let dims = [0, 1, 2].map(|a| extent[a].div_ceil(PATCH[a]));
    let mut coords = Vec::new();
    let mut payloads = Vec::new();
    let mut patch = vec![0f32; PATCH_VOXELS];
    for pz in 0..dims[0] {
        for py in 0..dims[1] {
            for px in 0..dims[2] {
                let mut fg = 0usize;
                let mut k = 0;
                for dz in 0..PATCH[0] {
                    for dy in 0..PATCH[1] {
                        for dx in 0..PATCH[2] {
                            let z = origin[0] + pz * PATCH[0] + dz;
                            let y = origin[1] + py * PATCH[1] + dy;
                            let x = origin[2] + px * PATCH[2] + dx;
                            let (v, m) = if z < shape[0] && y < shape[1] && x < shape[2] {
                                f(z, y, x)
                            } else {
                                (0.0, false)
                            };
                            patch[k] = v;
                            fg += usize::from(m);
                            k += 1;
                        }
                    }
                }
                if fg as f64 > FG_TOKEN_FRACTION * PATCH_VOXELS as f64 {
                    coords.push([pz, py, px]);
                    payloads.extend_from_slice(&patch);
                }
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::EmptyVolume);
    }
    Ok(PatchGrid {
        grid_dims: dims,
        coords,
        payloads,
        origin_vox: origin,
        volume_shape: shape,
    })
}

pub fn patchify(volume: &Grid3<f32>, mask: &Grid3<bool>) -> Result<PatchGrid> {
    if volume.shape() != mask.shape() {
        return Err(Error::shape(
            "patchify",
            format!("volume {:?} vs mask {:?}", volume.shape(), mask.shape()),
        ));
    }
    patchify_with(volume.shape(), [0; 3], |z, y, x| (volume.get(z, y, x), mask.get(z, y, x)))
}

/// Crops to at most `max_per_axis` patches per axis with a uniformly placed window.
pub fn truncate_crop(grid: &PatchGrid, max_per_axis: usize, seed: u64) -> PatchGrid {
    let mut rng = rng_for(seed, "tokenmask/crop");
    let start: [usize; 3] = [0, 1, 2].map(|a| {
        if grid.grid_dims[a] > max_per_axis {
            rng.random_range(0..=grid.grid_dims[a] - max_per_axis)
        } else {
            0
        }
    });
    let dims = [0, 1, 2].map(|a| grid.grid_dims[a].min(max_per_axis));
    if dims == grid.grid_dims {
        return grid.clone();
    }
    let keep: Vec<usize> = (0..grid.len())
        .filter(|&i| (0..3).all(|a| (start[a]..start[a] + dims[a]).contains(&grid.coords[i][a])))
        .collect();
    let mut out = grid.subset(&keep);
    for c in &mut out.coords {
        for a in 0..3 {
            c[a] -= start[a];
        }
    }
    out.grid_dims = dims;
    out.origin_vox = [0, 1, 2].map(|a| grid.origin_vox[a] + start[a] * PATCH[a]);
    out
}

/// Crop start chosen by [`truncate_crop`] on one axis, for testing uniformity.
pub fn crop_start(grid_dim: usize, max_per_axis: usize, seed: u64) -> usize {
    let mut rng = rng_for(seed, "tokenmask/crop");
    if grid_dim > max_per_axis {
        rng.random_range(0..=grid_dim - max_per_axis)
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskScheme {
    #[serde(rename = "MULTI_BLOCK_TARGET")]
    MultiBlockTarget,
    #[serde(rename = "SMALL_BLOCK_CONTEXT")]
    SmallBlockContext,
}

impl MaskScheme {
    /// Alternating assignment so that a batch has balanced scheme counts.
    pub fn for_slot(slot: usize, step: u64) -> Self {
        if (slot as u64 + step).is_multiple_of(2) {
            MaskScheme::MultiBlockTarget
        } else {
            MaskScheme::SmallBlockContext
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    #[serde(rename = "context")]
    pub context_ids: Vec<usize>,
    #[serde(rename = "target")]
    pub target_ids: Vec<usize>,
    pub scheme: MaskScheme,
    pub dropout_moved: usize,
    /// Masked fraction of foreground tokens before patch dropout.
    pub masked_fraction_pre_dropout: f64,
}

impl MaskPlan {
    pub fn context_fraction(&self) -> f64 {
        self.context_ids.len() as f64 / (self.context_ids.len() + self.target_ids.len()) as f64
    }
}

pub fn context_ratio(modality: Modality) -> f64 {
    match modality {
        Modality::SynthMr => MR_CONTEXT_RATIO,
        Modality::SynthCt => CT_CONTEXT_RATIO,
    }
}

/// Round-half-up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// 3D inclusive prefix sums over the occupancy lattice for O(1) box counts.
struct BoxCounter {
    dims: [usize; 3],
    sums: Vec<u32>,
}

impl BoxCounter {
    fn new(dims: [usize; 3], coords: &[[usize; 3]]) -> Self {
        let d = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let idx = |z: usize, y: usize, x: usize| (z * d[1] + y) * d[2] + x;
        let mut sums = vec![0u32; d[0] * d[1] * d[2]];
        for c in coords {
            sums[idx(c[0] + 1, c[1] + 1, c[2] + 1)] += 1;
        }
        for z in 1..d[0] {
            for y in 1..d[1] {
                for x in 1..d[2] {
                    sums[idx(z, y, x)] = sums[idx(z, y, x)] + sums[idx(z - 1, y, x)] + sums[idx(z, y - 1, x)]
                        + sums[idx(z, y, x - 1)]
                        - sums[idx(z - 1, y - 1, x)]
                        - sums[idx(z - 1, y, x - 1)]
                        - sums[idx(z, y - 1, x - 1)]
                        + sums[idx(z - 1, y - 1, x - 1)];
                }
            }
        }
        Self { dims, sums }
    }

    /// Tokens in the half-open box `[lo, hi)`.
    fn count(&self, lo: [usize; 3], hi: [usize; 3]) -> u32 {
        let d = [self.dims[0] + 1, self.dims[1] + 1, self.dims[2] + 1];
        let s = |z: usize, y: usize, x: usize| i64::from(self.sums[(z * d[1] + y) * d[2] + x]);
        let v = s(hi[0], hi[1], hi[2]) - s(lo[0], hi[1], hi[2]) - s(hi[0], lo[1], hi[2]) - s(hi[0], hi[1], lo[2])
            + s(lo[0], lo[1], hi[2])
            + s(lo[0], hi[1], lo[2])
            + s(hi[0], lo[1], lo[2])
            - s(lo[0], lo[1], lo[2]);
        v as u32
    }
}

/// Box of extent `e` centred on `c`, shifted to lie inside the lattice.
fn centred_box(c: [usize; 3], e: [usize; 3], dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let lo = [0, 1, 2].map(|a| {
        let start = c[a].saturating_sub(e[a] / 2);
        start.min(dims[a] - e[a])
    });
    let hi = [0, 1, 2].map(|a| lo[a] + e[a]);
    (lo, hi)
}

fn log_uniform_extent(rng: &mut Rng, dim: usize) -> usize {
    let lo = 2.min(dim) as f64;
    let hi = dim as f64;
    if hi <= lo {
        return dim;
    }
    let v = rng.random_range(lo.ln()..=hi.ln()).exp();
    (v.round() as usize).clamp(lo as usize, dim)
}

fn in_box(c: &[usize; 3], lo: &[usize; 3], hi: &[usize; 3]) -> bool {
    (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a])
}

/// Samples a context/target split over the tokens of `grid`.
pub fn sample_mask_plan(grid: &PatchGrid, scheme: MaskScheme, modality: Modality, seed: u64) -> Result<MaskPlan> {
    let n = grid.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "mask plan needs at least 2 tokens, grid has {n}"
        )));
    }
    let mut rng = rng_for(seed, "tokenmask/plan");
    let dims = grid.grid_dims;
    let mut in_target = vec![false; n];
    match scheme {
        MaskScheme::MultiBlockTarget => {
            let need = (MULTI_BLOCK_MIN_MASKED * n as f64).ceil() as usize;
            let mut masked = 0;
            while masked < need {
                let c = *grid.coords.choose(&mut rng).expect("non-empty");
                let e = [0, 1, 2].map(|a| log_uniform_extent(&mut rng, dims[a]));
                let (lo, hi) = centred_box(c, e, dims);
                for (i, t) in in_target.iter_mut().enumerate() {
                    if !*t && in_box(&grid.coords[i], &lo, &hi) {
                        *t = true;
                        masked += 1;
                    }
                }
            }
        }
        MaskScheme::SmallBlockContext => {
            let want = (context_ratio(modality) * n as f64).round().max(1.0) as i64;
            let counter = BoxCounter::new(dims, &grid.coords);
            let c = *grid.coords.choose(&mut rng).expect("non-empty");
            let mut best: Vec<([usize; 3], [usize; 3])> = Vec::new();
            let mut best_err = i64::MAX;
            for ez in 1..=dims[0] {
                for ey in 1..=dims[1] {
                    for ex in 1..=dims[2] {
                        let (lo, hi) = centred_box(c, [ez, ey, ex], dims);
                        let err = (i64::from(counter.count(lo, hi)) - want).abs();
                        if err < best_err {
                            best_err = err;
                            best.clear();
                        }
                        if err == best_err {
                            best.push((lo, hi));
                        }
                    }
                }
            }
            let (lo, hi) = *best.choose(&mut rng).expect("at least one box");
            for (i, t) in in_target.iter_mut().enumerate() {
                *t = !in_box(&grid.coords[i], &lo, &hi);
            }
        }
    }
    let masked_pre = in_target.iter().filter(|&&t| t).count();
    let masked_fraction_pre_dropout = masked_pre as f64 / n as f64;

    let mut context: Vec<usize> = (0..n).filter(|&i| !in_target[i]).collect();
    if context.is_empty() {
        // Keep one context token.
        let i = rng.random_range(0..n);
        in_target[i] = false;
        context.push(i);
    }
    if context.len() == n {
        let i = rng.random_range(0..n);
        in_target[i] = true;
        context.retain(|&j| j != i);
    }
    let mut moved = round_half_up(PATCH_DROPOUT * context.len() as f64);
    if moved >= context.len() {
        moved = context.len() - 1;
    }
    context.shuffle(&mut rng);
    for &i in &context[..moved] {
        in_target[i] = true;
    }
    let context_ids: Vec<usize> = (0..n).filter(|&i| !in_target[i]).collect();
    let target_ids: Vec<usize> = (0..n).filter(|&i| in_target[i]).collect();
    Ok(MaskPlan {
        context_ids,
        target_ids,
        scheme,
        dropout_moved: moved,
        masked_fraction_pre_dropout,
    })
}

/// Per-modality median of `|context| / (|context| + |target|)`.
pub fn context_fraction_stats(plans: &[(Modality, MaskPlan)]) -> BTreeMap<Modality, f64> {
    let mut by: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
    for (m, p) in plans {
        by.entry(*m).or_default().push(p.context_fraction());
    }
    by.into_iter()
        .map(|(m, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            };
            (m, med)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Output axis `i` takes input axis `axis_permutation[i]`.
    pub axis_permutation: [usize; 3],
    /// Flips applied after the permutation, in output axes.
    pub flips: [bool; 3],
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        axis_permutation: [0, 1, 2],
        flips: [false; 3],
    };

    pub fn validate(&self) -> Result<()> {
        let mut p = self.axis_permutation;
        p.sort_unstable();
        if p != [0, 1, 2] {
            return Err(Error::InvalidArgument(format!(
                "{:?} is not a permutation of (0, 1, 2)",
                self.axis_permutation
            )));
        }
        Ok(())
    }

    pub fn sample(rng: &mut Rng, permute: bool, flip: bool) -> Self {
        let mut axis_permutation = [0, 1, 2];
        if permute {
            axis_permutation.shuffle(rng);
        }
        let flips = [0, 1, 2].map(|_| flip && rng.random_bool(0.5));
        Self {
            axis_permutation,
            flips,
        }
    }

    pub fn inverse(&self) -> Self {
        // y = flip(perm(x)); x = perm⁻¹(flip(y)) with flips moved to input axes.
        let p = self.axis_permutation;
        let mut inv = [0usize; 3];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        Self {
            axis_permutation: inv,
            flips: [0, 1, 2].map(|a| self.flips[inv[a]]),
        }
    }

    /// True when the 4-voxel patch axis stays in place.
    pub fn preserves_lattice(&self) -> bool {
        self.axis_permutation[0] == 0
    }
}

/// Applies permutation then flips to a volume.
pub fn augment_volume<T: Copy>(g: &Grid3<T>, aug: &AugmentSpec) -> Grid3<T> {
    let mut out = g.permute(aug.axis_permutation);
    for a in 0..3 {
        if aug.flips[a] {
            out = out.flip(a);
        }
    }
    out
}

/// Applies a lattice-preserving augmentation to tokens: coordinates move on
/// the patch lattice and each payload is transformed in place.
pub fn augment_grid(grid: &PatchGrid, aug: &AugmentSpec) -> Result<PatchGrid> {
    aug.validate()?;
    if !aug.preserves_lattice() {
        return Err(Error::InvalidArgument(
            "permutations moving the 4-voxel axis must be applied to the volume before patchify".into(),
        ));
    }
    let p = aug.axis_permutation;
    let dims = [0, 1, 2].map(|i| grid.grid_dims[p[i]]);
    let mut order: Vec<([usize; 3], usize)> = grid
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut nc = [0, 1, 2].map(|k| c[p[k]]);
            for a in 0..3 {
                if aug.flips[a] {
                    nc[a] = dims[a] - 1 - nc[a];
                }
            }
            (nc, i)
        })
        .collect();
    order.sort();
    let mut payloads = Vec::with_capacity(grid.payloads.len());
    for &(_, i) in &order {
        let g = Grid3::new(PATCH, grid.payload(i).to_vec()).expect("patch shape");
        payloads.extend(augment_volume(&g, aug).into_data());
    }
    Ok(PatchGrid {
        grid_dims: dims,
        coords: order.into_iter().map(|(c, _)| c).collect(),
        payloads,
        origin_vox: [0; 3],
        volume_shape: [0, 1, 2].map(|i| dims[i] * PATCH[i]),
    })
}
