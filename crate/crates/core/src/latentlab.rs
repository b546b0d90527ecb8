//! Latent-space inspection: nearest-neighbour pseudo-reconstruction of
//! predicted latents, cross-volume patch matching and k-means anatomy maps.
//!
//! Retrieval is an exhaustive cosine scan; the databanks here are small enough
//! that an approximate index would only cost exactness.

use std::cmp::Ordering;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::model::{encode, predict_targets, EncoderConfig, LatentSequence, VjepaModel};
use crate::seed::rng_for;
use crate::tokenmask::{patchify, patchify_with, PatchGrid, PATCH, PATCH_VOXELS};
use crate::volume::Grid3;

/// Cluster id for voxels that no window token covers.
pub const UNASSIGNED: u8 = u8::MAX;

pub const DEFAULT_KMEANS_ITERS: usize = 100;

fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize latent with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSource {
    pub volume_id: String,
    pub coord: [usize; 3],
}

/// Unit-norm teacher latents paired with the raw patches they encode.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDatabank {
    pub dim: usize,
    /// Row-major `len × dim`, every row unit norm.
    keys: Vec<f64>,
    /// Row-major `len × PATCH_VOXELS`.
    values: Vec<f32>,
    pub sources: Vec<PatchSource>,
}

impl PatchDatabank {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * PATCH_VOXELS..(i + 1) * PATCH_VOXELS]
    }

    /// Builds a databank from already encoded sequences. Each latent row is
    /// paired with the payload of the same token in `grid`.
    pub fn from_latents(items: &[(String, &PatchGrid, &LatentSequence)]) -> Result<Self> {
        let mut dim = None;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut sources = Vec::new();
        for (volume_id, grid, z) in items {
            if grid.coords != z.coords {
                return Err(Error::shape("databank", format!("{volume_id}: latent coords differ from tokens")));
            }
            match dim {
                None => dim = Some(z.dim),
                Some(d) if d != z.dim => {
                    return Err(Error::shape("databank", format!("latent dim {} vs {d}", z.dim)));
                }
                _ => {}
            }
            for i in 0..z.len() {
                keys.extend(l2_normalize(z.row(i))?);
                values.extend_from_slice(grid.payload(i));
                sources.push(PatchSource {
                    volume_id: volume_id.clone(),
                    coord: z.coords[i],
                });
            }
        }
        if sources.is_empty() {
            return Err(Error::Empty("databank reference set".into()));
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            keys,
            values,
            sources,
        })
    }

    /// Cosine similarity of a unit-norm query against every key.
    fn similarities(&self, q: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| dot(q, self.key(i))).collect()
    }

    /// Top-`k` keys by cosine similarity, best first; ties go to the lower
    /// index. `k` is clamped to the databank size.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::shape("knn", format!("query dim {} vs {}", query.len(), self.dim)));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = l2_normalize(query)?;
        let sims = self.similarities(&q);
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        let by = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        let k = k.min(idx.len());
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, by);
            idx.truncate(k);
        }
        idx.sort_by(by);
        Ok(idx.into_iter().map(|i| (i, sims[i])).collect())
    }
}

/// Encodes each reference volume with the teacher. Every foreground token
/// contributes one entry.
pub fn build_databank(teacher: &ParamSet, cfg: &EncoderConfig, refs: &[(String, PatchGrid)]) -> Result<PatchDatabank> {
    if refs.is_empty() {
        return Err(Error::Empty("databank reference set".into()));
    }
    let latents: Vec<LatentSequence> = refs.par_iter().map(|(_, g)| encode(teacher, cfg, g)).collect::<Result<_>>()?;
    let items: Vec<_> = refs.iter().zip(&latents).map(|((id, g), z)| (id.clone(), g, z)).collect();
    PatchDatabank::from_latents(&items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub volume: Grid3<f32>,
    pub target_coords: Vec<[usize; 3]>,
    /// Databank indices averaged for each target, best first.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

fn clamp_k(k: usize, bank: &PatchDatabank) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > bank.len() {
        warn!("k = {k} exceeds databank size {}, clamping", bank.len());
        return Ok(bank.len());
    }
    Ok(k)
}

/// Places the mean of the `k` nearest databank patches of each predicted
/// latent at its target position. Voxels outside the targets are copied
/// from `volume` unchanged.
pub fn reconstruct_from_latents(
    volume: &Grid3<f32>,
    grid: &PatchGrid,
    predicted: &LatentSequence,
    bank: &PatchDatabank,
    k: usize,
) -> Result<Reconstruction> {
    if bank.is_empty() {
        return Err(Error::Empty("databank".into()));
    }
    let k = clamp_k(k, bank)?;
    let neighbors: Vec<Vec<usize>> = (0..predicted.len())
        .into_par_iter()
        .map(|j| Ok(bank.knn(predicted.row(j), k)?.into_iter().map(|(i, _)| i).collect()))
        .collect::<Result<_>>()?;
    let mut out = volume.clone();
    let shape = volume.shape();
    for (j, nn) in neighbors.iter().enumerate() {
        let mut patch = vec![0f64; PATCH_VOXELS];
        for &i in nn {
            for (p, &v) in patch.iter_mut().zip(bank.value(i)) {
                *p += f64::from(v);
            }
        }
        let c = predicted.coords[j];
        let lo = [0, 1, 2].map(|a| grid.origin_vox[a] + c[a] * PATCH[a]);
        let mut t = 0;
        for dz in 0..PATCH[0] {
            for dy in 0..PATCH[1] {
                for dx in 0..PATCH[2] {
                    let (z, y, x) = (lo[0] + dz, lo[1] + dy, lo[2] + dx);
                    if z < shape[0] && y < shape[1] && x < shape[2] {
                        out.set(z, y, x, (patch[t] / nn.len() as f64) as f32);
                    }
                    t += 1;
                }
            }
        }
    }
    Ok(Reconstruction {
        volume: out,
        target_coords: predicted.coords.clone(),
        neighbors,
        k,
    })
}

/// Student encodes the non-target tokens, the predictor emits latents at the
/// target coordinates, and each is replaced by its nearest databank patches.
pub fn knn_reconstruct(
    model: &VjepaModel,
    volume: &Grid3<f32>,
    foreground: &Grid3<bool>,
    target_coords: &[[usize; 3]],
    bank: &PatchDatabank,
    k: usize,
) -> Result<Reconstruction> {
    let grid = patchify(volume, foreground)?;
    let mut is_target = vec![false; grid.len()];
    for c in target_coords {
        let i = grid
            .coords
            .binary_search(c)
            .map_err(|_| Error::InvalidArgument(format!("target {c:?} is not a foreground token")))?;
        is_target[i] = true;
    }
    let ctx_ids: Vec<usize> = (0..grid.len()).filter(|&i| !is_target[i]).collect();
    if ctx_ids.is_empty() {
        return Err(Error::Empty("context tokens".into()));
    }
    let tgt: Vec<[usize; 3]> = (0..grid.len()).filter(|&i| is_target[i]).map(|i| grid.coords[i]).collect();
    let ctx = encode(&model.student, &model.config.encoder, &grid.subset(&ctx_ids))?;
    let pred = predict_targets(&model.predictor, &model.config, &ctx, &tgt)?;
    reconstruct_from_latents(volume, &grid, &pred, bank, k)
}

/// Mean absolute voxel error over the target patches of a reconstruction.
pub fn target_mae(recon: &Reconstruction, truth: &Grid3<f32>, grid: &PatchGrid) -> Result<f64> {
    if recon.volume.shape() != truth.shape() {
        return Err(Error::shape("target_mae", "volume shapes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in &recon.target_coords {
        let lo = [0, 1, 2].map(|a| grid.origin_vox[a] + c[a] * PATCH[a]);
        let hi = [0, 1, 2].map(|a| (lo[a] + PATCH[a]).min(grid.volume_shape[a]));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    sum += f64::from((recon.volume.get(z, y, x) - truth.get(z, y, x)).abs());
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("target voxels".into()));
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Patch matching

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub index: usize,
    pub coord: [usize; 3],
    /// Cosine similarity in `[-1, 1]`.
    pub similarity: f64,
}

/// Candidate with the highest cosine similarity; exact ties go to the
/// lexicographically smallest coordinate.
pub fn patch_match(query: &[f64], candidates: &LatentSequence) -> Result<PatchMatch> {
    if candidates.is_empty() {
        return Err(Error::Empty("match candidates".into()));
    }
    if query.len() != candidates.dim {
        return Err(Error::shape("patch_match", format!("query dim {} vs {}", query.len(), candidates.dim)));
    }
    let q = l2_normalize(query)?;
    let mut best: Option<PatchMatch> = None;
    for i in 0..candidates.len() {
        let s = dot(&q, &l2_normalize(candidates.row(i))?).clamp(-1.0, 1.0);
        let c = candidates.coords[i];
        let better = match &best {
            None => true,
            Some(b) => match s.total_cmp(&b.similarity) {
                Ordering::Greater => true,
                Ordering::Equal => c < b.coord,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some(PatchMatch {
                index: i,
                coord: c,
                similarity: s,
            });
        }
    }
    Ok(best.expect("nonempty candidates"))
}

/// Majority tissue class inside each token's voxel box; ties go to the lower class.
pub fn token_regions(grid: &PatchGrid, tissue: &Grid3<u8>) -> Result<Vec<u8>> {
    if tissue.shape() != grid.volume_shape {
        return Err(Error::shape(
            "token_regions",
            format!("tissue {:?} vs volume {:?}", tissue.shape(), grid.volume_shape),
        ));
    }
    Ok((0..grid.len())
        .map(|i| {
            let (lo, hi) = grid.voxel_box(i);
            let mut counts = [0usize; 256];
            for z in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for x in lo[2]..hi[2] {
                        counts[tissue.get(z, y, x) as usize] += 1;
                    }
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub query_z: usize,
    pub query_y: usize,
    pub query_x: usize,
    pub matched_z: usize,
    pub matched_y: usize,
    pub matched_x: usize,
    pub similarity: f64,
    pub same_region: bool,
}

impl MatchRow {
    pub fn exact(&self) -> bool {
        [self.query_z, self.query_y, self.query_x] == [self.matched_z, self.matched_y, self.matched_x]
    }
}

/// Matches every token of `a` against all tokens of `b`.
pub fn match_volumes(
    a: &LatentSequence,
    b: &LatentSequence,
    regions_a: &[u8],
    regions_b: &[u8],
) -> Result<Vec<MatchRow>> {
    if regions_a.len() != a.len() || regions_b.len() != b.len() {
        return Err(Error::shape("match_volumes", "region labels do not match token counts"));
    }
    (0..a.len())
        .into_par_iter()
        .map(|i| {
            let m = patch_match(a.row(i), b)?;
            let [qz, qy, qx] = a.coords[i];
            let [mz, my, mx] = m.coord;
            Ok(MatchRow {
                query_z: qz,
                query_y: qy,
                query_x: qx,
                matched_z: mz,
                matched_y: my,
                matched_x: mx,
                similarity: m.similarity,
                same_region: regions_a[i] == regions_b[m.index],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub queries: usize,
    /// Fraction of queries matched to their own coordinate.
    pub exact_rate: f64,
    /// Expected exact rate of a uniformly random candidate.
    pub chance_rate: f64,
    pub same_region_rate: f64,
}

pub fn summarize_matches(rows: &[MatchRow], candidates: usize) -> Result<MatchSummary> {
    if rows.is_empty() || candidates == 0 {
        return Err(Error::Empty("match rows".into()));
    }
    let n = rows.len() as f64;
    Ok(MatchSummary {
        queries: rows.len(),
        exact_rate: rows.iter().filter(|r| r.exact()).count() as f64 / n,
        chance_rate: 1.0 / candidates as f64,
        same_region_rate: rows.iter().filter(|r| r.same_region).count() as f64 / n,
    })
}

pub fn write_match_csv(path: &Path, rows: &[MatchRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_match_csv(path: &Path) -> Result<Vec<MatchRow>> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().map(|row| row.map_err(io)).collect()
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lower id.
    pub fn assign(&self, p: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d = sq_dist(p, self.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

fn distinct_rows(points: &[f64], dim: usize) -> usize {
    let mut rows: Vec<Vec<u64>> = points.chunks(dim).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop changing.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::shape("kmeans", format!("{} values for dim {dim}", points.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let n = points.len() / dim;
    let distinct = distinct_rows(points, dim);
    if distinct < k {
        return Err(Error::InvalidArgument(format!("{distinct} distinct embeddings for k = {k}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = rng_for(seed, "latentlab/kmeans");
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if r < d {
                    break;
                }
                r -= d;
            }
        }
        let p = pick.expect("a point off the current centroids exists");
        centroids.extend_from_slice(row(p));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }
    let mut km = KMeans {
        k,
        dim,
        centroids,
        assignments: vec![usize::MAX; n],
        objective: Vec::new(),
    };
    for _ in 0..max_iters.max(1) {
        let assign: Vec<usize> = (0..n).into_par_iter().map(|i| km.assign(row(i))).collect();
        let obj: f64 = (0..n).map(|i| sq_dist(row(i), km.centroid(assign[i]))).sum();
        km.objective.push(obj);
        if assign == km.assignments {
            break;
        }
        km.assignments = assign;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = km.assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its centroid.
            if counts[c] > 0 {
                for j in 0..dim {
                    km.centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(km)
}

/// Lattice origins of the sliding windows: every combination of zero and half
/// a patch along each axis.
pub fn window_origins() -> Vec<[usize; 3]> {
    let half = PATCH.map(|p| p / 2);
    let mut out = Vec::with_capacity(8);
    for z in [0, half[0]] {
        for y in [0, half[1]] {
            for x in [0, half[2]] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Teacher embeddings of every shifted window; the first is the unshifted lattice.
pub fn dense_embeddings(
    teacher: &ParamSet,
    cfg: &EncoderConfig,
    volume: &Grid3<f32>,
    foreground: &Grid3<bool>,
) -> Result<Vec<(PatchGrid, LatentSequence)>> {
    window_origins()
        .par_iter()
        .map(|&o| {
            let g = patchify_with(volume.shape(), o, |z, y, x| (volume.get(z, y, x), foreground.get(z, y, x)))?;
            let z = encode(teacher, cfg, &g)?;
            Ok((g, z))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    /// Cluster id per voxel, [`UNASSIGNED`] where no window votes.
    pub labels: Grid3<u8>,
    pub k: usize,
    pub iou: Vec<f64>,
    pub parenchyma_cluster: usize,
    pub objective: Vec<f64>,
}

/// Intersection over union of each cluster with `reference`; empty unions score 0.
pub fn cluster_iou(labels: &Grid3<u8>, k: usize, reference: &Grid3<bool>) -> Vec<f64> {
    let mut inter = vec![0usize; k];
    let mut size = vec![0usize; k];
    let ref_n = reference.count();
    for (&l, &r) in labels.data().iter().zip(reference.data()) {
        if (l as usize) < k {
            size[l as usize] += 1;
            inter[l as usize] += usize::from(r);
        }
    }
    (0..k)
        .map(|c| {
            let union = size[c] + ref_n - inter[c];
            if union == 0 {
                0.0
            } else {
                inter[c] as f64 / union as f64
            }
        })
        .collect()
}

/// Fits k-means on the unshifted window, assigns every window's tokens and
/// takes a per-voxel majority vote over foreground voxels. The cluster with
/// the highest IoU against `reference` is marked as parenchyma.
pub fn cluster_volume(
    windows: &[(PatchGrid, LatentSequence)],
    foreground: &Grid3<bool>,
    reference: &Grid3<bool>,
    k: usize,
    seed: u64,
) -> Result<ClusterMap> {
    let Some((_, first)) = windows.first() else {
        return Err(Error::Empty("sliding windows".into()));
    };
    if k >= UNASSIGNED as usize {
        return Err(Error::InvalidArgument(format!("k = {k} too large")));
    }
    if foreground.shape() != reference.shape() {
        return Err(Error::shape("cluster_volume", "foreground and reference shapes differ"));
    }
    let km = kmeans(&first.data, first.dim, k, seed, DEFAULT_KMEANS_ITERS)?;
    let shape = foreground.shape();
    let mut votes = vec![0u32; foreground.len() * k];
    for (g, z) in windows {
        if g.volume_shape != shape {
            return Err(Error::shape("cluster_volume", "window volume shape differs"));
        }
        for i in 0..z.len() {
            let c = km.assign(z.row(i));
            let (lo, hi) = g.voxel_box(i);
            for vz in lo[0]..hi[0] {
                for vy in lo[1]..hi[1] {
                    for vx in lo[2]..hi[2] {
                        votes[foreground.index(vz, vy, vx) * k + c] += 1;
                    }
                }
            }
        }
    }
    let labels = Grid3::from_fn(shape, |z, y, x| {
        let v = foreground.index(z, y, x);
        if !foreground.data()[v] {
            return UNASSIGNED;
        }
        let counts = &votes[v * k..(v + 1) * k];
        let mut best = 0;
        for c in 1..k {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        if counts[best] == 0 {
            UNASSIGNED
        } else {
            best as u8
        }
    });
    let iou = cluster_iou(&labels, k, reference);
    let mut parenchyma_cluster = 0;
    for c in 1..k {
        if iou[c] > iou[parenchyma_cluster] {
            parenchyma_cluster = c;
        }
    }
    Ok(ClusterMap {
        labels,
        k,
        iou,
        parenchyma_cluster,
        objective: km.objective,
    })
}
