//! Attention-based multiple-instance probe over frozen encoder features.
//!
//! Each head is a two-layer perceptron: `ψ_p` scores every instance per
//! class, `ψ_m` produces per-class attention logits that are softmaxed over
//! the instances of a bag. A bag logit is the attention-weighted sum of
//! instance logits.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, sum_grads, AdamW, AdamWConfig, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalstats::{auroc, ScoredSet};
use crate::model::{encode, linear, Bound, EncoderConfig};
use crate::preprocess::WindowMeans;
use crate::seed::{rng_for, rng_indexed, sub_seed};
use crate::shardstore::{ShardReader, StudyEntries};
use crate::model::load_normalized;
use crate::tokenmask::{patchify, PatchGrid, PATCH};
use crate::volume::{Grid3, Modality, Window};

/// One source volume of a bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagVolume {
    pub entry: usize,
    pub volume_id: String,
    pub window: Window,
    pub shape: [usize; 3],
    pub origin_vox: [usize; 3],
}

/// All token latents of one study, with enough geometry to map instances
/// back to voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBag {
    pub study_id: String,
    pub modality: Modality,
    /// `N × d` frozen features.
    pub features: Tensor,
    pub coords: Vec<[usize; 3]>,
    /// Index into `volumes` for each instance.
    pub volume_of: Vec<usize>,
    pub volumes: Vec<BagVolume>,
    pub labels: Vec<u8>,
}

impl StudyBag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    /// Voxel range `[lo, hi)` of instance `i` in its source volume.
    pub fn voxel_box(&self, i: usize) -> ([usize; 3], [usize; 3]) {
        let v = &self.volumes[self.volume_of[i]];
        let c = self.coords[i];
        let lo = [0, 1, 2].map(|a| v.origin_vox[a] + c[a] * PATCH[a]);
        let hi = [0, 1, 2].map(|a| (lo[a] + PATCH[a]).min(v.shape[a]));
        (lo, hi)
    }

    /// Assembles a bag from per-volume token grids and their encoded latents.
    pub fn from_parts(
        study_id: &str,
        modality: Modality,
        parts: Vec<(BagVolume, PatchGrid, Tensor)>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let mut coords = Vec::new();
        let mut volume_of = Vec::new();
        let mut volumes = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (vi, (vol, grid, z)) in parts.into_iter().enumerate() {
            let (n, d) = z.dims2("study_bag")?;
            if n != grid.len() || *dim.get_or_insert(d) != d {
                return Err(Error::shape("study_bag", format!("{n}×{d} latents for {} tokens", grid.len())));
            }
            coords.extend_from_slice(&grid.coords);
            volume_of.extend(std::iter::repeat_n(vi, n));
            data.extend_from_slice(z.data());
            volumes.push(BagVolume {
                origin_vox: grid.origin_vox,
                shape: grid.volume_shape,
                ..vol
            });
        }
        if coords.is_empty() {
            return Err(Error::Empty(format!("study {study_id} has no tokens")));
        }
        Ok(Self {
            study_id: study_id.to_string(),
            modality,
            features: Tensor::matrix(coords.len(), dim.unwrap_or(0), data)?,
            coords,
            volume_of,
            volumes,
            labels,
        })
    }
}

/// Label vector of a stored entry in `classes` order; missing names read as 0.
pub fn entry_labels(reader: &ShardReader, entry: usize, classes: &[String]) -> Vec<u8> {
    let labels = &reader.entries()[entry].labels;
    classes.iter().map(|c| labels.get(c).copied().unwrap_or(0)).collect()
}

/// Encodes every volume of a study with a frozen encoder. With `flip_lr` the
/// normalized volume and foreground are mirrored along x before tokenizing.
pub fn build_bag(
    reader: &ShardReader,
    study: &StudyEntries,
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    means: &WindowMeans,
    classes: &[String],
    flip_lr: bool,
) -> Result<StudyBag> {
    build_bag_with(reader, study, encoder, cfg, means, classes, |vol, fg| {
        if flip_lr {
            (vol.flip(2), fg.flip(2))
        } else {
            (vol, fg)
        }
    })
}

/// [`build_bag`] with an arbitrary transform of each normalized volume and
/// its foreground before tokenizing.
pub fn build_bag_with(
    reader: &ShardReader,
    study: &StudyEntries,
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    means: &WindowMeans,
    classes: &[String],
    transform: impl Fn(Grid3<f32>, Grid3<bool>) -> (Grid3<f32>, Grid3<bool>),
) -> Result<StudyBag> {
    let mut parts = Vec::with_capacity(study.entries.len());
    for &e in &study.entries {
        let (vol, fg) = load_normalized(reader, e, means)?;
        let (vol, fg) = transform(vol, fg);
        let grid = patchify(&vol, &fg)?;
        let z = encode(encoder, cfg, &grid)?.to_tensor();
        let meta = &reader.entries()[e];
        parts.push((
            BagVolume {
                entry: e,
                volume_id: meta.volume_id.clone(),
                window: meta.window,
                shape: grid.volume_shape,
                origin_vox: grid.origin_vox,
            },
            grid,
            z,
        ));
    }
    let labels = entry_labels(reader, study.entries[0], classes);
    StudyBag::from_parts(&study.study_id, study.modality, parts, labels)
}

/// Bags for every study of `split`, encoded in parallel and returned in study order.
pub fn build_bags(
    reader: &ShardReader,
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    means: &WindowMeans,
    classes: &[String],
    split: Option<&str>,
) -> Result<Vec<StudyBag>> {
    reader
        .studies(split)
        .par_iter()
        .map(|s| build_bag(reader, s, encoder, cfg, means, classes, false))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeMeta {
    pub dim: usize,
    pub hidden: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveProbe {
    pub meta: ProbeMeta,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub logits: Vec<f64>,
    /// `N × K` row-major; each class column sums to 1.
    pub attention: Vec<f64>,
    pub instances: usize,
}

impl BagPrediction {
    pub fn alpha(&self, i: usize, k: usize) -> f64 {
        self.attention[i * self.logits.len() + k]
    }
}

const HEADS: [&str; 2] = ["psi_p", "psi_m"];

impl AttentiveProbe {
    pub fn init(dim: usize, hidden_mult: usize, classes: Vec<String>, seed: u64) -> Result<Self> {
        if dim == 0 || hidden_mult == 0 || classes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "probe needs positive dim ({dim}), hidden multiplier ({hidden_mult}) and classes ({})",
                classes.len()
            )));
        }
        let hidden = hidden_mult * dim;
        let k = classes.len();
        let mut rng = rng_for(seed, "probe/init");
        let mut params = ParamSet::new();
        // Fan-in scaled weights; the encoder's 0.02 init leaves a two-layer
        // head with vanishing gradients on unit-scale features.
        let mut layer = |name: String, fan_in: usize, fan_out: usize| {
            params.push_normal(format!("{name}.w"), &[fan_in, fan_out], (fan_in as f64).powf(-0.5), &mut rng);
            params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
        };
        for head in HEADS {
            layer(format!("{head}.fc1"), dim, hidden);
            layer(format!("{head}.fc2"), hidden, k);
        }
        Ok(Self {
            meta: ProbeMeta { dim, hidden, classes },
            params,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.meta.classes
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.meta
            .classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("probe has no class {name}")))
    }

    pub fn forward(&self, bag: &StudyBag) -> Result<BagPrediction> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params, false);
        let x = tape.constant(bag.features.clone());
        let (logits, alpha) = probe_graph(&mut tape, &p, x)?;
        Ok(BagPrediction {
            logits: tape.value(logits).data().to_vec(),
            attention: tape.value(alpha).data().to_vec(),
            instances: bag.len(),
        })
    }

    /// Per-instance class logits `ψ_p(f(x_i))`, `N × K`.
    pub fn instance_logits(&self, bag: &StudyBag) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params, false);
        let x = tape.constant(bag.features.clone());
        let inst = mlp(&mut tape, &p, "psi_p", x)?;
        Ok(tape.value(inst).clone())
    }

    /// Bag logits for many bags, computed in parallel, in input order.
    pub fn predict(&self, bags: &[StudyBag]) -> Result<Vec<Vec<f64>>> {
        bags.par_iter().map(|b| self.forward(b).map(|p| p.logits)).collect()
    }

    /// Checkpoint at `path` plus `<path>.probe.json` with the head layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let meta_path = meta_path(path);
        let json = serde_json::to_vec_pretty(&self.meta).map_err(|e| Error::Json {
            path: meta_path.clone(),
            source: e,
        })?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = meta_path(path);
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ProbeMeta =
            serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: meta_path, source: e })?;
        let params = checkpoint::load(path)?;
        let reference = Self::init(meta.dim, meta.hidden / meta.dim.max(1), meta.classes.clone(), 0)?;
        if reference.meta.hidden != meta.hidden || !params.same_layout(&reference.params) {
            return Err(Error::Manifest(format!("probe checkpoint {} does not match its metadata", path.display())));
        }
        Ok(Self { meta, params })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".probe.json");
    s.into()
}

fn mlp(tape: &mut Tape, p: &Bound, head: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{head}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, p, &format!("{head}.fc2"), h)
}

/// Returns `(bag logits 1×K, attention N×K)` for instance features `x` (N×d).
pub fn probe_graph(tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let inst = mlp(tape, p, "psi_p", x)?;
    let scores = mlp(tape, p, "psi_m", x)?;
    let by_class = tape.transpose(scores)?;
    let a = tape.softmax_rows(by_class, None)?;
    let alpha = tape.transpose(a)?;
    let weighted = tape.mul(alpha, inst)?;
    let logits = tape.sum_rows(weighted)?;
    Ok((logits, alpha))
}

/// Inverse-prevalence class weights normalized to mean 1 over classes with
/// at least one positive; classes without positives get weight 0 and are
/// returned in the second list.
pub fn class_weights(bags: &[StudyBag], classes: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if bags.is_empty() {
        return Err(Error::Empty("no training bags".into()));
    }
    let mut w = vec![0.0; classes];
    let mut excluded = Vec::new();
    for (k, wk) in w.iter_mut().enumerate() {
        let pos = bags.iter().filter(|b| b.labels[k] == 1).count();
        if pos == 0 {
            excluded.push(k);
        } else {
            *wk = bags.len() as f64 / pos as f64;
        }
    }
    let included = classes - excluded.len();
    if included == 0 {
        return Err(Error::UndefinedMetric("no class has a training positive".into()));
    }
    let mean = w.iter().sum::<f64>() / included as f64;
    w.iter_mut().for_each(|x| *x /= mean);
    Ok((w, excluded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden_mult: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_mult: 2,
            lr: 1e-3,
            weight_decay: 0.04,
            batch_size: 16,
            max_epochs: 200,
            patience: 25,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden_mult == 0 {
            return Err(Error::InvalidArgument(
                "probe batch_size, max_epochs and hidden_mult must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("probe lr and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub probe: AttentiveProbe,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Mean AUROC over classes where it is defined; `None` if no class qualifies.
pub fn mean_auroc(bags: &[StudyBag], logits: &[Vec<f64>], classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|&k| {
            let s = ScoredSet::unnamed(
                logits.iter().map(|l| l[k]).collect(),
                bags.iter().map(|b| b.labels[k]).collect(),
            )
            .ok()?;
            auroc(&s).ok()
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn bag_loss_grads(probe: &AttentiveProbe, bag: &StudyBag, weights: &Tensor, scale: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = probe.params.bind(&mut tape, true);
    let p = Bound::from_vars(&probe.params, vars.clone());
    let x = tape.constant(bag.features.clone());
    let (logits, _) = probe_graph(&mut tape, &p, x)?;
    let targets = Tensor::row(bag.labels.iter().map(|&l| f64::from(l)).collect());
    let l = tape.bce_with_logits(logits, &targets, weights)?;
    let l = tape.scale(l, scale);
    let mut grads = tape.backward(l)?;
    Ok((tape.value(l).item(), probe.params.collect_grads(&vars, &mut grads)))
}

/// Minibatch AdamW on class-weighted BCE over bag logits. Early stopping
/// keeps the parameters of the epoch with the best validation mean AUROC;
/// without a usable validation set the final epoch is kept.
pub fn probe_train(
    train: &[StudyBag],
    val: &[StudyBag],
    classes: Vec<String>,
    weights: &[f64],
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    config.validate()?;
    let dim = train.first().map(StudyBag::dim).ok_or_else(|| Error::Empty("no training bags".into()))?;
    let k = classes.len();
    if weights.len() != k {
        return Err(Error::shape("probe_train", format!("{} weights for {k} classes", weights.len())));
    }
    if let Some(b) = train.iter().chain(val).find(|b| b.labels.len() != k || b.dim() != dim) {
        return Err(Error::shape(
            "probe_train",
            format!("bag {} has {} labels, dim {}", b.study_id, b.labels.len(), b.dim()),
        ));
    }
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && !train.iter().any(|b| b.labels[i] == 1) {
            warn!("class {} has no training positives; excluded from the loss", classes[i]);
        }
    }
    let weights: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| if train.iter().any(|b| b.labels[i] == 1) { w } else { 0.0 })
        .collect();
    let active: Vec<usize> = (0..k).filter(|&i| weights[i] > 0.0).collect();
    let wt = Tensor::row(weights);

    let mut probe = AttentiveProbe::init(dim, config.hidden_mult, classes, config.seed)?;
    let mut opt = AdamW::new(
        &probe.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let shuffle_seed = sub_seed(config.seed, "probe/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_indexed(shuffle_seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let parts: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| bag_loss_grads(&probe, &train[i], &wt, scale))
                .collect::<Result<_>>()?;
            epoch_loss += parts.iter().map(|p| p.0).sum::<f64>() * batch.len() as f64;
            let grads = sum_grads(parts.into_iter().map(|p| p.1)).expect("non-empty batch");
            opt.step(&mut probe.params, &grads, config.lr)?;
        }
        epoch_loss /= train.len() as f64;
        if !epoch_loss.is_finite() || !probe.params.all_finite() {
            return Err(Error::Numeric(format!("probe loss {epoch_loss} at epoch {epoch}")));
        }
        let val_auroc = if val.is_empty() {
            None
        } else {
            mean_auroc(val, &probe.predict(val)?, &active)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_mean_auroc: val_auroc,
        });
        let Some(v) = val_auroc else { continue };
        match &best {
            Some((b, _, _)) if v <= *b => {}
            _ => best = Some((v, epoch, probe.params.clone())),
        }
        if let Some((_, e, _)) = &best {
            if epoch - e >= config.patience {
                info!("probe early stop at epoch {epoch}; best epoch {e}");
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            probe.params = params;
            e
        }
        None => history.len() - 1,
    };
    Ok(ProbeOutcome {
        probe,
        history,
        best_epoch,
    })
}

/// Per-class attention spread over voxels. Values are densities (α divided by
/// the voxel count of the instance's clipped patch), so each class map sums
/// to 1; multiplying by `scale` gives per-patch attention for full patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub study_id: String,
    pub class: String,
    pub map: Grid3<f64>,
    pub scale: f64,
}

/// Splats class `k` attention onto the shared voxel grid of the bag's
/// volumes. All volumes of the bag must have the same shape.
pub fn attention_heatmap(pred: &BagPrediction, bag: &StudyBag, k: usize, class: &str) -> Result<Heatmap> {
    let shape = bag.volumes[0].shape;
    if bag.volumes.iter().any(|v| v.shape != shape) {
        return Err(Error::shape("attention_heatmap", "bag volumes differ in shape"));
    }
    if pred.instances != bag.len() || k >= pred.logits.len() {
        return Err(Error::shape(
            "attention_heatmap",
            format!("prediction for {} instances / {} classes", pred.instances, pred.logits.len()),
        ));
    }
    let mut map = Grid3::filled(shape, 0.0f64);
    for i in 0..bag.len() {
        let (lo, hi) = bag.voxel_box(i);
        let n = (0..3).map(|a| hi[a] - lo[a]).product::<usize>();
        if n == 0 {
            continue;
        }
        let v = pred.alpha(i, k) / n as f64;
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    let j = map.index(z, y, x);
                    map.data_mut()[j] += v;
                }
            }
        }
    }
    Ok(Heatmap {
        study_id: bag.study_id.clone(),
        class: class.to_string(),
        map,
        scale: crate::tokenmask::PATCH_VOXELS as f64,
    })
}

/// Index of the maximum, lowest `(z, y, x)` on ties.
pub fn argmax_voxel(map: &Grid3<f64>) -> [usize; 3] {
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    map.coords(best)
}

/// Whether the hottest voxel falls inside `mask`; `None` for an empty mask.
pub fn pointing_game(heatmap: &Grid3<f64>, mask: &Grid3<bool>) -> Result<Option<bool>> {
    if heatmap.shape() != mask.shape() {
        return Err(Error::shape(
            "pointing_game",
            format!("heatmap {:?} vs mask {:?}", heatmap.shape(), mask.shape()),
        ));
    }
    if mask.count() == 0 {
        return Ok(None);
    }
    let [z, y, x] = argmax_voxel(heatmap);
    Ok(Some(mask.get(z, y, x)))
}

/// Chance hit rate of a uniformly random foreground voxel.
pub fn pointing_baseline(mask: &Grid3<bool>, foreground: &Grid3<bool>) -> Option<f64> {
    let fg = foreground.count();
    let inside = mask.data().iter().zip(foreground.data()).filter(|(&m, &f)| m && f).count();
    (fg > 0).then(|| inside as f64 / fg as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub study_id: String,
    pub class: String,
    pub scale: f64,
    /// Density mapped to grey level 255.
    pub max_density: f64,
    pub shape: [usize; 3],
}

/// Writes one 8-bit PGM per axial slice (`slice_###.pgm`) into `dir`, scaled
/// so the global maximum is 255, plus `heatmap.json`.
pub fn export_heatmap(h: &Heatmap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [d, rows, cols] = h.map.shape();
    let max = h.map.data().iter().cloned().fold(0.0, f64::max);
    for z in 0..d {
        let pixels: Vec<u8> = (0..rows * cols)
            .map(|j| {
                let v = h.map.get(z, j / cols, j % cols);
                if max > 0.0 {
                    (v / max * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let img = image::GrayImage::from_raw(cols as u32, rows as u32, pixels)
            .ok_or_else(|| Error::shape("export_heatmap", "slice buffer"))?;
        let path = dir.join(format!("slice_{z:03}.pgm"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
        img.write_with_encoder(enc)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    let sidecar = HeatmapSidecar {
        study_id: h.study_id.clone(),
        class: h.class.clone(),
        scale: h.scale,
        max_density: max,
        shape: h.map.shape(),
    };
    let path = dir.join("heatmap.json");
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Logit changes of a left/right class pair after mirroring the study.
pub fn flip_deltas(original: &BagPrediction, flipped: &BagPrediction, left: usize, right: usize) -> (f64, f64) {
    (
        flipped.logits[left] - original.logits[left],
        flipped.logits[right] - original.logits[right],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(features: Vec<f64>, n: usize, d: usize) -> StudyBag {
        StudyBag {
            study_id: "s".into(),
            modality: Modality::SynthCt,
            features: Tensor::matrix(n, d, features).unwrap(),
            coords: (0..n).map(|i| [0, 0, i]).collect(),
            volume_of: vec![0; n],
            volumes: vec![BagVolume {
                entry: 0,
                volume_id: "v".into(),
                window: Window::CtBrain,
                shape: [4, 16, 16 * n],
                origin_vox: [0; 3],
            }],
            labels: vec![0, 1],
        }
    }

    #[test]
    fn singleton_bag_passes_instance_logits_through() {
        let probe = AttentiveProbe::init(3, 2, vec!["a".into(), "b".into()], 1).unwrap();
        let b = bag(vec![0.3, -0.2, 0.9], 1, 3);
        let pred = probe.forward(&b).unwrap();
        assert_eq!(pred.attention, vec![1.0, 1.0]);
        assert_eq!(probe.instance_logits(&b).unwrap().data(), &pred.logits[..]);
    }

    #[test]
    fn class_weights_mean_one_and_exclusion() {
        let mut bags = vec![bag(vec![0.0; 3], 1, 3); 4];
        bags.iter_mut().for_each(|b| b.labels = vec![0, 0]);
        bags[0].labels = vec![1, 0];
        let (w, ex) = class_weights(&bags, 2).unwrap();
        assert_eq!(ex, vec![1]);
        assert_eq!(w, vec![1.0, 0.0]);
        bags[1].labels = vec![1, 1];
        bags[2].labels = vec![1, 0];
        // Prevalence 3/4 and 1/4: inverse 4/3 and 4, mean 8/3.
        let (w, _) = class_weights(&bags, 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn heatmap_single_instance_is_uniform() {
        let probe = AttentiveProbe::init(2, 1, vec!["a".into(), "b".into()], 2).unwrap();
        let b = bag(vec![1.0, 2.0], 1, 2);
        let h = attention_heatmap(&probe.forward(&b).unwrap(), &b, 0, "a").unwrap();
        let v = 1.0 / 1024.0;
        assert!(h.map.data().iter().all(|&x| x == v));
    }

    #[test]
    fn pointing_game_ties_and_empty_mask() {
        let mut map = Grid3::filled([2, 2, 2], 0.0);
        map.set(1, 0, 0, 1.0);
        map.set(0, 1, 1, 1.0);
        assert_eq!(argmax_voxel(&map), [0, 1, 1]);
        let mut mask = Grid3::filled([2, 2, 2], false);
        assert_eq!(pointing_game(&map, &mask).unwrap(), None);
        mask.set(1, 0, 0, true);
        assert_eq!(pointing_game(&map, &mask).unwrap(), Some(false));
        mask.set(0, 1, 1, true);
        assert_eq!(pointing_game(&map, &mask).unwrap(), Some(true));
    }
}
