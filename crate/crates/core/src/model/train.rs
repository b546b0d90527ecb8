use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encoder_forward, predictor_forward, vjepa_loss, Bound, ModelConfig, VjepaModel};
use crate::autodiff::{warmup_cosine_lr, AdamW, AdamWConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::{normalize, WindowMeans};
use crate::seed::{indexed_seed, sub_seed, Rng};
use crate::shardstore::{sample_batch, BatchItem, BatchSpec, ModalityMix, ShardReader};
use crate::tokenmask::{
    augment_volume, patchify, sample_mask_plan, truncate_crop, AugmentSpec, MaskPlan, MaskScheme, PatchGrid,
    MAX_PATCHES_PER_AXIS,
};
use crate::volume::{Grid3, Modality, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// CT_BRAIN, CT_BLOOD, CT_BONE sampling probabilities.
    pub window_probs: [f64; 3],
    pub modality_mix: ModalityMix,
    pub split: Option<String>,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub loss_beta: f64,
    pub augment_flip: bool,
    /// Random y/x transpose; the 4-voxel axis never moves.
    pub augment_swap_inplane: bool,
    pub max_patches_per_axis: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 300,
            batch_size: 8,
            window_probs: [0.7, 0.15, 0.15],
            modality_mix: ModalityMix::Any,
            split: Some("train".into()),
            lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.04,
            ema_start: 0.996,
            ema_end: 1.0,
            loss_beta: 1.0,
            augment_flip: true,
            augment_swap_inplane: false,
            max_patches_per_axis: MAX_PATCHES_PER_AXIS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.batch_spec().validate()?;
        let unit = 0.0..=1.0;
        if !unit.contains(&self.ema_start) || !unit.contains(&self.ema_end) {
            return Err(Error::InvalidSpec(format!(
                "EMA momentum {}..{} outside [0, 1]",
                self.ema_start, self.ema_end
            )));
        }
        if !unit.contains(&self.warmup_fraction) || !(self.lr >= 0.0) || !(self.loss_beta > 0.0) {
            return Err(Error::InvalidSpec(
                "warmup fraction must be in [0, 1], lr >= 0 and loss beta > 0".into(),
            ));
        }
        if self.max_patches_per_axis == 0 {
            return Err(Error::InvalidSpec("max_patches_per_axis must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            window_probs: self.window_probs,
            modality_mix: self.modality_mix,
            seed: self.seed,
            split: self.split.clone(),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_cosine_lr(self.lr, step, self.steps, self.warmup_steps())
    }

    /// Linear ramp from `ema_start` at step 0 to `ema_end` at the last step.
    pub fn momentum_at(&self, step: usize) -> f64 {
        let span = self.steps.saturating_sub(1).max(1) as f64;
        let t = (step as f64 / span).min(1.0);
        self.ema_start + (self.ema_end - self.ema_start) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Smallest per-dimension standard deviation of the teacher latents in the batch.
    pub teacher_latent_std: f64,
    pub lr: f64,
    pub m: f64,
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for m in metrics {
        w.serialize(m).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// One batch slot after augmentation, cropping and mask sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub entry: usize,
    pub study_id: String,
    pub window: Window,
    pub modality: Modality,
    pub augment: AugmentSpec,
    pub grid: PatchGrid,
    pub plan: MaskPlan,
}

pub fn instance_seed(seed: u64, step: usize, slot: usize) -> u64 {
    indexed_seed(
        indexed_seed(sub_seed(seed, "train/instance"), step as u64),
        slot as u64,
    )
}

/// Normalized volume and foreground mask for one stored entry.
pub fn load_normalized(reader: &ShardReader, entry: usize, means: &WindowMeans) -> Result<(Grid3<f32>, Grid3<bool>)> {
    let pv = reader.read_volume(entry)?.to_preproc();
    let mean = means.get(pv.window)?;
    Ok((normalize(&pv, mean), pv.foreground))
}

pub fn prepare_instance(
    reader: &ShardReader,
    item: &BatchItem,
    means: &WindowMeans,
    config: &TrainConfig,
    step: usize,
) -> Result<PreparedInstance> {
    let entry = &reader.entries()[item.entry];
    let (vol, fg) = load_normalized(reader, item.entry, means)?;
    let seed = instance_seed(config.seed, step, item.slot);
    let mut rng = Rng::seed_from_u64(sub_seed(seed, "augment"));
    let mut augment = AugmentSpec::sample(&mut rng, false, config.augment_flip);
    if config.augment_swap_inplane && rng.random_bool(0.5) {
        augment.axis_permutation = [0, 2, 1];
    }
    let grid = patchify(&augment_volume(&vol, &augment), &augment_volume(&fg, &augment))?;
    let grid = truncate_crop(&grid, config.max_patches_per_axis, sub_seed(seed, "crop"));
    let scheme = MaskScheme::for_slot(item.slot, step as u64);
    let plan = sample_mask_plan(&grid, scheme, entry.modality, sub_seed(seed, "mask"))?;
    Ok(PreparedInstance {
        entry: item.entry,
        study_id: entry.study_id.clone(),
        window: entry.window,
        modality: entry.modality,
        augment,
        grid,
        plan,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VjepaModel,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Serialize)]
struct InstanceDump<'a> {
    entry: usize,
    study_id: &'a str,
    window: Window,
    augment: AugmentSpec,
    plan: &'a MaskPlan,
}

#[derive(Serialize)]
struct NumericDump<'a> {
    step: usize,
    seed: u64,
    loss: f64,
    instances: Vec<InstanceDump<'a>>,
}

fn numeric_failure(step: usize, seed: u64, loss: f64, batch: &[PreparedInstance]) -> Error {
    let dump = NumericDump {
        step,
        seed,
        loss,
        instances: batch
            .iter()
            .map(|b| InstanceDump {
                entry: b.entry,
                study_id: &b.study_id,
                window: b.window,
                augment: b.augment,
                plan: &b.plan,
            })
            .collect(),
    };
    let json = serde_json::to_string(&dump).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    Error::Numeric(format!("non-finite loss at step {step}: {json}"))
}

/// Minimum over columns of the population standard deviation.
fn min_column_std(rows: &[Tensor]) -> f64 {
    let Some(first) = rows.first() else { return 0.0 };
    let d = first.shape()[1];
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for t in rows {
        for r in t.data().chunks_exact(d) {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut var = vec![0.0; d];
    for t in rows {
        for r in t.data().chunks_exact(d) {
            for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    var.iter()
        .map(|v| (v / n as f64).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Optimizer state plus the three networks; one [`Trainer::step`] per batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: VjepaModel,
    pub means: WindowMeans,
    opt_student: AdamW,
    opt_predictor: AdamW,
}

impl Trainer {
    pub fn new(config: TrainConfig, means: WindowMeans) -> Result<Self> {
        let model = VjepaModel::init(config.model, config.seed)?;
        Self::with_model(config, model, means)
    }

    pub fn with_model(config: TrainConfig, model: VjepaModel, means: WindowMeans) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::InvalidSpec("model weights do not match the configured architecture".into()));
        }
        let opt_cfg = AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        };
        Ok(Self {
            opt_student: AdamW::new(&model.student, opt_cfg),
            opt_predictor: AdamW::new(&model.predictor, opt_cfg),
            config,
            model,
            means,
        })
    }

    pub fn prepare(&self, reader: &ShardReader, step: usize) -> Result<Vec<PreparedInstance>> {
        let items = sample_batch(reader, &self.config.batch_spec(), step as u64)?;
        items
            .par_iter()
            .map(|item| prepare_instance(reader, item, &self.means, &self.config, step))
            .collect()
    }

    pub fn step(&mut self, reader: &ShardReader, step: usize) -> Result<StepMetrics> {
        let batch = self.prepare(reader, step)?;
        self.step_on(&batch, step)
    }

    /// Forward, backward, optimizer update, then EMA update of the teacher.
    pub fn step_on(&mut self, batch: &[PreparedInstance], step: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let cfg = self.config.model;
        let (loss, teacher_std, grads_s, grads_p) = {
            let mut tape = Tape::new();
            let s = Bound::new(&mut tape, &self.model.student, true);
            let t = Bound::new(&mut tape, &self.model.teacher, false);
            let p = Bound::new(&mut tape, &self.model.predictor, true);
            let mut preds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut teacher_all = Vec::with_capacity(batch.len());
            for inst in batch {
                let ctx = inst.grid.subset(&inst.plan.context_ids);
                let tgt_coords: Vec<[usize; 3]> =
                    inst.plan.target_ids.iter().map(|&i| inst.grid.coords[i]).collect();
                let union: BTreeSet<[usize; 3]> = ctx.coords.iter().chain(&tgt_coords).copied().collect();
                let full: BTreeSet<[usize; 3]> = inst.grid.coords.iter().copied().collect();
                if union != full || union.len() != ctx.len() + tgt_coords.len() {
                    return Err(Error::InvalidArgument(format!(
                        "study {}: context and target tokens do not partition the teacher tokens",
                        inst.study_id
                    )));
                }
                let xc = tape.constant(super::payload_tensor(&ctx)?);
                let zc = encoder_forward(&mut tape, &s, &cfg.encoder, xc, &ctx.coords)?;
                let xf = tape.constant(super::payload_tensor(&inst.grid)?);
                let zf = encoder_forward(&mut tape, &t, &cfg.encoder, xf, &inst.grid.coords)?;
                let zf = tape.detach(zf);
                teacher_all.push(tape.value(zf).clone());
                targets.push(tape.gather_rows(zf, &inst.plan.target_ids)?);
                preds.push(predictor_forward(&mut tape, &p, &cfg, zc, &ctx.coords, &tgt_coords)?);
            }
            let pred = tape.concat_rows(&preds)?;
            let target = tape.concat_rows(&targets)?;
            let target = tape.detach(target);
            let loss = vjepa_loss(&mut tape, pred, target, self.config.loss_beta)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(numeric_failure(step, self.config.seed, value, batch));
            }
            let mut grads = tape.backward(loss)?;
            let gs = self.model.student.collect_grads(s.vars(), &mut grads);
            let gp = self.model.predictor.collect_grads(p.vars(), &mut grads);
            (value, min_column_std(&teacher_all), gs, gp)
        };
        let lr = self.config.lr_at(step);
        self.opt_student.step(&mut self.model.student, &grads_s, lr)?;
        self.opt_predictor.step(&mut self.model.predictor, &grads_p, lr)?;
        if !self.model.student.all_finite() || !self.model.predictor.all_finite() {
            return Err(numeric_failure(step, self.config.seed, loss, batch));
        }
        let m = self.config.momentum_at(step);
        super::ema_update(&mut self.model.teacher, &self.model.student, m)?;
        Ok(StepMetrics {
            step,
            loss,
            teacher_latent_std: teacher_std,
            lr,
            m,
        })
    }

    /// Runs all configured steps, reporting each to `on_step`.
    pub fn run(mut self, reader: &ShardReader, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
        let mut metrics = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let m = self.step(reader, step)?;
            on_step(&m);
            metrics.push(m);
        }
        Ok(TrainOutcome {
            model: self.model,
            metrics,
        })
    }
}

/// Reads window means from the reader's manifest and trains from scratch.
pub fn train(reader: &ShardReader, config: &TrainConfig, on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    let means = reader
        .manifest()
        .window_means
        .clone()
        .ok_or_else(|| Error::Manifest("shard manifest has no training window means".into()))?;
    Trainer::new(config.clone(), means)?.run(reader, on_step)
}

/// Writes metrics CSV, config JSON and the model checkpoint into `dir`.
pub fn save_outcome(outcome: &TrainOutcome, config: &TrainConfig, dir: &Path) -> Result<()> {
    outcome.model.save(&dir.join("model"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    let p = dir.join("train_config.json");
    let json = serde_json::to_vec_pretty(config).map_err(|e| Error::Json {
        path: p.clone(),
        source: e,
    })?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let c = TrainConfig::default();
        assert_eq!(c.momentum_at(0), 0.996);
        assert_eq!(c.momentum_at(299), 1.0);
        assert_eq!(c.warmup_steps(), 30);
        assert!(c.lr_at(29) <= 1e-3 && c.lr_at(30) == 1e-3);
    }

    #[test]
    fn column_std() {
        let t = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(min_column_std(&[t.clone()]), 0.0);
        let u = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert!((min_column_std(&[u]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 3}"#).unwrap();
        assert_eq!(c.steps, 3);
    }
}
