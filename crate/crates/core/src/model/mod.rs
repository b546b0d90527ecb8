//! Student/teacher transformer encoders, the mask-token predictor and the
//! latent prediction loss.
//!
//! All networks work on one variable-length token sequence at a time; a batch
//! is a list of sequences recorded on a single [`Tape`].

mod train;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};
use crate::tokenmask::{PatchGrid, PATCH_VOXELS};

pub use train::{
    instance_seed, load_normalized, prepare_instance, read_metrics_csv, save_outcome, train, write_metrics_csv,
    PreparedInstance, StepMetrics, TrainConfig, TrainOutcome, Trainer,
};

pub(crate) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;
const POSENC_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Voxels per token payload.
    #[serde(default = "default_patch_dim")]
    pub patch_dim: usize,
}

fn default_patch_dim() -> usize {
    PATCH_VOXELS
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch_dim: PATCH_VOXELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
}

fn check_width(what: &str, width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::InvalidSpec(format!(
            "{what} width {width} is not divisible by {heads} heads"
        )));
    }
    if width < 6 {
        return Err(Error::InvalidSpec(format!(
            "{what} width {width} leaves no sinusoidal band per axis (need >= 6)"
        )));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        check_width("encoder", e.embed_dim, e.heads)?;
        let p = &self.predictor;
        check_width("predictor", p.width, p.heads)?;
        if e.depth == 0 || p.depth == 0 || e.mlp_ratio == 0 || p.mlp_ratio == 0 || e.patch_dim == 0 {
            return Err(Error::InvalidSpec(
                "depths, mlp ratios and patch dimension must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed 3D sinusoidal encoding: each axis gets `2·⌊dim/6⌋` columns of
/// interleaved sin/cos at geometric frequencies; leftover columns are zero.
pub fn posenc(coords: &[[usize; 3]], dim: usize) -> Tensor {
    let bands = dim / 6;
    let mut out = vec![0.0; coords.len() * dim];
    for (r, c) in coords.iter().enumerate() {
        let row = &mut out[r * dim..(r + 1) * dim];
        for (axis, &p) in c.iter().enumerate() {
            let base = axis * 2 * bands;
            for k in 0..bands {
                let omega = POSENC_BASE.powf(-(k as f64) / bands as f64);
                let a = p as f64 * omega;
                row[base + 2 * k] = a.sin();
                row[base + 2 * k + 1] = a.cos();
            }
        }
    }
    Tensor::matrix(coords.len(), dim, out).expect("posenc shape")
}

fn push_linear(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    ps.push_normal(format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng);
    ps.push(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
}

fn push_norm(ps: &mut ParamSet, name: &str, dim: usize) {
    ps.push_const(format!("{name}.g"), &[dim], 1.0);
    ps.push_const(format!("{name}.b"), &[dim], 0.0);
}

fn push_block(ps: &mut ParamSet, prefix: &str, dim: usize, mlp_ratio: usize, rng: &mut Rng) {
    push_norm(ps, &format!("{prefix}.ln1"), dim);
    push_linear(ps, &format!("{prefix}.attn.qkv"), dim, 3 * dim, rng);
    push_linear(ps, &format!("{prefix}.attn.proj"), dim, dim, rng);
    push_norm(ps, &format!("{prefix}.ln2"), dim);
    push_linear(ps, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim, rng);
    push_linear(ps, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim, rng);
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> ParamSet {
    let mut rng = rng_for(seed, "model/encoder_init");
    let mut ps = ParamSet::new();
    push_linear(&mut ps, "patch_embed", cfg.patch_dim, cfg.embed_dim, &mut rng);
    for i in 0..cfg.depth {
        push_block(&mut ps, &format!("blocks.{i}"), cfg.embed_dim, cfg.mlp_ratio, &mut rng);
    }
    push_norm(&mut ps, "norm", cfg.embed_dim);
    ps
}

pub fn init_predictor(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = rng_for(seed, "model/predictor_init");
    let (d, p) = (cfg.encoder.embed_dim, &cfg.predictor);
    let mut ps = ParamSet::new();
    push_linear(&mut ps, "embed", d, p.width, &mut rng);
    ps.push_normal("mask_token", &[1, p.width], INIT_STD, &mut rng);
    for i in 0..p.depth {
        push_block(&mut ps, &format!("blocks.{i}"), p.width, p.mlp_ratio, &mut rng);
    }
    push_norm(&mut ps, "norm", p.width);
    push_linear(&mut ps, "proj", p.width, d, &mut rng);
    ps
}

/// A parameter set entered on a tape, addressed by name.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &mut Tape, set: &'a ParamSet, trainable: bool) -> Self {
        let vars = set.bind(tape, trainable);
        Self { set, vars }
    }

    /// Wraps vars created elsewhere (e.g. by a gradient checker) in `set`'s order.
    pub fn from_vars(set: &'a ParamSet, vars: Vec<Var>) -> Self {
        Self { set, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.set
            .find(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {name}")))
    }
}

pub(crate) fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.linear(x, w, b)
}

fn norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn attention(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let (_, d) = tape.value(x).dims2("attention")?;
    let dh = d / heads;
    let qkv = linear(tape, p, &format!("{prefix}.qkv"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, None)?;
        outs.push(tape.matmul(a, v)?);
    }
    let o = tape.concat_cols(&outs)?;
    linear(tape, p, &format!("{prefix}.proj"), o)
}

/// Pre-norm transformer block.
fn block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(tape, p, &format!("{prefix}.attn"), h, heads)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{prefix}.mlp.fc2"), h)?;
    tape.add(x, h)
}

fn check_unique(coords: &[[usize; 3]]) -> Result<()> {
    let mut seen = HashSet::with_capacity(coords.len());
    for c in coords {
        if !seen.insert(*c) {
            return Err(Error::InvalidArgument(format!("duplicate token coordinate {c:?}")));
        }
    }
    Ok(())
}

/// Encoder graph: `payloads` is `N×patch_dim`; returns `N×d` latents.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &EncoderConfig,
    payloads: Var,
    coords: &[[usize; 3]],
) -> Result<Var> {
    let (n, k) = tape.value(payloads).dims2("encode")?;
    if n == 0 {
        return Err(Error::Empty("encoder input sequence".into()));
    }
    if n != coords.len() || k != cfg.patch_dim {
        return Err(Error::shape(
            "encode",
            format!("{n}x{k} payloads for {} coords, patch_dim {}", coords.len(), cfg.patch_dim),
        ));
    }
    let mut x = linear(tape, p, "patch_embed", payloads)?;
    let pe = tape.constant(posenc(coords, cfg.embed_dim));
    x = tape.add(x, pe)?;
    for i in 0..cfg.depth {
        x = block(tape, p, &format!("blocks.{i}"), x, cfg.heads)?;
    }
    norm(tape, p, "norm", x)
}

/// Predictor graph over `[context latents ; mask tokens]`, returning the
/// `|targets|×d` predictions at the target rows only.
pub fn predictor_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    context: Var,
    context_coords: &[[usize; 3]],
    target_coords: &[[usize; 3]],
) -> Result<Var> {
    let ctx: HashSet<[usize; 3]> = context_coords.iter().copied().collect();
    if let Some(c) = target_coords.iter().find(|c| ctx.contains(*c)) {
        return Err(Error::InvalidArgument(format!(
            "target coordinate {c:?} is also a context coordinate"
        )));
    }
    check_unique(target_coords)?;
    let pc = &cfg.predictor;
    let (nc, _) = tape.value(context).dims2("predict")?;
    let nt = target_coords.len();
    let h = linear(tape, p, "embed", context)?;
    let ctx_pe = tape.constant(posenc(context_coords, pc.width));
    let h = tape.add(h, ctx_pe)?;
    let mask = p.get("mask_token")?;
    let rows = vec![0; nt];
    let m = tape.gather_rows(mask, &rows)?;
    let tgt_pe = tape.constant(posenc(target_coords, pc.width));
    let m = tape.add(m, tgt_pe)?;
    let mut x = tape.concat_rows(&[h, m])?;
    for i in 0..pc.depth {
        x = block(tape, p, &format!("blocks.{i}"), x, pc.heads)?;
    }
    let x = norm(tape, p, "norm", x)?;
    let idx: Vec<usize> = (nc..nc + nt).collect();
    let x = tape.gather_rows(x, &idx)?;
    linear(tape, p, "proj", x)
}

/// Mean smooth-L1 between predictions and stop-gradient teacher latents.
pub fn vjepa_loss(tape: &mut Tape, pred: Var, teacher: Var, beta: f64) -> Result<Var> {
    if tape.requires_grad(teacher) {
        return Err(Error::InvalidArgument(
            "teacher latents must be detached from the tape".into(),
        ));
    }
    let (np, _) = tape.value(pred).dims2("vjepa_loss")?;
    let (nt, _) = tape.value(teacher).dims2("vjepa_loss")?;
    if np != nt {
        return Err(Error::shape(
            "vjepa_loss",
            format!("{np} predictions vs {nt} teacher latents"),
        ));
    }
    tape.smooth_l1(pred, teacher, beta)
}

/// `teacher ← m·teacher + (1−m)·student`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<()> {
    teacher.ema_from(student, m)
}

/// Token latents with their lattice coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub coords: Vec<[usize; 3]>,
    pub dim: usize,
    /// Row-major `len × dim`.
    pub data: Vec<f64>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn from_tensor(coords: Vec<[usize; 3]>, t: &Tensor) -> Self {
        let dim = if t.shape().len() == 2 { t.shape()[1] } else { 0 };
        Self {
            coords,
            dim,
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("latent shape")
    }
}

pub fn payload_tensor(grid: &PatchGrid) -> Result<Tensor> {
    let n = grid.len();
    if n == 0 {
        return Err(Error::Empty("token sequence".into()));
    }
    let k = grid.payloads.len() / n;
    Tensor::matrix(n, k, grid.payloads.iter().map(|&v| f64::from(v)).collect())
}

/// Inference-only encoding of a token sequence.
pub fn encode(params: &ParamSet, cfg: &EncoderConfig, grid: &PatchGrid) -> Result<LatentSequence> {
    check_unique(&grid.coords)?;
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, false);
    let x = tape.constant(payload_tensor(grid)?);
    let z = encoder_forward(&mut tape, &p, cfg, x, &grid.coords)?;
    Ok(LatentSequence::from_tensor(grid.coords.clone(), tape.value(z)))
}

/// Inference-only prediction of latents at `target_coords` from encoded context.
pub fn predict_targets(
    predictor: &ParamSet,
    cfg: &ModelConfig,
    ctx: &LatentSequence,
    target_coords: &[[usize; 3]],
) -> Result<LatentSequence> {
    if target_coords.is_empty() {
        return Ok(LatentSequence {
            coords: Vec::new(),
            dim: cfg.encoder.embed_dim,
            data: Vec::new(),
        });
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, predictor, false);
    let c = tape.constant(ctx.to_tensor());
    let z = predictor_forward(&mut tape, &p, cfg, c, &ctx.coords, target_coords)?;
    Ok(LatentSequence::from_tensor(target_coords.to_vec(), tape.value(z)))
}

/// Student, EMA teacher and predictor weights with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VjepaModel {
    pub config: ModelConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub predictor: ParamSet,
}

const MODEL_JSON: &str = "model.json";
const WEIGHTS: [&str; 3] = ["student.bin", "teacher.bin", "predictor.bin"];

impl VjepaModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let student = init_encoder(&config.encoder, seed);
        Ok(Self {
            config,
            teacher: student.clone(),
            student,
            predictor: init_predictor(&config, seed),
        })
    }

    /// Writes `model.json` plus one checkpoint (values + sidecar) per network.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(MODEL_JSON);
        let json = serde_json::to_vec_pretty(&self.config).map_err(|e| Error::Json {
            path: cfg_path.clone(),
            source: e,
        })?;
        fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        for (name, ps) in WEIGHTS.iter().zip([&self.student, &self.teacher, &self.predictor]) {
            checkpoint::save(ps, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(MODEL_JSON);
        let bytes = fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: cfg_path, source: e })?;
        config.validate()?;
        let [student, teacher, predictor] = WEIGHTS.map(|n| checkpoint::load(&dir.join(n)));
        let m = Self {
            config,
            student: student?,
            teacher: teacher?,
            predictor: predictor?,
        };
        let reference = init_encoder(&m.config.encoder, 0);
        if !m.student.same_layout(&reference) || !m.teacher.same_layout(&reference) {
            return Err(Error::Manifest(format!(
                "checkpoint in {} does not match the encoder configuration",
                dir.display()
            )));
        }
        if !m.predictor.same_layout(&init_predictor(&m.config, 0)) {
            return Err(Error::Manifest(format!(
                "checkpoint in {} does not match the predictor configuration",
                dir.display()
            )));
        }
        Ok(m)
    }
}
