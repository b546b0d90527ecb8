//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not fail `cargo test` unless
//! `VOLJEPA_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use voljepa::autodiff::gradcheck::check;
use voljepa::autodiff::{ParamSet, Tape, Tensor, Var};
use voljepa::evalstats::{
    auroc, data_equivalence, fit_label_scaling, platt_calibrate, sigmoid, MetricReport, ScalingPoint, ScoredSet,
};
use voljepa::latentlab::{build_databank, knn_reconstruct};
use voljepa::model::{
    ema_update, encode, encoder_forward, init_encoder, init_predictor, load_normalized, predict_targets,
    predictor_forward, vjepa_loss, Bound, EncoderConfig, ModelConfig, PredictorConfig, TrainConfig, Trainer,
    VjepaModel,
};
use voljepa::phantom::{generate_study, ModalityPolicy, PhantomSpec};
use voljepa::preprocess::{normalize, otsu, otsu_bin, preprocess_volume, quantize_unit};
use voljepa::seed::sub_seed;
use voljepa::shardstore::{EntryMeta, ShardReader, ShardSetWriter};
use voljepa::tokenmask::{context_fraction_stats, patchify, sample_mask_plan, MaskScheme, PatchGrid};
use voljepa::volume::{Grid3, Modality, PreprocVolume, Window};
use voljepa_cli::cli::{dispatch, Command};
use voljepa_cli::config::RunConfig;
use voljepa_cli::run::{Ctx, RUN_MANIFEST};
use voljepa_cli::stages::ReconRow;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> voljepa::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, t.value(out).shape());
    let wv = t.constant(w);
    let p = t.mul(out, wv)?;
    Ok(t.sum(p))
}

fn perturb(ps: &ParamSet, seed: u64, scale: f64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ps.clone();
    for i in 0..out.len() {
        for v in out.get_mut(i).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    out
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 6,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            patch_dim: 4,
        },
        predictor: PredictorConfig {
            depth: 1,
            width: 6,
            heads: 2,
            mlp_ratio: 2,
        },
    }
}

// ---------------------------------------------------------------------------

fn c1_gradients() -> Check {
    const H: f64 = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> voljepa::Result<Var>| {
        let r = check(inputs, f, H, 1e-6, 1).unwrap();
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(r.max_rel_err);
    };
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..6));
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let row = rand_tensor(&mut rng, &[n]);
        let left = rand_tensor(&mut rng, &[m, k]);
        let right = rand_tensor(&mut rng, &[k, n]);
        let ws = move |t: &mut Tape, o: Var| weighted_sum(t, o, seed);
        record("add", &[a.clone(), b.clone()], &|t, v| { let o = t.add(v[0], v[1])?; ws(t, o) });
        record("sub", &[a.clone(), b.clone()], &|t, v| { let o = t.sub(v[0], v[1])?; ws(t, o) });
        record("mul", &[a.clone(), b.clone()], &|t, v| { let o = t.mul(v[0], v[1])?; ws(t, o) });
        record("add_row", &[a.clone(), row.clone()], &|t, v| { let o = t.add_row(v[0], v[1])?; ws(t, o) });
        record("scale", std::slice::from_ref(&a), &|t, v| { let o = t.scale(v[0], -1.3); ws(t, o) });
        record("add_scalar", std::slice::from_ref(&a), &|t, v| { let o = t.add_scalar(v[0], 0.7); ws(t, o) });
        record("matmul", &[left.clone(), right.clone()], &|t, v| { let o = t.matmul(v[0], v[1])?; ws(t, o) });
        record("transpose", std::slice::from_ref(&a), &|t, v| { let o = t.transpose(v[0])?; ws(t, o) });
        record("reshape", std::slice::from_ref(&a), &|t, v| { let o = t.reshape(v[0], vec![n, m])?; ws(t, o) });
        let idx: Vec<usize> = (0..m + 2).map(|i| (i * 5 + seed as usize) % m).collect();
        record("gather_rows", std::slice::from_ref(&a), &|t, v| { let o = t.gather_rows(v[0], &idx)?; ws(t, o) });
        record("concat_rows", &[a.clone(), right.clone()], &|t, v| { let o = t.concat_rows(&[v[0], v[1]])?; ws(t, o) });
        record("slice_cols", std::slice::from_ref(&a), &|t, v| { let o = t.slice_cols(v[0], 1, n - 1)?; ws(t, o) });
        record("concat_cols", &[a.clone(), left.clone()], &|t, v| { let o = t.concat_cols(&[v[0], v[1]])?; ws(t, o) });
        let mut mask = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 1..n {
                if rng.random_bool(0.3) {
                    mask.data_mut()[i * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        record("softmax_rows", std::slice::from_ref(&a), &|t, v| { let o = t.softmax_rows(v[0], Some(&mask))?; ws(t, o) });
        let gamma = rand_tensor(&mut rng, &[n]);
        let beta = rand_tensor(&mut rng, &[n]);
        record("layer_norm", &[a.clone(), gamma, beta], &|t, v| { let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?; ws(t, o) });
        record("gelu", std::slice::from_ref(&a), &|t, v| { let o = t.gelu(v[0]); ws(t, o) });
        let bias = rand_tensor(&mut rng, &[n]);
        record("linear", &[left.clone(), right.clone(), bias], &|t, v| { let o = t.linear(v[0], v[1], v[2])?; ws(t, o) });
        record("sum", std::slice::from_ref(&a), &|t, v| { let s = t.mul(v[0], v[0])?; Ok(t.sum(s)) });
        record("mean", std::slice::from_ref(&a), &|t, v| { let s = t.mul(v[0], v[0])?; t.mean(s) });
        record("sum_rows", std::slice::from_ref(&a), &|t, v| { let o = t.sum_rows(v[0])?; ws(t, o) });
        // Differences kept away from the smooth-L1 kink.
        let target: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - if (i + seed as usize).is_multiple_of(2) { 0.2 * x } else { 0.9 + 0.3 * x.abs() })
            .collect();
        let target = Tensor::new(a.shape().to_vec(), target).unwrap();
        record("smooth_l1", &[a.clone(), target], &|t, v| t.smooth_l1(v[0], v[1], 0.5));
        let labels = Tensor::new(vec![m, n], (0..m * n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect()).unwrap();
        let weights = Tensor::new(vec![m, n], (0..m * n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap();
        record("bce_with_logits", std::slice::from_ref(&a), &|t, v| t.bce_with_logits(v[0], &labels, &weights));
    }

    let cfg = tiny_model();
    let student = perturb(&init_encoder(&cfg.encoder, 1), 11, 0.3);
    let predictor = perturb(&init_predictor(&cfg, 1), 12, 0.3);
    let ctx_coords = [[0, 0, 0], [0, 1, 2], [1, 0, 1]];
    let tgt_coords = [[1, 1, 1], [2, 0, 0]];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let payload = rand_tensor(&mut rng, &[3, 4]);
    let teacher = Tensor::matrix(2, 6, (0..12).map(|_| rng.random_range(-0.4..0.4)).collect()).unwrap();
    let mut inputs: Vec<Tensor> = student.iter().map(|p| p.value.clone()).collect();
    inputs.extend(predictor.iter().map(|p| p.value.clone()));
    inputs.push(payload);
    let (ns, np) = (student.len(), predictor.len());
    let graph = check(
        &inputs,
        |tape, vars| {
            let s = Bound::from_vars(&student, vars[..ns].to_vec());
            let p = Bound::from_vars(&predictor, vars[ns..ns + np].to_vec());
            let z = encoder_forward(tape, &s, &cfg.encoder, vars[ns + np], &ctx_coords)?;
            let pred = predictor_forward(tape, &p, &cfg, z, &ctx_coords, &tgt_coords)?;
            let t = tape.constant(teacher.clone());
            vjepa_loss(tape, pred, t, 1.0)
        },
        H,
        1e-6,
        1,
    )
    .unwrap();
    let (name, err) = worst.iter().fold(("full graph", graph.max_rel_err), |acc, (n, &e)| if e > acc.1 { (n, e) } else { acc });
    ensure(
        err < 1e-4,
        format!("{} primitives + full graph ({} params), worst rel err {err:.2e} ({name})", worst.len(), graph.checked),
    )
}

fn phantom_grid(seed: u64, modality: Modality) -> PatchGrid {
    let spec = PhantomSpec::new(seed, [32, 96, 96], [2.0, 1.0, 1.0], modality);
    let st = generate_study(&spec).unwrap();
    let pv = &preprocess_volume(&st.volumes[0]).unwrap()[0];
    patchify(&normalize(pv, 0.5), &pv.foreground).unwrap()
}

fn c2_masking() -> Check {
    let mut plans = Vec::new();
    let mut min_multi = f64::INFINITY;
    for modality in [Modality::SynthMr, Modality::SynthCt] {
        let grids: Vec<PatchGrid> = (0..16).map(|s| phantom_grid(500 + s, modality)).collect();
        for i in 0..512u64 {
            let scheme = MaskScheme::for_slot(i as usize, 0);
            let g = &grids[i as usize % grids.len()];
            let plan = sample_mask_plan(g, scheme, modality, sub_seed(i, modality.as_str())).unwrap();
            let mut all: Vec<usize> = plan.context_ids.iter().chain(&plan.target_ids).copied().collect();
            all.sort_unstable();
            all.dedup();
            if all.len() != g.len() || all.len() != plan.context_ids.len() + plan.target_ids.len() {
                return Err(format!("plan {i} ({modality:?}) does not partition the foreground tokens"));
            }
            if plan.context_ids.is_empty() || plan.target_ids.is_empty() {
                return Err(format!("plan {i} ({modality:?}) has an empty side"));
            }
            if scheme == MaskScheme::MultiBlockTarget {
                min_multi = min_multi.min(plan.masked_fraction_pre_dropout);
            }
            plans.push((modality, plan));
        }
    }
    let med = context_fraction_stats(&plans);
    let (mr, ct) = (med[&Modality::SynthMr], med[&Modality::SynthCt]);
    ensure(
        (0.13..=0.24).contains(&mr) && (0.10..=0.21).contains(&ct) && min_multi >= 0.85,
        format!("median context MR {mr:.3}, CT {ct:.3}; min multi-block masked {min_multi:.3}; 1024 plans partition"),
    )
}

fn small_shards(dir: &Path, n: u64) -> ShardReader {
    let mut w = ShardSetWriter::new(dir).unwrap();
    let mut all = Vec::new();
    for i in 0..n {
        let modality = if i % 2 == 0 { Modality::SynthCt } else { Modality::SynthMr };
        let st = generate_study(&PhantomSpec::new(900 + i, [32, 64, 64], [2.0, 1.0, 1.0], modality)).unwrap();
        for pv in preprocess_volume(&st.volumes[0]).unwrap() {
            let meta = EntryMeta {
                study_id: format!("s{i}"),
                volume_id: format!("s{i}_{}", pv.window.as_str()),
                group: format!("p{i}"),
                labels: BTreeMap::new(),
            };
            w.append("train", &pv, &meta).unwrap();
            all.push(pv);
        }
    }
    let mut m = w.finalize().unwrap();
    m.window_means = Some(voljepa::preprocess::WindowMeans::compute(&all));
    let path = dir.join("manifest.json");
    m.save(&path).unwrap();
    ShardReader::open(&path).unwrap()
}

fn c3_ema() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let reader = small_shards(dir.path(), 4);
    let means = reader.manifest().window_means.clone().unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 24,
                depth: 2,
                heads: 4,
                mlp_ratio: 2,
                ..Default::default()
            },
            predictor: PredictorConfig {
                depth: 1,
                width: 24,
                heads: 4,
                mlp_ratio: 2,
            },
        },
        steps: 4,
        batch_size: 3,
        ema_start: 0.9,
        ema_end: 0.95,
        warmup_fraction: 0.0,
        seed: 7,
        ..Default::default()
    };
    let mut tr = Trainer::new(cfg, means).unwrap();
    for step in 0..3 {
        let t0 = tr.model.teacher.clone();
        let s0 = tr.model.student.clone();
        let m = tr.step(&reader, step).unwrap();
        if tr.model.student == s0 {
            return Err(format!("step {step}: student did not move"));
        }
        let mut expect = t0;
        expect.ema_from(&tr.model.student, m.m).unwrap();
        if tr.model.teacher != expect {
            return Err(format!("step {step}: teacher differs from the EMA of the updated student"));
        }
    }

    let student = init_encoder(&tiny_model().encoder, 1);
    let teacher = perturb(&student, 2, 0.5);
    let mut same = teacher.clone();
    ema_update(&mut same, &student, 1.0).unwrap();
    let mut copy = teacher.clone();
    ema_update(&mut copy, &student, 0.0).unwrap();

    let mut tape = Tape::new();
    let t = rand_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[5, 6]);
    let p = tape.leaf(t.clone());
    let tc = tape.constant(t);
    let l = vjepa_loss(&mut tape, p, tc, 1.0).unwrap();
    let zero = tape.value(l).item();
    ensure(
        same == teacher && copy == student && zero == 0.0,
        format!("3 steps teacher == EMA(student) bitwise; m=1 identity {}; m=0 copy {}; loss at equality {zero}", same == teacher, copy == student),
    )
}

fn stage(ctx: &Ctx, cmds: &[Command]) -> Result<(), String> {
    for &c in cmds {
        dispatch(ctx, c).map_err(|e| format!("{}: {e}", c.name()))?;
    }
    Ok(())
}

fn c4_training(root: &Path) -> Check {
    let mut c = RunConfig {
        seed: 4,
        ..Default::default()
    };
    c.phantom.n_studies = 200;
    c.phantom.corpus.modality_policy = ModalityPolicy::Alternate;
    c.train.split = None;
    let ctx = Ctx::new(c, root.to_path_buf()).map_err(|e| e.to_string())?;
    stage(&ctx, &[Command::PhantomGen, Command::Preprocess, Command::ShardPack])?;
    let reader = ShardReader::open(&ctx.shards_dir().join("manifest.json")).unwrap();
    let studies = reader.studies(None).len();
    let out = voljepa::model::train(&reader, &ctx.config.train, |_| {}).map_err(|e| e.to_string())?;
    let loss: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let n = loss.len();
    let first = loss[..50].iter().sum::<f64>() / 50.0;
    let last = loss[n - 50..].iter().sum::<f64>() / 50.0;
    let min_std = out.metrics.iter().map(|m| m.teacher_latent_std).fold(f64::INFINITY, f64::min);
    ensure(
        n == 300 && studies == 200 && last <= 0.7 * first && min_std >= 1e-3,
        format!("{n} steps on {studies} phantoms: loss {first:.4} -> {last:.4} (ratio {:.3}); min teacher std {min_std:.4}", last / first),
    )
}

/// Corpus, pretraining, CT-only probe and every downstream stage at the
/// scale used by the probe, transfer, flip and reconstruction criteria.
fn pipeline_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 2024,
        ..Default::default()
    };
    c.phantom.n_studies = 240;
    c.phantom.corpus.modality_policy = ModalityPolicy::Both;
    c.phantom.corpus.split = [0.6, 0.2, 0.2];
    c.probe.modality = Some(Modality::SynthCt);
    c.latent.recon_studies = 40;
    c.latent.k = 1;
    c
}

fn metric(report: &MetricReport, name: &str, class: &str) -> Option<f64> {
    report.rows.iter().find(|r| r.metric == name && r.class == class).map(|r| r.value)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn c5_probe(eval: &MetricReport) -> Check {
    let any = metric(eval, "auroc", "any-lesion");
    let lat: Vec<(&str, Option<f64>)> = ["hyper-left", "hyper-right", "hypo-left", "hypo-right"]
        .into_iter()
        .map(|c| (c, metric(eval, "auroc", c)))
        .collect();
    let acc = metric(eval, "pointing_accuracy", "lesion-classes");
    let base = metric(eval, "pointing_baseline", "lesion-classes");
    let ok = any.is_some_and(|v| v >= 0.90)
        && lat.iter().all(|(_, v)| v.is_some_and(|v| v >= 0.80))
        && matches!((acc, base), (Some(a), Some(b)) if a >= 2.0 * b);
    let lat_s: Vec<String> = lat.iter().map(|(c, v)| format!("{c} {}", fmt(*v))).collect();
    ensure(
        ok,
        format!(
            "any-lesion AUROC {} (>= 0.90); {} (>= 0.80); pointing {} vs baseline {} (>= 2x)",
            fmt(any),
            lat_s.join(", "),
            fmt(acc),
            fmt(base)
        ),
    )
}

fn c6_transfer(eval: &MetricReport) -> Check {
    let native = metric(eval, "cross_modal_native_auroc", "any-lesion");
    let transfer = metric(eval, "cross_modal_transfer_auroc", "any-lesion");
    let delta = metric(eval, "cross_modal_delta", "any-lesion");
    ensure(
        delta.is_some_and(|d| d.abs() <= 0.10),
        format!("CT-trained probe: native CT {} vs zero-shot MR {}, delta {} (|delta| <= 0.10)", fmt(native), fmt(transfer), fmt(delta)),
    )
}

fn c9_flip(eval: &MetricReport) -> Check {
    let a = metric(eval, "flip_auroc", "laterality");
    let d = metric(eval, "double_flip_max_abs_delta", "laterality");
    let n = eval.rows.iter().find(|r| r.metric == "flip_auroc").map_or(0, |r| r.n);
    ensure(
        a.is_some_and(|a| a >= 0.9) && d == Some(0.0),
        format!("flip-statistic AUROC {} over {n} studies (>= 0.9); double-flip max |delta| {}", fmt(a), fmt(d)),
    )
}

fn c10_recon(ctx: &Ctx) -> Check {
    let rows: Vec<ReconRow> =
        serde_json::from_slice(&fs::read(ctx.report_dir("recon").join("recon.json")).unwrap()).unwrap();
    let reader = ShardReader::open(&ctx.shards_dir().join("manifest.json")).unwrap();
    let means = reader.manifest().window_means.clone().unwrap();
    let model = VjepaModel::load(&ctx.pretrain_dir().join("model")).unwrap();
    let groups: std::collections::BTreeSet<String> = rows
        .iter()
        .map(|r| {
            let e = reader.entries().iter().find(|e| e.volume_id == r.volume_id).unwrap();
            e.group.clone()
        })
        .collect();
    let mean = rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64;
    let worst = rows.iter().map(|r| r.mae).fold(0.0, f64::max);

    // Independent retrieval: cosine against every databank key, full sort.
    let mut queries = 0usize;
    let seed = sub_seed(ctx.config.seed, "recon");
    for r in rows.iter().take(4) {
        let e = reader.entries().iter().position(|e| e.volume_id == r.volume_id).unwrap();
        let (vol, fg) = load_normalized(&reader, e, &means).unwrap();
        let grid = patchify(&vol, &fg).unwrap();
        let meta = &reader.entries()[e];
        let plan = sample_mask_plan(&grid, MaskScheme::MultiBlockTarget, meta.modality, sub_seed(seed, &meta.volume_id)).unwrap();
        let targets: Vec<[usize; 3]> = plan.target_ids.iter().map(|&i| grid.coords[i]).collect();
        let bank = build_databank(&model.teacher, &model.config.encoder, &[(meta.volume_id.clone(), grid.clone())]).unwrap();
        let rec = knn_reconstruct(&model, &vol, &fg, &targets, &bank, 1).unwrap();
        let ctx_ids: Vec<usize> = (0..grid.len()).filter(|i| !plan.target_ids.contains(i)).collect();
        let z = encode(&model.student, &model.config.encoder, &grid.subset(&ctx_ids)).unwrap();
        let pred = predict_targets(&model.predictor, &model.config, &z, &rec.target_coords).unwrap();
        for t in 0..pred.len() {
            let q = pred.row(t);
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut all: Vec<(usize, f64)> = (0..bank.len())
                .map(|i| (i, q.iter().zip(bank.key(i)).map(|(a, b)| a * b).sum::<f64>() / qn))
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if rec.neighbors[t] != [all[0].0] {
                return Err(format!("{}: target {t} retrieved {:?}, exhaustive scan {}", r.volume_id, rec.neighbors[t], all[0].0));
            }
            queries += 1;
        }
    }
    ensure(
        groups.len() >= 20 && mean <= 0.1,
        format!(
            "k=1 self-databank MAE mean {mean:.4}, worst {worst:.4} on {} volumes from {} held-out phantoms; {queries} retrievals equal exhaustive scan",
            rows.len(),
            groups.len()
        ),
    )
}

fn brute_auroc(s: &ScoredSet) -> f64 {
    let (mut num, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if s.labels[i] == 1 && s.labels[j] == 0 {
                pairs += 1;
                num += match s.scores[i].partial_cmp(&s.scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    num as f64 / (2 * pairs) as f64
}

/// Exhaustive split search over the 256-bin codes using exact integer
/// between-class variance.
fn brute_otsu(values: &[f32]) -> Option<usize> {
    let min = values.iter().fold(f64::INFINITY, |a, &v| a.min(f64::from(v)));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
    if !(max > min) {
        return None;
    }
    let bins: Vec<u128> = values.iter().map(|&v| otsu_bin(f64::from(v), min, max) as u128).collect();
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 1..256u128 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
        for &b in &bins {
            if b < t {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n1 * s0).abs_diff(n0 * s1);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((t as usize, num, den));
        }
    }
    best.map(|b| b.0)
}

fn c7_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let n = rng.random_range(2..300);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..25u8)) / 3.0).collect();
        let s = ScoredSet::unnamed(scores, labels).unwrap();
        let (fast, slow) = (auroc(&s).unwrap(), brute_auroc(&s));
        if fast != slow {
            return Err(format!("AUROC instance {i}: {fast} vs brute force {slow}"));
        }
    }
    for i in 0..300 {
        let n = rng.random_range(2..1500);
        let modes = rng.random_range(1..5);
        let centers: Vec<f32> = (0..modes).map(|_| rng.random_range(-500.0..500.0)).collect();
        let values: Vec<f32> =
            (0..n).map(|_| centers[rng.random_range(0..modes)] + rng.random_range(-40.0f32..40.0)).collect();
        if otsu(&values).map(|o| o.bin) != brute_otsu(&values) {
            return Err(format!("Otsu instance {i} disagrees with exhaustive search"));
        }
    }
    let mut worst_q = 0.0f64;
    for bits in [4u8, 8] {
        let max = f64::from((1u16 << bits) - 1);
        for _ in 0..1_000_000 {
            let t: f64 = rng.random_range(0.0..1.0);
            let back = f64::from(quantize_unit(t, bits)) / max;
            worst_q = worst_q.max((back - t).abs() * max);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let mut w = ShardSetWriter::new(dir.path()).unwrap();
    let mut written = Vec::new();
    for i in 0..24 {
        let window = Window::ALL[i % 4];
        let (bits, modality) = match window {
            Window::Mr => (8, Modality::SynthMr),
            Window::CtBrain => (8, Modality::SynthCt),
            _ => (4, Modality::SynthCt),
        };
        let shape = [rng.random_range(1..6), rng.random_range(1..20), rng.random_range(1..20)];
        let n: usize = shape.iter().product();
        let pv = PreprocVolume {
            codes: Grid3::new(shape, (0..n).map(|_| rng.random_range(0..1u16 << bits) as u8).collect()).unwrap(),
            window,
            modality,
            bit_width: bits,
            foreground: Grid3::new(shape, (0..n).map(|_| rng.random_bool(0.5)).collect()).unwrap(),
            dequant_scale: 1.0 / f64::from((1u16 << bits) - 1),
            dequant_offset: 0.0,
        };
        let meta = EntryMeta {
            study_id: format!("s{i}"),
            volume_id: format!("v{i}"),
            group: format!("g{i}"),
            labels: BTreeMap::new(),
        };
        w.append(if i % 3 == 0 { "val" } else { "train" }, &pv, &meta).unwrap();
        written.push(pv);
    }
    let path = dir.path().join("manifest.json");
    w.finalize().unwrap().save(&path).unwrap();
    let reader = ShardReader::open(&path).unwrap();
    for (i, e) in reader.entries().iter().enumerate() {
        let k: usize = e.volume_id[1..].parse().unwrap();
        if reader.read_volume(i).unwrap().to_preproc() != written[k] {
            return Err(format!("shard entry {} is not bit-exact", e.volume_id));
        }
    }
    ensure(
        worst_q <= 0.5 + 1e-9,
        format!("1000 AUROC and 300 Otsu instances exact; quantization worst {worst_q:.4} steps over 2e6 values; 24 shard volumes bit-exact"),
    )
}

fn c8_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let pts: Vec<ScalingPoint> = (0..40)
        .map(|i| {
            let n = 30 + rng.random_range(0..5000usize);
            ScalingPoint {
                class: format!("c{i}"),
                n_pos: n,
                n_test_pos: 15,
                f1: 0.08 * (n as f64).log10() + 0.2 + noise.sample(&mut rng),
            }
        })
        .collect();
    let slope = fit_label_scaling(&pts).map_err(|e| e.to_string())?.slope;

    // Shared slope 0.1, B's intercept 0.1 lower: B needs 10x the positives.
    let noise_eq = Normal::new(0.0, 0.01).unwrap();
    let mut line = |intercept: f64| -> Vec<ScalingPoint> {
        (0..40)
            .map(|i| {
                let n = 30 + rng.random_range(0..5000usize);
                ScalingPoint {
                    class: format!("c{i}"),
                    n_pos: n,
                    n_test_pos: 20,
                    f1: 0.1 * (n as f64).log10() + intercept + noise_eq.sample(&mut rng),
                }
            })
            .collect()
    };
    let (la, lb) = (line(0.4), line(0.3));
    let eq = data_equivalence(&la, &lb, 1000, 8).map_err(|e| e.to_string())?;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let (a, b) = (2.0, 0.5);
    let scores: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
    let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.random::<f64>() < sigmoid(a * s + b))).collect();
    let fit = platt_calibrate(&ScoredSet::unnamed(scores.clone(), labels).unwrap()).map_err(|e| e.to_string())?;
    let slope_err = (fit.a - a).abs() / a;
    let prob_err = scores.iter().map(|&s| (fit.apply(s) - sigmoid(a * s + b)).abs()).fold(0.0, f64::max);
    ensure(
        (slope - 0.08).abs() <= 0.25 * 0.08
            && eq.ci.lo <= 10.0
            && 10.0 <= eq.ci.hi
            && fit.converged
            && slope_err <= 0.05
            && prob_err <= 0.05,
        format!(
            "slope {slope:.4} (true 0.08); equivalence factor {:.2} CI [{:.2}, {:.2}]; Platt a {:.3} b {:.3}, slope rel err {slope_err:.3}, max prob err {prob_err:.3}",
            eq.factor, eq.ci.lo, eq.ci.hi, fit.a, fit.b
        ),
    )
}

fn files(dir: &Path, base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else if p.file_name().unwrap() != RUN_MANIFEST {
            out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
}

fn c11_determinism(root: &Path) -> Check {
    let c = common::tiny_config(99);
    let (a, b) = (root.join("a"), root.join("b"));
    for r in [&a, &b] {
        let ctx = Ctx::new(c.clone(), r.clone()).map_err(|e| e.to_string())?;
        stage(&ctx, &common::PIPELINE)?;
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    files(&a, &a, &mut fa);
    files(&b, &b, &mut fb);
    if fa.keys().ne(fb.keys()) {
        return Err("runs wrote different file sets".into());
    }
    let differ: Vec<String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(
        differ.is_empty(),
        format!("{} subcommands x 2 runs: {} files compared, {} differ {:?}", common::PIPELINE.len(), fa.len(), differ.len(), differ),
    )
}

// ---------------------------------------------------------------------------

struct Line {
    id: usize,
    name: &'static str,
    result: Check,
    secs: f64,
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let t = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    };
    let line = Line {
        id,
        name,
        result,
        secs: t.elapsed().as_secs_f64(),
    };
    let (tag, detail) = match &line.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {:>2} {:<28} {detail} ({:.1}s)", line.id, line.name, line.secs);
    line
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).is_test(true).try_init();
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = vec![
        run(1, "gradient correctness", c1_gradients),
        run(2, "masking statistics", c2_masking),
        run(3, "stop-gradient and EMA", c3_ema),
        run(4, "training and anti-collapse", || c4_training(&tmp.path().join("train"))),
    ];

    let t = Instant::now();
    let ctx = Ctx::new(pipeline_config(), tmp.path().join("pipeline")).unwrap();
    let built = stage(
        &ctx,
        &[
            Command::PhantomGen,
            Command::Preprocess,
            Command::ShardPack,
            Command::Pretrain,
            Command::ProbeTrain,
            Command::Evaluate,
            Command::Recon,
        ],
    );
    println!("       pipeline for criteria 5, 6, 9, 10 built in {:.1}s", t.elapsed().as_secs_f64());
    let eval = built
        .clone()
        .and_then(|_| MetricReport::read_json(&ctx.report_dir("evaluate").join("metrics.json")).map_err(|e| e.to_string()));
    let with_eval = |f: fn(&MetricReport) -> Check| {
        let e = eval.clone();
        move || e.and_then(|r| f(&r))
    };
    lines.push(run(5, "probe utility", with_eval(c5_probe)));
    lines.push(run(6, "cross-modal transfer", with_eval(c6_transfer)));
    lines.push(run(7, "metric oracles", c7_oracles));
    lines.push(run(8, "statistics recovery", c8_statistics));
    lines.push(run(9, "laterality flip test", with_eval(c9_flip)));
    lines.push(run(10, "kNN reconstruction", || built.clone().and_then(|_| c10_recon(&ctx))));
    lines.push(run(11, "determinism", || c11_determinism(&tmp.path().join("determinism"))));

    let failed: Vec<usize> = lines.iter().filter(|l| l.result.is_err()).map(|l| l.id).collect();
    println!("acceptance: {} passed, {} failed {:?}", lines.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() && std::env::var("VOLJEPA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
