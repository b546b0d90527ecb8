//! One function per subcommand. Each reads its inputs from the run root,
//! writes into a staging directory and promotes it on success.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voljepa::evalstats::{
    auprc, auroc, bootstrap_ci, cross_modal_delta, f1_at, laterality_flip_auroc, select_threshold, sensitivity,
    specificity, EquivalenceResult, FlipRecord, MetricReport, MetricRow, ScoredSet, EQUIVALENCE_BAND,
};
use voljepa::latentlab::{
    build_databank, cluster_volume, dense_embeddings, knn_reconstruct, match_volumes, summarize_matches,
    target_mae, token_regions, write_match_csv, MatchSummary, PatchDatabank,
};
use voljepa::model::{encode, load_normalized, save_outcome, train, VjepaModel};
use voljepa::phantom::{
    build_corpus, label, labels_to_volume, prevalence_table, read_manifest, read_volume, resolve, tissue,
    write_manifest, write_volume, LesionKind, Side, StudyRecord, LABELS,
};
use voljepa::preprocess::{preprocess_volume, resample_nearest, target_spacing, WindowMeans, WindowMeansAcc};
use voljepa::probe::{
    attention_heatmap, build_bag, build_bag_with, class_weights, export_heatmap, flip_deltas, pointing_baseline,
    pointing_game, probe_train, AttentiveProbe, BagPrediction, EpochRecord, StudyBag,
};
use voljepa::seed::sub_seed;
use voljepa::shardstore::{EntryMeta, ShardReader, ShardSetWriter, StudyEntries};
use voljepa::tokenmask::{patchify, sample_mask_plan, MaskScheme};
use voljepa::volume::{Grid3, Modality, RawVolume, Window};

use crate::config::DatabankSource;
use crate::error::{CliError, Result};
use crate::run::{read_json, write_json, Ctx, Staging};

pub const CORPUS_MANIFEST: &str = "manifest.json";
pub const SHARD_MANIFEST: &str = "manifest.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PROBE_FILE: &str = "probe.bin";

/// Records read and preprocessed together; bounds peak memory.
const PREPROCESS_CHUNK: usize = 32;

/// Classes whose positives carry a voxel lesion mask for the pointing game.
const LESION_CLASSES: [usize; 6] = [
    label::HYPER_LEFT,
    label::HYPER_RIGHT,
    label::HYPO_LEFT,
    label::HYPO_RIGHT,
    label::MIDLINE_LESION,
    label::ANY_LESION,
];

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

// ---------------------------------------------------------------------------
// Shared loaders

pub fn open_shards(dir: &Path, ctx: &Ctx) -> Result<(ShardReader, PathBuf)> {
    let path = dir.join(SHARD_MANIFEST);
    ctx.require(&path)?;
    Ok((ShardReader::open(&path)?, path))
}

fn means_of(reader: &ShardReader) -> Result<WindowMeans> {
    reader
        .manifest()
        .window_means
        .clone()
        .ok_or_else(|| data_err("shard manifest has no window means; run shard-pack"))
}

pub fn load_model(ctx: &Ctx) -> Result<(VjepaModel, PathBuf)> {
    let dir = ctx.pretrain_dir().join("model");
    ctx.require(&dir)?;
    Ok((VjepaModel::load(&dir)?, dir))
}

pub fn load_probe(ctx: &Ctx) -> Result<(AttentiveProbe, PathBuf)> {
    let path = ctx.probe_dir().join(PROBE_FILE);
    ctx.require(&path)?;
    Ok((AttentiveProbe::load(&path)?, path))
}

pub fn load_records(ctx: &Ctx) -> Result<(BTreeMap<String, StudyRecord>, PathBuf)> {
    let path = ctx.corpus_dir().join(CORPUS_MANIFEST);
    ctx.require(&path)?;
    let records = read_manifest(&path)?;
    Ok((records.into_iter().map(|r| (r.study_id.clone(), r)).collect(), path))
}

/// Corpus grid resampled onto the preprocessed lattice.
fn corpus_grid(corpus: &Path, rel: &str) -> Result<Grid3<f32>> {
    let raw = read_volume(&resolve(corpus, rel))?;
    Ok(resample_nearest(&raw.voxels, raw.spacing_mm, target_spacing(raw.acquisition_axis)))
}

fn tissue_grid(corpus: &Path, rec: &StudyRecord) -> Result<Grid3<u8>> {
    let rel = rec
        .tissue_path
        .as_deref()
        .ok_or_else(|| data_err(format!("{}: corpus record has no tissue mask", rec.study_id)))?;
    Ok(corpus_grid(corpus, rel)?.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn record<'a>(records: &'a BTreeMap<String, StudyRecord>, study_id: &str) -> Result<&'a StudyRecord> {
    records
        .get(study_id)
        .ok_or_else(|| data_err(format!("study {study_id} missing from corpus manifest")))
}

fn studies(reader: &ShardReader, split: &str, modality: Option<Modality>) -> Vec<StudyEntries> {
    reader
        .studies(Some(split))
        .into_iter()
        .filter(|s| modality.is_none_or(|m| s.modality == m))
        .collect()
}

fn bags(
    reader: &ShardReader,
    model: &VjepaModel,
    means: &WindowMeans,
    classes: &[String],
    studies: &[StudyEntries],
) -> Result<Vec<StudyBag>> {
    Ok(studies
        .par_iter()
        .map(|s| build_bag(reader, s, &model.teacher, &model.config.encoder, means, classes, false))
        .collect::<voljepa::Result<_>>()?)
}

fn group_of(reader: &ShardReader, study: &StudyEntries) -> String {
    reader.entries()[study.entries[0]].group.clone()
}

fn first_entry_with(reader: &ShardReader, study: &StudyEntries, window: Window) -> Option<usize> {
    study.entries.iter().copied().find(|&e| reader.entries()[e].window == window)
}

fn save_report(report: &MetricReport, dir: &Path) -> Result<()> {
    report.write_json(&dir.join(METRICS_JSON))?;
    report.write_csv(&dir.join(METRICS_CSV))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data preparation

pub fn phantom_gen(ctx: &Ctx) -> Result<PathBuf> {
    let st = Staging::new(&ctx.corpus_dir())?;
    let p = &ctx.config.phantom;
    let records = build_corpus(p.n_studies, &p.corpus, st.path())?;
    write_manifest(&st.path().join(CORPUS_MANIFEST), &records)?;
    write_json(&st.path().join("prevalence.json"), &prevalence_table(&records))?;
    info!("rendered {} studies from {} phantoms", records.len(), p.n_studies);
    st.commit(ctx, "phantom-gen", &[])
}

fn entry_meta(r: &StudyRecord, window: Window) -> EntryMeta {
    EntryMeta {
        study_id: r.study_id.clone(),
        volume_id: format!("{}_{}", r.study_id, window.as_str()),
        group: format!("p{:05}", r.phantom),
        labels: r.labels.clone(),
    }
}

/// Resample, window and quantize every corpus volume into staging shards.
pub fn preprocess(ctx: &Ctx) -> Result<PathBuf> {
    let corpus = ctx.corpus_dir();
    let man = corpus.join(CORPUS_MANIFEST);
    ctx.require(&man)?;
    let records = read_manifest(&man)?;
    let st = Staging::new(&ctx.preprocessed_dir())?;
    let mut w = ShardSetWriter::new(st.path())?;
    let mut n = 0usize;
    for chunk in records.chunks(PREPROCESS_CHUNK) {
        let done: Vec<Vec<_>> = chunk
            .par_iter()
            .map(|r| {
                let mut out = Vec::new();
                for rel in &r.volume_paths {
                    out.extend(preprocess_volume(&read_volume(&resolve(&corpus, rel))?)?);
                }
                Ok(out)
            })
            .collect::<voljepa::Result<_>>()?;
        for (r, pvs) in chunk.iter().zip(done) {
            for pv in pvs {
                w.append(r.split.as_str(), &pv, &entry_meta(r, pv.window))?;
                n += 1;
            }
        }
    }
    w.finalize()?.save(&st.path().join(SHARD_MANIFEST))?;
    info!("preprocessed {n} volumes");
    st.commit(ctx, "preprocess", &[man])
}

/// Repacks the staging shards and records training-split window means.
pub fn shard_pack(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.preprocessed_dir(), ctx)?;
    let st = Staging::new(&ctx.shards_dir())?;
    let mut w = ShardSetWriter::new(st.path())?;
    let mut acc = WindowMeansAcc::default();
    let mut train_volumes = 0usize;
    for (i, e) in reader.entries().iter().enumerate() {
        let pv = reader.read_volume(i)?.to_preproc();
        let split = reader.manifest().shards[e.shard].split.clone();
        if split == "train" {
            acc.add(&pv);
            train_volumes += 1;
        }
        let meta = EntryMeta {
            study_id: e.study_id.clone(),
            volume_id: e.volume_id.clone(),
            group: e.group.clone(),
            labels: e.labels.clone(),
        };
        w.append(&split, &pv, &meta)?;
    }
    if train_volumes == 0 {
        return Err(data_err("no training volumes to compute window means"));
    }
    let mut m = w.finalize()?;
    m.window_means = Some(acc.finish());
    m.save(&st.path().join(SHARD_MANIFEST))?;
    st.commit(ctx, "shard-pack", &[man])
}

// ---------------------------------------------------------------------------
// Training

pub fn pretrain(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let cfg = &ctx.config.train;
    let every = (cfg.steps / 10).max(1);
    let out = train(&reader, cfg, |m| {
        if m.step % every == 0 || m.step + 1 == cfg.steps {
            info!("step {} loss {:.5} teacher std {:.4}", m.step, m.loss, m.teacher_latent_std);
        }
    })?;
    let st = Staging::new(&ctx.pretrain_dir())?;
    save_outcome(&out, cfg, st.path())?;
    st.commit(ctx, "pretrain", &[man])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHistory {
    pub modality: Option<Modality>,
    pub train_studies: usize,
    pub val_studies: usize,
    pub class_weights: Vec<f64>,
    pub excluded_classes: Vec<String>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

pub fn probe_train_stage(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let (model, model_dir) = load_model(ctx)?;
    let means = means_of(&reader)?;
    let pc = &ctx.config.probe;
    let tr_studies = studies(&reader, "train", pc.modality);
    if tr_studies.is_empty() {
        return Err(data_err("no studies in split 'train' for the probe"));
    }
    let tr = bags(&reader, &model, &means, &pc.classes, &tr_studies)?;
    let va = bags(&reader, &model, &means, &pc.classes, &studies(&reader, "val", pc.modality))?;
    let (weights, excluded) = class_weights(&tr, pc.classes.len())?;
    info!("probe on {} train / {} val bags", tr.len(), va.len());
    let out = probe_train(&tr, &va, pc.classes.clone(), &weights, &pc.params)?;
    let st = Staging::new(&ctx.probe_dir())?;
    out.probe.save(&st.path().join(PROBE_FILE))?;
    let hist = ProbeHistory {
        modality: pc.modality,
        train_studies: tr.len(),
        val_studies: va.len(),
        class_weights: weights,
        excluded_classes: excluded.iter().map(|&k| pc.classes[k].clone()).collect(),
        best_epoch: out.best_epoch,
        epochs: out.history,
    };
    write_json(&st.path().join("history.json"), &hist)?;
    st.commit(ctx, "probe-train", &[man, model_dir])
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingRow {
    pub study_id: String,
    pub class: String,
    pub hit: bool,
    /// Chance that a uniformly random foreground voxel lands in the mask.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub study_id: String,
    pub side: Side,
    pub kind: LesionKind,
    #[serde(flatten)]
    pub record: FlipRecord,
    pub statistic: f64,
    /// Largest logit change over all classes after flipping twice.
    pub double_flip_max_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModal {
    pub class: String,
    pub native: Modality,
    pub transfer: Modality,
    pub pairs: usize,
    pub native_auroc: f64,
    pub transfer_auroc: f64,
    pub result: EquivalenceResult,
}

fn scored(bags: &[&StudyBag], logits: &[&[f64]], k: usize, ids: impl Fn(&StudyBag) -> String) -> Result<ScoredSet> {
    Ok(ScoredSet::new(
        logits.iter().map(|l| l[k]).collect(),
        bags.iter().map(|b| b.labels[k]).collect(),
        bags.iter().map(|b| ids(b)).collect(),
    )?)
}

fn has_both_labels(s: &ScoredSet) -> bool {
    let p = s.positives();
    p > 0 && p < s.len()
}

/// Pushes a metric with a study-level bootstrap CI; a CI that cannot be
/// formed is dropped with a warning rather than failing the run.
fn push_with_ci(
    report: &mut MetricReport,
    name: &str,
    class: &str,
    metric: fn(&ScoredSet) -> voljepa::Result<f64>,
    s: &ScoredSet,
    replicates: usize,
    seed: u64,
) -> Result<()> {
    let value = metric(s)?;
    match bootstrap_ci(metric, s, replicates, sub_seed(seed, &format!("evaluate/{name}/{class}"))) {
        Ok(ci) => report.push(name, class, value, Some(&ci), s.len()),
        Err(voljepa::Error::UnreliableCi { degenerate, replicates }) => {
            warn!("{name}/{class}: CI dropped, {degenerate} of {replicates} replicates degenerate");
            report.push(name, class, value, None, s.len());
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn lateral_lesion(rec: &StudyRecord) -> Option<(LesionKind, Side)> {
    let lateral: Vec<_> = rec.spec.lesion_config.iter().filter(|l| l.side != Side::Midline).collect();
    match lateral.as_slice() {
        [l] => Some((l.kind, l.side)),
        _ => None,
    }
}

fn class_pair(kind: LesionKind) -> (usize, usize) {
    match kind {
        LesionKind::Hyper => (label::HYPER_LEFT, label::HYPER_RIGHT),
        LesionKind::Hypo => (label::HYPO_LEFT, label::HYPO_RIGHT),
    }
}

fn mask_grid(corpus: &Path, rel: &str) -> Result<Grid3<bool>> {
    Ok(corpus_grid(corpus, rel)?.map(|v| v > 0.5))
}

fn foreground_of(reader: &ShardReader, entry: usize) -> Result<Grid3<bool>> {
    Ok(reader.read_volume(entry)?.to_preproc().foreground)
}

pub fn evaluate(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let (model, model_dir) = load_model(ctx)?;
    let (probe, probe_path) = load_probe(ctx)?;
    let (records, corpus_man) = load_records(ctx)?;
    let corpus = ctx.corpus_dir();
    let means = means_of(&reader)?;
    let ec = &ctx.config.eval;
    let seed = sub_seed(ctx.config.seed, "evaluate");
    let classes = probe.classes().to_vec();
    let native = ctx.config.probe.modality;

    let test_studies = studies(&reader, &ec.split, None);
    if test_studies.is_empty() {
        return Err(data_err(format!("no studies in split '{}'", ec.split)));
    }
    let test = bags(&reader, &model, &means, &classes, &test_studies)?;
    let preds: Vec<BagPrediction> = test.par_iter().map(|b| probe.forward(b)).collect::<voljepa::Result<_>>()?;
    let val = bags(&reader, &model, &means, &classes, &studies(&reader, "val", native))?;
    let val_logits = probe.predict(&val)?;

    let primary: Vec<usize> = (0..test.len()).filter(|&i| native.is_none_or(|m| test[i].modality == m)).collect();
    if primary.is_empty() {
        return Err(data_err(format!("no {:?} studies in split '{}'", native, ec.split)));
    }
    let pick = |idx: &[usize]| -> (Vec<&StudyBag>, Vec<&[f64]>) {
        (idx.iter().map(|&i| &test[i]).collect(), idx.iter().map(|&i| &preds[i].logits[..]).collect())
    };
    let (pb, pl) = pick(&primary);

    let st = Staging::new(&ctx.report_dir("evaluate"))?;
    let mut report = MetricReport::default();
    let ids = |b: &StudyBag| b.study_id.clone();
    for (k, class) in classes.iter().enumerate() {
        let s = scored(&pb, &pl, k, ids)?;
        if !has_both_labels(&s) {
            warn!("{class}: test set lacks positives or negatives, skipped");
            continue;
        }
        push_with_ci(&mut report, "auroc", class, auroc, &s, ec.replicates, seed)?;
        push_with_ci(&mut report, "auprc", class, auprc, &s, ec.replicates, seed)?;
        let vb: Vec<&StudyBag> = val.iter().collect();
        let vl: Vec<&[f64]> = val_logits.iter().map(|l| &l[..]).collect();
        let threshold = match scored(&vb, &vl, k, ids) {
            Ok(v) if has_both_labels(&v) => select_threshold(&v)?,
            _ => 0.0,
        };
        report.push("threshold", class, threshold, None, val.len());
        report.push("sensitivity", class, sensitivity(&s, threshold)?, None, s.len());
        report.push("specificity", class, specificity(&s, threshold)?, None, s.len());
        report.push("f1", class, f1_at(&s, threshold)?, None, s.len());
        for m in [Modality::SynthCt, Modality::SynthMr] {
            let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].modality == m).collect();
            let (mb, ml) = pick(&idx);
            if let Ok(ms) = scored(&mb, &ml, k, ids) {
                if has_both_labels(&ms) {
                    report.push(&format!("auroc[{}]", m.as_str()), class, auroc(&ms)?, None, ms.len());
                }
            }
        }
    }

    let cross = cross_modal(&reader, &test_studies, &test, &preds, &classes, native, ec.replicates, seed)?;
    if let Some(c) = &cross {
        report.push("cross_modal_native_auroc", &c.class, c.native_auroc, None, c.pairs);
        report.push("cross_modal_transfer_auroc", &c.class, c.transfer_auroc, None, c.pairs);
        report.rows.push(MetricRow {
            metric: "cross_modal_delta".into(),
            class: c.class.clone(),
            value: c.result.delta,
            ci_lo: Some(c.result.ci.0),
            ci_hi: Some(c.result.ci.1),
            n: c.pairs,
            replicates: ec.replicates,
            seed,
        });
        write_json(&st.path().join("cross_modal.json"), c)?;
    }

    // Pointing game and heatmaps on the primary modality.
    let mut pointing = Vec::new();
    let mut exported: BTreeMap<String, usize> = BTreeMap::new();
    for &i in &primary {
        let bag = &test[i];
        let rec = record(&records, &bag.study_id)?;
        let fg = foreground_of(&reader, bag.volumes[0].entry)?;
        for &lk in &LESION_CLASSES {
            let name = LABELS[lk];
            let (Some(k), Some(rel)) = (classes.iter().position(|c| c == name), rec.mask_paths.get(name)) else {
                continue;
            };
            if bag.labels[k] != 1 {
                continue;
            }
            let mask = mask_grid(&corpus, rel)?;
            let h = attention_heatmap(&preds[i], bag, k, name)?;
            if h.map.shape() != mask.shape() {
                return Err(data_err(format!("{}: mask {:?} vs heatmap {:?}", bag.study_id, mask.shape(), h.map.shape())));
            }
            let (Some(hit), Some(baseline)) = (pointing_game(&h.map, &mask)?, pointing_baseline(&mask, &fg)) else {
                continue;
            };
            pointing.push(PointingRow {
                study_id: bag.study_id.clone(),
                class: name.to_string(),
                hit,
                baseline,
            });
            let n = exported.entry(name.to_string()).or_default();
            if *n < ec.heatmaps_per_class {
                export_heatmap(&h, &st.path().join("heatmaps").join(name).join(&bag.study_id))?;
                *n += 1;
            }
        }
    }
    let mut by_class: BTreeMap<&str, Vec<&PointingRow>> = BTreeMap::new();
    for r in &pointing {
        by_class.entry(r.class.as_str()).or_default().push(r);
    }
    let pooled: Vec<&PointingRow> = pointing.iter().filter(|r| r.class != LABELS[label::ANY_LESION]).collect();
    for (class, rows) in by_class.into_iter().chain([("lesion-classes", pooled)]) {
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let acc = rows.iter().filter(|r| r.hit).count() as f64 / n;
        let base = rows.iter().map(|r| r.baseline).sum::<f64>() / n;
        report.push("pointing_accuracy", class, acc, None, rows.len());
        report.push("pointing_baseline", class, base, None, rows.len());
    }
    write_json(&st.path().join("pointing.json"), &pointing)?;

    let flips = flip_test(&reader, &model, &means, &probe, &records, &test_studies, &test, &preds, &primary)?;
    if !flips.is_empty() {
        let recs: Vec<FlipRecord> = flips.iter().map(|f| f.record).collect();
        match laterality_flip_auroc(&recs) {
            Ok(a) => report.push("flip_auroc", "laterality", a, None, recs.len()),
            Err(e) => warn!("flip AUROC undefined: {e}"),
        }
        let worst = flips.iter().map(|f| f.double_flip_max_abs_delta).fold(0.0, f64::max);
        report.push("double_flip_max_abs_delta", "laterality", worst, None, flips.len());
    }
    write_json(&st.path().join("flips.json"), &flips)?;

    write_predictions(&st.path().join("predictions.csv"), &test, &preds, &classes)?;
    save_report(&report, st.path())?;
    st.commit(ctx, "evaluate", &[man, model_dir, probe_path, corpus_man])
}

#[allow(clippy::too_many_arguments)]
fn cross_modal(
    reader: &ShardReader,
    test_studies: &[StudyEntries],
    test: &[StudyBag],
    preds: &[BagPrediction],
    classes: &[String],
    native: Option<Modality>,
    replicates: usize,
    seed: u64,
) -> Result<Option<CrossModal>> {
    let Some(native) = native else { return Ok(None) };
    let transfer = match native {
        Modality::SynthCt => Modality::SynthMr,
        Modality::SynthMr => Modality::SynthCt,
    };
    let class = LABELS[label::ANY_LESION];
    let Some(k) = classes.iter().position(|c| c == class) else { return Ok(None) };
    let mut by_group: BTreeMap<String, [Option<usize>; 2]> = BTreeMap::new();
    for (i, s) in test_studies.iter().enumerate() {
        let slot = usize::from(s.modality == transfer);
        by_group.entry(group_of(reader, s)).or_default()[slot] = Some(i);
    }
    let pairs: Vec<(String, usize, usize)> = by_group
        .into_iter()
        .filter_map(|(g, [a, b])| Some((g, a?, b?)))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let set = |pick: fn(&(String, usize, usize)) -> usize| -> Result<ScoredSet> {
        Ok(ScoredSet::new(
            pairs.iter().map(|p| preds[pick(p)].logits[k]).collect(),
            pairs.iter().map(|p| test[pick(p)].labels[k]).collect(),
            pairs.iter().map(|p| p.0.clone()).collect(),
        )?)
    };
    let nat = set(|p| p.1)?;
    let tra = set(|p| p.2)?;
    if !has_both_labels(&nat) {
        warn!("cross-modal: paired studies lack positives or negatives");
        return Ok(None);
    }
    let result = cross_modal_delta(&tra, &nat, replicates, sub_seed(seed, "evaluate/cross_modal"), EQUIVALENCE_BAND)?;
    Ok(Some(CrossModal {
        class: class.to_string(),
        native,
        transfer,
        pairs: pairs.len(),
        native_auroc: auroc(&nat)?,
        transfer_auroc: auroc(&tra)?,
        result,
    }))
}

#[allow(clippy::too_many_arguments)]
fn flip_test(
    reader: &ShardReader,
    model: &VjepaModel,
    means: &WindowMeans,
    probe: &AttentiveProbe,
    records: &BTreeMap<String, StudyRecord>,
    test_studies: &[StudyEntries],
    test: &[StudyBag],
    preds: &[BagPrediction],
    primary: &[usize],
) -> Result<Vec<FlipRow>> {
    let classes = probe.classes();
    let pos = |k: usize| classes.iter().position(|c| c == LABELS[k]);
    let mut todo = Vec::new();
    for &i in primary {
        let rec = record(records, &test[i].study_id)?;
        if let Some((kind, side)) = lateral_lesion(rec) {
            let (l, r) = class_pair(kind);
            if let (Some(l), Some(r)) = (pos(l), pos(r)) {
                todo.push((i, kind, side, l, r));
            }
        }
    }
    let enc = &model.teacher;
    let cfg = &model.config.encoder;
    let names = classes.to_vec();
    todo.par_iter()
        .map(|&(i, kind, side, l, r)| {
            let s = &test_studies[i];
            let flipped = build_bag_with(reader, s, enc, cfg, means, &names, |v, f| (v.flip(2), f.flip(2)))?;
            let twice =
                build_bag_with(reader, s, enc, cfg, means, &names, |v, f| (v.flip(2).flip(2), f.flip(2).flip(2)))?;
            let fp = probe.forward(&flipped)?;
            let tp = probe.forward(&twice)?;
            let (delta_l, delta_r) = flip_deltas(&preds[i], &fp, l, r);
            let double = tp
                .logits
                .iter()
                .zip(&preds[i].logits)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok(FlipRow {
                study_id: test[i].study_id.clone(),
                side,
                kind,
                record: FlipRecord {
                    right: side == Side::Right,
                    delta_l,
                    delta_r,
                },
                statistic: voljepa::evalstats::laterality_statistic(delta_l, delta_r),
                double_flip_max_abs_delta: double,
            })
        })
        .collect()
}

fn write_predictions(path: &Path, bags: &[StudyBag], preds: &[BagPrediction], classes: &[String]) -> Result<()> {
    let mut out = String::from("study_id,modality");
    for c in classes {
        out += &format!(",logit_{c},label_{c}");
    }
    out.push('\n');
    for (b, p) in bags.iter().zip(preds) {
        out += &format!("{},{}", b.study_id, b.modality.as_str());
        for (k, _) in classes.iter().enumerate() {
            out += &format!(",{:e},{}", p.logits[k], b.labels[k]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// Latent-space tools

fn volume_file(voxels: Grid3<f32>, modality: Modality) -> RawVolume {
    RawVolume {
        voxels,
        spacing_mm: target_spacing(0),
        modality,
        acquisition_axis: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub volume_id: String,
    pub targets: usize,
    pub k: usize,
    pub mae: f64,
}

pub fn recon(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let (model, model_dir) = load_model(ctx)?;
    let means = means_of(&reader)?;
    let lc = &ctx.config.latent;
    let seed = sub_seed(ctx.config.seed, "recon");
    let chosen: Vec<StudyEntries> = studies(&reader, &lc.split, None).into_iter().take(lc.recon_studies).collect();
    if chosen.is_empty() {
        return Err(data_err(format!("no studies in split '{}'", lc.split)));
    }
    let shared: Option<PatchDatabank> = match lc.databank {
        DatabankSource::SelfVolume => None,
        DatabankSource::Train => {
            let refs = studies(&reader, "train", None)
                .iter()
                .take(lc.reference_volumes)
                .map(|s| {
                    let e = s.entries[0];
                    let (v, f) = load_normalized(&reader, e, &means)?;
                    Ok((reader.entries()[e].volume_id.clone(), patchify(&v, &f)?))
                })
                .collect::<voljepa::Result<Vec<_>>>()?;
            Some(build_databank(&model.teacher, &model.config.encoder, &refs)?)
        }
    };
    let results: Vec<(ReconRow, Grid3<f32>, Modality)> = chosen
        .par_iter()
        .map(|s| {
            let e = s.entries[0];
            let meta = &reader.entries()[e];
            let (vol, fg) = load_normalized(&reader, e, &means)?;
            let grid = patchify(&vol, &fg)?;
            let plan = sample_mask_plan(&grid, MaskScheme::MultiBlockTarget, meta.modality, sub_seed(seed, &meta.volume_id))?;
            let targets: Vec<[usize; 3]> = plan.target_ids.iter().map(|&i| grid.coords[i]).collect();
            let own;
            let bank = match &shared {
                Some(b) => b,
                None => {
                    own = build_databank(&model.teacher, &model.config.encoder, &[(meta.volume_id.clone(), grid.clone())])?;
                    &own
                }
            };
            let r = knn_reconstruct(&model, &vol, &fg, &targets, bank, lc.k)?;
            let mae = target_mae(&r, &vol, &grid)?;
            let row = ReconRow {
                volume_id: meta.volume_id.clone(),
                targets: targets.len(),
                k: r.k,
                mae,
            };
            Ok((row, r.volume, meta.modality))
        })
        .collect::<voljepa::Result<_>>()?;
    let st = Staging::new(&ctx.report_dir("recon"))?;
    let mut report = MetricReport::default();
    let mut rows = Vec::new();
    for (row, vol, modality) in results {
        write_volume(&st.path().join(format!("{}.vpha", row.volume_id)), &volume_file(vol, modality))?;
        report.push("recon_mae", &row.volume_id, row.mae, None, row.targets);
        rows.push(row);
    }
    let mean = rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64;
    report.push("recon_mae_mean", "all", mean, None, rows.len());
    write_json(&st.path().join("recon.json"), &rows)?;
    save_report(&report, st.path())?;
    st.commit(ctx, "recon", &[man, model_dir])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub group: String,
    pub query: String,
    pub candidates: String,
    pub summary: MatchSummary,
}

/// Matches every MR token of a phantom against the CT brain-window tokens
/// of the same phantom.
pub fn match_stage(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let (model, model_dir) = load_model(ctx)?;
    let (records, corpus_man) = load_records(ctx)?;
    let corpus = ctx.corpus_dir();
    let means = means_of(&reader)?;
    let lc = &ctx.config.latent;
    let mut by_group: BTreeMap<String, [Option<StudyEntries>; 2]> = BTreeMap::new();
    for s in studies(&reader, &lc.split, None) {
        let slot = usize::from(s.modality == Modality::SynthCt);
        let g = group_of(&reader, &s);
        by_group.entry(g).or_default()[slot] = Some(s);
    }
    let pairs: Vec<(String, StudyEntries, StudyEntries)> = by_group
        .into_iter()
        .filter_map(|(g, [mr, ct])| Some((g, mr?, ct?)))
        .take(lc.match_pairs)
        .collect();
    if pairs.is_empty() {
        return Err(data_err(format!("no paired CT/MR studies in split '{}'", lc.split)));
    }
    let enc = &model.teacher;
    let cfg = &model.config.encoder;
    let results: Vec<_> = pairs
        .par_iter()
        .map(|(g, mr, ct)| {
            let tissue = tissue_grid(&corpus, record(&records, &ct.study_id)?)?;
            let side = |s: &StudyEntries, w: Window| -> Result<_> {
                let e = first_entry_with(&reader, s, w).ok_or_else(|| data_err(format!("{}: no {w:?} volume", s.study_id)))?;
                let (v, f) = load_normalized(&reader, e, &means)?;
                let grid = patchify(&v, &f)?;
                let z = encode(enc, cfg, &grid)?;
                let regions = token_regions(&grid, &tissue)?;
                Ok((reader.entries()[e].volume_id.clone(), z, regions))
            };
            let (qid, zq, rq) = side(mr, Window::Mr)?;
            let (cid, zc, rc) = side(ct, Window::CtBrain)?;
            let rows = match_volumes(&zq, &zc, &rq, &rc)?;
            let summary = summarize_matches(&rows, zc.len())?;
            Ok((
                MatchPair {
                    group: g.clone(),
                    query: qid,
                    candidates: cid,
                    summary,
                },
                rows,
            ))
        })
        .collect::<Result<_>>()?;
    let st = Staging::new(&ctx.report_dir("match"))?;
    let mut report = MetricReport::default();
    let mut summaries = Vec::new();
    let (mut exact, mut chance, mut region, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (pair, rows) in results {
        write_match_csv(&st.path().join(format!("{}.csv", pair.group)), &rows)?;
        let s = &pair.summary;
        report.push("match_exact_rate", &pair.group, s.exact_rate, None, s.queries);
        report.push("match_chance_rate", &pair.group, s.chance_rate, None, s.queries);
        report.push("match_same_region_rate", &pair.group, s.same_region_rate, None, s.queries);
        let q = s.queries as f64;
        exact += s.exact_rate * q;
        chance += s.chance_rate * q;
        region += s.same_region_rate * q;
        n += s.queries;
        summaries.push(pair);
    }
    let q = n as f64;
    report.push("match_exact_rate", "all", exact / q, None, n);
    report.push("match_chance_rate", "all", chance / q, None, n);
    report.push("match_same_region_rate", "all", region / q, None, n);
    write_json(&st.path().join("match.json"), &summaries)?;
    save_report(&report, st.path())?;
    st.commit(ctx, "match", &[man, model_dir, corpus_man])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub volume_id: String,
    pub k: usize,
    pub iou: Vec<f64>,
    pub parenchyma_cluster: usize,
    pub objective: Vec<f64>,
}

pub fn cluster(ctx: &Ctx) -> Result<PathBuf> {
    let (reader, man) = open_shards(&ctx.shards_dir(), ctx)?;
    let (model, model_dir) = load_model(ctx)?;
    let (records, corpus_man) = load_records(ctx)?;
    let corpus = ctx.corpus_dir();
    let means = means_of(&reader)?;
    let lc = &ctx.config.latent;
    let seed = sub_seed(ctx.config.seed, "cluster");
    let chosen: Vec<StudyEntries> = studies(&reader, &lc.split, None).into_iter().take(lc.cluster_studies).collect();
    if chosen.is_empty() {
        return Err(data_err(format!("no studies in split '{}'", lc.split)));
    }
    let results: Vec<(ClusterRow, Grid3<u8>, Modality)> = chosen
        .par_iter()
        .map(|s| {
            let e = s.entries[0];
            let meta = &reader.entries()[e];
            let (vol, fg) = load_normalized(&reader, e, &means)?;
            let brain = tissue_grid(&corpus, record(&records, &s.study_id)?)?.map(|t| t == tissue::BRAIN);
            let windows = dense_embeddings(&model.teacher, &model.config.encoder, &vol, &fg)?;
            let map = cluster_volume(&windows, &fg, &brain, lc.clusters, sub_seed(seed, &meta.volume_id))?;
            let row = ClusterRow {
                volume_id: meta.volume_id.clone(),
                k: map.k,
                iou: map.iou,
                parenchyma_cluster: map.parenchyma_cluster,
                objective: map.objective,
            };
            Ok((row, map.labels, meta.modality))
        })
        .collect::<Result<_>>()?;
    let st = Staging::new(&ctx.report_dir("cluster"))?;
    let mut report = MetricReport::default();
    let mut rows = Vec::new();
    for (row, labels, modality) in results {
        let like = volume_file(Grid3::filled(labels.shape(), 0.0), modality);
        write_volume(&st.path().join(format!("{}_clusters.vpha", row.volume_id)), &labels_to_volume(&labels, &like))?;
        report.push("parenchyma_iou", &row.volume_id, row.iou[row.parenchyma_cluster], None, 1);
        rows.push(row);
    }
    write_json(&st.path().join("cluster.json"), &rows)?;
    save_report(&report, st.path())?;
    st.commit(ctx, "cluster", &[man, model_dir, corpus_man])
}

// ---------------------------------------------------------------------------
// Report

pub const REPORT_SOURCES: [&str; 4] = ["evaluate", "recon", "match", "cluster"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub metric: String,
    pub class: String,
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst).map_err(|e| CliError::io(dst, e))?;
    let mut entries: Vec<_> = fs::read_dir(src)
        .map_err(|e| CliError::io(src, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(src, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let (s, d) = (e.path(), dst.join(e.file_name()));
        if s.is_dir() {
            copy_tree(&s, &d)?;
        } else {
            fs::copy(&s, &d).map_err(|err| CliError::io(&s, err))?;
        }
    }
    Ok(())
}

pub fn report(ctx: &Ctx) -> Result<PathBuf> {
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    for src in REPORT_SOURCES {
        let path = ctx.report_dir(src).join(METRICS_JSON);
        if !path.exists() {
            continue;
        }
        for r in MetricReport::read_json(&path)?.rows {
            rows.push(SummaryRow {
                source: src.to_string(),
                metric: r.metric,
                class: r.class,
                value: r.value,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                n: r.n,
                replicates: r.replicates,
                seed: r.seed,
            });
        }
        inputs.push(path);
    }
    if inputs.is_empty() {
        return Err(data_err("no stage metrics to report; run evaluate, recon, match or cluster first"));
    }
    let st = Staging::new(&ctx.report_dir("summary"))?;
    let summary = Summary {
        config_hash: ctx.config_hash.clone(),
        seed: ctx.config.seed,
        rows,
    };
    write_json(&st.path().join("summary.json"), &summary)?;
    let csv_path = st.path().join("summary.csv");
    let io = |e: std::io::Error| CliError::io(&csv_path, e);
    let mut w = csv_writer(&csv_path)?;
    for r in &summary.rows {
        w.serialize(r).map_err(|e| io(std::io::Error::other(e)))?;
    }
    w.flush().map_err(io)?;
    let maps = ctx.report_dir("evaluate").join("heatmaps");
    if maps.is_dir() {
        copy_tree(&maps, &st.path().join("heatmaps"))?;
    }
    st.commit(ctx, "report", &inputs)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

/// Rows of a stage's metrics file matching `metric` and `class`.
pub fn read_metric(dir: &Path, metric: &str, class: &str) -> Result<Option<MetricRow>> {
    let path = dir.join(METRICS_JSON);
    let rows: Vec<MetricRow> = read_json(&path)?;
    Ok(rows.into_iter().find(|r| r.metric == metric && r.class == class))
}
