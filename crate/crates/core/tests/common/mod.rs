#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use voljepa::phantom::{generate_study, PhantomSpec};
use voljepa::preprocess::{preprocess_volume, WindowMeans};
use voljepa::shardstore::{EntryMeta, ShardReader, ShardSetWriter};
use voljepa::volume::Modality;

/// Packs `n` lesion-free phantoms (alternating CT/MR) into a `train` shard
/// under `dir` and returns a reader over it.
pub fn phantom_shards(dir: &Path, n: u64, shape: [usize; 3]) -> ShardReader {
    let mut w = ShardSetWriter::new(dir).unwrap();
    let mut all = Vec::new();
    for i in 0..n {
        let modality = if i % 2 == 0 { Modality::SynthCt } else { Modality::SynthMr };
        let spec = PhantomSpec::new(1000 + i, shape, [2.0, 1.0, 1.0], modality);
        let st = generate_study(&spec).unwrap();
        for pv in preprocess_volume(&st.volumes[0]).unwrap() {
            let meta = EntryMeta {
                study_id: format!("s{i:05}"),
                volume_id: format!("s{i:05}_{}", pv.window.as_str()),
                group: format!("p{i:05}"),
                labels: BTreeMap::new(),
            };
            w.append("train", &pv, &meta).unwrap();
            all.push(pv);
        }
    }
    let mut manifest = w.finalize().unwrap();
    manifest.window_means = Some(WindowMeans::compute(&all));
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    ShardReader::open(&path).unwrap()
}
