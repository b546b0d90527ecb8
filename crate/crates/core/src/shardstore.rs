//! Append-only binary shards with a JSON index, memory-mapped for zero-copy reads.
//!
//! Shard layout (little-endian): a 64-byte header (magic `VJSH`, version u32,
//! payload length u64, zero padding) followed by concatenated entry payloads.
//! An entry payload is the packed codes (4-bit codes two per byte, low nibble
//! first) followed by the foreground bitset (one bit per voxel, LSB first).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use memmap2::Mmap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::WindowMeans;
use crate::seed::{rng_indexed, sub_seed};
use crate::volume::{Grid3, Modality, PreprocVolume, Window};

pub const SHARD_MAGIC: &[u8; 4] = b"VJSH";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: u64 = 64;

pub fn packed_code_len(n_voxels: usize, bit_width: u8) -> usize {
    if bit_width == 4 {
        n_voxels.div_ceil(2)
    } else {
        n_voxels
    }
}

pub fn bitset_len(n_voxels: usize) -> usize {
    n_voxels.div_ceil(8)
}

pub fn payload_len(n_voxels: usize, bit_width: u8) -> usize {
    packed_code_len(n_voxels, bit_width) + bitset_len(n_voxels)
}

pub fn pack_codes(codes: &[u8], bit_width: u8) -> Vec<u8> {
    if bit_width == 8 {
        return codes.to_vec();
    }
    codes
        .chunks(2)
        .map(|c| (c[0] & 0x0f) | (c.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i)))
        .collect()
}

#[inline]
pub fn unpack_code(packed: &[u8], bit_width: u8, i: usize) -> u8 {
    if bit_width == 8 {
        packed[i]
    } else {
        (packed[i / 2] >> ((i % 2) * 4)) & 0x0f
    }
}

#[inline]
pub fn unpack_bit(bits: &[u8], i: usize) -> bool {
    bits[i / 8] >> (i % 8) & 1 == 1
}

/// Study-level metadata attached to every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub study_id: String,
    pub volume_id: String,
    /// Renderings of one phantom share a group.
    #[serde(default)]
    pub group: String,
    pub labels: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub study_id: String,
    pub volume_id: String,
    #[serde(default)]
    pub group: String,
    pub shard: usize,
    pub window: Window,
    pub modality: Modality,
    pub shape: [usize; 3],
    pub bit_width: u8,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
    pub dequant_scale: f64,
    pub dequant_offset: f64,
    pub labels: BTreeMap<String, u8>,
}

impl ShardEntry {
    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: String,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub shards: Vec<ShardFile>,
    pub entries: Vec<ShardEntry>,
    #[serde(default)]
    pub window_means: Option<WindowMeans>,
}

impl ShardManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Single-writer shard file.
pub struct ShardWriter {
    path: PathBuf,
    rel_path: String,
    split: String,
    index: usize,
    out: BufWriter<File>,
    offset: u64,
    payload_crc: crc32fast::Hasher,
    entries: Vec<ShardEntry>,
}

impl ShardWriter {
    pub fn create(dir: &Path, rel_path: &str, split: &str, index: usize) -> Result<Self> {
        let path = dir.join(rel_path);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&[0u8; SHARD_HEADER_LEN as usize])
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            rel_path: rel_path.to_string(),
            split: split.to_string(),
            index,
            out,
            offset: SHARD_HEADER_LEN,
            payload_crc: crc32fast::Hasher::new(),
            entries: Vec::new(),
        })
    }

    pub fn append_volume(&mut self, pv: &PreprocVolume, meta: &EntryMeta) -> Result<ShardEntry> {
        pv.validate()?;
        let mut payload = pack_codes(pv.codes.data(), pv.bit_width);
        payload.extend(pack_bits(pv.foreground.data()));
        self.out
            .write_all(&payload)
            .map_err(|e| Error::io(&self.path, e))?;
        self.payload_crc.update(&payload);
        let entry = ShardEntry {
            study_id: meta.study_id.clone(),
            volume_id: meta.volume_id.clone(),
            group: meta.group.clone(),
            shard: self.index,
            window: pv.window,
            modality: pv.modality,
            shape: pv.codes.shape(),
            bit_width: pv.bit_width,
            offset: self.offset,
            length: payload.len() as u64,
            crc32: crc32fast::hash(&payload),
            dequant_scale: pv.dequant_scale,
            dequant_offset: pv.dequant_offset,
            labels: meta.labels.clone(),
        };
        self.offset += payload.len() as u64;
        self.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn finalize(mut self) -> Result<(ShardFile, Vec<ShardEntry>)> {
        let payload = self.offset - SHARD_HEADER_LEN;
        let mut header = [0u8; SHARD_HEADER_LEN as usize];
        header[..4].copy_from_slice(SHARD_MAGIC);
        header[4..8].copy_from_slice(&SHARD_VERSION.to_le_bytes());
        header[8..16].copy_from_slice(&payload.to_le_bytes());
        let io = |e| Error::io(&self.path, e);
        self.out.seek(SeekFrom::Start(0)).map_err(io)?;
        self.out.write_all(&header).map_err(io)?;
        self.out.flush().map_err(io)?;
        self.out.get_ref().sync_all().map_err(io)?;
        let mut crc = crc32fast::Hasher::new();
        crc.update(&header);
        crc.combine(&self.payload_crc);
        Ok((
            ShardFile {
                path: self.rel_path,
                split: self.split,
                length: self.offset,
                crc32: crc.finalize(),
            },
            self.entries,
        ))
    }
}

/// Writes one shard per split into `dir` and returns the manifest.
pub struct ShardSetWriter {
    dir: PathBuf,
    writers: BTreeMap<String, ShardWriter>,
    order: Vec<String>,
}

impl ShardSetWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            writers: BTreeMap::new(),
            order: Vec::new(),
        })
    }

    pub fn append(&mut self, split: &str, pv: &PreprocVolume, meta: &EntryMeta) -> Result<ShardEntry> {
        if !self.writers.contains_key(split) {
            let idx = self.order.len();
            let w = ShardWriter::create(&self.dir, &format!("{split}.vjsh"), split, idx)?;
            self.writers.insert(split.to_string(), w);
            self.order.push(split.to_string());
        }
        self.writers
            .get_mut(split)
            .expect("just inserted")
            .append_volume(pv, meta)
    }

    pub fn finalize(mut self) -> Result<ShardManifest> {
        let mut manifest = ShardManifest {
            version: SHARD_VERSION,
            ..Default::default()
        };
        for split in &self.order {
            let w = self.writers.remove(split).expect("writer");
            let (file, entries) = w.finalize()?;
            manifest.shards.push(file);
            manifest.entries.extend(entries);
        }
        Ok(manifest)
    }
}

/// Byte storage behind a shard; lets tests observe which ranges are read.
pub trait ByteSource: Send + Sync {
    fn len(&self) -> u64;
    fn bytes(&self, offset: u64, len: u64) -> &[u8];
}

pub struct MmapSource(Mmap);

impl ByteSource for MmapSource {
    fn len(&self) -> u64 {
        self.0.len() as u64
    }
    fn bytes(&self, offset: u64, len: u64) -> &[u8] {
        &self.0[offset as usize..(offset + len) as usize]
    }
}

impl ByteSource for Vec<u8> {
    fn len(&self) -> u64 {
        self.as_slice().len() as u64
    }
    fn bytes(&self, offset: u64, len: u64) -> &[u8] {
        &self[offset as usize..(offset + len) as usize]
    }
}

/// Wraps a source and records every `(offset, len)` requested.
pub struct LoggingSource<S> {
    inner: S,
    log: Mutex<Vec<(u64, u64)>>,
}

impl<S: ByteSource> LoggingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn take_log(&self) -> Vec<(u64, u64)> {
        std::mem::take(&mut *self.log.lock().expect("log lock"))
    }
}

impl<S: ByteSource> ByteSource for LoggingSource<S> {
    fn len(&self) -> u64 {
        self.inner.len()
    }
    fn bytes(&self, offset: u64, len: u64) -> &[u8] {
        self.log.lock().expect("log lock").push((offset, len));
        self.inner.bytes(offset, len)
    }
}

impl<S: ByteSource + ?Sized> ByteSource for std::sync::Arc<S> {
    fn len(&self) -> u64 {
        (**self).len()
    }
    fn bytes(&self, offset: u64, len: u64) -> &[u8] {
        (**self).bytes(offset, len)
    }
}

/// Borrowed view of one stored volume; codes are decoded on access.
#[derive(Debug, Clone, Copy)]
pub struct VolumeView<'a> {
    pub entry: &'a ShardEntry,
    codes: &'a [u8],
    bits: &'a [u8],
}

impl<'a> VolumeView<'a> {
    pub fn shape(&self) -> [usize; 3] {
        self.entry.shape
    }

    pub fn n_voxels(&self) -> usize {
        self.entry.n_voxels()
    }

    #[inline]
    pub fn code(&self, i: usize) -> u8 {
        unpack_code(self.codes, self.entry.bit_width, i)
    }

    #[inline]
    pub fn foreground(&self, i: usize) -> bool {
        unpack_bit(self.bits, i)
    }

    #[inline]
    pub fn dequantize(&self, code: u8) -> f64 {
        f64::from(code) * self.entry.dequant_scale + self.entry.dequant_offset
    }

    pub fn raw_payload(&self) -> (&'a [u8], &'a [u8]) {
        (self.codes, self.bits)
    }

    pub fn to_preproc(&self) -> PreprocVolume {
        let n = self.n_voxels();
        let shape = self.shape();
        PreprocVolume {
            codes: Grid3::new(shape, (0..n).map(|i| self.code(i)).collect()).expect("shape"),
            window: self.entry.window,
            modality: self.entry.modality,
            bit_width: self.entry.bit_width,
            foreground: Grid3::new(shape, (0..n).map(|i| self.foreground(i)).collect()).expect("shape"),
            dequant_scale: self.entry.dequant_scale,
            dequant_offset: self.entry.dequant_offset,
        }
    }
}

pub struct ShardReader {
    manifest: ShardManifest,
    sources: Vec<Box<dyn ByteSource>>,
}

impl std::fmt::Debug for ShardReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardReader")
            .field("shards", &self.manifest.shards.len())
            .field("entries", &self.manifest.entries.len())
            .finish()
    }
}

impl ShardReader {
    /// Memory-maps every shard listed in the manifest at `path` and validates it.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = ShardManifest::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut sources: Vec<Box<dyn ByteSource>> = Vec::new();
        for s in &manifest.shards {
            let p = dir.join(&s.path);
            let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
            // SAFETY: shards are immutable after finalize; nothing in this
            // process writes to a file while it is mapped.
            let map = unsafe { Mmap::map(&f) }.map_err(|e| Error::io(&p, e))?;
            sources.push(Box::new(MmapSource(map)));
        }
        Self::from_sources(manifest, sources)
    }

    pub fn from_sources(manifest: ShardManifest, sources: Vec<Box<dyn ByteSource>>) -> Result<Self> {
        let reader = Self { manifest, sources };
        reader.validate()?;
        Ok(reader)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.sources.len() != m.shards.len() {
            return Err(Error::Manifest(format!(
                "{} shard files listed, {} opened",
                m.shards.len(),
                self.sources.len()
            )));
        }
        for (s, src) in m.shards.iter().zip(&self.sources) {
            if src.len() != s.length {
                return Err(Error::Corruption(format!(
                    "shard {}: {} bytes on disk, manifest records {}",
                    s.path,
                    src.len(),
                    s.length
                )));
            }
            if s.length < SHARD_HEADER_LEN {
                return Err(Error::Corruption(format!("shard {}: missing header", s.path)));
            }
            let h = src.bytes(0, SHARD_HEADER_LEN);
            if &h[..4] != SHARD_MAGIC {
                return Err(Error::Corruption(format!("shard {}: bad magic", s.path)));
            }
            let version = u32::from_le_bytes(h[4..8].try_into().expect("4 bytes"));
            if version != SHARD_VERSION {
                return Err(Error::Corruption(format!(
                    "shard {}: unsupported version {version}",
                    s.path
                )));
            }
            let payload = u64::from_le_bytes(h[8..16].try_into().expect("8 bytes"));
            if payload + SHARD_HEADER_LEN != s.length {
                return Err(Error::Corruption(format!(
                    "shard {}: header declares {payload} payload bytes, file has {}",
                    s.path,
                    s.length - SHARD_HEADER_LEN
                )));
            }
        }
        let mut last_end = vec![SHARD_HEADER_LEN; m.shards.len()];
        for e in &m.entries {
            let name = format!("{}/{}/{}", e.study_id, e.volume_id, e.window.as_str());
            let Some(shard) = m.shards.get(e.shard) else {
                return Err(Error::Manifest(format!("{name}: shard index {} out of range", e.shard)));
            };
            if e.offset < last_end[e.shard] {
                return Err(Error::Manifest(format!(
                    "{name}: offset {} overlaps previous entry ending at {}",
                    e.offset, last_end[e.shard]
                )));
            }
            if e.offset + e.length > shard.length {
                return Err(Error::Manifest(format!(
                    "{name}: range {}+{} exceeds shard length {}",
                    e.offset, e.length, shard.length
                )));
            }
            if e.bit_width != 4 && e.bit_width != 8 {
                return Err(Error::Manifest(format!("{name}: bit width {}", e.bit_width)));
            }
            if e.length != payload_len(e.n_voxels(), e.bit_width) as u64 {
                return Err(Error::Manifest(format!(
                    "{name}: length {} does not match shape {:?} at {} bits",
                    e.length, e.shape, e.bit_width
                )));
            }
            last_end[e.shard] = e.offset + e.length;
            let bytes = self.sources[e.shard].bytes(e.offset, e.length);
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(Error::Corruption(format!("{name}: checksum mismatch")));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[ShardEntry] {
        &self.manifest.entries
    }

    pub fn read_volume(&self, index: usize) -> Result<VolumeView<'_>> {
        let e = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("entry {index} out of range")))?;
        let bytes = self.sources[e.shard].bytes(e.offset, e.length);
        let split = packed_code_len(e.n_voxels(), e.bit_width);
        Ok(VolumeView {
            entry: e,
            codes: &bytes[..split],
            bits: &bytes[split..],
        })
    }

    /// Entries grouped by study, in manifest order, restricted to `split` if given.
    pub fn studies(&self, split: Option<&str>) -> Vec<StudyEntries> {
        let mut order: Vec<StudyEntries> = Vec::new();
        let mut pos: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, e) in self.manifest.entries.iter().enumerate() {
            if let Some(s) = split {
                if self.manifest.shards[e.shard].split != s {
                    continue;
                }
            }
            let k = *pos.entry(e.study_id.as_str()).or_insert_with(|| {
                order.push(StudyEntries {
                    study_id: e.study_id.clone(),
                    modality: e.modality,
                    entries: Vec::new(),
                });
                order.len() - 1
            });
            order[k].entries.push(i);
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyEntries {
    pub study_id: String,
    pub modality: Modality,
    pub entries: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMix {
    /// Uniform over all studies.
    Any,
    /// Slots alternate CT, MR, CT, ... when both are available.
    Alternate,
    CtOnly,
    MrOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Probabilities for CT_BRAIN, CT_BLOOD, CT_BONE.
    pub window_probs: [f64; 3],
    pub modality_mix: ModalityMix,
    pub seed: u64,
    #[serde(default)]
    pub split: Option<String>,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            window_probs: [0.7, 0.15, 0.15],
            modality_mix: ModalityMix::Any,
            seed: 0,
            split: Some("train".into()),
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.window_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.window_probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "window probabilities {:?} must be non-negative and sum to 1",
                self.window_probs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub entry: usize,
    pub window: Window,
    /// Position within the batch; also used to derive per-instance seeds.
    pub slot: usize,
}

fn pick_window(rng: &mut impl rand::Rng, probs: &[f64; 3]) -> Window {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Window::CT[i];
        }
    }
    // Rounding slack: last window with positive probability.
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Window::CT[last]
}

/// Draws one batch; a pure function of `(spec.seed, step)` and the manifest.
pub fn sample_batch(reader: &ShardReader, spec: &BatchSpec, step: u64) -> Result<Vec<BatchItem>> {
    spec.validate()?;
    let studies = reader.studies(spec.split.as_deref());
    let pool = |m: Option<Modality>| -> Vec<&StudyEntries> {
        studies
            .iter()
            .filter(|s| m.is_none_or(|m| s.modality == m))
            .collect()
    };
    let ct = pool(Some(Modality::SynthCt));
    let mr = pool(Some(Modality::SynthMr));
    let all = pool(None);
    if all.is_empty() {
        return Err(Error::Empty(format!(
            "no studies in split {}",
            spec.split.as_deref().unwrap_or("<all>")
        )));
    }
    let mut rng = rng_indexed(sub_seed(spec.seed, "shardstore/batch"), step);
    let mut out = Vec::with_capacity(spec.batch_size);
    for slot in 0..spec.batch_size {
        let candidates = match spec.modality_mix {
            ModalityMix::Any => &all,
            ModalityMix::CtOnly => &ct,
            ModalityMix::MrOnly => &mr,
            ModalityMix::Alternate => {
                let want = if (slot + step as usize).is_multiple_of(2) { &ct } else { &mr };
                if want.is_empty() {
                    &all
                } else {
                    want
                }
            }
        };
        if candidates.is_empty() {
            return Err(Error::Empty(format!(
                "modality mix {:?} has no eligible studies",
                spec.modality_mix
            )));
        }
        let study = candidates[rng.random_range(0..candidates.len())];
        let entries = reader.entries();
        let (entry, window) = match study.modality {
            Modality::SynthMr => (study.entries[0], entries[study.entries[0]].window),
            Modality::SynthCt => {
                let w = pick_window(&mut rng, &spec.window_probs);
                match study.entries.iter().find(|&&i| entries[i].window == w) {
                    Some(&i) => (i, w),
                    None => {
                        warn!(
                            "study {} has no {} volume; resampling from available windows",
                            study.study_id,
                            w.as_str()
                        );
                        let i = study.entries[rng.random_range(0..study.entries.len())];
                        (i, entries[i].window)
                    }
                }
            }
        };
        out.push(BatchItem { entry, window, slot });
    }
    Ok(out)
}
