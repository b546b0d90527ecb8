//! Resampling, percentile clipping, windowed quantization, foreground masking
//! and mean normalization.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid3, Modality, PreprocVolume, RawVolume, Window};

pub const TARGET_INPLANE_MM: f64 = 1.0;
pub const TARGET_AXIAL_MM: f64 = 4.0;
pub const CT_AIR_THRESHOLD_HU: f64 = -500.0;
pub const MR_CLIP_LO: f64 = 0.5;
pub const MR_CLIP_HI: f64 = 99.5;
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
    pub bit_width: u8,
}

impl WindowSpec {
    pub fn new(width: f64, level: f64, bit_width: u8) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidSpec(format!("window width {width} must be > 0")));
        }
        if bit_width != 4 && bit_width != 8 {
            return Err(Error::InvalidSpec(format!("bit width {bit_width}")));
        }
        Ok(Self {
            width,
            level,
            bit_width,
        })
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bit_width) - 1) as u8
    }

    /// Window position in `[0, 1]` before quantization.
    pub fn unit(&self, value: f64) -> f64 {
        ((value - (self.level - self.width / 2.0)) / self.width).clamp(0.0, 1.0)
    }

    /// Round-half-up quantization of the unit position.
    pub fn quantize(&self, value: f64) -> u8 {
        quantize_unit(self.unit(value), self.bit_width)
    }
}

pub fn quantize_unit(t: f64, bit_width: u8) -> u8 {
    let max = f64::from((1u16 << bit_width) - 1);
    (t.clamp(0.0, 1.0) * max + 0.5).floor().min(max) as u8
}

impl Window {
    /// Fixed CT windows; `None` for MR, whose window comes from the clipped range.
    pub fn ct_spec(self) -> Option<WindowSpec> {
        let (w, l, b) = match self {
            Window::Mr => return None,
            Window::CtBrain => (80.0, 40.0, 8),
            Window::CtBlood => (200.0, 80.0, 4),
            Window::CtBone => (2800.0, 600.0, 4),
        };
        Some(WindowSpec {
            width: w,
            level: l,
            bit_width: b,
        })
    }
}

pub fn target_spacing(acquisition_axis: usize) -> [f64; 3] {
    let mut s = [TARGET_INPLANE_MM; 3];
    s[acquisition_axis.min(2)] = TARGET_AXIAL_MM;
    s
}

pub fn output_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Linear resampling along one axis with clamp-to-edge.
fn resample_axis(src: &Grid3<f64>, axis: usize, n_out: usize, ratio: f64) -> Grid3<f64> {
    let s = src.shape();
    let n_in = s[axis];
    let mut out_shape = s;
    out_shape[axis] = n_out;
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|i| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect();
    Grid3::from_fn(out_shape, |z, y, x| {
        let mut c = [z, y, x];
        let (i0, i1, f) = taps[c[axis]];
        c[axis] = i0;
        let a = src.get(c[0], c[1], c[2]);
        if f == 0.0 {
            return a;
        }
        c[axis] = i1;
        let b = src.get(c[0], c[1], c[2]);
        a + (b - a) * f
    })
}

/// Trilinear resampling to `target` spacing, voxel centers aligned, clamp-to-edge.
pub fn resample_to(v: &RawVolume, target: [f64; 3]) -> RawVolume {
    let out = output_shape(v.shape(), v.spacing_mm, target);
    let mut g = v.voxels.map(f64::from);
    for axis in 0..3 {
        if out[axis] == g.shape()[axis] && (v.spacing_mm[axis] - target[axis]).abs() < 1e-12 {
            continue;
        }
        g = resample_axis(&g, axis, out[axis], target[axis] / v.spacing_mm[axis]);
    }
    RawVolume {
        voxels: g.map(|x| x as f32),
        spacing_mm: target,
        modality: v.modality,
        acquisition_axis: v.acquisition_axis,
    }
}

pub fn resample(v: &RawVolume) -> RawVolume {
    resample_to(v, target_spacing(v.acquisition_axis))
}

/// Nearest-neighbour resampling for label grids: each output voxel takes the
/// input voxel containing its center.
pub fn resample_nearest<T: Copy>(g: &Grid3<T>, spacing: [f64; 3], target: [f64; 3]) -> Grid3<T> {
    let s = g.shape();
    let out = output_shape(s, spacing, target);
    let idx = |a: usize, i: usize| -> usize {
        let p = ((i as f64 + 0.5) * target[a] / spacing[a]).floor() as usize;
        p.min(s[a] - 1)
    };
    let maps: [Vec<usize>; 3] = [0, 1, 2].map(|a| (0..out[a]).map(|i| idx(a, i)).collect());
    Grid3::from_fn(out, |z, y, x| g.get(maps[0][z], maps[1][y], maps[2][x]))
}

/// Percentile of sorted data with linear interpolation at rank `p/100·(n−1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub fn percentiles(values: &[f32], ps: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    sorted.sort_by(f64::total_cmp);
    ps.iter().map(|&p| percentile_sorted(&sorted, p)).collect()
}

pub fn clip_percentile(v: &RawVolume, lo: f64, hi: f64) -> RawVolume {
    let bounds = percentiles(v.voxels.data(), &[lo, hi]);
    let (a, b) = (bounds[0], bounds[1]);
    RawVolume {
        voxels: v.voxels.map(|x| f64::from(x).clamp(a, b) as f32),
        ..v.clone()
    }
}

/// MR window spanning the full range of an already clipped volume.
pub fn mr_window_spec(v: &RawVolume) -> WindowSpec {
    let (lo, hi) = min_max(v.voxels.data());
    let width = hi - lo;
    if width > 0.0 {
        WindowSpec {
            width,
            level: lo + width / 2.0,
            bit_width: 8,
        }
    } else {
        // Constant volume: every voxel maps to code 0.
        WindowSpec {
            width: 1.0,
            level: lo + 0.5,
            bit_width: 8,
        }
    }
}

fn min_max(values: &[f32]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        let x = f64::from(x);
        (lo.min(x), hi.max(x))
    })
}

pub fn otsu_bin(value: f64, min: f64, max: f64) -> usize {
    (((value - min) / (max - min) * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// Exact comparison of `a/b` and `c/d` for positive denominators.
pub(crate) fn cmp_fraction(a: u128, b: u128, c: u128, d: u128) -> Ordering {
    let (qa, ra) = (a / b, a % b);
    let (qc, rc) = (c / d, c % d);
    match qa.cmp(&qc) {
        Ordering::Equal => match (ra == 0, rc == 0) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            // ra/b vs rc/d  ⇔  d/rc vs b/ra
            (false, false) => cmp_fraction(d, rc, b, ra),
        },
        o => o,
    }
}

/// Between-class variance score for class sizes and bin-index sums, as the
/// exact fraction `(n1·s0 − n0·s1)² / (n0·n1)` (proportional to n0·n1·(μ0−μ1)²).
pub(crate) fn between_class_score(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let a = i128::from(n1) * i128::from(s0);
    let b = i128::from(n0) * i128::from(s1);
    let diff = (a - b).unsigned_abs();
    (diff * diff, u128::from(n0) * u128::from(n1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Smallest bin of the upper class.
    pub bin: usize,
    /// Intensity at the lower edge of `bin`.
    pub threshold: f64,
    pub min: f64,
    pub max: f64,
}

/// Otsu threshold over a 256-bin histogram. Candidates are bins `1..=255`;
/// ties resolve to the smallest bin. `None` for a constant input.
pub fn otsu(values: &[f32]) -> Option<OtsuResult> {
    let (min, max) = min_max(values);
    if !(max > min) {
        return None;
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(f64::from(v), min, max)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 1..OTSU_BINS {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (num, den) = between_class_score(n0, s0, n1, s - s0);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => cmp_fraction(num, den, bn, bd) == Ordering::Greater,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (bin, _, _) = best?;
    Some(OtsuResult {
        bin,
        threshold: min + bin as f64 * (max - min) / OTSU_BINS as f64,
        min,
        max,
    })
}

/// Air-removal mask. A constant volume is treated as all foreground.
pub fn foreground_mask(v: &RawVolume) -> Grid3<bool> {
    match v.modality {
        Modality::SynthCt => v.voxels.map(|x| f64::from(x) > CT_AIR_THRESHOLD_HU),
        Modality::SynthMr => match otsu(v.voxels.data()) {
            None => v.voxels.map(|_| true),
            Some(o) => v.voxels.map(|x| otsu_bin(f64::from(x), o.min, o.max) >= o.bin),
        },
    }
}

pub fn window_quantize(v: &RawVolume, window: Window, spec: WindowSpec) -> PreprocVolume {
    let codes = v.voxels.map(|x| spec.quantize(f64::from(x)));
    PreprocVolume {
        codes,
        window,
        modality: v.modality,
        bit_width: spec.bit_width,
        foreground: foreground_mask(v),
        dequant_scale: 1.0 / f64::from(spec.max_code()),
        dequant_offset: 0.0,
    }
}

/// Dequantized codes minus `mean`; background voxels are set to `-mean`.
pub fn normalize(pv: &PreprocVolume, mean: f64) -> Grid3<f32> {
    let data = pv
        .codes
        .data()
        .iter()
        .zip(pv.foreground.data())
        .map(|(&c, &fg)| {
            if fg {
                (pv.dequantize(c) - mean) as f32
            } else {
                (-mean) as f32
            }
        })
        .collect();
    Grid3::new(pv.codes.shape(), data).expect("same shape")
}

/// Per-window mean of dequantized foreground codes, accumulated over the
/// training split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowMeans {
    pub means: BTreeMap<Window, f64>,
    pub counts: BTreeMap<Window, u64>,
}

impl WindowMeans {
    pub fn compute<'a>(volumes: impl IntoIterator<Item = &'a PreprocVolume>) -> Self {
        let mut acc = WindowMeansAcc::default();
        for pv in volumes {
            acc.add(pv);
        }
        acc.finish()
    }

    pub fn get(&self, w: Window) -> Result<f64> {
        self.means
            .get(&w)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("no training mean for window {}", w.as_str())))
    }
}

/// Streaming form of [`WindowMeans::compute`]: integer code sums are exact,
/// scaling happens once in [`WindowMeansAcc::finish`].
#[derive(Debug, Clone, Default)]
pub struct WindowMeansAcc {
    acc: BTreeMap<Window, (u64, u64, f64, f64)>,
}

impl WindowMeansAcc {
    pub fn add(&mut self, pv: &PreprocVolume) {
        let e = self
            .acc
            .entry(pv.window)
            .or_insert((0, 0, pv.dequant_scale, pv.dequant_offset));
        for (&c, &fg) in pv.codes.data().iter().zip(pv.foreground.data()) {
            if fg {
                e.0 += u64::from(c);
                e.1 += 1;
            }
        }
    }

    pub fn finish(self) -> WindowMeans {
        let mut out = WindowMeans::default();
        for (w, (sum, n, scale, offset)) in self.acc {
            if n > 0 {
                out.means.insert(w, sum as f64 / n as f64 * scale + offset);
                out.counts.insert(w, n);
            }
        }
        out
    }
}

/// Full chain for one raw volume: one record per window (three for CT, one for MR).
pub fn preprocess_volume(raw: &RawVolume) -> Result<Vec<PreprocVolume>> {
    raw.validate()?;
    let r = resample(raw);
    Ok(match raw.modality {
        Modality::SynthMr => {
            let clipped = clip_percentile(&r, MR_CLIP_LO, MR_CLIP_HI);
            let spec = mr_window_spec(&clipped);
            vec![window_quantize(&clipped, Window::Mr, spec)]
        }
        Modality::SynthCt => {
            let fg = foreground_mask(&r);
            Window::CT
                .iter()
                .map(|&w| {
                    let spec = w.ct_spec().expect("CT window");
                    let mut pv = window_quantize(&r, w, spec);
                    pv.foreground = fg.clone();
                    pv
                })
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> RawVolume {
        RawVolume {
            voxels: Grid3::from_fn(shape, f),
            spacing_mm: spacing,
            modality: Modality::SynthMr,
            acquisition_axis: 0,
        }
    }

    #[test]
    fn identity_resample() {
        let v = vol([3, 5, 4], [4.0, 1.0, 1.0], |z, y, x| (z * 31 + y * 7 + x) as f32 * 0.37);
        assert_eq!(resample(&v), v);
    }

    #[test]
    fn constant_resample() {
        let v = vol([5, 7, 9], [2.0, 0.7, 1.3], |_, _, _| 3.25);
        let r = resample(&v);
        assert_eq!(r.shape(), [3, 5, 12]);
        assert!(r.voxels.data().iter().all(|&x| x == 3.25));
    }

    #[test]
    fn linear_ramp_matches_analytic() {
        // x spacing 2 mm → 1 mm; value = physical x of the voxel center.
        let v = vol([4, 3, 10], [4.0, 1.0, 2.0], |_, _, x| (x as f32 + 0.5) * 2.0);
        let r = resample(&v);
        assert_eq!(r.shape(), [4, 3, 20]);
        for x in 1..19 {
            let expect = x as f64 + 0.5;
            let got = f64::from(r.voxels.get(1, 1, x));
            assert!((got - expect).abs() < 1e-6, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn single_voxel_axis_falls_back_to_nearest() {
        let v = vol([1, 2, 2], [8.0, 1.0, 1.0], |_, y, x| (y * 2 + x) as f32);
        let r = resample(&v);
        assert_eq!(r.shape(), [2, 2, 2]);
        assert_eq!(r.voxels.get(1, 1, 1), 3.0);
    }

    #[test]
    fn percentile_order_statistic() {
        let v = vol([10, 10, 10], [1.0; 3], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let p = percentiles(v.voxels.data(), &[0.5, 99.5]);
        assert!((p[0] - 4.995).abs() < 1e-9);
        let c = clip_percentile(&v, 0.5, 99.5);
        let max = c.voxels.data().iter().fold(f32::MIN, |a, &b| a.max(b));
        assert!((f64::from(max) - p[1]).abs() < 1e-3);
        let k = vol([2, 2, 2], [1.0; 3], |_, _, _| 7.0);
        assert_eq!(clip_percentile(&k, 0.5, 99.5), k);
    }

    #[test]
    fn window_codes_hand_values() {
        let brain = Window::CtBrain.ct_spec().unwrap();
        assert_eq!(brain.quantize(0.0), 0);
        assert_eq!(brain.quantize(80.0), 255);
        assert_eq!(brain.quantize(40.0), 128);
        let blood = Window::CtBlood.ct_spec().unwrap();
        assert_eq!(blood.quantize(180.0), 15);
        assert_eq!(blood.quantize(-1000.0), 0);
    }

    #[test]
    fn window_width_must_be_positive() {
        assert!(WindowSpec::new(0.0, 10.0, 8).is_err());
        assert!(WindowSpec::new(10.0, 10.0, 5).is_err());
    }

    #[test]
    fn fraction_comparison_is_exact() {
        assert_eq!(cmp_fraction(1, 3, 2, 6), Ordering::Equal);
        assert_eq!(cmp_fraction(1, 3, 1, 4), Ordering::Greater);
        assert_eq!(cmp_fraction(7, 10, 70_000_001, 100_000_000), Ordering::Less);
        assert_eq!(cmp_fraction(u128::MAX - 1, u128::MAX, u128::MAX - 2, u128::MAX - 1), Ordering::Greater);
    }

    #[test]
    fn bimodal_otsu_separates_modes() {
        let v = vol([2, 4, 4], [1.0; 3], |z, _, _| if z == 0 { 0.0 } else { 200.0 });
        let o = otsu(v.voxels.data()).unwrap();
        assert!(o.threshold > 0.0 && o.threshold < 200.0);
        let m = foreground_mask(&v);
        for i in 0..m.len() {
            assert_eq!(m.data()[i], m.coords(i)[0] == 1);
        }
    }

    #[test]
    fn constant_volume_is_all_foreground() {
        let v = vol([2, 2, 2], [1.0; 3], |_, _, _| 5.0);
        assert_eq!(foreground_mask(&v).count(), 8);
    }

    #[test]
    fn ct_mask_keeps_tissue_only() {
        let mut v = vol([2, 3, 3], [1.0; 3], |_, y, _| if y == 0 { -1000.0 } else { 40.0 });
        v.modality = Modality::SynthCt;
        let m = foreground_mask(&v);
        for i in 0..m.len() {
            assert_eq!(m.data()[i], m.coords(i)[1] != 0);
        }
    }

    #[test]
    fn normalize_hand_values() {
        let pv = PreprocVolume {
            codes: Grid3::new([1, 1, 2], vec![255, 10]).unwrap(),
            window: Window::CtBrain,
            modality: Modality::SynthCt,
            bit_width: 8,
            foreground: Grid3::new([1, 1, 2], vec![true, false]).unwrap(),
            dequant_scale: 1.0 / 255.0,
            dequant_offset: 0.0,
        };
        let n = normalize(&pv, 0.5);
        assert_eq!(n.data(), &[0.5, -0.5]);
        let z = normalize(&pv, 0.0);
        assert_eq!(z.data()[0], 1.0);
    }

    #[test]
    fn ct_study_yields_three_windows_with_shared_foreground() {
        use crate::phantom::{generate_study, PhantomSpec};
        let spec = PhantomSpec::new(1, [32, 64, 64], [2.0, 1.0, 1.0], Modality::SynthCt);
        let st = generate_study(&spec).unwrap();
        let pvs = preprocess_volume(&st.volumes[0]).unwrap();
        assert_eq!(pvs.len(), 3);
        assert_eq!(pvs[0].codes.shape(), [16, 64, 64]);
        assert_eq!(pvs[1].bit_width, 4);
        assert!(pvs.iter().all(|p| p.foreground == pvs[0].foreground));
        for p in &pvs {
            p.validate().unwrap();
        }
    }

    #[test]
    fn mr_and_ct_renderings_share_foreground() {
        use crate::phantom::{generate_study, PhantomSpec};
        let mut spec = PhantomSpec::new(2, [32, 64, 64], [2.0, 1.0, 1.0], Modality::SynthCt);
        let ct = preprocess_volume(&generate_study(&spec).unwrap().volumes[0]).unwrap();
        spec.pseudo_modality = Modality::SynthMr;
        let mr = preprocess_volume(&generate_study(&spec).unwrap().volumes[0]).unwrap();
        assert_eq!(ct[0].foreground, mr[0].foreground);
    }
}
