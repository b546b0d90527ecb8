use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voljepa::preprocess::{
    foreground_mask, otsu, otsu_bin, quantize_unit, resample_to, window_quantize, WindowMeans, WindowSpec,
};
use voljepa::volume::{Grid3, Modality, RawVolume, Window};

/// Exhaustive threshold search straight from the voxels: for every candidate
/// bin t, split voxels into bin < t and bin ≥ t and score n0·n1·(μ0−μ1)² as
/// the exact fraction (n1·s0 − n0·s1)² / (n0·n1).
fn brute_force_otsu(values: &[f32]) -> Option<usize> {
    let min = values.iter().fold(f64::INFINITY, |a, &v| a.min(f64::from(v)));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
    if !(max > min) {
        return None;
    }
    let bins: Vec<u64> = values
        .iter()
        .map(|&v| otsu_bin(f64::from(v), min, max) as u64)
        .collect();
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 1..256u64 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
        for &b in &bins {
            if b < t {
                n0 += 1;
                s0 += u128::from(b);
            } else {
                n1 += 1;
                s1 += u128::from(b);
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n1 * s0).abs_diff(n0 * s1);
        let (num, den) = (d * d, n0 * n1);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t as usize, num, den));
        }
    }
    best.map(|b| b.0)
}

fn mr_volume(shape: [usize; 3], data: Vec<f32>) -> RawVolume {
    RawVolume {
        voxels: Grid3::new(shape, data).unwrap(),
        spacing_mm: [4.0, 1.0, 1.0],
        modality: Modality::SynthMr,
        acquisition_axis: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn otsu_equals_exhaustive_search(seed in any::<u64>(), n in 2usize..1500, modes in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f32> = (0..modes).map(|_| rng.random_range(-500.0..500.0)).collect();
        let values: Vec<f32> = (0..n)
            .map(|_| centers[rng.random_range(0..modes)] + rng.random_range(-40.0f32..40.0))
            .collect();
        let fast = otsu(&values).map(|o| o.bin);
        prop_assert_eq!(fast, brute_force_otsu(&values));
    }

    #[test]
    fn quantization_is_monotone(a in -3000.0f64..3000.0, b in -3000.0f64..3000.0) {
        for w in Window::CT {
            let spec = w.ct_spec().unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.quantize(lo) <= spec.quantize(hi));
        }
    }

    #[test]
    fn linear_fields_survive_resampling(
        seed in any::<u64>(),
        sx in 0.5f64..3.0, sy in 0.5f64..3.0, sz in 1.0f64..8.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c, d) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-5.0..5.0),
        );
        let spacing = [sz, sy, sx];
        let f = |p: [f64; 3]| a * p[0] + b * p[1] + c * p[2] + d;
        let shape = [6, 9, 11];
        let v = RawVolume {
            voxels: Grid3::from_fn(shape, |z, y, x| {
                f([(z as f64 + 0.5) * sz, (y as f64 + 0.5) * sy, (x as f64 + 0.5) * sx]) as f32
            }),
            spacing_mm: spacing,
            modality: Modality::SynthCt,
            acquisition_axis: 0,
        };
        let target = [4.0, 1.0, 1.0];
        let r = resample_to(&v, target);
        let out = r.shape();
        let extent = [0, 1, 2].map(|k| shape[k] as f64 * spacing[k]);
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let p = [(z as f64 + 0.5) * 4.0, y as f64 + 0.5, x as f64 + 0.5];
                    // Interior only: every coordinate at least one input voxel center from the edge.
                    let interior = (0..3).all(|k| p[k] >= spacing[k] * 0.5 && p[k] <= extent[k] - spacing[k] * 0.5);
                    if interior {
                        let got = f64::from(r.voxels.get(z, y, x));
                        // f32 storage bounds the achievable precision.
                        let tol = 1e-6_f64.max(f64::from(f32::EPSILON) * 4.0 * got.abs().max(1.0));
                        prop_assert!((got - f(p)).abs() <= tol, "{got} vs {}", f(p));
                    }
                }
            }
        }
    }
}

#[test]
fn quantization_round_trip_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for bits in [4u8, 8] {
        let max = f64::from((1u16 << bits) - 1);
        for _ in 0..1_000_000 {
            let t: f64 = rng.random_range(-0.2..1.2);
            let code = quantize_unit(t, bits);
            let back = f64::from(code) / max;
            assert!((back - t.clamp(0.0, 1.0)).abs() <= 0.5 / max + 1e-12, "t={t} bits={bits}");
        }
    }
}

#[test]
fn training_mean_matches_two_pass_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vols: Vec<_> = (0..6)
        .map(|i| {
            let data: Vec<f32> = (0..4 * 8 * 8)
                .map(|_| if rng.random_bool(0.4) { -1000.0 } else { rng.random_range(-50.0..150.0) })
                .collect();
            let v = RawVolume {
                voxels: Grid3::new([4, 8, 8], data).unwrap(),
                spacing_mm: [4.0, 1.0, 1.0],
                modality: Modality::SynthCt,
                acquisition_axis: 0,
            };
            let w = Window::CT[i % 3];
            window_quantize(&v, w, w.ct_spec().unwrap())
        })
        .collect();
    let stats = WindowMeans::compute(&vols);
    for w in Window::CT {
        // Pass 1: count; pass 2: average of dequantized values.
        let n: usize = vols
            .iter()
            .filter(|p| p.window == w)
            .map(|p| p.foreground.count())
            .sum();
        let mut total = 0.0;
        for p in vols.iter().filter(|p| p.window == w) {
            for (&c, &fg) in p.codes.data().iter().zip(p.foreground.data()) {
                if fg {
                    total += p.dequantize(c) / n as f64;
                }
            }
        }
        assert!((stats.get(w).unwrap() - total).abs() < 1e-9);
    }
    assert!(stats.get(Window::Mr).is_err());
}

#[test]
fn mr_foreground_uses_otsu_cut() {
    let data: Vec<f32> = (0..200).map(|i| if i < 100 { 0.0 } else { 200.0 }).collect();
    let v = mr_volume([2, 10, 10], data);
    let m = foreground_mask(&v);
    assert_eq!(m.count(), 100);
    assert!(m.data()[100..].iter().all(|&b| b));
}

#[test]
fn window_spec_validation() {
    assert!(WindowSpec::new(80.0, 40.0, 8).is_ok());
    assert!(WindowSpec::new(-1.0, 40.0, 8).is_err());
}
