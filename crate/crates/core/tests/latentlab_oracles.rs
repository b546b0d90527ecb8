use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use voljepa::latentlab::*;
use voljepa::model::{encode, LatentSequence, ModelConfig, VjepaModel};
use voljepa::tokenmask::{patchify, PATCH_VOXELS};
use voljepa::volume::Grid3;

fn test_volume(seed: u64) -> (Grid3<f32>, Grid3<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [8, 48, 48];
    let vol = Grid3::from_fn(shape, |z, y, x| {
        let r = ((y as f32 - 24.0).powi(2) + (x as f32 - 24.0).powi(2)).sqrt();
        (if r < 18.0 { 0.5 } else { -0.3 }) + 0.02 * z as f32 + rng.random_range(-0.05..0.05)
    });
    let fg = Grid3::from_fn(shape, |_, y, x| ((y as f32 - 24.0).powi(2) + (x as f32 - 24.0).powi(2)).sqrt() < 22.0);
    (vol, fg)
}

fn model() -> VjepaModel {
    VjepaModel::init(ModelConfig::default(), 3).unwrap()
}

fn random_bank(n: usize, dim: usize, seed: u64) -> (PatchDatabank, LatentSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let side = (n as f64).sqrt().ceil() as usize;
    let coords: Vec<[usize; 3]> = (0..n).map(|i| [0, i / side, i % side]).collect();
    let z = LatentSequence {
        coords: coords.clone(),
        dim,
        data: (0..n * dim).map(|_| normal.sample(&mut rng)).collect(),
    };
    let grid = voljepa::tokenmask::PatchGrid {
        grid_dims: [1, side, side],
        coords,
        payloads: (0..n * PATCH_VOXELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        origin_vox: [0; 3],
        volume_shape: [4, 16 * side, 16 * side],
    };
    (PatchDatabank::from_latents(&[("v".into(), &grid, &z)]).unwrap(), z)
}

#[test]
fn databank_has_one_unit_key_per_token_and_rebuilds_identically() {
    let m = model();
    let (vol, fg) = test_volume(1);
    let grid = patchify(&vol, &fg).unwrap();
    let refs = vec![("a".to_string(), grid.clone())];
    let bank = build_databank(&m.teacher, &m.config.encoder, &refs).unwrap();
    assert_eq!(bank.len(), grid.len());
    for i in 0..bank.len() {
        let n: f64 = bank.key(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(bank.value(i), grid.payload(i));
    }
    assert_eq!(build_databank(&m.teacher, &m.config.encoder, &refs).unwrap(), bank);
    assert!(build_databank(&m.teacher, &m.config.encoder, &[]).is_err());
}

#[test]
fn knn_equals_exhaustive_scan_on_random_queries() {
    let (bank, raw) = random_bank(400, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..1000 {
        let q: Vec<f64> = (0..16).map(|_| normal.sample(&mut rng)).collect();
        let k = rng.random_range(1..12);
        let got = bank.knn(&q, k).unwrap();
        // Independent scan: cosine from unnormalized vectors, full sort.
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut all: Vec<(usize, f64)> = (0..raw.len())
            .map(|i| {
                let r = raw.row(i);
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (i, q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (qn * rn))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let want: Vec<usize> = all[..k].iter().map(|p| p.0).collect();
        assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), want);
        for (g, w) in got.iter().zip(&all) {
            assert!((g.1 - w.1).abs() < 1e-12);
        }
    }
}

#[test]
fn self_key_with_k1_returns_patch_verbatim_and_full_k_returns_mean() {
    let (bank, raw) = random_bank(30, 8, 4);
    let vol = Grid3::filled([4, 96, 96], 0f32);
    let grid = voljepa::tokenmask::PatchGrid {
        grid_dims: [1, 6, 6],
        coords: vec![[0, 2, 3]],
        payloads: vec![0.0; PATCH_VOXELS],
        origin_vox: [0; 3],
        volume_shape: [4, 96, 96],
    };
    let pred = LatentSequence {
        coords: vec![[0, 2, 3]],
        dim: 8,
        data: raw.row(17).iter().map(|v| v * 3.0).collect(),
    };
    let r = reconstruct_from_latents(&vol, &grid, &pred, &bank, 1).unwrap();
    assert_eq!(r.neighbors, vec![vec![17]]);
    let placed: Vec<f32> = (0..4)
        .flat_map(|z| (0..16).flat_map(move |y| (0..16).map(move |x| (z, 32 + y, 48 + x))))
        .map(|(z, y, x)| r.volume.get(z, y, x))
        .collect();
    assert_eq!(placed, bank.value(17));

    let full = reconstruct_from_latents(&vol, &grid, &pred, &bank, 1000).unwrap();
    assert_eq!(full.k, 30);
    for t in [0usize, 511, 1023] {
        let mean = (0..30).map(|i| f64::from(bank.value(i)[t])).sum::<f64>() / 30.0;
        let (z, y, x) = (t / 256, 32 + (t / 16) % 16, 48 + t % 16);
        assert!((f64::from(full.volume.get(z, y, x)) - mean).abs() < 1e-6);
    }
    assert!(reconstruct_from_latents(&vol, &grid, &pred, &bank, 0).is_err());
}

#[test]
fn model_reconstruction_copies_context_through() {
    let m = model();
    let (vol, fg) = test_volume(5);
    let grid = patchify(&vol, &fg).unwrap();
    let refs = vec![("self".to_string(), grid.clone())];
    let bank = build_databank(&m.teacher, &m.config.encoder, &refs).unwrap();
    let targets: Vec<[usize; 3]> = grid.coords.iter().step_by(3).copied().collect();
    let r = knn_reconstruct(&m, &vol, &fg, &targets, &bank, 1).unwrap();
    let mut in_target = Grid3::filled(vol.shape(), false);
    for i in (0..grid.len()).step_by(3) {
        let (lo, hi) = grid.voxel_box(i);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    in_target.set(z, y, x, true);
                }
            }
        }
    }
    for (i, (&a, &b)) in r.volume.data().iter().zip(vol.data()).enumerate() {
        if !in_target.data()[i] {
            assert_eq!(a, b);
        }
    }
    let mae = target_mae(&r, &vol, &grid).unwrap();
    assert!(mae.is_finite());
    assert!(knn_reconstruct(&m, &vol, &fg, &[[99, 0, 0]], &bank, 1).is_err());
}

#[test]
fn match_finds_itself_among_candidates() {
    let m = model();
    let (vol, fg) = test_volume(6);
    let z = encode(&m.teacher, &m.config.encoder, &patchify(&vol, &fg).unwrap()).unwrap();
    for i in (0..z.len()).step_by(5) {
        let got = patch_match(z.row(i), &z).unwrap();
        assert_eq!(got.coord, z.coords[i]);
        assert!((got.similarity - 1.0).abs() < 1e-12);
    }
}

#[test]
fn match_csv_round_trips_and_summary_uses_analytic_chance() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = random_bank(12, 4, 7);
    let regions = vec![2u8; 12];
    let rows = match_volumes(&a, &a, &regions, &regions).unwrap();
    let s = summarize_matches(&rows, a.len()).unwrap();
    assert_eq!(s.exact_rate, 1.0);
    assert_eq!(s.chance_rate, 1.0 / 12.0);
    assert_eq!(s.same_region_rate, 1.0);
    let path = dir.path().join("match.csv");
    write_match_csv(&path, &rows).unwrap();
    assert_eq!(read_match_csv(&path).unwrap(), rows);
}

/// Three tight, far-apart blobs: every point belongs to the blob whose true
/// centre is nearest, and k-means must reproduce that partition.
#[test]
fn kmeans_recovers_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = Normal::new(0.0, 0.3).unwrap();
    let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 5.0], [-4.0, 9.0, -6.0]];
    let mut pts = Vec::new();
    for i in 0..300 {
        let c = centers[(i * 7) % 3];
        pts.extend(c.iter().map(|v| v + normal.sample(&mut rng)));
    }
    let km = kmeans(&pts, 3, 3, 11, 100).unwrap();
    let oracle: Vec<usize> = pts
        .chunks(3)
        .map(|p| {
            (0..3)
                .min_by(|&a, &b| {
                    let d = |c: &[f64; 3]| p.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(&centers[a]).partial_cmp(&d(&centers[b])).unwrap()
                })
                .unwrap()
        })
        .collect();
    // Same partition up to relabelling.
    let mut map = [usize::MAX; 3];
    for (&o, &g) in oracle.iter().zip(&km.assignments) {
        if map[o] == usize::MAX {
            map[o] = g;
        }
        assert_eq!(map[o], g);
    }
    let mut used = map.to_vec();
    used.sort();
    assert_eq!(used, vec![0, 1, 2]);
    assert_eq!(kmeans(&pts, 3, 3, 11, 100).unwrap(), km);
}

#[test]
fn single_cluster_iou_is_reference_over_foreground() {
    let m = model();
    let (vol, _) = test_volume(9);
    let fg = Grid3::filled(vol.shape(), true);
    let brain = Grid3::from_fn(vol.shape(), |_, y, x| (10..30).contains(&y) && (5..40).contains(&x));
    let windows = dense_embeddings(&m.teacher, &m.config.encoder, &vol, &fg).unwrap();
    assert_eq!(windows.len(), 8);
    let map = cluster_volume(&windows, &fg, &brain, 1, 0).unwrap();
    assert!(map.labels.data().iter().all(|&l| l == 0));
    let want = brain.count() as f64 / fg.count() as f64;
    assert!((map.iou[0] - want).abs() < 1e-15);
    assert_eq!(map.parenchyma_cluster, 0);

    let map3 = cluster_volume(&windows, &fg, &brain, 3, 0).unwrap();
    let best = (0..3).max_by(|&a, &b| map3.iou[a].partial_cmp(&map3.iou[b]).unwrap()).unwrap();
    assert_eq!(map3.iou[map3.parenchyma_cluster], map3.iou[best]);
    assert!(map3.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_objective_never_increases(seed in 0u64..10_000, n in 6usize..80, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let km = kmeans(&pts, 2, k, seed, 50).unwrap();
        for w in km.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert!(km.assignments.iter().all(|&a| a < k));
    }

    #[test]
    fn match_is_scale_invariant_and_bounded(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let (_, z) = random_bank(25, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = patch_match(&q, &z).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let b = patch_match(&scaled, &z).unwrap();
        prop_assert_eq!(a.coord, b.coord);
        prop_assert!((-1.0..=1.0).contains(&a.similarity));
    }
}
