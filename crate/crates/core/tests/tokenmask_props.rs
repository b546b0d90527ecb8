use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voljepa::phantom::{generate_study, PhantomSpec};
use voljepa::preprocess::{normalize, preprocess_volume};
use voljepa::tokenmask::{
    augment_grid, augment_volume, context_fraction_stats, crop_start, patchify, round_half_up, sample_mask_plan,
    truncate_crop, AugmentSpec, MaskScheme, PatchGrid, PATCH, PATCH_VOXELS,
};
use voljepa::volume::{Grid3, Modality};

fn random_grid(rng: &mut ChaCha8Rng, dims: [usize; 3], keep: f64) -> PatchGrid {
    let shape = [0, 1, 2].map(|a| dims[a] * PATCH[a]);
    let v = Grid3::from_fn(shape, |z, y, x| (z + y + x) as f32);
    // Whole-patch foreground decisions so the retained count is controlled.
    let mut on: Vec<bool> = (0..dims.iter().product::<usize>()).map(|_| rng.random_bool(keep)).collect();
    on[0] = true;
    let m = Grid3::from_fn(shape, |z, y, x| {
        on[((z / PATCH[0]) * dims[1] + y / PATCH[1]) * dims[2] + x / PATCH[2]]
    });
    patchify(&v, &m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn plans_are_disjoint_and_cover_foreground(
        seed in any::<u64>(),
        dz in 1usize..6, dy in 1usize..7, dx in 1usize..7,
        multi in any::<bool>(), mr in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, [dz, dy, dx], 0.7);
        prop_assume!(grid.len() >= 2);
        let scheme = if multi { MaskScheme::MultiBlockTarget } else { MaskScheme::SmallBlockContext };
        let modality = if mr { Modality::SynthMr } else { Modality::SynthCt };
        let plan = sample_mask_plan(&grid, scheme, modality, seed).unwrap();
        prop_assert!(!plan.context_ids.is_empty());
        prop_assert!(!plan.target_ids.is_empty());
        let mut all: Vec<usize> = plan.context_ids.iter().chain(&plan.target_ids).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        prop_assert_eq!(all.len(), n, "context and target overlap");
        prop_assert_eq!(n, grid.len());
        // Dropout count follows the rounding rule unless the one-token floor applies.
        let before = plan.context_ids.len() + plan.dropout_moved;
        let expect = round_half_up(0.2 * before as f64);
        prop_assert!(plan.dropout_moved == expect || (plan.dropout_moved == before - 1 && expect >= before));
        if multi && grid.len() >= 7 {
            prop_assert!(plan.masked_fraction_pre_dropout >= 0.85);
        }
    }

    #[test]
    fn lattice_augment_commutes_with_patchify(seed in any::<u64>(), swap in any::<bool>(), fz in any::<bool>(), fy in any::<bool>(), fx in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [2, 2, 3];
        let shape = [0, 1, 2].map(|a| dims[a] * PATCH[a]);
        // Square in-plane extent so a y/x swap keeps the shape valid either way.
        let shape = if swap { [shape[0], 48, 48] } else { shape };
        let v = Grid3::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0));
        let m = Grid3::from_fn(shape, |z, y, x| (z + y / 3 + x / 5) % 3 != 0);
        let aug = AugmentSpec {
            axis_permutation: if swap { [0, 2, 1] } else { [0, 1, 2] },
            flips: [fz, fy, fx],
        };
        let a = patchify(&augment_volume(&v, &aug), &augment_volume(&m, &aug)).unwrap();
        let b = augment_grid(&patchify(&v, &m).unwrap(), &aug).unwrap();
        prop_assert_eq!(&a.coords, &b.coords);
        prop_assert_eq!(&a.payloads, &b.payloads);
    }
}

#[test]
fn retained_tokens_match_voxel_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [12, 40, 40];
    let v = Grid3::from_fn(shape, |_, _, _| 1.0f32);
    let m = Grid3::from_fn(shape, |_, _, _| rng.random_bool(0.5) && rng.random_bool(0.3));
    let g = patchify(&v, &m).unwrap();
    let dims = [3, 3, 3];
    let mut expected = Vec::new();
    for pz in 0..dims[0] {
        for py in 0..dims[1] {
            for px in 0..dims[2] {
                let mut count = 0;
                for z in pz * 4..(pz + 1) * 4 {
                    for y in py * 16..((py + 1) * 16).min(40) {
                        for x in px * 16..((px + 1) * 16).min(40) {
                            count += usize::from(m.get(z, y, x));
                        }
                    }
                }
                if count * 8 > PATCH_VOXELS {
                    expected.push([pz, py, px]);
                }
            }
        }
    }
    assert_eq!(g.coords, expected);

    // Half-foreground volume: left half of x is foreground.
    let half = Grid3::from_fn([8, 32, 64], |_, _, x| x < 32);
    let g = patchify(&Grid3::filled([8, 32, 64], 0.0f32), &half).unwrap();
    assert_eq!(g.len(), 2 * 2 * 2);
    assert!(g.coords.iter().all(|c| c[2] < 2));
}

#[test]
fn crop_start_is_uniform() {
    // 25 patches, window 20 → 6 start positions.
    let mut counts = [0f64; 6];
    for seed in 0..6000u64 {
        counts[crop_start(25, 20, seed)] += 1.0;
    }
    let chi2: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
    // 99th percentile of chi-square with 5 degrees of freedom.
    assert!(chi2 < 15.086, "chi2={chi2}, counts={counts:?}");
    let grid = random_grid(&mut ChaCha8Rng::seed_from_u64(1), [25, 1, 1], 1.0);
    assert_eq!(truncate_crop(&grid, 20, 77).grid_dims, [20, 1, 1]);
}

#[test]
fn multi_block_masks_85_percent_of_100_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random_grid(&mut rng, [4, 5, 5], 1.0);
    assert_eq!(grid.len(), 100);
    for seed in 0..200 {
        let plan = sample_mask_plan(&grid, MaskScheme::MultiBlockTarget, Modality::SynthCt, seed).unwrap();
        let target_pre = plan.target_ids.len() - plan.dropout_moved;
        assert!(target_pre >= 85, "seed {seed}: {target_pre}");
    }
}

#[test]
fn small_block_context_size_on_200_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = random_grid(&mut rng, [5, 5, 8], 1.0);
    assert_eq!(grid.len(), 200);
    for seed in 0..50 {
        let plan = sample_mask_plan(&grid, MaskScheme::SmallBlockContext, Modality::SynthMr, seed).unwrap();
        let again = sample_mask_plan(&grid, MaskScheme::SmallBlockContext, Modality::SynthMr, seed).unwrap();
        assert_eq!(plan, again);
        let block = plan.context_ids.len() + plan.dropout_moved;
        assert_eq!(plan.dropout_moved, round_half_up(0.2 * block as f64));
        // A centred box hits 50 tokens exactly on a full 5×5×8 lattice (e.g. 5×5×2).
        assert_eq!(block, 50);
        assert_eq!(plan.context_ids.len(), 40);
    }
}

#[test]
fn phantom_context_fraction_medians_fall_in_target_bands() {
    let mut plans = Vec::new();
    for (m, modality) in [Modality::SynthMr, Modality::SynthCt].into_iter().enumerate() {
        let grids: Vec<PatchGrid> = (0..8)
            .map(|s| {
                let spec = PhantomSpec::new(100 + s, [32, 96, 96], [2.0, 1.0, 1.0], modality);
                let st = generate_study(&spec).unwrap();
                let pv = &preprocess_volume(&st.volumes[0]).unwrap()[0];
                patchify(&normalize(pv, 0.5), &pv.foreground).unwrap()
            })
            .collect();
        for i in 0..512u64 {
            let scheme = MaskScheme::for_slot(i as usize, 0);
            let g = &grids[i as usize % grids.len()];
            plans.push((modality, sample_mask_plan(g, scheme, modality, i * 2 + m as u64).unwrap()));
        }
    }
    let med = context_fraction_stats(&plans);
    let mr = med[&Modality::SynthMr];
    let ct = med[&Modality::SynthCt];
    eprintln!("median context fraction: MR {mr:.4}, CT {ct:.4}");
    assert!((0.13..=0.24).contains(&mr), "MR median {mr}");
    assert!((0.10..=0.21).contains(&ct), "CT median {ct}");
}
