use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Modality, Volume};

fn cube_mask(side: usize, lo: usize, hi: usize) -> Volume {
    let mut m = Volume::new([side; 3], [1.0; 3], Modality::Mask);
    for z in lo..hi {
        for y in lo..hi {
            for x in lo..hi {
                let i = m.idx(z, y, x);
                m.data[i] = 1.0;
            }
        }
    }
    m
}

fn vol_with(side: usize, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
    let mut v = Volume::new([side; 3], [1.0; 3], Modality::Pet);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let i = v.idx(z, y, x);
                v.data[i] = f(z, y, x);
            }
        }
    }
    v
}

fn feature(vec: &RadiomicsVector, name: &str) -> f64 {
    let i = vec
        .names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no feature {:?}", name));
    vec.values[i]
}

#[test]
fn constant_intensity_gives_trivial_first_order() {
    let mask = cube_mask(10, 2, 7);
    let pet = vol_with(10, |_, _, _| 4.5);
    let ct = vol_with(10, |_, _, _| 20.0);
    let v = extract_features(&pet, &ct, &mask).unwrap();
    assert!((feature(&v, "pet_mean") - 4.5).abs() < 1e-9);
    assert_eq!(feature(&v, "pet_variance"), 0.0);
    assert_eq!(feature(&v, "pet_entropy"), 0.0);
    assert_eq!(feature(&v, "pet_skewness"), 0.0);
    assert!(v.values.iter().all(|x| x.is_finite()));
}

#[test]
fn single_voxel_unit_cube_geometry() {
    let mask = cube_mask(8, 4, 5);
    let pet = vol_with(8, |_, _, _| 1.0);
    let ct = vol_with(8, |_, _, _| 1.0);
    let v = extract_features(&pet, &ct, &mask).unwrap();
    assert_eq!(feature(&v, "shape_volume_mm3"), 1.0);
    assert_eq!(feature(&v, "shape_surface_mm2"), 6.0);
    assert_eq!(feature(&v, "shape_max_diameter_mm"), 0.0);
    let sph = feature(&v, "shape_sphericity");
    assert!(sph > 0.0 && sph <= 1.1, "sphericity {}", sph);
}

#[test]
fn sphericity_in_range_for_real_lesions() {
    let spec = crate::data::PhantomSpec::default();
    for i in 0..5 {
        let p = crate::data::generate_phantom(&spec, i).unwrap();
        let merged = {
            let mut m = p.pt_mask.clone();
            for (a, b) in m.data.iter_mut().zip(&p.mln_mask.data) {
                if *b > 0.5 {
                    *a = 1.0;
                }
            }
            m
        };
        let v = extract_features(&p.pet, &p.ct, &merged).unwrap();
        let sph = feature(&v, "shape_sphericity");
        assert!(sph > 0.0 && sph <= 1.1, "phantom {}: sphericity {}", i, sph);
    }
}

#[test]
fn checkerboard_glcm_matches_hand_enumeration() {
    // Two-value checkerboard: along any unit axis offset every pair mixes
    // levels 0 and 31; along a two-step parity-preserving diagonal every pair
    // repeats the same level.
    let side = 6;
    let vals: Vec<f64> = (0..side * side * side)
        .map(|i| {
            let z = i / (side * side);
            let y = (i / side) % side;
            let x = i % side;
            if (z + y + x) % 2 == 0 {
                1.0
            } else {
                5.0
            }
        })
        .collect();
    let mask = vec![true; side * side * side];
    let levels = quantize(&vals, &mask);
    assert!(levels.iter().all(|&l| l == 0 || l == 31));

    let axis = glcm_for_offset(&levels, &mask, [side; 3], [0, 0, 1]).unwrap();
    // All mass on (0,31) and (31,0): contrast 31^2, energy 2*(1/2)^2,
    // homogeneity 1/32, entropy 1 bit, correlation -1.
    assert!((axis.contrast - 961.0).abs() < 1e-9);
    assert!((axis.energy - 0.5).abs() < 1e-9);
    assert!((axis.homogeneity - 1.0 / 32.0).abs() < 1e-9);
    assert!((axis.entropy - 1.0).abs() < 1e-9);
    assert!((axis.correlation + 1.0).abs() < 1e-9);

    let diag = glcm_for_offset(&levels, &mask, [side; 3], [0, 1, 1]).unwrap();
    // Parity-preserving: pairs are (0,0) and (31,31) in equal proportion.
    assert!((diag.contrast - 0.0).abs() < 1e-9);
    assert!((diag.energy - 0.5).abs() < 1e-9);
    assert!((diag.homogeneity - 1.0).abs() < 1e-9);
    assert!((diag.correlation - 1.0).abs() < 1e-9);
}

#[test]
fn empty_mask_is_an_error() {
    let mask = Volume::new([6; 3], [1.0; 3], Modality::Mask);
    let pet = vol_with(6, |_, _, _| 1.0);
    let ct = vol_with(6, |_, _, _| 1.0);
    assert!(matches!(
        extract_features(&pet, &ct, &mask),
        Err(RadiomicsError::EmptyMask)
    ));
}

#[test]
fn haar_constant_volume_concentrates_in_lll() {
    let c = 3.0;
    let data = vec![c; 8 * 8 * 8];
    let bands = haar3d(&data, [8, 8, 8]);
    let scale = 2.0f64.powf(1.5);
    for v in &bands.bands[0] {
        assert!((v - c * scale).abs() < 1e-12);
    }
    for b in 1..8 {
        for v in &bands.bands[b] {
            assert!(v.abs() < 1e-12, "band {} leaked {}", BAND_NAMES[b], v);
        }
    }
}

#[test]
fn haar_conserves_energy_and_inverts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..8 * 8 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let bands = haar3d(&data, [8, 8, 8]);
    let in_energy: f64 = data.iter().map(|v| v * v).sum();
    let out_energy: f64 = bands.bands.iter().flatten().map(|v| v * v).sum();
    assert!(
        (in_energy - out_energy).abs() / in_energy < 1e-4,
        "{} vs {}",
        in_energy,
        out_energy
    );
    let back = haar3d_inverse(&bands);
    for (a, b) in data.iter().zip(&back) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn haar_handles_odd_dims_by_reflect_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..5 * 7 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bands = haar3d(&data, [5, 7, 6]);
    assert_eq!(bands.dims, [3, 4, 3]);
    assert_eq!(bands.padded_dims, [6, 8, 6]);
    // Round trip matches on the original region.
    let back = haar3d_inverse(&bands);
    for z in 0..5 {
        for y in 0..7 {
            for x in 0..6 {
                let orig = data[(z * 7 + y) * 6 + x];
                let rec = back[(z * 8 + y) * 6 + x];
                assert!((orig - rec).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn whole_voxel_translation_leaves_features_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let side = 14;
    let base_noise: Vec<f32> = (0..6usize.pow(3)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let build = |off: [usize; 3]| -> (Volume, Volume, Volume) {
        let mut mask = Volume::new([side; 3], [1.0; 3], Modality::Mask);
        let mut pet = vol_with(side, |_, _, _| 0.1);
        let mut ct = vol_with(side, |_, _, _| -3.0);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    // An asymmetric blob with textured intensities.
                    if (z + y < 9) && (x != 5 || y < 3) {
                        let i = mask.idx(z + off[0], y + off[1], x + off[2]);
                        mask.data[i] = 1.0;
                        pet.data[i] = 2.0 + base_noise[(z * 6 + y) * 6 + x];
                        ct.data[i] = 30.0 + (z * 3 + y * 2 + x) as f32;
                    }
                }
            }
        }
        (pet, ct, mask)
    };
    let (p0, c0, m0) = build([2, 3, 4]);
    let f0 = extract_features(&p0, &c0, &m0).unwrap();
    // Both odd and even whole-voxel shifts.
    for off in [[3, 3, 4], [4, 5, 6], [5, 4, 7]] {
        let (p1, c1, m1) = build(off);
        let f1 = extract_features(&p1, &c1, &m1).unwrap();
        for ((n, a), b) in f0.names.iter().zip(&f0.values).zip(&f1.values) {
            assert!(
                (a - b).abs() < 1e-9,
                "feature {} changed under translation {:?}: {} vs {}",
                n,
                off,
                a,
                b
            );
        }
    }
}

#[test]
fn intensity_shift_moves_mean_only() {
    let mask = cube_mask(10, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<f32> = (0..1000).map(|_| rng.gen_range(0.0..4.0)).collect();
    let pet = vol_with(10, |z, y, x| noise[(z * 10 + y) * 10 % 1000 + x % 10]);
    let ct = vol_with(10, |_, _, _| 5.0);
    let f0 = extract_features(&pet, &ct, &mask).unwrap();
    let mut pet_shift = pet.clone();
    for v in pet_shift.data.iter_mut() {
        *v += 7.5;
    }
    let f1 = extract_features(&pet_shift, &ct, &mask).unwrap();
    assert!((feature(&f1, "pet_mean") - feature(&f0, "pet_mean") - 7.5).abs() < 1e-6);
    for name in ["pet_variance", "shape_volume_mm3", "shape_surface_mm2", "shape_sphericity"] {
        assert!(
            (feature(&f1, name) - feature(&f0, name)).abs() < 1e-6,
            "{} changed",
            name
        );
    }
}

#[test]
fn feature_count_is_stable_across_patients() {
    let spec = crate::data::PhantomSpec::default();
    let mut count = None;
    for i in 0..3 {
        let p = crate::data::generate_phantom(&spec, i).unwrap();
        let v = extract_features(&p.pet, &p.ct, &p.pt_mask).unwrap();
        match count {
            None => count = Some(v.names.len()),
            Some(c) => assert_eq!(c, v.names.len()),
        }
        assert_eq!(v.names.len(), v.values.len());
    }
    // 2 modalities x (11 first-order + 5 GLCM + 8 x 11 wavelet) + 4 shape.
    assert_eq!(count.unwrap(), 2 * (11 + 5 + 88) + 4);
}
