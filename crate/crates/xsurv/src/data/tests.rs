use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn spec() -> PhantomSpec {
    PhantomSpec::default()
}

#[test]
fn same_seed_is_bit_identical() {
    let s = spec();
    let a = generate_phantom(&s, 5).unwrap();
    let b = generate_phantom(&s, 5).unwrap();
    assert_eq!(a.pet.data, b.pet.data);
    assert_eq!(a.ct.data, b.ct.data);
    assert_eq!(a.pt_mask.data, b.pt_mask.data);
    assert_eq!(a.mln_mask.data, b.mln_mask.data);
    assert_eq!(a.record, b.record);
    assert_eq!(a.clinical, b.clinical);
    // Different index, different phantom.
    let c = generate_phantom(&s, 6).unwrap();
    assert_ne!(a.pet.data, c.pet.data);
}

#[test]
fn phantom_masks_are_disjoint_and_nonempty_pt() {
    for i in 0..20 {
        let p = generate_phantom(&spec(), i).unwrap();
        assert!(p.pt_mask.count_mask() > 0);
        for (a, b) in p.pt_mask.data.iter().zip(&p.mln_mask.data) {
            assert!(!(*a > 0.5 && *b > 0.5), "PT and MLN overlap");
        }
        // Lesion fits with margin: no mask voxel on the outermost shell.
        let side = p.pt_mask.dims[0];
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    if z == 0 || y == 0 || x == 0 || z == side - 1 || y == side - 1 || x == side - 1
                    {
                        assert!(p.pt_mask.at(z, y, x) < 0.5);
                        assert!(p.mln_mask.at(z, y, x) < 0.5);
                    }
                }
            }
        }
    }
}

#[test]
fn survival_times_follow_the_specified_hazard() {
    // No censoring: every generated time is a raw event time, and the
    // analytic distribution is the mixture of per-sample exponentials.
    let mut s = spec();
    s.censor_rate = 0.0;
    s.grid_side = 32;
    s.seed = 99;
    let n = 1000;
    let phantoms: Vec<Phantom> = (0..n).map(|i| generate_phantom(&s, i).unwrap()).collect();
    let mut times: Vec<f64> = phantoms.iter().map(|p| p.record.time_days).collect();
    assert!(phantoms.iter().all(|p| !p.record.censored));
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rates: Vec<f64> = phantoms.iter().map(|p| p.true_hazard_rate).collect();
    let mixture_cdf = |t: f64| -> f64 {
        rates.iter().map(|&l| 1.0 - (-l * t).exp()).sum::<f64>() / rates.len() as f64
    };
    let mut ks: f64 = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let f = mixture_cdf(t);
        ks = ks.max((f - i as f64 / n as f64).abs());
        ks = ks.max((f - (i + 1) as f64 / n as f64).abs());
    }
    assert!(ks < 0.1, "KS distance {}", ks);
}

#[test]
fn censoring_fraction_tracks_target() {
    for target in [0.5, 0.79] {
        let mut s = spec();
        s.censor_rate = target;
        s.grid_side = 32;
        let n = 200;
        let censored = (0..n)
            .filter(|&i| generate_phantom(&s, i).unwrap().record.censored)
            .count();
        let frac = censored as f64 / n as f64;
        assert!(
            (frac - target).abs() < 0.1,
            "target {} observed {}",
            target,
            frac
        );
    }
}

#[test]
fn cox_on_generator_ground_truth_recovers_positive_coefficients() {
    let mut s = spec();
    s.grid_side = 32;
    s.seed = 7;
    let n = 200;
    let phantoms: Vec<Phantom> = (0..n).map(|i| generate_phantom(&s, i).unwrap()).collect();
    let records: Vec<crate::survival::SurvivalRecord> =
        phantoms.iter().map(|p| p.record).collect();
    let names = vec!["volume".to_string(), "uptake".to_string()];
    let mut matrix = crate::stats::FeatureMatrix::new(names);
    for p in &phantoms {
        matrix.push_row(vec![p.true_volume_mm3, p.true_mean_uptake]);
    }
    let (standardized, _) = crate::stats::zscore_fit(&matrix).unwrap();
    let fit = crate::stats::cox_fit(&standardized, &records).unwrap();
    assert!(fit.converged);
    for k in 0..2 {
        // Positive Cox coefficients: bigger or hotter lesions raise the hazard.
        assert!(
            fit.coefficients[k] > 0.0,
            "{} should raise the hazard (beta {})",
            standardized.names[k],
            fit.coefficients[k]
        );
        assert!(
            fit.p_values[k] < 0.01,
            "{} p-value {}",
            standardized.names[k],
            fit.p_values[k]
        );
    }
}

#[test]
fn preprocess_ct_affine_endpoints_and_pet_zscore() {
    let mut pet = Volume::new([16, 16, 16], [1.0; 3], Modality::Pet);
    for (i, v) in pet.data.iter_mut().enumerate() {
        *v = (i % 29) as f32 * 0.37;
    }
    let mut ct = Volume::new([16, 16, 16], [1.0; 3], Modality::Ct);
    ct.data[0] = -1024.0;
    ct.data[1] = 0.0;
    ct.data[2] = 1024.0;
    ct.data[3] = -2000.0; // clips to -1
    ct.data[4] = 2000.0; // clips to 1
    let (pet_c, ct_c) = preprocess(&pet, &ct, [8, 8, 8], 16);
    assert_eq!(ct_c.data[0], -1.0);
    assert_eq!(ct_c.data[1], 0.0);
    assert_eq!(ct_c.data[2], 1.0);
    assert_eq!(ct_c.data[3], -1.0);
    assert_eq!(ct_c.data[4], 1.0);
    let n = pet_c.numel() as f64;
    let mean: f64 = pet_c.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = pet_c.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-5, "mean {}", mean);
    assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
}

#[test]
fn preprocess_pet_zscore_is_idempotent() {
    let mut pet = Volume::new([12, 12, 12], [1.0; 3], Modality::Pet);
    for (i, v) in pet.data.iter_mut().enumerate() {
        *v = ((i * 7) % 31) as f32;
    }
    let ct = Volume::new([12, 12, 12], [1.0; 3], Modality::Ct);
    let (pet1, _) = preprocess(&pet, &ct, [6, 6, 6], 12);
    let (pet2, _) = preprocess(&pet1, &ct, [6, 6, 6], 12);
    for (a, b) in pet1.data.iter().zip(&pet2.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn resampling_constant_volume_preserves_the_constant() {
    for spacing in [[0.7f32, 0.7, 0.7], [2.0, 1.5, 1.0]] {
        let mut vol = Volume::new([10, 10, 10], spacing, Modality::Pet);
        for v in vol.data.iter_mut() {
            *v = 3.25;
        }
        let iso = resample_isotropic(&vol);
        assert_eq!(iso.spacing, [1.0; 3]);
        for &v in &iso.data {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_affine_with_centered_crop_equals_center_crop() {
    let p = generate_phantom(&spec(), 1).unwrap();
    let out_side = 32;
    let offset = [(48 - out_side) / 2; 3];
    let params = AffineParams::identity(offset);
    let (pet_a, _, masks) = augment_with_params(
        &p.pet,
        &p.ct,
        &[&p.pt_mask],
        &params,
        out_side,
    );
    // Plain crop reference.
    for z in 0..out_side {
        for y in 0..out_side {
            for x in 0..out_side {
                let want = p.pet.at(z + offset[0], y + offset[1], x + offset[2]);
                let got = pet_a.at(z, y, x);
                assert!((want - got).abs() < 1e-5, "at {},{},{}", z, y, x);
                let wm = p.pt_mask.at(z + offset[0], y + offset[1], x + offset[2]);
                assert_eq!(masks[0].at(z, y, x), wm);
            }
        }
    }
}

#[test]
fn masks_stay_binary_under_augmentation() {
    let p = generate_phantom(&spec(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (_, _, masks) = augment(
            &p.pet,
            &p.ct,
            &[&p.pt_mask, &p.mln_mask],
            &mut rng,
            32,
        );
        for m in &masks {
            assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}

#[test]
fn mask_volume_change_bounded_over_100_seeds() {
    let p = generate_phantom(&spec(), 3).unwrap();
    let base = p.pt_mask.count_mask() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..100 {
        let (_, _, masks) = augment(&p.pet, &p.ct, &[&p.pt_mask], &mut rng, 32);
        let count = masks[0].count_mask() as f64;
        let change = (count - base).abs() / base;
        assert!(change < 0.30, "seed {}: change {:.3}", seed, change);
    }
}

#[test]
fn augmentation_applies_one_shared_transform() {
    // Encode voxel coordinates as intensities; after augmentation the three
    // coordinate volumes must agree with the mask path voxel-for-voxel.
    let side = 24;
    let mut vz = Volume::new([side; 3], [1.0; 3], Modality::Pet);
    let mut vy = Volume::new([side; 3], [1.0; 3], Modality::Ct);
    let mut vz_mask = Volume::new([side; 3], [1.0; 3], Modality::Pet);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let i = vz.idx(z, y, x);
                vz.data[i] = z as f32;
                vy.data[i] = y as f32;
                vz_mask.data[i] = z as f32;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = AffineParams::sample(&mut rng, [side; 3], 16);
    let (az, ay, extra) = {
        let (a, b, m) = augment_with_params(&vz, &vy, &[&vz_mask], &params, 16);
        (a, b, m)
    };
    // Same transform on the same field (vz vs vz_mask via the image path).
    for (a, b) in az.data.iter().zip(&extra[0].data) {
        assert!((a - b).abs() < 1e-5);
    }
    // Different fields, same geometry: ay holds y-coordinates sampled at the
    // same source points, so swapping roles must commute.
    let mut rng2 = ChaCha8Rng::seed_from_u64(5);
    let params2 = AffineParams::sample(&mut rng2, [side; 3], 16);
    assert_eq!(params, params2);
    let (ay2, az2, _) = augment_with_params(&vy, &vz, &[], &params2, 16);
    for (a, b) in ay.data.iter().zip(&ay2.data) {
        assert!((a - b).abs() < 1e-5);
    }
    for (a, b) in az.data.iter().zip(&az2.data) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn volume_io_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom(&spec(), 4).unwrap();
    let path = dir.path().join("pet.vol");
    save_volume(&path, &p.pet).unwrap();
    let loaded = load_volume(&path).unwrap();
    assert_eq!(loaded.dims, p.pet.dims);
    assert_eq!(loaded.spacing, p.pet.spacing);
    assert_eq!(loaded.modality, Modality::Pet);
    assert_eq!(loaded.data, p.pet.data);
}

#[test]
fn volume_io_detects_payload_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom(&spec(), 4).unwrap();
    let path = dir.path().join("ct.vol");
    save_volume(&path, &p.ct).unwrap();
    // Truncate the payload.
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        load_volume(&path),
        Err(DataError::PayloadMismatch { .. })
    ));
    // Garbage header.
    std::fs::write(&path, b"not a header\n@@DATA@@\n").unwrap();
    assert!(matches!(
        load_volume(&path),
        Err(DataError::MalformedHeader(_))
    ));
}

#[test]
fn manifest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![ManifestRow {
        patient_id: "p000".into(),
        pet: "p000_pet.vol".into(),
        ct: "p000_ct.vol".into(),
        pt_mask: "p000_pt.vol".into(),
        mln_mask: "p000_mln.vol".into(),
        center_z: 24,
        center_y: 25,
        center_x: 23,
        time_days: 512.25,
        censored: 1,
        age_years: 61.0,
        weight_kg: 80.0,
        male: 1,
        hpv: "positive".into(),
        chemotherapy: 0,
    }];
    let path = dir.path().join("manifest.csv");
    save_manifest(&path, &rows).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].patient_id, "p000");
    assert_eq!(loaded[0].time_days, 512.25);
    assert!(loaded[0].record().censored);
    assert_eq!(loaded[0].center(), [24, 25, 23]);
}
