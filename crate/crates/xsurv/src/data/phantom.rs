//! Synthetic PET-CT phantoms with known survival ground truth.
//!
//! Each phantom carries one ellipsoidal primary tumor and up to a few
//! spherical lymph nodes. CT shows the lesions as slightly denser soft
//! tissue; PET shows them as blurred high-uptake regions. The survival time
//! is drawn from an exponential whose rate is tied to normalized total
//! lesion volume and mean uptake, so the prognostic signal in the images is
//! known by construction and its strength is controlled by two coefficients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Modality, Volume};
use crate::survival::SurvivalRecord;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub grid_side: usize,
    /// Ellipsoid semi-axis range in mm (each axis drawn independently).
    pub pt_semi_axes_mm: [f64; 2],
    /// Inclusive range of lymph-node count.
    pub mln_count: [usize; 2],
    pub mln_radius_mm: [f64; 2],
    /// Lesion uptake range in PET intensity units.
    pub pet_uptake: [f64; 2],
    pub pet_background: f64,
    pub pet_noise: f64,
    pub pet_blur_sigma: f64,
    /// Soft-tissue base intensity and noise, in HU.
    pub ct_base: f64,
    pub ct_noise: f64,
    /// Lesion density offset above soft tissue, in HU.
    pub ct_lesion_delta: f64,
    /// Hazard coefficient on normalized total lesion volume.
    pub beta_volume: f64,
    /// Hazard coefficient on normalized mean uptake.
    pub beta_uptake: f64,
    /// Baseline event rate per day.
    pub base_rate: f64,
    /// Target fraction of censored records.
    pub censor_rate: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_side: 48,
            pt_semi_axes_mm: [4.0, 9.0],
            mln_count: [0, 3],
            mln_radius_mm: [2.5, 5.0],
            pet_uptake: [3.0, 8.0],
            pet_background: 0.5,
            pet_noise: 0.05,
            pet_blur_sigma: 1.2,
            ct_base: 40.0,
            ct_noise: 12.0,
            ct_lesion_delta: 30.0,
            beta_volume: 5.0,
            beta_uptake: 2.5,
            base_rate: 1.0 / 600.0,
            censor_rate: 0.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Largest total lesion volume the spec can produce, for normalization.
    fn max_lesion_volume_mm3(&self) -> f64 {
        let a = self.pt_semi_axes_mm[1];
        let r = self.mln_radius_mm[1];
        let sphere = |rad: f64| 4.0 / 3.0 * std::f64::consts::PI * rad * rad * rad;
        sphere(a) + self.mln_count[1] as f64 * sphere(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpvStatus {
    Positive,
    Negative,
    Unknown,
}

/// Clinical indicators attached to each phantom. They carry no prognostic
/// signal by construction; the hazard depends only on the images.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClinicalRow {
    pub age_years: f64,
    pub weight_kg: f64,
    pub male: bool,
    pub hpv: HpvStatus,
    pub chemotherapy: bool,
}

pub struct Phantom {
    pub pet: Volume,
    pub ct: Volume,
    pub pt_mask: Volume,
    pub mln_mask: Volume,
    pub clinical: ClinicalRow,
    pub record: SurvivalRecord,
    /// Lesion centroid, the crop center used by preprocessing.
    pub center: [usize; 3],
    pub true_volume_mm3: f64,
    pub true_mean_uptake: f64,
    /// Event rate of the exponential the survival time was drawn from.
    pub true_hazard_rate: f64,
}

struct Lesion {
    center: [f64; 3],
    semi_axes: [f64; 3],
    uptake: f64,
}

fn lesion_fits(spec: &PhantomSpec, l: &Lesion) -> bool {
    let margin = 2.0;
    (0..3).all(|a| {
        l.center[a] - l.semi_axes[a] >= margin
            && l.center[a] + l.semi_axes[a] <= spec.grid_side as f64 - 1.0 - margin
    })
}

fn lesions_overlap(a: &Lesion, b: &Lesion) -> bool {
    // Conservative bounding-sphere test.
    let ra = a.semi_axes.iter().cloned().fold(0.0, f64::max);
    let rb = b.semi_axes.iter().cloned().fold(0.0, f64::max);
    let d2: f64 = (0..3).map(|i| (a.center[i] - b.center[i]).powi(2)).sum();
    d2.sqrt() < ra + rb + 1.0
}

fn paint_mask(vol: &mut Volume, l: &Lesion) {
    let side = vol.dims[0];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let q = [(z, 0), (y, 1), (x, 2)]
                    .iter()
                    .map(|&(c, a)| {
                        let d = (c as f64 - l.center[a]) / l.semi_axes[a];
                        d * d
                    })
                    .sum::<f64>();
                if q <= 1.0 {
                    let i = vol.idx(z, y, x);
                    vol.data[i] = 1.0;
                }
            }
        }
    }
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(vol: &mut Volume, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = vol.dims;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    for axis in 0..3 {
        let mut out = vol.data.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        let (zz, yy, xx) = match axis {
                            0 => (reflect(z as isize + off, d), y, x),
                            1 => (z, reflect(y as isize + off, h), x),
                            _ => (z, y, reflect(x as isize + off, w)),
                        };
                        acc += kv * vol.at(zz, yy, xx) as f64;
                    }
                    out[(z * h + y) * w + x] = acc as f32;
                }
            }
        }
        vol.data = out;
    }
}

/// Generate phantom number `index` of the spec's virtual cohort. The same
/// `(spec.seed, index)` pair always produces bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Phantom, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));
    let side = spec.grid_side;
    let dims = [side; 3];
    let spacing = [1.0f32; 3];

    let jitter = side as f64 / 8.0;
    let mut lesions: Vec<Lesion> = Vec::new();
    let mut attempts = 0;
    // Primary tumor.
    let pt = loop {
        attempts += 1;
        if attempts > 100 {
            return Err(DataError::InfeasibleGeometry);
        }
        let c = side as f64 / 2.0;
        let center = [
            c + rng.gen_range(-jitter..jitter),
            c + rng.gen_range(-jitter..jitter),
            c + rng.gen_range(-jitter..jitter),
        ];
        let semi_axes = [
            rng.gen_range(spec.pt_semi_axes_mm[0]..=spec.pt_semi_axes_mm[1]),
            rng.gen_range(spec.pt_semi_axes_mm[0]..=spec.pt_semi_axes_mm[1]),
            rng.gen_range(spec.pt_semi_axes_mm[0]..=spec.pt_semi_axes_mm[1]),
        ];
        let uptake = rng.gen_range(spec.pet_uptake[0]..=spec.pet_uptake[1]);
        let l = Lesion {
            center,
            semi_axes,
            uptake,
        };
        if lesion_fits(spec, &l) {
            break l;
        }
    };
    lesions.push(pt);

    let n_mln = rng.gen_range(spec.mln_count[0]..=spec.mln_count[1]);
    let mut mln_lesions = Vec::new();
    for _ in 0..n_mln {
        attempts = 0;
        loop {
            attempts += 1;
            if attempts > 100 {
                return Err(DataError::InfeasibleGeometry);
            }
            let r = rng.gen_range(spec.mln_radius_mm[0]..=spec.mln_radius_mm[1]);
            let center = [
                rng.gen_range(r + 2.0..side as f64 - 3.0 - r),
                rng.gen_range(r + 2.0..side as f64 - 3.0 - r),
                rng.gen_range(r + 2.0..side as f64 - 3.0 - r),
            ];
            let uptake = rng.gen_range(spec.pet_uptake[0]..=spec.pet_uptake[1]);
            let l = Lesion {
                center,
                semi_axes: [r, r, r],
                uptake,
            };
            if lesion_fits(spec, &l)
                && !lesions.iter().any(|o| lesions_overlap(o, &l))
                && !mln_lesions.iter().any(|o| lesions_overlap(o, &l))
            {
                mln_lesions.push(l);
                break;
            }
        }
    }

    let mut pt_mask = Volume::new(dims, spacing, Modality::Mask);
    paint_mask(&mut pt_mask, &lesions[0]);
    let mut mln_mask = Volume::new(dims, spacing, Modality::Mask);
    for l in &mln_lesions {
        paint_mask(&mut mln_mask, l);
    }

    // CT: noisy soft tissue, lesions slightly denser.
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ct = Volume::new(dims, spacing, Modality::Ct);
    for v in ct.data.iter_mut() {
        *v = (spec.ct_base + spec.ct_noise * normal.sample(&mut rng)) as f32;
    }
    for (i, (&p, &m)) in pt_mask.data.iter().zip(&mln_mask.data).enumerate() {
        if p > 0.5 || m > 0.5 {
            ct.data[i] += spec.ct_lesion_delta as f32;
        }
    }

    // PET: background plus per-lesion uptake, blurred, then noise.
    let mut pet = Volume::new(dims, spacing, Modality::Pet);
    for v in pet.data.iter_mut() {
        *v = spec.pet_background as f32;
    }
    let all_lesions: Vec<&Lesion> = lesions.iter().chain(&mln_lesions).collect();
    let mut uptake_sum = 0.0;
    let mut uptake_voxels = 0usize;
    for (i, l) in all_lesions.iter().enumerate() {
        let mask = if i == 0 { &pt_mask } else { &mln_mask };
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let q: f64 = [(z, 0), (y, 1), (x, 2)]
                        .iter()
                        .map(|&(c, a)| {
                            let d = (c as f64 - l.center[a]) / l.semi_axes[a];
                            d * d
                        })
                        .sum();
                    if q <= 1.0 && mask.at(z, y, x) > 0.5 {
                        let idx = pet.idx(z, y, x);
                        pet.data[idx] = l.uptake as f32;
                        uptake_sum += l.uptake;
                        uptake_voxels += 1;
                    }
                }
            }
        }
    }
    let mean_uptake = if uptake_voxels > 0 {
        uptake_sum / uptake_voxels as f64
    } else {
        spec.pet_background
    };
    gaussian_blur(&mut pet, spec.pet_blur_sigma);
    for v in pet.data.iter_mut() {
        *v += (spec.pet_noise * normal.sample(&mut rng)) as f32;
    }

    // Survival ground truth.
    let total_volume = (pt_mask.count_mask() + mln_mask.count_mask()) as f64 * pt_mask.voxel_mm3();
    let vol_norm = (total_volume / spec.max_lesion_volume_mm3()).min(1.0);
    let up_norm = ((mean_uptake - spec.pet_uptake[0])
        / (spec.pet_uptake[1] - spec.pet_uptake[0]))
        .clamp(0.0, 1.0);
    let hazard = spec.base_rate * (spec.beta_volume * vol_norm + spec.beta_uptake * up_norm).exp();
    let t_event = -rng.gen::<f64>().max(1e-12).ln() / hazard;
    let (time_days, censored) = if spec.censor_rate > 0.0 {
        // Normalized volume sits near 0.3 and normalized uptake near 0.5 for
        // the default geometry; the censoring rate is calibrated against that
        // typical hazard.
        let mean_signal = 0.3 * spec.beta_volume + 0.5 * spec.beta_uptake;
        let censor_hazard =
            spec.base_rate * mean_signal.exp() * spec.censor_rate / (1.0 - spec.censor_rate);
        let t_censor = -rng.gen::<f64>().max(1e-12).ln() / censor_hazard;
        if t_censor < t_event {
            (t_censor, true)
        } else {
            (t_event, false)
        }
    } else {
        (t_event, false)
    };

    let clinical = ClinicalRow {
        age_years: rng.gen_range(32.0..=90.0_f64).round(),
        weight_kg: rng.gen_range(40.0..=160.0_f64).round(),
        male: rng.gen_bool(0.8),
        hpv: match rng.gen_range(0..10) {
            0..=5 => HpvStatus::Positive,
            6 => HpvStatus::Negative,
            _ => HpvStatus::Unknown,
        },
        chemotherapy: rng.gen_bool(0.85),
    };

    // Lesion centroid over the merged mask.
    let mut acc = [0.0f64; 3];
    let mut count = 0.0;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if pt_mask.at(z, y, x) > 0.5 || mln_mask.at(z, y, x) > 0.5 {
                    acc[0] += z as f64;
                    acc[1] += y as f64;
                    acc[2] += x as f64;
                    count += 1.0;
                }
            }
        }
    }
    let center = if count > 0.0 {
        [
            (acc[0] / count).round() as usize,
            (acc[1] / count).round() as usize,
            (acc[2] / count).round() as usize,
        ]
    } else {
        [side / 2; 3]
    };

    Ok(Phantom {
        pet,
        ct,
        pt_mask,
        mln_mask,
        clinical,
        record: SurvivalRecord {
            time_days: time_days.max(0.5),
            censored,
        },
        center,
        true_volume_mm3: total_volume,
        true_mean_uptake: mean_uptake,
        true_hazard_rate: hazard,
    })
}
