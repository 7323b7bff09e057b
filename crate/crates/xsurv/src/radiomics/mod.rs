//! Radiomics feature extraction from lesion masks over PET/CT volumes:
//! first-order statistics, 3D shape, gray-level co-occurrence texture, and
//! first-order statistics of the eight single-level Haar wavelet sub-bands,
//! per modality.
//!
//! Extraction works on the mask's bounding box, which makes every feature
//! exactly invariant to whole-voxel translations of the image+mask pair.

mod glcm;
mod haar;

pub use glcm::{glcm_features, glcm_for_offset, quantize, GlcmFeatures, GLCM_LEVELS, OFFSETS};
pub use haar::{haar3d, haar3d_inverse, HaarBands, BAND_NAMES};

// Standardization lives with the statistics stack but is re-exported here
// because it is the tail of the radiomics pipeline.
pub use crate::stats::{zscore_fit, Scaler};

use crate::data::Volume;

#[derive(Debug, thiserror::Error)]
pub enum RadiomicsError {
    #[error("empty mask: fall back to a whole-volume bounding box before extraction")]
    EmptyMask,
    #[error("volume shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
}

/// Named feature values for one patient; the name list is identical across
/// patients of a cohort.
#[derive(Debug, Clone)]
pub struct RadiomicsVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

const FIRST_ORDER_NAMES: [&str; 11] = [
    "mean", "median", "min", "max", "variance", "skewness", "kurtosis", "energy", "entropy",
    "p10", "p90",
];

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// The eleven first-order statistics over a set of intensities. Entropy uses
/// a 32-bin min-max histogram; a constant region has zero entropy and zero
/// skewness/kurtosis by convention.
pub fn first_order(values: &[f64]) -> [f64; 11] {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let (skew, kurt) = if std > 0.0 {
        let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        (m3 / std.powi(3), m4 / std.powi(4))
    } else {
        (0.0, 0.0)
    };
    let energy = values.iter().map(|v| v * v).sum::<f64>();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let entropy = if hi > lo {
        let bins = 32usize;
        let mut hist = vec![0u64; bins];
        for v in values {
            let b = (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
        -hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    [
        mean,
        percentile(&sorted, 50.0),
        lo,
        hi,
        var,
        skew,
        kurt,
        energy,
        entropy,
        percentile(&sorted, 10.0),
        percentile(&sorted, 90.0),
    ]
}

/// Mesh-free shape features of a binary mask: voxel volume, exposed-face
/// surface area, sphericity, and the exact maximum diameter over boundary
/// voxel centres.
pub fn shape_features(mask: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> [f64; 4] {
    let [sd, sh, sw] = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let voxel_vol = sd * sh * sw;
    let face_areas = [sh * sw, sd * sw, sd * sh]; // faces normal to d, h, w
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    let mut volume = 0.0;
    let mut area = 0.0;
    let mut boundary: Vec<[f64; 3]> = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                volume += voxel_vol;
                let mut exposed = false;
                let neighbors: [(isize, isize, isize, usize); 6] = [
                    (-1, 0, 0, 0),
                    (1, 0, 0, 0),
                    (0, -1, 0, 1),
                    (0, 1, 0, 1),
                    (0, 0, -1, 2),
                    (0, 0, 1, 2),
                ];
                for (dz, dy, dx, axis) in neighbors {
                    let nz = z as isize + dz;
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    let outside = nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= dims[0] as isize
                        || ny >= dims[1] as isize
                        || nx >= dims[2] as isize
                        || !mask[idx(nz as usize, ny as usize, nx as usize)];
                    if outside {
                        area += face_areas[axis];
                        exposed = true;
                    }
                }
                if exposed {
                    boundary.push([z as f64 * sd, y as f64 * sh, x as f64 * sw]);
                }
            }
        }
    }
    let sphericity = if area > 0.0 {
        std::f64::consts::PI.powf(1.0 / 3.0) * (6.0 * volume).powf(2.0 / 3.0) / area
    } else {
        0.0
    };
    let mut max_d2 = 0.0f64;
    for i in 0..boundary.len() {
        for j in i + 1..boundary.len() {
            let d2: f64 = (0..3)
                .map(|a| (boundary[i][a] - boundary[j][a]).powi(2))
                .sum();
            max_d2 = max_d2.max(d2);
        }
    }
    [volume, area, sphericity, max_d2.sqrt()]
}

struct Cropped {
    dims: [usize; 3],
    mask: Vec<bool>,
    pet: Vec<f64>,
    ct: Vec<f64>,
}

/// Crop all inputs to the mask's bounding box.
fn crop_to_bbox(pet: &Volume, ct: &Volume, mask: &Volume) -> Option<Cropped> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..mask.dims[0] {
        for y in 0..mask.dims[1] {
            for x in 0..mask.dims[2] {
                if mask.at(z, y, x) > 0.5 {
                    lo = [lo[0].min(z), lo[1].min(y), lo[2].min(x)];
                    hi = [hi[0].max(z), hi[1].max(y), hi[2].max(x)];
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return None;
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let n = dims[0] * dims[1] * dims[2];
    let mut out = Cropped {
        dims,
        mask: Vec::with_capacity(n),
        pet: Vec::with_capacity(n),
        ct: Vec::with_capacity(n),
    };
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                out.mask.push(mask.at(z, y, x) > 0.5);
                out.pet.push(pet.at(z, y, x) as f64);
                out.ct.push(ct.at(z, y, x) as f64);
            }
        }
    }
    Some(out)
}

fn push_first_order(names: &mut Vec<String>, values: &mut Vec<f64>, prefix: &str, stats: [f64; 11]) {
    for (n, v) in FIRST_ORDER_NAMES.iter().zip(stats) {
        names.push(format!("{}_{}", prefix, n));
        values.push(v);
    }
}

/// Downsample a mask by 2 with the any-voxel rule onto the wavelet grid.
fn downsample_mask_any(mask: &[bool], dims: [usize; 3], half: [usize; 3]) -> Vec<bool> {
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    let mut out = vec![false; half[0] * half[1] * half[2]];
    for z in 0..half[0] {
        for y in 0..half[1] {
            for x in 0..half[2] {
                let mut any = false;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (sz, sy, sx) = (2 * z + dz, 2 * y + dy, 2 * x + dx);
                            if sz < dims[0] && sy < dims[1] && sx < dims[2] {
                                any |= mask[idx(sz, sy, sx)];
                            }
                        }
                    }
                }
                out[(z * half[1] + y) * half[2] + x] = any;
            }
        }
    }
    out
}

/// Extract the full feature vector for one patient from the merged lesion
/// mask over aligned PET and CT volumes.
pub fn extract_features(
    pet: &Volume,
    ct: &Volume,
    mask: &Volume,
) -> Result<RadiomicsVector, RadiomicsError> {
    if pet.dims != ct.dims || pet.dims != mask.dims {
        return Err(RadiomicsError::ShapeMismatch(pet.dims, ct.dims));
    }
    let cropped = crop_to_bbox(pet, ct, mask).ok_or(RadiomicsError::EmptyMask)?;
    let mut names = Vec::new();
    let mut values = Vec::new();

    for (prefix, data) in [("pet", &cropped.pet), ("ct", &cropped.ct)] {
        let masked: Vec<f64> = data
            .iter()
            .zip(&cropped.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        push_first_order(&mut names, &mut values, prefix, first_order(&masked));

        let g = glcm_features(data, &cropped.mask, cropped.dims);
        for (n, v) in [
            ("contrast", g.contrast),
            ("correlation", g.correlation),
            ("energy", g.energy),
            ("homogeneity", g.homogeneity),
            ("entropy", g.entropy),
        ] {
            names.push(format!("{}_glcm_{}", prefix, n));
            values.push(v);
        }

        let bands = haar3d(data, cropped.dims);
        let band_mask = downsample_mask_any(&cropped.mask, cropped.dims, bands.dims);
        for (b, band) in bands.bands.iter().enumerate() {
            let masked: Vec<f64> = band
                .iter()
                .zip(&band_mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect();
            let stats = first_order(&masked);
            push_first_order(
                &mut names,
                &mut values,
                &format!("{}_wavelet_{}", prefix, BAND_NAMES[b]),
                stats,
            );
        }
    }

    let shape = shape_features(&cropped.mask, cropped.dims, mask.spacing);
    for (n, v) in [
        ("volume_mm3", shape[0]),
        ("surface_mm2", shape[1]),
        ("sphericity", shape[2]),
        ("max_diameter_mm", shape[3]),
    ] {
        names.push(format!("shape_{}", n));
        values.push(v);
    }

    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(RadiomicsVector { names, values })
}

#[cfg(test)]
mod tests;
