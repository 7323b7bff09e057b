//! Gray-level co-occurrence features: 32 levels min-max quantized inside the
//! mask, 13 direction offsets at distance 1, symmetric accumulation, features
//! averaged over offsets.

pub const GLCM_LEVELS: usize = 32;

/// The 13 unique direction offsets at Chebyshev distance 1.
pub const OFFSETS: [[isize; 3]; 13] = [
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
    [0, 1, 1],
    [0, 1, -1],
    [1, 0, 1],
    [1, 0, -1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlcmFeatures {
    pub contrast: f64,
    pub correlation: f64,
    pub energy: f64,
    pub homogeneity: f64,
    pub entropy: f64,
}

/// Min-max quantization of the masked voxels into `GLCM_LEVELS` bins; a
/// constant region maps entirely to level 0.
pub fn quantize(values: &[f64], mask: &[bool]) -> Vec<usize> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &m) in values.iter().zip(mask) {
        if m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let range = hi - lo;
    values
        .iter()
        .zip(mask)
        .map(|(v, &m)| {
            if !m || range <= 0.0 {
                0
            } else {
                (((v - lo) / range * GLCM_LEVELS as f64) as usize).min(GLCM_LEVELS - 1)
            }
        })
        .collect()
}

/// Symmetric co-occurrence features for one offset, `None` when the offset
/// yields no in-mask pairs.
pub fn glcm_for_offset(
    levels: &[usize],
    mask: &[bool],
    dims: [usize; 3],
    offset: [isize; 3],
) -> Option<GlcmFeatures> {
    let l = GLCM_LEVELS;
    let mut counts = vec![0u64; l * l];
    let mut total = 0u64;
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let nz = z as isize + offset[0];
                let ny = y as isize + offset[1];
                let nx = x as isize + offset[2];
                if nz < 0
                    || ny < 0
                    || nx < 0
                    || nz >= dims[0] as isize
                    || ny >= dims[1] as isize
                    || nx >= dims[2] as isize
                {
                    continue;
                }
                let n = idx(nz as usize, ny as usize, nx as usize);
                if !mask[n] {
                    continue;
                }
                let (a, b) = (levels[idx(z, y, x)], levels[n]);
                counts[a * l + b] += 1;
                counts[b * l + a] += 1;
                total += 2;
            }
        }
    }
    if total == 0 {
        return None;
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut mu_i = 0.0;
    let mut mu_j = 0.0;
    for i in 0..l {
        for j in 0..l {
            mu_i += i as f64 * p[i * l + j];
            mu_j += j as f64 * p[i * l + j];
        }
    }
    let mut var_i = 0.0;
    let mut var_j = 0.0;
    let mut contrast = 0.0;
    let mut cross = 0.0;
    let mut energy = 0.0;
    let mut homogeneity = 0.0;
    let mut entropy = 0.0;
    for i in 0..l {
        for j in 0..l {
            let pij = p[i * l + j];
            if pij == 0.0 {
                continue;
            }
            let (fi, fj) = (i as f64, j as f64);
            var_i += (fi - mu_i) * (fi - mu_i) * pij;
            var_j += (fj - mu_j) * (fj - mu_j) * pij;
            contrast += (fi - fj) * (fi - fj) * pij;
            cross += fi * fj * pij;
            energy += pij * pij;
            homogeneity += pij / (1.0 + (fi - fj).abs());
            entropy -= pij * pij.log2();
        }
    }
    let denom = (var_i * var_j).sqrt();
    let correlation = if denom > 0.0 {
        (cross - mu_i * mu_j) / denom
    } else {
        // Constant texture correlates perfectly with itself.
        1.0
    };
    Some(GlcmFeatures {
        contrast,
        correlation,
        energy,
        homogeneity,
        entropy,
    })
}

/// Features averaged over all offsets with at least one pair.
pub fn glcm_features(values: &[f64], mask: &[bool], dims: [usize; 3]) -> GlcmFeatures {
    let levels = quantize(values, mask);
    let mut acc = GlcmFeatures {
        contrast: 0.0,
        correlation: 0.0,
        energy: 0.0,
        homogeneity: 0.0,
        entropy: 0.0,
    };
    let mut n = 0.0;
    for offset in OFFSETS {
        if let Some(f) = glcm_for_offset(&levels, mask, dims, offset) {
            acc.contrast += f.contrast;
            acc.correlation += f.correlation;
            acc.energy += f.energy;
            acc.homogeneity += f.homogeneity;
            acc.entropy += f.entropy;
            n += 1.0;
        }
    }
    if n > 0.0 {
        acc.contrast /= n;
        acc.correlation /= n;
        acc.energy /= n;
        acc.homogeneity /= n;
        acc.entropy /= n;
    } else {
        acc.correlation = 1.0;
        acc.energy = 1.0;
        acc.homogeneity = 1.0;
    }
    acc
}
