//! Preprocessing (isotropic resampling, lesion-centred cropping, intensity
//! normalization) and training-time augmentation (shared random affine plus
//! random crop).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Modality, Volume};

pub const CT_CLIP: f32 = 1024.0;

/// Trilinear resample onto a 1 mm isotropic grid. Constant volumes stay
/// constant; already-isotropic volumes are returned unchanged.
pub fn resample_isotropic(vol: &Volume) -> Volume {
    if vol.spacing == [1.0, 1.0, 1.0] {
        return vol.clone();
    }
    let new_dims = [
        ((vol.dims[0] as f32 * vol.spacing[0]).round() as usize).max(1),
        ((vol.dims[1] as f32 * vol.spacing[1]).round() as usize).max(1),
        ((vol.dims[2] as f32 * vol.spacing[2]).round() as usize).max(1),
    ];
    let mut out = Volume::new(new_dims, [1.0; 3], vol.modality);
    let nearest = vol.modality == Modality::Mask;
    for z in 0..new_dims[0] {
        for y in 0..new_dims[1] {
            for x in 0..new_dims[2] {
                let src = [
                    z as f32 / vol.spacing[0],
                    y as f32 / vol.spacing[1],
                    x as f32 / vol.spacing[2],
                ];
                let i = out.idx(z, y, x);
                out.data[i] = if nearest {
                    sample_nearest(vol, src)
                } else {
                    sample_trilinear(vol, src)
                };
            }
        }
    }
    out
}

fn sample_trilinear(vol: &Volume, p: [f32; 3]) -> f32 {
    let clamp = |v: f32, n: usize| v.clamp(0.0, (n - 1) as f32);
    let pz = clamp(p[0], vol.dims[0]);
    let py = clamp(p[1], vol.dims[1]);
    let px = clamp(p[2], vol.dims[2]);
    let (z0, y0, x0) = (pz.floor() as usize, py.floor() as usize, px.floor() as usize);
    let (z1, y1, x1) = (
        (z0 + 1).min(vol.dims[0] - 1),
        (y0 + 1).min(vol.dims[1] - 1),
        (x0 + 1).min(vol.dims[2] - 1),
    );
    let (tz, ty, tx) = (pz - z0 as f32, py - y0 as f32, px - x0 as f32);
    let mut acc = 0.0;
    for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
        for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
            for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                acc += wz * wy * wx * vol.at(zi, yi, xi);
            }
        }
    }
    acc
}

fn sample_nearest(vol: &Volume, p: [f32; 3]) -> f32 {
    let z = (p[0].round() as isize).clamp(0, vol.dims[0] as isize - 1) as usize;
    let y = (p[1].round() as isize).clamp(0, vol.dims[1] as isize - 1) as usize;
    let x = (p[2].round() as isize).clamp(0, vol.dims[2] as isize - 1) as usize;
    vol.at(z, y, x)
}

/// Is the point inside the volume bounds (used to zero-fill outside).
fn in_bounds(vol: &Volume, p: [f32; 3]) -> bool {
    p[0] >= -0.5
        && p[1] >= -0.5
        && p[2] >= -0.5
        && p[0] <= vol.dims[0] as f32 - 0.5
        && p[1] <= vol.dims[1] as f32 - 0.5
        && p[2] <= vol.dims[2] as f32 - 0.5
}

fn crop_centered(vol: &Volume, center: [usize; 3], out_side: usize) -> Volume {
    let mut out = Volume::new([out_side; 3], vol.spacing, vol.modality);
    let half = out_side as isize / 2;
    for z in 0..out_side {
        for y in 0..out_side {
            for x in 0..out_side {
                let sz = center[0] as isize + z as isize - half;
                let sy = center[1] as isize + y as isize - half;
                let sx = center[2] as isize + x as isize - half;
                let v = if sz >= 0
                    && sy >= 0
                    && sx >= 0
                    && (sz as usize) < vol.dims[0]
                    && (sy as usize) < vol.dims[1]
                    && (sx as usize) < vol.dims[2]
                {
                    vol.at(sz as usize, sy as usize, sx as usize)
                } else {
                    0.0
                };
                let i = out.idx(z, y, x);
                out.data[i] = v;
            }
        }
    }
    out
}

/// Resample both modalities to 1 mm isotropic, crop `out_side` cubes centred
/// on the lesion, Z-score the PET crop, and clip+scale the CT crop to [-1, 1].
pub fn preprocess(
    pet: &Volume,
    ct: &Volume,
    center: [usize; 3],
    out_side: usize,
) -> (Volume, Volume) {
    let pet_iso = resample_isotropic(pet);
    let ct_iso = resample_isotropic(ct);
    // Center was given on the original grid; move it to the isotropic grid.
    let center_iso = [
        (center[0] as f32 * pet.spacing[0]).round() as usize,
        (center[1] as f32 * pet.spacing[1]).round() as usize,
        (center[2] as f32 * pet.spacing[2]).round() as usize,
    ];
    let mut pet_c = crop_centered(&pet_iso, center_iso, out_side);
    let mut ct_c = crop_centered(&ct_iso, center_iso, out_side);

    let n = pet_c.numel() as f64;
    let mean: f64 = pet_c.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = pet_c
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-6);
    for v in pet_c.data.iter_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }

    for v in ct_c.data.iter_mut() {
        *v = v.clamp(-CT_CLIP, CT_CLIP) / CT_CLIP;
    }
    (pet_c, ct_c)
}

/// Nearest-neighbour preprocessing path for masks (no intensity transform).
pub fn preprocess_mask(mask: &Volume, center: [usize; 3], out_side: usize) -> Volume {
    let iso = resample_isotropic(mask);
    let center_iso = [
        (center[0] as f32 * mask.spacing[0]).round() as usize,
        (center[1] as f32 * mask.spacing[1]).round() as usize,
        (center[2] as f32 * mask.spacing[2]).round() as usize,
    ];
    crop_centered(&iso, center_iso, out_side)
}

/// Isotropic scale range of the augmentation. Slightly narrower than +-10%
/// so the induced mask-volume change (cubic in the linear scale) stays
/// safely below 30%.
pub const SCALE_RANGE: [f64; 2] = [0.94, 1.06];
const CROP_JITTER: isize = 2;

/// One shared random affine draw: per-axis rotation within +-10 degrees,
/// isotropic scale in `SCALE_RANGE`, translation within +-5 voxels, then a
/// shared crop offset (jittered around the lesion when a mask is available).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angles_rad: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
    pub crop_offset: [usize; 3],
}

fn clamp_offset(v: isize, dim: usize, out_side: usize) -> usize {
    v.clamp(0, dim.saturating_sub(out_side) as isize) as usize
}

impl AffineParams {
    pub fn identity(crop_offset: [usize; 3]) -> Self {
        AffineParams {
            angles_rad: [0.0; 3],
            scale: 1.0,
            translation: [0.0; 3],
            crop_offset,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, in_dims: [usize; 3], out_side: usize) -> Self {
        let max_angle = 10.0f64.to_radians();
        let angles_rad = [
            rng.gen_range(-max_angle..=max_angle),
            rng.gen_range(-max_angle..=max_angle),
            rng.gen_range(-max_angle..=max_angle),
        ];
        let scale = rng.gen_range(SCALE_RANGE[0]..=SCALE_RANGE[1]);
        let translation = [
            rng.gen_range(-5.0..=5.0),
            rng.gen_range(-5.0..=5.0),
            rng.gen_range(-5.0..=5.0),
        ];
        let crop_offset = std::array::from_fn(|a| {
            let centered = (in_dims[a].saturating_sub(out_side)) as isize / 2;
            clamp_offset(
                centered + rng.gen_range(-CROP_JITTER..=CROP_JITTER),
                in_dims[a],
                out_side,
            )
        });
        AffineParams {
            angles_rad,
            scale,
            translation,
            crop_offset,
        }
    }

    /// Rotation-and-scale matrix (Rz Ry Rx scaled), row-major.
    fn matrix(&self) -> [[f64; 3]; 3] {
        let [az, ay, ax] = self.angles_rad;
        let (sz, cz) = az.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sx, cx) = ax.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        };
        let mut m = mul(rz, mul(ry, rx));
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v *= self.scale;
            }
        }
        m
    }

    /// Inverse of the rotation/scale matrix.
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        // Rotation transposed, scale inverted.
        let m = self.matrix();
        let s2 = self.scale * self.scale;
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = m[j][i] / s2;
            }
        }
        inv
    }
}

fn apply_affine(vol: &Volume, params: &AffineParams, out_side: usize) -> Volume {
    let inv = params.inverse_matrix();
    let c = [
        (vol.dims[0] as f64 - 1.0) / 2.0,
        (vol.dims[1] as f64 - 1.0) / 2.0,
        (vol.dims[2] as f64 - 1.0) / 2.0,
    ];
    let nearest = vol.modality == Modality::Mask;
    let mut out = Volume::new([out_side; 3], vol.spacing, vol.modality);
    for z in 0..out_side {
        for y in 0..out_side {
            for x in 0..out_side {
                let o = [
                    (z + params.crop_offset[0]) as f64,
                    (y + params.crop_offset[1]) as f64,
                    (x + params.crop_offset[2]) as f64,
                ];
                // x_in = R^-1 (x_out - c - t) + c
                let rel = [
                    o[0] - c[0] - params.translation[0],
                    o[1] - c[1] - params.translation[1],
                    o[2] - c[2] - params.translation[2],
                ];
                let src = [
                    (inv[0][0] * rel[0] + inv[0][1] * rel[1] + inv[0][2] * rel[2] + c[0]) as f32,
                    (inv[1][0] * rel[0] + inv[1][1] * rel[1] + inv[1][2] * rel[2] + c[1]) as f32,
                    (inv[2][0] * rel[0] + inv[2][1] * rel[1] + inv[2][2] * rel[2] + c[2]) as f32,
                ];
                let i = out.idx(z, y, x);
                out.data[i] = if !in_bounds(vol, src) {
                    0.0
                } else if nearest {
                    sample_nearest(vol, src)
                } else {
                    sample_trilinear(vol, src)
                };
            }
        }
    }
    out
}

/// Apply one shared transform to every input (trilinear for images, nearest
/// for masks) and crop to `out_side` cubes.
pub fn augment_with_params(
    pet: &Volume,
    ct: &Volume,
    masks: &[&Volume],
    params: &AffineParams,
    out_side: usize,
) -> (Volume, Volume, Vec<Volume>) {
    let pet_out = apply_affine(pet, params, out_side);
    let ct_out = apply_affine(ct, params, out_side);
    let mask_out = masks.iter().map(|m| apply_affine(m, params, out_side)).collect();
    (pet_out, ct_out, mask_out)
}

/// Sample a transform and apply it. When a mask is supplied, the crop follows
/// the transformed lesion centroid (with jitter) so the target stays in view.
pub fn augment(
    pet: &Volume,
    ct: &Volume,
    masks: &[&Volume],
    rng: &mut ChaCha8Rng,
    out_side: usize,
) -> (Volume, Volume, Vec<Volume>) {
    let mut params = AffineParams::sample(rng, pet.dims, out_side);
    if let Some(first) = masks.first() {
        // Transform the mask over the full grid to find where the lesion
        // lands, then centre the crop there.
        let full = apply_affine(
            first,
            &AffineParams {
                crop_offset: [0; 3],
                ..params
            },
            first.dims[0],
        );
        let mut acc = [0.0f64; 3];
        let mut count = 0.0;
        for z in 0..full.dims[0] {
            for y in 0..full.dims[1] {
                for x in 0..full.dims[2] {
                    if full.at(z, y, x) > 0.5 {
                        acc[0] += z as f64;
                        acc[1] += y as f64;
                        acc[2] += x as f64;
                        count += 1.0;
                    }
                }
            }
        }
        if count > 0.0 {
            params.crop_offset = std::array::from_fn(|a| {
                let centered = (acc[a] / count).round() as isize - out_side as isize / 2;
                clamp_offset(
                    centered + rng.gen_range(-CROP_JITTER..=CROP_JITTER),
                    pet.dims[a],
                    out_side,
                )
            });
        }
    }
    augment_with_params(pet, ct, masks, &params, out_side)
}
