//! Single-level separable 3D Haar decomposition with orthonormal scaling
//! (1/sqrt(2) per axis), plus the exact inverse.

/// Pad an axis length up to even by reflecting the last slice.
fn pad_even(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let target = [
        dims[0] + dims[0] % 2,
        dims[1] + dims[1] % 2,
        dims[2] + dims[2] % 2,
    ];
    if target == dims {
        return (data.to_vec(), dims);
    }
    let mut out = vec![0.0; target[0] * target[1] * target[2]];
    for z in 0..target[0] {
        let sz = if z < dims[0] { z } else { 2 * dims[0] - 1 - z };
        for y in 0..target[1] {
            let sy = if y < dims[1] { y } else { 2 * dims[1] - 1 - y };
            for x in 0..target[2] {
                let sx = if x < dims[2] { x } else { 2 * dims[2] - 1 - x };
                out[(z * target[1] + y) * target[2] + x] =
                    data[(sz * dims[1] + sy) * dims[2] + sx];
            }
        }
    }
    (out, target)
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Sub-band order: index bit 2 = high along D, bit 1 = high along H,
/// bit 0 = high along W. `LLL` is index 0, `HHH` index 7.
pub const BAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

pub struct HaarBands {
    /// Half-resolution grid shared by all eight bands.
    pub dims: [usize; 3],
    pub bands: [Vec<f64>; 8],
    /// Dims of the (possibly padded) input grid the transform ran on.
    pub padded_dims: [usize; 3],
}

/// Decompose a volume; odd axes are reflect-padded to even first.
pub fn haar3d(data: &[f64], dims: [usize; 3]) -> HaarBands {
    let (padded, pdims) = pad_even(data, dims);
    let half = [pdims[0] / 2, pdims[1] / 2, pdims[2] / 2];
    let n = half[0] * half[1] * half[2];
    let mut bands: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; n]);
    let idx = |z: usize, y: usize, x: usize| (z * pdims[1] + y) * pdims[2] + x;
    for z in 0..half[0] {
        for y in 0..half[1] {
            for x in 0..half[2] {
                // Gather the 2x2x2 block and apply the tensor-product Haar
                // butterfly one axis at a time.
                let mut block = [0.0f64; 8];
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            block[dz * 4 + dy * 2 + dx] =
                                padded[idx(2 * z + dz, 2 * y + dy, 2 * x + dx)];
                        }
                    }
                }
                // W axis.
                let mut tmp = [0.0f64; 8];
                for k in 0..4 {
                    tmp[k * 2] = (block[k * 2] + block[k * 2 + 1]) / SQRT2;
                    tmp[k * 2 + 1] = (block[k * 2] - block[k * 2 + 1]) / SQRT2;
                }
                // H axis.
                let mut tmp2 = [0.0f64; 8];
                for dz in 0..2 {
                    for dx in 0..2 {
                        let a = tmp[dz * 4 + dx];
                        let b = tmp[dz * 4 + 2 + dx];
                        tmp2[dz * 4 + dx] = (a + b) / SQRT2;
                        tmp2[dz * 4 + 2 + dx] = (a - b) / SQRT2;
                    }
                }
                // D axis.
                let out = z * half[1] * half[2] + y * half[2] + x;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let a = tmp2[dy * 2 + dx];
                        let b = tmp2[4 + dy * 2 + dx];
                        bands[dy * 2 + dx][out] = (a + b) / SQRT2;
                        bands[4 + dy * 2 + dx][out] = (a - b) / SQRT2;
                    }
                }
            }
        }
    }
    HaarBands {
        dims: half,
        bands,
        padded_dims: pdims,
    }
}

/// Exact inverse on the padded grid.
pub fn haar3d_inverse(bands: &HaarBands) -> Vec<f64> {
    let half = bands.dims;
    let pdims = bands.padded_dims;
    let mut out = vec![0.0; pdims[0] * pdims[1] * pdims[2]];
    let idx = |z: usize, y: usize, x: usize| (z * pdims[1] + y) * pdims[2] + x;
    for z in 0..half[0] {
        for y in 0..half[1] {
            for x in 0..half[2] {
                let src = z * half[1] * half[2] + y * half[2] + x;
                let mut block = [0.0f64; 8];
                for b in 0..8 {
                    block[b] = bands.bands[b][src];
                }
                // Invert D axis.
                let mut tmp = [0.0f64; 8];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let lo = block[dy * 2 + dx];
                        let hi = block[4 + dy * 2 + dx];
                        tmp[dy * 2 + dx] = (lo + hi) / SQRT2;
                        tmp[4 + dy * 2 + dx] = (lo - hi) / SQRT2;
                    }
                }
                // Invert H axis.
                let mut tmp2 = [0.0f64; 8];
                for dz in 0..2 {
                    for dx in 0..2 {
                        let lo = tmp[dz * 4 + dx];
                        let hi = tmp[dz * 4 + 2 + dx];
                        tmp2[dz * 4 + dx] = (lo + hi) / SQRT2;
                        tmp2[dz * 4 + 2 + dx] = (lo - hi) / SQRT2;
                    }
                }
                // Invert W axis.
                for k in 0..4 {
                    let lo = tmp2[k * 2];
                    let hi = tmp2[k * 2 + 1];
                    let a = (lo + hi) / SQRT2;
                    let b = (lo - hi) / SQRT2;
                    let dz = k / 2;
                    let dy = k % 2;
                    out[idx(2 * z + dz, 2 * y + dy, 2 * x)] = a;
                    out[idx(2 * z + dz, 2 * y + dy, 2 * x + 1)] = b;
                }
            }
        }
    }
    out
}
