//! Volumes, the synthetic phantom benchmark, preprocessing, augmentation,
//! and file I/O (volume files and dataset manifests).

mod io;
mod phantom;
mod preprocess;

pub use io::{
    load_manifest, load_phantom, load_volume, save_manifest, save_phantom, save_volume,
    DataError, ManifestRow,
};
pub use phantom::{generate_phantom, ClinicalRow, HpvStatus, Phantom, PhantomSpec};
pub use preprocess::{
    augment, augment_with_params, preprocess, preprocess_mask, resample_isotropic, AffineParams,
};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Pet,
    Ct,
    Mask,
}

/// A 3D scalar grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Self {
        Volume {
            dims,
            spacing,
            modality,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(z, y, x)]
    }

    /// Voxel volume in cubic millimetres.
    pub fn voxel_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// `[1, 1, D, H, W]` tensor view of the volume.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_data(
            &[1, 1, self.dims[0], self.dims[1], self.dims[2]],
            self.data.clone(),
            false,
        )
    }

    pub fn mask_voxels(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.5).collect()
    }

    pub fn count_mask(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

#[cfg(test)]
mod tests;
