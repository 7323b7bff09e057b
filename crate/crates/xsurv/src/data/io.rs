//! Volume files and dataset manifests.
//!
//! A `.vol` file is a TOML header (dims, spacing, modality, dtype tag), a
//! marker line, and the raw little-endian f32 payload. The manifest is a CSV
//! with one row per patient: file paths, lesion center, survival label, and
//! clinical columns.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClinicalRow, HpvStatus, Modality, Volume};
use crate::survival::SurvivalRecord;

const MARKER: &[u8] = b"\n@@DATA@@\n";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed volume header: {0}")]
    MalformedHeader(String),
    #[error("header promises {expected} voxels but payload holds {got}")]
    PayloadMismatch { expected: usize, got: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("no feasible lesion layout after 100 attempts")]
    InfeasibleGeometry,
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    modality: Modality,
    dtype: String,
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<(), DataError> {
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing,
        modality: vol.modality,
        dtype: "f32le".into(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| DataError::MalformedHeader(format!("encode: {}", e)))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    file.write_all(MARKER)?;
    let mut buf = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let marker_at = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| DataError::MalformedHeader("missing data marker".into()))?;
    let text = std::str::from_utf8(&bytes[..marker_at])
        .map_err(|e| DataError::MalformedHeader(format!("not utf-8: {}", e)))?;
    let header: VolumeHeader =
        toml::from_str(text).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(DataError::MalformedHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let payload = &bytes[marker_at + MARKER.len()..];
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    if payload.len() != expected * 4 {
        return Err(DataError::PayloadMismatch {
            expected,
            got: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume {
        dims: header.dims,
        spacing: header.spacing_mm,
        modality: header.modality,
        data,
    })
}

/// One manifest line: volume paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub pet: String,
    pub ct: String,
    pub pt_mask: String,
    pub mln_mask: String,
    pub center_z: usize,
    pub center_y: usize,
    pub center_x: usize,
    pub time_days: f64,
    pub censored: u8,
    pub age_years: f64,
    pub weight_kg: f64,
    pub male: u8,
    pub hpv: String,
    pub chemotherapy: u8,
}

impl ManifestRow {
    pub fn record(&self) -> SurvivalRecord {
        SurvivalRecord {
            time_days: self.time_days,
            censored: self.censored != 0,
        }
    }

    pub fn center(&self) -> [usize; 3] {
        [self.center_z, self.center_y, self.center_x]
    }

    pub fn clinical(&self) -> ClinicalRow {
        ClinicalRow {
            age_years: self.age_years,
            weight_kg: self.weight_kg,
            male: self.male != 0,
            hpv: match self.hpv.as_str() {
                "positive" => HpvStatus::Positive,
                "negative" => HpvStatus::Negative,
                _ => HpvStatus::Unknown,
            },
            chemotherapy: self.chemotherapy != 0,
        }
    }
}

pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Manifest(e.to_string()))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| DataError::Manifest(e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| DataError::Manifest(e.to_string())))
        .collect()
}

/// Write a phantom's four volumes under `dir` and return its manifest row.
pub fn save_phantom(dir: &Path, id: &str, p: &super::Phantom) -> Result<ManifestRow, DataError> {
    let files = [
        (format!("{}_pet.vol", id), &p.pet),
        (format!("{}_ct.vol", id), &p.ct),
        (format!("{}_pt.vol", id), &p.pt_mask),
        (format!("{}_mln.vol", id), &p.mln_mask),
    ];
    for (name, vol) in &files {
        save_volume(&dir.join(name), vol)?;
    }
    Ok(ManifestRow {
        patient_id: id.to_string(),
        pet: files[0].0.clone(),
        ct: files[1].0.clone(),
        pt_mask: files[2].0.clone(),
        mln_mask: files[3].0.clone(),
        center_z: p.center[0],
        center_y: p.center[1],
        center_x: p.center[2],
        time_days: p.record.time_days,
        censored: p.record.censored as u8,
        age_years: p.clinical.age_years,
        weight_kg: p.clinical.weight_kg,
        male: p.clinical.male as u8,
        hpv: match p.clinical.hpv {
            HpvStatus::Positive => "positive".into(),
            HpvStatus::Negative => "negative".into(),
            HpvStatus::Unknown => "unknown".into(),
        },
        chemotherapy: p.clinical.chemotherapy as u8,
    })
}

/// Rebuild an in-memory phantom from its manifest row. Generator-only ground
/// truth (true volume/uptake/hazard) is not stored and reads back as zero.
pub fn load_phantom(dir: &Path, row: &ManifestRow) -> Result<super::Phantom, DataError> {
    Ok(super::Phantom {
        pet: load_volume(&dir.join(&row.pet))?,
        ct: load_volume(&dir.join(&row.ct))?,
        pt_mask: load_volume(&dir.join(&row.pt_mask))?,
        mln_mask: load_volume(&dir.join(&row.mln_mask))?,
        clinical: row.clinical(),
        record: row.record(),
        center: row.center(),
        true_volume_mm3: 0.0,
        true_mean_uptake: 0.0,
        true_hazard_rate: 0.0,
    })
}
