//! Survival statistics: Cox proportional-hazards fitting, significance
//! screening of clinical indicators, LASSO feature selection, and the
//! radiomics enhancement of the model's survival score.

mod cox;
mod enhance;
mod lasso;

pub use cox::{cox_fit, cox_screen, CoxData, CoxModel};
pub use enhance::{enhance, EnhanceModel};
pub use lasso::{default_lambda_grid, lasso_select, LassoResult};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("need at least 2 uncensored events, found {0}")]
    TooFewEvents(usize),
    #[error("feature matrix: {0}")]
    BadMatrix(String),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("rows misaligned: {0}")]
    Misaligned(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Patients by rows, named features by columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>) -> Self {
        FeatureMatrix {
            names,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.names.len());
        self.rows.push(row);
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Keep only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureMatrix, StatsError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| StatsError::BadMatrix(format!("no column named {:?}", n)))
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureMatrix {
            names: names.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&j| r[j]).collect())
                .collect(),
        })
    }

    /// Column-concatenate several matrices with aligned rows.
    pub fn hcat(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix, StatsError> {
        let n = parts.first().map(|p| p.n_rows()).unwrap_or(0);
        if parts.iter().any(|p| p.n_rows() != n) {
            return Err(StatsError::Misaligned(format!(
                "row counts {:?}",
                parts.iter().map(|p| p.n_rows()).collect::<Vec<_>>()
            )));
        }
        let mut names = Vec::new();
        for p in parts {
            names.extend(p.names.iter().cloned());
        }
        let mut rows = vec![Vec::new(); n];
        for p in parts {
            for (dst, src) in rows.iter_mut().zip(&p.rows) {
                dst.extend_from_slice(src);
            }
        }
        Ok(FeatureMatrix { names, rows })
    }

    /// Delimited text with a header row.
    pub fn save_csv(&self, path: &Path) -> Result<(), StatsError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| StatsError::BadMatrix(e.to_string()))?;
        w.write_record(&self.names)
            .map_err(|e| StatsError::BadMatrix(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{:.10e}", v)))
                .map_err(|e| StatsError::BadMatrix(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<FeatureMatrix, StatsError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| StatsError::BadMatrix(e.to_string()))?;
        let names: Vec<String> = r
            .headers()
            .map_err(|e| StatsError::BadMatrix(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| StatsError::BadMatrix(e.to_string()))?;
            let row: Vec<f64> = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| StatsError::BadMatrix(format!("{:?}: {}", v, e)))
                })
                .collect::<Result<_, _>>()?;
            if row.len() != names.len() {
                return Err(StatsError::BadMatrix(format!(
                    "row of {} values under {} columns",
                    row.len(),
                    names.len()
                )));
            }
            rows.push(row);
        }
        Ok(FeatureMatrix { names, rows })
    }
}

/// Z-score standardization fitted on `fit` rows: zero-variance columns are
/// dropped and recorded on the returned scaler.
pub fn zscore_fit(matrix: &FeatureMatrix) -> Result<(FeatureMatrix, Scaler), StatsError> {
    if matrix.n_rows() < 2 {
        return Err(StatsError::BadMatrix(format!(
            "need >= 2 rows to standardize, got {}",
            matrix.n_rows()
        )));
    }
    let n = matrix.n_rows() as f64;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for j in 0..matrix.n_cols() {
        let col = matrix.column(j);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::BadMatrix(format!(
                "column {:?} contains non-finite values",
                matrix.names[j]
            )));
        }
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 {
            dropped.push(matrix.names[j].clone());
        } else {
            keep.push(j);
            means.push(mean);
            stds.push(std);
        }
    }
    let names: Vec<String> = keep.iter().map(|&j| matrix.names[j].clone()).collect();
    let scaler = Scaler {
        names: names.clone(),
        means,
        stds,
        dropped,
    };
    let rows = matrix
        .rows
        .iter()
        .map(|r| {
            keep.iter()
                .enumerate()
                .map(|(k, &j)| (r[j] - scaler.means[k]) / scaler.stds[k])
                .collect()
        })
        .collect();
    Ok((FeatureMatrix { names, rows }, scaler))
}

/// Saved standardization parameters, applied to held-out rows.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Scaler {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub dropped: Vec<String>,
}

impl Scaler {
    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix, StatsError> {
        let sel = matrix.select(&self.names)?;
        let rows = sel
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(k, v)| (v - self.means[k]) / self.stds[k])
                    .collect()
            })
            .collect();
        Ok(FeatureMatrix {
            names: self.names.clone(),
            rows,
        })
    }
}
