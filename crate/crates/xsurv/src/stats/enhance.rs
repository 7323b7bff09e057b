//! Radiomics enhancement: one CoxPH fit over the network's survival score,
//! the LASSO-selected radiomics features, and the screened clinical
//! indicators. The final risk score is the negated linear predictor, so
//! higher still means longer predicted survival.

use super::{cox_fit, zscore_fit, CoxModel, FeatureMatrix, Scaler, StatsError};
use crate::survival::SurvivalRecord;

#[derive(Debug, Clone)]
pub struct EnhanceModel {
    pub cox: CoxModel,
    pub scaler: Scaler,
}

pub const SCORE_COLUMN: &str = "xsurv_score";

fn assemble(
    score: &[f64],
    radiomics: Option<&FeatureMatrix>,
    clinical: Option<&FeatureMatrix>,
) -> Result<FeatureMatrix, StatsError> {
    let score_matrix = FeatureMatrix {
        names: vec![SCORE_COLUMN.to_string()],
        rows: score.iter().map(|&s| vec![s]).collect(),
    };
    let mut parts = vec![&score_matrix];
    if let Some(r) = radiomics {
        parts.push(r);
    }
    if let Some(c) = clinical {
        parts.push(c);
    }
    FeatureMatrix::hcat(&parts)
}

/// Fit the enhancement on training rows and return the training risk scores
/// together with the model for held-out application. With no radiomics and no
/// clinical block the final ranking reduces to the score's own ranking.
pub fn enhance(
    score: &[f64],
    radiomics: Option<&FeatureMatrix>,
    clinical: Option<&FeatureMatrix>,
    records: &[SurvivalRecord],
) -> Result<(Vec<f64>, EnhanceModel), StatsError> {
    if score.len() != records.len() {
        return Err(StatsError::Misaligned(format!(
            "{} scores vs {} records",
            score.len(),
            records.len()
        )));
    }
    let combined = assemble(score, radiomics, clinical)?;
    let (standardized, scaler) = zscore_fit(&combined)?;
    let cox = cox_fit(&standardized, records)?;
    let model = EnhanceModel { cox, scaler };
    let scores = model.apply(score, radiomics, clinical)?;
    Ok((scores, model))
}

impl EnhanceModel {
    pub fn apply(
        &self,
        score: &[f64],
        radiomics: Option<&FeatureMatrix>,
        clinical: Option<&FeatureMatrix>,
    ) -> Result<Vec<f64>, StatsError> {
        let combined = assemble(score, radiomics, clinical)?;
        let standardized = self.scaler.apply(&combined)?;
        Ok(standardized
            .rows
            .iter()
            .map(|r| {
                -r.iter()
                    .zip(&self.cox.coefficients)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect())
    }
}
