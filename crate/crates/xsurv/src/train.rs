//! The training loop: censored/uncensored-balanced batching, the staged
//! learning-rate schedule, per-iteration augmentation, and validation-based
//! checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Phantom, Volume};
use crate::model::{ForwardOutput, ModelError, XSurv};
use crate::segmentation::{dice_loss, dsc_metric, focal_loss, FocalParams, DICE_SMOOTH};
use crate::stats::StatsError;
use crate::survival::{
    build_intervals, concordance_index, make_labels, predict_rfs, IntervalScheme, SurvivalError,
    SurvivalLabels,
};
use crate::tensor::{adam_step, concat, AdamParams, AdamState, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    InvalidConfig(String),
    #[error("balanced batching needs both strata; {0} stratum is empty")]
    EmptyStratum(&'static str),
    #[error("non-finite loss at iteration {0}; aborting with the last good checkpoint")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("segmentation: {0}")]
    Segmentation(String),
}

/// Training hyperparameters. The learning-rate stage boundaries are given for
/// a 12000-iteration run and rescale proportionally to `total_iters`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    /// `(boundary_iteration, learning_rate)` pairs at the 12000-iteration
    /// reference scale, first boundary 0.
    pub lr_stages: Vec<(u64, f64)>,
    /// Reference iteration count the stage boundaries are expressed in.
    pub lr_reference_iters: u64,
    pub validate_every: u64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Training crop side in voxels.
    pub crop_side: usize,
    /// Disable augmentation (center crops only), for determinism checks.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            batch_size: 2,
            lr_stages: vec![(0, 1e-4), (4000, 5e-5), (8000, 1e-5)],
            lr_reference_iters: 12000,
            validate_every: 200,
            lambda: 1.0,
            weight_decay: 1e-4,
            dropout: 0.3,
            seed: 0,
            crop_side: 32,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.lr_stages.is_empty() || self.lr_stages[0].0 != 0 {
            return Err(TrainError::InvalidConfig(
                "lr_stages must start at iteration 0".into(),
            ));
        }
        for w in self.lr_stages.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(TrainError::InvalidConfig(
                    "lr stage boundaries must increase".into(),
                ));
            }
            if w[1].1 > w[0].1 {
                return Err(TrainError::InvalidConfig(
                    "lr stages must be non-increasing".into(),
                ));
            }
        }
        if self.validate_every == 0 || self.total_iters % self.validate_every != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "validate_every ({}) must divide total_iters ({})",
                self.validate_every, self.total_iters
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate with boundaries scaled from the reference
/// iteration count to `cfg.total_iters`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr_stages[0].1;
    for &(boundary, rate) in &cfg.lr_stages {
        let scaled = boundary * cfg.total_iters / cfg.lr_reference_iters.max(1);
        if iter >= scaled {
            lr = rate;
        }
    }
    lr
}

/// Stream of index batches holding equally many censored and uncensored
/// samples. Each stratum cycles independently: shuffled per pass, reshuffled
/// (with replacement across passes) whenever it runs out.
pub struct BalancedBatches {
    censored: Vec<usize>,
    uncensored: Vec<usize>,
    c_pos: usize,
    u_pos: usize,
    half: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatches {
    pub fn new(censored_flags: &[bool], batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        let censored: Vec<usize> = censored_flags
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| i)
            .collect();
        let uncensored: Vec<usize> = censored_flags
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(i, _)| i)
            .collect();
        if censored.is_empty() {
            return Err(TrainError::EmptyStratum("censored"));
        }
        if uncensored.is_empty() {
            return Err(TrainError::EmptyStratum("uncensored"));
        }
        let mut out = BalancedBatches {
            censored,
            uncensored,
            c_pos: 0,
            u_pos: 0,
            half: batch_size / 2,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        out.censored.sort_unstable();
        out.uncensored.sort_unstable();
        out.censored.shuffle(&mut out.rng);
        out.uncensored.shuffle(&mut out.rng);
        Ok(out)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.half * 2);
        for _ in 0..self.half {
            if self.c_pos >= self.censored.len() {
                self.censored.shuffle(&mut self.rng);
                self.c_pos = 0;
            }
            batch.push(self.censored[self.c_pos]);
            self.c_pos += 1;
        }
        for _ in 0..self.half {
            if self.u_pos >= self.uncensored.len() {
                self.uncensored.shuffle(&mut self.rng);
                self.u_pos = 0;
            }
            batch.push(self.uncensored[self.u_pos]);
            self.u_pos += 1;
        }
        batch
    }
}

/// One row of the metric log, written every `validate_every` iterations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub iter: u64,
    pub train_loss: f64,
    pub val_cindex: f64,
    pub val_dsc_pt: f64,
    pub val_dsc_mln: f64,
}

pub struct TrainOutcome {
    /// Parameter snapshot with the highest validation C-index.
    pub best_params: Vec<Vec<f32>>,
    pub best_iter: u64,
    pub best_val_cindex: f64,
    pub log: Vec<MetricRow>,
    pub scheme: IntervalScheme,
    /// Set when training aborted on a non-finite loss.
    pub aborted: Option<TrainError>,
}

fn volume_batch(vols: &[Volume]) -> Tensor<f32> {
    let tensors: Vec<Tensor<f32>> = vols.iter().map(|v| v.to_tensor()).collect();
    concat(&tensors, 0).expect("uniform crop shapes")
}

fn mask_tensor(v: &Volume) -> Tensor<f32> {
    v.to_tensor()
}

/// Preprocess a phantom at its full grid side: isotropic resample, lesion
/// re-centred crop, intensity normalization. Training augments this down to
/// the crop side; evaluation takes the plain center crop, so both paths see
/// identically normalized intensities.
pub fn prepare_full(p: &Phantom) -> (Volume, Volume, Volume, Volume) {
    let side = p.pet.dims[0];
    let (pet, ct) = crate::data::preprocess(&p.pet, &p.ct, p.center, side);
    let pt = crate::data::preprocess_mask(&p.pt_mask, p.center, side);
    let mln = crate::data::preprocess_mask(&p.mln_mask, p.center, side);
    (pet, ct, pt, mln)
}

fn center_crop_all(
    pet: &Volume,
    ct: &Volume,
    masks: &[&Volume],
    crop_side: usize,
) -> (Volume, Volume, Vec<Volume>) {
    let offset = [(pet.dims[0].saturating_sub(crop_side)) / 2; 3];
    crate::data::augment_with_params(
        pet,
        ct,
        masks,
        &crate::data::AffineParams::identity(offset),
        crop_side,
    )
}

/// Evaluate C-index and mean per-patient DSC over a sample set, eval mode,
/// center crops.
pub fn evaluate(
    model: &XSurv<f32>,
    samples: &[Phantom],
    scheme: &IntervalScheme,
    crop_side: usize,
) -> Result<(f64, f64, f64), TrainError> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut dsc_pt = Vec::new();
    let mut dsc_mln = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in samples {
        let (pet_f, ct_f, pt_f, mln_f) = prepare_full(p);
        let (pet, ct, gts) = center_crop_all(&pet_f, &ct_f, &[&pt_f, &mln_f], crop_side);
        let (pt_gt, mln_gt) = (&gts[0], &gts[1]);
        let out = model.forward(&pet.to_tensor(), &ct.to_tensor(), false, &mut rng)?;
        let s_pred: Vec<f64> = out.s_pred.to_vec().iter().map(|&v| v as f64).collect();
        scores.push(predict_rfs(&s_pred, scheme));
        if let Some(prob) = &out.pt_prob {
            let pred: Vec<bool> = prob.to_vec().iter().map(|&v| v > 0.5).collect();
            dsc_pt.push(
                dsc_metric(&pred, &pt_gt.mask_voxels())
                    .map_err(|e| TrainError::Segmentation(e.to_string()))?,
            );
        }
        if let Some(prob) = &out.mln_prob {
            let pred: Vec<bool> = prob.to_vec().iter().map(|&v| v > 0.5).collect();
            dsc_mln.push(
                dsc_metric(&pred, &mln_gt.mask_voxels())
                    .map_err(|e| TrainError::Segmentation(e.to_string()))?,
            );
        }
    }
    let records: Vec<crate::survival::SurvivalRecord> = samples.iter().map(|p| p.record).collect();
    let cindex = concordance_index(&scores, &records)?;
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok((cindex, mean(&dsc_pt), mean(&dsc_mln)))
}

/// Predicted RFS scores for a sample set (eval mode).
pub fn predict_scores(
    model: &XSurv<f32>,
    samples: &[Phantom],
    scheme: &IntervalScheme,
    crop_side: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    samples
        .iter()
        .map(|p| {
            let (pet_f, ct_f, pt_f, mln_f) = prepare_full(p);
            let (pet, ct, _) = center_crop_all(&pet_f, &ct_f, &[&pt_f, &mln_f], crop_side);
            let out = model.forward(&pet.to_tensor(), &ct.to_tensor(), false, &mut rng)?;
            let s_pred: Vec<f64> = out.s_pred.to_vec().iter().map(|&v| v as f64).collect();
            Ok(predict_rfs(&s_pred, scheme))
        })
        .collect()
}

struct SampleTensors {
    pet: Volume,
    ct: Volume,
    pt_mask: Volume,
    mln_mask: Volume,
    labels: SurvivalLabels,
}

/// Train on phantoms held in memory. Augmentation, batching, dropout, and
/// initialization all derive from `cfg.seed`, so two runs with the same seed
/// produce identical metric logs.
pub fn train(
    model: &XSurv<f32>,
    train_set: &[Phantom],
    val_set: &[Phantom],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let times: Vec<f64> = train_set.iter().map(|p| p.record.time_days).collect();
    let scheme = build_intervals(&times, model.config.n_intervals)?;
    let labels: Vec<SurvivalLabels> = train_set
        .iter()
        .map(|p| make_labels(&p.record, &scheme))
        .collect::<Result<_, _>>()?;

    let censored_flags: Vec<bool> = train_set.iter().map(|p| p.record.censored).collect();
    let mut batches = BalancedBatches::new(&censored_flags, cfg.batch_size, cfg.seed)?;

    let params = model.params();
    let tensors: Vec<Tensor<f32>> = params.iter().map(|p| p.tensor.clone()).collect();
    let decay_mask: Vec<bool> = params.iter().map(|p| p.decay).collect();
    let mut adam = AdamState::for_params(&tensors, AdamParams::default());

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xA06));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xD20));
    let focal = FocalParams::default();

    let mut best_params: Vec<Vec<f32>> = tensors.iter().map(|t| t.to_vec()).collect();
    let mut best_iter = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut recent_loss = 0.0;
    let mut recent_count = 0.0f64;

    for iter in 0..cfg.total_iters {
        let batch = batches.next_batch();
        let samples: Vec<SampleTensors> = batch
            .iter()
            .map(|&i| {
                let p = &train_set[i];
                let (pet_p, ct_p, pt_m, mln_m) = prepare_full(p);
                let (pet, ct, masks) = if cfg.augment {
                    augment(&pet_p, &ct_p, &[&pt_m, &mln_m], &mut aug_rng, cfg.crop_side)
                } else {
                    center_crop_all(&pet_p, &ct_p, &[&pt_m, &mln_m], cfg.crop_side)
                };
                SampleTensors {
                    pet,
                    ct,
                    pt_mask: masks[0].clone(),
                    mln_mask: masks[1].clone(),
                    labels: labels[i].clone(),
                }
            })
            .collect();

        let pet_batch = volume_batch(&samples.iter().map(|s| s.pet.clone()).collect::<Vec<_>>());
        let ct_batch = volume_batch(&samples.iter().map(|s| s.ct.clone()).collect::<Vec<_>>());
        let out: ForwardOutput<f32> = model.forward(&pet_batch, &ct_batch, true, &mut dropout_rng)?;

        let batch_labels: Vec<SurvivalLabels> = samples.iter().map(|s| s.labels.clone()).collect();
        let surv = crate::survival::survival_loss(&out.s_pred, &batch_labels, 1e-7)?;
        let mut total = surv;
        if cfg.lambda != 0.0 {
            let b = samples.len();
            for (bi, s) in samples.iter().enumerate() {
                for (prob, gt) in [
                    (out.pt_prob.as_ref(), &s.pt_mask),
                    (out.mln_prob.as_ref(), &s.mln_mask),
                ] {
                    let Some(prob) = prob else { continue };
                    let p_i = prob.narrow(0, bi, 1).map_err(ModelError::Tensor)?;
                    let g_i = mask_tensor(gt);
                    let seg = dice_loss(&p_i, &g_i, DICE_SMOOTH)
                        .and_then(|d| Ok(d.add(&focal_loss(&p_i, &g_i, focal)?).unwrap()))
                        .map_err(|e| TrainError::Segmentation(e.to_string()))?;
                    total = total
                        .add(&seg.mul_scalar(cfg.lambda as f32 / b as f32))
                        .unwrap();
                }
            }
        }
        let loss_value = total.item() as f64;
        if !loss_value.is_finite() {
            let err = TrainError::NonFiniteLoss(iter);
            return Ok(TrainOutcome {
                best_params,
                best_iter,
                best_val_cindex: best_val,
                log,
                scheme,
                aborted: Some(err),
            });
        }
        recent_loss += loss_value;
        recent_count += 1.0;

        for t in &tensors {
            t.zero_grad();
        }
        total.backward().map_err(ModelError::Tensor)?;
        adam_step(&tensors, &decay_mask, &mut adam, lr_at(iter, cfg), cfg.weight_decay);

        if (iter + 1) % cfg.validate_every == 0 {
            let (cindex, dsc_pt, dsc_mln) = evaluate(model, val_set, &scheme, cfg.crop_side)?;
            log.push(MetricRow {
                iter: iter + 1,
                train_loss: recent_loss / recent_count.max(1.0),
                val_cindex: cindex,
                val_dsc_pt: dsc_pt,
                val_dsc_mln: dsc_mln,
            });
            recent_loss = 0.0;
            recent_count = 0.0;
            if cindex > best_val {
                best_val = cindex;
                best_iter = iter + 1;
                best_params = tensors.iter().map(|t| t.to_vec()).collect();
            }
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_iter,
        best_val_cindex: best_val,
        log,
        scheme,
        aborted: None,
    })
}

/// Copy a parameter snapshot back into the model.
pub fn restore_params(model: &XSurv<f32>, snapshot: &[Vec<f32>]) {
    for (p, saved) in model.params().iter().zip(snapshot) {
        p.tensor.data_mut().copy_from_slice(saved);
    }
}

pub fn save_metric_log(path: &std::path::Path, log: &[MetricRow]) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
