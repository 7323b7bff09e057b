//! Dice and Focal losses plus the DSC evaluation metric.

use crate::tensor::{Element, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("prediction and ground truth shapes differ: {pred:?} vs {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("ground truth must be binary; element {index} is {value}")]
    NonBinaryGroundTruth { index: usize, value: f64 },
}

/// Focal-loss parameters. `standard_negative_weight` switches the negative
/// term from its printed weight of 1 to the conventional `1 - alpha`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    pub standard_negative_weight: bool,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            standard_negative_weight: false,
        }
    }
}

fn check_pair<E: Element>(p: &Tensor<E>, g: &Tensor<E>) -> Result<(), SegmentationError> {
    if p.shape() != g.shape() {
        return Err(SegmentationError::ShapeMismatch {
            pred: p.shape().to_vec(),
            gt: g.shape().to_vec(),
        });
    }
    for (i, &v) in g.data().iter().enumerate() {
        let v = v.as_f64();
        if v != 0.0 && v != 1.0 {
            return Err(SegmentationError::NonBinaryGroundTruth { index: i, value: v });
        }
    }
    Ok(())
}

/// Soft Dice loss: `1 - (2 Σ p g + s) / (Σ p² + Σ g² + s)`.
pub fn dice_loss<E: Element>(
    p: &Tensor<E>,
    g: &Tensor<E>,
    smooth: f64,
) -> Result<Tensor<E>, SegmentationError> {
    check_pair(p, g)?;
    let s = E::of_f64(smooth);
    let num = p
        .mul(g)
        .unwrap()
        .sum()
        .mul_scalar(E::of_f64(2.0))
        .add_scalar(s);
    let denom = p
        .mul(p)
        .unwrap()
        .sum()
        .add(&g.mul(g).unwrap().sum())
        .unwrap()
        .add_scalar(s);
    let coeff = num.div(&denom).unwrap();
    Ok(coeff.neg().add_scalar(E::one()))
}

/// Focal loss, normalized by voxel count:
/// `-Σ [ α g (1-p)^γ log p + w (1-g) p^γ log(1-p) ] / n`
/// with `w = 1` as printed, or `1 - α` under the standard variant flag.
pub fn focal_loss<E: Element>(
    p: &Tensor<E>,
    g: &Tensor<E>,
    params: FocalParams,
) -> Result<Tensor<E>, SegmentationError> {
    check_pair(p, g)?;
    let eps = E::of_f64(FOCAL_EPS);
    let pc = p.clamp(eps, E::one() - eps);
    let one_minus_p = pc.neg().add_scalar(E::one());
    let one_minus_g = g.neg().add_scalar(E::one());
    let gamma = E::of_f64(params.gamma);

    let pos = g
        .mul(&one_minus_p.pow_scalar(gamma))
        .unwrap()
        .mul(&pc.log())
        .unwrap()
        .mul_scalar(E::of_f64(params.alpha));
    let neg_weight = if params.standard_negative_weight {
        1.0 - params.alpha
    } else {
        1.0
    };
    let neg = one_minus_g
        .mul(&pc.pow_scalar(gamma))
        .unwrap()
        .mul(&one_minus_p.log())
        .unwrap()
        .mul_scalar(E::of_f64(neg_weight));
    let n = p.numel() as f64;
    Ok(pos
        .add(&neg)
        .unwrap()
        .sum()
        .mul_scalar(E::of_f64(-1.0 / n)))
}

/// Dice similarity coefficient of two binary masks; two empty masks score 1.
pub fn dsc_metric(pred: &[bool], gt: &[bool]) -> Result<f64, SegmentationError> {
    if pred.len() != gt.len() {
        return Err(SegmentationError::ShapeMismatch {
            pred: vec![pred.len()],
            gt: vec![gt.len()],
        });
    }
    let mut inter = 0u64;
    let mut p_count = 0u64;
    let mut g_count = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        p_count += a as u64;
        g_count += b as u64;
        inter += (a && b) as u64;
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// Multi-task objective `L = L_surv + λ (L_PT + L_MLN)` where each
/// segmentation term is Dice + Focal. Branch pairs are optional so ablations
/// with a single decoder branch reuse the same combiner.
pub fn combined_loss<E: Element>(
    surv: &Tensor<E>,
    pt_pair: Option<(&Tensor<E>, &Tensor<E>)>,
    mln_pair: Option<(&Tensor<E>, &Tensor<E>)>,
    lambda: f64,
    focal: FocalParams,
) -> Result<Tensor<E>, SegmentationError> {
    let mut total = surv.clone();
    if lambda != 0.0 {
        for pair in [pt_pair, mln_pair].into_iter().flatten() {
            let (p, g) = pair;
            let seg = dice_loss(p, g, DICE_SMOOTH)?
                .add(&focal_loss(p, g, focal)?)
                .unwrap()
                .mul_scalar(E::of_f64(lambda));
            total = total.add(&seg).unwrap();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_data(shape, v, false)
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let g = t(&[8], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let loss = dice_loss(&g, &g, 1e-12).unwrap().item();
        assert!(loss.abs() < 1e-9, "loss {}", loss);
    }

    #[test]
    fn dice_disjoint_is_one() {
        let p = t(&[4], vec![1.0, 1.0, 0.0, 0.0]);
        let g = t(&[4], vec![0.0, 0.0, 1.0, 1.0]);
        let loss = dice_loss(&p, &g, 1e-5).unwrap().item();
        assert!((loss - 1.0).abs() < 1e-4, "loss {}", loss);
    }

    #[test]
    fn dice_matches_direct_sum_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = 64;
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| (rng.gen_bool(0.5)) as u8 as f64).collect();
            let smooth = 1e-5;
            let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            let pp: f64 = p.iter().map(|a| a * a).sum();
            let gg: f64 = g.iter().map(|a| a * a).sum();
            let want = 1.0 - (2.0 * pg + smooth) / (pp + gg + smooth);
            let got = dice_loss(&t(&[n], p), &t(&[n], g), smooth).unwrap().item();
            assert!((want - got).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn dice_rejects_non_binary_gt() {
        let p = t(&[2], vec![0.5, 0.5]);
        let g = t(&[2], vec![0.0, 0.3]);
        assert!(matches!(
            dice_loss(&p, &g, 1e-5),
            Err(SegmentationError::NonBinaryGroundTruth { index: 1, .. })
        ));
    }

    #[test]
    fn dice_decreases_toward_ground_truth() {
        let g = t(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        let base = vec![0.6, 0.4, 0.7, 0.2];
        let l0 = dice_loss(&t(&[4], base.clone()), &g, 1e-5).unwrap().item();
        // Move one voxel toward its label.
        let mut closer = base;
        closer[0] = 0.9;
        let l1 = dice_loss(&t(&[4], closer), &g, 1e-5).unwrap().item();
        assert!(l1 < l0);
    }

    #[test]
    fn focal_zero_at_perfect_prediction() {
        let g = t(&[6], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let loss = focal_loss(&g, &g, FocalParams::default()).unwrap().item();
        assert!(loss.abs() < 1e-5, "loss {}", loss);
    }

    #[test]
    fn focal_gamma_zero_reduces_to_weighted_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 32;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let params = FocalParams {
            alpha: 0.5,
            gamma: 0.0,
            standard_negative_weight: true,
        };
        let got = focal_loss(&t(&[n], p.clone()), &t(&[n], g.clone()), params)
            .unwrap()
            .item();
        let want: f64 = -p
            .iter()
            .zip(&g)
            .map(|(&pi, &gi)| 0.5 * gi * pi.ln() + 0.5 * (1.0 - gi) * (1.0 - pi).ln())
            .sum::<f64>()
            / n as f64;
        assert!((want - got).abs() < 1e-6, "{} vs {}", got, want);
    }

    #[test]
    fn focal_matches_term_by_term_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 64;
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
            let params = FocalParams::default();
            let want: f64 = -p
                .iter()
                .zip(&g)
                .map(|(&pi, &gi)| {
                    let pc = pi.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
                    params.alpha * gi * (1.0 - pc).powf(params.gamma) * pc.ln()
                        + (1.0 - gi) * pc.powf(params.gamma) * (1.0 - pc).ln()
                })
                .sum::<f64>()
                / n as f64;
            let got = focal_loss(&t(&[n], p), &t(&[n], g), params).unwrap().item();
            assert!((want - got).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn dsc_identical_disjoint_half() {
        let a = vec![true, true, false, false];
        assert_eq!(dsc_metric(&a, &a).unwrap(), 1.0);
        let b = vec![false, false, true, true];
        assert_eq!(dsc_metric(&a, &b).unwrap(), 0.0);
        let half = vec![true, false, true, false];
        let other = vec![true, false, false, true];
        assert_eq!(dsc_metric(&half, &other).unwrap(), 0.5);
    }

    #[test]
    fn dsc_both_empty_is_one_and_symmetric() {
        let empty = vec![false; 10];
        assert_eq!(dsc_metric(&empty, &empty).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.3)).collect();
        let b: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.3)).collect();
        assert_eq!(dsc_metric(&a, &b).unwrap(), dsc_metric(&b, &a).unwrap());
    }

    #[test]
    fn combined_loss_lambda_zero_is_survival_only() {
        let surv = Tensor::<f64>::scalar(1.23);
        let p = t(&[4], vec![0.2, 0.8, 0.5, 0.4]);
        let g = t(&[4], vec![0.0, 1.0, 1.0, 0.0]);
        let total = combined_loss(&surv, Some((&p, &g)), Some((&p, &g)), 0.0, FocalParams::default())
            .unwrap()
            .item();
        assert_eq!(total, 1.23);
    }

    #[test]
    fn combined_loss_zero_segmentation_terms() {
        let surv = Tensor::<f64>::scalar(0.77);
        let g = t(&[4], vec![0.0, 1.0, 1.0, 0.0]);
        // Perfect predictions zero out both segmentation terms (within eps).
        let total = combined_loss(&surv, Some((&g, &g)), Some((&g, &g)), 1.0, FocalParams::default())
            .unwrap()
            .item();
        assert!((total - 0.77).abs() < 1e-4, "total {}", total);
    }

    #[test]
    fn combined_loss_gradient_is_sum_of_term_gradients() {
        // Linearity: d/dp [surv + λ(dice+focal)] == λ d/dp dice + λ d/dp focal.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16;
        let pdata: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let gdata: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let g = t(&[n], gdata);

        let p1 = Tensor::<f64>::param(&[n], pdata.clone());
        let surv = Tensor::<f64>::scalar(0.5);
        combined_loss(&surv, Some((&p1, &g)), None, 0.7, FocalParams::default())
            .unwrap()
            .backward()
            .unwrap();
        let combined_grad = p1.grad().unwrap();

        let p2 = Tensor::<f64>::param(&[n], pdata.clone());
        dice_loss(&p2, &g, DICE_SMOOTH).unwrap().backward().unwrap();
        let dice_grad = p2.grad().unwrap();
        let p3 = Tensor::<f64>::param(&[n], pdata);
        focal_loss(&p3, &g, FocalParams::default())
            .unwrap()
            .backward()
            .unwrap();
        let focal_grad = p3.grad().unwrap();

        for i in 0..n {
            let want = 0.7 * (dice_grad[i] + focal_grad[i]);
            assert!(
                (combined_grad[i] - want).abs() < 1e-9,
                "voxel {}: {} vs {}",
                i,
                combined_grad[i],
                want
            );
        }
    }

    #[test]
    fn losses_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = 27;
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
            let d = dice_loss(&t(&[n], p.clone()), &t(&[n], g.clone()), 1e-5)
                .unwrap()
                .item();
            assert!((0.0..=1.0 + 1e-9).contains(&d));
            let f = focal_loss(&t(&[n], p), &t(&[n], g), FocalParams::default())
                .unwrap()
                .item();
            assert!(f >= 0.0);
        }
    }
}
