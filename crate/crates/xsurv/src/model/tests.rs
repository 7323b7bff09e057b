use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn rvol(rng: &mut ChaCha8Rng, shape: &[usize], requires_grad: bool) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_data(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), requires_grad)
}

use crate::tensor::Tensor;

/// Small 4-stage config that exercises every block type. Window 3 keeps
/// shifted attention non-degenerate at the deepest stages (window 2 with
/// shift 1 would put every token of a 4-wide axis in its own mask region).
fn small_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.n_conv = vec![1, 1, 1, 1];
    cfg
}

#[test]
fn default_config_validates() {
    ModelConfig::default().validate().unwrap();
    ModelConfig::tiny().validate().unwrap();
}

#[test]
fn config_rejects_inconsistent_lengths() {
    let mut cfg = ModelConfig::default();
    cfg.enc_channels.pop();
    assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));

    let mut cfg = ModelConfig::default();
    cfg.heads[1] = 0; // n_trans[1] is 2
    assert!(cfg.validate().is_err());

    let mut cfg = ModelConfig::default();
    cfg.ablation = Ablation::EarlyFusion; // still has cross stages
    assert!(cfg.validate().is_err());
}

#[test]
fn same_seed_builds_identical_models() {
    let cfg = small_cfg();
    let a = XSurv::<f32>::build(&cfg, 7).unwrap();
    let b = XSurv::<f32>::build(&cfg, 7).unwrap();
    let (pa, pb) = (a.params(), b.params());
    assert_eq!(pa.len(), pb.len());
    assert!(a.n_parameters() > 0);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.tensor.to_vec(), y.tensor.to_vec());
    }
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let oa = a.forward(&pet, &ct, false, &mut rng()).unwrap();
    let ob = b.forward(&pet, &ct, false, &mut rng()).unwrap();
    assert_eq!(oa.s_pred.to_vec(), ob.s_pred.to_vec());
    assert_eq!(
        oa.pt_prob.unwrap().to_vec(),
        ob.pt_prob.unwrap().to_vec()
    );
}

#[test]
fn forward_shape_contract_with_padding() {
    // 18^3 is not divisible by 8: exercises internal pad-and-crop.
    let cfg = small_cfg();
    let model = XSurv::<f32>::build(&cfg, 1).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[2, 1, 18, 18, 18], false);
    let ct = rvol(&mut r, &[2, 1, 18, 18, 18], false);
    let out = model.forward(&pet, &ct, false, &mut rng()).unwrap();
    assert_eq!(out.pt_prob.as_ref().unwrap().shape(), &[2, 1, 18, 18, 18]);
    assert_eq!(out.mln_prob.as_ref().unwrap().shape(), &[2, 1, 18, 18, 18]);
    assert_eq!(out.s_pred.shape(), &[2, 10]);
    assert_eq!(out.attention.len(), 4);
    // Probabilities live strictly inside (0, 1).
    assert!(out
        .pt_prob
        .unwrap()
        .to_vec()
        .iter()
        .all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn default_config_forward_at_80_cubed() {
    let cfg = ModelConfig::default();
    let model = XSurv::<f32>::build(&cfg, 1).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 80, 80, 80], false);
    let ct = rvol(&mut r, &[1, 1, 80, 80, 80], false);
    let out = model.forward(&pet, &ct, false, &mut rng()).unwrap();
    assert_eq!(out.pt_prob.unwrap().shape(), &[1, 1, 80, 80, 80]);
    assert_eq!(out.mln_prob.unwrap().shape(), &[1, 1, 80, 80, 80]);
    assert_eq!(out.s_pred.shape(), &[1, 10]);
}

#[test]
fn eval_forward_is_deterministic_and_train_dropout_is_not_identity() {
    let cfg = small_cfg();
    let model = XSurv::<f32>::build(&cfg, 3).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let a = model.forward(&pet, &ct, false, &mut rng()).unwrap();
    let b = model.forward(&pet, &ct, false, &mut rng()).unwrap();
    assert_eq!(a.s_pred.to_vec(), b.s_pred.to_vec());
    // Train mode with different rng states differs in the survival head.
    let mut r1 = ChaCha8Rng::seed_from_u64(10);
    let mut r2 = ChaCha8Rng::seed_from_u64(11);
    let t1 = model.forward(&pet, &ct, true, &mut r1).unwrap();
    let t2 = model.forward(&pet, &ct, true, &mut r2).unwrap();
    assert_ne!(t1.s_pred.to_vec(), t2.s_pred.to_vec());
}

#[test]
fn batch_order_permutes_outputs_identically() {
    let cfg = small_cfg();
    let model = XSurv::<f32>::build(&cfg, 4).unwrap();
    let mut r = rng();
    let a_pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let a_ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let b_pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let b_ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);

    let ab_pet = crate::tensor::concat(&[a_pet.clone(), b_pet.clone()], 0).unwrap();
    let ab_ct = crate::tensor::concat(&[a_ct.clone(), b_ct.clone()], 0).unwrap();
    let ba_pet = crate::tensor::concat(&[b_pet, a_pet], 0).unwrap();
    let ba_ct = crate::tensor::concat(&[b_ct, a_ct], 0).unwrap();

    let ab = model.forward(&ab_pet, &ab_ct, false, &mut rng()).unwrap();
    let ba = model.forward(&ba_pet, &ba_ct, false, &mut rng()).unwrap();
    let sab = ab.s_pred.to_vec();
    let sba = ba.s_pred.to_vec();
    assert_eq!(&sab[..10], &sba[10..]);
    assert_eq!(&sab[10..], &sba[..10]);
}

#[test]
fn modality_shape_mismatch_errors() {
    let cfg = small_cfg();
    let model = XSurv::<f32>::build(&cfg, 5).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct = rvol(&mut r, &[1, 1, 16, 16, 8], false);
    assert!(matches!(
        model.forward(&pet, &ct, false, &mut rng()),
        Err(ModelError::ModalityMismatch { .. })
    ));
}

fn grads_populated_for_all_params(cfg: &ModelConfig, side: usize) {
    let model = XSurv::<f32>::build(cfg, 11).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, side, side, side], false);
    let ct = rvol(&mut r, &[1, 1, side, side, side], false);
    let out = model.forward(&pet, &ct, true, &mut rng()).unwrap();
    let mut loss = out.s_pred.sum();
    if let Some(p) = &out.pt_prob {
        loss = loss.add(&p.sum()).unwrap();
    }
    if let Some(p) = &out.mln_prob {
        loss = loss.add(&p.sum()).unwrap();
    }
    loss.backward().unwrap();
    for p in model.params() {
        let grad = p.tensor.grad();
        assert!(grad.is_some(), "{:?}: no gradient ({})", cfg.ablation, p.name);
        let g = grad.unwrap();
        if g.iter().all(|&v| v == 0.0) {
            // A convolution immediately followed by instance norm has a
            // shift-invariant output, so its bias gradient is exactly zero;
            // nothing else may be silent.
            assert!(
                p.name.ends_with(".bias"),
                "{:?}: all-zero gradient on {}",
                cfg.ablation,
                p.name
            );
        }
    }
}

#[test]
fn every_parameter_reachable_in_tiny_full_model() {
    let mut cfg = ModelConfig::tiny();
    cfg.n_conv = vec![1, 1, 1, 1];
    grads_populated_for_all_params(&cfg, 32);
}

#[test]
fn every_parameter_reachable_in_every_ablation() {
    for ablation in [
        Ablation::Full,
        Ablation::EarlyFusion,
        Ablation::LateFusion,
        Ablation::PetOnly,
        Ablation::CtOnly,
        Ablation::SingleBranchPt,
        Ablation::SingleBranchMln,
        Ablation::SingleBranchJoint,
        Ablation::DualNoAg,
        Ablation::DualVanillaAg,
    ] {
        let mut cfg = small_cfg();
        cfg.ablation = ablation;
        if ablation.single_encoder() {
            // Cross stages are invalid without a partner branch.
            cfg.n_conv_stages = 2;
            cfg.n_self_stages = 2;
            cfg.n_cross_stages = 0;
        }
        if ablation.single_decoder() {
            cfg.dec_channels = vec![64, 32, 16, 8];
        }
        grads_populated_for_all_params(&cfg, 16);
    }
}

#[test]
fn pet_only_ignores_ct_input() {
    let mut cfg = small_cfg();
    cfg.ablation = Ablation::PetOnly;
    cfg.n_conv_stages = 2;
    cfg.n_self_stages = 2;
    cfg.n_cross_stages = 0;
    let model = XSurv::<f32>::build(&cfg, 6).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct1 = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct2 = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let o1 = model.forward(&pet, &ct1, false, &mut rng()).unwrap();
    let o2 = model.forward(&pet, &ct2, false, &mut rng()).unwrap();
    assert_eq!(o1.s_pred.to_vec(), o2.s_pred.to_vec());
    assert_eq!(o1.pt_prob.unwrap().to_vec(), o2.pt_prob.unwrap().to_vec());
}

#[test]
fn late_fusion_keeps_encoder_branches_independent() {
    let mut cfg = small_cfg();
    cfg.ablation = Ablation::LateFusion;
    let model = XSurv::<f32>::build(&cfg, 8).unwrap();
    let mut r = rng();
    let pet1 = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let pet2 = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);
    let f1 = model.encoder_branch_features(&pet1, &ct).unwrap();
    let f2 = model.encoder_branch_features(&pet2, &ct).unwrap();
    // CT-branch features are oblivious to the PET input under late fusion.
    for (a, b) in f1[1].iter().zip(&f2[1]) {
        assert_eq!(a.to_vec(), b.to_vec());
    }

    // With cross-attention (full mode) the CT stream must react.
    let mut full_cfg = small_cfg();
    full_cfg.ablation = Ablation::Full;
    let full = XSurv::<f32>::build(&full_cfg, 8).unwrap();
    let f1 = full.encoder_branch_features(&pet1, &ct).unwrap();
    let f2 = full.encoder_branch_features(&pet2, &ct).unwrap();
    let last1 = f1[1].last().unwrap().to_vec();
    let last2 = f2[1].last().unwrap().to_vec();
    assert!(last1.iter().zip(&last2).any(|(a, b)| a != b));
}

#[test]
fn single_branch_modes_emit_expected_heads() {
    for (ablation, has_pt, has_mln) in [
        (Ablation::SingleBranchPt, true, false),
        (Ablation::SingleBranchMln, false, true),
        (Ablation::SingleBranchJoint, true, true),
    ] {
        let mut cfg = small_cfg();
        cfg.ablation = ablation;
        let model = XSurv::<f32>::build(&cfg, 9).unwrap();
        let mut r = rng();
        let pet = rvol(&mut r, &[1, 1, 16, 16, 16], false);
        let ct = rvol(&mut r, &[1, 1, 16, 16, 16], false);
        let out = model.forward(&pet, &ct, false, &mut rng()).unwrap();
        assert_eq!(out.pt_prob.is_some(), has_pt, "{:?}", ablation);
        assert_eq!(out.mln_prob.is_some(), has_mln, "{:?}", ablation);
        assert!(out.attention.is_empty(), "single-branch modes have no RAG");
    }
}

#[test]
fn gate_parameter_count_ordering() {
    let base = small_cfg();
    let count = |ablation: Ablation| -> usize {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        XSurv::<f32>::build(&cfg, 2).unwrap().n_parameters()
    };
    let no_ag = count(Ablation::DualNoAg);
    let vanilla = count(Ablation::DualVanillaAg);
    let full = count(Ablation::Full);
    assert!(no_ag < vanilla, "{} vs {}", no_ag, vanilla);
    assert!(vanilla < full, "{} vs {}", vanilla, full);
}

#[test]
fn early_fusion_uses_published_channel_row() {
    let cfg = ModelConfig {
        enc_channels: vec![16, 32, 64, 128, 256],
        dec_channels: vec![128, 64, 32, 16, 8],
        n_conv_stages: 5,
        n_self_stages: 0,
        n_cross_stages: 0,
        n_conv: vec![2, 3, 3, 4, 4],
        n_trans: vec![0; 5],
        heads: vec![0; 5],
        window: [5, 5, 5],
        n_intervals: 10,
        ablation: Ablation::EarlyFusion,
        dropout: 0.3,
    };
    let model = XSurv::<f32>::build(&cfg, 10).unwrap();
    let mut r = rng();
    let pet = rvol(&mut r, &[1, 1, 32, 32, 32], false);
    let ct = rvol(&mut r, &[1, 1, 32, 32, 32], false);
    let out = model.forward(&pet, &ct, false, &mut rng()).unwrap();
    assert_eq!(out.pt_prob.unwrap().shape(), &[1, 1, 32, 32, 32]);
}

#[test]
fn checkpoint_roundtrip_and_mismatch_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = small_cfg();
    let model = XSurv::<f32>::build(&cfg, 42).unwrap();
    let meta = CheckpointMeta {
        interval_edges: vec![0.0, 10.0, 20.0],
        iteration: 123,
        val_cindex: 0.77,
    };
    save_checkpoint(&path, &cfg, &model.params(), &meta).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.meta.iteration, 123);
    assert_eq!(loaded.meta.interval_edges, vec![0.0, 10.0, 20.0]);

    // A fresh model with a different seed converges to the saved weights.
    let other = XSurv::<f32>::build(&cfg, 43).unwrap();
    other.load_params(&loaded).unwrap();
    for (a, b) in model.params().iter().zip(other.params().iter()) {
        assert_eq!(a.tensor.to_vec(), b.tensor.to_vec(), "{}", a.name);
    }

    // Mismatched architecture produces a named shape diff.
    let mut bigger = cfg.clone();
    bigger.enc_channels = vec![8, 16, 32, 64];
    bigger.dec_channels = vec![64, 32, 16, 8];
    let wrong = XSurv::<f32>::build(&bigger, 1).unwrap();
    let err = wrong.load_params(&loaded).unwrap_err();
    let msg = format!("{}", err);
    assert!(msg.contains("mismatch"), "{}", msg);
    assert!(msg.contains("shape"), "{}", msg);
}
