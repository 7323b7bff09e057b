//! Operator entry points: the `xsurv` binary's subcommands for phantom
//! generation, training, evaluation, inference, radiomics extraction, score
//! enhancement, and the gradient-check suites.
//!
//! Every command resolves a [`RunConfig`] (TOML file plus flag overrides) and
//! writes the resolved copy next to its outputs, so any run can be reproduced
//! from the artifacts alone. Exit codes: 0 success, 1 usage error,
//! 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_phantom, load_manifest, load_phantom, save_manifest, save_phantom, save_volume,
    ManifestRow, Modality, Phantom, PhantomSpec, Volume,
};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, XSurv,
};
use crate::radiomics::extract_features;
use crate::stats::{
    cox_screen, default_lambda_grid, enhance, lasso_select, zscore_fit, FeatureMatrix,
};
use crate::survival::{concordance_index, IntervalScheme, SurvivalRecord};
use crate::train::{evaluate, restore_params, save_metric_log, train, TrainConfig};

/// Merged configuration of one run: architecture, training, and phantom
/// sections, each falling back to its defaults when omitted from the file.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("read config {}: {}", path.display(), e)))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("parse config {}: {}", path.display(), e)))
    }
}

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            exit_code: 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

macro_rules! usage {
    ($($arg:tt)*) => { CliError::usage(format!($($arg)*)) };
}

#[derive(Parser)]
#[command(
    name = "xsurv",
    about = "Joint tumor segmentation and survival prediction on synthetic PET-CT phantoms",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.phantom.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort with volumes, manifests, and ground truth.
    PhantomGen {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 76)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated cohort and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory produced by phantom-gen.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report test C-index and PT/MLN DSC for a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which manifest to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write probability volumes, attention maps, and the RFS score for one
    /// patient.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract radiomics features and RFS scores from predicted masks.
    Radiomics {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Screen clinical indicators, select radiomics features, and fuse them
    /// with the model score through CoxPH.
    Enhance {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory produced by the radiomics subcommand.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference verification suites.
    Gradcheck {
        /// op, block, or model.
        #[arg(long, default_value = "op")]
        scope: String,
    },
}

/// Parse arguments and run; the binary forwards this result as its exit code.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit_code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PhantomGen {
            common,
            n_train,
            n_test,
            out,
            force,
        } => cmd_phantom_gen(&common.resolve()?, n_train, n_test, &out, force),
        Command::Train { common, data, out } => cmd_train(&common.resolve()?, &data, &out),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => cmd_eval(&common, &checkpoint, &data, &split),
        Command::Infer {
            common,
            checkpoint,
            data,
            patient,
            out,
        } => cmd_infer(&common, &checkpoint, &data, &patient, &out),
        Command::Radiomics {
            common,
            checkpoint,
            data,
            out,
        } => cmd_radiomics(&common, &checkpoint, &data, &out),
        Command::Enhance {
            common,
            features,
            data,
            out,
        } => cmd_enhance(&common.resolve()?, &features, &data, &out),
        Command::Gradcheck { scope } => cmd_gradcheck(&scope),
    }
}

fn write_resolved(out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| usage!("serialize resolved config: {}", e))?;
    std::fs::write(out_dir.join("resolved-config.toml"), text)
        .map_err(|e| usage!("write resolved config: {}", e))?;
    Ok(())
}

fn ensure_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| usage!("read {}: {}", out.display(), e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| usage!("create {}: {}", out.display(), e))?;
    Ok(())
}

pub fn cmd_phantom_gen(
    cfg: &RunConfig,
    n_train: usize,
    n_test: usize,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    ensure_out_dir(out, force)?;
    let patients = out.join("patients");
    std::fs::create_dir_all(&patients).map_err(|e| usage!("create patients dir: {}", e))?;

    let mut rows = Vec::new();
    let mut censored = 0usize;
    for i in 0..(n_train + n_test) as u64 {
        let p = generate_phantom(&cfg.phantom, i)
            .map_err(|e| CliError::numerical(format!("phantom {}: {}", i, e)))?;
        censored += p.record.censored as usize;
        let row = save_phantom(&patients, &format!("p{:04}", i), &p)
            .map_err(|e| usage!("write phantom {}: {}", i, e))?;
        rows.push(row);
    }
    // Volume paths are relative to each manifest's directory.
    for row in rows.iter_mut() {
        for path in [&mut row.pet, &mut row.ct, &mut row.pt_mask, &mut row.mln_mask] {
            *path = format!("patients/{}", path);
        }
    }
    let (train_rows, test_rows) = rows.split_at(n_train);
    save_manifest(&out.join("manifest_train.csv"), train_rows)
        .map_err(|e| usage!("write train manifest: {}", e))?;
    save_manifest(&out.join("manifest_test.csv"), test_rows)
        .map_err(|e| usage!("write test manifest: {}", e))?;
    write_resolved(out, cfg)?;
    println!(
        "wrote {} train + {} test phantoms to {} (censored fraction {:.2})",
        n_train,
        n_test,
        out.display(),
        censored as f64 / (n_train + n_test) as f64
    );
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<(Vec<ManifestRow>, Vec<Phantom>), CliError> {
    let manifest = data.join(format!("manifest_{}.csv", split));
    let rows = load_manifest(&manifest)
        .map_err(|e| usage!("load {}: {}", manifest.display(), e))?;
    let phantoms = rows
        .iter()
        .map(|r| load_phantom(data, r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage!("load volumes: {}", e))?;
    Ok((rows, phantoms))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out, true)?;
    let (_, all_train) = load_split(data, "train")?;
    // Hold out every fifth sample for checkpoint selection.
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (i, p) in all_train.into_iter().enumerate() {
        if i % 5 == 4 {
            val_set.push(p);
        } else {
            train_set.push(p);
        }
    }
    let model = XSurv::<f32>::build(&cfg.model, cfg.train.seed)
        .map_err(|e| usage!("build model: {}", e))?;
    println!(
        "training on {} samples (validating on {}), {} parameters",
        train_set.len(),
        val_set.len(),
        model.n_parameters()
    );
    let outcome = train(&model, &train_set, &val_set, &cfg.train)
        .map_err(|e| CliError::numerical(format!("training: {}", e)))?;
    save_metric_log(&out.join("metrics.csv"), &outcome.log)
        .map_err(|e| usage!("write metrics: {}", e))?;
    restore_params(&model, &outcome.best_params);
    let meta = CheckpointMeta {
        interval_edges: outcome.scheme.edges.clone(),
        iteration: outcome.best_iter,
        val_cindex: outcome.best_val_cindex,
    };
    save_checkpoint(&out.join("model.ckpt"), &cfg.model, &model.params(), &meta)
        .map_err(|e| usage!("write checkpoint: {}", e))?;
    write_resolved(out, cfg)?;
    if let Some(abort) = outcome.aborted {
        return Err(CliError::numerical(format!(
            "{} (best checkpoint from iteration {} was kept)",
            abort, outcome.best_iter
        )));
    }
    println!(
        "best validation C-index {:.4} at iteration {}",
        outcome.best_val_cindex, outcome.best_iter
    );
    Ok(())
}

fn load_model(
    common: &CommonOpts,
    checkpoint: &Path,
) -> Result<(XSurv<f32>, IntervalScheme, RunConfig), CliError> {
    let ckpt = load_checkpoint(checkpoint)
        .map_err(|e| usage!("load checkpoint {}: {}", checkpoint.display(), e))?;
    // A user-supplied config must agree with the checkpoint; building from it
    // surfaces any architecture difference as a shape diff.
    let run_cfg = match &common.config {
        Some(_) => common.resolve()?,
        None => RunConfig {
            model: ckpt.config.clone(),
            ..RunConfig::default()
        },
    };
    let model = XSurv::<f32>::build(&run_cfg.model, 0).map_err(|e| usage!("build model: {}", e))?;
    model
        .load_params(&ckpt)
        .map_err(|e| usage!("{}", e))?;
    if ckpt.meta.interval_edges.len() < 2 {
        return Err(usage!("checkpoint carries no interval scheme"));
    }
    Ok((
        model,
        IntervalScheme {
            edges: ckpt.meta.interval_edges.clone(),
        },
        run_cfg,
    ))
}

fn cmd_eval(
    common: &CommonOpts,
    checkpoint: &Path,
    data: &Path,
    split: &str,
) -> Result<(), CliError> {
    let (model, scheme, cfg) = load_model(common, checkpoint)?;
    let (_, phantoms) = load_split(data, split)?;
    let (cindex, dsc_pt, dsc_mln) = evaluate(&model, &phantoms, &scheme, cfg.train.crop_side)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    println!(
        "{}_cindex={:.4} dsc_pt={:.4} dsc_mln={:.4}",
        split, cindex, dsc_pt, dsc_mln
    );
    Ok(())
}

/// Forward one patient in eval mode on its preprocessed center crop.
fn forward_patient(
    model: &XSurv<f32>,
    p: &Phantom,
    crop_side: usize,
) -> Result<(crate::model::ForwardOutput<f32>, Volume, Volume), CliError> {
    let side = p.pet.dims[0];
    let (pet_f, ct_f) = crate::data::preprocess(&p.pet, &p.ct, p.center, side);
    let offset = [(side.saturating_sub(crop_side)) / 2; 3];
    let (pet, ct, _) = crate::data::augment_with_params(
        &pet_f,
        &ct_f,
        &[],
        &crate::data::AffineParams::identity(offset),
        crop_side,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model
        .forward(&pet.to_tensor(), &ct.to_tensor(), false, &mut rng)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    Ok((out, pet, ct))
}

fn tensor_to_volume(t: &crate::tensor::Tensor<f32>, modality: Modality) -> Volume {
    let s = t.shape();
    Volume {
        dims: [s[2], s[3], s[4]],
        spacing: [1.0; 3],
        modality,
        data: t.to_vec(),
    }
}

fn cmd_infer(
    common: &CommonOpts,
    checkpoint: &Path,
    data: &Path,
    patient: &str,
    out: &Path,
) -> Result<(), CliError> {
    let (model, scheme, cfg) = load_model(common, checkpoint)?;
    let mut found = None;
    for split in ["train", "test"] {
        let (rows, phantoms) = load_split(data, split)?;
        if let Some(i) = rows.iter().position(|r| r.patient_id == patient) {
            found = Some(phantoms.into_iter().nth(i).unwrap());
            break;
        }
    }
    let p = found.ok_or_else(|| usage!("no patient {:?} in either manifest", patient))?;
    ensure_out_dir(out, true)?;
    let (fwd, _, _) = forward_patient(&model, &p, cfg.train.crop_side)?;

    if let Some(prob) = &fwd.pt_prob {
        save_volume(&out.join("pt_prob.vol"), &tensor_to_volume(prob, Modality::Mask))
            .map_err(|e| usage!("write pt_prob: {}", e))?;
    }
    if let Some(prob) = &fwd.mln_prob {
        save_volume(&out.join("mln_prob.vol"), &tensor_to_volume(prob, Modality::Mask))
            .map_err(|e| usage!("write mln_prob: {}", e))?;
    }
    for (scale, att) in fwd.attention.iter().enumerate() {
        for (name, map) in [
            ("alpha_pt", &att.alpha_pt),
            ("alpha_mln", &att.alpha_mln),
            ("alpha_bg", &att.alpha_bg),
        ] {
            save_volume(
                &out.join(format!("{}_scale{}.vol", name, scale)),
                &tensor_to_volume(map, Modality::Mask),
            )
            .map_err(|e| usage!("write attention map: {}", e))?;
        }
    }
    let s_pred: Vec<f64> = fwd.s_pred.to_vec().iter().map(|&v| v as f64).collect();
    let rfs = crate::survival::predict_rfs(&s_pred, &scheme);
    std::fs::write(out.join("rfs_score.txt"), format!("{:.6}\n", rfs))
        .map_err(|e| usage!("write score: {}", e))?;
    println!("patient {} predicted RFS score {:.2} days", patient, rfs);
    Ok(())
}

/// Predicted merged lesion mask on the model's input grid, with the
/// whole-volume fallback for empty predictions.
fn predicted_mask(fwd: &crate::model::ForwardOutput<f32>, patient: &str) -> Volume {
    let prob = fwd
        .pt_prob
        .as_ref()
        .or(fwd.mln_prob.as_ref())
        .expect("at least one segmentation head");
    let s = prob.shape();
    let mut mask = Volume::new([s[2], s[3], s[4]], [1.0; 3], Modality::Mask);
    for (i, v) in mask.data.iter_mut().enumerate() {
        let pt = fwd.pt_prob.as_ref().map(|p| p.data()[i] > 0.5).unwrap_or(false);
        let mln = fwd.mln_prob.as_ref().map(|p| p.data()[i] > 0.5).unwrap_or(false);
        *v = (pt || mln) as u8 as f32;
    }
    if mask.count_mask() == 0 {
        eprintln!(
            "warning: patient {}: empty predicted mask, falling back to the whole-volume bounding box",
            patient
        );
        mask.data.fill(1.0);
    }
    mask
}

fn labeled_features_save(
    path: &Path,
    ids: &[String],
    matrix: &FeatureMatrix,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| usage!("write {}: {}", path.display(), e))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(matrix.names.iter().cloned());
    w.write_record(&header).map_err(|e| usage!("{}", e))?;
    for (id, row) in ids.iter().zip(&matrix.rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{:.10e}", v)));
        w.write_record(&rec).map_err(|e| usage!("{}", e))?;
    }
    w.flush().map_err(|e| usage!("{}", e))?;
    Ok(())
}

fn labeled_features_load(path: &Path) -> Result<(Vec<String>, FeatureMatrix), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| usage!("read {}: {}", path.display(), e))?;
    let header = r.headers().map_err(|e| usage!("{}", e))?.clone();
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut matrix = FeatureMatrix::new(names);
    for rec in r.records() {
        let rec = rec.map_err(|e| usage!("{}", e))?;
        ids.push(rec[0].to_string());
        let row: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| usage!("{:?}: {}", v, e)))
            .collect::<Result<_, _>>()?;
        matrix.push_row(row);
    }
    Ok((ids, matrix))
}

fn cmd_radiomics(
    common: &CommonOpts,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (model, scheme, cfg) = load_model(common, checkpoint)?;
    ensure_out_dir(out, true)?;
    for split in ["train", "test"] {
        let (rows, phantoms) = load_split(data, split)?;
        let mut ids = Vec::new();
        let mut matrix: Option<FeatureMatrix> = None;
        let mut scores = Vec::new();
        for (row, p) in rows.iter().zip(&phantoms) {
            let (fwd, pet, ct) = forward_patient(&model, p, cfg.train.crop_side)?;
            let mask = predicted_mask(&fwd, &row.patient_id);
            let vector = extract_features(&pet, &ct, &mask)
                .map_err(|e| CliError::numerical(format!("{}: {}", row.patient_id, e)))?;
            let m = matrix.get_or_insert_with(|| FeatureMatrix::new(vector.names.clone()));
            m.push_row(vector.values);
            ids.push(row.patient_id.clone());
            let s_pred: Vec<f64> = fwd.s_pred.to_vec().iter().map(|&v| v as f64).collect();
            scores.push(crate::survival::predict_rfs(&s_pred, &scheme));
        }
        let matrix = matrix.ok_or_else(|| usage!("empty {} manifest", split))?;
        labeled_features_save(&out.join(format!("features_{}.csv", split)), &ids, &matrix)?;
        let score_matrix = FeatureMatrix {
            names: vec!["rfs_score".into()],
            rows: scores.iter().map(|&s| vec![s]).collect(),
        };
        labeled_features_save(&out.join(format!("scores_{}.csv", split)), &ids, &score_matrix)?;
        println!(
            "{}: {} patients, {} features each",
            split,
            ids.len(),
            matrix.n_cols()
        );
    }
    Ok(())
}

/// Clinical indicators encoded for Cox screening.
pub fn clinical_matrix(rows: &[ManifestRow]) -> FeatureMatrix {
    let names = vec![
        "age_years".to_string(),
        "weight_kg".to_string(),
        "male".to_string(),
        "hpv_positive".to_string(),
        "chemotherapy".to_string(),
    ];
    let mut m = FeatureMatrix::new(names);
    for r in rows {
        m.push_row(vec![
            r.age_years,
            r.weight_kg,
            r.male as f64,
            (r.hpv == "positive") as u8 as f64,
            r.chemotherapy as f64,
        ]);
    }
    m
}

pub struct EnhanceSummary {
    pub base_cindex: f64,
    pub enhanced_cindex: f64,
    pub selected_radiomics: Vec<String>,
    pub selected_clinical: Vec<String>,
}

/// The full enhancement pipeline on in-memory data: standardize, screen
/// clinical indicators, LASSO-select radiomics, fit the fusion Cox on the
/// training rows, and score the test rows.
#[allow(clippy::too_many_arguments)]
pub fn run_enhance(
    score_train: &[f64],
    score_test: &[f64],
    radiomics_train: &FeatureMatrix,
    radiomics_test: &FeatureMatrix,
    clinical_train: &FeatureMatrix,
    clinical_test: &FeatureMatrix,
    records_train: &[SurvivalRecord],
    records_test: &[SurvivalRecord],
) -> Result<EnhanceSummary, CliError> {
    let base_cindex = concordance_index(score_test, records_test)
        .map_err(|e| CliError::numerical(e.to_string()))?;

    let (radio_std, radio_scaler) =
        zscore_fit(radiomics_train).map_err(|e| CliError::numerical(e.to_string()))?;
    let grid = default_lambda_grid(&radio_std, records_train, 25)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let lasso = lasso_select(&radio_std, records_train, &grid)
        .map_err(|e| CliError::numerical(e.to_string()))?;

    let (clin_std, clin_scaler) =
        zscore_fit(clinical_train).map_err(|e| CliError::numerical(e.to_string()))?;
    let clinical_selected = cox_screen(&clin_std, records_train, 0.05)
        .map_err(|e| CliError::numerical(e.to_string()))?;

    let radio_sel_train = radio_std
        .select(&lasso.selected)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let radio_sel_test = radio_scaler
        .apply(radiomics_test)
        .and_then(|m| m.select(&lasso.selected))
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let clin_sel_train = clin_std
        .select(&clinical_selected)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let clin_sel_test = clin_scaler
        .apply(clinical_test)
        .and_then(|m| m.select(&clinical_selected))
        .map_err(|e| CliError::numerical(e.to_string()))?;

    let radio_train_opt = (!lasso.selected.is_empty()).then_some(&radio_sel_train);
    let radio_test_opt = (!lasso.selected.is_empty()).then_some(&radio_sel_test);
    let clin_train_opt = (!clinical_selected.is_empty()).then_some(&clin_sel_train);
    let clin_test_opt = (!clinical_selected.is_empty()).then_some(&clin_sel_test);

    let (_, fusion) = enhance(score_train, radio_train_opt, clin_train_opt, records_train)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let enhanced_scores = fusion
        .apply(score_test, radio_test_opt, clin_test_opt)
        .map_err(|e| CliError::numerical(e.to_string()))?;
    let enhanced_cindex = concordance_index(&enhanced_scores, records_test)
        .map_err(|e| CliError::numerical(e.to_string()))?;

    Ok(EnhanceSummary {
        base_cindex,
        enhanced_cindex,
        selected_radiomics: lasso.selected,
        selected_clinical: clinical_selected,
    })
}

pub fn cmd_enhance(
    cfg: &RunConfig,
    features: &Path,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out, true)?;
    let (train_rows, _) = {
        let manifest = data.join("manifest_train.csv");
        (
            load_manifest(&manifest).map_err(|e| usage!("{}", e))?,
            (),
        )
    };
    let test_rows = load_manifest(&data.join("manifest_test.csv")).map_err(|e| usage!("{}", e))?;

    let (ids_tr, radio_train) = labeled_features_load(&features.join("features_train.csv"))?;
    let (_, radio_test) = labeled_features_load(&features.join("features_test.csv"))?;
    let (_, score_train_m) = labeled_features_load(&features.join("scores_train.csv"))?;
    let (ids_te, score_test_m) = labeled_features_load(&features.join("scores_test.csv"))?;
    if ids_tr.len() != train_rows.len() || ids_te.len() != test_rows.len() {
        return Err(usage!(
            "feature files do not align with the manifests ({} vs {} train rows)",
            ids_tr.len(),
            train_rows.len()
        ));
    }

    let records_train: Vec<SurvivalRecord> = train_rows.iter().map(|r| r.record()).collect();
    let records_test: Vec<SurvivalRecord> = test_rows.iter().map(|r| r.record()).collect();
    let summary = run_enhance(
        &score_train_m.column(0),
        &score_test_m.column(0),
        &radio_train,
        &radio_test,
        &clinical_matrix(&train_rows),
        &clinical_matrix(&test_rows),
        &records_train,
        &records_test,
    )?;
    let line = format!(
        "base_cindex={:.4} enhanced_cindex={:.4} radiomics_selected={} clinical_selected={}",
        summary.base_cindex,
        summary.enhanced_cindex,
        summary.selected_radiomics.len(),
        summary.selected_clinical.len()
    );
    println!("{}", line);
    std::fs::write(out.join("enhance_summary.txt"), format!("{}\n", line))
        .map_err(|e| usage!("write summary: {}", e))?;
    write_resolved(out, cfg)?;
    Ok(())
}

pub fn cmd_gradcheck(scope: &str) -> Result<(), CliError> {
    let entries = match scope {
        "op" => crate::verify::verify_ops(5),
        "block" => crate::verify::verify_blocks(5),
        "model" => {
            let mut v = crate::verify::verify_model_f32(1e-2);
            v.extend(crate::verify::verify_model_f64());
            v
        }
        other => {
            return Err(usage!(
                "unknown scope {:?}; expected op, block, or model",
                other
            ))
        }
    };
    let mut failures = 0;
    for e in &entries {
        println!("{}: {}", e.name, e.report);
        if !e.report.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::numerical(format!(
            "{} of {} gradient checks failed",
            failures,
            entries.len()
        )));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}
