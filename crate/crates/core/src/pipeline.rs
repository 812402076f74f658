//! Pipeline stages. Each stage reads its inputs from and writes its outputs
//! to the run directory, so any stage can be rerun in isolation.
//!
//! ```text
//! <out_dir>/cohort/    survival cohort volumes + manifest.csv
//! <out_dir>/seg/       segmentation cohort volumes + manifest.csv
//! <out_dir>/models/    <m>.unw checkpoints, <m>_train.json reports
//! <out_dir>/features/  <m>.csv bottleneck features (ct, pet, both)
//! <out_dir>/select/    <m>_reduced.csv, <m>_report.json
//! <out_dir>/fit/       <m>_<category>.json survival models
//! <out_dir>/eval/      <m>_metrics.csv, <m>_summary.json, <m>_folds.json
//! <out_dir>/viz/       risk overlays (PPM) and activation maxima (PGM)
//! <out_dir>/run_manifest.json
//! ```

use crate::autodiff::checkpoint;
use crate::config::{derive_seed, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{cross_validate, make_folds, reduce, write_metrics_csv, write_summary_json, FoldPlan, FoldResult};
use crate::features::FeatureMatrix;
use crate::phantom::{generate_range, read_manifest, write_manifest, ManifestRow, PhantomCase};
use crate::survival::{fit_survival, OutcomeVector, SurvivalModel};
use crate::unet::{train_with_progress, EpochRecord, TrainConfig, UNetConfig, UNetModel};
use crate::visualize::{activation_maximize, export_slices, parse_feature_id, risk_map};
use crate::volume::{clip_intensity, crop_roi, read_volume, resample_isotropic, write_volume, AugmentationSpec, Modality, Volume};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySel {
    Ct,
    Pet,
    Both,
}

impl ModalitySel {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            ModalitySel::Ct => vec![Modality::Ct],
            ModalitySel::Pet => vec![Modality::Pet],
            ModalitySel::Both => vec![Modality::Ct, Modality::Pet],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalitySel::Ct => "ct",
            ModalitySel::Pet => "pet",
            ModalitySel::Both => "both",
        }
    }
}

fn dir(cfg: &PipelineConfig, sub: &str) -> Result<PathBuf> {
    let d = cfg.out_dir.join(sub);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

pub fn case_label(id: usize) -> String {
    format!("case{id:03}")
}

fn write_cohort(dir: &Path, cases: &[PhantomCase]) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::with_capacity(cases.len());
    let mut paths = Vec::new();
    for c in cases {
        let label = case_label(c.case_id);
        let names = [format!("{label}_ct.vol"), format!("{label}_pet.vol"), format!("{label}_mask.vol")];
        for (v, n) in [&c.ct, &c.pet, &c.mask].into_iter().zip(&names) {
            let p = dir.join(n);
            write_volume(v, &p)?;
            paths.push(p);
        }
        let [ct, pet, mask] = names.map(PathBuf::from);
        rows.push(ManifestRow {
            case_id: c.case_id,
            ct_path: ct,
            pet_path: pet,
            mask_path: mask,
            survival_label: c.survival_label,
            tumor_volume: c.latent.tumor_volume,
            heterogeneity: c.latent.heterogeneity,
        });
    }
    let m = dir.join("manifest.csv");
    write_manifest(&m, &rows)?;
    paths.push(m);
    Ok(paths)
}

/// Survival cohort (ids `0..n_cases`) and the disjoint segmentation cohort.
pub fn cmd_gen(cfg: &PipelineConfig, jobs: usize) -> Result<Vec<PathBuf>> {
    let spec = cfg.phantom_spec();
    let coeffs = cfg.phantom.coeffs;
    let ids: Vec<usize> = (0..cfg.phantom.n_cases).collect();
    let cohort = par_map(&ids, jobs, |&i| Ok(generate_range(&spec, i, 1, &coeffs)?.remove(0)))?;
    let n_seg = cfg.segmentation.n_train + cfg.segmentation.n_val;
    let seg_ids: Vec<usize> = (cfg.segmentation.first_id..cfg.segmentation.first_id + n_seg).collect();
    let seg = par_map(&seg_ids, jobs, |&i| Ok(generate_range(&spec, i, 1, &coeffs)?.remove(0)))?;
    let mut out = write_cohort(&dir(cfg, "cohort")?, &cohort)?;
    out.extend(write_cohort(&dir(cfg, "seg")?, &seg)?);
    Ok(out)
}

/// Resample, crop around the mask's centre of mass and clip.
pub fn preprocess_pair(cfg: &PipelineConfig, image: &Volume, mask: &Volume) -> Result<(Volume, Volume)> {
    let clip = cfg.clip(image.modality())?;
    let needs = |v: &Volume| v.spacing().iter().any(|&s| s != cfg.preprocess.spacing);
    let (img, msk) = if needs(image) || needs(mask) {
        (resample_isotropic(image, cfg.preprocess.spacing)?, resample_isotropic(mask, cfg.preprocess.spacing)?)
    } else {
        (image.clone(), mask.clone())
    };
    let roi = cfg.preprocess.roi;
    let img = clip_intensity(&crop_roi(&img, &msk, roi, clip.lo())?, clip);
    let msk = crop_roi(&msk, &msk, roi, 0.0)?;
    Ok((img, msk))
}

struct LoadedCase {
    row: ManifestRow,
    image: Volume,
    mask: Volume,
}

fn load_cases(cfg: &PipelineConfig, sub: &str, modality: Modality, jobs: usize) -> Result<Vec<LoadedCase>> {
    let d = cfg.out_dir.join(sub);
    let rows = read_manifest(&d.join("manifest.csv"))?;
    par_map(&rows, jobs, |row| {
        let img = read_volume(&d.join(if modality == Modality::Ct { &row.ct_path } else { &row.pet_path }))?;
        let mask = read_volume(&d.join(&row.mask_path))?;
        let (image, mask) = preprocess_pair(cfg, &img, &mask)?;
        Ok(LoadedCase { row: row.clone(), image, mask })
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub modality: Modality,
    pub config: UNetConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
}

pub fn train_config(cfg: &PipelineConfig, m: Modality) -> TrainConfig {
    let s = &cfg.segmentation;
    let augmentation = s.augment.then(|| {
        let mut a = AugmentationSpec::standard(cfg.preprocess.roi, derive_seed(cfg.seed, &format!("augment-{}", m.name())));
        a.max_translation = s.max_translation;
        a
    });
    TrainConfig {
        epochs: s.epochs,
        adam: crate::autodiff::AdamConfig { lr: s.lr, weight_decay: s.weight_decay, ..Default::default() },
        augmentation,
        patience: s.patience,
        seed: derive_seed(cfg.seed, &format!("shuffle-{}", m.name())),
    }
}

/// One network per modality, trained on the segmentation cohort.
pub fn cmd_train_seg(cfg: &PipelineConfig, sel: ModalitySel, jobs: usize) -> Result<Vec<PathBuf>> {
    let out = dir(cfg, "models")?;
    let mut paths = Vec::new();
    for m in sel.modalities() {
        let cases = load_cases(cfg, "seg", m, jobs)?;
        let pairs: Vec<(Volume, Volume)> = cases.into_iter().map(|c| (c.image, c.mask)).collect();
        let (train, val) = pairs.split_at(cfg.segmentation.n_train.min(pairs.len()));
        let model = UNetModel::<f32>::build(cfg.unet_config(m), derive_seed(cfg.seed, &format!("unet-{}", m.name())))?;
        let t = Instant::now();
        let outcome = train_with_progress(&model, train, val, &train_config(cfg, m), |r| {
            log::info!("{} epoch {}: loss={:.4} val_dice={:.4} ({:.1}s)", m.name(), r.epoch, r.train_loss, r.val_dice, t.elapsed().as_secs_f64())
        })?;
        let ckpt = out.join(format!("{}.unw", m.name()));
        checkpoint::save(&ckpt, outcome.model.params())?;
        let report = out.join(format!("{}_train.json", m.name()));
        write_json(
            &report,
            &TrainReport {
                modality: m,
                config: cfg.unet_config(m),
                history: outcome.history,
                best_epoch: outcome.best_epoch,
                best_val_dice: outcome.best_val_dice,
            },
        )?;
        paths.extend([ckpt, report]);
    }
    Ok(paths)
}

pub fn load_model(cfg: &PipelineConfig, m: Modality) -> Result<UNetModel<f32>> {
    let params = checkpoint::load(&cfg.out_dir.join("models").join(format!("{}.unw", m.name())))?;
    UNetModel::from_params(cfg.unet_config(m), params)
}

fn features_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("features").join(format!("{name}.csv"))
}

/// Bottleneck features of every survival-cohort case.
pub fn cmd_extract(cfg: &PipelineConfig, sel: ModalitySel, jobs: usize) -> Result<Vec<PathBuf>> {
    dir(cfg, "features")?;
    let mut paths = Vec::new();
    let mut mats = Vec::new();
    for m in sel.modalities() {
        let model = load_model(cfg, m)?;
        let cases = load_cases(cfg, "cohort", m, jobs)?;
        let rows = par_map(&cases, jobs, |c| Ok(model.encode_bottleneck(&c.image)?.into_iter().map(f64::from).collect::<Vec<f64>>()))?;
        let fm = FeatureMatrix::from_rows(m, cases.iter().map(|c| case_label(c.row.case_id)).collect(), &rows)?;
        let p = features_path(cfg, m.name());
        fm.write_csv(&p)?;
        paths.push(p);
        mats.push(fm);
    }
    if sel == ModalitySel::Both {
        let both = mats[0].concat(&mats[1])?;
        let p = features_path(cfg, "both");
        both.write_csv(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn load_outcomes(cfg: &PipelineConfig) -> Result<OutcomeVector> {
    let rows = read_manifest(&cfg.out_dir.join("cohort").join("manifest.csv"))?;
    OutcomeVector::new(cfg.survival.category, rows.iter().map(|r| case_label(r.case_id)).collect(), rows.iter().map(|r| r.survival_label).collect())
}

/// Cohort-wide clustering and medoid extraction.
pub fn cmd_select(cfg: &PipelineConfig, sel: ModalitySel) -> Result<Vec<PathBuf>> {
    let out = dir(cfg, "select")?;
    let fm = FeatureMatrix::read_csv(&features_path(cfg, sel.name()))?;
    let (reduced, reports) = reduce(&fm, cfg.cluster.mode, &cfg.cv_config().select)?;
    let csv = out.join(format!("{}_reduced.csv", sel.name()));
    reduced.write_csv(&csv)?;
    let json = out.join(format!("{}_report.json", sel.name()));
    write_json(&json, &reports)?;
    Ok(vec![csv, json])
}

fn model_path(cfg: &PipelineConfig, sel: ModalitySel) -> PathBuf {
    cfg.out_dir.join("fit").join(format!("{}_{}.json", sel.name(), cfg.survival.category))
}

/// LASSO + logistic model on the cohort-wide medoid features.
pub fn cmd_fit(cfg: &PipelineConfig, sel: ModalitySel) -> Result<Vec<PathBuf>> {
    dir(cfg, "fit")?;
    let fm = FeatureMatrix::read_csv(&cfg.out_dir.join("select").join(format!("{}_reduced.csv", sel.name())))?;
    let outcomes = load_outcomes(cfg)?.align_to(&fm)?;
    let model = fit_survival(&fm, &outcomes, &cfg.cv_config().survival, None)?;
    let p = model_path(cfg, sel);
    std::fs::write(&p, model.to_json()? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(vec![p])
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldRecord {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
}

/// Stratified cross-validation of the whole selection + fitting chain.
pub fn cmd_eval(cfg: &PipelineConfig, sel: ModalitySel) -> Result<Vec<PathBuf>> {
    let out = dir(cfg, "eval")?;
    let fm = FeatureMatrix::read_csv(&features_path(cfg, sel.name()))?;
    let outcomes = load_outcomes(cfg)?.align_to(&fm)?;
    let plan = make_folds(&outcomes, cfg.cv.n_folds, derive_seed(cfg.seed, "folds"))?;
    let report = cross_validate(&fm, &outcomes, &plan, &cfg.cv_config())?;
    log::info!("{} {}: mean auc {:?}", sel.name(), cfg.survival.category, report.mean_auc());
    let metrics = out.join(format!("{}_metrics.csv", sel.name()));
    let summary = out.join(format!("{}_summary.json", sel.name()));
    let folds = out.join(format!("{}_folds.json", sel.name()));
    write_metrics_csv(&metrics, std::slice::from_ref(&report))?;
    write_summary_json(&summary, std::slice::from_ref(&report))?;
    write_json(&folds, &FoldRecord { plan, folds: report.folds })?;
    Ok(vec![metrics, summary, folds])
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RiskRecord {
    pub case_id: String,
    pub modality: Modality,
    pub alpha: Vec<f64>,
}

/// Risk-map overlays for the first cohort cases and activation maxima for
/// each selected neuron.
pub fn cmd_visualize(cfg: &PipelineConfig, sel: ModalitySel, jobs: usize) -> Result<Vec<PathBuf>> {
    let out = dir(cfg, "viz")?;
    let mpath = model_path(cfg, sel);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let survival = SurvivalModel::from_json(&text)?;
    let features = FeatureMatrix::read_csv(&features_path(cfg, sel.name()))?;
    let mut paths = Vec::new();
    let mut records = Vec::new();
    let axis = cfg.visualize.axis;
    for m in sel.modalities() {
        let model = load_model(cfg, m)?;
        let cases = load_cases(cfg, "cohort", m, jobs)?;
        for c in cases.iter().take(cfg.visualize.cases) {
            let label = case_label(c.row.case_id);
            let row = features.case_ids().iter().position(|id| *id == label).ok_or_else(|| Error::Parameter(format!("{label} missing from features")))?;
            let other: HashMap<String, f64> = features
                .feature_ids()
                .iter()
                .zip(features.row(row))
                .filter(|(id, _)| !id.starts_with(m.prefix()))
                .map(|(id, &v)| (id.clone(), v))
                .collect();
            let r = risk_map(&label, &model, m, &survival, &c.image, &other, cfg.visualize.reduction)?;
            paths.extend(export_slices(&c.image, Some(&r.values), axis, &out, &format!("{label}_{}", m.name()))?);
            records.push(RiskRecord { case_id: label, modality: m, alpha: r.alpha });
        }
        let neurons: Vec<(String, usize)> = survival
            .feature_ids
            .iter()
            .filter_map(|id| parse_feature_id(id).filter(|(p, _)| *p == m.prefix()).map(|(_, i)| (id.clone(), i)))
            .take(cfg.visualize.max_neurons)
            .collect();
        let act_dir = out.join("actmax");
        for (id, idx) in neurons {
            let (vol, ascent) = activation_maximize(&model, idx, &cfg.act_max_config())?;
            log::info!("{id}: activation {:?} -> {:?} in {} steps", ascent.trace.first(), ascent.trace.last(), ascent.steps);
            paths.extend(export_slices(&vol, None, axis, &act_dir, &id)?);
        }
    }
    let rec = out.join(format!("{}_alphas.json", sel.name()));
    write_json(&rec, &records)?;
    paths.push(rec);
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub wall_seconds: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Run `f` and record its artifacts and wall time in the run manifest.
pub fn run_stage(cfg: &PipelineConfig, stage: &str, f: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<Vec<PathBuf>> {
    let t = Instant::now();
    let paths = f()?;
    let wall_seconds = t.elapsed().as_secs_f64();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mpath = cfg.out_dir.join(MANIFEST_FILE);
    let hash = cfg.hash()?;
    let mut manifest = match read_json::<RunManifest>(&mpath) {
        Ok(m) if m.config_hash == hash => m,
        _ => RunManifest { config_hash: hash, version: env!("CARGO_PKG_VERSION").to_string(), stages: Vec::new() },
    };
    let artifacts = paths.iter().map(|p| p.strip_prefix(&cfg.out_dir).unwrap_or(p).to_string_lossy().into_owned()).collect();
    manifest.stages.retain(|s| s.stage != stage);
    manifest.stages.push(StageRecord { stage: stage.to_string(), wall_seconds, artifacts });
    write_json(&mpath, &manifest)?;
    log::info!("stage {stage} finished in {wall_seconds:.1}s");
    Ok(paths)
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, sel: ModalitySel, jobs: usize) -> Result<Vec<PathBuf>> {
    let mut all = Vec::new();
    all.extend(run_stage(cfg, "gen", || cmd_gen(cfg, jobs))?);
    all.extend(run_stage(cfg, "train-seg", || cmd_train_seg(cfg, sel, jobs))?);
    all.extend(run_stage(cfg, "extract", || cmd_extract(cfg, sel, jobs))?);
    all.extend(run_stage(cfg, "select", || cmd_select(cfg, sel))?);
    all.extend(run_stage(cfg, "fit", || cmd_fit(cfg, sel))?);
    all.extend(run_stage(cfg, "eval", || cmd_eval(cfg, sel))?);
    all.extend(run_stage(cfg, "visualize", || cmd_visualize(cfg, sel, jobs))?);
    Ok(all)
}
