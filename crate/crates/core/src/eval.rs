//! Classification metrics, stratified folds and the cross-validation
//! harness that runs clustering, LASSO and logistic fitting per fold.
//!
//! Scores are probabilities of death and labels follow the outcome coding
//! (0 = dead, 1 = alive), so the positive class for sensitivity and AUC is
//! label 0.

use crate::cluster::{reduce_features, SelectOptions, SelectionReport};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::survival::{fit_survival, Category, OutcomeVector, SurvivalConfig, SurvivalModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Fold index per case: each class is shuffled, then dealt round-robin,
/// continuing the deal across classes so fold sizes differ by at most one.
pub fn assign_folds(labels: &[u8], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Parameter("need at least 2 folds".into()));
    }
    if labels.len() < n_folds {
        return Err(Error::Parameter(format!("{} cases cannot fill {n_folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < n_folds {
            log::warn!("class {class} has {} cases for {n_folds} folds; some test folds will lack it", members.len());
        }
        members.shuffle(&mut rng);
        for i in members {
            out[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldPlan {
    pub category: Category,
    pub n_folds: usize,
    pub folds: Vec<FoldSplit>,
}

pub fn make_folds(outcomes: &OutcomeVector, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let a = assign_folds(&outcomes.y, n_folds, seed)?;
    let folds = (0..n_folds)
        .map(|f| {
            let pick = |want: bool| (0..a.len()).filter(|&i| (a[i] == f) == want).map(|i| outcomes.case_ids[i].clone()).collect();
            FoldSplit { train: pick(false), test: pick(true) }
        })
        .collect();
    Ok(FoldPlan { category: outcomes.category, n_folds, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    /// Correct death predictions over death cases; `None` without deaths.
    pub sensitivity: Option<f64>,
    /// Correct survival predictions over survivors; `None` without survivors.
    pub specificity: Option<f64>,
}

pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::Length { expected: labels.len(), found: scores.len() });
    }
    if scores.is_empty() {
        return Err(Error::Parameter("no cases to score".into()));
    }
    let (mut tp, mut dead, mut tn, mut alive) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let says_dead = s >= threshold;
        if l == 0 {
            dead += 1;
            tp += says_dead as usize;
        } else {
            alive += 1;
            tn += !says_dead as usize;
        }
    }
    let rate = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Confusion { accuracy: (tp + tn) as f64 / scores.len() as f64, sensitivity: rate(tp, dead), specificity: rate(tn, alive) })
}

/// Probability that a death scores above a survivor, ties counting half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Length { expected: labels.len(), found: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_dead = labels.iter().filter(|&&l| l == 0).count();
    let n_alive = labels.len() - n_dead;
    if n_dead == 0 || n_alive == 0 {
        return Err(Error::SingleClass);
    }
    // sum of midranks of deaths
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_dead * (n_dead + 1)) as f64 / 2.0;
    Ok(u / (n_dead * n_alive) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// Cluster all columns together.
    Joint,
    /// Cluster each modality's columns separately, then join the medoids.
    PerModality,
    /// Pass every non-constant column straight to LASSO.
    Off,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub cluster_mode: ClusterMode,
    pub select: SelectOptions,
    pub survival: SurvivalConfig,
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { cluster_mode: ClusterMode::Joint, select: SelectOptions::default(), survival: SurvivalConfig::default(), threshold: 0.5 }
    }
}

/// Unsupervised column reduction according to `mode`.
pub fn reduce(fm: &FeatureMatrix, mode: ClusterMode, opts: &SelectOptions) -> Result<(FeatureMatrix, Vec<SelectionReport>)> {
    match mode {
        ClusterMode::Joint => {
            let (m, r) = reduce_features(fm, opts)?;
            Ok((m, vec![r]))
        }
        ClusterMode::Off => Ok((fm.remove_constant()?.0, Vec::new())),
        ClusterMode::PerModality => {
            let mut prefixes: Vec<char> = fm.feature_ids().iter().filter_map(|id| id.chars().next()).collect();
            prefixes.dedup();
            prefixes.sort_unstable();
            prefixes.dedup();
            let mut out: Option<FeatureMatrix> = None;
            let mut reports = Vec::new();
            for p in prefixes {
                let idx: Vec<usize> = (0..fm.n_features()).filter(|&j| fm.feature_ids()[j].starts_with(p)).collect();
                let (m, r) = reduce_features(&fm.select_columns(&idx)?, opts)?;
                reports.push(r);
                out = Some(match out {
                    None => m,
                    Some(acc) => acc.concat(&m)?,
                });
            }
            Ok((out.ok_or_else(|| Error::Parameter("no features".into()))?, reports))
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub test_case_ids: Vec<String>,
    /// Probability of death per test case.
    pub scores: Vec<f64>,
    pub model: SurvivalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub n: usize,
}

/// Mean, sample standard deviation and a normal-theory 95% interval for
/// the mean, clamped to `[0, 1]`.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        let v = values[0];
        return Some(Aggregate { mean: v, std: 0.0, ci95_low: v.clamp(0.0, 1.0), ci95_high: v.clamp(0.0, 1.0), n: values.len() });
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let half = 1.96 * std / n.sqrt();
    Some(Aggregate { mean, std, ci95_low: (mean - half).clamp(0.0, 1.0), ci95_high: (mean + half).clamp(0.0, 1.0), n: values.len() })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub category: Category,
    pub accuracy: Option<Aggregate>,
    pub sensitivity: Option<Aggregate>,
    pub specificity: Option<Aggregate>,
    pub auc: Option<Aggregate>,
    /// AUC of all out-of-fold scores pooled together.
    pub pooled_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub folds: Vec<FoldResult>,
    pub summary: MetricSummary,
}

impl MetricReport {
    pub fn from_folds(category: Category, folds: Vec<FoldResult>, pooled_labels: &dyn Fn(&str) -> Option<u8>) -> Self {
        let collect = |f: &dyn Fn(&FoldResult) -> Option<f64>| aggregate(&folds.iter().filter_map(f).collect::<Vec<_>>());
        let mut s = Vec::new();
        let mut l = Vec::new();
        for f in &folds {
            for (id, &sc) in f.test_case_ids.iter().zip(&f.scores) {
                if let Some(y) = pooled_labels(id) {
                    s.push(sc);
                    l.push(y);
                }
            }
        }
        let summary = MetricSummary {
            category,
            accuracy: collect(&|f| Some(f.accuracy)),
            sensitivity: collect(&|f| f.sensitivity),
            specificity: collect(&|f| f.specificity),
            auc: collect(&|f| f.auc),
            pooled_auc: auc(&s, &l).ok(),
        };
        Self { folds, summary }
    }

    pub fn mean_auc(&self) -> Option<f64> {
        self.summary.auc.map(|a| a.mean)
    }
}

/// Fit on `train` rows and score `test` rows.
pub fn train_and_score(
    fm: &FeatureMatrix,
    outcomes: &OutcomeVector,
    train: &[usize],
    test: &[usize],
    cfg: &CvConfig,
    fold: usize,
) -> Result<FoldResult> {
    let tr = fm.select_rows(train)?;
    let (reduced, _) = reduce(&tr, cfg.cluster_mode, &cfg.select)?;
    let model = fit_survival(&reduced, &outcomes.select(train), &cfg.survival, Some(fold))?;
    let te = fm.select_rows(test)?;
    let te_y = outcomes.select(test);
    let scores = model.predict_death(&te)?;
    let c = confusion_metrics(&scores, &te_y.y, cfg.threshold)?;
    Ok(FoldResult {
        fold,
        accuracy: c.accuracy,
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        auc: auc(&scores, &te_y.y).ok(),
        test_case_ids: te_y.case_ids,
        scores,
        model,
    })
}

/// Run every fold of `plan`. Labels of a fold's test cases are never read
/// while fitting that fold's model.
pub fn cross_validate(fm: &FeatureMatrix, outcomes: &OutcomeVector, plan: &FoldPlan, cfg: &CvConfig) -> Result<MetricReport> {
    let outcomes = outcomes.align_to(fm)?;
    let row = |id: &String| fm.case_ids().iter().position(|c| c == id).ok_or_else(|| Error::Parameter(format!("fold case {id} has no features")));
    let mut folds = Vec::with_capacity(plan.n_folds);
    for (f, split) in plan.folds.iter().enumerate() {
        let train = split.train.iter().map(row).collect::<Result<Vec<_>>>()?;
        let test = split.test.iter().map(row).collect::<Result<Vec<_>>>()?;
        let r = train_and_score(fm, &outcomes, &train, &test, cfg, f).map_err(|e| Error::Fold { fold: f, source: Box::new(e) })?;
        log::info!("{} fold {f}: auc={:?} acc={:.3}", plan.category, r.auc, r.accuracy);
        folds.push(r);
    }
    let labels = |id: &str| outcomes.case_ids.iter().position(|c| c == id).map(|i| outcomes.y[i]);
    Ok(MetricReport::from_folds(plan.category, folds, &labels))
}

/// Fit on one cohort, score another.
pub fn external_validate(
    train_fm: &FeatureMatrix,
    train_y: &OutcomeVector,
    test_fm: &FeatureMatrix,
    test_y: &OutcomeVector,
    cfg: &CvConfig,
) -> Result<FoldResult> {
    let train_y = train_y.align_to(train_fm)?;
    let test_y = test_y.align_to(test_fm)?;
    let (reduced, _) = reduce(train_fm, cfg.cluster_mode, &cfg.select)?;
    let model = fit_survival(&reduced, &train_y, &cfg.survival, None)?;
    let scores = model.predict_death(test_fm)?;
    let c = confusion_metrics(&scores, &test_y.y, cfg.threshold)?;
    Ok(FoldResult {
        fold: 0,
        accuracy: c.accuracy,
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        auc: auc(&scores, &test_y.y).ok(),
        test_case_ids: test_y.case_ids,
        scores,
        model,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// `category,fold,accuracy,sensitivity,specificity,auc`; undefined rates are empty.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["category", "fold", "accuracy", "sensitivity", "specificity", "auc"]).map_err(err)?;
    for r in reports {
        for f in &r.folds {
            w.write_record([
                r.summary.category.tag().to_string(),
                f.fold.to_string(),
                format!("{:?}", f.accuracy),
                fmt_opt(f.sensitivity),
                fmt_opt(f.specificity),
                fmt_opt(f.auc),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let rows: Vec<&MetricSummary> = reports.iter().map(|r| &r.summary).collect();
    let s = serde_json::to_string_pretty(&rows).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}
