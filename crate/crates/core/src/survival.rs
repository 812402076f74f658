//! Two-stage survival classifier: squared-loss LASSO over the candidate
//! features with a cross-validated penalty, then an unpenalized (ridge
//! stabilized) logistic regression on the features LASSO keeps.
//!
//! Outcomes use the coding 1 = alive, 0 = dead. The LASSO objective is
//! `(1/2n) ||y - b0 - Z beta||^2 + lambda ||beta||_1` on standardized `Z`.

use crate::error::{Error, Result};
use crate::eval::assign_folds;
use crate::features::FeatureMatrix;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Category {
    #[serde(rename = "2OS")]
    Os2,
    #[serde(rename = "5OS")]
    Os5,
    #[serde(rename = "2DS")]
    Ds2,
    #[serde(rename = "5DS")]
    Ds5,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Os2, Category::Os5, Category::Ds2, Category::Ds5];

    pub fn tag(self) -> &'static str {
        match self {
            Category::Os2 => "2OS",
            Category::Os5 => "5OS",
            Category::Ds2 => "2DS",
            Category::Ds5 => "5DS",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown outcome category {s:?}")))
    }
}

/// Binary outcomes (1 alive, 0 dead) for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeVector {
    pub category: Category,
    pub case_ids: Vec<String>,
    pub y: Vec<u8>,
}

impl OutcomeVector {
    pub fn new(category: Category, case_ids: Vec<String>, y: Vec<u8>) -> Result<Self> {
        if case_ids.len() != y.len() {
            return Err(Error::Length { expected: case_ids.len(), found: y.len() });
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::NonBinary);
        }
        Ok(Self { category, case_ids, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            category: self.category,
            case_ids: idx.iter().map(|&i| self.case_ids[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Same outcomes reordered to match `fm`'s cases.
    pub fn align_to(&self, fm: &FeatureMatrix) -> Result<Self> {
        let idx = fm
            .case_ids()
            .iter()
            .map(|c| self.case_ids.iter().position(|d| d == c).ok_or_else(|| Error::Parameter(format!("no outcome for case {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select(&idx))
    }
}

/// Dense `n x p` design stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    cols: Vec<f64>,
}

impl Design {
    pub fn from_columns(n: usize, cols: Vec<Vec<f64>>) -> Result<Self> {
        let p = cols.len();
        let mut data = Vec::with_capacity(n * p);
        for c in cols {
            if c.len() != n {
                return Err(Error::Length { expected: n, found: c.len() });
            }
            data.extend(c);
        }
        Ok(Self { n, p, cols: data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let cols = (0..p).map(|j| rows.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect()).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::Length { expected: p, found: r.len() });
        }
        Self::from_columns(n, cols)
    }

    pub fn from_matrix(fm: &FeatureMatrix) -> Self {
        let cols = (0..fm.n_features()).map(|j| fm.column(j)).collect();
        Self::from_columns(fm.n_cases(), cols).expect("consistent matrix")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j * self.n + i]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let cols = (0..self.p).map(|j| idx.iter().map(|&i| self.get(i, j)).collect()).collect();
        Self::from_columns(idx.len(), cols).expect("consistent lengths")
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let cols = idx.iter().map(|&j| self.col(j).to_vec()).collect();
        Self::from_columns(self.n, cols).expect("consistent lengths")
    }
}

/// Per-feature `(x - mean) / std` with population standard deviation;
/// constant features keep `std = 1` and standardize to zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &Design) -> Self {
        let n = x.n().max(1) as f64;
        let mut mean = Vec::with_capacity(x.p());
        let mut std = Vec::with_capacity(x.p());
        for j in 0..x.p() {
            let c = x.col(j);
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &Design) -> Design {
        let cols = (0..x.p()).map(|j| x.col(j).iter().map(|v| (v - self.mean[j]) / self.std[j]).collect()).collect();
        Design::from_columns(x.n(), cols).expect("consistent lengths")
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { mean: idx.iter().map(|&j| self.mean[j]).collect(), std: idx.iter().map(|&j| self.std[j]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LassoResult {
    pub lambda: f64,
    /// Intercept followed by one coefficient per standardized feature.
    pub beta: Vec<f64>,
    pub selected: Vec<usize>,
    pub standardization: Standardization,
    pub sweeps: usize,
}

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest penalty that zeroes every coefficient: `max_j |z_j^T (y - mean y)| / n`.
pub fn lambda_max(z: &Design, y: &[f64]) -> f64 {
    let ybar = mean(y);
    let r: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    (0..z.p()).map(|j| dot(z.col(j), &r).abs() / z.n() as f64).fold(0.0, f64::max)
}

/// `count` log-spaced penalties from `lmax` down to `ratio * lmax`.
pub fn lambda_grid(lmax: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 || lmax <= 0.0 {
        return vec![lmax.max(0.0)];
    }
    let step = ratio.ln() / (count - 1) as f64;
    (0..count).map(|i| lmax * (step * i as f64).exp()).collect()
}

/// Cyclic coordinate descent on an already standardized design. Returns
/// intercept-first coefficients and the number of sweeps.
pub fn lasso_coordinate_descent(z: &Design, y: &[f64], lambda: f64, warm: Option<&[f64]>) -> Result<(Vec<f64>, usize)> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if y.len() != z.n() {
        return Err(Error::Length { expected: z.n(), found: y.len() });
    }
    let (n, p) = (z.n() as f64, z.p());
    let mut beta = warm.map_or_else(|| vec![0.0; p + 1], <[f64]>::to_vec);
    if beta.len() != p + 1 {
        return Err(Error::Length { expected: p + 1, found: beta.len() });
    }
    // The zero solution satisfies the optimality conditions exactly here;
    // iterating would only let rounding in the intercept leak into beta.
    if lambda >= lambda_max(z, y) {
        let mut beta = vec![0.0; p + 1];
        beta[0] = mean(y);
        return Ok((beta, 0));
    }
    let mut r: Vec<f64> = y.to_vec();
    for (i, ri) in r.iter_mut().enumerate() {
        *ri -= beta[0] + (0..p).map(|j| z.get(i, j) * beta[j + 1]).sum::<f64>();
    }
    let scale: Vec<f64> = (0..p).map(|j| dot(z.col(j), z.col(j)) / n).collect();
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let shift = mean(&r);
        beta[0] += shift;
        r.iter_mut().for_each(|v| *v -= shift);
        let mut max_change = shift.abs();
        for j in 0..p {
            if scale[j] == 0.0 {
                continue;
            }
            let col = z.col(j);
            let old = beta[j + 1];
            let rho = dot(col, &r) / n + scale[j] * old;
            let new = soft_threshold(rho, lambda) / scale[j];
            let d = new - old;
            if d != 0.0 {
                for (ri, x) in r.iter_mut().zip(col) {
                    *ri -= d * x;
                }
                beta[j + 1] = new;
                max_change = max_change.max(d.abs());
            }
        }
        if max_change < LASSO_TOL {
            break;
        }
    }
    if sweeps == LASSO_MAX_SWEEPS {
        log::warn!("lasso stopped at the sweep limit ({LASSO_MAX_SWEEPS}) for lambda={lambda}");
    }
    Ok((beta, sweeps))
}

/// Standardize `x` on its own rows and solve the LASSO at `lambda`.
pub fn lasso_fit(x: &Design, y: &[f64], lambda: f64) -> Result<LassoResult> {
    let standardization = Standardization::fit(x);
    let z = standardization.apply(x);
    let (beta, sweeps) = lasso_coordinate_descent(&z, y, lambda, None)?;
    let selected = (0..x.p()).filter(|&j| beta[j + 1] != 0.0).collect();
    Ok(LassoResult { lambda, beta, selected, standardization, sweeps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoCv {
    pub lambda: f64,
    pub result: LassoResult,
    pub grid: Vec<f64>,
    /// Mean held-out squared error per grid point.
    pub cv_error: Vec<f64>,
}

/// Stratified `folds`-fold CV over a descending penalty grid; the minimum
/// mean squared error wins, ties going to the larger penalty. The chosen
/// penalty is refit on all rows.
pub fn lasso_cv(x: &Design, labels: &[u8], grid: Option<&[f64]>, folds: usize, n_grid: usize, ratio: f64, seed: u64) -> Result<LassoCv> {
    if folds < 2 {
        return Err(Error::Parameter("lasso_cv needs at least 2 folds".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let grid: Vec<f64> = match grid {
        Some([]) => return Err(Error::Parameter("empty lambda grid".into())),
        Some(g) => {
            let mut g = g.to_vec();
            g.sort_by(|a, b| b.total_cmp(a));
            g
        }
        None => {
            let z = Standardization::fit(x).apply(x);
            lambda_grid(lambda_max(&z, &y), n_grid, ratio)
        }
    };
    let assignment = assign_folds(labels, folds, seed)?;
    let mut err = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..x.n()).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..x.n()).filter(|&i| assignment[i] == f).collect();
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        if test.is_empty() || ytr.iter().all(|&v| v == ytr[0]) {
            return Err(Error::DegenerateFold(f));
        }
        let xtr = x.select_rows(&train);
        let st = Standardization::fit(&xtr);
        let ztr = st.apply(&xtr);
        let zte = st.apply(&x.select_rows(&test));
        let mut warm: Option<Vec<f64>> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            let (beta, _) = lasso_coordinate_descent(&ztr, &ytr, lambda, warm.as_deref())?;
            let mse = test
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    let pred = beta[0] + (0..zte.p()).map(|j| zte.get(r, j) * beta[j + 1]).sum::<f64>();
                    (y[i] - pred).powi(2)
                })
                .sum::<f64>()
                / test.len() as f64;
            err[g] += mse / folds as f64;
            warm = Some(beta);
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if err[g] < err[best] {
            best = g;
        }
    }
    let lambda = grid[best];
    let result = lasso_fit(x, &y, lambda)?;
    Ok(LassoCv { lambda, result, grid, cv_error: err })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept followed by one coefficient per column.
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub grad_norm: f64,
}

pub const LOGISTIC_TOL: f64 = 1e-6;
pub const LOGISTIC_MAX_ITER: usize = 10_000;
pub const RIDGE: f64 = 1e-6;

fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

struct LogisticProblem<'a> {
    x: &'a Design,
    y: Vec<f64>,
    ridge: f64,
}

impl LogisticProblem<'_> {
    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![beta[0]; self.x.n()];
        for j in 0..self.x.p() {
            for (e, v) in eta.iter_mut().zip(self.x.col(j)) {
                *e += beta[j + 1] * v;
            }
        }
        eta
    }

    fn loglik(&self, beta: &[f64]) -> f64 {
        let ll: f64 = self.eta(beta).iter().zip(&self.y).map(|(&e, &y)| y * log_sigmoid(e) + (1.0 - y) * log_sigmoid(-e)).sum();
        ll - 0.5 * self.ridge * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let eta = self.eta(beta);
        let r: Vec<f64> = eta.iter().zip(&self.y).map(|(&e, &y)| y - sigmoid(e)).collect();
        let mut g = vec![r.iter().sum()];
        for j in 0..self.x.p() {
            g.push(dot(self.x.col(j), &r) - self.ridge * beta[j + 1]);
        }
        g
    }

    /// Negative Hessian of the penalized log-likelihood plus `ridge` on the
    /// intercept diagonal to keep it positive definite.
    fn information(&self, beta: &[f64]) -> Vec<f64> {
        let q = self.x.p() + 1;
        let w: Vec<f64> = self.eta(beta).iter().map(|&e| sigmoid(e) * sigmoid(-e)).collect();
        let at = |i: usize, j: usize| if j == 0 { 1.0 } else { self.x.get(i, j - 1) };
        let mut h = vec![0.0; q * q];
        for a in 0..q {
            for b in a..q {
                let v: f64 = (0..self.x.n()).map(|i| w[i] * at(i, a) * at(i, b)).sum();
                h[a * q + b] = v;
                h[b * q + a] = v;
            }
            h[a * q + a] += self.ridge;
        }
        h
    }
}

/// Solve `A x = b` for symmetric positive definite `A` by Cholesky.
fn solve_spd(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i * n + k] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k * n + i] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    Some(b)
}

/// Damped Newton (IRLS) ascent on the ridge-stabilized binomial
/// log-likelihood; stops when the gradient infinity norm is below
/// [`LOGISTIC_TOL`].
pub fn logistic_fit(x: &Design, labels: &[u8], ridge: f64) -> Result<LogisticFit> {
    if labels.len() != x.n() {
        return Err(Error::Length { expected: x.n(), found: labels.len() });
    }
    let prob = LogisticProblem { x, y: labels.iter().map(|&v| v as f64).collect(), ridge };
    let mut beta = vec![0.0; x.p() + 1];
    let mut ll = prob.loglik(&beta);
    let mut trace = vec![ll];
    for it in 0..LOGISTIC_MAX_ITER {
        let g = prob.gradient(&beta);
        let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gn < LOGISTIC_TOL {
            return Ok(LogisticFit { beta, iterations: it, loglik_trace: trace, grad_norm: gn });
        }
        let step = solve_spd(prob.information(&beta), g.clone()).unwrap_or(g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let l = prob.loglik(&cand);
            if l >= ll {
                accepted = Some((cand, l));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, l)) => {
                beta = b;
                ll = l;
                trace.push(l);
            }
            None => return Err(Error::Convergence(it)),
        }
    }
    Err(Error::Convergence(LOGISTIC_MAX_ITER))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalModel {
    pub category: Category,
    pub lambda: f64,
    pub feature_ids: Vec<String>,
    pub standardization: Standardization,
    /// Intercept followed by one coefficient per selected feature.
    pub beta: Vec<f64>,
    pub fold: Option<usize>,
}

impl SurvivalModel {
    /// Probability of survival for raw feature values in `feature_ids` order.
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_ids.len() {
            return Err(Error::Length { expected: self.feature_ids.len(), found: x.len() });
        }
        let s = &self.standardization;
        let eta = self.beta[0] + x.iter().enumerate().map(|(j, v)| self.beta[j + 1] * (v - s.mean[j]) / s.std[j]).sum::<f64>();
        Ok(sigmoid(eta))
    }

    /// Probability of survival per case of `fm`, matched by feature id.
    pub fn predict(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        let sub = fm.select_ids(&self.feature_ids)?;
        (0..sub.n_cases()).map(|c| self.predict_row(sub.row(c))).collect()
    }

    /// `1 - P(alive)`.
    pub fn predict_death(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.predict(fm)?.into_iter().map(|p| 1.0 - p).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        if m.beta.len() != m.feature_ids.len() + 1 {
            return Err(Error::Length { expected: m.feature_ids.len() + 1, found: m.beta.len() });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SurvivalConfig {
    pub lasso_folds: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    /// Skip the penalty search and use this value.
    pub fixed_lambda: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self { lasso_folds: 5, n_lambda: 50, lambda_ratio: 1e-3, fixed_lambda: None, ridge: RIDGE, seed: 0 }
    }
}

/// LASSO selection then logistic regression on the selected features.
pub fn fit_survival(fm: &FeatureMatrix, outcome: &OutcomeVector, cfg: &SurvivalConfig, fold: Option<usize>) -> Result<SurvivalModel> {
    if fm.case_ids() != outcome.case_ids.as_slice() {
        return Err(Error::Parameter("outcome cases do not match feature matrix".into()));
    }
    if outcome.y.iter().all(|&v| v == outcome.y[0]) {
        return Err(Error::SingleClass);
    }
    let x = Design::from_matrix(fm);
    let lasso = match cfg.fixed_lambda {
        Some(l) => lasso_fit(&x, &outcome.y.iter().map(|&v| v as f64).collect::<Vec<_>>(), l)?,
        None => lasso_cv(&x, &outcome.y, None, cfg.lasso_folds, cfg.n_lambda, cfg.lambda_ratio, cfg.seed)?.result,
    };
    if lasso.selected.is_empty() {
        log::warn!("lasso selected no features (lambda={}); fitting intercept-only model", lasso.lambda);
    }
    let standardization = lasso.standardization.select(&lasso.selected);
    let z = standardization.apply(&x.select_cols(&lasso.selected));
    let fit = logistic_fit(&z, &outcome.y, cfg.ridge)?;
    Ok(SurvivalModel {
        category: outcome.category,
        lambda: lasso.lambda,
        feature_ids: lasso.selected.iter().map(|&j| fm.feature_ids()[j].clone()).collect(),
        standardization,
        beta: fit.beta,
        fold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_design(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Design {
        Design::from_columns(n, (0..p).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()).unwrap()
    }

    #[test]
    fn categories_parse() {
        assert_eq!("2os".parse::<Category>().unwrap(), Category::Os2);
        assert_eq!(Category::Ds5.to_string(), "5DS");
        assert!("3OS".parse::<Category>().is_err());
        assert_eq!(serde_json::to_string(&Category::Os5).unwrap(), "\"5OS\"");
        assert!(OutcomeVector::new(Category::Os2, vec!["a".into()], vec![2]).is_err());
    }

    #[test]
    fn lambda_at_max_zeroes_everything_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_design(30, 8, &mut rng);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(0..2) as f64).collect();
        let z = Standardization::fit(&x).apply(&x);
        let lmax = lambda_max(&z, &y);
        for l in [lmax, lmax * 1.5] {
            let r = lasso_fit(&x, &y, l).unwrap();
            assert!(r.beta[1..].iter().all(|&b| b == 0.0));
            assert!(r.selected.is_empty());
            assert!((r.beta[0] - mean(&y)).abs() < 1e-15);
        }
        assert!(!lasso_fit(&x, &y, lmax * 0.9).unwrap().selected.is_empty());
        assert!(lasso_fit(&x, &y, -1.0).is_err());
    }

    #[test]
    fn unpenalized_single_predictor_is_least_squares() {
        let x = Design::from_columns(5, vec![vec![1.0, 2.0, 3.0, 4.0, 6.0]]).unwrap();
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let r = lasso_fit(&x, &y, 0.0).unwrap();
        let (mx, my) = (16.0 / 5.0, 3.0 / 5.0);
        let sxy: f64 = x.col(0).iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.col(0).iter().map(|a| (a - mx) * (a - mx)).sum();
        assert!((r.beta[1] / r.standardization.std[0] - sxy / sxx).abs() < 1e-8);
    }

    #[test]
    fn kkt_conditions_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (n, p) = (rng.random_range(10..40), rng.random_range(2..15));
            let x = gaussian_design(n, p, &mut rng);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let z = Standardization::fit(&x).apply(&x);
            let lambda = lambda_max(&z, &y) * rng.random_range(0.05..1.0);
            let r = lasso_fit(&x, &y, lambda).unwrap();
            let res: Vec<f64> = (0..n).map(|i| y[i] - r.beta[0] - (0..p).map(|j| z.get(i, j) * r.beta[j + 1]).sum::<f64>()).collect();
            for j in 0..p {
                let g = dot(z.col(j), &res) / n as f64;
                let b = r.beta[j + 1];
                if b != 0.0 {
                    assert!((g - lambda * b.signum()).abs() < 1e-5);
                } else {
                    assert!(g.abs() <= lambda + 1e-5);
                }
            }
        }
    }

    #[test]
    fn grid_is_descending_log_spaced() {
        let g = lambda_grid(2.0, 50, 1e-3);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 2.0);
        assert!((g[49] - 2e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_point_grid_is_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian_design(24, 4, &mut rng);
        let labels: Vec<u8> = (0..24).map(|i| (i % 2) as u8).collect();
        let cv = lasso_cv(&x, &labels, Some(&[0.05]), 3, 50, 1e-3, 0).unwrap();
        assert_eq!(cv.lambda, 0.05);
        assert!(lasso_cv(&x, &labels, Some(&[]), 3, 50, 1e-3, 0).is_err());
        assert!(lasso_cv(&x, &labels, None, 1, 50, 1e-3, 0).is_err());
    }

    #[test]
    fn planted_features_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian_design(120, 30, &mut rng);
        let labels: Vec<u8> = (0..120)
            .map(|i| {
                let s = 1.5 * x.get(i, 3) - 1.2 * x.get(i, 11) + 1.0 * x.get(i, 20) + 0.3 * rng.sample::<f64, _>(StandardNormal);
                (s > 0.0) as u8
            })
            .collect();
        let cv = lasso_cv(&x, &labels, None, 5, 50, 1e-3, 0).unwrap();
        for j in [3, 11, 20] {
            assert!(cv.result.selected.contains(&j), "feature {j} missing from {:?}", cv.result.selected);
        }
        let mut mags: Vec<(f64, usize)> = (0..30).map(|j| (cv.result.beta[j + 1].abs(), j)).collect();
        mags.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut top: Vec<usize> = mags[..3].iter().map(|m| m.1).collect();
        top.sort();
        assert_eq!(top, [3, 11, 20]);
    }

    #[test]
    fn degenerate_inner_fold_is_reported() {
        let x = Design::from_columns(4, vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert!(matches!(lasso_cv(&x, &[0, 1, 1, 1], None, 2, 5, 1e-3, 0), Err(Error::DegenerateFold(_))));
    }

    #[test]
    fn logistic_intercept_only_is_symmetric() {
        let x = Design::from_columns(6, vec![]).unwrap();
        let fit = logistic_fit(&x, &[0, 1, 0, 1, 1, 0], RIDGE).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
    }

    #[test]
    fn logistic_converges_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let x = gaussian_design(60, 4, &mut rng);
            let y: Vec<u8> = (0..60).map(|i| (x.get(i, 0) + rng.sample::<f64, _>(StandardNormal) > 0.0) as u8).collect();
            let fit = logistic_fit(&x, &y, RIDGE).unwrap();
            assert!(fit.grad_norm < LOGISTIC_TOL);
            assert!(fit.loglik_trace.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn separable_data_is_classified_perfectly() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<u8> = xs.iter().map(|&v| (v > 0.0) as u8).collect();
        let x = Design::from_columns(20, vec![xs.clone()]).unwrap();
        let fit = logistic_fit(&x, &y, RIDGE).unwrap();
        for (v, &l) in xs.iter().zip(&y) {
            assert_eq!((sigmoid(fit.beta[0] + fit.beta[1] * v) >= 0.5) as u8, l);
        }
    }

    #[test]
    fn predict_arithmetic() {
        let m = SurvivalModel {
            category: Category::Os2,
            lambda: 0.1,
            feature_ids: vec!["C00001".into(), "C00002".into()],
            standardization: Standardization { mean: vec![0.0; 2], std: vec![1.0; 2] },
            beta: vec![0.5, -1.0, 2.0],
            fold: None,
        };
        assert_eq!(m.predict_row(&[1.0, 0.25]).unwrap(), 0.5);
        assert!(m.predict_row(&[1.0]).is_err());
        let back = SurvivalModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let json = m.to_json().unwrap();
        let order: Vec<usize> = ["category", "lambda", "feature_ids", "standardization", "beta"].iter().map(|k| json.find(k).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}
