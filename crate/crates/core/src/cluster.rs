//! Unsupervised reduction of a feature pool: Pearson correlation distance,
//! Voronoi-iteration k-medoids with restarts, Silhouette-based choice of `k`.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `1 - R` by the direct covariance formula.
pub fn pearson_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Length { expected: x.len(), found: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Parameter("pearson distance needs at least 2 observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation(0));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation(1));
    }
    Ok(1.0 - (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise distances between `n` items.
pub trait DistanceSource {
    fn n(&self) -> usize;
    fn d(&self, i: usize, j: usize) -> f64;
}

/// Feature columns centred and scaled to unit norm, so that
/// `1 - <z_i, z_j>` is the correlation distance.
#[derive(Debug, Clone)]
pub struct NormalizedColumns {
    n_obs: usize,
    z: Vec<f64>,
}

impl NormalizedColumns {
    pub fn new(fm: &FeatureMatrix) -> Result<Self> {
        let (m, p) = (fm.n_cases(), fm.n_features());
        if m < 2 {
            return Err(Error::Parameter("correlation needs at least 2 cases".into()));
        }
        let mut z = Vec::with_capacity(m * p);
        for j in 0..p {
            let col = fm.column(j);
            let mean = col.iter().sum::<f64>() / m as f64;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            if ss == 0.0 {
                return Err(Error::UndefinedCorrelation(j));
            }
            let s = ss.sqrt();
            z.extend(col.iter().map(|v| (v - mean) / s));
        }
        Ok(Self { n_obs: m, z })
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.z[j * self.n_obs..(j + 1) * self.n_obs]
    }
}

impl DistanceSource for NormalizedColumns {
    fn n(&self) -> usize {
        self.z.len() / self.n_obs
    }

    fn d(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let r: f64 = self.col(i).iter().zip(self.col(j)).map(|(a, b)| a * b).sum();
        1.0 - r.clamp(-1.0, 1.0)
    }
}

/// Dense symmetric `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_source(src: &impl DistanceSource) -> Self {
        let n = src.n();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = src.d(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = if i == j { 0.0 } else { f(i, j) };
            }
        }
        Self { n, d }
    }
}

impl DistanceSource for DistanceMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn d(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Correlation distances for the columns of `fm`, precomputed when the dense
/// matrix fits in `max_dense_bytes`.
pub enum FeatureDistances {
    Dense(DistanceMatrix),
    Lazy(NormalizedColumns),
}

impl FeatureDistances {
    pub fn new(fm: &FeatureMatrix, max_dense_bytes: usize) -> Result<Self> {
        let cols = NormalizedColumns::new(fm)?;
        let p = fm.n_features();
        Ok(if p.saturating_mul(p).saturating_mul(8) <= max_dense_bytes {
            Self::Dense(DistanceMatrix::from_source(&cols))
        } else {
            Self::Lazy(cols)
        })
    }
}

impl DistanceSource for FeatureDistances {
    fn n(&self) -> usize {
        match self {
            Self::Dense(m) => m.n(),
            Self::Lazy(c) => c.n(),
        }
    }

    fn d(&self, i: usize, j: usize) -> f64 {
        match self {
            Self::Dense(m) => m.d(i, j),
            Self::Lazy(c) => c.d(i, j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Item index of each cluster's medoid.
    pub medoids: Vec<usize>,
    /// Cluster index of each item.
    pub assignment: Vec<usize>,
    pub total_within_distance: f64,
    /// Total after each assignment step.
    pub trace: Vec<f64>,
}

pub const MAX_ITER: usize = 100;

fn assign(dist: &impl DistanceSource, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut assignment = Vec::with_capacity(dist.n());
    let mut total = 0.0;
    for i in 0..dist.n() {
        let (mut best, mut bd) = (0, f64::INFINITY);
        for (c, &m) in medoids.iter().enumerate() {
            if m == i {
                (best, bd) = (c, 0.0);
                break;
            }
            let d = dist.d(i, m);
            if d < bd {
                (best, bd) = (c, d);
            }
        }
        assignment.push(best);
        total += bd;
    }
    (assignment, total)
}

/// First medoid uniform, each further one drawn with probability
/// proportional to its distance from the nearest medoid so far.
fn seed_medoids(dist: &impl DistanceSource, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = dist.n();
    let mut medoids = vec![rng.random_range(0..n)];
    let mut near: Vec<f64> = (0..n).map(|i| dist.d(i, medoids[0])).collect();
    while medoids.len() < k {
        let total: f64 = (0..n).filter(|i| !medoids.contains(i)).map(|i| near[i]).sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|i| !medoids.contains(i)) {
                if near[i] > 0.0 {
                    pick = Some(i);
                    u -= near[i];
                    if u < 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !medoids.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        medoids.push(next);
        for (i, v) in near.iter_mut().enumerate() {
            *v = v.min(dist.d(i, next));
        }
    }
    medoids
}

/// Voronoi-iteration k-medoids.
pub fn kmedoids(dist: &impl DistanceSource, k: usize, seed: u64) -> Result<Clustering> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmedoids_with(dist, k, &mut rng)
}

fn kmedoids_with(dist: &impl DistanceSource, k: usize, rng: &mut ChaCha8Rng) -> Result<Clustering> {
    let n = dist.n();
    if k < 2 || k >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut medoids = seed_medoids(dist, k, rng);
    medoids.sort_unstable();
    let (mut assignment, mut total) = assign(dist, &medoids);
    let mut trace = vec![total];
    for _ in 1..MAX_ITER {
        let mut members = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        for (c, m) in members.iter().enumerate() {
            let mut best = (f64::INFINITY, medoids[c]);
            for &j in m {
                let cost: f64 = m.iter().map(|&i| dist.d(i, j)).sum();
                if cost < best.0 {
                    best = (cost, j);
                }
            }
            medoids[c] = best.1;
        }
        let (next, t) = assign(dist, &medoids);
        trace.push(t);
        total = t;
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(Clustering { k, medoids, assignment, total_within_distance: total, trace })
}

/// Best of `restarts` independent runs and the mean total across them.
/// Restart `r` draws its initialisation from stream `r` of `seed`.
pub fn multi_restart(dist: &impl DistanceSource, k: usize, restarts: usize, seed: u64) -> Result<(Clustering, f64)> {
    if restarts == 0 {
        return Err(Error::Parameter("restarts must be >= 1".into()));
    }
    let mut best: Option<Clustering> = None;
    let mut sum = 0.0;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let c = kmedoids_with(dist, k, &mut rng)?;
        sum += c.total_within_distance;
        if best.as_ref().is_none_or(|b| c.total_within_distance < b.total_within_distance) {
            best = Some(c);
        }
    }
    Ok((best.expect("restarts >= 1"), sum / restarts as f64))
}

/// Mean Silhouette value; singleton clusters contribute 0, as does `a == b`.
pub fn silhouette(dist: &impl DistanceSource, c: &Clustering) -> Result<f64> {
    let n = dist.n();
    if c.k < 2 {
        return Err(Error::KOutOfRange { k: c.k, n });
    }
    if c.assignment.len() != n {
        return Err(Error::Length { expected: n, found: c.assignment.len() });
    }
    let mut size = vec![0usize; c.k];
    for &a in &c.assignment {
        size[a] += 1;
    }
    if let Some(e) = size.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster(e));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; c.k];
    for i in 0..n {
        let own = c.assignment[i];
        if size[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[c.assignment[j]] += dist.d(i, j);
            }
        }
        let a = sums[own] / (size[own] - 1) as f64;
        let b = (0..c.k).filter(|&q| q != own).map(|q| sums[q] / size[q] as f64).fold(f64::INFINITY, f64::min);
        if a != b {
            total += (b - a) / a.max(b);
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectionReport {
    pub k: usize,
    pub silhouette_curve: Vec<(usize, f64)>,
    pub medoid_ids: Vec<String>,
    pub mean_within_per_k: Vec<(usize, f64)>,
    pub removed_constant: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectOptions {
    pub k_min: usize,
    /// Upper bound, inclusive, clipped to `n_features - 1`.
    pub k_max: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_dense_bytes: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { k_min: 2, k_max: 40, restarts: 10, seed: 0, max_dense_bytes: 1 << 30 }
    }
}

/// Silhouette-optimal `k` (lowest on ties) and the medoid columns.
pub fn select_k(fm: &FeatureMatrix, ks: &[usize], restarts: usize, seed: u64, max_dense_bytes: usize) -> Result<(FeatureMatrix, SelectionReport)> {
    if ks.is_empty() {
        return Err(Error::Parameter("empty k range".into()));
    }
    let dist = FeatureDistances::new(fm, max_dense_bytes)?;
    let mut curve = Vec::new();
    let mut means = Vec::new();
    let mut best: Option<(f64, Clustering)> = None;
    for &k in ks {
        let (c, mean) = multi_restart(&dist, k, restarts, seed)?;
        let s = silhouette(&dist, &c)?;
        log::debug!("k={k} silhouette={s:.6} mean_within={mean:.6}");
        curve.push((k, s));
        means.push((k, mean));
        if best.as_ref().is_none_or(|(bs, bc)| s > *bs || (s == *bs && k < bc.k)) {
            best = Some((s, c));
        }
    }
    let (_, c) = best.expect("nonempty k range");
    let reduced = fm.select_columns(&c.medoids)?;
    let report = SelectionReport {
        k: c.k,
        silhouette_curve: curve,
        medoid_ids: reduced.feature_ids().to_vec(),
        mean_within_per_k: means,
        removed_constant: Vec::new(),
    };
    Ok((reduced, report))
}

/// Drop constant columns, then run [`select_k`] over `k_min..=min(k_max, p-1)`.
pub fn reduce_features(fm: &FeatureMatrix, opts: &SelectOptions) -> Result<(FeatureMatrix, SelectionReport)> {
    let (clean, removed) = fm.remove_constant()?;
    let p = clean.n_features();
    let hi = opts.k_max.min(p.saturating_sub(1));
    let ks: Vec<usize> = (opts.k_min.max(2)..=hi).collect();
    let (reduced, mut report) = select_k(&clean, &ks, opts.restarts, opts.seed, opts.max_dense_bytes)?;
    report.removed_constant = removed;
    Ok((reduced, report))
}
