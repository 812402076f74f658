//! Synthetic paired CT/PET phantoms with ground-truth tumor masks and
//! planted survival labels.
//!
//! A case is an ellipsoidal tumor with an intratumoral texture, surrounded
//! by tube-like vessels. Survival is drawn from a logistic model of the
//! standardized tumor volume and the texture amplitude, so downstream
//! prognosis quality is a falsifiable property of the pipeline.

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

pub const CT_BACKGROUND: f32 = -700.0;
pub const CT_TUMOR: f32 = 40.0;
pub const CT_VESSEL: f32 = 40.0;
pub const CT_CONTRAST: f32 = CT_TUMOR - CT_BACKGROUND;
pub const PET_BACKGROUND: f32 = 1.0;
pub const PET_TUMOR: f32 = 8.0;
pub const PET_CONTRAST: f32 = PET_TUMOR - PET_BACKGROUND;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Range of each ellipsoid semi-axis, in voxels.
    pub tumor_radius_range: (f64, f64),
    /// Upper bound of the per-case texture amplitude, in `[0, 1]`.
    pub heterogeneity: f64,
    pub vessel_count: usize,
    /// Noise standard deviation as a fraction of each channel's contrast.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 16],
            tumor_radius_range: (3.0, 6.0),
            heterogeneity: 0.5,
            vessel_count: 3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tumor_radius_range;
        let min_dim = *self.dims.iter().min().unwrap_or(&0) as f64;
        if !(lo > 0.0 && lo <= hi && hi < min_dim / 2.0) {
            return Err(Error::Parameter(format!(
                "tumor radius range ({lo}, {hi}) must satisfy 0 < min <= max < {}",
                min_dim / 2.0
            )));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::Parameter(format!("heterogeneity {} outside [0, 1]", self.heterogeneity)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Mean and standard deviation of the ellipsoid volume `4/3 pi r1 r2 r3`
    /// with independent uniform semi-axes.
    pub fn volume_moments(&self) -> (f64, f64) {
        let (a, b) = self.tumor_radius_range;
        let c = 4.0 / 3.0 * std::f64::consts::PI;
        let m1 = (a + b) / 2.0;
        let m2 = (a * a + a * b + b * b) / 3.0;
        let mean = c * m1.powi(3);
        let var = c * c * m2.powi(3) - mean * mean;
        (mean, var.max(0.0).sqrt())
    }
}

/// Coefficients of `P(dead) = logistic(a0 + a1 * z_volume + a2 * heterogeneity)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalCoeffs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Default for SurvivalCoeffs {
    fn default() -> Self {
        Self { a0: -0.5, a1: 4.0, a2: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Latent {
    /// Tumor mask voxel count.
    pub tumor_volume: usize,
    /// Texture amplitude used for this case.
    pub heterogeneity: f64,
    /// Tumor volume standardized by the generator's volume moments.
    pub normalized_volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: usize,
    pub ct: Volume,
    pub pet: Volume,
    pub mask: Volume,
    /// 1 alive, 0 dead.
    pub survival_label: u8,
    pub latent: Latent,
}

fn case_rng(seed: u64, case_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * case_id as u64 + stream);
    rng
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Bernoulli survival draw; returns 0 (dead) with probability
/// `logistic(a0 + a1 * normalized_volume + a2 * heterogeneity)`.
pub fn assign_survival<R: Rng>(latent: &Latent, coeffs: &SurvivalCoeffs, rng: &mut R) -> u8 {
    let p_dead = logistic(coeffs.a0 + coeffs.a1 * latent.normalized_volume + coeffs.a2 * latent.heterogeneity);
    if rng.random::<f64>() < p_dead { 0 } else { 1 }
}

struct Cylinder {
    point: [f64; 3],
    dir: [f64; 3],
    radius: f64,
}

impl Cylinder {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.point[0], p[1] - self.point[1], p[2] - self.point[2]];
        let t = d[0] * self.dir[0] + d[1] * self.dir[1] + d[2] * self.dir[2];
        let perp = [d[0] - t * self.dir[0], d[1] - t * self.dir[1], d[2] - t * self.dir[2]];
        perp.iter().map(|v| v * v).sum::<f64>() <= self.radius * self.radius
    }
}

/// Separable Gaussian blur with `sigma = 1` voxel and zero boundary.
fn smooth(vals: &[f32], dims: [usize; 3]) -> Vec<f32> {
    let w: Vec<f32> = (-2i32..=2).map(|k| (-(k * k) as f32 / 2.0).exp()).collect();
    let norm: f32 = w.iter().sum();
    let mut cur = vals.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let i = x + dims[0] * (y + dims[1] * z);
                    let mut acc = 0.0;
                    for (k, wk) in (-2i64..=2).zip(&w) {
                        let q = p[axis] as i64 + k;
                        if q >= 0 && (q as usize) < dims[axis] {
                            acc += wk * cur[(i as i64 + k * strides[axis] as i64) as usize];
                        }
                    }
                    next[i] = acc / norm;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Case with the default survival coefficients.
pub fn generate_case(spec: &PhantomSpec, case_id: usize) -> Result<PhantomCase> {
    generate_case_with(spec, case_id, &SurvivalCoeffs::default())
}

pub fn generate_case_with(spec: &PhantomSpec, case_id: usize, coeffs: &SurvivalCoeffs) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = case_rng(spec.seed, case_id, 0);
    let d = spec.dims;
    let (rlo, rhi) = spec.tumor_radius_range;
    let radii = [0; 3].map(|_| if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo });
    let center = [0, 1, 2].map(|a| {
        let mid = (d[a] as f64 - 1.0) / 2.0;
        let jitter = (d[a] as f64 / 8.0).min((d[a] as f64 - 1.0) / 2.0 - radii[a]).max(0.0);
        mid + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 }
    });
    let h = spec.heterogeneity * rng.random::<f64>();
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let vessels: Vec<Cylinder> = (0..spec.vessel_count)
        .map(|_| {
            let point = [0, 1, 2].map(|a| rng.random_range(0.0..d[a] as f64));
            let raw = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            Cylinder { point, dir: raw.map(|v| v / n), radius: rng.random_range(0.8..1.5) }
        })
        .collect();

    let n = d[0] * d[1] * d[2];
    let mut mask = vec![0.0f32; n];
    let mut ct = vec![CT_BACKGROUND; n];
    let mut texture = vec![0.0f32; n];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let i = x + d[0] * (y + d[1] * z);
                let p = [x as f64, y as f64, z as f64];
                let rho: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                if rho <= 1.0 {
                    mask[i] = 1.0;
                    let t = waves.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>() / 3.0;
                    texture[i] = (h * t) as f32;
                    ct[i] = CT_TUMOR + CT_CONTRAST * 0.5 * texture[i];
                } else if vessels.iter().any(|c| c.contains(p)) {
                    ct[i] = CT_VESSEL;
                }
            }
        }
    }
    let uptake: Vec<f32> = mask.iter().zip(&texture).map(|(&m, &t)| m * (1.0 + t)).collect();
    let mut pet: Vec<f32> = smooth(&uptake, d).iter().map(|&u| PET_BACKGROUND + PET_CONTRAST * u).collect();

    if spec.noise_sigma > 0.0 {
        let ct_noise = Normal::new(0.0, spec.noise_sigma * CT_CONTRAST as f64).expect("finite sigma");
        let pet_noise = Normal::new(0.0, spec.noise_sigma * PET_CONTRAST as f64).expect("finite sigma");
        for v in ct.iter_mut() {
            *v += ct_noise.sample(&mut rng) as f32;
        }
        for v in pet.iter_mut() {
            *v += pet_noise.sample(&mut rng) as f32;
        }
    }

    let tumor_volume = mask.iter().filter(|&&m| m != 0.0).count();
    let (mean, sd) = spec.volume_moments();
    let latent = Latent {
        tumor_volume,
        heterogeneity: h,
        normalized_volume: if sd > 0.0 { (tumor_volume as f64 - mean) / sd } else { 0.0 },
    };
    let survival_label = assign_survival(&latent, coeffs, &mut case_rng(spec.seed, case_id, 1));
    let sp = [1.0; 3];
    Ok(PhantomCase {
        case_id,
        ct: Volume::new(d, sp, ct, Modality::Ct)?,
        pet: Volume::new(d, sp, pet, Modality::Pet)?,
        mask: Volume::new(d, sp, mask, Modality::Mask)?,
        survival_label,
        latent,
    })
}

/// Cases `first_id .. first_id + n`.
pub fn generate_range(spec: &PhantomSpec, first_id: usize, n: usize, coeffs: &SurvivalCoeffs) -> Result<Vec<PhantomCase>> {
    (first_id..first_id + n).map(|id| generate_case_with(spec, id, coeffs)).collect()
}

pub fn generate_cohort(spec: &PhantomSpec, n: usize, coeffs: &SurvivalCoeffs) -> Result<Vec<PhantomCase>> {
    if n == 0 {
        return Err(Error::Parameter("cohort size must be positive".into()));
    }
    generate_range(spec, 0, n, coeffs)
}

/// One row of the cohort manifest CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub case_id: usize,
    pub ct_path: PathBuf,
    pub pet_path: PathBuf,
    pub mask_path: PathBuf,
    pub survival_label: u8,
    pub tumor_volume: usize,
    pub heterogeneity: f64,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Serialization(e.to_string()))).collect()
}
