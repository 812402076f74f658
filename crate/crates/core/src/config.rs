//! Pipeline configuration, read from TOML. Every section has defaults; the
//! all-default configuration is the desk-scale experiment.

use crate::cluster::SelectOptions;
use crate::error::{Error, Result};
use crate::eval::{ClusterMode, CvConfig};
use crate::phantom::{PhantomSpec, SurvivalCoeffs};
use crate::survival::{Category, SurvivalConfig};
use crate::unet::{InputNorm, UNetConfig};
use crate::visualize::{ActMaxConfig, ActTarget, AlphaReduction};
use crate::volume::{Axis, ClipRange, Modality};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    /// Output root, relative to the config file's directory.
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    pub preprocess: PreprocessSection,
    pub unet: UNetSection,
    pub segmentation: SegmentationSection,
    pub cluster: ClusterSection,
    pub survival: SurvivalSection,
    pub cv: CvSection,
    pub visualize: VisualizeSection,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_cases: usize,
    pub dims: [usize; 3],
    pub tumor_radius_range: (f64, f64),
    pub heterogeneity: f64,
    pub vessel_count: usize,
    pub noise_sigma: f64,
    pub coeffs: SurvivalCoeffs,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let s = PhantomSpec::default();
        Self {
            n_cases: 96,
            dims: s.dims,
            tumor_radius_range: s.tumor_radius_range,
            heterogeneity: s.heterogeneity,
            vessel_count: s.vessel_count,
            noise_sigma: s.noise_sigma,
            coeffs: SurvivalCoeffs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Isotropic target spacing in mm.
    pub spacing: f32,
    pub roi: [usize; 3],
    pub ct_clip: (f32, f32),
    pub pet_clip: (f32, f32),
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { spacing: 1.0, roi: [32, 32, 16], ct_clip: (-500.0, 200.0), pet_clip: (0.01, 20.0) }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSection {
    pub base_width: usize,
    pub depth: usize,
    pub convs_per_level: usize,
}

impl Default for UNetSection {
    fn default() -> Self {
        Self { base_width: 8, depth: 4, convs_per_level: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    /// Segmentation cases are generated with ids from `first_id` upward,
    /// disjoint from the survival cohort.
    pub first_id: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub max_translation: usize,
    pub patience: Option<usize>,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self { first_id: 100_000, n_train: 24, n_val: 8, epochs: 20, lr: 5e-4, weight_decay: 1e-4, augment: true, max_translation: 2, patience: None }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub mode: ClusterMode,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_dense_bytes: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let s = SelectOptions::default();
        Self { mode: ClusterMode::Joint, k_min: s.k_min, k_max: s.k_max, restarts: s.restarts, max_dense_bytes: s.max_dense_bytes }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSection {
    pub category: Category,
    pub lasso_folds: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub fixed_lambda: Option<f64>,
    pub ridge: f64,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        let s = SurvivalConfig::default();
        Self { category: Category::Os2, lasso_folds: s.lasso_folds, n_lambda: s.n_lambda, lambda_ratio: s.lambda_ratio, fixed_lambda: None, ridge: s.ridge }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub n_folds: usize,
    pub threshold: f64,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { n_folds: 6, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeSection {
    /// Number of cohort cases rendered with risk overlays.
    pub cases: usize,
    pub axis: Axis,
    pub iterations: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub target: ActTarget,
    pub reduction: AlphaReduction,
    /// Cap on the number of selected neurons visualized per modality.
    pub max_neurons: usize,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        let a = ActMaxConfig::default();
        Self {
            cases: 2,
            axis: Axis::Z,
            iterations: a.iterations,
            init_mean: a.init_mean,
            init_std: a.init_std,
            target: a.target,
            reduction: AlphaReduction::Max,
            max_neurons: 8,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            phantom: PhantomSection::default(),
            preprocess: PreprocessSection::default(),
            unet: UNetSection::default(),
            segmentation: SegmentationSection::default(),
            cluster: ClusterSection::default(),
            survival: SurvivalSection::default(),
            cv: CvSection::default(),
            visualize: VisualizeSection::default(),
        }
    }
}

/// Stable 64-bit seed for a named stage.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Parse `path`; a relative `out_dir` is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        if c.out_dir.is_relative() {
            c.out_dir = path.parent().unwrap_or(Path::new(".")).join(&c.out_dir);
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, excluding `out_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        if self.phantom.n_cases == 0 {
            return Err(Error::Config("phantom.n_cases must be > 0".into()));
        }
        for m in [Modality::Ct, Modality::Pet] {
            self.unet_config(m).validate()?;
            self.clip(m)?;
        }
        if self.preprocess.roi.iter().any(|&d| d == 0 || d % 2 != 0) {
            return Err(Error::Config("preprocess.roi entries must be even and positive".into()));
        }
        if !(self.preprocess.spacing > 0.0) {
            return Err(Error::Config("preprocess.spacing must be positive".into()));
        }
        if self.segmentation.n_train == 0 || self.segmentation.n_val == 0 {
            return Err(Error::Config("segmentation.n_train and n_val must be > 0".into()));
        }
        if self.segmentation.first_id < self.phantom.n_cases {
            return Err(Error::Config("segmentation.first_id must lie beyond the survival cohort ids".into()));
        }
        if self.cv.n_folds < 2 || self.survival.lasso_folds < 2 {
            return Err(Error::Config("cv.n_folds and survival.lasso_folds must be >= 2".into()));
        }
        if self.cluster.restarts == 0 {
            return Err(Error::Config("cluster.restarts must be >= 1".into()));
        }
        self.act_max_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let p = &self.phantom;
        PhantomSpec {
            dims: p.dims,
            tumor_radius_range: p.tumor_radius_range,
            heterogeneity: p.heterogeneity,
            vessel_count: p.vessel_count,
            noise_sigma: p.noise_sigma,
            seed: derive_seed(self.seed, "phantom"),
        }
    }

    pub fn clip(&self, m: Modality) -> Result<ClipRange> {
        let (lo, hi) = match m {
            Modality::Ct => self.preprocess.ct_clip,
            Modality::Pet => self.preprocess.pet_clip,
            Modality::Mask => (0.0, 1.0),
        };
        ClipRange::new(lo, hi).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn unet_config(&self, m: Modality) -> UNetConfig {
        let (lo, hi) = match m {
            Modality::Ct => self.preprocess.ct_clip,
            _ => self.preprocess.pet_clip,
        };
        UNetConfig {
            input_dims: self.preprocess.roi,
            base_width: self.unet.base_width,
            depth: self.unet.depth,
            convs_per_level: self.unet.convs_per_level,
            norm: InputNorm::centered(lo as f64, hi as f64),
        }
    }

    pub fn cv_config(&self) -> CvConfig {
        let c = &self.cluster;
        let s = &self.survival;
        CvConfig {
            cluster_mode: c.mode,
            select: SelectOptions { k_min: c.k_min, k_max: c.k_max, restarts: c.restarts, seed: derive_seed(self.seed, "cluster"), max_dense_bytes: c.max_dense_bytes },
            survival: SurvivalConfig {
                lasso_folds: s.lasso_folds,
                n_lambda: s.n_lambda,
                lambda_ratio: s.lambda_ratio,
                fixed_lambda: s.fixed_lambda,
                ridge: s.ridge,
                seed: derive_seed(self.seed, "lasso"),
            },
            threshold: self.cv.threshold,
        }
    }

    pub fn act_max_config(&self) -> ActMaxConfig {
        let v = &self.visualize;
        ActMaxConfig { iterations: v.iterations, init_mean: v.init_mean, init_std: v.init_std, target: v.target, seed: derive_seed(self.seed, "actmax") }
    }
}
