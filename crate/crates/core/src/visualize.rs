//! Feature visualization: activation maximization of bottleneck neurons,
//! rectified-gradient channel weights, risk maps, and PGM/PPM slice export.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::survival::SurvivalModel;
use crate::unet::{tensor_to_volume, UNetModel};
use crate::volume::{Axis, Modality, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActTarget {
    /// Value after the bottleneck ReLU.
    PostActivation,
    /// Convolution output before the ReLU.
    PreActivation,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ActMaxConfig {
    pub iterations: usize,
    /// Gaussian start in raw intensity units.
    pub init_mean: f64,
    pub init_std: f64,
    pub target: ActTarget,
    pub seed: u64,
}

impl Default for ActMaxConfig {
    fn default() -> Self {
        Self { iterations: 20, init_mean: 128.0, init_std: 1.0, target: ActTarget::PostActivation, seed: 0 }
    }
}

impl ActMaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Parameter("activation maximization needs at least one iteration".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Parameter("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ascent<T> {
    pub input: Tensor<T>,
    /// Objective before each update and after the last one.
    pub trace: Vec<f64>,
    pub steps: usize,
    /// Set when a zero gradient field ended the ascent early.
    pub stalled: bool,
}

/// `x <- x + grad / std(grad)` for up to `iterations` steps, where
/// `objective` returns the value and its gradient at `x`.
pub fn normalized_ascent<T: Scalar>(
    mut x: Tensor<T>,
    iterations: usize,
    mut objective: impl FnMut(&Tensor<T>) -> Result<(f64, Vec<T>)>,
) -> Result<Ascent<T>> {
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut steps = 0;
    let mut stalled = false;
    for _ in 0..iterations {
        let (v, g) = objective(&x)?;
        trace.push(v);
        let n = g.len() as f64;
        let mean = g.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        let var = g.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            stalled = true;
            break;
        }
        let gamma = T::of(1.0 / var.sqrt());
        for (xi, gi) in x.data_mut().iter_mut().zip(&g) {
            *xi += gamma * *gi;
        }
        steps += 1;
    }
    if !stalled {
        trace.push(objective(&x)?.0);
    }
    Ok(Ascent { input: x, trace, steps, stalled })
}

/// Input pattern that maximizes one bottleneck neuron (flat index in
/// `(channel, x, y, z)` order), starting from Gaussian noise.
pub fn activation_maximize<T: Scalar>(model: &UNetModel<T>, neuron: usize, cfg: &ActMaxConfig) -> Result<(Volume, Ascent<T>)> {
    cfg.validate()?;
    let c = model.config();
    if neuron >= c.bottleneck_len() {
        return Err(Error::Parameter(format!("neuron {neuron} outside bottleneck of {}", c.bottleneck_len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dist = Normal::new(cfg.init_mean, cfg.init_std).expect("positive std");
    let [nx, ny, nz] = c.input_dims;
    let x0 = Tensor::from_fn(vec![1, nx, ny, nz], |_| T::of(dist.sample(&mut rng)));
    let ascent = normalized_ascent(x0, cfg.iterations, |x| {
        let mut g = Graph::new();
        let input = g.param(x.clone());
        let f = model.forward(&mut g, input, false, false)?;
        let src = match cfg.target {
            ActTarget::PostActivation => f.bottleneck,
            ActTarget::PreActivation => f.bottleneck_pre,
        };
        let q = g.select(src, neuron)?;
        g.backward(q)?;
        let v = g.value(q).data()[0].to_f64_lossy();
        let grad = g.take_grad(input).unwrap_or_else(|| vec![T::zero(); x.len()]);
        Ok((v, grad))
    })?;
    let like = Volume::filled(c.input_dims, [1.0; 3], 0.0, Modality::Ct)?;
    let vol = tensor_to_volume(&ascent.input, &like)?;
    Ok((vol, ascent))
}

/// Parse a feature id such as `P00123` into its modality prefix and flat index.
pub fn parse_feature_id(id: &str) -> Option<(char, usize)> {
    let mut ch = id.chars();
    let p = ch.next()?;
    let idx = ch.as_str().parse().ok()?;
    Some((p, idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaReduction {
    Max,
    Mean,
}

/// Channel weights: the rectified gradient of P(death) with respect to each
/// bottleneck map of this modality, reduced per channel. `features` must
/// hold a value for every feature the survival model uses.
pub fn guided_alphas(
    bottleneck_shape: [usize; 4],
    modality: Modality,
    survival: &SurvivalModel,
    features: &HashMap<String, f64>,
    reduction: AlphaReduction,
) -> Result<Vec<f64>> {
    let x: Vec<f64> = survival.feature_ids.iter().map(|id| features.get(id).copied().ok_or_else(|| Error::MissingFeature(id.clone()))).collect::<Result<_>>()?;
    let p_alive = survival.predict_row(&x)?;
    let [c, bx, by, bz] = bottleneck_shape;
    let per = bx * by * bz;
    let mut grad = vec![0.0; c * per];
    for (j, id) in survival.feature_ids.iter().enumerate() {
        let Some((p, idx)) = parse_feature_id(id) else { continue };
        if p != modality.prefix() || idx >= grad.len() {
            continue;
        }
        // d(1 - sigmoid(eta)) / dx_j
        grad[idx] += -p_alive * (1.0 - p_alive) * survival.beta[j + 1] / survival.standardization.std[j];
    }
    Ok((0..c)
        .map(|m| {
            let it = grad[m * per..(m + 1) * per].iter().map(|g| g.max(0.0));
            match reduction {
                AlphaReduction::Max => it.fold(0.0, f64::max),
                AlphaReduction::Mean => it.sum::<f64>() / per as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskMap {
    pub case_id: String,
    pub alpha: Vec<f64>,
    /// Weighted activation sum on the bottleneck grid, `(x, y, z)` z-fastest.
    pub coarse: Vec<f64>,
    /// Upsampled and min-max normalized to `[0, 1]`.
    pub values: Volume,
}

/// `sum_m alpha_m A_m` on the bottleneck grid.
pub fn weighted_maps(bottleneck: &[f64], shape: [usize; 4], alpha: &[f64]) -> Result<Vec<f64>> {
    let [c, bx, by, bz] = shape;
    let per = bx * by * bz;
    if bottleneck.len() != c * per || alpha.len() != c {
        return Err(Error::Shape(format!("bottleneck {} / alpha {} do not match {shape:?}", bottleneck.len(), alpha.len())));
    }
    let mut out = vec![0.0; per];
    for (m, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            for (o, v) in out.iter_mut().zip(&bottleneck[m * per..(m + 1) * per]) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}

/// Centre-aligned trilinear interpolation of a z-fastest grid onto `dims`,
/// returned x-fastest.
pub fn upsample_trilinear(coarse: &[f64], from: [usize; 3], dims: [usize; 3]) -> Vec<f64> {
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let u = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = u.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, u - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(dims[0], from[0]), axis(dims[1], from[1]), axis(dims[2], from[2]));
    let at = |x: usize, y: usize, z: usize| coarse[(x * from[1] + y) * from[2] + z];
    let mut out = vec![0.0; dims.iter().product()];
    for (k, &(z0, z1, tz)) in az.iter().enumerate() {
        for (j, &(y0, y1, ty)) in ay.iter().enumerate() {
            for (i, &(x0, x1, tx)) in ax.iter().enumerate() {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
                out[i + dims[0] * (j + dims[1] * k)] = lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
            }
        }
    }
    out
}

/// Risk map for one case from its bottleneck activation and channel weights.
pub fn risk_map_from(case_id: &str, image: &Volume, bottleneck: &[f64], shape: [usize; 4], alpha: Vec<f64>) -> Result<RiskMap> {
    let coarse = weighted_maps(bottleneck, shape, &alpha)?;
    let fine = upsample_trilinear(&coarse, [shape[1], shape[2], shape[3]], image.dims());
    let (lo, hi) = fine.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if alpha.iter().all(|&a| a == 0.0) {
        log::warn!("case {case_id}: all channel weights are zero; risk map is empty");
    }
    let vox: Vec<f32> = if hi > lo { fine.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect() } else { vec![0.0; fine.len()] };
    let values = Volume::new(image.dims(), image.spacing(), vox, image.modality())?;
    Ok(RiskMap { case_id: case_id.to_string(), alpha, coarse, values })
}

/// Full risk-map computation for `image` through `model`. Features of other
/// modalities the survival model needs are taken from `other_features`.
pub fn risk_map<T: Scalar>(
    case_id: &str,
    model: &UNetModel<T>,
    modality: Modality,
    survival: &SurvivalModel,
    image: &Volume,
    other_features: &HashMap<String, f64>,
    reduction: AlphaReduction,
) -> Result<RiskMap> {
    let shape = model.config().bottleneck_shape();
    let b: Vec<f64> = model.encode_bottleneck(image)?.iter().map(|v| v.to_f64_lossy()).collect();
    let mut features = other_features.clone();
    for id in &survival.feature_ids {
        if let Some((p, idx)) = parse_feature_id(id) {
            if p == modality.prefix() && idx < b.len() {
                features.insert(id.clone(), b[idx]);
            }
        }
    }
    let alpha = guided_alphas(shape, modality, survival, &features, reduction)?;
    risk_map_from(case_id, image, &b, shape, alpha)
}

/// Mean map value inside `mask` divided by the mean over the background
/// shell: voxels outside the mask whose Euclidean distance to the nearest
/// mask voxel lies in `[inner, outer]`.
pub fn localization_ratio(map: &Volume, mask: &Volume, inner: f64, outer: f64) -> Result<f64> {
    if map.dims() != mask.dims() {
        return Err(Error::Shape(format!("map {:?} vs mask {:?}", map.dims(), mask.dims())));
    }
    let [nx, ny, nz] = mask.dims();
    let on: Vec<[usize; 3]> = (0..nz)
        .flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
        .filter(|&[x, y, z]| mask.get(x, y, z) != 0.0)
        .collect();
    if on.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut inside, mut n_in, mut shell, mut n_sh) = (0.0, 0usize, 0.0, 0usize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = map.get(x, y, z) as f64;
                if mask.get(x, y, z) != 0.0 {
                    inside += v;
                    n_in += 1;
                    continue;
                }
                let d2 = on
                    .iter()
                    .map(|p| {
                        let d = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
                        d(p[0], x) + d(p[1], y) + d(p[2], z)
                    })
                    .fold(f64::INFINITY, f64::min);
                if d2 >= inner * inner && d2 <= outer * outer {
                    shell += v;
                    n_sh += 1;
                }
            }
        }
    }
    if n_sh == 0 {
        return Err(Error::Parameter("background shell is empty".into()));
    }
    Ok((inside / n_in as f64) / (shell / n_sh as f64))
}

fn axis_letter(a: Axis) -> char {
    match a {
        Axis::X => 'x',
        Axis::Y => 'y',
        Axis::Z => 'z',
    }
}

/// `(width, height, slices)` and the volume coordinate of pixel `(u, v)`
/// on slice `s`.
fn slice_geometry(dims: [usize; 3], axis: Axis) -> (usize, usize, usize, Box<dyn Fn(usize, usize, usize) -> [usize; 3]>) {
    let [nx, ny, nz] = dims;
    match axis {
        Axis::Z => (nx, ny, nz, Box::new(|u, v, s| [u, v, s])),
        Axis::Y => (nx, nz, ny, Box::new(|u, v, s| [u, s, v])),
        Axis::X => (ny, nz, nx, Box::new(|u, v, s| [s, u, v])),
    }
}

/// Gray levels from the volume's own value range; constant volumes map to 128.
fn gray(v: &Volume) -> Vec<u8> {
    let (lo, hi) = v.voxels().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    v.voxels()
        .iter()
        .map(|&x| if hi > lo { ((x - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect()
}

/// One binary PGM per slice, or PPM when an overlay in `[0, 1]` is given:
/// the overlay blends each gray pixel toward pure red.
pub fn export_slices(volume: &Volume, overlay: Option<&Volume>, axis: Axis, dir: &Path, case: &str) -> Result<Vec<PathBuf>> {
    if let Some(o) = overlay {
        if o.dims() != volume.dims() {
            return Err(Error::Shape(format!("overlay {:?} vs volume {:?}", o.dims(), volume.dims())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = gray(volume);
    let (w, h, n, at) = slice_geometry(volume.dims(), axis);
    let mut paths = Vec::with_capacity(n);
    for s in 0..n {
        let ext = if overlay.is_some() { "ppm" } else { "pgm" };
        let path = dir.join(format!("{case}_{}{s}.{ext}", axis_letter(axis)));
        let mut buf = Vec::with_capacity(w * h * 3 + 20);
        write!(buf, "{}\n{w} {h}\n255\n", if overlay.is_some() { "P6" } else { "P5" }).expect("in-memory write");
        for v in 0..h {
            for u in 0..w {
                let [x, y, z] = at(u, v, s);
                let i = volume.index(x, y, z);
                match overlay {
                    None => buf.push(g[i]),
                    Some(o) => {
                        let a = o.voxels()[i].clamp(0.0, 1.0);
                        let base = g[i] as f32 * (1.0 - a);
                        buf.extend([(base + 255.0 * a).round() as u8, base.round() as u8, base.round() as u8]);
                    }
                }
            }
        }
        std::fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
