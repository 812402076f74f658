//! Encoder-decoder segmentation network with skip connections, its training
//! loop, bottleneck feature extraction and the Dice metric.
//!
//! Level `l` of the encoder runs `convs_per_level` same-padded 3x3x3
//! convolutions to `base_width * 2^l` channels, each followed by ReLU, then
//! halves the grid with 2x2x2 max pooling. The bottleneck convolves to
//! `base_width * 2^depth` channels. The decoder upsamples by nearest
//! neighbour, concatenates the matching encoder activation and convolves
//! back down; a sigmoid head gives per-voxel tumor probability.

use crate::autodiff::{AdamConfig, AdamState, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{augment, AugmentationSpec, Modality, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Affine map applied to raw intensities before the first convolution:
/// `(x - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputNorm {
    pub offset: f64,
    pub scale: f64,
}

impl InputNorm {
    /// Maps `[lo, hi]` onto `[-1, 1]`.
    pub fn centered(lo: f64, hi: f64) -> Self {
        Self { offset: 0.5 * (lo + hi), scale: 0.5 * (hi - lo) }
    }

    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Ct => Self::centered(-500.0, 200.0),
            Modality::Pet => Self::centered(0.01, 20.0),
            Modality::Mask => Self { offset: 0.0, scale: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub input_dims: [usize; 3],
    pub base_width: usize,
    /// Number of 2x down-samplings.
    pub depth: usize,
    #[serde(default = "one")]
    pub convs_per_level: usize,
    pub norm: InputNorm,
}

fn one() -> usize {
    1
}

impl UNetConfig {
    pub fn new(input_dims: [usize; 3], base_width: usize, depth: usize, norm: InputNorm) -> Result<Self> {
        let c = Self { input_dims, base_width, depth, convs_per_level: 1, norm };
        c.validate()?;
        Ok(c)
    }

    /// 32x32x16 input, base width 8, depth 4.
    pub fn desk(modality: Modality) -> Self {
        Self::new([32, 32, 16], 8, 4, InputNorm::for_modality(modality)).expect("valid desk config")
    }

    /// 96x96x48 input, base width 32, depth 4.
    pub fn full(modality: Modality) -> Self {
        Self::new([96, 96, 48], 32, 4, InputNorm::for_modality(modality)).expect("valid full config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_width < 1 || self.convs_per_level < 1 {
            return Err(Error::Config("depth, base_width and convs_per_level must be >= 1".into()));
        }
        if !(self.norm.scale > 0.0) {
            return Err(Error::Config("input normalization scale must be positive".into()));
        }
        let f = 1usize << self.depth;
        if self.input_dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "input dims {:?} must be divisible by 2^{} = {f}",
                self.input_dims, self.depth
            )));
        }
        Ok(())
    }

    /// Channel count at each level `0..=depth`.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width << l).collect()
    }

    /// `(channels, x, y, z)` of the bottleneck activation.
    pub fn bottleneck_shape(&self) -> [usize; 4] {
        let f = 1usize << self.depth;
        let d = self.input_dims;
        [self.base_width << self.depth, d[0] / f, d[1] / f, d[2] / f]
    }

    pub fn bottleneck_len(&self) -> usize {
        self.bottleneck_shape().iter().product()
    }

    /// `(name, c_out, c_in)` for every convolution in execution order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let w = self.widths();
        let mut out = Vec::new();
        let mut c = 1;
        for l in 0..self.depth {
            for j in 0..self.convs_per_level {
                out.push((format!("enc{l}.conv{j}"), w[l], c));
                c = w[l];
            }
        }
        for j in 0..self.convs_per_level {
            out.push((format!("bottleneck.conv{j}"), w[self.depth], c));
            c = w[self.depth];
        }
        for l in (0..self.depth).rev() {
            c += w[l];
            for j in 0..self.convs_per_level {
                out.push((format!("dec{l}.conv{j}"), w[l], c));
                c = w[l];
            }
        }
        out.push(("head".into(), 1, c));
        out
    }
}

/// Network parameters in execution order: weight then bias per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel<T> {
    config: UNetConfig,
    params: Vec<(String, Tensor<T>)>,
}

const K: usize = 3;

/// Nodes of one forward pass.
pub struct Forward {
    pub input: NodeId,
    pub bottleneck: NodeId,
    pub bottleneck_pre: NodeId,
    pub output: Option<NodeId>,
    pub params: Vec<NodeId>,
}

impl<T: Scalar> UNetModel<T> {
    /// He-initialized network, deterministic under `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, c_out, c_in) in config.layers() {
            let fan_in = (c_in * K * K * K) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = Tensor::from_fn(vec![c_out, c_in, K, K, K], |_| T::of(dist.sample(&mut rng)));
            params.push((format!("{name}.w"), w));
            params.push((format!("{name}.b"), Tensor::zeros(vec![c_out])));
        }
        Ok(Self { config, params })
    }

    /// Rebuild from named tensors, checking names and shapes against `config`.
    pub fn from_params(config: UNetConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Self::build(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in template.params.iter().zip(&params) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Shape(format!("parameter {n2} {:?} does not match {n1} {:?}", t2.shape(), t1.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Raw volume to a normalized `[1, x, y, z]` tensor (z fastest).
    pub fn image_tensor(&self, image: &Volume) -> Result<Tensor<T>> {
        if image.dims() != self.config.input_dims {
            return Err(Error::Shape(format!(
                "image dims {:?} != network input {:?}",
                image.dims(),
                self.config.input_dims
            )));
        }
        Ok(volume_to_tensor(image, |v| T::of(v as f64)))
    }

    /// Record the network on `graph` for the given raw-intensity input node.
    /// With `decode = false` only the encoder and bottleneck are built.
    pub fn forward(&self, graph: &mut Graph<T>, raw_input: NodeId, trainable: bool, decode: bool) -> Result<Forward> {
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|(_, t)| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        let n = self.config.norm;
        let mut cur = graph.affine(raw_input, T::of(1.0 / n.scale), T::of(-n.offset / n.scale));
        let mut p = 0;
        let mut conv = |g: &mut Graph<T>, x: NodeId| -> Result<(NodeId, NodeId)> {
            let pre = g.conv3d(x, ids[p], ids[p + 1])?;
            p += 2;
            Ok((pre, g.relu(pre)))
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            for _ in 0..self.config.convs_per_level {
                cur = conv(graph, cur)?.1;
            }
            skips.push(cur);
            cur = graph.maxpool3d(cur)?;
        }
        let mut pre = cur;
        for _ in 0..self.config.convs_per_level {
            (pre, cur) = conv(graph, cur)?;
        }
        let bottleneck = cur;
        let mut output = None;
        if decode {
            for skip in skips.into_iter().rev() {
                let up = graph.upsample3d(cur)?;
                cur = graph.concat_channels(up, skip)?;
                for _ in 0..self.config.convs_per_level {
                    cur = conv(graph, cur)?.1;
                }
            }
            let logits = graph.conv3d(cur, ids[p], ids[p + 1])?;
            output = Some(graph.sigmoid(logits));
        }
        Ok(Forward { input: raw_input, bottleneck, bottleneck_pre: pre, output, params: ids })
    }

    /// Per-voxel tumor probability, tagged with the image's modality.
    pub fn forward_segment(&self, image: &Volume) -> Result<Volume> {
        let mut g = Graph::new();
        let x = g.constant(self.image_tensor(image)?);
        let f = self.forward(&mut g, x, false, true)?;
        let out = g.value(f.output.expect("decoder built"));
        tensor_to_volume(out, image)
    }

    /// Post-ReLU bottleneck activation flattened in `(channel, x, y, z)`
    /// row-major order.
    pub fn encode_bottleneck(&self, image: &Volume) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.constant(self.image_tensor(image)?);
        let f = self.forward(&mut g, x, false, false)?;
        Ok(g.value(f.bottleneck).data().to_vec())
    }

    /// Soft-Dice + BCE loss for one pair, forward only.
    pub fn loss(&self, image: &Volume, mask: &Volume) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(self.image_tensor(image)?);
        let f = self.forward(&mut g, x, false, true)?;
        let target = volume_to_tensor(mask, |v| T::of(v as f64));
        let loss = g.soft_dice_bce(f.output.expect("decoder built"), &target)?;
        Ok(g.value(loss).data()[0].to_f64_lossy())
    }

    /// Soft-Dice + BCE loss and its parameter gradients for one pair.
    pub fn loss_and_grads(&self, image: &Volume, mask: &Volume) -> Result<(f64, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let x = g.constant(self.image_tensor(image)?);
        let f = self.forward(&mut g, x, true, true)?;
        let target = volume_to_tensor(mask, |v| T::of(v as f64));
        let loss = g.soft_dice_bce(f.output.expect("decoder built"), &target)?;
        g.backward(loss)?;
        let lv = g.value(loss).data()[0].to_f64_lossy();
        let grads = f
            .params
            .iter()
            .map(|&id| g.take_grad(id).unwrap_or_else(|| vec![T::zero(); g.value(id).len()]))
            .collect();
        Ok((lv, grads))
    }

    /// Mean Dice of the thresholded prediction over `pairs`.
    pub fn mean_dice(&self, pairs: &[(Volume, Volume)]) -> Result<f64> {
        let mut total = 0.0;
        for (img, mask) in pairs {
            total += dice(&threshold(&self.forward_segment(img)?, 0.5), mask)?;
        }
        Ok(total / pairs.len().max(1) as f64)
    }
}

/// Training hyperparameters. `patience` stops after that many epochs
/// without a validation improvement. The default learning rate is 5e-4:
/// without normalization layers, 1e-3 occasionally drives every ReLU of the
/// desk network inactive in the first few steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub augmentation: Option<AugmentationSpec>,
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, adam: AdamConfig { lr: 5e-4, ..AdamConfig::default() }, augmentation: None, patience: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the best-validation epoch.
    pub model: UNetModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
}

/// Batch-size-1 Adam training with best-validation-epoch selection.
pub fn train<T: Scalar>(
    model: &UNetModel<T>,
    train_pairs: &[(Volume, Volume)],
    val_pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_progress(model, train_pairs, val_pairs, cfg, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    model: &UNetModel<T>,
    train_pairs: &[(Volume, Volume)],
    val_pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Parameter("training and validation sets must be nonempty".into()));
    }
    let mut current = model.clone();
    let mut params: Vec<Tensor<T>> = current.params.iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(cfg.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, UNetModel<T>)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let (img, mask) = &train_pairs[i];
            let (img, mask) = match &cfg.augmentation {
                Some(spec) => {
                    let s = AugmentationSpec {
                        seed: spec.seed ^ ((epoch * train_pairs.len() + step) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        ..spec.clone()
                    };
                    augment(img, mask, &s, 1)?.pop().expect("one sample")
                }
                None => (img.clone(), mask.clone()),
            };
            let (loss, grads) = current.loss_and_grads(&img, &mask)?;
            loss_sum += loss;
            adam.step(&mut params, &grads)?;
            for ((_, dst), src) in current.params.iter_mut().zip(&params) {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        let val_dice = current.mean_dice(val_pairs)?;
        let rec = EpochRecord { epoch, train_loss: loss_sum / train_pairs.len() as f64, val_dice };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            best = Some((epoch, val_dice, current.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(match best {
        Some((e, d, m)) => TrainOutcome { model: m, history, best_epoch: Some(e), best_val_dice: Some(d) },
        None => TrainOutcome { model: model.clone(), history, best_epoch: None, best_val_dice: None },
    })
}

/// `[1, x, y, z]` tensor (z fastest) from an x-fastest volume.
pub fn volume_to_tensor<T: Scalar>(v: &Volume, f: impl Fn(f32) -> T) -> Tensor<T> {
    let [nx, ny, nz] = v.dims();
    let mut data = Vec::with_capacity(v.len());
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                data.push(f(v.get(x, y, z)));
            }
        }
    }
    Tensor::new(vec![1, nx, ny, nz], data).expect("consistent length")
}

/// Single-channel tensor back onto the geometry of `like`.
pub fn tensor_to_volume<T: Scalar>(t: &Tensor<T>, like: &Volume) -> Result<Volume> {
    let [c, nx, ny, nz] = t.dims4()?;
    if c != 1 || [nx, ny, nz] != like.dims() {
        return Err(Error::Shape(format!("tensor {:?} does not match volume {:?}", t.shape(), like.dims())));
    }
    let mut out = vec![0.0f32; like.len()];
    let d = t.data();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                out[x + nx * (y + ny * z)] = d[(x * ny + y) * nz + z].to_f32_lossy();
            }
        }
    }
    let modality = if like.modality() == Modality::Mask { Modality::Pet } else { like.modality() };
    Volume::new(like.dims(), like.spacing(), out, modality)
}

/// Binary mask of voxels `>= level`.
pub fn threshold(v: &Volume, level: f32) -> Volume {
    let vox = v.voxels().iter().map(|&p| if p >= level { 1.0 } else { 0.0 }).collect();
    Volume::new(v.dims(), v.spacing(), vox, Modality::Mask).expect("binary by construction")
}

/// Sorensen-Dice overlap `2|A and B| / (|A| + |B|)`; 1 when both are empty.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    let binary = |v: &Volume| v.voxels().iter().all(|&x| x == 0.0 || x == 1.0);
    if !binary(a) || !binary(b) {
        return Err(Error::NonBinary);
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}
