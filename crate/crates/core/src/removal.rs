//! Blind watermark-removal networks: the attack targets.
//!
//! Each network maps a watermarked image to a restored image and a
//! predicted watermark mask through a shared encoder/decoder trunk and two
//! sigmoid heads. The final restored image keeps the input where the
//! predicted mask is low and takes the image head where it is high. Three
//! variants differ in width and depth.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::compositor::{
    binarize_mask, composite, sample_placement, synth_host, synth_watermark, ASSET_SIZE, HOST_SIZE,
};
use crate::error::{io_err, Error, Result};
use crate::metrics::psnr;
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::real::{FlushSubnormals, Real};
use crate::rng::{derive_seed, seeded, stream, Rng};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            other => Err(Error::InvalidArgument(format!("unknown model variant {other:?}"))),
        }
    }
}

/// One step of the network. Trunk convolutions are followed by ReLU, heads by
/// a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv { c_in: usize, c_out: usize, stride: usize },
    Upsample,
    ImageHead { c_in: usize },
    MaskHead { c_in: usize },
}

impl Layer {
    fn param_shapes(&self) -> Option<(Shape, Shape)> {
        let (c_in, c_out) = match *self {
            Layer::Conv { c_in, c_out, .. } => (c_in, c_out),
            Layer::ImageHead { c_in } => (c_in, 3),
            Layer::MaskHead { c_in } => (c_in, 1),
            Layer::Upsample => return None,
        };
        Some(([c_out, c_in, 3, 3], [1, c_out, 1, 1]))
    }

    fn fan_in(&self) -> usize {
        self.param_shapes().map_or(0, |(w, _)| w[1] * 9)
    }
}

/// Layer list for a variant.
pub fn architecture(variant: Variant) -> Vec<Layer> {
    let (w1, w2, w3) = match variant {
        Variant::A | Variant::C => (16, 32, 64),
        Variant::B => (24, 48, 96),
    };
    let conv = |c_in, c_out, stride| Layer::Conv { c_in, c_out, stride };
    let mut layers = vec![conv(3, w1, 1), conv(w1, w2, 2), conv(w2, w3, 2)];
    if variant == Variant::C {
        layers.push(conv(w3, w3, 1));
    }
    layers.extend([
        Layer::Upsample,
        conv(w3, w2, 1),
        Layer::Upsample,
        conv(w2, w1, 1),
        Layer::ImageHead { c_in: w1 },
        Layer::MaskHead { c_in: w1 },
    ]);
    layers
}

/// How a model was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub init_seed: u64,
    pub data_seed: Option<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub best_step: usize,
    pub init_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
}

/// Weights and layer descriptors of a removal network.
#[derive(Clone, Debug, PartialEq)]
pub struct RemovalModel {
    variant: Variant,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    pub meta: TrainingMeta,
}

/// Restored image and predicted mask, both in (0, 1).
#[derive(Clone, Debug)]
pub struct RemovalOutput {
    pub restored: Tensor,
    pub mask: Tensor,
}

/// Output nodes of a forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RemovalVars {
    pub restored: Var,
    pub mask: Var,
    /// Pre-sigmoid mask, for a loss that stays trainable at saturation.
    pub mask_logits: Var,
}

impl RemovalModel {
    /// Untrained model with scaled-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and zero biases.
    pub fn build(variant: Variant, seed: u64) -> Self {
        let layers = architecture(variant);
        let mut rng = seeded(derive_seed(seed, &[stream::INIT]));
        let mut params = Vec::new();
        for layer in &layers {
            if let Some((ws, bs)) = layer.param_shapes() {
                let bound = (6.0 / layer.fan_in() as f64).sqrt() as f32;
                params.push(Tensor::from_fn(ws, |_, _, _, _| rng.gen_range(-bound..bound)));
                params.push(Tensor::zeros(bs));
            }
        }
        Self {
            variant,
            layers,
            params,
            meta: TrainingMeta {
                init_seed: seed,
                ..TrainingMeta::default()
            },
        }
    }

    /// Model with explicit weights, in layer order (weight then bias).
    pub fn from_params(variant: Variant, params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::build(variant, 0);
        let expected: Vec<Shape> = model.params.iter().map(Tensor::shape).collect();
        let got: Vec<Shape> = params.iter().map(Tensor::shape).collect();
        if expected != got {
            return Err(Error::Shape {
                op: "from_params",
                detail: format!("variant {variant} expects {expected:?}, got {got:?}"),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds the weights to `tape`, as leaves when `trainable`, else as constants.
    pub fn register_params<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let v = p.cast::<T>();
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    fn check_input(shape: Shape) -> Result<()> {
        let [n, c, h, w] = shape;
        if n == 0 || c != 3 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape {
                op: "removal forward",
                detail: format!("expected Nx3xHxW with H, W multiples of 4, got {shape:?}"),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` using previously registered `params`.
    pub fn forward_on_tape<T: Real>(&self, tape: &mut Tape<T>, input: Var, params: &[Var]) -> Result<RemovalVars> {
        Self::check_input(tape.value(input).shape())?;
        let mut x = input;
        let mut next_param = params.iter();
        let mut take = || -> Result<(Var, Var)> {
            match (next_param.next(), next_param.next()) {
                (Some(&w), Some(&b)) => Ok((w, b)),
                _ => Err(Error::InvalidArgument("too few parameters for architecture".into())),
            }
        };
        let mut restored = None;
        let mut mask = None;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { stride, .. } => {
                    let (w, b) = take()?;
                    let y = tape.conv2d(x, w, b, stride)?;
                    x = tape.relu(y);
                }
                Layer::Upsample => x = tape.upsample_nearest2x(x),
                Layer::ImageHead { .. } => {
                    let (w, b) = take()?;
                    let y = tape.conv2d(x, w, b, 1)?;
                    restored = Some(tape.sigmoid(y));
                }
                Layer::MaskHead { .. } => {
                    let (w, b) = take()?;
                    let y = tape.conv2d(x, w, b, 1)?;
                    mask = Some((tape.sigmoid(y), y));
                }
            }
        }
        match (restored, mask) {
            (Some(image), Some((mask, mask_logits))) => {
                let restored = tape.blend(mask, image, input)?;
                Ok(RemovalVars {
                    restored,
                    mask,
                    mask_logits,
                })
            }
            _ => Err(Error::InvalidArgument("architecture lacks an output head".into())),
        }
    }

    /// Inference without gradient tracking.
    pub fn forward(&self, image: &Tensor) -> Result<RemovalOutput> {
        let mut tape = Tape::<f32>::new();
        let params = self.register_params(&mut tape, false);
        let input = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, input, &params)?;
        Ok(RemovalOutput {
            restored: tape.value(out.restored).clone(),
            mask: tape.value(out.mask).clone(),
        })
    }

    /// Compact layer list, e.g. `conv3-16s1,conv16-32s2,up,...`.
    pub fn descriptor(&self) -> String {
        describe(&self.layers)
    }
}

fn describe(layers: &[Layer]) -> String {
    layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { c_in, c_out, stride } => format!("conv{c_in}-{c_out}s{stride}"),
            Layer::Upsample => "up".to_string(),
            Layer::ImageHead { c_in } => format!("image{c_in}-3"),
            Layer::MaskHead { c_in } => format!("mask{c_in}-1"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

// ---- training ----------------------------------------------------------

/// Watermark distribution used to train removers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkDistribution {
    pub size_range: (usize, usize),
    pub alpha_range: (f32, f32),
}

impl Default for WatermarkDistribution {
    fn default() -> Self {
        Self {
            size_range: (12, 28),
            alpha_range: (0.35, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub init_seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_size: usize,
    pub val_every: usize,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub watermarks: WatermarkDistribution,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            init_seed: seed,
            data_seed: seed,
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            val_size: 64,
            val_every: 100,
            cosine_decay: true,
            watermarks: WatermarkDistribution::default(),
        }
    }
}

/// One (host, watermark, placement) training triple.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub host: Tensor,
    pub watermarked: Tensor,
    pub gt_mask: Tensor,
}

pub fn sample_training_triple(rng: &mut Rng, dist: &WatermarkDistribution) -> Result<TrainingSample> {
    let host = synth_host(rng, HOST_SIZE, HOST_SIZE);
    let wm = synth_watermark(rng, ASSET_SIZE, ASSET_SIZE);
    let placement = sample_placement(rng, (HOST_SIZE, HOST_SIZE), dist.size_range, dist.alpha_range)?;
    let c = composite(&host, &wm, &placement)?;
    Ok(TrainingSample {
        host,
        watermarked: c.watermarked,
        gt_mask: c.gt_mask,
    })
}

/// Stacked batch tensors: inputs, host targets, binary mask targets.
fn batch_tensors(samples: &[TrainingSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.watermarked.clone()).collect();
    let hosts: Vec<Tensor> = samples.iter().map(|s| s.host.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| binarize_mask(&s.gt_mask)).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&hosts)?, Tensor::stack(&masks)?))
}

/// Learning rate for 1-based `step`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if !cfg.cosine_decay {
        return cfg.lr;
    }
    let progress = step.saturating_sub(1) as f64 / cfg.steps as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Weight of the image MSE against the mask BCE. At 1 the mask term dominates
/// and the restored image ends up worse than the input.
pub const IMAGE_LOSS_WEIGHT: f64 = 100.0;

/// `IMAGE_LOSS_WEIGHT · mse(restored, host) + bce(mask, binarized gt)`.
fn training_loss(tape: &mut Tape, model: &RemovalModel, params: &[Var], batch: &(Tensor, Tensor, Tensor)) -> Result<Var> {
    let input = tape.constant(batch.0.clone());
    let host = tape.constant(batch.1.clone());
    let mask = tape.constant(batch.2.clone());
    let out = model.forward_on_tape(tape, input, params)?;
    let image_term = tape.mse(out.restored, host)?;
    let image_term = tape.scale(image_term, IMAGE_LOSS_WEIGHT);
    let mask_term = tape.bce_logits(out.mask_logits, mask)?;
    tape.add(image_term, mask_term)
}

/// Mean training loss over a fixed sample set.
pub fn validation_loss(model: &RemovalModel, samples: &[TrainingSample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(16) {
        let batch = batch_tensors(chunk)?;
        let mut tape = Tape::new();
        let params = model.register_params(&mut tape, false);
        let loss = training_loss(&mut tape, model, &params, &batch)?;
        total += tape.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean PSNR (vs host) of the watermarked inputs and of the restored outputs.
pub fn psnr_improvement(model: &RemovalModel, samples: &[TrainingSample]) -> Result<(f64, f64)> {
    let mut before = 0.0;
    let mut after = 0.0;
    for s in samples {
        before += psnr(&s.watermarked, &s.host)?;
        after += psnr(&model.forward(&s.watermarked)?.restored, &s.host)?;
    }
    let n = samples.len() as f64;
    Ok((before / n, after / n))
}

/// The seeded held-out set used for checkpoint selection.
pub fn validation_set(cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let mut rng = seeded(derive_seed(cfg.data_seed, &[stream::VALIDATION]));
    (0..cfg.val_size)
        .map(|_| sample_training_triple(&mut rng, &cfg.watermarks))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct TrainProgress {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Trains a fresh model with Adam on freshly generated triples and returns
/// the checkpoint with the lowest validation loss.
pub fn train(cfg: &TrainConfig, mut progress: impl FnMut(TrainProgress)) -> Result<RemovalModel> {
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.val_size == 0 || cfg.val_every == 0 {
        return Err(Error::InvalidArgument(format!("degenerate training config {cfg:?}")));
    }
    let mut model = RemovalModel::build(cfg.variant, cfg.init_seed);
    let val = validation_set(cfg)?;
    let init_val = validation_loss(&model, &val)?;
    let mut best = (init_val, 0usize, model.params.clone());
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let _flush = FlushSubnormals::new();
    let mut rng = seeded(derive_seed(cfg.data_seed, &[stream::TRAIN]));

    for step in 1..=cfg.steps {
        let samples = (0..cfg.batch_size)
            .map(|_| sample_training_triple(&mut rng, &cfg.watermarks))
            .collect::<Result<Vec<_>>>()?;
        let batch = batch_tensors(&samples)?;
        let mut tape = Tape::new();
        let params = model.register_params(&mut tape, true);
        let loss = training_loss(&mut tape, &model, &params, &batch)?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                value: loss_value,
                context: format!("training step {step} of variant {}", cfg.variant),
            });
        }
        adam.config.lr = learning_rate(cfg, step);
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .map(|&p| grads.take(p).expect("parameter leaf"))
            .collect();
        adam_update(&mut model.params, &grads, &mut adam)?;

        let mut val_loss = None;
        if step % cfg.val_every == 0 || step == cfg.steps {
            let v = validation_loss(&model, &val)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    value: v,
                    context: format!("validation after step {step}"),
                });
            }
            if v < best.0 {
                best = (v, step, model.params.clone());
            }
            val_loss = Some(v);
        }
        progress(TrainProgress {
            step,
            train_loss: loss_value,
            val_loss,
        });
    }

    model.params = best.2;
    model.meta = TrainingMeta {
        init_seed: cfg.init_seed,
        data_seed: Some(cfg.data_seed),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        best_step: best.1,
        init_val_loss: Some(init_val),
        final_val_loss: Some(best.0),
    };
    Ok(model)
}

// ---- checkpoints -------------------------------------------------------

const MAGIC: &[u8; 8] = b"WMVXCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    variant: Variant,
    descriptor: String,
    shapes: Vec<Shape>,
    meta: TrainingMeta,
}

/// Writes a checkpoint: 16-byte magic/version header, length-prefixed JSON
/// metadata, then little-endian f32 weights in layer order.
pub fn save_checkpoint(model: &RemovalModel, path: impl AsRef<Path>) -> Result<()> {
    let header = CheckpointHeader {
        variant: model.variant,
        descriptor: model.descriptor(),
        shapes: model.params.iter().map(Tensor::shape).collect(),
        meta: model.meta.clone(),
    };
    let meta = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(24 + meta.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for p in &model.params {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), buf).map_err(io_err(path.as_ref()))
}

/// Reads a checkpoint of whatever variant it declares.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RemovalModel> {
    load_checkpoint_impl(path.as_ref(), None)
}

/// Reads a checkpoint and insists that it matches `variant`'s layer shapes.
pub fn load_checkpoint_as(path: impl AsRef<Path>, variant: Variant) -> Result<RemovalModel> {
    load_checkpoint_impl(path.as_ref(), Some(variant))
}

fn load_checkpoint_impl(path: &Path, expect: Option<Variant>) -> Result<RemovalModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated metadata".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;

    let target = expect.unwrap_or(header.variant);
    let template = RemovalModel::build(target, 0);
    let expected_shapes: Vec<Shape> = template.params.iter().map(Tensor::shape).collect();
    if header.shapes != expected_shapes {
        return Err(bad(format!(
            "tensor shapes of variant {} do not match variant {target}",
            header.variant
        )));
    }
    if header.variant != target || header.descriptor != template.descriptor() {
        return Err(bad(format!(
            "checkpoint is variant {} ({}), expected {target}",
            header.variant, header.descriptor
        )));
    }

    let payload = &bytes[meta_end..];
    let want = 4 * template.param_count();
    if payload.len() != want {
        return Err(bad(format!("weight payload is {} bytes, expected {want}", payload.len())));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let params = expected_shapes
        .iter()
        .map(|&s| Tensor::new(s, floats.by_ref().take(crate::tensor::numel(s)).collect()))
        .collect::<Result<Vec<_>>>()?;
    if params.iter().any(|p| !p.all_finite()) {
        return Err(bad("non-finite weights".into()));
    }
    Ok(RemovalModel {
        variant: target,
        layers: template.layers,
        params,
        meta: header.meta,
    })
}
