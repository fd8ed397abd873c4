//! Next-message predictor and prediction-error (PE) features.
//!
//! A one-layer 1D convolution (64 filters, kernel 3, same zero padding) reads
//! the previous frame's eleven fields as a length-1 sequence of 11 channels,
//! followed by ReLU and a dense 64 -> 8 layer that predicts the current
//! frame's payload bytes. Because the sequence has length one, only the
//! centre tap of each kernel ever sees data; the outer taps multiply the
//! zero padding. The network has 2,696 trainable parameters.
//!
//! All parameters live in one flat vector laid out as
//! `conv_w[filter][tap][channel] | conv_b[filter] | dense_w[out][filter] | dense_b[out]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::ingest::CanFrame;

pub const IN_CHANNELS: usize = 11;
pub const OUTPUTS: usize = 8;
pub const FILTERS: usize = 64;
pub const KERNEL: usize = 3;
/// Length of the convolved sequence: one frame.
const SEQ_LEN: usize = 1;

const CONV_W: usize = 0;
const CONV_B: usize = CONV_W + FILTERS * KERNEL * IN_CHANNELS;
const DENSE_W: usize = CONV_B + FILTERS;
const DENSE_B: usize = DENSE_W + OUTPUTS * FILTERS;
pub const PARAM_COUNT: usize = DENSE_B + OUTPUTS;

const MODEL_MAGIC: &[u8; 4] = b"CFPM";

/// Maps raw frame fields into the network's input and target scales.
///
/// Payload bytes and DLC use their fixed ranges (`/255`, `/8`). The CAN ID is
/// min-max scaled over the training stream and timestamps are taken relative
/// to the start of the stream being scored, scaled by the training span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldScaler {
    pub time_span: f64,
    pub id_min: f64,
    pub id_max: f64,
}

impl Default for FieldScaler {
    fn default() -> Self {
        FieldScaler {
            time_span: 1.0,
            id_min: 0.0,
            id_max: 0x7FF as f64,
        }
    }
}

impl FieldScaler {
    pub fn fit(frames: &[CanFrame]) -> Self {
        let (first, last) = match (frames.first(), frames.last()) {
            (Some(a), Some(b)) => (a.timestamp, b.timestamp),
            _ => return FieldScaler::default(),
        };
        let (id_min, id_max) = frames.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
            (lo.min(f.can_id as f64), hi.max(f.can_id as f64))
        });
        FieldScaler {
            time_span: last - first,
            id_min,
            id_max,
        }
    }

    pub fn inputs(&self, frame: &CanFrame, stream_start: f64) -> [f64; IN_CHANNELS] {
        let mut x = [0.0; IN_CHANNELS];
        x[0] = if self.time_span > 0.0 {
            (frame.timestamp - stream_start) / self.time_span
        } else {
            0.0
        };
        let id_span = self.id_max - self.id_min;
        x[1] = if id_span > 0.0 {
            (frame.can_id as f64 - self.id_min) / id_span
        } else {
            0.0
        };
        x[2] = frame.dlc as f64 / 8.0;
        for (o, &b) in x[3..].iter_mut().zip(frame.data.iter()) {
            *o = b as f64 / 255.0;
        }
        x
    }

    pub fn targets(frame: &CanFrame) -> [f64; OUTPUTS] {
        frame.data.map(|b| b as f64 / 255.0)
    }

    pub fn scale_stream(&self, frames: &[CanFrame]) -> (Vec<[f64; IN_CHANNELS]>, Vec<[f64; OUTPUTS]>) {
        let start = frames.first().map(|f| f.timestamp).unwrap_or(0.0);
        frames
            .iter()
            .map(|f| (self.inputs(f, start), Self::targets(f)))
            .unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    params: Vec<f64>,
    pub scaler: FieldScaler,
    pub meta: TrainingMeta,
}

/// Intermediate activations of one forward pass.
struct Activations {
    pre: [f64; FILTERS],
    hidden: [f64; FILTERS],
    out: [f64; OUTPUTS],
}

impl PredictorModel {
    pub fn zeros() -> Self {
        PredictorModel {
            params: vec![0.0; PARAM_COUNT],
            scaler: FieldScaler::default(),
            meta: TrainingMeta::default(),
        }
    }

    /// He-uniform convolution weights, Glorot-uniform dense weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros();
        let conv_bound = (6.0 / (KERNEL * IN_CHANNELS) as f64).sqrt();
        let dense_bound = (6.0 / (FILTERS + OUTPUTS) as f64).sqrt();
        for w in model.conv_weights_mut() {
            *w = rng.gen_range(-conv_bound..conv_bound);
        }
        for w in &mut model.params[DENSE_W..DENSE_B] {
            *w = rng.gen_range(-dense_bound..dense_bound);
        }
        model
    }

    pub fn from_params(params: Vec<f64>, scaler: FieldScaler) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::Shape(format!(
                "predictor expects {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        Ok(PredictorModel {
            params,
            scaler,
            meta: TrainingMeta::default(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn conv_weights_mut(&mut self) -> &mut [f64] {
        &mut self.params[CONV_W..CONV_B]
    }

    pub fn conv_bias_mut(&mut self) -> &mut [f64] {
        &mut self.params[CONV_B..DENSE_W]
    }

    pub fn dense_bias_mut(&mut self) -> &mut [f64] {
        &mut self.params[DENSE_B..]
    }

    #[inline]
    fn conv_w(&self, filter: usize, tap: usize, channel: usize) -> f64 {
        self.params[CONV_W + (filter * KERNEL + tap) * IN_CHANNELS + channel]
    }

    fn activations(&self, x: &[f64; IN_CHANNELS]) -> Activations {
        let mut pre = [0.0; FILTERS];
        let mut hidden = [0.0; FILTERS];
        // Same-padded convolution at the single sequence position.
        let pos = 0usize;
        for (f, (p, h)) in pre.iter_mut().zip(hidden.iter_mut()).enumerate() {
            let mut acc = self.params[CONV_B + f];
            for tap in 0..KERNEL {
                let src = pos as isize + tap as isize - (KERNEL / 2) as isize;
                if src < 0 || src >= SEQ_LEN as isize {
                    continue;
                }
                for (c, &xc) in x.iter().enumerate() {
                    acc += self.conv_w(f, tap, c) * xc;
                }
            }
            *p = acc;
            *h = acc.max(0.0);
        }
        let mut out = [0.0; OUTPUTS];
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.params[DENSE_W + o * FILTERS..DENSE_W + (o + 1) * FILTERS];
            *y = self.params[DENSE_B + o] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        Activations { pre, hidden, out }
    }

    /// Predicted payload (in `/255` units) of the frame following `prev`.
    pub fn forward(&self, prev: &[f64; IN_CHANNELS]) -> [f64; OUTPUTS] {
        self.activations(prev).out
    }

    pub fn forward_frame(&self, prev: &CanFrame, stream_start: f64) -> [f64; OUTPUTS] {
        self.forward(&self.scaler.inputs(prev, stream_start))
    }

    /// Mean absolute error over `(input, target)` pairs and its gradient with
    /// respect to every parameter. Zero residuals contribute a zero subgradient.
    pub fn loss_and_gradient(&self, inputs: &[&[f64; IN_CHANNELS]], targets: &[&[f64; OUTPUTS]]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; PARAM_COUNT];
        let n = inputs.len().max(1);
        let scale = 1.0 / (n * OUTPUTS) as f64;
        let centre = KERNEL / 2;
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            let act = self.activations(x);
            let mut g_out = [0.0; OUTPUTS];
            for o in 0..OUTPUTS {
                let r = act.out[o] - y[o];
                loss += r.abs();
                g_out[o] = if r > 0.0 {
                    scale
                } else if r < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
            for (o, &g) in g_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[DENSE_B + o] += g;
                let row = &mut grad[DENSE_W + o * FILTERS..DENSE_W + (o + 1) * FILTERS];
                for (gw, &h) in row.iter_mut().zip(&act.hidden) {
                    *gw += g * h;
                }
            }
            for f in 0..FILTERS {
                if act.pre[f] <= 0.0 {
                    continue;
                }
                let g_pre: f64 = (0..OUTPUTS)
                    .map(|o| g_out[o] * self.params[DENSE_W + o * FILTERS + f])
                    .sum();
                grad[CONV_B + f] += g_pre;
                let base = CONV_W + (f * KERNEL + centre) * IN_CHANNELS;
                for (gw, &xc) in grad[base..base + IN_CHANNELS].iter_mut().zip(x.iter()) {
                    *gw += g_pre * xc;
                }
            }
        }
        (loss * scale, grad)
    }

    pub fn mae(&self, inputs: &[[f64; IN_CHANNELS]], targets: &[[f64; OUTPUTS]]) -> f64 {
        let total: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                let p = self.forward(x);
                p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum();
        total / (inputs.len().max(1) * OUTPUTS) as f64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new(MODEL_MAGIC);
        for dim in [FILTERS, KERNEL, IN_CHANNELS, OUTPUTS] {
            enc.u32(dim as u32);
        }
        enc.f64s(&self.params);
        enc.f64(self.scaler.time_span);
        enc.f64(self.scaler.id_min);
        enc.f64(self.scaler.id_max);
        enc.u64(self.meta.epochs as u64);
        enc.f64(self.meta.final_mae);
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, MODEL_MAGIC)?;
        let shape = [dec.u32()?, dec.u32()?, dec.u32()?, dec.u32()?];
        if shape != [FILTERS as u32, KERNEL as u32, IN_CHANNELS as u32, OUTPUTS as u32] {
            return Err(Error::Format(format!("unsupported predictor shape {shape:?}")));
        }
        let params = dec.f64s()?;
        let scaler = FieldScaler {
            time_span: dec.f64()?,
            id_min: dec.f64()?,
            id_max: dec.f64()?,
        };
        let meta = TrainingMeta {
            epochs: dec.u64()? as usize,
            final_mae: dec.f64()?,
        };
        dec.finish()?;
        let mut model = Self::from_params(params, scaler)?;
        model.meta = meta;
        if !model.is_finite() {
            return Err(Error::Format("predictor weights are not finite".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&codec::read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Fits the predictor on consecutive pairs `(frame[t-1] -> payload[t])` of an
/// attack-free stream with mini-batch momentum SGD. The step size follows a
/// cosine decay to zero over the run; MAE subgradients never shrink near the
/// optimum, so a fixed step would keep the weights oscillating.
pub fn train(frames: &[CanFrame], cfg: &TrainConfig) -> Result<PredictorModel> {
    if frames.len() < 2 {
        return Err(Error::config("predictor training needs at least two frames"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config("predictor hyperparameters must be positive"));
    }
    let scaler = FieldScaler::fit(frames);
    let (inputs, targets) = scaler.scale_stream(frames);
    let mut model = PredictorModel::init(cfg.seed);
    model.scaler = scaler;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
    let mut order: Vec<usize> = (1..frames.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut velocity = vec![0.0; PARAM_COUNT];
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64; IN_CHANNELS]> = batch.iter().map(|&t| &inputs[t - 1]).collect();
            let ys: Vec<&[f64; OUTPUTS]> = batch.iter().map(|&t| &targets[t]).collect();
            let (loss, grad) = model.loss_and_gradient(&xs, &ys);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
            step += 1;
        }
        if !epoch_loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
    }

    let final_mae = model.mae(&inputs[..inputs.len() - 1], &targets[1..]);
    if !final_mae.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: final_mae,
        });
    }
    model.meta = TrainingMeta {
        epochs: cfg.epochs,
        final_mae,
    };
    Ok(model)
}

/// Per-byte absolute prediction errors, PE1..PE8.
pub type SpatialFeatures = [f64; OUTPUTS];

/// PE features for every frame of `frames`; the first frame, which has no
/// predecessor, gets all zeros.
pub fn extract_pe(model: &PredictorModel, frames: &[CanFrame]) -> Vec<SpatialFeatures> {
    let (inputs, targets) = model.scaler.scale_stream(frames);
    extract_pe_scaled(model, &inputs, &targets)
}

pub fn extract_pe_scaled(
    model: &PredictorModel,
    inputs: &[[f64; IN_CHANNELS]],
    targets: &[[f64; OUTPUTS]],
) -> Vec<SpatialFeatures> {
    (0..targets.len())
        .into_par_iter()
        .map(|t| {
            if t == 0 {
                return [0.0; OUTPUTS];
            }
            let pred = model.forward(&inputs[t - 1]);
            let mut pe = [0.0; OUTPUTS];
            for i in 0..OUTPUTS {
                pe[i] = (pred[i] - targets[t][i]).abs();
            }
            pe
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;

    #[test]
    fn parameter_count_matches_architecture() {
        assert_eq!(PARAM_COUNT, FILTERS * (KERNEL * IN_CHANNELS + 1) + OUTPUTS * (FILTERS + 1));
        assert_eq!(PredictorModel::init(1).parameter_count(), 2_696);
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = PredictorModel::zeros();
        assert_eq!(m.forward(&[0.3; 11]), [0.0; 8]);
    }

    #[test]
    fn dense_bias_passes_through_when_conv_is_zero() {
        let mut m = PredictorModel::init(4);
        for w in m.conv_weights_mut() {
            *w = 0.0;
        }
        m.conv_bias_mut().fill(0.0);
        let bias = [0.1, -0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        m.dense_bias_mut().copy_from_slice(&bias);
        assert_eq!(m.forward(&[0.9; 11]), bias);
        assert_eq!(m.forward(&[0.0; 11]), bias);
    }

    #[test]
    fn outer_taps_only_see_padding() {
        let mut m = PredictorModel::init(5);
        let before = m.forward(&[0.5; 11]);
        for f in 0..FILTERS {
            for c in 0..IN_CHANNELS {
                m.params[CONV_W + (f * KERNEL) * IN_CHANNELS + c] = 42.0;
                m.params[CONV_W + (f * KERNEL + 2) * IN_CHANNELS + c] = -42.0;
            }
        }
        assert_eq!(m.forward(&[0.5; 11]), before);
    }

    fn stream(n: usize) -> Vec<CanFrame> {
        (0..n)
            .map(|i| CanFrame::new(i as f64 * 1e-3, 0x100 + (i % 3) as u32, &[i as u8, 7, 9, 0, 0, 0, 0, 0], Label::Normal))
            .collect()
    }

    #[test]
    fn pe_is_absolute_difference_and_first_frame_zero() {
        let frames = stream(5);
        let mut m = PredictorModel::zeros();
        m.dense_bias_mut().copy_from_slice(&[0.5; 8]);
        let pe = extract_pe(&m, &frames);
        assert_eq!(pe.len(), 5);
        assert_eq!(pe[0], [0.0; 8]);
        assert!((pe[2][0] - (0.5 - 2.0 / 255.0)).abs() < 1e-15);

        let inputs = vec![[0.0; 11]; 2];
        let targets = vec![[0.25; 8], [0.25; 8]];
        let pe = extract_pe_scaled(&m, &inputs, &targets);
        assert_eq!(pe[1][0], 0.25);

        m.dense_bias_mut().copy_from_slice(&[0.25; 8]);
        assert_eq!(extract_pe_scaled(&m, &inputs, &targets)[1], [0.0; 8]);
    }

    #[test]
    fn model_file_roundtrip() {
        let frames = stream(600);
        let m = train(&frames, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let back = PredictorModel::decode(&m.encode()).unwrap();
        assert_eq!(back, m);
        let mut corrupt = m.encode();
        corrupt.truncate(corrupt.len() - 1);
        assert!(PredictorModel::decode(&corrupt).is_err());
    }

    #[test]
    fn training_rejects_degenerate_input() {
        assert!(train(&stream(1), &TrainConfig::default()).is_err());
        assert!(train(&stream(10), &TrainConfig { epochs: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let frames = stream(600);
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(train(&frames, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn extraction_is_deterministic() {
        let frames = stream(300);
        let m = PredictorModel::init(2);
        assert_eq!(extract_pe(&m, &frames), extract_pe(&m, &frames));
    }
}
