use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    info_nce_symmetric, simsiam_loss, PairBatch, ProjectorPredictor, SimSiamModel, SimSiamWeights, SslGradients,
};
use crate::ifs::{ArchiveReader, FpsPair};
use crate::nn::{
    backward, forward, predict, sgd_step, Layer, LrSchedule, ModelSpec, ModelWeights, SgdConfig, SgdState, Tensor,
};
use crate::seed::{derive_rng, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SslObjective {
    SimSiam,
    InfoNce { temperature: f64 },
}

/// Per-epoch learning-rate policy, applied to `sgd.lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PretrainSchedule {
    Constant,
    Step { factor: f64, period: usize },
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: PretrainSchedule,
    pub objective: SslObjective,
    /// Supplied by the caller; not serialised.
    #[serde(skip)]
    pub seed: u64,
    pub projector_hidden: usize,
    pub embedding: usize,
    pub bottleneck: usize,
    /// Rescale each encoder layer afterwards so its activation RMS on archive
    /// images matches the initial encoder's.
    pub match_init_scale: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_size: 32,
            sgd: SgdConfig::with_lr(0.05),
            schedule: PretrainSchedule::Step {
                factor: 0.1,
                period: 30,
            },
            objective: SslObjective::SimSiam,
            seed: 0,
            projector_hidden: 64,
            embedding: 64,
            bottleneck: 16,
            match_init_scale: true,
        }
    }
}

impl PretrainConfig {
    pub fn lr(&self, epoch: usize) -> f64 {
        let base = self.sgd.lr;
        match self.schedule {
            PretrainSchedule::Constant => base,
            PretrainSchedule::Step { factor, period } => LrSchedule::Step { base, factor, period }.lr(epoch),
            PretrainSchedule::Cosine => LrSchedule::Cosine {
                base,
                total: self.epochs,
            }
            .lr(epoch),
        }
    }

    pub fn model(&self, encoder: &ModelSpec) -> Result<SimSiamModel> {
        let heads = ProjectorPredictor::mlp(
            encoder.output_len(),
            self.projector_hidden,
            self.embedding,
            self.bottleneck,
        )?;
        SimSiamModel::new(encoder.clone(), heads)
    }

    /// The encoder weights training starts from.
    pub fn encoder_init(&self, encoder: &ModelSpec) -> ModelWeights {
        encoder.init(&mut derive_rng(self.seed, &[stream::PRETRAIN, 0]))
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("pre-training batch size must be ≥ 2".into()));
        }
        if let SslObjective::InfoNce { temperature } = self.objective {
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument("temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Encoder only; projector and predictor are dropped.
    pub encoder: ModelWeights,
    /// Full-set loss before the first step and after the last one.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Factor applied to each parameterised encoder layer, in order.
    pub layer_scales: Vec<f64>,
    /// Per-channel mean and std used to normalise archive images.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn load_pairs(path: &Path) -> Result<Vec<FpsPair>> {
    ArchiveReader::open(path)?.read_all()
}

/// Per-channel mean and standard deviation over both views of every pair.
pub fn channel_stats(pairs: &[FpsPair]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for p in pairs {
        for img in [&p.left, &p.right] {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    if n > 0 {
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }
    (mean, std)
}

/// Stack the selected pairs into `[B, 3, H, W]` view tensors.
pub fn pairs_to_batch_tensors(
    pairs: &[FpsPair],
    indices: &[usize],
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Result<PairBatch> {
    let first = pairs
        .get(*indices.first().unwrap_or(&0))
        .ok_or_else(|| Error::InvalidArgument("cannot build a batch from no pairs".into()))?;
    let (w, h) = (first.left.width, first.left.height);
    let mut left = Vec::with_capacity(indices.len() * 3 * w * h);
    let mut right = Vec::with_capacity(indices.len() * 3 * w * h);
    for &i in indices {
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("pair index {i} out of range")))?;
        if p.left.width != w || p.left.height != h {
            return Err(Error::Shape(format!("pair {i} is not {w}×{h}")));
        }
        left.extend(p.left.to_chw(mean, std));
        right.extend(p.right.to_chw(mean, std));
    }
    let shape = vec![indices.len(), 3, h, w];
    PairBatch::new(Tensor::new(shape.clone(), left)?, Tensor::new(shape, right)?)
}

pub fn pretrain(archive: &Path, encoder: &ModelSpec, config: &PretrainConfig) -> Result<PretrainOutcome> {
    let pairs = load_pairs(archive)?;
    pretrain_on_pairs(&pairs, encoder, config)
}

fn objective_step(
    objective: SslObjective,
    batch: &PairBatch,
    model: &SimSiamModel,
    w: &SimSiamWeights,
) -> Result<(f64, SslGradients)> {
    match objective {
        SslObjective::SimSiam => {
            let out = simsiam_loss(batch, model, w)?;
            Ok((out.loss, out.grads))
        }
        SslObjective::InfoNce { temperature } => {
            let proj = &model.heads.projector;
            let (f1, ce1) = forward(&model.encoder, &w.encoder, &batch.first)?;
            let (z1, cz1) = forward(proj, &w.projector, &f1)?;
            let (f2, ce2) = forward(&model.encoder, &w.encoder, &batch.second)?;
            let (z2, cz2) = forward(proj, &w.projector, &f2)?;
            let (loss, g1, g2) = info_nce_symmetric(&z1, &z2, temperature)?;
            let mut grads = SslGradients {
                encoder: w.encoder.zeros_like(),
                projector: w.projector.zeros_like(),
                predictor: w.predictor.zeros_like(),
            };
            for (g, cz, ce) in [(&g1, &cz1, &ce1), (&g2, &cz2, &ce2)] {
                let gz = backward(cz, &w.projector, g)?;
                let ge = backward(ce, &w.encoder, &gz.input)?;
                grads.projector.add_scaled(&gz.params, 1.0)?;
                grads.encoder.add_scaled(&ge.params, 1.0)?;
            }
            Ok((loss, grads))
        }
    }
}

fn full_loss(
    objective: SslObjective,
    pairs: &[FpsPair],
    batch_size: usize,
    model: &SimSiamModel,
    w: &SimSiamWeights,
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Result<f64> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch = pairs_to_batch_tensors(pairs, chunk, mean, std)?;
        let (loss, _) = objective_step(objective, &batch, model, w)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn rms(t: &Tensor) -> f64 {
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt()
}

/// Scales the weight and bias of each dense or conv layer of `w`, first to
/// last, so that the layer's output RMS on `x` equals that of `reference`.
/// ReLU and max-pooling commute with positive scaling, so only activation
/// magnitudes change. Returns the factors applied.
pub fn match_activation_scale(
    spec: &ModelSpec,
    w: &mut ModelWeights,
    reference: &ModelWeights,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let mut scales = Vec::new();
    for (i, layer) in spec.layers().iter().enumerate() {
        if !matches!(layer, Layer::Dense { .. } | Layer::Conv3x3 { .. }) {
            continue;
        }
        let prefix = spec.prefix(i + 1)?;
        let names: Vec<String> = prefix.param_shapes().into_iter().map(|(n, _)| n).collect();
        let target = rms(&predict(
            &prefix,
            &reference.restrict_to(names.iter().map(String::as_str))?,
            x,
        )?);
        let current = rms(&predict(&prefix, &w.restrict_to(names.iter().map(String::as_str))?, x)?);
        let s = if current > 0.0 && target > 0.0 {
            target / current
        } else {
            1.0
        };
        let own = format!("{}{i}.", layer_prefix(layer));
        for (name, t) in w.entries_mut() {
            if name.starts_with(&own) {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        scales.push(s);
    }
    Ok(scales)
}

fn layer_prefix(layer: &Layer) -> &'static str {
    match layer {
        Layer::Conv3x3 { .. } => "conv",
        _ => "dense",
    }
}

/// Self-supervised training of `encoder` on in-memory pairs.
pub fn pretrain_on_pairs(pairs: &[FpsPair], encoder: &ModelSpec, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let model = config.model(encoder)?;
    let (mean, std) = channel_stats(pairs);
    let mut w = SimSiamWeights {
        encoder: config.encoder_init(encoder),
        projector: model
            .heads
            .projector
            .init(&mut derive_rng(config.seed, &[stream::PRETRAIN, 1])),
        predictor: model
            .heads
            .predictor
            .init(&mut derive_rng(config.seed, &[stream::PRETRAIN, 2])),
    };
    if config.epochs == 0 || pairs.len() < 2 {
        return Ok(PretrainOutcome {
            encoder: w.encoder,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            step_losses: Vec::new(),
            epoch_losses: Vec::new(),
            layer_scales: Vec::new(),
            mean,
            std,
        });
    }
    let initial_loss = full_loss(config.objective, pairs, config.batch_size, &model, &w, &mean, &std)?;
    let mut states = [
        SgdState::new(config.sgd),
        SgdState::new(config.sgd),
        SgdState::new(config.sgd),
    ];
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        for s in states.iter_mut() {
            s.config.lr = lr;
        }
        order.shuffle(&mut derive_rng(config.seed, &[stream::PRETRAIN, 3, epoch as u64]));
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = pairs_to_batch_tensors(pairs, chunk, &mean, &std)?;
            let (loss, grads) = objective_step(config.objective, &batch, &model, &w)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("pre-training loss at epoch {epoch}, step {}", step_losses.len()),
                });
            }
            let [se, sp, sq] = &mut states;
            sgd_step(&mut w.encoder, &grads.encoder, se)?;
            sgd_step(&mut w.projector, &grads.projector, sp)?;
            if config.objective == SslObjective::SimSiam {
                sgd_step(&mut w.predictor, &grads.predictor, sq)?;
            }
            step_losses.push(loss);
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let epoch_loss = sum / seen.max(1) as f64;
        log::info!("pretrain epoch {epoch}: lr {lr:.4e}, loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }
    let final_loss = full_loss(config.objective, pairs, config.batch_size, &model, &w, &mean, &std)?;
    let mut encoder = w.encoder;
    let layer_scales = if config.match_init_scale {
        let probe: Vec<usize> = (0..pairs.len().min(256)).collect();
        let x = pairs_to_batch_tensors(pairs, &probe, &mean, &std)?.first;
        match_activation_scale(&model.encoder, &mut encoder, &config.encoder_init(&model.encoder), &x)?
    } else {
        Vec::new()
    };
    Ok(PretrainOutcome {
        encoder,
        layer_scales,
        initial_loss,
        final_loss,
        step_losses,
        epoch_losses,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::{compose_fps_pair, CodePool, FpsParams, SamplingConfig};

    fn pairs(n: usize, side: usize) -> Vec<FpsPair> {
        let pool = CodePool::generate(3, 8, &SamplingConfig::default()).unwrap();
        let mut params = FpsParams::square(side);
        params.n_iters = 200;
        let mut rng = derive_rng(5, &[0]);
        (0..n)
            .map(|_| compose_fps_pair(&pool, &params, &mut rng).unwrap())
            .collect()
    }

    fn encoder(side: usize) -> ModelSpec {
        ModelSpec::small_cnn(3, side, 4).unwrap().encoder().unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let enc = encoder(8);
        let out = pretrain_on_pairs(&pairs(4, 8), &enc, &cfg).unwrap();
        assert_eq!(out.encoder, cfg.encoder_init(&enc));
    }

    #[test]
    fn deterministic_and_encoder_only() {
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let enc = encoder(8);
        let data = pairs(8, 8);
        let a = pretrain_on_pairs(&data, &enc, &cfg).unwrap();
        let b = pretrain_on_pairs(&data, &enc, &cfg).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert!(a.encoder.names().eq(enc.zeros().names()));
        assert_eq!(a.step_losses.len(), 2);
    }

    #[test]
    fn info_nce_objective_runs() {
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 4,
            objective: SslObjective::InfoNce { temperature: 0.2 },
            ..PretrainConfig::default()
        };
        let out = pretrain_on_pairs(&pairs(8, 8), &encoder(8), &cfg).unwrap();
        assert!(out.final_loss.is_finite() && out.initial_loss > 0.0);
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        let cfg = PretrainConfig {
            epochs: 10,
            schedule: PretrainSchedule::Cosine,
            ..PretrainConfig::default()
        };
        assert_eq!(cfg.lr(0), 0.05);
        assert!(cfg.lr(9) < 0.05 * 0.05);
    }
}
