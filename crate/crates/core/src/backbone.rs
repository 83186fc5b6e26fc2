//! Three-block CNN with a 1x1 class-score head and global average pooling.
//!
//! `image → [conv3x3 → BN → ReLU → 2x2 avg] x3 → (attention) → 1x1 head →
//! score maps → spatial mean → logits`. The per-class score maps are the
//! class activation maps.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::norm::{BatchMoments, BatchNorm, BnLayout, Mode};
use crate::rfga::{RfgaConfig, RfgaParams, RfgaTrace, RfgaVars, ViewSet};
use crate::rng::{substream, Domain};
use crate::tape::{Tape, Var};
use crate::tensor::{PoolView, Tensor};

pub const BLOCK_WIDTHS: [usize; 3] = [16, 32, 64];
pub const IMAGE_CHANNELS: usize = 3;
pub const DOWNSAMPLE: usize = 8;

/// Anything that can be fed to the classifier.
pub trait Example {
    fn image(&self) -> &Tensor;
    fn label(&self) -> usize;
}

/// Model variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    CamBaseline,
    RfgaResidual,
    RfgaNonResidual,
    RfgaChannelOnly,
    RfgaHeightOnly,
    RfgaWidthOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CamBaseline,
        Variant::RfgaResidual,
        Variant::RfgaNonResidual,
        Variant::RfgaChannelOnly,
        Variant::RfgaHeightOnly,
        Variant::RfgaWidthOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CamBaseline => "cam_baseline",
            Variant::RfgaResidual => "rfga_residual",
            Variant::RfgaNonResidual => "rfga_nonresidual",
            Variant::RfgaChannelOnly => "rfga_channel_only",
            Variant::RfgaHeightOnly => "rfga_height_only",
            Variant::RfgaWidthOnly => "rfga_width_only",
        }
    }

    /// Attention settings, `None` for the plain CAM model. Single-view
    /// ablations keep the residual connection.
    pub fn rfga_config(self, k: usize) -> Option<RfgaConfig> {
        let (residual, views) = match self {
            Variant::CamBaseline => return None,
            Variant::RfgaResidual => (true, ViewSet::ALL),
            Variant::RfgaNonResidual => (false, ViewSet::ALL),
            Variant::RfgaChannelOnly => (true, ViewSet::only(PoolView::Channel)),
            Variant::RfgaHeightOnly => (true, ViewSet::only(PoolView::Height)),
            Variant::RfgaWidthOnly => (true, ViewSet::only(PoolView::Width)),
        };
        Some(RfgaConfig { k, residual, views })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub rfga: Option<RfgaConfig>,
}

impl ModelConfig {
    pub fn feature_size(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of {DOWNSAMPLE}, got {}",
                self.image_size
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if let Some(r) = &self.rfga {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[Cout, Cin, 3, 3]`
    pub weight: Tensor,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[n_classes, 64, 1, 1]`, no bias.
    pub head: Tensor,
    pub rfga: Option<RfgaParams>,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    blocks: Vec<[Var; 3]>,
    head: Var,
    rfga: Option<RfgaVars>,
}

impl BackboneVars {
    /// Same order as [`BackboneParams::parameters_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flatten().copied().collect();
        out.push(self.head);
        if let Some(r) = &self.rfga {
            out.extend(r.all());
        }
        out
    }
}

fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl BackboneParams {
    /// He-uniform conv weights, uniform `±1/√64` head, fresh batch norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, Domain::Init, 0);
        let mut blocks = Vec::with_capacity(BLOCK_WIDTHS.len());
        let mut cin = IMAGE_CHANNELS;
        for &cout in &BLOCK_WIDTHS {
            let fan_in = (cin * 9) as f64;
            blocks.push(ConvBlock {
                weight: uniform_tensor(&[cout, cin, 3, 3], (6.0 / fan_in).sqrt(), &mut rng),
                norm: BatchNorm::new(cout, BnLayout::PerChannel),
            });
            cin = cout;
        }
        let head = uniform_tensor(&[config.n_classes, cin, 1, 1], 1.0 / (cin as f64).sqrt(), &mut rng);
        let s = config.feature_size();
        let rfga = config
            .rfga
            .map(|r| RfgaParams::new(r.k, cin, s, s, &mut rng))
            .transpose()?;
        Ok(Self {
            config,
            blocks,
            head,
            rfga,
        })
    }

    pub fn feature_channels(&self) -> usize {
        BLOCK_WIDTHS[BLOCK_WIDTHS.len() - 1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                [
                    tape.param(b.weight.clone()),
                    tape.param(b.norm.gamma.clone()),
                    tape.param(b.norm.beta.clone()),
                ]
            })
            .collect();
        let head = tape.param(self.head.clone());
        let rfga = self.rfga.as_ref().map(|r| r.bind(tape));
        BackboneVars { blocks, head, rfga }
    }

    /// Vars taken from `slots` in [`BackboneParams::parameters_mut`] order.
    pub fn vars_from_slots(&self, slots: &[Var]) -> Result<BackboneVars> {
        let n_block = 3 * self.blocks.len();
        let expected = n_block + 1 + if self.rfga.is_some() { 9 } else { 0 };
        if slots.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter slots, got {}", slots.len())));
        }
        let blocks = slots[..n_block].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let rfga = match self.rfga {
            Some(_) => Some(RfgaVars::from_slots(&slots[n_block + 1..])?),
            None => None,
        };
        Ok(BackboneVars {
            blocks,
            head: slots[n_block],
            rfga,
        })
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out.push(&mut self.head);
        if let Some(r) = &mut self.rfga {
            out.extend(r.parameters_mut());
        }
        out
    }

    /// Every learnable tensor and running statistic, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bn.gamma"), &b.norm.gamma));
            out.push((format!("block{i}.bn.beta"), &b.norm.beta));
            out.push((format!("block{i}.bn.running_mean"), &b.norm.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.norm.running_var));
        }
        out.push(("head.weight".to_string(), &self.head));
        if let Some(r) = &self.rfga {
            out.extend(
                r.named_tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("rfga.{n}"), t)),
            );
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.weight"), &mut b.weight));
            out.push((format!("block{i}.bn.gamma"), &mut b.norm.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.norm.beta));
            out.push((format!("block{i}.bn.running_mean"), &mut b.norm.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.norm.running_var));
        }
        out.push(("head.weight".to_string(), &mut self.head));
        if let Some(r) = &mut self.rfga {
            out.extend(
                r.named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("rfga.{n}"), t)),
            );
        }
        out
    }

    /// Marks every batch norm as having usable running statistics (used
    /// after loading a checkpoint).
    pub fn mark_stats_tracked(&mut self) {
        for b in &mut self.blocks {
            b.norm.tracked = b.norm.tracked.max(1);
        }
        if let Some(r) = &mut self.rfga {
            for n in r.norms_mut() {
                n.tracked = n.tracked.max(1);
            }
        }
    }

    pub fn absorb(&mut self, moments: &ForwardMoments) {
        for (b, m) in self.blocks.iter_mut().zip(&moments.blocks) {
            if let Some(m) = m {
                b.norm.absorb(m);
            }
        }
        if let (Some(r), Some(m)) = (&mut self.rfga, &moments.rfga) {
            r.absorb(m);
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BackboneVars,
        images: Var,
        mode: Mode,
    ) -> Result<ForwardTrace> {
        let shape = tape.shape(images).to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1..] != [IMAGE_CHANNELS, s, s] {
            return shape_err(format!(
                "expected images [N,{IMAGE_CHANNELS},{s},{s}], got {shape:?}"
            ));
        }
        let mut h = images;
        let mut block_moments = Vec::with_capacity(self.blocks.len());
        for (b, [w, gamma, beta]) in self.blocks.iter().zip(&vars.blocks) {
            let c = tape.conv2d(h, *w)?;
            let bn = tape.batch_norm(c, *gamma, *beta, &b.norm, mode)?;
            block_moments.push(bn.moments);
            let r = tape.relu(bn.y);
            h = tape.downsample2(r)?;
        }
        let features = h;
        let rfga = match (&self.rfga, &vars.rfga, &self.config.rfga) {
            (Some(p), Some(v), Some(cfg)) => Some(p.forward_on_tape(cfg, tape, v, features, mode)?),
            (None, None, None) => None,
            _ => return Err(Error::Config("attention parameters do not match model config".into())),
        };
        let calibrated = rfga.as_ref().map_or(features, |t| t.out);
        let score_maps = tape.conv2d(calibrated, vars.head)?;
        let logits = tape.spatial_mean(score_maps)?;
        let moments = ForwardMoments {
            blocks: block_moments,
            rfga: rfga.as_ref().map(|t| t.moments.clone()),
        };
        Ok(ForwardTrace {
            features,
            calibrated,
            score_maps,
            logits,
            rfga,
            moments,
        })
    }
}

/// Batch statistics gathered in a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardMoments {
    pub blocks: Vec<Option<BatchMoments>>,
    pub rfga: Option<crate::rfga::RfgaMoments>,
}

#[derive(Debug)]
pub struct ForwardTrace {
    /// Final backbone features, before attention.
    pub features: Var,
    /// Features fed to the head (equal to `features` without attention).
    pub calibrated: Var,
    pub score_maps: Var,
    pub logits: Var,
    pub rfga: Option<RfgaTrace>,
    pub moments: ForwardMoments,
}

/// Logits `[N,K]` and score maps `[N,K,s,s]` for a batch.
pub fn forward_classify(images: &Tensor, params: &BackboneParams, mode: Mode) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(images.clone());
    let trace = params.forward_on_tape(&mut tape, &vars, x, mode)?;
    Ok((
        tape.value(trace.logits).clone(),
        tape.value(trace.score_maps).clone(),
    ))
}

/// Class activation map of one sample: `score_maps[class_idx]` from a
/// `[K,s,s]` tensor, unnormalized.
pub fn cam(score_maps: &Tensor, class_idx: usize) -> Result<Tensor> {
    let [k, _, _] = *score_maps.shape() else {
        return shape_err(format!("cam expects [K,s,s] score maps, got {:?}", score_maps.shape()));
    };
    if class_idx >= k {
        return Err(Error::Contract(format!("class {class_idx} out of range for {k} classes")));
    }
    score_maps.index_axis0(class_idx)
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplicative decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 45,
            batch_size: 20,
            lr_decay: 0.1,
            lr_decay_every: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// SGD with momentum: `v ← μ·v + g; p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &mut BackboneParams, momentum: f64) -> Self {
        let velocity = params
            .parameters_mut()
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self { momentum, velocity }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

fn stack_batch<E: Example>(data: &[E], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| data[i].image()).collect();
    let labels = idx.iter().map(|&i| data[i].label()).collect();
    Ok((Tensor::stack(&imgs)?, labels))
}

/// Shuffled minibatches for one epoch; a trailing batch smaller than two
/// samples is dropped.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(cfg.seed, Domain::Shuffle, epoch as u64));
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub top1: f64,
    pub lr: f64,
}

/// One epoch of minibatch SGD over `data`.
pub fn train_epoch<E: Example>(
    data: &[E],
    params: &mut BackboneParams,
    sgd: &mut Sgd,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let lr = cfg.lr_at(epoch);
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    let batches = epoch_batches(data.len(), cfg, epoch);
    for (b, idx) in batches.iter().enumerate() {
        let (images, labels) = stack_batch(data, idx)?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(images);
        let trace = params.forward_on_tape(&mut tape, &vars, x, Mode::Train)?;
        let loss = tape.cross_entropy(trace.logits, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                loss: loss_value,
                epoch,
                batch: b,
                lr,
            });
        }
        let k = params.config.n_classes;
        for (row, &label) in tape.value(trace.logits).data().chunks_exact(k).zip(&labels) {
            correct += usize::from(argmax(row) == label);
        }
        seen += labels.len();
        loss_sum += loss_value;

        let grads = tape.backward(loss)?;
        let grad_list: Vec<&Tensor> = vars
            .all()
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect::<Result<_>>()?;
        params.absorb(&trace.moments);
        let mut plist = params.parameters_mut();
        sgd.step(&mut plist, &grad_list, lr);
    }
    Ok(EpochStats {
        mean_loss: loss_sum / batches.len() as f64,
        top1: correct as f64 / seen as f64,
        lr,
    })
}

/// Mean train-mode loss over the batches `train_epoch` would visit in
/// `epoch`, without touching the parameters.
pub fn schedule_loss<E: Example>(
    data: &[E],
    params: &BackboneParams,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(data.len(), cfg, epoch);
    let mut sum = 0.0;
    for idx in &batches {
        let (images, labels) = stack_batch(data, idx)?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(images);
        let trace = params.forward_on_tape(&mut tape, &vars, x, Mode::Train)?;
        let loss = tape.cross_entropy(trace.logits, &labels)?;
        sum += tape.value(loss).data()[0];
    }
    Ok(sum / batches.len() as f64)
}

/// Eval-mode prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub predicted: usize,
    /// `[K,s,s]`
    pub score_maps: Tensor,
}

pub const EVAL_BATCH: usize = 50;

/// Eval-mode forward over a dataset in fixed-size chunks, in input order.
pub fn predict<E: Example>(data: &[E], params: &BackboneParams) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = stack_batch(data, chunk)?;
        let (logits, maps) = forward_classify(&images, params, Mode::Eval)?;
        let k = params.config.n_classes;
        for (i, row) in logits.data().chunks_exact(k).enumerate() {
            out.push(Prediction {
                logits: row.to_vec(),
                predicted: argmax(row),
                score_maps: maps.index_axis0(i)?,
            });
        }
    }
    Ok(out)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn top1_from_predictions<E: Example>(data: &[E], preds: &[Prediction]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("top-1 accuracy of an empty dataset".into()));
    }
    let hits = data
        .iter()
        .zip(preds)
        .filter(|(d, p)| d.label() == p.predicted)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn top1_accuracy<E: Example>(data: &[E], params: &BackboneParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("top-1 accuracy of an empty dataset".into()));
    }
    top1_from_predictions(data, &predict(data, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
        assert!(Variant::CamBaseline.rfga_config(3).is_none());
        let c = Variant::RfgaNonResidual.rfga_config(3).unwrap();
        assert!(!c.residual && c.views == ViewSet::ALL);
        let h = Variant::RfgaHeightOnly.rfga_config(3).unwrap();
        assert!(h.views.contains(PoolView::Height) && !h.views.contains(PoolView::Width));
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(14), 0.01);
        assert!((cfg.lr_at(15) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(44) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn batches_drop_singletons() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        let b = epoch_batches(9, &cfg, 0);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        let c = epoch_batches(10, &cfg, 0);
        assert_eq!(c.last().unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let m = ModelConfig {
            n_classes: 4,
            image_size: 60,
            rfga: None,
        };
        assert!(m.validate().is_err());
        let t = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn cam_index_out_of_range() {
        let maps = Tensor::zeros(&[3, 2, 2]);
        assert!(cam(&maps, 3).is_err());
        assert_eq!(cam(&maps, 2).unwrap().shape(), &[2, 2]);
    }
}
