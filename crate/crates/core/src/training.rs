//! Adversarial training of the converter against the real/fake and domain
//! discriminators, plus the converter-only and real/fake-only baselines.
//!
//! Each step draws a batch of sources, converts it once, and then updates in
//! order the real/fake discriminator, the domain discriminator and the
//! converter. The converter step reuses the recorded conversion and scores it
//! with the freshly updated discriminators, whose parameters enter that graph
//! as constants.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{sample_negative, PairedDataset, Split};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var, BCE_EPS};
use crate::networks::{self, NetworkKind, NetworkParams, Networks, Phase};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Converter and real/fake discriminator.
    Rf,
    /// Converter alone, mean squared error against the ground truth.
    Mse,
    /// Converter and both discriminators, with negative pairs.
    RfDd,
    /// Converter and both discriminators, positive pairs only.
    RfDdNoNeg,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [TrainingMode::Rf, TrainingMode::Mse, TrainingMode::RfDd, TrainingMode::RfDdNoNeg];

    /// Flag spelling: `rf`, `mse`, `rf_dd`, `rf_dd_noneg`.
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Rf => "rf",
            TrainingMode::Mse => "mse",
            TrainingMode::RfDd => "rf_dd",
            TrainingMode::RfDdNoNeg => "rf_dd_noneg",
        }
    }

    /// Display label: `C_RF`, `C_MSE`, `C_RF_DD`, `C_RF_DD_NONEG`.
    pub fn label(self) -> &'static str {
        match self {
            TrainingMode::Rf => "C_RF",
            TrainingMode::Mse => "C_MSE",
            TrainingMode::RfDd => "C_RF_DD",
            TrainingMode::RfDdNoNeg => "C_RF_DD_NONEG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TrainingMode::ALL.into_iter().find(|m| m.name() == s || m.label() == s)
    }

    pub fn uses_real_fake(self) -> bool {
        self != TrainingMode::Mse
    }

    pub fn uses_domain(self) -> bool {
        matches!(self, TrainingMode::RfDd | TrainingMode::RfDdNoNeg)
    }
}

impl core::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: u32,
    pub lr_after_drop: f64,
    pub total_epochs: u32,
    pub momentum: f64,
    pub seed: u64,
    pub width: f64,
    pub optimizer: OptimizerKind,
    /// Train the converter to raise the discriminator scores of its outputs
    /// (`-log D`) instead of lowering their losses (`log(1 - D)`).
    pub non_saturating: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: TrainingMode::RfDd,
            batch_size: 128,
            lr: 2e-4,
            lr_drop_epoch: 25,
            lr_after_drop: 2e-5,
            total_epochs: 30,
            momentum: 0.5,
            seed: 0,
            width: 1.0,
            optimizer: OptimizerKind::SgdMomentum,
            non_saturating: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(invalid("config", reason));
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2 (batch norm on the 1x1 code), got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !(self.lr_after_drop > 0.0) || self.lr_after_drop > self.lr {
            return bad(format!("need 0 < lr_after_drop <= lr, got {} and {}", self.lr_after_drop, self.lr));
        }
        if self.lr_drop_epoch > self.total_epochs {
            return bad(format!("lr drop epoch {} exceeds total epochs {}", self.lr_drop_epoch, self.total_epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return bad(format!("width multiplier must lie in (0, 1], got {}", self.width));
        }
        Ok(())
    }
}

/// Learning rate of 1-based `epoch`.
pub fn lr_schedule(epoch: u32, config: &TrainingConfig) -> f64 {
    if epoch <= config.lr_drop_epoch {
        config.lr
    } else {
        config.lr_after_drop
    }
}

/// Which image is paired with a source in a discriminator update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    /// The source's own product photo.
    Gt,
    /// The converter output for the source.
    Gen,
    /// Another product's photo.
    Neg,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Gt => "gt",
            Tag::Gen => "gen",
            Tag::Neg => "neg",
        }
    }
}

/// Draw the tag of one batch item.
pub fn select_target<R: Rng + ?Sized>(rng: &mut R, mode: TrainingMode) -> Tag {
    match mode {
        TrainingMode::RfDd => [Tag::Gt, Tag::Gen, Tag::Neg][rng.random_range(0..3)],
        TrainingMode::RfDdNoNeg => [Tag::Gt, Tag::Gen][rng.random_range(0..2)],
        TrainingMode::Rf | TrainingMode::Mse => Tag::Gen,
    }
}

/// Real/fake label: photographs are real whether or not they match.
pub fn real_fake_label(tag: Tag) -> f64 {
    match tag {
        Tag::Gt | Tag::Neg => 1.0,
        Tag::Gen => 0.0,
    }
}

/// Domain label: only the source's own product photo is associated.
pub fn domain_label(tag: Tag) -> f64 {
    match tag {
        Tag::Gt => 1.0,
        Tag::Gen | Tag::Neg => 0.0,
    }
}

/// `-t ln p + (t - 1) ln(1 - p)` with `p` clamped away from 0 and 1.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -t * libm::log(p) + (t - 1.0) * libm::log(1.0 - p)
}

pub fn loss_real_fake(prob: f64, tag: Tag) -> f64 {
    bce(prob, real_fake_label(tag))
}

pub fn loss_domain(prob: f64, tag: Tag) -> f64 {
    bce(prob, domain_label(tag))
}

/// Converter objective `-rf/2 - da/2`.
pub fn loss_converter(rf_loss: f64, da_loss: f64) -> f64 {
    -0.5 * rf_loss - 0.5 * da_loss
}

/// Mean squared difference over all elements.
pub fn loss_mse(generated: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let a = g.constant(generated.clone());
    let b = g.constant(target.clone());
    let l = g.mse(a, b)?;
    Ok(g.value(l).item() as f64)
}

/// Telemetry of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub epoch: u32,
    pub step: u64,
    /// Mean real/fake discriminator loss, when that network trains.
    pub loss_rf: Option<f64>,
    /// Mean domain discriminator loss, when that network trains.
    pub loss_da: Option<f64>,
    /// Converter objective (mean squared error in `Mse` mode).
    pub loss_c: f64,
    pub lr: f64,
}

/// Parameter updates applied so far, per network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub converter: u64,
    pub real_fake: u64,
    pub domain: u64,
}

impl UpdateCounts {
    pub fn total(&self) -> u64 {
        self.converter + self.real_fake + self.domain
    }
}

/// Optimizer buffers for the three updated parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    /// Encoder then decoder parameters.
    pub converter: OptimizerState<f32>,
    pub real_fake: OptimizerState<f32>,
    pub domain: OptimizerState<f32>,
}

impl Optimizers {
    pub fn new(config: &TrainingConfig, nets: &Networks<f32>) -> Self {
        let make = |params: Vec<&Tensor<f32>>| OptimizerState::new(config.optimizer, config.lr, config.momentum, params);
        let mut conv = nets.encoder.trainable();
        conv.extend(nets.decoder.trainable());
        Optimizers {
            converter: make(conv),
            real_fake: make(nets.real_fake.trainable()),
            domain: make(nets.domain.trainable()),
        }
    }
}

/// Draw counters of the training streams, for checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamPositions {
    pub selection: u64,
    pub negatives: u64,
    pub shuffle: u64,
}

/// All mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub nets: Networks<f32>,
    pub optim: Optimizers,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed steps over all epochs.
    pub step: u64,
    pub updates: UpdateCounts,
    selection: Stream,
    negatives: Stream,
    shuffle: Stream,
}

/// Images of one batch, stacked.
struct Batch {
    sources: Tensor<f32>,
    truths: Tensor<f32>,
    negatives: Option<Tensor<f32>>,
    tags: Vec<Tag>,
}

impl Trainer {
    /// Fresh networks and optimizer state seeded from `config.seed`.
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::init(config.width, config.seed);
        let optim = Optimizers::new(&config, &nets);
        Ok(Self::from_parts(config, nets, optim, 0, 0, UpdateCounts::default(), StreamPositions::default()))
    }

    /// Resume from saved state.
    pub fn from_parts(
        config: TrainingConfig,
        nets: Networks<f32>,
        optim: Optimizers,
        epoch: u32,
        step: u64,
        updates: UpdateCounts,
        streams: StreamPositions,
    ) -> Self {
        let restore = |p: Purpose, draws| Stream::restore(config.seed, p as u32, draws);
        Trainer {
            selection: restore(Purpose::Selection, streams.selection),
            negatives: restore(Purpose::Negatives, streams.negatives),
            shuffle: restore(Purpose::Shuffle, streams.shuffle),
            config,
            nets,
            optim,
            epoch,
            step,
            updates,
        }
    }

    pub fn stream_positions(&self) -> StreamPositions {
        StreamPositions {
            selection: self.selection.draws(),
            negatives: self.negatives.draws(),
            shuffle: self.shuffle.draws(),
        }
    }

    /// One pass over the shuffled training pairs. A trailing batch smaller
    /// than 2 is dropped. `sink` receives one report per step.
    pub fn train_epoch(&mut self, ds: &PairedDataset, sink: &mut dyn FnMut(&LossReport)) -> Result<()> {
        let mut pairs = ds.pairs(Split::Train);
        if pairs.is_empty() {
            return Err(Error::Dataset("training split has no source images".into()));
        }
        let train_products = ds.products_in(Split::Train);
        if self.config.mode == TrainingMode::RfDd && train_products.len() < 2 {
            return Err(Error::Dataset("negative pairs need at least two training products".into()));
        }
        pairs.shuffle(&mut self.shuffle);
        let epoch = self.epoch + 1;
        let lr = lr_schedule(epoch, &self.config);
        for chunk in pairs.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let report = self.train_step(ds, &train_products, chunk, epoch, lr)?;
            sink(&report);
        }
        self.epoch = epoch;
        Ok(())
    }

    fn assemble(&mut self, ds: &PairedDataset, train_products: &[usize], chunk: &[(usize, usize)]) -> Result<Batch> {
        let products = ds.products();
        let sources: Vec<&Tensor<f32>> = chunk.iter().map(|&(p, s)| &products[p].sources[s]).collect();
        let truths: Vec<&Tensor<f32>> = chunk.iter().map(|&(p, _)| &products[p].target).collect();
        let tags: Vec<Tag> = chunk.iter().map(|_| select_target(&mut self.selection, self.config.mode)).collect();
        let negatives = if self.config.mode == TrainingMode::RfDd {
            let mut negs = Vec::with_capacity(chunk.len());
            for &(p, _) in chunk {
                let q = sample_negative(train_products, p, &mut self.negatives)?;
                negs.push(&products[q].target);
            }
            Some(Tensor::stack(&negs)?)
        } else {
            None
        };
        Ok(Batch {
            sources: Tensor::stack(&sources)?,
            truths: Tensor::stack(&truths)?,
            negatives,
            tags,
        })
    }

    fn check(&self, what: &'static str, v: f64, epoch: u32) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what,
                epoch,
                step: self.step + 1,
            })
        }
    }

    fn train_step(&mut self, ds: &PairedDataset, train_products: &[usize], chunk: &[(usize, usize)], epoch: u32, lr: f64) -> Result<LossReport> {
        let batch = self.assemble(ds, train_products, chunk)?;
        let n = batch.tags.len();
        let mode = self.config.mode;

        let mut g = Graph::<f32>::new();
        let source = g.constant(batch.sources.clone());
        let conv = networks::convert(&mut g, &self.nets.encoder, &self.nets.decoder, source, Phase::Train, true)?;
        let generated = g.value(conv.output).clone();

        // The images each item pairs with, as plain values for the
        // discriminator updates.
        let selected = if mode.uses_domain() {
            let items: Vec<Tensor<f32>> = (0..n)
                .map(|i| match batch.tags[i] {
                    Tag::Gt => batch.truths.select_item(i),
                    Tag::Gen => generated.select_item(i),
                    Tag::Neg => batch.negatives.as_ref().unwrap().select_item(i),
                })
                .collect();
            Some(Tensor::concat_batch(&items.iter().collect::<Vec<_>>())?)
        } else {
            None
        };

        let mut loss_rf = None;
        if mode.uses_real_fake() {
            let (input, labels) = match &selected {
                Some(sel) => (sel.clone(), batch.tags.iter().map(|&t| real_fake_label(t) as f32).collect()),
                // Real/fake only: every real target with label 1, every
                // generated image with label 0.
                None => {
                    let mut labels = vec![1.0f32; n];
                    labels.extend(vec![0.0f32; n]);
                    (Tensor::concat_batch(&[&batch.truths, &generated])?, labels)
                }
            };
            let l = update_discriminator(&mut self.nets.real_fake, &mut self.optim.real_fake, lr, &input, None, &labels)?;
            loss_rf = Some(self.check("real/fake discriminator loss", l, epoch)?);
            self.updates.real_fake += 1;
        }

        let mut loss_da = None;
        if mode.uses_domain() {
            let labels: Vec<f32> = batch.tags.iter().map(|&t| domain_label(t) as f32).collect();
            let sel = selected.as_ref().unwrap();
            let l = update_discriminator(&mut self.nets.domain, &mut self.optim.domain, lr, sel, Some(&batch.sources), &labels)?;
            loss_da = Some(self.check("domain discriminator loss", l, epoch)?);
            self.updates.domain += 1;
        }

        let loss = converter_loss(
            &mut g,
            &self.nets,
            mode,
            self.config.non_saturating,
            conv.output,
            source,
            &batch.truths,
            selected.as_ref(),
            &batch.tags,
        )?;
        let loss_c = self.check("converter loss", g.value(loss).item() as f64, epoch)?;
        g.backward(loss)?;
        let mut vars = conv.encoder_vars.clone();
        vars.extend(&conv.decoder_vars);
        let params: Vec<&Tensor<f32>> = self.nets.encoder.trainable().into_iter().chain(self.nets.decoder.trainable()).collect();
        // With no generated item in the batch nothing reaches the converter.
        let grads: Vec<Option<Tensor<f32>>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| Some(g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))))
            .collect();
        self.optim.converter.lr = lr;
        {
            let mut params = self.nets.encoder.trainable_mut();
            params.extend(self.nets.decoder.trainable_mut());
            self.optim.converter.step(&mut params, &grads)?;
        }
        self.nets.encoder.update_running(&conv.encoder_stats);
        self.nets.decoder.update_running(&conv.decoder_stats);
        self.updates.converter += 1;
        self.step += 1;

        Ok(LossReport {
            epoch,
            step: self.step,
            loss_rf,
            loss_da,
            loss_c,
            lr,
        })
    }
}

/// Record the converter objective for a batch whose conversion is
/// `generated` (of `source`). `selected` holds each item's paired image as a
/// value (see [`Tag`]); items tagged `Gen` are taken from `generated`
/// instead, so only they carry converter gradient. In `Rf` mode the
/// real/fake discriminator scores the truths followed by `generated`, as in
/// its own update. Discriminators enter as constants with batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn converter_loss(
    g: &mut Graph<f32>,
    nets: &Networks<f32>,
    mode: TrainingMode,
    non_saturating: bool,
    generated: Var,
    source: Var,
    truths: &Tensor<f32>,
    selected: Option<&Tensor<f32>>,
    tags: &[Tag],
) -> Result<Var> {
    let n = tags.len();
    match mode {
        TrainingMode::Mse => {
            let t = g.constant(truths.clone());
            g.mse(generated, t)
        }
        TrainingMode::Rf => {
            // Same batch as the discriminator update (truths, then outputs),
            // so batch-norm statistics match what it was trained on.
            let mut parts: Vec<(Var, usize)> = Vec::with_capacity(2 * n);
            for i in 0..n {
                parts.push((g.constant(truths.select_item(i)), 0));
            }
            parts.extend((0..n).map(|i| (generated, i)));
            let both = g.gather_items(&parts)?;
            let rf = &nets.real_fake;
            let vars = rf.bind(g, false);
            let p = networks::discriminate_real_fake(g, rf, &vars, both, Phase::Frozen)?.output;
            let w = 1.0 / (2 * n) as f32;
            let mut labels = vec![1.0f32; n];
            let mut weights = vec![-w; n];
            if non_saturating {
                labels.extend(vec![1.0; n]);
                weights.extend(vec![w; n]);
            } else {
                labels.extend(vec![0.0; n]);
                weights.extend(vec![-w; n]);
            }
            let l = g.bce(p, &labels)?;
            let w = g.constant(Tensor::new([2 * n], weights)?);
            let weighted = g.mul(l, w)?;
            Ok(g.sum(weighted))
        }
        TrainingMode::RfDd | TrainingMode::RfDdNoNeg => {
            let selected = selected.ok_or_else(|| invalid("converter_loss", "paired images required"))?;
            let mut parts: Vec<(Var, usize)> = Vec::with_capacity(n);
            for (i, &t) in tags.iter().enumerate() {
                parts.push(match t {
                    Tag::Gen => (generated, i),
                    _ => (g.constant(selected.select_item(i)), 0),
                });
            }
            let target = g.gather_items(&parts)?;
            let rf = &nets.real_fake;
            let rf_vars = rf.bind(g, false);
            let p_rf = networks::discriminate_real_fake(g, rf, &rf_vars, target, Phase::Frozen)?.output;
            let da = &nets.domain;
            let da_vars = da.bind(g, false);
            let p_da = networks::discriminate_domain(g, da, &da_vars, source, target, Phase::Frozen)?.output;
            converter_objective(g, p_rf, p_da, tags, non_saturating)
        }
    }
}

/// Batch mean of `-L_R/2 - L_A/2` per item. With `non_saturating`, generated
/// items contribute `bce(p, 1)/2` per discriminator instead; other items are
/// constants of the converter either way.
fn converter_objective(g: &mut Graph<f32>, p_rf: Var, p_da: Var, tags: &[Tag], non_saturating: bool) -> Result<Var> {
    let n = tags.len() as f32;
    let mut rf_labels = Vec::with_capacity(tags.len());
    let mut da_labels = Vec::with_capacity(tags.len());
    let mut weights = Vec::with_capacity(tags.len());
    for &t in tags {
        if non_saturating && t == Tag::Gen {
            rf_labels.push(1.0);
            da_labels.push(1.0);
            weights.push(0.5 / n);
        } else {
            rf_labels.push(real_fake_label(t) as f32);
            da_labels.push(domain_label(t) as f32);
            weights.push(-0.5 / n);
        }
    }
    let l_rf = g.bce(p_rf, &rf_labels)?;
    let l_da = g.bce(p_da, &da_labels)?;
    let both = g.add(l_rf, l_da)?;
    let w = g.constant(Tensor::new([tags.len()], weights)?);
    let weighted = g.mul(both, w)?;
    Ok(g.sum(weighted))
}

/// One descent step on the mean BCE of a discriminator. `pair_with` selects
/// the domain discriminator, scoring `(pair_with[i], input[i])`.
fn update_discriminator(
    net: &mut NetworkParams<f32>,
    optim: &mut OptimizerState<f32>,
    lr: f64,
    input: &Tensor<f32>,
    pair_with: Option<&Tensor<f32>>,
    labels: &[f32],
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = net.bind(&mut g, true);
    let x = g.constant(input.clone());
    let out = match pair_with {
        Some(src) => {
            let s = g.constant(src.clone());
            networks::discriminate_domain(&mut g, net, &vars, s, x, Phase::Train)?
        }
        None => networks::discriminate_real_fake(&mut g, net, &vars, x, Phase::Train)?,
    };
    let l = g.bce(out.output, labels)?;
    let loss = g.mean(l);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let grads = NetworkParams::grads(&mut g, &vars);
    optim.lr = lr;
    optim.step(&mut net.trainable_mut(), &grads)?;
    net.update_running(&out.stats);
    Ok(value)
}

/// Which network a [`NetworkKind`] update counter belongs to.
pub fn updates_of(counts: &UpdateCounts, kind: NetworkKind) -> u64 {
    match kind {
        NetworkKind::Encoder | NetworkKind::Decoder => counts.converter,
        NetworkKind::RealFake => counts.real_fake,
        NetworkKind::Domain => counts.domain,
    }
}
