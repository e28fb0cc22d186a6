//! Masked-spectrogram pretraining of a transformer encoder, then a small
//! classifier trained on its frozen representations.

mod mask;

pub use mask::{mask_frames, mask_spectrogram, time_block_starts, MaskSpec};

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Ix2, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dataset::upsample_plan;
use crate::error::{Error, Result};
use crate::eval::{auc, to_json_full_precision};
use crate::features::{cough_only_audio, stft_log_spectrogram, StftConfig};
use crate::nn::{
    bce_with_logits, load_params, masked_mse, positional_encoding, save_params, sigmoid, AdamW, Dense, Init,
    Layer, LayerNorm, LayerSpec, LrSchedule, Mode, Module, Optimizer, Param, Scalar, Sequential, Tensor,
    TransformerBlock,
};
use crate::pipeline::{labels, LabeledClip};
use crate::quality::CoughSegment;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Spectrogram bins fed to the input projection.
    pub input_bins: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            layers: 3,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            input_bins: 1025,
        }
    }

    pub fn toy() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 128,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_bins == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one layer and one input bin".into()));
        }
        LayerSpec::MultiheadAttention {
            hidden: self.hidden,
            heads: self.heads,
        }
        .validate()?;
        LayerSpec::FeedForward {
            hidden: self.hidden,
            inner: self.ffn,
        }
        .validate()
    }
}

/// Input projection, sinusoidal positions, pre-norm blocks and a final
/// layer norm. Invalid frames never act as attention keys.
pub struct Encoder<T: Scalar> {
    pub config: EncoderConfig,
    pub input: Dense<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
}

fn no_dropout() -> Rng {
    rng::seeded(0, &[])
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed, &[0xe4c0]);
        Ok(Self {
            input: Dense::new(config.input_bins, config.hidden, Init::Xavier, &mut r),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::new(config.hidden, config.heads, config.ffn, &mut r))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(config.hidden),
            config,
        })
    }

    /// `[frames, bins]` → `[frames, hidden]`.
    pub fn forward(&mut self, x: &Tensor<T>, valid: &[bool], mode: Mode) -> Result<Tensor<T>> {
        let c = self.config;
        if x.ndim() != 2 || x.shape()[1] != c.input_bins || x.shape()[0] != valid.len() {
            return Err(Error::Shape(format!(
                "encoder expects [{} frames, {}] input, got {:?}",
                valid.len(),
                c.input_bins,
                x.shape()
            )));
        }
        let mut r = no_dropout();
        let pe = positional_encoding(valid.len(), c.hidden).mapv(T::of).into_dyn();
        let mut h = self.input.forward(x, mode, &mut r)? + pe;
        for b in &mut self.blocks {
            b.set_mask(Some(valid.to_vec()));
            h = b.forward(&h, mode, &mut r)?;
        }
        self.norm.forward(&h, mode, &mut r)
    }

    /// Gradient with respect to the input spectrogram.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.norm.backward(grad)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.input.backward(&g)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.input.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.norm.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.input.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.norm.params_mut());
        out
    }
}

/// Two feed-forward layers mapping representations back to spectrogram
/// bins. Used only while pretraining.
pub fn prediction_head<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<Sequential<T>> {
    Sequential::from_specs(
        &[
            LayerSpec::Dense {
                inputs: config.hidden,
                outputs: config.hidden,
            },
            LayerSpec::Gelu,
            LayerSpec::Dense {
                inputs: config.hidden,
                outputs: config.input_bins,
            },
        ],
        Init::Xavier,
        &mut rng::seeded(seed, &[0x9ead]),
    )
}

/// Three (dense, layer norm, ReLU) stages per frame, a mean over valid
/// frames and a single-logit output layer.
pub struct ClassifierHead<T: Scalar> {
    pub frames: Sequential<T>,
    pub output: Dense<T>,
    pooled_over: Option<(Vec<bool>, usize)>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(hidden: usize, width: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || width == 0 {
            return Err(Error::InvalidArgument("head widths must be positive".into()));
        }
        let mut specs = Vec::new();
        let mut inputs = hidden;
        for _ in 0..3 {
            specs.push(LayerSpec::Dense { inputs, outputs: width });
            specs.push(LayerSpec::LayerNorm { dim: width });
            specs.push(LayerSpec::Relu);
            inputs = width;
        }
        let mut r = rng::seeded(seed, &[0x4ead]);
        Ok(Self {
            frames: Sequential::from_specs(&specs, Init::He, &mut r)?,
            output: Dense::new(width, 1, Init::Xavier, &mut r),
            pooled_over: None,
        })
    }

    pub fn forward(&mut self, reps: &Tensor<T>, valid: &[bool]) -> Result<f64> {
        let n = valid.iter().filter(|&&v| v).count();
        if reps.ndim() != 2 || reps.shape()[0] != valid.len() || n == 0 {
            return Err(Error::Shape(format!(
                "head expects [{} frames, hidden] with a valid frame, got {:?}",
                valid.len(),
                reps.shape()
            )));
        }
        let mut r = no_dropout();
        let y = self.frames.forward(reps, Mode::Train, &mut r)?;
        let y = y.into_dimensionality::<Ix2>().expect("dense output is a matrix");
        let mut pooled = ndarray::Array1::<T>::zeros(y.ncols());
        for (row, _) in y.outer_iter().zip(valid).filter(|(_, &v)| v) {
            pooled += &row;
        }
        pooled.mapv_inplace(|v| v / T::of(n as f64));
        let z = self.output.forward(&pooled.into_dyn(), Mode::Train, &mut r)?;
        self.pooled_over = Some((valid.to_vec(), n));
        Ok(z[0].to_f64())
    }

    pub fn backward(&mut self, dlogit: f64) -> Result<()> {
        let (valid, n) = self.pooled_over.take().ok_or_else(|| Error::Shape("backward before forward".into()))?;
        let dp = self.output.backward(&Tensor::from_elem(IxDyn(&[1]), T::of(dlogit)))?;
        let width = dp.len();
        let mut dy = Array2::<T>::zeros((valid.len(), width));
        let share = dp.mapv(|v| v / T::of(n as f64));
        for (mut row, _) in dy.outer_iter_mut().zip(&valid).filter(|(_, &v)| v) {
            row.assign(&share);
        }
        self.frames.backward(&dy.into_dyn())?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.frames.params();
        out.extend(self.output.params());
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.frames.params_mut();
        out.extend(self.output.params_mut());
        out
    }
    fn kink_signature(&self, out: &mut Vec<u64>) {
        self.frames.kink_signature(out);
    }
}

/// Scalar standardisation of log spectrograms, fitted over every cell of
/// the pretraining set. Cross-bin structure is left for the encoder to learn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecNorm {
    pub mean: f64,
    pub std: f64,
}

impl SpecNorm {
    pub fn fit(specs: &[Array2<f64>]) -> Result<Self> {
        let bins = specs.first().ok_or(Error::Empty("spectrogram set"))?.ncols();
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for x in specs {
            if x.ncols() != bins {
                return Err(Error::Shape("spectrograms differ in bin count".into()));
            }
            sum += x.sum();
            sq += x.iter().map(|v| v * v).sum::<f64>();
            n += x.len();
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        Ok(Self {
            mean,
            std: if sd < 1e-8 { 1.0 } else { sd },
        })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| (v - self.mean) / self.std)
    }
}

/// `[frames, bins]` log spectrogram of the cough-only audio.
pub fn clip_log_spectrogram(audio: &AudioBuffer, segments: &[CoughSegment], stft: &StftConfig) -> Result<Array2<f64>> {
    let s = stft_log_spectrogram(&cough_only_audio(audio, segments)?, stft)?;
    Array2::from_shape_vec((s.n_frames, s.n_bins), s.values).map_err(|e| Error::Shape(e.to_string()))
}

fn to_f32(x: &Array2<f64>) -> Tensor<f32> {
    x.mapv(|v| v as f32).into_dyn()
}

/// Trained encoder together with what it needs to read audio.
pub struct SslEncoder {
    pub config: EncoderConfig,
    pub stft: StftConfig,
    pub norm: SpecNorm,
    pub net: Encoder<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSidecar {
    pub config: EncoderConfig,
    pub stft: StftConfig,
    pub norm: SpecNorm,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn write_sidecar<S: Serialize>(weights: &Path, side: &S) -> Result<()> {
    let p = sidecar_path(weights);
    fs::write(&p, to_json_full_precision(side)?).map_err(|e| Error::io(&p, e))
}

fn read_sidecar<S: for<'de> Deserialize<'de>>(weights: &Path) -> Result<S> {
    let p = sidecar_path(weights);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl SslEncoder {
    fn from_sidecar(side: EncoderSidecar) -> Result<Self> {
        Ok(Self {
            net: Encoder::new(side.config, 0)?,
            config: side.config,
            stft: side.stft,
            norm: side.norm,
        })
    }

    pub fn sidecar(&self) -> EncoderSidecar {
        EncoderSidecar {
            config: self.config,
            stft: self.stft,
            norm: self.norm,
        }
    }

    /// Normalised spectrogram input for a clip.
    pub fn input(&self, audio: &AudioBuffer, segments: &[CoughSegment]) -> Result<Array2<f64>> {
        Ok(self.norm.apply(&clip_log_spectrogram(audio, segments, &self.stft)?))
    }

    /// Frame representations `[frames, hidden]`, unmasked.
    pub fn represent(&mut self, audio: &AudioBuffer, segments: &[CoughSegment]) -> Result<Tensor<f32>> {
        let x = self.input(audio, segments)?;
        let valid = vec![true; x.nrows()];
        self.net.forward(&to_f32(&x), &valid, Mode::Eval)
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        save_params(weights, &self.net.params())?;
        write_sidecar(weights, &self.sidecar())
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let mut enc = Self::from_sidecar(read_sidecar(weights)?)?;
        load_params(weights, &mut enc.net.params_mut())?;
        Ok(enc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    /// MSE over masked cells of valid frames.
    Masked,
    /// MSE over every cell of valid frames.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub loss: ReconstructionLoss,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl UpstreamConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            max_lr: 1e-4,
            total_steps: 400_000,
            warmup_steps: 28_000,
            loss: ReconstructionLoss::Masked,
        }
    }

    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            total_steps: 3_000,
            warmup_steps: 300,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || !(self.max_lr > 0.0) {
            return Err(Error::InvalidArgument("upstream batch size, steps and lr must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument("warmup exceeds total steps".into()));
        }
        Ok(())
    }
}

/// Endless seeded stream over `0..n`, reshuffled every pass.
struct Shuffled {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    tag: u64,
}

impl Shuffled {
    fn new(items: Vec<usize>, seed: u64, tag: u64) -> Self {
        Self {
            pos: items.len(),
            order: items,
            pass: 0,
            seed,
            tag,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut rng::seeded(self.seed, &[self.tag, self.pass]));
            self.pass += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn pad_rows(x: &Array2<f64>, rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, x.ncols()));
    out.slice_mut(s![..x.nrows(), ..]).assign(x);
    out
}

/// Pretrain an encoder on clips (labels are ignored). Clips whose
/// spectrogram is shorter than one mask block are skipped. Returns the
/// encoder and the per-step loss.
pub fn pretrain_upstream(
    clips: &[LabeledClip],
    ucfg: &UpstreamConfig,
    ecfg: &EncoderConfig,
    stft: &StftConfig,
    mspec: &MaskSpec,
    seed: u64,
) -> Result<(SslEncoder, Vec<f64>)> {
    ucfg.validate()?;
    ecfg.validate()?;
    mspec.validate()?;
    stft.validate()?;
    if stft.n_freq / 2 + 1 != ecfg.input_bins {
        return Err(Error::InvalidArgument(format!(
            "an {}-point FFT gives {} bins, the encoder expects {}",
            stft.n_freq,
            stft.n_freq / 2 + 1,
            ecfg.input_bins
        )));
    }
    let mut specs = Vec::new();
    for c in clips {
        match clip_log_spectrogram(&c.audio, &c.segments, stft) {
            Ok(x) if x.nrows() >= mspec.time_block_width => specs.push(x),
            Ok(x) => log::warn!("{}: {} frames, too short to mask; skipped", c.id, x.nrows()),
            Err(e) => log::warn!("{}: {e}; skipped", c.id),
        }
    }
    if specs.is_empty() {
        return Err(Error::Empty("pretraining set"));
    }
    let norm = SpecNorm::fit(&specs)?;
    let specs: Vec<_> = specs.iter().map(|x| norm.apply(x)).collect();

    let mut encoder = Encoder::<f32>::new(*ecfg, seed)?;
    let mut head = prediction_head::<f32>(ecfg, seed)?;
    let mut opt = AdamW::new(LrSchedule::WarmupLinear {
        max_lr: ucfg.max_lr,
        warmup: ucfg.warmup_steps as u64,
        total: ucfg.total_steps as u64,
    });
    let mut stream = Shuffled::new((0..specs.len()).collect(), seed, 0x0b57);
    let mut history = Vec::with_capacity(ucfg.total_steps);
    for step in 0..ucfg.total_steps {
        let batch: Vec<usize> = (0..ucfg.batch_size).map(|_| stream.next()).collect();
        let rows = batch.iter().map(|&i| specs[i].nrows()).max().expect("non-empty batch");
        let mut mask_rng = rng::seeded(seed, &[0x3a5c, step as u64]);
        let mut items = Vec::with_capacity(batch.len());
        for &i in &batch {
            let target = pad_rows(&specs[i], rows);
            let mut input = target.clone();
            let valid = specs[i].nrows();
            let mut mask = mask_frames(&mut input, valid, mspec, &mut mask_rng)?;
            if ucfg.loss == ReconstructionLoss::Full {
                mask.slice_mut(s![..valid, ..]).fill(true);
            }
            let flags: Vec<bool> = (0..rows).map(|r| r < valid).collect();
            items.push((input, target.mapv(|v| v as f32), mask, flags));
        }
        let total: usize = items.iter().map(|it| it.2.iter().filter(|&&m| m).count()).sum();
        let mut loss = 0.0;
        for (input, target, mask, flags) in &items {
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let weight = count as f64 / total as f64;
            let reps = encoder.forward(&to_f32(input), flags, Mode::Train)?;
            let pred = head.forward(&reps, Mode::Train, &mut no_dropout())?;
            let pred = pred.into_dimensionality::<Ix2>().expect("head output is a matrix");
            let (l, g) = masked_mse(&pred, target, mask)?;
            loss += l * weight;
            let g = g.mapv(|v| v * weight as f32).into_dyn();
            encoder.backward(&head.backward(&g)?)?;
        }
        let mut params = encoder.params_mut();
        params.extend(head.params_mut());
        opt.step(&mut params)?;
        encoder.zero_grad();
        head.zero_grad();
        if step % 100 == 0 {
            log::info!("upstream step {step}: loss {loss:.5}");
        }
        history.push(loss);
    }
    Ok((
        SslEncoder {
            config: *ecfg,
            stft: *stft,
            norm,
            net: encoder,
        },
        history,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    /// Copies of each positive record.
    pub upsample_ratio: u32,
    pub head_width: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DownstreamConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            steps: 6_000,
            warmup_steps: 1_000,
            eval_interval: 300,
            upsample_ratio: 5,
            head_width: 512,
        }
    }

    pub fn toy() -> Self {
        Self {
            steps: 2_000,
            warmup_steps: 300,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.steps == 0
            || self.eval_interval == 0
            || self.upsample_ratio == 0
            || self.head_width == 0
            || !(self.learning_rate > 0.0)
        {
            return Err(Error::InvalidArgument("downstream settings must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::InvalidArgument("warmup exceeds total steps".into()));
        }
        if self.eval_interval > self.steps {
            return Err(Error::InvalidArgument("no evaluation would run within the step budget".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamHistory {
    pub losses: Vec<f64>,
    pub evaluations: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_val_auc: f64,
}

pub struct SslModel {
    pub encoder: SslEncoder,
    pub head: ClassifierHead<f32>,
    pub head_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslSidecar {
    pub encoder: EncoderSidecar,
    pub head_width: usize,
    pub best_step: Option<usize>,
    pub val_auc: Option<f64>,
    pub config_hash: Option<String>,
}

fn head_scores(head: &mut ClassifierHead<f32>, reps: &[Tensor<f32>]) -> Result<Vec<f64>> {
    reps.iter()
        .map(|r| Ok(sigmoid(head.forward(r, &vec![true; r.shape()[0]])?)))
        .collect()
}

/// Train the classifier head on frozen encoder outputs. Training clips that
/// cannot be encoded are skipped; validation clips must all encode. The
/// head is evaluated every `eval_interval` steps and the best one returned.
pub fn train_downstream(
    mut encoder: SslEncoder,
    train: &[LabeledClip],
    validation: &[LabeledClip],
    dcfg: &DownstreamConfig,
    seed: u64,
) -> Result<(SslModel, DownstreamHistory)> {
    dcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let val_labels = labels(validation)?;
    if val_labels.iter().all(|&l| l) || val_labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let mut reps = Vec::new();
    let mut ys = Vec::new();
    for c in train {
        let y = c.positive()?;
        match encoder.represent(&c.audio, &c.segments) {
            Ok(r) => {
                reps.push(r);
                ys.push(y);
            }
            Err(e) => log::warn!("{}: {e}; skipped", c.id),
        }
    }
    if !ys.contains(&true) || !ys.contains(&false) {
        return Err(Error::SingleClassTraining);
    }
    let val_reps = validation
        .iter()
        .map(|c| encoder.represent(&c.audio, &c.segments))
        .collect::<Result<Vec<_>>>()?;

    let plan = upsample_plan(&ys, dcfg.upsample_ratio, seed)?;
    let mut stream = Shuffled::new(plan.into_iter().map(|(i, _)| i).collect(), seed, 0xd0c5);
    let mut head = ClassifierHead::<f32>::new(encoder.config.hidden, dcfg.head_width, seed)?;
    let mut opt = AdamW::new(LrSchedule::WarmupLinear {
        max_lr: dcfg.learning_rate,
        warmup: dcfg.warmup_steps as u64,
        total: dcfg.steps as u64,
    });
    let mut losses = Vec::with_capacity(dcfg.steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    for step in 1..=dcfg.steps {
        let mut loss = 0.0;
        let scale = 1.0 / dcfg.batch_size as f64;
        for _ in 0..dcfg.batch_size {
            let i = stream.next();
            let z = head.forward(&reps[i], &vec![true; reps[i].shape()[0]])?;
            let (l, g) = bce_with_logits(z, if ys[i] { 1.0 } else { 0.0 });
            loss += l * scale;
            head.backward(g * scale)?;
        }
        opt.step(&mut head.params_mut())?;
        head.zero_grad();
        losses.push(loss);
        if step % dcfg.eval_interval == 0 {
            let val_auc = auc(&head_scores(&mut head, &val_reps)?, &val_labels)?;
            log::info!("downstream step {step}: loss {loss:.5}, validation AUC {val_auc:.4}");
            evaluations.push(EvalPoint { step, val_auc });
            if best.as_ref().is_none_or(|b| val_auc > b.1) {
                best = Some((step, val_auc, head.params().iter().map(|p| p.value.clone()).collect()));
            }
        }
    }
    let (best_step, best_val_auc, weights) = best.expect("validated: at least one evaluation");
    for (p, v) in head.params_mut().into_iter().zip(&weights) {
        p.value.assign(v);
    }
    Ok((
        SslModel {
            encoder,
            head,
            head_width: dcfg.head_width,
        },
        DownstreamHistory {
            losses,
            evaluations,
            best_step,
            best_val_auc,
        },
    ))
}

impl SslModel {
    /// Probability for 16 kHz audio and its cough segments. No masking.
    pub fn predict(&mut self, audio: &AudioBuffer, segments: &[CoughSegment]) -> Result<f64> {
        let reps = self.encoder.represent(audio, segments)?;
        let valid = vec![true; reps.shape()[0]];
        Ok(sigmoid(self.head.forward(&reps, &valid)?))
    }

    pub fn predict_clips(&mut self, clips: &[LabeledClip]) -> Result<Vec<f64>> {
        clips.iter().map(|c| self.predict(&c.audio, &c.segments)).collect()
    }

    fn all_params(&self) -> Vec<&Param<f32>> {
        let mut out = self.encoder.net.params();
        out.extend(self.head.params());
        out
    }

    /// Encoder then head tensors in one weight file.
    pub fn save(&self, weights: &Path, best_step: Option<usize>, val_auc: Option<f64>, config_hash: Option<String>) -> Result<()> {
        save_params(weights, &self.all_params())?;
        write_sidecar(
            weights,
            &SslSidecar {
                encoder: self.encoder.sidecar(),
                head_width: self.head_width,
                best_step,
                val_auc,
                config_hash,
            },
        )
    }

    pub fn load(weights: &Path) -> Result<(Self, SslSidecar)> {
        let side: SslSidecar = read_sidecar(weights)?;
        let mut model = SslModel {
            encoder: SslEncoder::from_sidecar(side.encoder.clone())?,
            head: ClassifierHead::new(side.encoder.config.hidden, side.head_width, 0)?,
            head_width: side.head_width,
        };
        let mut params = model.encoder.net.params_mut();
        params.extend(model.head.params_mut());
        load_params(weights, &mut params)?;
        Ok((model, side))
    }
}
