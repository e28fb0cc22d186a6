//! Sonograph CNN: six "same"-padded convolutions with four 2×2 poolings,
//! global average pooling and two dense layers, trained with BCE and Adamax
//! and kept at the epoch with the best validation AUC.

mod augment;

pub use augment::{augment_audio, shift_samples, AugmentSpec};

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::upsample_plan;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::features::{Sonograph, SonographBuilder, SONOGRAPH_FRAMES, SONOGRAPH_MFCC};
use crate::nn::{
    bce_with_logits, load_params, save_params, sigmoid, Adamax, Init, LayerSpec, Mode, Module, Optimizer, Scalar,
    Sequential, Tensor,
};
use crate::pipeline::{labels, LabeledClip};
use crate::rng::{self, hash_str};

pub const CNN_INPUT_SHAPE: [usize; 3] = [1, SONOGRAPH_MFCC, SONOGRAPH_FRAMES];

/// Filter counts and kernel sizes of the six convolutions, the hidden dense
/// width and the dropout rate applied after every ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnArchitecture {
    pub filters: [usize; 6],
    pub kernels: [usize; 6],
    pub dense: usize,
    pub dropout: f64,
}

impl Default for CnnArchitecture {
    fn default() -> Self {
        Self::full()
    }
}

impl CnnArchitecture {
    /// Full-size network. The fifth convolution has 256 filters: that is what
    /// its parameter count (590,080) and output (8×32×256) require, and what
    /// the sixth convolution's input implies.
    pub fn full() -> Self {
        Self {
            filters: [32, 64, 256, 256, 256, 512],
            kernels: [7, 5, 3, 3, 3, 3],
            dense: 256,
            dropout: 0.2,
        }
    }

    /// Width-reduced clone for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            filters: [4, 4, 8, 8, 8, 16],
            dense: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.iter().chain(&self.kernels).any(|&v| v == 0) || self.dense == 0 {
            return Err(Error::InvalidArgument("CNN widths and kernels must be positive".into()));
        }
        LayerSpec::Dropout { rate: self.dropout }.validate()
    }

    /// Layer list; pooling follows convolutions 2 to 5.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut channels = CNN_INPUT_SHAPE[0];
        let act = |specs: &mut Vec<LayerSpec>| {
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dropout { rate: self.dropout });
        };
        for (i, (&filters, &kernel)) in self.filters.iter().zip(&self.kernels).enumerate() {
            specs.push(LayerSpec::Conv2d {
                in_channels: channels,
                filters,
                kernel,
                stride: 1,
            });
            act(&mut specs);
            if (1..=4).contains(&i) {
                specs.push(LayerSpec::Maxpool2d { window: 2, stride: 2 });
            }
            channels = filters;
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::Dense {
            inputs: channels,
            outputs: self.dense,
        });
        act(&mut specs);
        specs.push(LayerSpec::Dense {
            inputs: self.dense,
            outputs: 1,
        });
        specs
    }

    /// Trainable parameters of each weighted layer, in order.
    pub fn param_counts(&self) -> Vec<usize> {
        self.layer_specs()
            .iter()
            .map(LayerSpec::param_count)
            .filter(|&c| c > 0)
            .collect()
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Sequential<T>> {
        self.validate()?;
        Sequential::from_specs(&self.layer_specs(), Init::He, &mut rng::seeded(seed, &[0xc0a1]))
    }
}

/// Per-coefficient standardisation fitted on the training sonographs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SonographNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SonographNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; SONOGRAPH_MFCC],
            std: vec![1.0; SONOGRAPH_MFCC],
        }
    }

    pub fn fit(images: &[&Array2<f64>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("sonograph set"));
        }
        let mut mean = vec![0.0; SONOGRAPH_MFCC];
        let mut sq = vec![0.0; SONOGRAPH_MFCC];
        let mut n = 0.0;
        for im in images {
            check_image(im)?;
            for (c, row) in im.axis_iter(Axis(0)).enumerate() {
                mean[c] += row.sum();
                sq[c] += row.iter().map(|v| v * v).sum::<f64>();
            }
            n += SONOGRAPH_FRAMES as f64;
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardised `[1, 64, 256]` network input.
    pub fn apply(&self, image: &Array2<f64>) -> Result<Tensor<f32>> {
        check_image(image)?;
        let mut out = Array2::<f32>::zeros(image.raw_dim());
        for (c, (mut o, row)) in out.outer_iter_mut().zip(image.outer_iter()).enumerate() {
            o.zip_mut_with(&row, |o, &v| *o = ((v - self.mean[c]) / self.std[c]) as f32);
        }
        Ok(out.into_shape_with_order(IxDyn(&CNN_INPUT_SHAPE)).expect("sizes match"))
    }
}

fn check_image(image: &Array2<f64>) -> Result<()> {
    if image.dim() != (SONOGRAPH_MFCC, SONOGRAPH_FRAMES) {
        return Err(Error::Shape(format!(
            "sonograph must be {SONOGRAPH_MFCC}×{SONOGRAPH_FRAMES}, got {:?}",
            image.dim()
        )));
    }
    Ok(())
}

pub fn sonograph_matrix(s: &Sonograph) -> Result<Array2<f64>> {
    Array2::from_shape_vec(
        (SONOGRAPH_MFCC, SONOGRAPH_FRAMES),
        s.values.iter().map(|&v| f64::from(v)).collect(),
    )
    .map_err(|e| Error::Shape(format!("sonograph values: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Copies of each positive record.
    pub upsample_ratio: u32,
    pub augment: AugmentSpec,
    /// Add one augmented sonograph next to every plain one.
    pub augmented_copies: bool,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 16,
            upsample_ratio: 4,
            augment: AugmentSpec::default(),
            augmented_copies: true,
        }
    }
}

impl CnnTrainConfig {
    /// Desk-scale run for the toy architecture. The narrow network needs a
    /// larger step than the full one to move within 25 epochs.
    pub fn toy() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.upsample_ratio == 0 {
            return Err(Error::InvalidArgument(
                "learning rate, epochs, batch size and upsample ratio must be positive".into(),
            ));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

pub struct CnnModel {
    pub arch: CnnArchitecture,
    pub norm: SonographNorm,
    pub net: Sequential<f32>,
}

/// Stored next to the weights as `<weights>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSidecar {
    pub arch: CnnArchitecture,
    pub norm: SonographNorm,
    pub epoch: Option<usize>,
    pub val_auc: Option<f64>,
    pub config_hash: Option<String>,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn build_cnn(arch: &CnnArchitecture, seed: u64) -> Result<CnnModel> {
    Ok(CnnModel {
        arch: *arch,
        norm: SonographNorm::identity(),
        net: arch.build(seed)?,
    })
}

impl CnnModel {
    pub fn logit_image(&mut self, image: &Array2<f64>) -> Result<f64> {
        let x = self.norm.apply(image)?;
        let z = self.net.forward(&x, Mode::Eval, &mut rng::seeded(0, &[]))?;
        Ok(f64::from(z[0]))
    }

    pub fn predict_image(&mut self, image: &Array2<f64>) -> Result<f64> {
        Ok(sigmoid(self.logit_image(image)?))
    }

    /// Eval-mode probability for one sonograph.
    pub fn predict(&mut self, sonograph: &Sonograph) -> Result<f64> {
        self.predict_image(&sonograph_matrix(sonograph)?)
    }

    pub fn save(&self, weights: &Path, sidecar: &CnnSidecar) -> Result<()> {
        save_params(weights, &self.net.params())?;
        let side = sidecar_path(weights);
        fs::write(&side, crate::eval::to_json_full_precision(sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(weights: &Path) -> Result<(Self, CnnSidecar)> {
        let side = sidecar_path(weights);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: CnnSidecar = serde_json::from_str(&text)?;
        let mut model = CnnModel {
            arch: sidecar.arch,
            norm: sidecar.norm.clone(),
            net: sidecar.arch.build(0)?,
        };
        load_params(weights, &mut model.net.params_mut())?;
        Ok((model, sidecar))
    }
}

/// Plain sonograph of a clip.
pub fn clip_sonograph(builder: &SonographBuilder, clip: &LabeledClip) -> Result<Array2<f64>> {
    builder.build(&clip.audio, &clip.segments, None)
}

/// Training images: for each record copy from the upsampling plan, its
/// plain sonograph plus, optionally, one augmented with a stream keyed by
/// (record id, copy index). Returns distinct images and the index list.
fn training_images(
    clips: &[LabeledClip],
    cfg: &CnnTrainConfig,
    seed: u64,
) -> Result<(Vec<Array2<f64>>, Vec<(usize, bool)>)> {
    let builder = SonographBuilder::new()?;
    let ys = labels(clips)?;
    let plan = upsample_plan(&ys, cfg.upsample_ratio, seed)?;
    let mut images: Vec<Array2<f64>> = Vec::new();
    let mut plain: Vec<Option<usize>> = vec![None; clips.len()];
    let mut items = Vec::new();
    let mut order = plan;
    order.sort_unstable();
    for (i, copy) in order {
        let clip = &clips[i];
        let p = match plain[i] {
            Some(p) => p,
            None => {
                images.push(clip_sonograph(&builder, clip)?);
                plain[i] = Some(images.len() - 1);
                images.len() - 1
            }
        };
        items.push((p, ys[i]));
        if cfg.augmented_copies {
            let mut r = rng::seeded(seed, &[0xa06, hash_str(&clip.id), u64::from(copy)]);
            images.push(builder.build(&clip.audio, &clip.segments, Some((&cfg.augment, &mut r)))?);
            items.push((images.len() - 1, ys[i]));
        }
    }
    Ok((images, items))
}

fn scores(model: &mut CnnModel, inputs: &[Tensor<f32>]) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| {
            let z = model.net.forward(x, Mode::Eval, &mut rng::seeded(0, &[]))?;
            Ok(sigmoid(f64::from(z[0])))
        })
        .collect()
}

fn snapshot(net: &Sequential<f32>) -> Vec<Tensor<f32>> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(net: &mut Sequential<f32>, values: &[Tensor<f32>]) {
    for (p, v) in net.params_mut().into_iter().zip(values) {
        p.value.assign(v);
    }
}

/// Train from screened clips. Sonographs are built once; each epoch visits
/// the training images in a seeded order, steps Adamax per mini-batch on the
/// mean BCE, then scores the validation clips. The returned model holds the
/// weights of the first epoch reaching the best validation AUC.
pub fn train_cnn(
    train: &[LabeledClip],
    validation: &[LabeledClip],
    arch: &CnnArchitecture,
    cfg: &CnnTrainConfig,
    seed: u64,
) -> Result<(CnnModel, CnnHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let train_labels = labels(train)?;
    if train_labels.iter().all(|&l| l) || train_labels.iter().all(|&l| !l) {
        return Err(Error::SingleClassTraining);
    }
    let val_labels = labels(validation)?;
    if val_labels.iter().all(|&l| l) || val_labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }

    let (images, mut items) = training_images(train, cfg, seed)?;
    let norm = SonographNorm::fit(&images.iter().collect::<Vec<_>>())?;
    let inputs = images.iter().map(|im| norm.apply(im)).collect::<Result<Vec<_>>>()?;
    drop(images);
    let builder = SonographBuilder::new()?;
    let val_inputs = validation
        .iter()
        .map(|c| norm.apply(&clip_sonograph(&builder, c)?))
        .collect::<Result<Vec<_>>>()?;

    let mut model = CnnModel {
        arch: *arch,
        norm,
        net: arch.build(seed)?,
    };
    let mut opt = Adamax::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        items.shuffle(&mut rng::seeded(seed, &[0x5f, epoch as u64]));
        let mut dropout = rng::seeded(seed, &[0xd0, epoch as u64]);
        let mut total = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &(i, y) in batch {
                let z = model.net.forward(&inputs[i], Mode::Train, &mut dropout)?;
                let (loss, g) = bce_with_logits(f64::from(z[0]), if y { 1.0 } else { 0.0 });
                total += loss;
                model
                    .net
                    .backward(&Tensor::from_elem(IxDyn(&[1]), (g * scale) as f32))?;
            }
            opt.step(&mut model.net.params_mut())?;
            model.net.zero_grad();
        }
        let val_auc = auc(&scores(&mut model, &val_inputs)?, &val_labels)?;
        let train_loss = total / items.len() as f64;
        log::info!("epoch {epoch}: loss {train_loss:.5}, validation AUC {val_auc:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        if best.as_ref().is_none_or(|b| val_auc > b.1) {
            best = Some((epoch, val_auc, snapshot(&model.net)));
        }
    }
    let (best_epoch, best_val_auc, weights) = best.expect("at least one epoch");
    restore(&mut model.net, &weights);
    Ok((
        model,
        CnnHistory {
            epochs: history,
            best_epoch,
            best_val_auc,
        },
    ))
}

/// Validation-style scoring of clips with a trained model.
pub fn predict_clips(model: &mut CnnModel, clips: &[LabeledClip]) -> Result<Vec<f64>> {
    let builder = SonographBuilder::new()?;
    clips
        .iter()
        .map(|c| model.predict_image(&clip_sonograph(&builder, c)?))
        .collect()
}
