//! Slice-wise segmentation: a per-patch linear decoder whose logits are
//! upsampled bilinearly to the slice resolution, trained with a mixed
//! cross-entropy and soft-Dice loss.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_disjoint, DownstreamModel, HeadKind, VolumeSlices};
use crate::augment::{downstream_augment, DownstreamAugConfig};
use crate::autodiff::{Bound, Graph, Resampler, Scalar, TensorTable, Var};
use crate::error::{Error, Result};
use crate::eval::metrics::{class_mask, dice, hd95};
use crate::image::{Image, Mask};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{fnv1a, rng_for};
use crate::slices::{extract_slices, SliceConfig};
use crate::vit::forward_features;
use crate::volume::{LabelVolume, Modality, SubjectRecord, Volume};

const SHUFFLE_STREAM: u64 = 0x5E65;
const AUG_STREAM: u64 = 0x5A06;

/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub lr: f64,
    pub head_lr_scale: f64,
    pub adamw: AdamWConfig,
    pub epochs: usize,
    pub batch_slices: usize,
    pub patience: usize,
    pub frozen_encoder: bool,
    pub augment: DownstreamAugConfig,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            lr: 1e-4,
            head_lr_scale: 1.0,
            adamw: AdamWConfig::default(),
            epochs: 20,
            batch_slices: 8,
            patience: 5,
            frozen_encoder: false,
            augment: DownstreamAugConfig::default(),
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.head_lr_scale >= 0.0) {
            return Err(Error::Config("segmentation learning rates must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_slices == 0 {
            return Err(Error::Config("segmentation epochs and batch_slices must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean foreground Dice over the validation slices.
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct SegRun {
    pub model: DownstreamModel,
    pub trace: Vec<SegEpochRecord>,
    pub best_epoch: usize,
}

fn require_decoder(model: &DownstreamModel) -> Result<usize> {
    match model.head {
        HeadKind::SegDecoder { n_classes } => Ok(n_classes),
        other => Err(Error::Config(format!("expected a segmentation decoder, found {other:?}"))),
    }
}

/// Upsampled decoder logits `[n_views * out_h * out_w, n_classes]`.
pub fn decoder_logits<T: Scalar>(
    g: &mut Graph<T>,
    model: &DownstreamModel,
    enc: &Bound,
    head: &Bound,
    images: &[Image],
    out: (usize, usize),
) -> Result<Var> {
    let f = forward_features(g, &model.vit, enc, images)?;
    let y = g.matmul(f.patches, head.get("decoder.weight")?)?;
    let y = g.add_bias(y, head.get("decoder.bias")?)?;
    let (gh, gw) = f.grid;
    let map = Arc::new(Resampler::bilinear_grid(gh, gw, out.0, out.1));
    let mut views = Vec::with_capacity(images.len());
    for v in 0..images.len() {
        let rows = g.slice(y, 0, v * gh * gw, gh * gw)?;
        views.push(g.resample(rows, map.clone())?);
    }
    if views.len() == 1 {
        return Ok(views[0]);
    }
    g.concat(&views, 0)
}

fn softmax_rows(logits: &[f32], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let e: Vec<f64> = row.iter().map(|&l| (l as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Per-pixel class probabilities `[out_h * out_w * n_classes]`, row-major.
pub fn segment_slice_at(model: &DownstreamModel, image: &Image, out: (usize, usize)) -> Result<Vec<f64>> {
    let c = require_decoder(model)?;
    let mut g = Graph::<f32>::new();
    let enc = Bound::bind(&mut g, &model.encoder, "", false);
    let head = Bound::bind(&mut g, &model.head_params, "", false);
    let logits = decoder_logits(&mut g, model, &enc, &head, std::slice::from_ref(image), out)?;
    Ok(softmax_rows(g.value(logits), c))
}

/// Probabilities at the input resolution.
pub fn segment_slice(model: &DownstreamModel, image: &Image) -> Result<Vec<f64>> {
    segment_slice_at(model, image, (image.height, image.width))
}

pub fn argmax_rows(probs: &[f64], c: usize) -> Vec<u8> {
    probs
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// `0.5 * CE + 0.5 * (1 - mean_c softDice_c)` over `[pixels, n_classes]`
/// probabilities.
pub fn seg_loss(probs: &[f64], target: &[u8], n_classes: usize) -> Result<f64> {
    if probs.len() != target.len() * n_classes || target.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} pixels and {n_classes} classes",
            probs.len(),
            target.len()
        )));
    }
    let mut ce = 0.0;
    let mut inter = vec![0.0; n_classes];
    let mut psum = vec![0.0; n_classes];
    let mut tsum = vec![0.0; n_classes];
    for (row, &t) in probs.chunks_exact(n_classes).zip(target) {
        let t = t as usize;
        if t >= n_classes {
            return Err(Error::ShapeMismatch(format!("label {t} >= {n_classes}")));
        }
        ce -= row[t].max(1e-300).ln();
        inter[t] += row[t];
        tsum[t] += 1.0;
        for (s, p) in psum.iter_mut().zip(row) {
            *s += p;
        }
    }
    ce /= target.len() as f64;
    let soft_dice: f64 = (0..n_classes)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (psum[c] + tsum[c] + DICE_EPS))
        .sum::<f64>()
        / n_classes as f64;
    Ok(0.5 * ce + 0.5 * (1.0 - soft_dice))
}

/// Differentiable [`seg_loss`] on logits `[pixels, n_classes]`.
pub fn seg_loss_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[u8], n_classes: usize) -> Result<Var> {
    let m = target.len();
    if g.shape(logits) != [m, n_classes] || m == 0 {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {m} pixels and {n_classes} classes",
            g.shape(logits)
        )));
    }
    let mut onehot = vec![T::zero(); m * n_classes];
    let mut tsum = vec![T::from_f64_lossy(DICE_EPS); n_classes];
    for (i, &t) in target.iter().enumerate() {
        let t = t as usize;
        if t >= n_classes {
            return Err(Error::ShapeMismatch(format!("label {t} >= {n_classes}")));
        }
        onehot[i * n_classes + t] = T::one();
        tsum[t] = tsum[t] + T::one();
    }
    let onehot = g.constant(&[m, n_classes], onehot);
    let tsum = g.constant(&[n_classes], tsum);

    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let picked = g.sum(picked);
    let ce = g.scale(picked, T::from_f64_lossy(-1.0 / m as f64));

    let p = g.softmax(logits)?;
    let pt = g.mul(p, onehot)?;
    let inter = g.mean_rows(pt)?;
    let num = g.scale(inter, T::from_f64_lossy(2.0 * m as f64));
    let num = g.add_scalar(num, T::from_f64_lossy(DICE_EPS));
    let psum = g.mean_rows(p)?;
    let psum = g.scale(psum, T::from_f64_lossy(m as f64));
    let den = g.add(psum, tsum)?;
    let dice = g.div(num, den)?;
    let dice = g.mean(dice);

    let a = g.scale(ce, T::from_f64_lossy(0.5));
    let b = g.scale(dice, T::from_f64_lossy(-0.5));
    let loss = g.add(a, b)?;
    Ok(g.add_scalar(loss, T::from_f64_lossy(0.5)))
}

/// Predicted labels on the subject's native grid. Slices not selected by
/// `cfg.num_slices` stay background.
pub fn segment_subject(model: &DownstreamModel, subject: &SubjectRecord, cfg: &SliceConfig) -> Result<LabelVolume> {
    let c = require_decoder(model)?;
    let dims = subject.dims()?;
    let mut data = vec![0u8; dims.len()];
    for s in extract_slices(subject, cfg)? {
        let probs = segment_slice_at(model, &s.pixels, (dims.height, dims.width))?;
        let n = dims.slice_len();
        data[s.slice_index * n..(s.slice_index + 1) * n].copy_from_slice(&argmax_rows(&probs, c));
    }
    Ok(LabelVolume { dims, data })
}

/// A label volume as a float volume on `reference`'s grid and spacing, for
/// NIfTI output.
pub fn assemble_volume(labels: &LabelVolume, reference: &Volume) -> Result<Volume> {
    if labels.dims != reference.dims {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs reference {:?}",
            labels.dims, reference.dims
        )));
    }
    Volume::new(
        labels.dims,
        labels.data.iter().map(|&l| l as f32).collect(),
        reference.spacing,
        reference.modality,
        reference.subject_id.clone(),
    )
}

/// Per-subject Dice and HD95 (mm) for each evaluated class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEval {
    pub classes: Vec<u8>,
    pub subjects: Vec<String>,
    /// `[subject][class]`
    pub dice: Vec<Vec<f64>>,
    /// `[subject][class]`; `None` when exactly one of the two masks is empty.
    pub hd95: Vec<Vec<Option<f64>>>,
}

impl SegEval {
    /// Mean Dice of one class index over subjects.
    pub fn mean_dice(&self, k: usize) -> f64 {
        self.dice.iter().map(|d| d[k]).sum::<f64>() / self.dice.len() as f64
    }

    /// Mean over subjects of the per-subject class-averaged Dice.
    pub fn mean_dice_all(&self) -> f64 {
        (0..self.classes.len()).map(|k| self.mean_dice(k)).sum::<f64>() / self.classes.len() as f64
    }

    /// Mean HD95 of one class over subjects where it is defined, and the
    /// number of undefined cases.
    pub fn mean_hd95(&self, k: usize) -> (f64, usize) {
        let defined: Vec<f64> = self.hd95.iter().filter_map(|h| h[k]).collect();
        let missing = self.hd95.len() - defined.len();
        (defined.iter().sum::<f64>() / defined.len().max(1) as f64, missing)
    }
}

pub fn evaluate_segmentation(
    model: &DownstreamModel,
    subjects: &[SubjectRecord],
    cfg: &SliceConfig,
    classes: &[u8],
) -> Result<(SegEval, BTreeMap<String, LabelVolume>)> {
    let mut eval = SegEval {
        classes: classes.to_vec(),
        subjects: Vec::new(),
        dice: Vec::new(),
        hd95: Vec::new(),
    };
    let mut preds = BTreeMap::new();
    for s in subjects {
        let gt = s
            .seg_mask
            .as_ref()
            .ok_or_else(|| Error::InvalidVolume(format!("subject {} has no mask", s.subject_id)))?;
        let pred = segment_subject(model, s, cfg)?;
        let dims = [gt.dims.depth, gt.dims.height, gt.dims.width];
        let spacing = s
            .volumes
            .get(&Modality::T1)
            .or_else(|| s.volumes.values().next())
            .map(|v| [v.spacing[2] as f64, v.spacing[0] as f64, v.spacing[1] as f64])
            .unwrap_or([1.0; 3]);
        let mut d_row = Vec::new();
        let mut h_row = Vec::new();
        for &c in classes {
            d_row.push(dice(&pred.data, &gt.data, c)?);
            let a = class_mask(&pred.data, c);
            let b = class_mask(&gt.data, c);
            h_row.push(match hd95(&a, &b, &dims, &spacing) {
                Ok(h) => Some(h),
                Err(Error::EmptyMask(_)) => None,
                Err(e) => return Err(e),
            });
        }
        eval.subjects.push(s.subject_id.clone());
        eval.dice.push(d_row);
        eval.hd95.push(h_row);
        preds.insert(s.subject_id.clone(), pred);
    }
    Ok((eval, preds))
}

fn training_slices(volumes: &[VolumeSlices]) -> Result<Vec<(&Image, &Mask, &str)>> {
    let mut out = Vec::new();
    for v in volumes {
        for (img, m) in v.images.iter().zip(&v.masks) {
            let m = m
                .as_ref()
                .ok_or_else(|| Error::InvalidVolume(format!("subject {} has no mask", v.subject_id)))?;
            out.push((img, m, v.subject_id.as_str()));
        }
    }
    Ok(out)
}

/// Foreground Dice per class over all validation pixels, averaged.
fn val_dice(model: &DownstreamModel, val: &[(&Image, &Mask, &str)]) -> Result<f64> {
    let c = model.n_classes();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (img, m, _) in val {
        pred.extend(argmax_rows(&segment_slice(model, img)?, c));
        gt.extend_from_slice(&m.data);
    }
    let mut total = 0.0;
    for k in 1..c as u8 {
        total += dice(&pred, &gt, k)?;
    }
    Ok(total / (c - 1) as f64)
}

fn accumulate(acc: &mut [Vec<f32>], grads: Vec<Vec<f32>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
    }
}

fn zeros_like(t: &TensorTable) -> Vec<Vec<f32>> {
    t.iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
}

/// Fine-tunes encoder and decoder on every sampled slice of `train`, with
/// early stopping on validation foreground Dice.
pub fn finetune_segmentation(
    train: &[VolumeSlices],
    val: &[VolumeSlices],
    held_out: &BTreeSet<String>,
    init: &DownstreamModel,
    cfg: &SegConfig,
) -> Result<SegRun> {
    cfg.validate()?;
    let c = require_decoder(init)?;
    check_disjoint(train, val, held_out)?;
    let train_slices = training_slices(train)?;
    let val_slices = training_slices(val)?;
    if train_slices.is_empty() || val_slices.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut model = init.clone();
    let mut enc_opt = AdamW::new(&model.encoder);
    let mut head_opt = AdamW::new(&model.head_params);
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, TensorTable, TensorTable)> = None;
    let mut order: Vec<usize> = (0..train_slices.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(&[cfg.seed, SHUFFLE_STREAM, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_slices) {
            let mut images = Vec::with_capacity(batch.len());
            let mut target = Vec::new();
            for &i in batch {
                let (img, m, id) = train_slices[i];
                let mut rng = rng_for(&[cfg.seed, AUG_STREAM, epoch as u64, fnv1a(id.as_bytes()), i as u64]);
                let (img, m) = downstream_augment(img, Some(m), &cfg.augment, &mut rng);
                images.push(img);
                target.extend(m.expect("mask passed through").data);
            }
            let (h, w) = (images[0].height, images[0].width);
            let mut g = Graph::<f32>::new();
            let (enc, head) = model.bind(&mut g, cfg.frozen_encoder);
            let logits = decoder_logits(&mut g, &model, &enc, &head, &images, (h, w))?;
            let loss = seg_loss_graph(&mut g, logits, &target, c)?;
            g.backward(loss)?;
            epoch_loss += g.value(loss)[0] as f64 * batch.len() as f64;
            if !cfg.frozen_encoder {
                let mut enc_g = zeros_like(&model.encoder);
                accumulate(&mut enc_g, enc.grads(&g, ""));
                enc_opt.step(&mut model.encoder, &enc_g, cfg.lr, &cfg.adamw)?;
            }
            head_opt.step(&mut model.head_params, &head.grads(&g, ""), cfg.lr * cfg.head_lr_scale, &cfg.adamw)?;
        }
        let score = val_dice(&model, &val_slices)?;
        trace.push(SegEpochRecord {
            epoch,
            train_loss: epoch_loss / train_slices.len() as f64,
            val_dice: score,
        });
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.encoder.clone(), model.head_params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, encoder, head_params) = best.expect("at least one epoch ran");
    model.encoder = encoder;
    model.head_params = head_params;
    Ok(SegRun {
        model,
        trace,
        best_epoch,
    })
}
