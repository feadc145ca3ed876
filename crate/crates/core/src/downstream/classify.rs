//! Volume-level classification: slice class tokens are mean-pooled, then a
//! linear layer and softmax.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_disjoint, DownstreamModel, HeadKind, VolumeSlices};
use crate::augment::{downstream_augment, DownstreamAugConfig};
use crate::autodiff::{Bound, Graph, Scalar, TensorTable, Var};
use crate::error::{Error, Result};
use crate::eval::metrics::auroc;
use crate::image::Image;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{fnv1a, rng_for};
use crate::slices::SliceConfig;
use crate::vit::forward_features;
use crate::volume::SubjectRecord;

const SHUFFLE_STREAM: u64 = 0xC1A5;
const AUG_STREAM: u64 = 0xA06C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    /// Multiplier on `lr` for the freshly initialised linear head.
    pub head_lr_scale: f64,
    pub adamw: AdamWConfig,
    pub epochs: usize,
    pub batch_subjects: usize,
    /// Epochs without a new best validation score before stopping.
    pub patience: usize,
    /// Linear probe: the encoder is not updated and pooled features are
    /// computed once, without augmentation.
    pub frozen_encoder: bool,
    pub augment: DownstreamAugConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 1e-4,
            head_lr_scale: 1.0,
            adamw: AdamWConfig::default(),
            epochs: 30,
            batch_subjects: 8,
            patience: 5,
            frozen_encoder: false,
            augment: DownstreamAugConfig::default(),
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.head_lr_scale >= 0.0) {
            return Err(Error::Config("classifier learning rates must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_subjects == 0 {
            return Err(Error::Config("classifier epochs and batch_subjects must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    /// Selection score: validation AUROC, or minus the validation loss when
    /// the validation set has one class.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    /// Parameters from the best validation epoch.
    pub model: DownstreamModel,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn linear_head<T: Scalar>(g: &mut Graph<T>, head: &Bound, x: Var) -> Result<Var> {
    let y = g.matmul(x, head.get("classifier.weight")?)?;
    g.add_bias(y, head.get("classifier.bias")?)
}

fn pooled_features<T: Scalar>(g: &mut Graph<T>, model: &DownstreamModel, enc: &Bound, images: &[Image]) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::NoSlices("(empty slice list)".into()));
    }
    let f = forward_features(g, &model.vit, enc, images)?;
    let pooled = g.mean_rows(f.cls)?;
    g.reshape(pooled, &[1, model.vit.embed_dim])
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn require_classifier(model: &DownstreamModel) -> Result<usize> {
    match model.head {
        HeadKind::Classifier { n_classes } => Ok(n_classes),
        other => Err(Error::Config(format!("expected a classifier head, found {other:?}"))),
    }
}

/// Mean-pooled class embedding `[embed_dim]` of a slice stack.
pub fn pooled_embedding(model: &DownstreamModel, images: &[Image]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let enc = Bound::bind(&mut g, &model.encoder, "", false);
    let pooled = pooled_features(&mut g, model, &enc, images)?;
    Ok(g.value(pooled).to_vec())
}

fn head_probs(head: &TensorTable, pooled: &[f32], n_classes: usize) -> Result<Vec<f64>> {
    let w = head.expect("classifier.weight", &[pooled.len(), n_classes])?;
    let b = head.expect("classifier.bias", &[n_classes])?;
    let logits: Vec<f32> = (0..n_classes)
        .map(|c| b.values[c] + pooled.iter().enumerate().map(|(i, x)| x * w.values[i * n_classes + c]).sum::<f32>())
        .collect();
    Ok(softmax_f64(&logits))
}

/// Class probabilities of one preprocessed volume.
pub fn classify_volume(model: &DownstreamModel, volume: &VolumeSlices) -> Result<Vec<f64>> {
    let n_classes = require_classifier(model)?;
    if volume.images.is_empty() {
        return Err(Error::NoSlices(volume.subject_id.clone()));
    }
    let pooled = pooled_embedding(model, &volume.images)?;
    head_probs(&model.head_params, &pooled, n_classes)
}

/// Extracts the subject's slices with `cfg`, then [`classify_volume`].
pub fn classify_subject(model: &DownstreamModel, subject: &SubjectRecord, cfg: &SliceConfig) -> Result<Vec<f64>> {
    classify_volume(model, &VolumeSlices::from_subject(subject, cfg)?)
}

/// `subject_id → class probabilities`.
pub fn predict_volumes(model: &DownstreamModel, volumes: &[VolumeSlices]) -> Result<BTreeMap<String, Vec<f64>>> {
    volumes
        .iter()
        .map(|v| Ok((v.subject_id.clone(), classify_volume(model, v)?)))
        .collect()
}

pub fn write_predictions(path: &Path, preds: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn labels_of(volumes: &[VolumeSlices], n_classes: usize) -> Result<Vec<usize>> {
    volumes
        .iter()
        .map(|v| match v.label {
            Some(l) if l < n_classes => Ok(l),
            Some(l) => Err(Error::DegenerateLabels(format!(
                "subject {} has label {l} >= {n_classes}",
                v.subject_id
            ))),
            None => Err(Error::DegenerateLabels(format!("subject {} has no label", v.subject_id))),
        })
        .collect()
}

/// Validation loss and AUROC (class 1 against the rest).
fn validate(model: &DownstreamModel, val: &[VolumeSlices], cached: Option<&[Vec<f32>]>) -> Result<(f64, Option<f64>)> {
    let n_classes = model.n_classes();
    let labels = labels_of(val, n_classes)?;
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(val.len());
    for (i, v) in val.iter().enumerate() {
        let p = match cached {
            Some(c) => head_probs(&model.head_params, &c[i], n_classes)?,
            None => classify_volume(model, v)?,
        };
        loss -= p[labels[i]].max(1e-12).ln();
        scores.push(p[1]);
    }
    let binary: Vec<usize> = labels.iter().map(|&l| (l == 1) as usize).collect();
    let auc = match auroc(&scores, &binary) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok((loss / val.len().max(1) as f64, auc))
}

fn accumulate(acc: &mut [Vec<f32>], grads: Vec<Vec<f32>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
    }
}

fn zeros_like(t: &TensorTable) -> Vec<Vec<f32>> {
    t.iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
}

/// Cross-entropy fine-tuning with AdamW and early stopping on validation
/// AUROC. Returns the best-validation parameters.
pub fn finetune_classifier(
    train: &[VolumeSlices],
    val: &[VolumeSlices],
    held_out: &BTreeSet<String>,
    init: &DownstreamModel,
    cfg: &ClassifierConfig,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    let n_classes = require_classifier(init)?;
    check_disjoint(train, val, held_out)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let labels = labels_of(train, n_classes)?;
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::DegenerateLabels("training set has a single class".into()));
    }

    let mut model = init.clone();
    let mut enc_opt = AdamW::new(&model.encoder);
    let mut head_opt = AdamW::new(&model.head_params);
    let (train_cache, val_cache) = if cfg.frozen_encoder {
        let emb = |vs: &[VolumeSlices]| -> Result<Vec<Vec<f32>>> {
            vs.iter().map(|v| pooled_embedding(&model, &v.images)).collect()
        };
        (Some(emb(train)?), Some(emb(val)?))
    } else {
        (None, None)
    };

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, TensorTable, TensorTable)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(&[cfg.seed, SHUFFLE_STREAM, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_subjects) {
            let weight = 1.0 / batch.len() as f64;
            let mut enc_g = zeros_like(&model.encoder);
            let mut head_g = zeros_like(&model.head_params);
            if let Some(cache) = &train_cache {
                let d = model.vit.embed_dim;
                let mut g = Graph::<f32>::new();
                let head = Bound::bind(&mut g, &model.head_params, "", true);
                let rows: Vec<f32> = batch.iter().flat_map(|&i| cache[i].iter().copied()).collect();
                let x = g.constant(&[batch.len(), d], rows);
                let logits = linear_head(&mut g, &head, x)?;
                let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let loss = g.cross_entropy_with_logits(logits, &targets)?;
                g.backward(loss)?;
                epoch_loss += g.value(loss)[0] as f64 * batch.len() as f64;
                head_g = head.grads(&g, "");
            } else {
                for &i in batch {
                    let v = &train[i];
                    let mut rng = rng_for(&[cfg.seed, AUG_STREAM, epoch as u64, fnv1a(v.subject_id.as_bytes())]);
                    let images: Vec<Image> = v
                        .images
                        .iter()
                        .map(|im| downstream_augment(im, None, &cfg.augment, &mut rng).0)
                        .collect();
                    let mut g = Graph::<f32>::new();
                    let (enc, head) = model.bind(&mut g, false);
                    let pooled = pooled_features(&mut g, &model, &enc, &images)?;
                    let logits = linear_head(&mut g, &head, pooled)?;
                    let ce = g.cross_entropy_with_logits(logits, &[labels[i]])?;
                    epoch_loss += g.value(ce)[0] as f64;
                    let loss = g.scale(ce, weight as f32);
                    g.backward(loss)?;
                    accumulate(&mut enc_g, enc.grads(&g, ""));
                    accumulate(&mut head_g, head.grads(&g, ""));
                }
                enc_opt.step(&mut model.encoder, &enc_g, cfg.lr, &cfg.adamw)?;
            }
            head_opt.step(&mut model.head_params, &head_g, cfg.lr * cfg.head_lr_scale, &cfg.adamw)?;
        }

        let (val_loss, val_auroc) = validate(&model, val, val_cache.as_deref())?;
        let score = val_auroc.unwrap_or(-val_loss);
        trace.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_auroc,
            score,
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
    Ok(ClassifierRun {
        model,
        trace,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::*;

    fn slice_cfg() -> SliceConfig {
        SliceConfig {
            num_slices: 3,
            target_side: 32,
            ..Default::default()
        }
    }

    fn model(seed: u64) -> DownstreamModel {
        DownstreamModel::random(&tiny_vit(), HeadKind::Classifier { n_classes: 2 }, seed, seed).unwrap()
    }

    #[test]
    fn probabilities_and_duplication() {
        let m = model(3);
        let v = VolumeSlices::from_subject(&phantoms(1, 4)[0], &slice_cfg()).unwrap();
        let p = classify_volume(&m, &v).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut doubled = v.clone();
        doubled.images.extend(v.images.clone());
        let q = classify_volume(&m, &doubled).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(classify_volume(&m, &v).unwrap(), p);
        let empty = VolumeSlices {
            images: vec![],
            ..v
        };
        assert!(matches!(classify_volume(&m, &empty), Err(Error::NoSlices(_))));
    }

    #[test]
    fn degenerate_and_leaky_inputs() {
        let vs = prepare_all_tiny(6);
        let cfg = ClassifierConfig {
            epochs: 1,
            ..Default::default()
        };
        let same: Vec<VolumeSlices> = vs.iter().filter(|v| v.label == Some(0)).cloned().collect();
        let none = BTreeSet::new();
        assert!(matches!(
            finetune_classifier(&same[..2], &vs[4..], &none, &model(0), &cfg),
            Err(Error::DegenerateLabels(_))
        ));
        assert!(matches!(
            finetune_classifier(&vs[..4], &vs[3..], &none, &model(0), &cfg),
            Err(Error::LeakageDetected(_))
        ));
        let test: BTreeSet<String> = [vs[5].subject_id.clone()].into();
        assert!(matches!(
            finetune_classifier(&vs[..4], &vs[4..], &test, &model(0), &cfg),
            Err(Error::LeakageDetected(_))
        ));
    }

    fn prepare_all_tiny(n: usize) -> Vec<VolumeSlices> {
        super::super::prepare_all(&phantoms(n, 7), &slice_cfg()).unwrap()
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let vs = prepare_all_tiny(6);
        let cfg = ClassifierConfig {
            epochs: 10,
            batch_subjects: 4,
            patience: 100,
            augment: DownstreamAugConfig::none(),
            ..Default::default()
        };
        let run = finetune_classifier(&vs[..4], &vs[4..], &BTreeSet::new(), &model(1), &cfg).unwrap();
        assert_eq!(run.trace.len(), 10);
        let first = run.trace[0].train_loss;
        let last = run.trace[9].train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn early_stopping_halts_after_patience() {
        let vs = prepare_all_tiny(6);
        let cfg = ClassifierConfig {
            lr: 0.0,
            epochs: 50,
            patience: 3,
            augment: DownstreamAugConfig::none(),
            ..Default::default()
        };
        let run = finetune_classifier(&vs[..4], &vs[4..], &BTreeSet::new(), &model(2), &cfg).unwrap();
        assert_eq!(run.best_epoch, 0);
        assert_eq!(run.trace.len(), 4);
        assert_eq!(run.model, model(2));
    }

    #[test]
    fn frozen_probe_keeps_encoder() {
        let vs = prepare_all_tiny(6);
        let cfg = ClassifierConfig {
            epochs: 3,
            frozen_encoder: true,
            head_lr_scale: 100.0,
            patience: 100,
            ..Default::default()
        };
        let init = model(4);
        let run = finetune_classifier(&vs[..4], &vs[4..], &BTreeSet::new(), &init, &cfg).unwrap();
        assert_eq!(run.model.encoder, init.encoder);
        assert_eq!(run.trace.len(), 3);
    }

    #[test]
    fn predictions_json_round_trip() {
        let vs = prepare_all_tiny(2);
        let preds = predict_volumes(&model(5), &vs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
