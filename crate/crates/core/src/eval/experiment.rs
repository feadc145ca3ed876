//! Cross-validated fine-tuning runs, few-shot curves and cross-dataset
//! inference, each re-running the leakage audit before it trains.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, classification_metrics, ClassificationMetrics};
use super::report::MetricReport;
use super::splits::{audit, few_shot_subsets, SplitManifest};
use crate::downstream::segment::{evaluate_segmentation, SegEval};
use crate::downstream::{
    finetune_classifier, finetune_segmentation, predict_volumes, ClassifierConfig, DownstreamModel, HeadKind,
    SegConfig, VolumeSlices,
};
use crate::error::{Error, Result};
use crate::rng::mix;
use crate::slices::SliceConfig;
use crate::vit::{ViTConfig, ViTParams};
use crate::volume::SubjectRecord;

/// Where the encoder weights come from. Both arms share head initialisation
/// and every seed; only the encoder's starting values differ.
#[derive(Debug, Clone)]
pub enum Init {
    Pretrained(ViTParams),
    Random { vit: ViTConfig, seed: u64 },
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Pretrained(_) => "ssl",
            Init::Random { .. } => "random",
        }
    }

    pub fn model(&self, head: HeadKind, head_seed: u64) -> Result<DownstreamModel> {
        match self {
            Init::Pretrained(p) => DownstreamModel::from_backbone(p, head, head_seed),
            Init::Random { vit, seed } => DownstreamModel::random(vit, head, *seed, head_seed),
        }
    }
}

/// Volumes whose subject is in `ids`, in corpus order.
pub fn select(volumes: &[VolumeSlices], ids: &BTreeSet<String>) -> Vec<VolumeSlices> {
    volumes.iter().filter(|v| ids.contains(&v.subject_id)).cloned().collect()
}

pub fn select_subjects(subjects: &[SubjectRecord], ids: &BTreeSet<String>) -> Vec<SubjectRecord> {
    subjects.iter().filter(|s| ids.contains(&s.subject_id)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub auroc: f64,
    pub metrics: ClassificationMetrics,
    pub predictions: BTreeMap<String, Vec<f64>>,
}

/// Pure inference on labelled volumes; class 1 is the positive class.
pub fn test_metrics(model: &DownstreamModel, test: &[VolumeSlices]) -> Result<TestMetrics> {
    let predictions = predict_volumes(model, test)?;
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for v in test {
        let label = v
            .label
            .ok_or_else(|| Error::DegenerateLabels(format!("test subject {} has no label", v.subject_id)))?;
        scores.push(predictions[&v.subject_id][1]);
        labels.push((label == 1) as usize);
    }
    Ok(TestMetrics {
        auroc: auroc(&scores, &labels)?,
        metrics: classification_metrics(&scores, &labels)?,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub n_train: usize,
    pub best_epoch: usize,
    pub model: DownstreamModel,
    pub test: TestMetrics,
}

fn labelled(volumes: &[VolumeSlices]) -> Result<Vec<(String, usize)>> {
    volumes
        .iter()
        .map(|v| {
            v.label
                .map(|l| (v.subject_id.clone(), l))
                .ok_or_else(|| Error::DegenerateLabels(format!("subject {} has no label", v.subject_id)))
        })
        .collect()
}

/// Fine-tunes on fold `k`'s training folds (optionally a stratified
/// fraction of them), early-stops on fold `k`, scores the held-out test set.
pub fn classification_fold(
    volumes: &[VolumeSlices],
    manifest: &SplitManifest,
    fold: usize,
    fraction: f64,
    init: &Init,
    cfg: &ClassifierConfig,
) -> Result<FoldRun> {
    let train_ids = manifest.train_ids(fold);
    let val_ids = manifest.val_ids(fold);
    audit(manifest, &train_ids, val_ids)?;
    let pool = select(volumes, &train_ids);
    let seed = mix(&[cfg.seed, fold as u64]);
    let subset: BTreeSet<String> = few_shot_subsets(&labelled(&pool)?, &[fraction], seed)?
        .remove(0)
        .into_iter()
        .collect();
    let train = select(volumes, &subset);
    let val = select(volumes, val_ids);
    let test = select(volumes, &manifest.test_ids);
    let n_classes = train.iter().filter_map(|v| v.label).max().unwrap_or(1).max(1) + 1;
    let head = HeadKind::Classifier { n_classes };
    let run_cfg = ClassifierConfig {
        seed,
        ..cfg.clone()
    };
    let run = finetune_classifier(&train, &val, &manifest.test_ids, &init.model(head, seed)?, &run_cfg)?;
    Ok(FoldRun {
        fold,
        n_train: train.len(),
        best_epoch: run.best_epoch,
        test: test_metrics(&run.model, &test)?,
        model: run.model,
    })
}

/// Every fold at one fraction; the report holds per-fold test AUROC.
pub fn classification_cv(
    volumes: &[VolumeSlices],
    manifest: &SplitManifest,
    fraction: f64,
    init: &Init,
    cfg: &ClassifierConfig,
) -> Result<(MetricReport, Vec<FoldRun>)> {
    let runs = (0..manifest.folds.len())
        .map(|k| classification_fold(volumes, manifest, k, fraction, init, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::new(
        format!("{}@{fraction}", init.name()),
        "auroc",
        runs.iter().map(|r| r.test.auroc).collect(),
    );
    let extras: [(&str, fn(&ClassificationMetrics) -> f64); 4] = [
        ("accuracy", |m| m.accuracy),
        ("f1", |m| m.f1),
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
    ];
    for (name, f) in extras {
        let v: Vec<f64> = runs.iter().map(|r| f(&r.test.metrics)).collect();
        report.extra.insert(format!("mean_{name}"), v.iter().sum::<f64>() / v.len() as f64);
    }
    Ok((report, runs))
}

/// One cross-validated report per fraction, all from the same init and seeds.
pub fn few_shot_curve(
    volumes: &[VolumeSlices],
    manifest: &SplitManifest,
    fractions: &[f64],
    init: &Init,
    cfg: &ClassifierConfig,
) -> Result<Vec<MetricReport>> {
    fractions
        .iter()
        .map(|&f| classification_cv(volumes, manifest, f, init, cfg).map(|(r, _)| r))
        .collect()
}

/// Scores a trained model on another cohort without touching its
/// parameters. Any overlap with the model's training subjects is leakage.
pub fn cross_dataset_eval(
    model: &DownstreamModel,
    trained_on: &BTreeSet<String>,
    target: &[VolumeSlices],
) -> Result<TestMetrics> {
    if let Some(v) = target.iter().find(|v| trained_on.contains(&v.subject_id)) {
        return Err(Error::LeakageDetected(format!(
            "external subject {} was used to train the model",
            v.subject_id
        )));
    }
    test_metrics(model, target)
}

#[derive(Debug, Clone)]
pub struct SegFoldRun {
    pub fold: usize,
    pub best_epoch: usize,
    pub model: DownstreamModel,
    pub eval: SegEval,
}

/// Segmentation fine-tuning on fold `k`, scored on re-assembled test volumes.
#[allow(clippy::too_many_arguments)]
pub fn segmentation_fold(
    subjects: &[SubjectRecord],
    volumes: &[VolumeSlices],
    manifest: &SplitManifest,
    fold: usize,
    init: &Init,
    slice_cfg: &SliceConfig,
    cfg: &SegConfig,
    classes: &[u8],
    n_classes: usize,
) -> Result<SegFoldRun> {
    let train_ids = manifest.train_ids(fold);
    let val_ids = manifest.val_ids(fold);
    audit(manifest, &train_ids, val_ids)?;
    let seed = mix(&[cfg.seed, fold as u64]);
    let run_cfg = SegConfig {
        seed,
        ..cfg.clone()
    };
    let init = init.model(HeadKind::SegDecoder { n_classes }, seed)?;
    let run = finetune_segmentation(
        &select(volumes, &train_ids),
        &select(volumes, val_ids),
        &manifest.test_ids,
        &init,
        &run_cfg,
    )?;
    let test = select_subjects(subjects, &manifest.test_ids);
    let (eval, _) = evaluate_segmentation(&run.model, &test, slice_cfg, classes)?;
    Ok(SegFoldRun {
        fold,
        best_epoch: run.best_epoch,
        model: run.model,
        eval,
    })
}
