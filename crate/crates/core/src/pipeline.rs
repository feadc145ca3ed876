//! End-to-end steps shared by the command line and the acceptance tests:
//! corpus loading, pretraining with resume, and the two-arm comparisons.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::gradcheck::{op_cases, run_cases, CaseResult};
use crate::config::Config;
use crate::distill::{read_loss_csv, write_loss_csv, DistillState, LossRecord, Pretrainer};
use crate::downstream::segment::SegEval;
use crate::downstream::{prepare_all, VolumeSlices};
use crate::error::{Error, Result};
use crate::eval::experiment::{classification_cv, few_shot_curve, segmentation_fold, FoldRun, Init, SegFoldRun};
use crate::eval::{make_splits, MetricReport, SplitManifest};
use crate::rng::mix;
use crate::slices::{extract_slices, SliceSample};
use crate::vit::{gradcheck_case, ViTParams};
use crate::volume::{load_manifest_subjects, DatasetManifest, SubjectRecord};

const RANDOM_ENCODER_STREAM: u64 = 0xE4C0;

pub fn load_corpus(manifest: &Path) -> Result<(DatasetManifest, Vec<SubjectRecord>)> {
    let m = DatasetManifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let subjects = load_manifest_subjects(&m, base)?;
    Ok((m, subjects))
}

pub fn labelled_ids(subjects: &[SubjectRecord]) -> Result<Vec<(String, usize)>> {
    subjects
        .iter()
        .map(|s| {
            s.label
                .map(|l| (s.subject_id.clone(), l))
                .ok_or_else(|| Error::DegenerateLabels(format!("subject {} has no label", s.subject_id)))
        })
        .collect()
}

pub fn splits_for(dataset: &str, subjects: &[SubjectRecord], cfg: &Config) -> Result<SplitManifest> {
    make_splits(dataset, &labelled_ids(subjects)?, cfg.eval.split_seed, cfg.eval.n_folds)
}

/// Pretraining slices from the manifest's SSL partition only.
pub fn pretrain_pool(subjects: &[SubjectRecord], splits: &SplitManifest, cfg: &Config) -> Result<Vec<SliceSample>> {
    splits.validate()?;
    let mut pool = Vec::new();
    for s in subjects.iter().filter(|s| splits.ssl_ids.contains(&s.subject_id)) {
        pool.extend(extract_slices(s, &cfg.slice)?);
    }
    Ok(pool)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: DistillState,
    pub trace: Vec<LossRecord>,
}

/// Runs self-distillation to `cfg.distill.total_steps`. With `resume`, the
/// state comes from that checkpoint and the loss trace from the `loss.csv`
/// beside it. With `out_dir`, periodic checkpoints, the final state,
/// `backbone.vdck` and `loss.csv` are written there.
pub fn pretrain(
    subjects: &[SubjectRecord],
    splits: &SplitManifest,
    cfg: &Config,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    let pool = pretrain_pool(subjects, splits, cfg)?;
    let (state, prior) = match resume {
        Some(ckpt) => {
            let state = DistillState::load(ckpt)?;
            let csv = ckpt.parent().unwrap_or(Path::new(".")).join("loss.csv");
            let prior = if csv.exists() { read_loss_csv(&csv)? } else { Vec::new() };
            let prior: Vec<LossRecord> = prior.into_iter().filter(|r| r.step < state.step).collect();
            if prior.len() != state.step {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} loss rows before step {}",
                    csv.display(),
                    prior.len(),
                    state.step
                )));
            }
            (state, prior)
        }
        None => (DistillState::new(ViTParams::init(&cfg.vit, cfg.distill.seed)?), Vec::new()),
    };
    if state.student.config != cfg.vit {
        return Err(Error::Config("checkpoint encoder differs from [vit]".into()));
    }
    let mut trainer = Pretrainer::new(state, &pool, splits.test_ids.clone(), cfg.distill.clone(), cfg.crop.clone())?;
    trainer.trace = prior;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer = trainer.with_checkpoints(dir);
    }
    trainer.run(|_| {})?;
    if let Some(dir) = out_dir {
        trainer.state.save(&dir.join("final.vdck"))?;
        backbone(&trainer.state).save(&dir.join("backbone.vdck"))?;
        write_loss_csv(&dir.join("loss.csv"), &trainer.trace)?;
    }
    Ok(PretrainOutcome {
        state: trainer.state,
        trace: trainer.trace,
    })
}

/// The encoder handed to downstream tasks: the EMA teacher.
pub fn backbone(state: &DistillState) -> ViTParams {
    state.teacher.clone()
}

/// The two arms compared everywhere: pretrained weights and a random
/// encoder of the same shape.
pub fn arms(pretrained: Option<&ViTParams>, cfg: &Config) -> Vec<Init> {
    let mut out = Vec::new();
    if let Some(p) = pretrained {
        out.push(Init::Pretrained(p.clone()));
    }
    out.push(Init::Random {
        vit: cfg.vit.clone(),
        seed: mix(&[cfg.classifier.seed, RANDOM_ENCODER_STREAM]),
    });
    out
}

/// Cross-validated classification for each arm at one fraction; when both
/// arms are present each report carries the other's p-value.
pub fn compare_classification(
    volumes: &[VolumeSlices],
    splits: &SplitManifest,
    fraction: f64,
    arms: &[Init],
    cfg: &Config,
) -> Result<(Vec<MetricReport>, Vec<Vec<FoldRun>>)> {
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for init in arms {
        let (r, f) = classification_cv(volumes, splits, fraction, init, &cfg.classifier)?;
        reports.push(r);
        runs.push(f);
    }
    cross_compare(&mut reports)?;
    Ok((reports, runs))
}

pub fn compare_few_shot(
    volumes: &[VolumeSlices],
    splits: &SplitManifest,
    arms: &[Init],
    cfg: &Config,
) -> Result<Vec<MetricReport>> {
    let curves = arms
        .iter()
        .map(|init| few_shot_curve(volumes, splits, &cfg.eval.fractions, init, &cfg.classifier))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..cfg.eval.fractions.len() {
        let mut at: Vec<MetricReport> = curves.iter().map(|c| c[i].clone()).collect();
        cross_compare(&mut at)?;
        out.extend(at);
    }
    Ok(out)
}

fn cross_compare(reports: &mut [MetricReport]) -> Result<()> {
    if reports.len() == 2 && reports[0].fold_values.len() > 1 {
        let (a, b) = reports.split_at_mut(1);
        a[0].compare(&b[0])?;
        b[0].compare(&a[0])?;
    }
    Ok(())
}

/// Segmentation per fold for each arm; the report value is the fold's mean
/// Dice over the evaluated classes, with per-class Dice and HD95 as extras.
pub fn compare_segmentation(
    subjects: &[SubjectRecord],
    splits: &SplitManifest,
    arms: &[Init],
    cfg: &Config,
) -> Result<(Vec<MetricReport>, Vec<Vec<SegFoldRun>>)> {
    let volumes = prepare_all(subjects, &cfg.seg_slice)?;
    let n_classes = subjects
        .iter()
        .filter_map(|s| s.seg_mask.as_ref())
        .flat_map(|m| m.data.iter().copied())
        .max()
        .map(|m| usize::from(m) + 1)
        .ok_or_else(|| Error::InvalidVolume("no subject carries a segmentation mask".into()))?;
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for init in arms {
        let runs = (0..splits.folds.len())
            .map(|k| {
                segmentation_fold(
                    subjects,
                    &volumes,
                    splits,
                    k,
                    init,
                    &cfg.seg_slice,
                    &cfg.segment,
                    &cfg.eval.seg_classes,
                    n_classes,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut r = MetricReport::new(
            format!("{}@seg", init.name()),
            "dice",
            runs.iter().map(|r| r.eval.mean_dice_all()).collect(),
        );
        seg_extras(&mut r, runs.iter().map(|r| &r.eval));
        reports.push(r);
        all.push(runs);
    }
    cross_compare(&mut reports)?;
    Ok((reports, all))
}

fn seg_extras<'a>(report: &mut MetricReport, evals: impl Iterator<Item = &'a SegEval> + Clone) {
    let n = evals.clone().count().max(1) as f64;
    let Some(first) = evals.clone().next() else { return };
    for (k, c) in first.classes.iter().enumerate() {
        let dice = evals.clone().map(|e| e.mean_dice(k)).sum::<f64>() / n;
        let hd = evals.clone().map(|e| e.mean_hd95(k).0).sum::<f64>() / n;
        let missing: usize = evals.clone().map(|e| e.mean_hd95(k).1).sum();
        report.extra.insert(format!("dice_class{c}"), dice);
        report.extra.insert(format!("hd95_class{c}"), hd);
        report.extra.insert(format!("hd95_undefined_class{c}"), missing as f64);
    }
}

/// Every op case for each seed in `0..seeds` plus the tiny-encoder case.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut cases = op_cases(seed);
        cases.push(gradcheck_case(seed)?);
        out.extend(run_cases(&cases, 1e-6, seed)?);
    }
    Ok(out)
}

/// Subject ids a model trained under `splits` has seen.
pub fn trained_on(splits: &SplitManifest) -> BTreeSet<String> {
    splits.pool().union(&splits.ssl_ids).cloned().collect()
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
