use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use slicewise::config::Config;
use slicewise::downstream::segment::{assemble_volume, evaluate_segmentation};
use slicewise::downstream::{prepare_all, write_predictions, DownstreamModel, HeadKind};
use slicewise::eval::experiment::{classification_fold, cross_dataset_eval, select, Init};
use slicewise::eval::{save_reports, SplitManifest};
use slicewise::pipeline::{self, arms, load_corpus};
use slicewise::vit::ViTParams;
use slicewise::volume::manifest::write_corpus;
use slicewise::volume::nifti::write_nifti_file;
use slicewise::{Error, Result};

/// Slice-wise self-distillation pretraining and evaluation for volumetric
/// multi-contrast brain images.
#[derive(Parser)]
#[command(name = "slicewise", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cls,
    Seg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus as NIfTI files plus manifest.json.
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the held-out test set and stratified folds as JSON.
    Splits {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-distillation pretraining on the SSL partition.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a classifier on one fold and score the held-out test set.
    FinetuneCls {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Pretrained encoder; random initialisation when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a segmentation decoder on one fold; writes predicted masks.
    FinetuneSeg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate both arms and report per-fold metrics with p-values.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cls")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate both arms at every configured label fraction.
    FewShot {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained classifier on another cohort.
    CrossEval {
        #[arg(long)]
        model: PathBuf,
        /// Splits of the dataset the model was trained on.
        #[arg(long)]
        trained_splits: PathBuf,
        /// Manifest of the external cohort.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_backbone(path: Option<&Path>) -> Result<Option<ViTParams>> {
    path.map(ViTParams::load).transpose()
}

fn single_arm(backbone: Option<&Path>, cfg: &Config) -> Result<Init> {
    let pre = load_backbone(backbone)?;
    Ok(arms(pre.as_ref(), cfg).remove(0))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Phantom { out } => {
            let subjects = cfg.phantom.generate()?;
            let manifest = write_corpus(&cfg.phantom.dataset, &subjects, &out)?;
            manifest.save(&out.join("manifest.json"))?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
        }
        Command::Splits { manifest, out } => {
            let (m, subjects) = load_corpus(&manifest)?;
            let splits = pipeline::splits_for(&m.dataset, &subjects, &cfg)?;
            splits.save(&out)?;
            println!(
                "{}: {} test, {} folds of {:?}",
                m.dataset,
                splits.test_ids.len(),
                splits.folds.len(),
                splits.folds.iter().map(|f| f.len()).collect::<Vec<_>>()
            );
        }
        Command::Pretrain {
            manifest,
            splits,
            out,
            resume,
        } => {
            let (_, subjects) = load_corpus(&manifest)?;
            let splits = SplitManifest::load(&splits)?;
            let r = pipeline::pretrain(&subjects, &splits, &cfg, Some(&out), resume.as_deref())?;
            if let Some(last) = r.trace.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
        }
        Command::FinetuneCls {
            manifest,
            splits,
            fold,
            fraction,
            backbone,
            out,
        } => {
            let (_, subjects) = load_corpus(&manifest)?;
            let splits = SplitManifest::load(&splits)?;
            let init = single_arm(backbone.as_deref(), &cfg)?;
            let volumes = prepare_all(&subjects, &cfg.cls_slice)?;
            let run = classification_fold(&volumes, &splits, fold, fraction, &init, &cfg.classifier)?;
            let out = pipeline::ensure_dir(&out)?;
            run.model.save(&out.join("model.vdck"))?;
            write_predictions(&out.join("predictions.json"), &run.test.predictions)?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({
                    "arm": init.name(),
                    "fold": fold,
                    "fraction": fraction,
                    "n_train": run.n_train,
                    "best_epoch": run.best_epoch,
                    "auroc": run.test.auroc,
                    "metrics": run.test.metrics,
                }),
            )?;
            println!("{} fold {fold} test auroc {:.4}", init.name(), run.test.auroc);
        }
        Command::FinetuneSeg {
            manifest,
            splits,
            fold,
            backbone,
            out,
        } => {
            let (_, subjects) = load_corpus(&manifest)?;
            let splits = SplitManifest::load(&splits)?;
            let init = single_arm(backbone.as_deref(), &cfg)?;
            let volumes = prepare_all(&subjects, &cfg.seg_slice)?;
            let n_classes = subjects
                .iter()
                .filter_map(|s| s.seg_mask.as_ref())
                .flat_map(|m| m.data.iter().copied())
                .max()
                .map(|m| usize::from(m) + 1)
                .ok_or_else(|| Error::InvalidVolume("no subject carries a segmentation mask".into()))?;
            let run = slicewise::eval::experiment::segmentation_fold(
                &subjects,
                &volumes,
                &splits,
                fold,
                &init,
                &cfg.seg_slice,
                &cfg.segment,
                &cfg.eval.seg_classes,
                n_classes,
            )?;
            let out = pipeline::ensure_dir(&out)?;
            run.model.save(&out.join("model.vdck"))?;
            write_json(&out.join("seg_eval.json"), &run.eval)?;
            let test = slicewise::eval::experiment::select_subjects(&subjects, &splits.test_ids);
            let (_, preds) = evaluate_segmentation(&run.model, &test, &cfg.seg_slice, &cfg.eval.seg_classes)?;
            let pred_dir = pipeline::ensure_dir(&out.join("pred"))?;
            for s in &test {
                let reference = s
                    .volumes
                    .values()
                    .next()
                    .ok_or_else(|| Error::NoModalities(s.subject_id.clone()))?;
                let vol = assemble_volume(&preds[&s.subject_id], reference)?;
                write_nifti_file(&pred_dir.join(format!("{}_pred.nii", s.subject_id)), &vol)?;
            }
            println!("{} fold {fold} test dice {:.4}", init.name(), run.eval.mean_dice_all());
        }
        Command::Evaluate {
            manifest,
            splits,
            backbone,
            task,
            out,
        } => {
            let (_, subjects) = load_corpus(&manifest)?;
            let splits = SplitManifest::load(&splits)?;
            let pre = load_backbone(backbone.as_deref())?;
            let arms = arms(pre.as_ref(), &cfg);
            let reports = match task {
                Task::Cls => {
                    let volumes = prepare_all(&subjects, &cfg.cls_slice)?;
                    pipeline::compare_classification(&volumes, &splits, 1.0, &arms, &cfg)?.0
                }
                Task::Seg => pipeline::compare_segmentation(&subjects, &splits, &arms, &cfg)?.0,
            };
            let out = pipeline::ensure_dir(&out)?;
            save_reports(&reports, &out.join("report.json"), &out.join("folds.csv"))?;
            for r in &reports {
                println!("{} {} {:.4} ± {:.4} {:?}", r.experiment, r.metric, r.mean, r.std, r.p_values);
            }
        }
        Command::FewShot {
            manifest,
            splits,
            backbone,
            out,
        } => {
            let (_, subjects) = load_corpus(&manifest)?;
            let splits = SplitManifest::load(&splits)?;
            let pre = load_backbone(backbone.as_deref())?;
            let volumes = prepare_all(&subjects, &cfg.cls_slice)?;
            let reports = pipeline::compare_few_shot(&volumes, &splits, &arms(pre.as_ref(), &cfg), &cfg)?;
            let out = pipeline::ensure_dir(&out)?;
            save_reports(&reports, &out.join("few_shot.json"), &out.join("few_shot.csv"))?;
            for r in &reports {
                println!("{} {} {:.4} ± {:.4}", r.experiment, r.metric, r.mean, r.std);
            }
        }
        Command::CrossEval {
            model,
            trained_splits,
            manifest,
            out,
        } => {
            let model = DownstreamModel::load(&model)?;
            if !matches!(model.head, HeadKind::Classifier { .. }) {
                return Err(Error::Config("cross-eval needs a classifier model".into()));
            }
            let seen = pipeline::trained_on(&SplitManifest::load(&trained_splits)?);
            let (m, subjects) = load_corpus(&manifest)?;
            let volumes = prepare_all(&subjects, &cfg.cls_slice)?;
            let all: std::collections::BTreeSet<String> = volumes.iter().map(|v| v.subject_id.clone()).collect();
            let target = select(&volumes, &all);
            let r = cross_dataset_eval(&model, &seen, &target)?;
            let out = pipeline::ensure_dir(&out)?;
            write_predictions(&out.join("predictions.json"), &r.predictions)?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "dataset": m.dataset, "auroc": r.auroc, "metrics": r.metrics }),
            )?;
            println!("{} auroc {:.4}", m.dataset, r.auroc);
        }
        Command::Gradcheck { seeds, tolerance } => {
            let results = pipeline::gradcheck_suite(seeds)?;
            let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
            for r in &results {
                let w = worst.entry(&r.name).or_insert(0.0);
                *w = w.max(r.rel_error);
            }
            for (name, e) in &worst {
                println!("{name:<16} {e:.3e}");
            }
            let max = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
            println!("{} cases, max relative error {max:.3e}", results.len());
            if !(max < tolerance) {
                return Err(Error::GradCheckFailed {
                    max_rel_error: max,
                    tolerance,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invariant_violation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
