//! Teacher–student self-distillation: centred and sharpened teacher targets,
//! the multi-crop cross-entropy, EMA teacher updates and the pretraining
//! loop with checkpoint/resume.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::augment::{make_multicrop, CropConfig};
use crate::autodiff::{softmax_in_place, Bound, Graph, Tensor, TensorTable, Var};
use crate::error::{Error, Result};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::rng::{mix, rng_for, sample_seed};
use crate::slices::SliceSample;
use crate::vit::{forward_features, forward_head, sidecar_path, ViTConfig, ViTParams};

const BATCH_STREAM: u64 = 0xB47C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_slices: usize,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.99,
            lr: 1e-4,
            adamw: AdamWConfig::default(),
            warmup_steps: 20,
            total_steps: 200,
            batch_slices: 16,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_teacher && self.tau_teacher < self.tau_student) {
            return Err(Error::Config(format!(
                "need 0 < distill.tau_teacher ({}) < distill.tau_student ({})",
                self.tau_teacher, self.tau_student
            )));
        }
        for (name, v) in [
            ("distill.center_momentum", self.center_momentum),
            ("distill.ema_momentum", self.ema_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.batch_slices == 0 {
            return Err(Error::Config("distill.batch_slices must be >= 1".into()));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "distill.warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("distill.lr must be positive".into()));
        }
        Ok(())
    }
}

/// `softmax((logits - center) / tau)`.
pub fn teacher_distribution(logits: &[f32], center: &[f32], tau: f64) -> Vec<f32> {
    assert_eq!(logits.len(), center.len(), "center length");
    let inv = (1.0 / tau) as f32;
    let mut p: Vec<f32> = logits.iter().zip(center).map(|(l, c)| (l - c) * inv).collect();
    softmax_in_place(&mut p);
    p
}

/// `H(p, softmax(logits / tau))` evaluated in `f64`.
pub fn cross_entropy(p: &[f32], student_logits: &[f32], tau: f64) -> f64 {
    let z: Vec<f64> = student_logits.iter().map(|&l| l as f64 / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    -p.iter().zip(&z).map(|(&pi, zi)| pi as f64 * (zi - lse)).sum::<f64>()
}

pub fn entropy(p: &[f32]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v as f64 * (v as f64).ln())
        .sum::<f64>()
}

/// Ordered `(teacher view, student view)` pairs with distinct indices.
pub fn view_pairs(n_global: usize, n_views: usize) -> Vec<(usize, usize)> {
    (0..n_global)
        .flat_map(|t| (0..n_views).filter(move |&s| s != t).map(move |s| (t, s)))
        .collect()
}

fn check_views(student: usize, teacher: usize) -> Result<()> {
    if teacher == 0 || teacher > student || (teacher == 1 && student == 1) {
        return Err(Error::MismatchedViewCounts(format!(
            "{teacher} teacher views against {student} student views"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over every distinct (global teacher, student view)
/// pair. Teacher logits belong to the first `teacher_logits.len()` views.
pub fn distill_loss(
    student_logits: &[Vec<f32>],
    teacher_logits: &[Vec<f32>],
    center: &[f32],
    cfg: &DistillConfig,
) -> Result<f64> {
    check_views(student_logits.len(), teacher_logits.len())?;
    let probs: Vec<Vec<f32>> = teacher_logits
        .iter()
        .map(|l| teacher_distribution(l, center, cfg.tau_teacher))
        .collect();
    let pairs = view_pairs(probs.len(), student_logits.len());
    let total: f64 = pairs
        .iter()
        .map(|&(t, s)| cross_entropy(&probs[t], &student_logits[s], cfg.tau_student))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Graph form of [`distill_loss`] over student logits `[n_views, K]` with
/// constant teacher probabilities; multiplied by `weight`.
pub fn distill_loss_graph(
    g: &mut Graph<f32>,
    student_logits: Var,
    teacher_probs: &[Vec<f32>],
    tau_student: f64,
    weight: f32,
) -> Result<Var> {
    let (v, k) = (g.shape(student_logits)[0], g.shape(student_logits)[1]);
    check_views(v, teacher_probs.len())?;
    let pairs = view_pairs(teacher_probs.len(), v);
    let mut targets = vec![0f32; v * k];
    let coef = weight / pairs.len() as f32;
    for &(t, s) in &pairs {
        for (dst, &p) in targets[s * k..(s + 1) * k].iter_mut().zip(&teacher_probs[t]) {
            *dst += coef * p;
        }
    }
    let targets = g.constant(&[v, k], targets);
    let z = g.scale(student_logits, (1.0 / tau_student) as f32);
    let ls = g.log_softmax(z)?;
    let prod = g.mul(targets, ls)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

/// `m * center + (1 - m) * mean(batch)`.
pub fn update_center(center: &[f32], teacher_logits: &[Vec<f32>], m: f64) -> Result<Vec<f32>> {
    if teacher_logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = teacher_logits.len() as f64;
    Ok(center
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let mean = teacher_logits.iter().map(|row| row[j] as f64).sum::<f64>() / n;
            (m * c as f64 + (1.0 - m) * mean) as f32
        })
        .collect())
}

/// `teacher <- lambda * teacher + (1 - lambda) * student` for every tensor.
pub fn ema_update(teacher: &mut TensorTable, student: &TensorTable, lambda: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::ShapeMismatch("teacher and student layouts differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.values.iter_mut().zip(&s.values) {
            *a = (lambda * *a as f64 + (1.0 - lambda) * b as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub student: ViTParams,
    pub teacher: ViTParams,
    pub center: Vec<f32>,
    pub step: usize,
    pub optimizer: AdamW,
}

impl DistillState {
    /// Teacher starts as a copy of the student; centre at zero.
    pub fn new(student: ViTParams) -> Self {
        let optimizer = AdamW::new(&student.tensors);
        DistillState {
            teacher: student.clone(),
            center: vec![0.0; student.config.n_prototypes],
            step: 0,
            optimizer,
            student,
        }
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        t.extend_prefixed("student.", &self.student.tensors);
        t.extend_prefixed("teacher.", &self.teacher.tensors);
        t.insert("center", Tensor::new(vec![self.center.len()], self.center.clone()));
        let (m, v) = self.optimizer.to_tables(&self.student.tensors);
        t.extend_prefixed("adam.m.", &m);
        t.extend_prefixed("adam.v.", &v);
        // step counters are stored as integers reinterpreted as f32 bits
        t.insert(
            "step",
            Tensor::new(
                vec![2],
                vec![f32::from_bits(self.step as u32), f32::from_bits(self.optimizer.t as u32)],
            ),
        );
        t
    }

    pub fn from_table(config: ViTConfig, t: &TensorTable) -> Result<Self> {
        let student = ViTParams::from_table(config.clone(), t.strip_prefix("student."))?;
        let teacher = ViTParams::from_table(config.clone(), t.strip_prefix("teacher."))?;
        let center = t.expect("center", &[config.n_prototypes])?.values.clone();
        let steps = &t.expect("step", &[2])?.values;
        let optimizer = AdamW::from_tables(
            &student.tensors,
            &t.strip_prefix("adam.m."),
            &t.strip_prefix("adam.v."),
            steps[1].to_bits() as u64,
        )?;
        Ok(DistillState {
            student,
            teacher,
            center,
            step: steps[0].to_bits() as usize,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().save(path)?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.student.config)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_table(serde_json::from_str(&json)?, &TensorTable::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        out.push_str(&format!("{},{:e},{:?}\n", r.step, r.lr, r.loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed loss row {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Per-step diagnostics beyond the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub record: LossRecord,
    /// Sum of absolute gradient entries that reached teacher parameters.
    pub teacher_grad_abs: f64,
    /// Smallest `H(P_t, P_s) - H(P_t)` over all pairs of the batch.
    pub min_excess_entropy: f64,
}

/// Self-distillation over a fixed pool of pretraining slices.
pub struct Pretrainer<'a> {
    pub cfg: DistillConfig,
    pub crop: CropConfig,
    pub state: DistillState,
    pub trace: Vec<LossRecord>,
    slices: &'a [SliceSample],
    held_out: BTreeSet<String>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Pretrainer<'a> {
    /// `held_out` lists subjects that must never reach a batch.
    pub fn new(
        state: DistillState,
        slices: &'a [SliceSample],
        held_out: BTreeSet<String>,
        cfg: DistillConfig,
        crop: CropConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        crop.validate()?;
        if slices.is_empty() {
            return Err(Error::NoSlices("pretraining pool is empty".into()));
        }
        if let Some(s) = slices.iter().find(|s| held_out.contains(&s.subject_id)) {
            return Err(Error::LeakageDetected(format!(
                "held-out subject {} is in the pretraining pool",
                s.subject_id
            )));
        }
        Ok(Pretrainer {
            cfg,
            crop,
            state,
            trace: Vec::new(),
            slices,
            held_out,
            checkpoint_dir: None,
        })
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Slice indices of the batch at `step`; a pure function of seed and step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = rng_for(&[self.cfg.seed, BATCH_STREAM, step as u64]);
        let n = self.slices.len();
        let k = self.cfg.batch_slices.min(n);
        sample_indices(&mut rng, n, k).into_vec()
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.state.step;
        let lr = lr_schedule(step, self.cfg.warmup_steps, self.cfg.total_steps, self.cfg.lr);
        let batch = self.batch_indices(step);
        let vcfg = self.state.student.config.clone();
        let n_global = self.crop.n_global;
        let weight = 1.0 / batch.len() as f32;
        let step_seed = mix(&[self.cfg.seed, step as u64]);

        let mut grads: Vec<Vec<f32>> = self
            .state
            .student
            .tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let mut teacher_logits_all = Vec::with_capacity(batch.len() * n_global);
        let mut loss_total = 0.0f64;
        let mut teacher_grad_abs = 0.0f64;
        let mut min_excess = f64::INFINITY;

        for &i in &batch {
            let slice = &self.slices[i];
            if self.held_out.contains(&slice.subject_id) {
                return Err(Error::LeakageDetected(format!(
                    "held-out subject {} sampled at step {step}",
                    slice.subject_id
                )));
            }
            let seed = sample_seed(step_seed, &slice.subject_id, slice.slice_index);
            let aug = make_multicrop(slice, &self.crop, seed)?;
            let (globals, locals) = aug.views.split_at(n_global);

            let mut g = Graph::<f32>::new();
            let teacher = Bound::bind(&mut g, &self.state.teacher.tensors, "", false);
            let tf = forward_features(&mut g, &vcfg, &teacher, globals)?;
            let tl = forward_head(&mut g, &vcfg, &teacher, tf.cls)?;
            let k = vcfg.n_prototypes;
            let t_rows: Vec<Vec<f32>> = g.value(tl).chunks_exact(k).map(<[f32]>::to_vec).collect();
            let probs: Vec<Vec<f32>> = t_rows
                .iter()
                .map(|l| teacher_distribution(l, &self.state.center, self.cfg.tau_teacher))
                .collect();

            let student = Bound::bind(&mut g, &self.state.student.tensors, "", true);
            let mut cls = vec![forward_features(&mut g, &vcfg, &student, globals)?.cls];
            if !locals.is_empty() {
                cls.push(forward_features(&mut g, &vcfg, &student, locals)?.cls);
            }
            let cls = g.concat(&cls, 0)?;
            let sl = forward_head(&mut g, &vcfg, &student, cls)?;
            let loss = distill_loss_graph(&mut g, sl, &probs, self.cfg.tau_student, weight)?;
            g.backward(loss)?;

            loss_total += g.value(loss)[0] as f64;
            for (acc, gr) in grads.iter_mut().zip(student.grads(&g, "")) {
                acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
            teacher_grad_abs += teacher
                .vars()
                .filter_map(|(_, v)| g.grad(v))
                .flatten()
                .map(|x| x.abs() as f64)
                .sum::<f64>();
            let s_rows: Vec<&[f32]> = g.value(sl).chunks_exact(k).collect();
            for (t, s) in view_pairs(probs.len(), s_rows.len()) {
                let excess = cross_entropy(&probs[t], s_rows[s], self.cfg.tau_student) - entropy(&probs[t]);
                min_excess = min_excess.min(excess);
            }
            teacher_logits_all.extend(t_rows);
        }

        if !loss_total.is_finite() {
            return Err(Error::NonFinite(step));
        }
        self.state
            .optimizer
            .step(&mut self.state.student.tensors, &grads, lr, &self.cfg.adamw)?;
        self.state.student.renormalize_prototypes();
        ema_update(
            &mut self.state.teacher.tensors,
            &self.state.student.tensors,
            self.cfg.ema_momentum,
        )?;
        self.state.center = update_center(&self.state.center, &teacher_logits_all, self.cfg.center_momentum)?;
        self.state.step += 1;

        let record = LossRecord { step, lr, loss: loss_total };
        self.trace.push(record);
        if let Some(dir) = &self.checkpoint_dir {
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.step % every == 0 {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                self.state.save(&dir.join(format!("checkpoint_{:06}.vdck", self.state.step)))?;
                write_loss_csv(&dir.join("loss.csv"), &self.trace)?;
            }
        }
        Ok(StepStats {
            record,
            teacher_grad_abs,
            min_excess_entropy: min_excess,
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.state.step < self.cfg.total_steps {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slices::{extract_slices, SliceConfig};
    use crate::volume::phantom::{generate_phantom, PhantomClass};

    fn cfg(tau_s: f64, tau_t: f64) -> DistillConfig {
        DistillConfig {
            tau_student: tau_s,
            tau_teacher: tau_t,
            ..Default::default()
        }
    }

    #[test]
    fn teacher_distribution_cases() {
        let l = [0.3f32, -1.0, 2.0];
        let p = teacher_distribution(&l, &l, 0.04);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
        let p = teacher_distribution(&l, &[0.0; 3], 1e-4);
        assert!(p[2] > 0.999);
        let p = teacher_distribution(&[5.0, -3.0, 0.1, 0.2], &[0.5, 0.1, -0.2, 1.0], 0.04);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_three_prototypes() {
        // one pair: teacher on view 0, student on view 1
        let loss = distill_loss(
            &[vec![9.0, 9.0, 9.0], vec![0.0, 0.0, 0.0]],
            &[vec![2.0, 0.0, 0.0]],
            &[0.0; 3],
            &DistillConfig {
                tau_student: 1.0,
                tau_teacher: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn self_cross_entropy_is_entropy() {
        let l = vec![3.0f32, 0.0, -1.0];
        let p = teacher_distribution(&l, &[0.0; 3], 0.5);
        assert!((cross_entropy(&p, &l, 0.5) - entropy(&p)).abs() < 1e-6);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(view_pairs(2, 2), vec![(0, 1), (1, 0)]);
        assert_eq!(view_pairs(2, 10).len(), 18);
        assert!(matches!(
            distill_loss(&[vec![0.0]], &[vec![0.0]], &[0.0], &cfg(0.1, 0.04)),
            Err(Error::MismatchedViewCounts(_))
        ));
        assert!(matches!(
            distill_loss(&[vec![0.0]], &[vec![0.0], vec![0.0]], &[0.0], &cfg(0.1, 0.04)),
            Err(Error::MismatchedViewCounts(_))
        ));
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let student: Vec<Vec<f32>> = (0..5)
            .map(|v| (0..4).map(|j| ((v * 7 + j * 3) % 5) as f32 * 0.2 - 0.4).collect())
            .collect();
        let teacher = vec![vec![0.1f32, 0.5, -0.3, 0.0], vec![-0.2, 0.2, 0.4, 0.1]];
        let center = [0.05f32, -0.1, 0.0, 0.2];
        let c = DistillConfig::default();
        let want = distill_loss(&student, &teacher, &center, &c).unwrap();
        let probs: Vec<Vec<f32>> = teacher
            .iter()
            .map(|l| teacher_distribution(l, &center, c.tau_teacher))
            .collect();
        let mut g = Graph::<f32>::new();
        let s = g.param(&[5, 4], student.concat());
        let l = distill_loss_graph(&mut g, s, &probs, c.tau_student, 1.0).unwrap();
        assert!((g.value(l)[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn center_cases() {
        let batch = vec![vec![1.0f32, 3.0], vec![1.0, -1.0]];
        let c = [0.25f32, -0.5];
        assert_eq!(update_center(&c, &batch, 1.0).unwrap(), c.to_vec());
        assert_eq!(update_center(&c, &batch, 0.0).unwrap(), vec![1.0, 1.0]);
        let out = update_center(&[0.0, 0.0], &[vec![1.0, 1.0]], 0.9).unwrap();
        assert!(out.iter().all(|v| (v - 0.1).abs() < 1e-7));
        assert!(matches!(update_center(&c, &[], 0.9), Err(Error::EmptyBatch)));
    }

    #[test]
    fn ema_cases() {
        let table = |v: f32| {
            let mut t = TensorTable::new();
            t.insert("w", Tensor::new(vec![2], vec![v, v * 0.5]));
            t
        };
        let s = table(0.0);
        let mut t = table(2.0);
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!((t.get("w").unwrap().values[0] - 1.98).abs() < 1e-6);
        let mut t = table(2.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, table(2.0));
        let mut t = table(2.0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        let mut other = TensorTable::new();
        other.insert("w", Tensor::new(vec![3], vec![0.0; 3]));
        assert!(matches!(ema_update(&mut t, &other, 0.5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn teacher_approaches_frozen_student() {
        let cfg = crate::vit::ViTConfig {
            embed_dim: 8,
            n_heads: 2,
            depth: 1,
            head_hidden_dim: 8,
            head_bottleneck_dim: 4,
            n_prototypes: 5,
            ..Default::default()
        };
        let s = ViTParams::init(&cfg, 1).unwrap();
        let mut t = ViTParams::init(&cfg, 2).unwrap();
        let dist = |a: &TensorTable, b: &TensorTable| -> f64 {
            a.iter()
                .zip(b.iter())
                .flat_map(|((_, x), (_, y))| x.values.iter().zip(&y.values).map(|(p, q)| ((p - q) as f64).powi(2)))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&t.tensors, &s.tensors);
        for _ in 0..5 {
            ema_update(&mut t.tensors, &s.tensors, 0.9).unwrap();
            let d = dist(&t.tensors, &s.tensors);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn state_round_trip() {
        let cfg = crate::vit::ViTConfig {
            embed_dim: 8,
            n_heads: 2,
            depth: 1,
            n_prototypes: 6,
            ..Default::default()
        };
        let mut st = DistillState::new(ViTParams::init(&cfg, 3).unwrap());
        st.step = 17;
        st.optimizer.t = 17;
        st.center[2] = 0.5;
        st.optimizer.m[1][0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vdck");
        st.save(&p).unwrap();
        assert_eq!(DistillState::load(&p).unwrap(), st);
    }

    #[test]
    fn loss_csv_round_trip() {
        let trace = vec![
            LossRecord { step: 0, lr: 0.0, loss: 5.123456789012345 },
            LossRecord { step: 1, lr: 1e-5, loss: 4.9 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &trace).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("step,lr,loss\n0,"));
        assert_eq!(read_loss_csv(&p).unwrap(), trace);
    }

    fn tiny_pool() -> Vec<SliceSample> {
        let sc = SliceConfig {
            num_slices: 3,
            target_side: 32,
            ..Default::default()
        };
        (0..3)
            .flat_map(|s| extract_slices(&generate_phantom(s, PhantomClass::Lesion, [24, 24, 16]).unwrap(), &sc).unwrap())
            .collect()
    }

    fn tiny_setup() -> (DistillState, DistillConfig, CropConfig) {
        let vcfg = crate::vit::ViTConfig {
            patch_size: 4,
            embed_dim: 8,
            n_heads: 2,
            depth: 1,
            ref_side: 16,
            head_hidden_dim: 8,
            head_bottleneck_dim: 4,
            n_prototypes: 6,
            ..Default::default()
        };
        let crop = CropConfig {
            global_side: 16,
            local_side: 8,
            n_local: 2,
            ..Default::default()
        };
        let cfg = DistillConfig {
            total_steps: 4,
            warmup_steps: 1,
            batch_slices: 3,
            lr: 1e-3,
            ..Default::default()
        };
        (DistillState::new(ViTParams::init(&vcfg, 0).unwrap()), cfg, crop)
    }

    #[test]
    fn trainer_is_deterministic_and_teacher_gradient_free() {
        let pool = tiny_pool();
        let (st, cfg, crop) = tiny_setup();
        let mut a = Pretrainer::new(st.clone(), &pool, BTreeSet::new(), cfg.clone(), crop.clone()).unwrap();
        let mut b = Pretrainer::new(st, &pool, BTreeSet::new(), cfg, crop).unwrap();
        a.run(|s| {
            assert_eq!(s.teacher_grad_abs, 0.0);
            assert!(s.min_excess_entropy >= -1e-6);
        })
        .unwrap();
        b.run(|_| {}).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.state, b.state);
        assert_ne!(a.state.teacher, a.state.student);
    }

    #[test]
    fn frozen_teacher_and_center_with_unit_momenta() {
        let pool = tiny_pool();
        let (st, mut cfg, crop) = tiny_setup();
        cfg.ema_momentum = 1.0;
        cfg.center_momentum = 1.0;
        let teacher = st.teacher.clone();
        let center = st.center.clone();
        let mut t = Pretrainer::new(st, &pool, BTreeSet::new(), cfg, crop).unwrap();
        t.run(|_| {}).unwrap();
        assert_eq!(t.state.teacher, teacher);
        assert_eq!(t.state.center, center);
    }

    #[test]
    fn held_out_subjects_are_rejected() {
        let pool = tiny_pool();
        let (st, cfg, crop) = tiny_setup();
        let held: BTreeSet<String> = [pool[0].subject_id.clone()].into();
        assert!(matches!(
            Pretrainer::new(st, &pool, held, cfg, crop),
            Err(Error::LeakageDetected(_))
        ));
    }

    #[test]
    fn resume_reproduces_trace() {
        let pool = tiny_pool();
        let (st, mut cfg, crop) = tiny_setup();
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut full = Pretrainer::new(st, &pool, BTreeSet::new(), cfg.clone(), crop.clone())
            .unwrap()
            .with_checkpoints(dir.path());
        full.run(|_| {}).unwrap();
        let resumed_state = DistillState::load(&dir.path().join("checkpoint_000002.vdck")).unwrap();
        let mut resumed = Pretrainer::new(resumed_state, &pool, BTreeSet::new(), cfg, crop).unwrap();
        resumed.run(|_| {}).unwrap();
        assert_eq!(resumed.trace, full.trace[2..]);
        assert_eq!(resumed.state, full.state);
    }
}
