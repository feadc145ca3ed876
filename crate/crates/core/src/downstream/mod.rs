//! Fine-tuning adapters over a pretrained or randomly initialised encoder:
//! volume-level classification and slice-wise segmentation.

pub mod classify;
pub mod segment;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Scalar, Tensor, TensorTable};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{fnv1a, rng_for};
use crate::slices::{extract_slices, SliceConfig};
use crate::vit::{sidecar_path, trunc_normal, ViTConfig, ViTParams};
use crate::volume::SubjectRecord;

pub use classify::{
    classify_volume, finetune_classifier, predict_volumes, write_predictions, ClassifierConfig, ClassifierRun,
    EpochRecord,
};
pub use segment::{
    assemble_volume, finetune_segmentation, seg_loss, seg_loss_graph, segment_slice, segment_subject, SegConfig,
    SegEval, SegRun,
};

const HEAD_INIT_STREAM: u64 = 0x4EAD;

/// Task adapter on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// Mean-pooled slice class tokens → linear → softmax.
    Classifier { n_classes: usize },
    /// Per-patch linear → bilinear upsampling → per-pixel softmax.
    SegDecoder { n_classes: usize },
}

impl HeadKind {
    pub fn n_classes(self) -> usize {
        match self {
            HeadKind::Classifier { n_classes } | HeadKind::SegDecoder { n_classes } => n_classes,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Classifier { .. } => "classifier",
            HeadKind::SegDecoder { .. } => "decoder",
        }
    }

    fn validate(self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::Config(format!("head needs at least 2 classes, got {}", self.n_classes())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    vit: ViTConfig,
    head: HeadKind,
}

/// Encoder (the backbone without its distillation head) plus a task head.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    pub vit: ViTConfig,
    pub head: HeadKind,
    pub encoder: TensorTable,
    pub head_params: TensorTable,
}

impl DownstreamModel {
    /// Drops the `head.*` tensors of `backbone` and attaches a fresh task head.
    /// The head initialisation depends only on `seed`, so pretrained and random
    /// arms share it exactly.
    pub fn from_backbone(backbone: &ViTParams, head: HeadKind, seed: u64) -> Result<Self> {
        head.validate()?;
        let mut encoder = TensorTable::new();
        for (name, t) in backbone.tensors.iter() {
            if !name.starts_with("head.") {
                encoder.insert(name, t.clone());
            }
        }
        let d = backbone.config.embed_dim;
        let c = head.n_classes();
        let mut rng = rng_for(&[seed, HEAD_INIT_STREAM]);
        let mut head_params = TensorTable::new();
        let p = head.prefix();
        head_params.insert(format!("{p}.weight"), Tensor::new(vec![d, c], trunc_normal(d * c, 0.02, &mut rng)));
        head_params.insert(format!("{p}.bias"), Tensor::new(vec![c], vec![0.0; c]));
        Ok(DownstreamModel {
            vit: backbone.config.clone(),
            head,
            encoder,
            head_params,
        })
    }

    /// Random encoder from `encoder_seed`, head from `head_seed`.
    pub fn random(vit: &ViTConfig, head: HeadKind, encoder_seed: u64, head_seed: u64) -> Result<Self> {
        Self::from_backbone(&ViTParams::init(vit, encoder_seed)?, head, head_seed)
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Registers encoder and head in `g`. A frozen encoder is bound as
    /// constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, frozen_encoder: bool) -> (Bound, Bound) {
        let enc = Bound::bind(g, &self.encoder, "", !frozen_encoder);
        let head = Bound::bind(g, &self.head_params, "", true);
        (enc, head)
    }

    /// Every tensor, encoder first.
    pub fn table(&self) -> TensorTable {
        let mut t = self.encoder.clone();
        t.extend_prefixed("", &self.head_params);
        t
    }

    /// Stable hash of every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.table().to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.table().save(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            vit: self.vit.clone(),
            head: self.head,
        })?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let Sidecar { vit, head } = serde_json::from_str(&json)?;
        head.validate()?;
        vit.validate()?;
        let all = TensorTable::load(path)?;
        let mut encoder = TensorTable::new();
        let mut head_params = TensorTable::new();
        let p = head.prefix();
        for (name, t) in all.iter() {
            if name.starts_with(&format!("{p}.")) {
                head_params.insert(name, t.clone());
            } else {
                encoder.insert(name, t.clone());
            }
        }
        for (name, shape) in vit.param_shapes() {
            if !name.starts_with("head.") {
                encoder.expect(&name, &shape)?;
            }
        }
        let (d, c) = (vit.embed_dim, head.n_classes());
        head_params.expect(&format!("{p}.weight"), &[d, c])?;
        head_params.expect(&format!("{p}.bias"), &[c])?;
        Ok(DownstreamModel {
            vit,
            head,
            encoder,
            head_params,
        })
    }
}

/// Preprocessed slices of one subject at the model's input side.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSlices {
    pub subject_id: String,
    pub label: Option<usize>,
    pub slice_indices: Vec<usize>,
    pub images: Vec<Image>,
    pub masks: Vec<Option<Mask>>,
}

impl VolumeSlices {
    pub fn from_subject(subject: &SubjectRecord, cfg: &SliceConfig) -> Result<Self> {
        let slices = extract_slices(subject, cfg)?;
        if slices.is_empty() {
            return Err(Error::NoSlices(subject.subject_id.clone()));
        }
        Ok(VolumeSlices {
            subject_id: subject.subject_id.clone(),
            label: subject.label,
            slice_indices: slices.iter().map(|s| s.slice_index).collect(),
            masks: slices.iter().map(|s| s.seg_slice.clone()).collect(),
            images: slices.into_iter().map(|s| s.pixels).collect(),
        })
    }
}

pub fn prepare_all(subjects: &[SubjectRecord], cfg: &SliceConfig) -> Result<Vec<VolumeSlices>> {
    subjects.iter().map(|s| VolumeSlices::from_subject(s, cfg)).collect()
}

/// Training, validation and held-out ids must be pairwise disjoint.
pub fn check_disjoint(train: &[VolumeSlices], val: &[VolumeSlices], held_out: &BTreeSet<String>) -> Result<()> {
    let train_ids: BTreeSet<&str> = train.iter().map(|v| v.subject_id.as_str()).collect();
    for v in val {
        if train_ids.contains(v.subject_id.as_str()) {
            return Err(Error::LeakageDetected(format!(
                "subject {} is in training and validation",
                v.subject_id
            )));
        }
    }
    for (name, set) in [("training", train), ("validation", val)] {
        if let Some(v) = set.iter().find(|v| held_out.contains(&v.subject_id)) {
            return Err(Error::LeakageDetected(format!(
                "{name} subject {} is held out for testing",
                v.subject_id
            )));
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn backbone_head_dropped_and_roundtrip() {
        let vit = tiny_vit();
        let backbone = ViTParams::init(&vit, 1).unwrap();
        let m = DownstreamModel::from_backbone(&backbone, HeadKind::Classifier { n_classes: 2 }, 5).unwrap();
        assert!(m.encoder.names().iter().all(|n| !n.starts_with("head.")));
        assert_eq!(m.head_params.names(), vec!["classifier.weight", "classifier.bias"]);
        let r = DownstreamModel::random(&vit, HeadKind::Classifier { n_classes: 2 }, 9, 5).unwrap();
        assert_eq!(r.head_params, m.head_params);
        assert_ne!(r.encoder, m.encoder);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vdck");
        m.save(&path).unwrap();
        let back = DownstreamModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }

    #[test]
    fn rejects_one_class_head() {
        let backbone = ViTParams::init(&tiny_vit(), 1).unwrap();
        assert!(DownstreamModel::from_backbone(&backbone, HeadKind::SegDecoder { n_classes: 1 }, 0).is_err());
    }

    #[test]
    fn disjointness() {
        let cfg = SliceConfig {
            num_slices: 2,
            target_side: 32,
            ..Default::default()
        };
        let vs = prepare_all(&phantoms(3, 0), &cfg).unwrap();
        let none = BTreeSet::new();
        check_disjoint(&vs[..2], &vs[2..], &none).unwrap();
        assert!(matches!(check_disjoint(&vs[..2], &vs[1..], &none), Err(Error::LeakageDetected(_))));
        let test: BTreeSet<String> = [vs[0].subject_id.clone()].into();
        assert!(matches!(check_disjoint(&vs[..2], &vs[2..], &test), Err(Error::LeakageDetected(_))));
    }
}
