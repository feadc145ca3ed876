//! Run configuration: a TOML file whose sections mirror the module configs,
//! plus `section.key=value` overrides.
//!
//! ```toml
//! [phantom]
//! n_subjects = 200
//! size = [48, 48, 24]
//!
//! [slice]          # pretraining slices
//! num_slices = 16
//! target_side = 96
//!
//! [cls_slice]      # classification slices
//! [seg_slice]      # segmentation slices
//! [crop]
//! [vit]
//! [distill]
//! [classifier]
//! [segment]
//! [eval]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::CropConfig;
use crate::distill::DistillConfig;
use crate::downstream::{ClassifierConfig, SegConfig};
use crate::error::{Error, Result};
use crate::slices::{Normalization, SliceConfig};
use crate::vit::ViTConfig;
use crate::rng::mix;
use crate::volume::{generate_phantom_with, PhantomClass, PhantomStyle, SubjectRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleName {
    Default,
    Shifted,
}

impl StyleName {
    pub fn style(self) -> PhantomStyle {
        match self {
            StyleName::Default => PhantomStyle::default(),
            StyleName::Shifted => PhantomStyle::shifted(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dataset: String,
    pub n_subjects: usize,
    /// `(height, width, depth)`
    pub size: [usize; 3],
    /// Share of subjects generated with lesions, interleaved over indices.
    pub lesion_fraction: f64,
    pub style: StyleName,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dataset: "phantom".into(),
            n_subjects: 200,
            size: [48, 48, 24],
            lesion_fraction: 0.5,
            style: StyleName::Default,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Subject `i` has lesions when `floor((i + 1) f) > floor(i f)`.
    pub fn class_of(&self, i: usize) -> PhantomClass {
        let f = self.lesion_fraction;
        if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            PhantomClass::Lesion
        } else {
            PhantomClass::Healthy
        }
    }

    pub fn generate(&self) -> Result<Vec<SubjectRecord>> {
        let style = self.style.style();
        (0..self.n_subjects)
            .map(|i| {
                generate_phantom_with(
                    mix(&[self.seed, i as u64]),
                    self.class_of(i),
                    self.size,
                    &style,
                    &format!("{}-{i:04}", self.dataset),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_folds: usize,
    pub split_seed: u64,
    pub fractions: Vec<f64>,
    /// Segmentation classes scored by Dice and HD95.
    pub seg_classes: Vec<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_folds: 5,
            split_seed: 0,
            fractions: vec![0.1, 0.2, 0.5, 1.0],
            seg_classes: vec![2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomConfig,
    pub slice: SliceConfig,
    pub cls_slice: SliceConfig,
    pub seg_slice: SliceConfig,
    pub crop: CropConfig,
    pub vit: ViTConfig,
    pub distill: DistillConfig,
    pub classifier: ClassifierConfig,
    pub segment: SegConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    /// Desk-scale defaults: tiny encoder, 48×48×24 phantoms.
    fn default() -> Self {
        Config {
            phantom: PhantomConfig::default(),
            slice: SliceConfig {
                num_slices: 16,
                target_side: 96,
                normalization: Normalization::PerVolumeZscore,
            },
            cls_slice: SliceConfig {
                num_slices: 8,
                target_side: 64,
                normalization: Normalization::PerVolumeZscore,
            },
            seg_slice: SliceConfig {
                num_slices: 24,
                target_side: 96,
                normalization: Normalization::PerVolumeZscore,
            },
            crop: CropConfig::default(),
            vit: ViTConfig::default(),
            distill: DistillConfig::default(),
            classifier: ClassifierConfig::default(),
            segment: SegConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sets `path` (dot-separated) in a TOML tree, creating tables as needed.
fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {path:?}")))?;
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} in {path:?} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    /// Builds a config from optional TOML text and `key=value` overrides.
    pub fn from_parts(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = match text {
            Some(t) => t.parse().map_err(|e| Error::Config(format!("{e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Config = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_parts(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.slice, &self.cls_slice, &self.seg_slice] {
            s.validate()?;
        }
        self.crop.validate()?;
        self.vit.validate()?;
        self.distill.validate()?;
        self.classifier.validate()?;
        self.segment.validate()?;
        if self.eval.n_folds < 2 {
            return Err(Error::Config("eval.n_folds must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.phantom.lesion_fraction) {
            return Err(Error::Config("phantom.lesion_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
