//! Volumetric scans, subjects, and dataset ingestion.
//!
//! A [`Volume`] is stored slice-major: axial slice `d` is the contiguous
//! row-major `height × width` image `data[d*H*W .. (d+1)*H*W]`. This matches
//! NIfTI on-disk order with `dim[1] = width`, `dim[2] = height`, `dim[3] = depth`,
//! so the parser never transposes.

pub mod manifest;
pub mod nifti;
pub mod phantom;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest_subjects, DatasetManifest, ManifestEntry};
pub use nifti::{parse_nifti, parse_nifti_header, write_nifti, NiftiHeader};
pub use phantom::{generate_phantom, generate_phantom_with, PhantomClass, PhantomStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    Flair,
}

impl Modality {
    /// Fixed channel order used when stacking.
    pub const ALL: [Modality; 3] = [Modality::T1, Modality::T2, Modality::Flair];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Modality::T1),
            "T2" => Ok(Modality::T2),
            "FLAIR" => Ok(Modality::Flair),
            other => Err(Error::InvalidVolume(format!("unknown modality {other:?}"))),
        }
    }
}

/// Grid extent `(height, width, depth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Dims {
            height,
            width,
            depth,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (d * self.height + h) * self.width + w
    }
}

/// One registered scan of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f32>,
    /// Voxel size in mm along (height, width, depth).
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub subject_id: String,
}

impl Volume {
    pub fn new(
        dims: Dims,
        data: Vec<f32>,
        spacing: [f32; 3],
        modality: Modality,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let v = Volume {
            dims,
            data,
            spacing,
            modality,
            subject_id: subject_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.height == 0 || d.width == 0 || d.depth == 0 {
            return Err(Error::InvalidVolume(format!("zero extent {d:?}")));
        }
        if self.data.len() != d.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} != {}",
                self.data.len(),
                d.len()
            )));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.dims.index(h, w, d)]
    }

    /// Axial slice `d` as a row-major `height × width` image.
    pub fn slice(&self, d: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.data[d * n..(d + 1) * n]
    }
}

/// Integer label volume sharing a subject's grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn slice(&self, d: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.data[d * n..(d + 1) * n]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.data.contains(&label)
    }
}

/// Phantom and dataset segmentation labels.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const TISSUE: u8 = 1;
    pub const VENTRICLE: u8 = 2;
    pub const LESION: u8 = 3;
    pub const NUM_CLASSES: usize = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub volumes: BTreeMap<Modality, Volume>,
    pub label: Option<usize>,
    pub seg_mask: Option<LabelVolume>,
}

impl SubjectRecord {
    /// Checks that every volume shares one grid and the mask labels are in range.
    pub fn validate(&self, num_seg_classes: usize) -> Result<()> {
        let dims = self.dims()?;
        for v in self.volumes.values() {
            if v.dims != dims {
                return Err(Error::InvalidVolume(format!(
                    "subject {}: {} grid {:?} differs from {:?}",
                    self.subject_id, v.modality, v.dims, dims
                )));
            }
        }
        if let Some(mask) = &self.seg_mask {
            if mask.dims != dims {
                return Err(Error::InvalidVolume(format!(
                    "subject {}: mask grid {:?} differs from {:?}",
                    self.subject_id, mask.dims, dims
                )));
            }
            if let Some(&bad) = mask.data.iter().find(|&&l| l as usize >= num_seg_classes) {
                return Err(Error::InvalidVolume(format!(
                    "subject {}: mask label {bad} >= {num_seg_classes}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<Dims> {
        self.volumes
            .values()
            .next()
            .map(|v| v.dims)
            .ok_or_else(|| Error::NoModalities(self.subject_id.clone()))
    }
}
