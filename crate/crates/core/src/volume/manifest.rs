//! Dataset manifests.
//!
//! ```json
//! {"dataset": "NACC",
//!  "entries": [{"subject": "sub-001", "t1": "sub-001_t1.nii", "t2": null,
//!               "flair": "sub-001_flair.nii", "label": 1, "seg": null}]}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{nifti, LabelVolume, Modality, SubjectRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub t1: Option<PathBuf>,
    #[serde(default)]
    pub t2: Option<PathBuf>,
    #[serde(default)]
    pub flair: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub seg: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn path(&self, m: Modality) -> Option<&Path> {
        match m {
            Modality::T1 => self.t1.as_deref(),
            Modality::T2 => self.t2.as_deref(),
            Modality::Flair => self.flair.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.subject.as_str()) {
                return Err(Error::Config(format!(
                    "manifest {}: duplicate subject {:?}",
                    self.dataset, e.subject
                )));
            }
            if Modality::ALL.iter().all(|&m| e.path(m).is_none()) {
                return Err(Error::NoModalities(e.subject.clone()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.subject.clone()).collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads every volume a manifest references. Modality and subject id come
/// from the manifest, not from the file headers.
pub fn load_manifest_subjects(manifest: &DatasetManifest, base_dir: &Path) -> Result<Vec<SubjectRecord>> {
    manifest.validate()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let mut volumes = BTreeMap::new();
            for m in Modality::ALL {
                if let Some(p) = e.path(m) {
                    let mut v = nifti::read_nifti_file(&resolve(base_dir, p))?;
                    v.modality = m;
                    v.subject_id = e.subject.clone();
                    volumes.insert(m, v);
                }
            }
            let seg_mask = match &e.seg {
                Some(p) => {
                    let v = nifti::read_nifti_file(&resolve(base_dir, p))?;
                    let data = v
                        .data
                        .iter()
                        .map(|&x| {
                            if x < 0.0 || x.fract() != 0.0 || x > 255.0 {
                                Err(Error::InvalidVolume(format!(
                                    "subject {}: non-integer mask value {x}",
                                    e.subject
                                )))
                            } else {
                                Ok(x as u8)
                            }
                        })
                        .collect::<Result<Vec<u8>>>()?;
                    Some(LabelVolume { dims: v.dims, data })
                }
                None => None,
            };
            let s = SubjectRecord {
                subject_id: e.subject.clone(),
                volumes,
                label: e.label,
                seg_mask,
            };
            s.validate(usize::from(u8::MAX) + 1)?;
            Ok(s)
        })
        .collect()
}

/// Writes subjects as NIfTI files plus a manifest into `dir`.
pub fn write_corpus(dataset: &str, subjects: &[SubjectRecord], dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut paths: BTreeMap<Modality, PathBuf> = BTreeMap::new();
        for (m, v) in &s.volumes {
            let name = PathBuf::from(format!("{}_{}.nii", s.subject_id, m.as_str().to_lowercase()));
            nifti::write_nifti_file(&dir.join(&name), v)?;
            paths.insert(*m, name);
        }
        let seg = match &s.seg_mask {
            Some(mask) => {
                let name = PathBuf::from(format!("{}_seg.nii", s.subject_id));
                let spacing = s.volumes.values().next().map_or([1.0; 3], |v| v.spacing);
                let v = super::Volume::new(
                    mask.dims,
                    mask.data.iter().map(|&l| f32::from(l)).collect(),
                    spacing,
                    Modality::T1,
                    s.subject_id.clone(),
                )?;
                nifti::write_nifti_file(&dir.join(&name), &v)?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            subject: s.subject_id.clone(),
            t1: paths.remove(&Modality::T1),
            t2: paths.remove(&Modality::T2),
            flair: paths.remove(&Modality::Flair),
            label: s.label,
            seg,
        });
    }
    let manifest = DatasetManifest {
        dataset: dataset.to_string(),
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
