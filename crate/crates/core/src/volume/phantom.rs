//! Synthetic multi-contrast brain phantoms.
//!
//! Each phantom is an ellipsoidal brain with a central ventricle and, for the
//! lesion class, one to three ellipsoidal lesions. Tissue intensity profiles
//! differ per modality: T1 has bright tissue and a dark ventricle, T2 a bright
//! ventricle, FLAIR mid-grey tissue with suppressed fluid and bright lesions.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{labels, Dims, LabelVolume, Modality, SubjectRecord, Volume};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomClass {
    Healthy,
    Lesion,
}

impl PhantomClass {
    pub fn label(self) -> usize {
        match self {
            PhantomClass::Healthy => 0,
            PhantomClass::Lesion => 1,
        }
    }
}

/// Acquisition style. Two corpora generated with different styles stand in
/// for two scanners / cohorts in cross-dataset experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomStyle {
    pub noise_sigma: f32,
    /// Global multiplicative gain applied to every modality.
    pub gain: f32,
    /// Peak amplitude of a linear intensity ramp across the width axis.
    pub bias_field: f32,
    pub spacing: [f32; 3],
}

impl Default for PhantomStyle {
    fn default() -> Self {
        PhantomStyle {
            noise_sigma: 0.05,
            gain: 1.0,
            bias_field: 0.0,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl PhantomStyle {
    /// A visibly different acquisition: noisier, darker, with a bias ramp.
    pub fn shifted() -> Self {
        PhantomStyle {
            noise_sigma: 0.08,
            gain: 0.85,
            bias_field: 0.15,
            spacing: [1.0, 1.0, 1.5],
        }
    }
}

/// Mean intensity per label, indexed `[background, tissue, ventricle, lesion]`.
fn profile(m: Modality) -> [f32; 4] {
    match m {
        Modality::T1 => [0.0, 0.80, 0.20, 0.90],
        Modality::T2 => [0.0, 0.45, 1.00, 0.95],
        Modality::Flair => [0.0, 0.60, 0.15, 1.30],
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
}

impl Ellipsoid {
    fn norm2(&self, p: [f32; 3]) -> f32 {
        (0..3)
            .map(|i| {
                let t = (p[i] - self.center[i]) / self.radii[i];
                t * t
            })
            .sum()
    }

    fn contains(&self, p: [f32; 3]) -> bool {
        self.norm2(p) <= 1.0
    }
}

pub fn generate_phantom(seed: u64, class: PhantomClass, size: [usize; 3]) -> Result<SubjectRecord> {
    generate_phantom_with(seed, class, size, &PhantomStyle::default(), &format!("phantom-{seed}"))
}

/// Generates one subject. `size` is `(height, width, depth)`.
pub fn generate_phantom_with(
    seed: u64,
    class: PhantomClass,
    size: [usize; 3],
    style: &PhantomStyle,
    subject_id: &str,
) -> Result<SubjectRecord> {
    if size.iter().any(|&s| s < 16) {
        return Err(Error::SizeTooSmall(size));
    }
    let dims = Dims::new(size[0], size[1], size[2]);
    let ext = [size[0] as f32, size[1] as f32, size[2] as f32];
    let mut rng = rng_from(seed);

    let jitter = |rng: &mut crate::rng::Rng, lo: f32, hi: f32| rng.random_range(lo..hi);
    let center = [
        ext[0] * (0.5 + jitter(&mut rng, -0.03, 0.03)),
        ext[1] * (0.5 + jitter(&mut rng, -0.03, 0.03)),
        ext[2] * (0.5 + jitter(&mut rng, -0.03, 0.03)),
    ];
    let brain = Ellipsoid {
        center,
        radii: [
            ext[0] * jitter(&mut rng, 0.38, 0.45),
            ext[1] * jitter(&mut rng, 0.36, 0.43),
            ext[2] * jitter(&mut rng, 0.40, 0.46),
        ],
    };
    let ventricle = Ellipsoid {
        center: [center[0] - ext[0] * 0.04, center[1], center[2]],
        radii: [
            ext[0] * jitter(&mut rng, 0.16, 0.20),
            ext[1] * jitter(&mut rng, 0.12, 0.15),
            ext[2] * jitter(&mut rng, 0.26, 0.32),
        ],
    };

    let mut lesions = Vec::new();
    if class == PhantomClass::Lesion {
        let count = rng.random_range(1..=3);
        let side = ext[0].min(ext[1]);
        while lesions.len() < count {
            let r = side * jitter(&mut rng, 0.10, 0.14);
            let rd = ext[2] * jitter(&mut rng, 0.14, 0.22);
            // centre inside the brain, away from the rim, outside the ventricle
            let u = [
                jitter(&mut rng, -0.6, 0.6),
                jitter(&mut rng, -0.6, 0.6),
                jitter(&mut rng, -0.5, 0.5),
            ];
            let c = [
                brain.center[0] + u[0] * brain.radii[0],
                brain.center[1] + u[1] * brain.radii[1],
                brain.center[2] + u[2] * brain.radii[2],
            ];
            if brain.norm2(c) > 0.45 || ventricle.norm2(c) < 1.6 {
                continue;
            }
            lesions.push(Ellipsoid {
                center: c,
                radii: [r * jitter(&mut rng, 0.85, 1.15), r, rd],
            });
        }
    }

    let mut mask = vec![labels::BACKGROUND; dims.len()];
    for d in 0..dims.depth {
        for h in 0..dims.height {
            for w in 0..dims.width {
                let p = [h as f32 + 0.5, w as f32 + 0.5, d as f32 + 0.5];
                let label = if !brain.contains(p) {
                    labels::BACKGROUND
                } else if ventricle.contains(p) {
                    labels::VENTRICLE
                } else if lesions.iter().any(|l| l.contains(p)) {
                    labels::LESION
                } else {
                    labels::TISSUE
                };
                mask[dims.index(h, w, d)] = label;
            }
        }
    }

    let noise = Normal::new(0.0f32, style.noise_sigma.max(0.0)).expect("finite sigma");
    let mut volumes = BTreeMap::new();
    for m in Modality::ALL {
        let means = profile(m);
        let gain = style.gain * jitter(&mut rng, 0.9, 1.1);
        let mut data = Vec::with_capacity(dims.len());
        for d in 0..dims.depth {
            for h in 0..dims.height {
                for w in 0..dims.width {
                    let label = mask[dims.index(h, w, d)] as usize;
                    let ramp = 1.0 + style.bias_field * (2.0 * w as f32 / ext[1] - 1.0);
                    let clean = means[label] * gain * ramp;
                    data.push(clean + noise.sample(&mut rng));
                }
            }
        }
        volumes.insert(m, Volume::new(dims, data, style.spacing, m, subject_id)?);
    }

    Ok(SubjectRecord {
        subject_id: subject_id.to_string(),
        volumes,
        label: Some(class.label()),
        seg_mask: Some(LabelVolume { dims, data: mask }),
    })
}
