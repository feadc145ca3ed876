//! 3D → 2D: axial slice sampling, modality stacking, per-volume intensity
//! normalisation, and resizing to the model's input side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image, Mask, CHANNELS};
use crate::volume::{Modality, SubjectRecord, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub pixels: Image,
    pub subject_id: String,
    pub slice_index: usize,
    pub label: Option<usize>,
    pub seg_slice: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerVolumeZscore,
    PerVolumeMinmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    pub num_slices: usize,
    pub target_side: usize,
    pub normalization: Normalization,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            num_slices: 150,
            target_side: 224,
            normalization: Normalization::PerVolumeZscore,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slices < 1 {
            return Err(Error::Config("slice.num_slices must be >= 1".into()));
        }
        if self.target_side < 16 {
            return Err(Error::Config("slice.target_side must be >= 16".into()));
        }
        Ok(())
    }
}

/// Evenly spaced axial indices, endpoint-inclusive:
/// `round(k * (depth - 1) / (num_slices - 1))`. Every slice when
/// `num_slices > depth`, the middle slice when `num_slices == 1`.
pub fn sample_slice_indices(num_slices: usize, depth: usize) -> Result<Vec<usize>> {
    if num_slices == 0 {
        return Err(Error::NonPositiveArgument("num_slices"));
    }
    if depth == 0 {
        return Err(Error::NonPositiveArgument("depth"));
    }
    if num_slices > depth {
        return Ok((0..depth).collect());
    }
    if num_slices == 1 {
        return Ok(vec![depth / 2]);
    }
    // round-half-up of a / b in integers: floor((2a + b) / 2b)
    let b = num_slices - 1;
    Ok((0..num_slices)
        .map(|k| (2 * k * (depth - 1) + b) / (2 * b))
        .collect())
}

/// Source modality for each of the three channels. Channels follow the fixed
/// order (T1, T2, FLAIR); a missing modality's slot is filled by the earliest
/// present one, so a single modality lands in all three channels.
pub fn channel_sources(subject: &SubjectRecord) -> Result<[Modality; CHANNELS]> {
    let first = *subject
        .volumes
        .keys()
        .next()
        .ok_or_else(|| Error::NoModalities(subject.subject_id.clone()))?;
    Ok(Modality::ALL.map(|m| if subject.volumes.contains_key(&m) { m } else { first }))
}

pub fn stack_modalities(subject: &SubjectRecord, slice_index: usize) -> Result<SliceSample> {
    let sources = channel_sources(subject)?;
    let dims = subject.dims()?;
    if slice_index >= dims.depth {
        return Err(Error::IndexOutOfRange {
            index: slice_index,
            depth: dims.depth,
        });
    }
    let chans = sources.map(|m| subject.volumes[&m].slice(slice_index));
    let seg_slice = subject.seg_mask.as_ref().map(|mask| Mask {
        height: dims.height,
        width: dims.width,
        data: mask.slice(slice_index).to_vec(),
    });
    Ok(SliceSample {
        pixels: Image::from_channels(dims.height, dims.width, chans),
        subject_id: subject.subject_id.clone(),
        slice_index,
        label: subject.label,
        seg_slice,
    })
}

/// Whole-volume intensity statistics (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeStats {
    pub mean: f64,
    pub std: f64,
    pub min: f32,
    pub max: f32,
}

impl VolumeStats {
    pub fn of(v: &Volume) -> Self {
        let n = v.data.len() as f64;
        let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = v
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        VolumeStats {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

/// Statistics of each channel's source volume, in channel order.
pub fn channel_stats(subject: &SubjectRecord) -> Result<[VolumeStats; CHANNELS]> {
    let sources = channel_sources(subject)?;
    Ok(sources.map(|m| VolumeStats::of(&subject.volumes[&m])))
}

pub fn intensity_normalize(
    slice: &SliceSample,
    mode: Normalization,
    stats: &[VolumeStats; CHANNELS],
) -> SliceSample {
    let coeffs = stats.map(|s| match mode {
        Normalization::PerVolumeZscore => {
            let sigma = s.std.max(1e-6);
            (1.0 / sigma, -s.mean / sigma)
        }
        Normalization::PerVolumeMinmax => {
            let range = (s.max - s.min) as f64;
            if range > 0.0 {
                (1.0 / range, -(s.min as f64) / range)
            } else {
                (0.0, 0.0)
            }
        }
    });
    let mut out = slice.clone();
    for px in out.pixels.data.chunks_exact_mut(CHANNELS) {
        for (x, &(a, b)) in px.iter_mut().zip(&coeffs) {
            *x = (a * *x as f64 + b) as f32;
        }
    }
    out
}

/// Resamples pixels bilinearly and any mask by nearest neighbour to a
/// `target_side × target_side` square.
pub fn resize_slice(slice: &SliceSample, target_side: usize) -> SliceSample {
    SliceSample {
        pixels: image::resize_bilinear(&slice.pixels, target_side, target_side),
        seg_slice: slice
            .seg_slice
            .as_ref()
            .map(|m| image::resize_nearest(m, target_side, target_side)),
        subject_id: slice.subject_id.clone(),
        slice_index: slice.slice_index,
        label: slice.label,
    }
}

/// sample → stack → normalise → resize, for every sampled index of a subject.
pub fn extract_slices(subject: &SubjectRecord, cfg: &SliceConfig) -> Result<Vec<SliceSample>> {
    let dims = subject.dims()?;
    let stats = channel_stats(subject)?;
    sample_slice_indices(cfg.num_slices, dims.depth)?
        .into_iter()
        .map(|d| {
            let s = stack_modalities(subject, d)?;
            let s = intensity_normalize(&s, cfg.normalization, &stats);
            Ok(resize_slice(&s, cfg.target_side))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::phantom::{generate_phantom, PhantomClass};
    use crate::volume::Dims;
    use proptest::prelude::*;

    #[test]
    fn index_examples() {
        assert_eq!(sample_slice_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_slice_indices(3, 5).unwrap(), vec![0, 2, 4]);
        assert_eq!(sample_slice_indices(4, 150).unwrap(), vec![0, 50, 99, 149]);
        assert_eq!(sample_slice_indices(9, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(sample_slice_indices(1, 7).unwrap(), vec![3]);
        assert!(matches!(sample_slice_indices(0, 4), Err(Error::NonPositiveArgument(_))));
        assert!(matches!(sample_slice_indices(2, 0), Err(Error::NonPositiveArgument(_))));
    }

    #[test]
    fn index_formula_matches_float_rounding() {
        for depth in 1..60usize {
            for n in 2..=depth {
                let got = sample_slice_indices(n, depth).unwrap();
                let want: Vec<usize> = (0..n)
                    .map(|k| (k as f64 * (depth - 1) as f64 / (n - 1) as f64 + 0.5).floor() as usize)
                    .collect();
                assert_eq!(got, want, "n={n} depth={depth}");
            }
        }
    }

    proptest! {
        #[test]
        fn indices_sorted_unique_in_range(n in 1usize..300, depth in 1usize..300) {
            let idx = sample_slice_indices(n, depth).unwrap();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < depth));
            prop_assert_eq!(idx.len(), n.min(depth));
            if (2..=depth).contains(&n) {
                prop_assert_eq!(idx[0], 0);
                prop_assert_eq!(*idx.last().unwrap(), depth - 1);
            }
        }
    }

    fn subject_with(mods: &[Modality]) -> SubjectRecord {
        let mut s = generate_phantom(5, PhantomClass::Lesion, [16, 16, 16]).unwrap();
        s.volumes.retain(|m, _| mods.contains(m));
        s
    }

    #[test]
    fn single_modality_duplicated() {
        let s = subject_with(&[Modality::T2]);
        let slice = stack_modalities(&s, 7).unwrap();
        let t2 = s.volumes[&Modality::T2].slice(7);
        for c in 0..3 {
            let ch = slice.pixels.channel(c);
            assert!(ch.iter().zip(t2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn three_modalities_in_fixed_order() {
        let s = subject_with(&Modality::ALL);
        let slice = stack_modalities(&s, 3).unwrap();
        for (c, m) in Modality::ALL.iter().enumerate() {
            assert_eq!(slice.pixels.channel(c), s.volumes[m].slice(3));
        }
    }

    #[test]
    fn two_modalities_fill_rule() {
        let s = subject_with(&[Modality::T1, Modality::Flair]);
        assert_eq!(
            channel_sources(&s).unwrap(),
            [Modality::T1, Modality::T1, Modality::Flair]
        );
        let s = subject_with(&[Modality::T2, Modality::Flair]);
        assert_eq!(
            channel_sources(&s).unwrap(),
            [Modality::T2, Modality::T2, Modality::Flair]
        );
        let s = subject_with(&[Modality::T1, Modality::T2]);
        assert_eq!(
            channel_sources(&s).unwrap(),
            [Modality::T1, Modality::T2, Modality::T1]
        );
    }

    #[test]
    fn stacking_errors() {
        let s = subject_with(&[]);
        assert!(matches!(stack_modalities(&s, 0), Err(Error::NoModalities(_))));
        let s = subject_with(&[Modality::T1]);
        assert!(matches!(
            stack_modalities(&s, 16),
            Err(Error::IndexOutOfRange { index: 16, depth: 16 })
        ));
    }

    #[test]
    fn constant_volume_zscore_is_zero() {
        let mut s = subject_with(&[Modality::T1]);
        let v = s.volumes.get_mut(&Modality::T1).unwrap();
        v.data.iter_mut().for_each(|x| *x = 4.2);
        let stats = channel_stats(&s).unwrap();
        let out = intensity_normalize(
            &stack_modalities(&s, 2).unwrap(),
            Normalization::PerVolumeZscore,
            &stats,
        );
        assert!(out.pixels.data.iter().all(|&x| x == 0.0));
        let out = intensity_normalize(
            &stack_modalities(&s, 2).unwrap(),
            Normalization::PerVolumeMinmax,
            &stats,
        );
        assert!(out.pixels.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn minmax_affine() {
        let data: Vec<f32> = (0..=10).map(|v| v as f32).collect();
        let v = Volume::new(Dims::new(1, 11, 1), data, [1.0; 3], Modality::T1, "m").unwrap();
        let mut s = subject_with(&[]);
        s.seg_mask = None;
        s.volumes.insert(Modality::T1, v);
        let stats = channel_stats(&s).unwrap();
        let out = intensity_normalize(
            &stack_modalities(&s, 0).unwrap(),
            Normalization::PerVolumeMinmax,
            &stats,
        );
        let ch = out.pixels.channel(0);
        for (i, x) in ch.iter().enumerate() {
            assert!((x - i as f32 / 10.0).abs() < 1e-7);
        }
    }

    #[test]
    fn zscore_volume_mean_is_zero() {
        let s = generate_phantom(8, PhantomClass::Lesion, [20, 20, 18]).unwrap();
        let cfg = SliceConfig {
            num_slices: 100,
            target_side: 20,
            normalization: Normalization::PerVolumeZscore,
        };
        let slices = extract_slices(&s, &cfg).unwrap();
        assert_eq!(slices.len(), 18);
        for c in 0..3 {
            let (sum, n) = slices.iter().fold((0.0f64, 0usize), |(s, n), sl| {
                let ch = sl.pixels.channel(c);
                (s + ch.iter().map(|&x| x as f64).sum::<f64>(), n + ch.len())
            });
            assert!((sum / n as f64).abs() < 1e-6, "channel {c} mean {}", sum / n as f64);
        }
    }

    #[test]
    fn extract_resizes_pixels_and_masks() {
        let s = generate_phantom(2, PhantomClass::Lesion, [24, 20, 16]).unwrap();
        let cfg = SliceConfig {
            num_slices: 4,
            target_side: 32,
            normalization: Normalization::PerVolumeZscore,
        };
        let slices = extract_slices(&s, &cfg).unwrap();
        assert_eq!(
            slices.iter().map(|s| s.slice_index).collect::<Vec<_>>(),
            vec![0, 5, 10, 15]
        );
        for sl in &slices {
            assert_eq!((sl.pixels.height, sl.pixels.width), (32, 32));
            let m = sl.seg_slice.as_ref().unwrap();
            assert_eq!(m.data.len(), 32 * 32);
            assert!(m.data.iter().all(|&l| l < 4));
            assert!(sl.pixels.is_finite());
        }
    }
}
