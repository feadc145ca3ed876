//! Seeded augmentations: multi-crop views for self-distillation and the
//! lighter, mask-aware pipeline used for downstream fine-tuning.
//!
//! Every function is a pure function of its inputs and the RNG state handed
//! in; callers derive per-sample seeds with [`crate::rng::sample_seed`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image, Mask, Rect, CHANNELS};
use crate::rng::{rng_from, Rng};
use crate::slices::SliceSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_side: usize,
    pub local_side: usize,
    pub global_scale_range: (f64, f64),
    pub local_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter_strength: f32,
    pub blur_sigma_range: (f64, f64),
    /// Blur probability of the first global view, then of the remaining ones.
    pub blur_prob_first_global: f64,
    pub blur_prob_other_global: f64,
    pub blur_prob_local: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            n_global: 2,
            n_local: 8,
            global_side: 96,
            local_side: 64,
            global_scale_range: (0.4, 1.0),
            local_scale_range: (0.05, 0.4),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.5,
            blur_sigma_range: (0.1, 2.0),
            blur_prob_first_global: 1.0,
            blur_prob_other_global: 0.1,
            blur_prob_local: 0.1,
        }
    }
}

fn valid_scale(r: (f64, f64)) -> bool {
    r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global == 0 {
            return Err(Error::Config("crop.n_global must be >= 1".into()));
        }
        if !(self.local_side < self.global_side) || self.local_side == 0 {
            return Err(Error::Config(format!(
                "crop.local_side {} must be positive and below global_side {}",
                self.local_side, self.global_side
            )));
        }
        if !valid_scale(self.global_scale_range) || !valid_scale(self.local_scale_range) {
            return Err(Error::Config("crop scale ranges must lie within (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config("crop.jitter_strength must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_global + self.n_local
    }
}

/// Multi-crop views of one slice; global views first.
#[derive(Debug, Clone, PartialEq)]
pub struct AugSample {
    pub views: Vec<Image>,
    pub rng_seed: u64,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub const DEFAULT_ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Samples a crop rectangle covering an area fraction drawn from `scale`
/// with log-uniform aspect ratio in `ratio`. After ten rejected draws it
/// falls back to the largest centred crop with an admissible aspect.
pub fn sample_crop_rect(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut Rng,
) -> Rect {
    let area = (height * width) as f64;
    let log_ratio = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale);
        let aspect = uniform(rng, log_ratio).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return Rect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f64 / ratio.0).round() as usize).clamp(1, height))
    } else if in_ratio > ratio.1 {
        (((height as f64 * ratio.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    Rect {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

pub fn random_resized_crop(
    img: &Image,
    side: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut Rng,
) -> Image {
    let rect = sample_crop_rect(img.height, img.width, scale, ratio, rng);
    image::resize_region(img, rect, side, side)
}

/// Per-channel `(gain, offset_fraction)`; the applied offset is
/// `offset_fraction * channel range`.
pub fn sample_jitter(strength: f32, rng: &mut Rng) -> [(f32, f32); CHANNELS] {
    let s = strength as f64;
    std::array::from_fn(|_| {
        let a = uniform(rng, (1.0 - 0.4 * s, 1.0 + 0.4 * s)) as f32;
        let b = uniform(rng, (-0.2 * s, 0.2 * s)) as f32;
        (a, b)
    })
}

/// Per-channel affine brightness / contrast jitter (no hue: channels are
/// contrasts, not colours).
pub fn intensity_jitter(view: &Image, strength: f32, rng: &mut Rng) -> Image {
    if strength == 0.0 {
        return view.clone();
    }
    let params = sample_jitter(strength, rng);
    apply_jitter(view, &params)
}

pub fn apply_jitter(view: &Image, params: &[(f32, f32); CHANNELS]) -> Image {
    let coeffs: [(f32, f32); CHANNELS] = std::array::from_fn(|c| {
        let (lo, hi) = view.channel_range(c);
        (params[c].0, params[c].1 * (hi - lo))
    });
    let mut out = view.clone();
    for px in out.data.chunks_exact_mut(CHANNELS) {
        for (x, (a, b)) in px.iter_mut().zip(coeffs) {
            *x = a * *x + b;
        }
    }
    out
}

/// Normalised 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / total) as f32).collect()
}

/// Edge-inclusive reflection (`d c b a | a b c d`); periodic with period 2n,
/// which keeps the blur mean-preserving.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let p = 2 * n as i64;
    let m = i.rem_euclid(p) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Separable Gaussian blur with reflect padding; `sigma = 0` is the identity.
pub fn gaussian_blur(view: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return view.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (view.height, view.width);
    let mut tmp = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0f32;
                for (t, &kw) in k.iter().enumerate() {
                    acc += kw * view.get(y, reflect(x as i64 + t as i64 - r, w), c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0f32;
                for (t, &kw) in k.iter().enumerate() {
                    acc += kw * tmp.get(reflect(y as i64 + t as i64 - r, h), x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

pub fn gaussian_noise(view: &Image, sigma: f32, rng: &mut Rng) -> Image {
    if sigma <= 0.0 {
        return view.clone();
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let mut out = view.clone();
    for x in &mut out.data {
        *x += normal.sample(rng);
    }
    out
}

/// `n_global` global and `n_local` local views, each through
/// crop → flip → jitter → blur with view-dependent probabilities.
pub fn make_multicrop(slice: &SliceSample, cfg: &CropConfig, seed: u64) -> Result<AugSample> {
    let img = &slice.pixels;
    let short = img.height.min(img.width);
    if short < cfg.global_side {
        return Err(Error::SliceTooSmall {
            side: short,
            required: cfg.global_side,
        });
    }
    let mut rng = rng_from(seed);
    let mut views = Vec::with_capacity(cfg.n_views());
    for v in 0..cfg.n_views() {
        let global = v < cfg.n_global;
        let (side, scale, blur_p) = if global {
            let p = if v == 0 {
                cfg.blur_prob_first_global
            } else {
                cfg.blur_prob_other_global
            };
            (cfg.global_side, cfg.global_scale_range, p)
        } else {
            (cfg.local_side, cfg.local_scale_range, cfg.blur_prob_local)
        };
        let mut view = random_resized_crop(img, side, scale, DEFAULT_ASPECT_RANGE, &mut rng);
        if rng.random_bool(cfg.flip_prob) {
            view = view.flip_horizontal();
        }
        if rng.random_bool(cfg.jitter_prob) {
            view = intensity_jitter(&view, cfg.jitter_strength, &mut rng);
        }
        if rng.random_bool(blur_p) {
            let sigma = uniform(&mut rng, cfg.blur_sigma_range);
            view = gaussian_blur(&view, sigma);
        }
        views.push(view);
    }
    Ok(AugSample {
        views,
        rng_seed: seed,
    })
}

/// Fine-tuning augmentation: flip, rotation, zoom, contrast, intensity shift,
/// Gaussian noise. Geometric transforms are shared between image and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamAugConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub zoom_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub intensity_shift: f64,
    pub noise_prob: f64,
    pub noise_sigma: f32,
}

impl Default for DownstreamAugConfig {
    fn default() -> Self {
        DownstreamAugConfig {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            zoom_range: (0.9, 1.1),
            contrast_range: (0.9, 1.1),
            intensity_shift: 0.1,
            noise_prob: 0.5,
            noise_sigma: 0.05,
        }
    }
}

impl DownstreamAugConfig {
    /// The identity pipeline.
    pub fn none() -> Self {
        DownstreamAugConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            zoom_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            intensity_shift: 0.0,
            noise_prob: 0.0,
            noise_sigma: 0.0,
        }
    }
}

/// Inverse-maps every output pixel through flip, rotation and zoom about the
/// image centre. Returns source coordinates `(y, x)` per output pixel.
fn inverse_affine(h: usize, w: usize, flip: bool, angle: f64, zoom: f64) -> Vec<(f64, f64)> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let xo = if flip { w - 1 - x } else { x };
            let (dy, dx) = (y as f64 - cy, xo as f64 - cx);
            let sy = (c * dy - s * dx) / zoom + cy;
            let sx = (s * dy + c * dx) / zoom + cx;
            out.push((sy, sx));
        }
    }
    out
}

pub fn downstream_augment(
    img: &Image,
    mask: Option<&Mask>,
    cfg: &DownstreamAugConfig,
    rng: &mut Rng,
) -> (Image, Option<Mask>) {
    let flip = rng.random_bool(cfg.flip_prob);
    let max_rot = cfg.max_rotation_deg.to_radians();
    let angle = uniform(rng, (-max_rot, max_rot));
    let zoom = uniform(rng, cfg.zoom_range);
    let contrast = uniform(rng, cfg.contrast_range) as f32;
    let shift = uniform(rng, (-cfg.intensity_shift, cfg.intensity_shift)) as f32;
    let noisy = rng.random_bool(cfg.noise_prob);

    let (h, w) = (img.height, img.width);
    let geometric = flip || angle != 0.0 || zoom != 1.0;
    let (mut out, mask) = if geometric {
        let coords = inverse_affine(h, w, flip, angle, zoom);
        let mut out = Image::zeros(h, w);
        for (i, &(sy, sx)) in coords.iter().enumerate() {
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..CHANNELS {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.data[i * CHANNELS + c] = top * (1.0 - fy) + bot * fy;
            }
        }
        let mask = mask.map(|m| Mask {
            height: h,
            width: w,
            data: coords
                .iter()
                .map(|&(sy, sx)| {
                    let y = sy.round().clamp(0.0, (h - 1) as f64) as usize;
                    let x = sx.round().clamp(0.0, (w - 1) as f64) as usize;
                    m.get(y, x)
                })
                .collect(),
        });
        (out, mask)
    } else {
        (img.clone(), mask.cloned())
    };
    if contrast != 1.0 || shift != 0.0 {
        for x in &mut out.data {
            *x = contrast * *x + shift;
        }
    }
    if noisy {
        out = gaussian_noise(&out, cfg.noise_sigma, rng);
    }
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let c0: Vec<f32> = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        let c1: Vec<f32> = (0..h * w).map(|i| ((i * 7) % 13) as f32).collect();
        let c2: Vec<f32> = (0..h * w).map(|i| -(i as f32).sqrt()).collect();
        Image::from_channels(h, w, [&c0, &c1, &c2])
    }

    fn slice_of(img: Image) -> SliceSample {
        SliceSample {
            pixels: img,
            subject_id: "s".into(),
            slice_index: 0,
            label: None,
            seg_slice: None,
        }
    }

    #[test]
    fn full_scale_square_crop_is_full_resize() {
        let img = ramp(40, 40);
        let mut rng = rng_from(3);
        let rect = sample_crop_rect(40, 40, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert_eq!(
            rect,
            Rect {
                top: 0,
                left: 0,
                height: 40,
                width: 40
            }
        );
        let mut rng = rng_from(3);
        let view = random_resized_crop(&img, 24, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert_eq!(view, image::resize_bilinear(&img, 24, 24));
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let a = sample_crop_rect(96, 96, (0.05, 0.4), DEFAULT_ASPECT_RANGE, &mut rng_from(9));
        let b = sample_crop_rect(96, 96, (0.05, 0.4), DEFAULT_ASPECT_RANGE, &mut rng_from(9));
        assert_eq!(a, b);
    }

    #[test]
    fn crop_output_side_sweep() {
        let img = ramp(50, 70);
        let mut rng = rng_from(1);
        for i in 0..1000 {
            let side = 1 + i % 40;
            let v = random_resized_crop(&img, side, (0.05, 1.0), DEFAULT_ASPECT_RANGE, &mut rng);
            assert_eq!((v.height, v.width), (side, side));
            assert!(v.is_finite());
        }
    }

    #[test]
    fn crop_rect_within_bounds() {
        let mut rng = rng_from(2);
        for _ in 0..2000 {
            let r = sample_crop_rect(30, 45, (0.01, 1.0), DEFAULT_ASPECT_RANGE, &mut rng);
            assert!(r.height >= 1 && r.width >= 1);
            assert!(r.top + r.height <= 30 && r.left + r.width <= 45);
        }
    }

    #[test]
    fn fallback_centre_crop() {
        // a 1×100 strip cannot host any crop with aspect in [3/4, 4/3] and area >= 0.9
        let mut rng = rng_from(0);
        let r = sample_crop_rect(1, 100, (0.9, 1.0), DEFAULT_ASPECT_RANGE, &mut rng);
        assert_eq!(r.height, 1);
        assert_eq!(r.width, 1);
        assert_eq!(r.left, 49);
    }

    #[test]
    fn jitter_identity_and_determinism() {
        let img = ramp(8, 8);
        assert_eq!(intensity_jitter(&img, 0.0, &mut rng_from(1)), img);
        let a = intensity_jitter(&img, 0.7, &mut rng_from(5));
        let b = intensity_jitter(&img, 0.7, &mut rng_from(5));
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn jitter_parameters_within_bounds() {
        let mut rng = rng_from(4);
        for i in 0..1000 {
            let s = (i % 11) as f32 / 10.0;
            for (a, b) in sample_jitter(s, &mut rng) {
                assert!(a >= 1.0 - 0.4 * s - 1e-6 && a <= 1.0 + 0.4 * s + 1e-6);
                assert!(b.abs() <= 0.2 * s + 1e-6);
            }
        }
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let img = ramp(9, 11);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_preserves_mean() {
        for (i, sigma) in [0.3, 1.0, 2.0, 5.0].into_iter().enumerate() {
            let img = ramp(12 + i, 17);
            let out = gaussian_blur(&img, sigma);
            for c in 0..3 {
                let m_in: f64 = img.channel(c).iter().map(|&x| x as f64).sum::<f64>();
                let m_out: f64 = out.channel(c).iter().map(|&x| x as f64).sum::<f64>();
                let n = (img.height * img.width) as f64;
                assert!(((m_in - m_out) / n).abs() < 1e-5, "sigma {sigma} channel {c}");
            }
        }
    }

    #[test]
    fn blur_impulse_centre_weight() {
        // scipy.ndimage.gaussian_filter(impulse, 1.0, mode="reflect", truncate=3.0)[5, 5]
        let mut img = Image::zeros(11, 11);
        for c in 0..3 {
            img.set(5, 5, c, 1.0);
        }
        let out = gaussian_blur(&img, 1.0);
        let k0 = 1.0 / (1.0 + 2.0 * ((-0.5f64).exp() + (-2.0f64).exp() + (-4.5f64).exp()));
        assert!((out.get(5, 5, 0) as f64 - k0 * k0).abs() < 1e-7);
        assert!((out.get(5, 5, 0) as f64 - 0.159_241_1).abs() < 1e-6);
    }

    #[test]
    fn noise_identity_determinism_and_mean() {
        let img = Image::zeros(100, 100);
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng_from(0)), img);
        assert_eq!(
            gaussian_noise(&img, 0.3, &mut rng_from(8)),
            gaussian_noise(&img, 0.3, &mut rng_from(8))
        );
        // 10^6 draws: sample mean within 5σ/1000
        let sigma = 0.5f32;
        let mut rng = rng_from(77);
        let mut sum = 0.0f64;
        let mut n = 0usize;
        while n < 1_000_000 {
            let out = gaussian_noise(&img, sigma, &mut rng);
            sum += out.data.iter().map(|&x| x as f64).sum::<f64>();
            n += out.data.len();
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 5.0 * sigma as f64 / 1000.0, "mean {mean}");
    }

    #[test]
    fn multicrop_default_views() {
        let slice = slice_of(ramp(96, 96));
        let cfg = CropConfig::default();
        let aug = make_multicrop(&slice, &cfg, 12).unwrap();
        assert_eq!(aug.views.len(), 10);
        for (i, v) in aug.views.iter().enumerate() {
            let side = if i < 2 { 96 } else { 64 };
            assert_eq!((v.height, v.width), (side, side));
            assert!(v.is_finite());
        }
        assert_eq!(aug, make_multicrop(&slice, &cfg, 12).unwrap());
        assert_ne!(aug, make_multicrop(&slice, &cfg, 13).unwrap());
    }

    #[test]
    fn multicrop_without_locals() {
        let slice = slice_of(ramp(100, 96));
        let cfg = CropConfig {
            n_local: 0,
            ..CropConfig::default()
        };
        assert_eq!(make_multicrop(&slice, &cfg, 0).unwrap().views.len(), 2);
    }

    #[test]
    fn multicrop_rejects_small_slice() {
        let slice = slice_of(ramp(64, 128));
        assert!(matches!(
            make_multicrop(&slice, &CropConfig::default(), 0),
            Err(Error::SliceTooSmall { side: 64, required: 96 })
        ));
    }

    #[test]
    fn crop_config_validation() {
        assert!(CropConfig::default().validate().is_ok());
        let bad = CropConfig {
            local_side: 96,
            ..CropConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CropConfig {
            local_scale_range: (0.0, 0.4),
            ..CropConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn downstream_geometry_shared_with_mask() {
        // mask equals a thresholded channel; after augmentation (no intensity
        // changes) the relation must survive everywhere away from edges
        let h = 32;
        let labels: Vec<u8> = (0..h * h)
            .map(|i| u8::from((i / h) >= 10 && (i / h) < 20 && (i % h) >= 5 && (i % h) < 14))
            .collect();
        let ch: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        let img = Image::from_channels(h, h, [&ch, &ch, &ch]);
        let mask = Mask {
            height: h,
            width: h,
            data: labels,
        };
        let cfg = DownstreamAugConfig {
            contrast_range: (1.0, 1.0),
            intensity_shift: 0.0,
            noise_prob: 0.0,
            ..DownstreamAugConfig::default()
        };
        for seed in 0..20 {
            let (img2, mask2) = downstream_augment(&img, Some(&mask), &cfg, &mut rng_from(seed));
            let mask2 = mask2.unwrap();
            assert!(mask2.data.iter().all(|&l| l <= 1));
            let agree = img2
                .channel(0)
                .iter()
                .zip(&mask2.data)
                .filter(|(&v, &l)| (v > 0.5) == (l == 1))
                .count();
            assert!(agree as f64 / (h * h) as f64 > 0.97, "seed {seed}: {agree}");
        }
    }

    #[test]
    fn downstream_none_is_identity() {
        let img = ramp(16, 16);
        let (out, m) = downstream_augment(&img, None, &DownstreamAugConfig::none(), &mut rng_from(1));
        assert_eq!(out, img);
        assert!(m.is_none());
    }
}
