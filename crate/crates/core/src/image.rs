//! Three-channel 2D images (HWC layout) and integer masks, with the
//! resampling kernels shared by the slice pipeline and augmentation.

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major, channel-interleaved: `data[(y * width + x) * 3 + c]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_channels(height: usize, width: usize, channels: [&[f32]; CHANNELS]) -> Self {
        let n = height * width;
        assert!(channels.iter().all(|c| c.len() == n));
        let mut data = Vec::with_capacity(n * CHANNELS);
        for i in 0..n {
            for c in channels {
                data.push(c[i]);
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    /// `(min, max)` of one channel.
    pub fn channel_range(&self, c: usize) -> (f32, f32) {
        self.data
            .iter()
            .skip(c)
            .step_by(CHANNELS)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * CHANNELS;
                let dst = (y * self.width + x) * CHANNELS;
                out.data[dst..dst + CHANNELS].copy_from_slice(&self.data[src..src + CHANNELS]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Mask {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Axis-aligned source rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Bilinear sample taps for one axis under the half-pixel-centre
/// (align-corners = false) convention: `(i0, i1, frac)` per output index.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Nearest-neighbour source index per output index (half-pixel centres).
pub fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// Bilinearly resamples the `region` of `img` to `out_h × out_w`.
pub fn resize_region(img: &Image, region: Rect, out_h: usize, out_w: usize) -> Image {
    let rows = bilinear_taps(region.height, out_h);
    let cols = bilinear_taps(region.width, out_w);
    let mut out = Image::zeros(out_h, out_w);
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        let (y0, y1) = (y0 + region.top, y1 + region.top);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let (x0, x1) = (x0 + region.left, x1 + region.left);
            for c in 0..CHANNELS {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.set(oy, ox, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    let full = Rect {
        top: 0,
        left: 0,
        height: img.height,
        width: img.width,
    };
    resize_region(img, full, out_h, out_w)
}

pub fn resize_nearest_region(mask: &Mask, region: Rect, out_h: usize, out_w: usize) -> Mask {
    let rows = nearest_taps(region.height, out_h);
    let cols = nearest_taps(region.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &y in &rows {
        for &x in &cols {
            data.push(mask.get(y + region.top, x + region.left));
        }
    }
    Mask {
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn resize_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    if mask.height == out_h && mask.width == out_w {
        return mask.clone();
    }
    let full = Rect {
        top: 0,
        left: 0,
        height: mask.height,
        width: mask.width,
    };
    resize_nearest_region(mask, full, out_h, out_w)
}
