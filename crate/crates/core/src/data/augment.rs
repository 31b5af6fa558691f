//! Geometric and photometric image transforms.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, CHANNELS};
use crate::rng::Rng;

/// Per-view application probability. The two large crops may use different
/// probabilities (blur and solarization are asymmetric between them).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewProb {
    pub first_large: f64,
    pub second_large: f64,
    pub small: f64,
}

impl ViewProb {
    pub const fn uniform(p: f64) -> Self {
        Self {
            first_large: p,
            second_large: p,
            small: p,
        }
    }

    pub fn for_view(&self, view: usize) -> f64 {
        match view {
            0 => self.first_large,
            1 => self.second_large,
            _ => self.small,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugKind {
    HorizontalFlip,
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale,
    /// Sigma range in pixels of the output crop.
    GaussianBlur {
        sigma_min: f64,
        sigma_max: f64,
    },
    Solarize {
        threshold: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugOp {
    pub kind: AugKind,
    pub prob: ViewProb,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl AugOp {
    /// The default photometric pipeline: flip, colour jitter, grayscale, then
    /// blur (always on the first large crop, rarely on the second) and
    /// solarization (second large crop only).
    pub fn default_pipeline(crop_size: usize) -> Vec<AugOp> {
        // sigma (0.1, 2.0) at 224 px, scaled to the crop size
        let k = crop_size as f64 / 224.0;
        vec![
            AugOp {
                kind: AugKind::HorizontalFlip,
                prob: ViewProb::uniform(0.5),
                enabled: true,
            },
            AugOp {
                kind: AugKind::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.2,
                    hue: 0.1,
                },
                prob: ViewProb::uniform(0.8),
                enabled: true,
            },
            AugOp {
                kind: AugKind::Grayscale,
                prob: ViewProb::uniform(0.2),
                enabled: true,
            },
            AugOp {
                kind: AugKind::GaussianBlur {
                    sigma_min: 0.1 * k.max(0.25),
                    sigma_max: 2.0 * k.max(0.25),
                },
                prob: ViewProb {
                    first_large: 1.0,
                    second_large: 0.1,
                    small: 0.5,
                },
                enabled: true,
            },
            AugOp {
                kind: AugKind::Solarize { threshold: 0.5 },
                prob: ViewProb {
                    first_large: 0.0,
                    second_large: 0.2,
                    small: 0.0,
                },
                enabled: true,
            },
        ]
    }

    pub fn apply(&self, img: &mut Image, view: usize, rng: &mut Rng) {
        // draw unconditionally so disabling one op does not shift later draws
        let u: f64 = rng.random();
        if !self.enabled || u >= self.prob.for_view(view) {
            return;
        }
        match &self.kind {
            AugKind::HorizontalFlip => hflip(img),
            AugKind::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => color_jitter(img, *brightness, *contrast, *saturation, *hue, rng),
            AugKind::Grayscale => grayscale(img),
            AugKind::GaussianBlur {
                sigma_min,
                sigma_max,
            } => {
                let sigma = rng.random_range(*sigma_min..=*sigma_max);
                gaussian_blur(img, sigma);
            }
            AugKind::Solarize { threshold } => {
                let t = *threshold as f32;
                for v in &mut img.data {
                    if *v >= t {
                        *v = 1.0 - *v;
                    }
                }
            }
        }
    }
}

/// Bilinear resampling of the window `(y0, x0, h, w)` of `src` to `out × out`.
pub fn resize_bilinear(
    src: &Image,
    y0: f64,
    x0: f64,
    h: f64,
    w: f64,
    out_h: usize,
    out_w: usize,
) -> Image {
    let mut dst = Image::new(out_h, out_w);
    let sy = h / out_h as f64;
    let sx = w / out_w as f64;
    for oy in 0..out_h {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
        let y1 = fy.floor() as usize;
        let y2 = (y1 + 1).min(src.height - 1);
        let ty = (fy - y1 as f64) as f32;
        for ox in 0..out_w {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
            let x1 = fx.floor() as usize;
            let x2 = (x1 + 1).min(src.width - 1);
            let tx = (fx - x1 as f64) as f32;
            for c in 0..CHANNELS {
                let a = src.get(y1, x1, c) * (1.0 - tx) + src.get(y1, x2, c) * tx;
                let b = src.get(y2, x1, c) * (1.0 - tx) + src.get(y2, x2, c) * tx;
                dst.set(oy, ox, c, a * (1.0 - ty) + b * ty);
            }
        }
    }
    dst
}

/// Random-resized-crop window: area fraction in `scale`, aspect ratio in
/// `[3/4, 4/3]` (log-uniform); falls back to the full image after 10 tries.
pub fn random_crop_window(
    height: usize,
    width: usize,
    scale: (f64, f64),
    rng: &mut Rng,
) -> (f64, f64, f64, f64) {
    let area = (height * width) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lo..=hi).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w <= width as f64 && h <= height as f64 && w >= 1.0 && h >= 1.0 {
            let y0 = rng.random_range(0.0..=(height as f64 - h));
            let x0 = rng.random_range(0.0..=(width as f64 - w));
            return (y0, x0, h, w);
        }
    }
    (0.0, 0.0, height as f64, width as f64)
}

/// Deterministic evaluation view: central crop covering `crop_fraction` of
/// each side, resized to `size × size`.
pub fn center_view(src: &Image, size: usize, crop_fraction: f64) -> Image {
    let h = src.height as f64 * crop_fraction;
    let w = src.width as f64 * crop_fraction;
    let y0 = (src.height as f64 - h) / 2.0;
    let x0 = (src.width as f64 - w) / 2.0;
    resize_bilinear(src, y0, x0, h, w, size, size)
}

fn hflip(img: &mut Image) {
    let w = img.width;
    for y in 0..img.height {
        for x in 0..w / 2 {
            for c in 0..CHANNELS {
                let a = img.get(y, x, c);
                let b = img.get(y, w - 1 - x, c);
                img.set(y, x, c, b);
                img.set(y, w - 1 - x, c, a);
            }
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn grayscale(img: &mut Image) {
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img.pixel(y, x));
            for c in 0..CHANNELS {
                img.set(y, x, c, l);
            }
        }
    }
}

fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue jitter applied in a random order.
fn color_jitter(
    img: &mut Image,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    rng: &mut Rng,
) {
    let fb = rng.random_range((1.0 - brightness).max(0.0)..=1.0 + brightness) as f32;
    let fc = rng.random_range((1.0 - contrast).max(0.0)..=1.0 + contrast) as f32;
    let fs = rng.random_range((1.0 - saturation).max(0.0)..=1.0 + saturation) as f32;
    let fh = rng.random_range(-hue..=hue) as f32;
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for op in order {
        match op {
            0 => img.data.iter_mut().for_each(|v| *v *= fb),
            1 => {
                let n = (img.height * img.width) as f32;
                let mean: f32 = (0..img.height)
                    .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                    .map(|(y, x)| luma(img.pixel(y, x)))
                    .sum::<f32>()
                    / n;
                img.data
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * fc + mean);
            }
            2 => {
                for y in 0..img.height {
                    for x in 0..img.width {
                        let p = img.pixel(y, x);
                        let l = luma(p);
                        for c in 0..CHANNELS {
                            img.set(y, x, c, (p[c] - l) * fs + l);
                        }
                    }
                }
            }
            _ => {
                if fh != 0.0 {
                    for y in 0..img.height {
                        for x in 0..img.width {
                            let mut hsv = rgb_to_hsv(img.pixel(y, x).map(|v| v.clamp(0.0, 1.0)));
                            hsv[0] += fh;
                            let rgb = hsv_to_rgb(hsv);
                            for c in 0..CHANNELS {
                                img.set(y, x, c, rgb[c]);
                            }
                        }
                    }
                }
            }
        }
        img.clamp01();
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = Image::new(img.height, img.width);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * img.get(y as usize, reflect(x + k as isize - radius, w), c);
                }
                tmp.set(y as usize, x as usize, c, acc);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.get(reflect(y + k as isize - radius, h), x as usize, c);
                }
                img.set(y as usize, x as usize, c, acc);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gradient_image(n: usize) -> Image {
        let mut img = Image::new(n, n);
        for y in 0..n {
            for x in 0..n {
                img.set(y, x, 0, x as f32 / n as f32);
                img.set(y, x, 1, y as f32 / n as f32);
                img.set(y, x, 2, 0.5);
            }
        }
        img
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = gradient_image(6);
        let out = resize_bilinear(&img, 0.0, 0.0, 6.0, 6.0, 6, 6);
        assert_eq!(out, img);
        assert_eq!(center_view(&img, 6, 1.0), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = gradient_image(5);
        let mut f = img.clone();
        hflip(&mut f);
        assert_ne!(f, img);
        hflip(&mut f);
        assert_eq!(f, img);
    }

    #[test]
    fn photometric_ops_keep_unit_range() {
        let mut r = rng::stream(3, &[]);
        for op in AugOp::default_pipeline(32) {
            let mut always = op.clone();
            always.prob = ViewProb::uniform(1.0);
            let mut img = gradient_image(8);
            always.apply(&mut img, 0, &mut r);
            assert!(
                img.data.iter().all(|v| (0.0..=1.0).contains(v)),
                "{:?}",
                op.kind
            );
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::new(7, 7);
        img.data.iter_mut().for_each(|v| *v = 0.3);
        gaussian_blur(&mut img, 1.2);
        assert!(img.data.iter().all(|v| (v - 0.3).abs() < 1e-5));
    }

    #[test]
    fn crop_window_stays_inside() {
        let mut r = rng::stream(9, &[]);
        for _ in 0..200 {
            let (y0, x0, h, w) = random_crop_window(20, 30, (0.05, 0.4), &mut r);
            assert!(y0 >= 0.0 && x0 >= 0.0 && y0 + h <= 20.0 + 1e-9 && x0 + w <= 30.0 + 1e-9);
        }
    }
}
