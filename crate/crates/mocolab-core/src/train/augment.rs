//! Stochastic augmentation pipeline for [0,1]-valued C x H x W images.
//!
//! Applied in fixed order: color jitter (p = 0.8), rotation, gaussian blur,
//! grayscale (p = 0.2), horizontal flip (dataset-gated, p = 0.5), with a
//! final clamp to [0,1]. All draws come from the caller's stream, so a view
//! is reproducible from its (seed, epoch, step, index) coordinates alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub color_jitter_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue_range: (f64, f64),
    pub rotation_degrees: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
    pub horizontal_flip: bool,
    pub flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            color_jitter_prob: 0.8,
            brightness_range: (0.6, 1.4),
            contrast_range: (0.6, 1.4),
            saturation_range: (0.6, 1.4),
            hue_range: (-0.1, 0.1),
            rotation_degrees: (0.0, 30.0),
            blur_sigma: (0.1, 2.0),
            grayscale_prob: 0.2,
            horizontal_flip: false,
            flip_prob: 0.5,
        }
    }
}

impl AugmentationPolicy {
    /// Everything collapsed so that `augment` returns the input unchanged.
    pub fn identity() -> Self {
        AugmentationPolicy {
            color_jitter_prob: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            hue_range: (0.0, 0.0),
            rotation_degrees: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            grayscale_prob: 0.0,
            horizontal_flip: false,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("color_jitter_prob", self.color_jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
            ("hue_range", self.hue_range),
            ("rotation_degrees", self.rotation_degrees),
            ("blur_sigma", self.blur_sigma),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} is not ordered: ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Apply the policy to one image with draws taken from `rng`.
pub fn augment<T: Scalar>(
    image: &Tensor<T>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dimension(
            "augment",
            format!("expected C x H x W image, got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut px: Vec<f64> = image.data().iter().map(|v| v.to_f64()).collect();
    let mut touched = false;

    if rng.gen::<f64>() < policy.color_jitter_prob {
        let brightness = sample(rng, policy.brightness_range);
        let contrast = sample(rng, policy.contrast_range);
        let saturation = sample(rng, policy.saturation_range);
        let hue = sample(rng, policy.hue_range);
        apply_brightness(&mut px, brightness);
        apply_contrast(&mut px, c, h * w, contrast);
        if c == 3 {
            apply_saturation(&mut px, h * w, saturation);
            apply_hue(&mut px, h * w, hue);
        }
        touched = true;
    }

    let angle = sample(rng, policy.rotation_degrees);
    if angle != 0.0 {
        px = rotate_bilinear(&px, c, h, w, angle.to_radians());
        touched = true;
    }

    let sigma = sample(rng, policy.blur_sigma);
    if sigma > 0.0 {
        px = gaussian_blur(&px, c, h, w, sigma);
        touched = true;
    }

    if rng.gen::<f64>() < policy.grayscale_prob && c == 3 {
        let plane = h * w;
        for p in 0..plane {
            let l = luminance(px[p], px[plane + p], px[2 * plane + p]);
            px[p] = l;
            px[plane + p] = l;
            px[2 * plane + p] = l;
        }
        touched = true;
    }

    if policy.horizontal_flip && rng.gen::<f64>() < policy.flip_prob {
        for ch in 0..c {
            for y in 0..h {
                let row = ch * h * w + y * w;
                px[row..row + w].reverse();
            }
        }
        touched = true;
    }

    if !touched {
        return Ok(image.clone());
    }
    let data = px
        .into_iter()
        .map(|v| T::from_f64(v.clamp(0.0, 1.0)))
        .collect();
    Tensor::new(s, data)
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn apply_brightness(px: &mut [f64], f: f64) {
    for v in px.iter_mut() {
        *v *= f;
    }
}

/// Blend with the mean gray level of the image.
fn apply_contrast(px: &mut [f64], c: usize, plane: usize, f: f64) {
    let mean = if c == 3 {
        (0..plane)
            .map(|p| luminance(px[p], px[plane + p], px[2 * plane + p]))
            .sum::<f64>()
            / plane as f64
    } else {
        px.iter().sum::<f64>() / px.len() as f64
    };
    for v in px.iter_mut() {
        *v = f * *v + (1.0 - f) * mean;
    }
}

/// Blend each pixel with its own gray level.
fn apply_saturation(px: &mut [f64], plane: usize, f: f64) {
    for p in 0..plane {
        let l = luminance(px[p], px[plane + p], px[2 * plane + p]);
        px[p] = f * px[p] + (1.0 - f) * l;
        px[plane + p] = f * px[plane + p] + (1.0 - f) * l;
        px[2 * plane + p] = f * px[2 * plane + p] + (1.0 - f) * l;
    }
}

/// Shift hue by `delta` turns through HSV space.
fn apply_hue(px: &mut [f64], plane: usize, delta: f64) {
    if delta == 0.0 {
        return;
    }
    for p in 0..plane {
        let (r, g, b) = (px[p], px[plane + p], px[2 * plane + p]);
        let (mut hue, sat, val) = rgb_to_hsv(r, g, b);
        hue = (hue + delta).rem_euclid(1.0);
        let (r2, g2, b2) = hsv_to_rgb(hue, sat, val);
        px[p] = r2;
        px[plane + p] = g2;
        px[2 * plane + p] = b2;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotate about the image center, bilinear resampling, exposed corners
/// filled with zeros.
fn rotate_bilinear(px: &[f64], c: usize, h: usize, w: usize, theta: f64) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; px.len()];
    for ch in 0..c {
        let src = &px[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // inverse map: destination -> source
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos_t - dx * sin_t;
                let sx = cx + dy * sin_t + dx * cos_t;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let mut acc = 0.0;
                for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let yy = y0 as i64 + oy;
                        let xx = x0 as i64 + ox;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += wy * wx * src[yy as usize * w + xx as usize];
                        }
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Separable gaussian with radius ceil(2*sigma), replicated edges.
fn gaussian_blur(px: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as i64;
    if radius < 1 {
        return px.to_vec();
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i as f64) * (i as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let mut tmp = vec![0.0; px.len()];
    let mut out = vec![0.0; px.len()];
    for ch in 0..c {
        let src = &px[ch * h * w..(ch + 1) * h * w];
        let mid = &mut tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1);
                    acc += kv * src[y * w + xx as usize];
                }
                mid[y * w + x] = acc;
            }
        }
        let mid = &tmp[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1);
                    acc += kv * mid[yy as usize * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}
