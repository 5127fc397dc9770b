//! Pixel slices and the ×2 interpolators used for upscaled evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB slice with values in `[0, 1]`, stored row-major as `[h][w][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "slice {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// Grey image: the same value in all three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::Shape(format!(
                "grey plane {height}x{width} needs {} values, got {}",
                height * width,
                gray.len()
            )));
        }
        let data = gray.iter().flat_map(|&v| [v, v, v]).collect();
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Channel-averaged intensity plane.
    pub fn gray(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    pub fn max_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Interpolation {
    pub const ALL: [Interpolation; 3] = [Self::Bilinear, Self::Bicubic, Self::Nearest];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(Error::Parameter(format!("unknown interpolation mode {other:?}"))),
        }
    }
}

const CUBIC_A: f64 = -0.75;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-coordinate source taps `(index, weight)` along one axis.
fn taps(n_in: usize, factor: usize, mode: Interpolation) -> Vec<Vec<(usize, f64)>> {
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    (0..n_in * factor)
        .map(|o| {
            // align-corners-false: output pixel centres map back into input space
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            match mode {
                Interpolation::Nearest => vec![(o / factor, 1.0)],
                Interpolation::Bilinear => {
                    let f = src.floor();
                    let w = src - f;
                    let i = f as i64;
                    vec![(clamp(i), 1.0 - w), (clamp(i + 1), w)]
                }
                Interpolation::Bicubic => {
                    let f = src.floor();
                    let w = src - f;
                    let i = f as i64;
                    (-1..=2)
                        .map(|k| (clamp(i + k), cubic(w - k as f64)))
                        .collect()
                }
            }
        })
        .collect()
}

/// Separable resize by an integer factor. Output is clamped to `[0, 1]`.
pub fn upscale(img: &SliceImage, factor: usize, mode: Interpolation) -> Result<SliceImage> {
    if factor != 2 {
        return Err(Error::Parameter(format!("upscale factor must be 2, got {factor}")));
    }
    let (h, w) = (img.height, img.width);
    let (ho, wo) = (h * factor, w * factor);
    let tx = taps(w, factor, mode);
    let ty = taps(h, factor, mode);
    let mut rows = vec![0.0f64; h * wo * 3];
    for y in 0..h {
        for (xo, t) in tx.iter().enumerate() {
            for c in 0..3 {
                rows[(y * wo + xo) * 3 + c] =
                    t.iter().map(|&(x, wt)| wt * img.get(y, x, c) as f64).sum();
            }
        }
    }
    let mut out = vec![0.0f32; ho * wo * 3];
    for (yo, t) in ty.iter().enumerate() {
        for xo in 0..wo {
            for c in 0..3 {
                let v: f64 = t.iter().map(|&(y, wt)| wt * rows[(y * wo + xo) * 3 + c]).sum();
                out[(yo * wo + xo) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SliceImage::new(ho, wo, out)
}

/// Box-average downsample by an integer factor.
pub fn downsample(img: &SliceImage, factor: usize) -> Result<SliceImage> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::Shape(format!(
            "cannot downsample {}x{} by {factor}",
            img.height, img.width
        )));
    }
    let (ho, wo) = (img.height / factor, img.width / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = vec![0.0f32; ho * wo * 3];
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out[((y / factor) * wo + x / factor) * 3 + c] += img.get(y, x, c) * norm;
            }
        }
    }
    SliceImage::new(ho, wo, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_replicates_checkerboard() {
        let img = SliceImage::from_gray(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upscale(&img, 2, Interpolation::Nearest).unwrap();
        let g = up.gray();
        let expect = [
            0., 0., 1., 1., //
            0., 0., 1., 1., //
            1., 1., 0., 0., //
            1., 1., 0., 0.,
        ];
        assert_eq!(g, expect);
    }

    #[test]
    fn bilinear_keeps_constants() {
        let img = SliceImage::filled(4, 4, 0.37);
        for mode in Interpolation::ALL {
            let up = upscale(&img, 2, mode).unwrap();
            assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-6), "{mode}");
        }
    }

    #[test]
    fn bilinear_half_pixel_samples() {
        // Row [0, 1] upsampled: output centres sit at -0.25, 0.25, 0.75, 1.25 in
        // input coordinates, giving 0, 0.25, 0.75, 1 after edge clamping.
        let img = SliceImage::from_gray(1, 2, &[0.0, 1.0]).unwrap();
        let up = upscale(&img, 2, Interpolation::Bilinear).unwrap();
        let row: Vec<f32> = up.gray()[..4].to_vec();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..10 {
            let w = i as f64 / 10.0;
            let s: f64 = (-1..=2).map(|k| cubic(w - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_mode_and_factor_rejected() {
        assert!("lanczos".parse::<Interpolation>().is_err());
        assert!(upscale(&SliceImage::filled(2, 2, 0.0), 3, Interpolation::Nearest).is_err());
    }

    #[test]
    fn downsample_inverts_nearest_upscale() {
        let img = SliceImage::from_gray(2, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let up = upscale(&img, 2, Interpolation::Nearest).unwrap();
        let back = downsample(&up, 2).unwrap();
        assert!(back.max_diff(&img) < 1e-6);
    }
}
