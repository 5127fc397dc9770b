//! Linear orthonormal patch codec.
//!
//! Every 8×8×3 pixel patch is flattened (row, column, channel order) into a
//! 192-vector and projected onto the first 16 rows of an orthonormal basis,
//! giving a 16-channel latent at 1/8 spatial resolution. Decoding applies the
//! transpose, which is the least-squares inverse of the projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use volflow_tensor::Scalar;

use crate::error::{Error, Result};
use crate::latent::{LatentBlock, LatentSlice, BLOCK_LEN, LATENT_CHANNELS};
use crate::slice::SliceImage;

pub const PATCH: usize = 8;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const KEPT_ROWS: usize = LATENT_CHANNELS;

/// Amplitude of the random perturbation mixed into the low-frequency rows.
const LOWFREQ_JITTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecBasis {
    seed: u64,
    q: Vec<f64>,
    kept: Vec<f32>,
    channel_scale: [f32; KEPT_ROWS],
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

/// Luminance cosine pattern with frequencies `(ky, kx)`, replicated across channels.
fn cosine_pattern(ky: usize, kx: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(PATCH_DIM);
    for py in 0..PATCH {
        for px in 0..PATCH {
            let a = (std::f64::consts::PI * ky as f64 * (py as f64 + 0.5) / PATCH as f64).cos();
            let b = (std::f64::consts::PI * kx as f64 * (px as f64 + 0.5) / PATCH as f64).cos();
            v.extend_from_slice(&[a * b; 3]);
        }
    }
    normalize(&mut v);
    v
}

/// Two passes of modified Gram-Schmidt over the rows of `m` (n×n).
fn orthonormalize_rows(m: &mut [f64], n: usize) {
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = m.split_at_mut(i * n);
                let qj = &done[j * n..(j + 1) * n];
                let row = &mut rest[..n];
                let d: f64 = row.iter().zip(qj).map(|(a, b)| a * b).sum();
                for (r, q) in row.iter_mut().zip(qj) {
                    *r -= d * q;
                }
            }
        }
        normalize(&mut m[i * n..(i + 1) * n]);
    }
}

impl CodecBasis {
    /// Deterministic basis for `seed`.
    ///
    /// The 16 kept rows start from the 4×4 lowest cosine frequencies of a
    /// patch, each mixed with a small seeded random direction; the remaining
    /// 176 rows are seeded Gaussian. Orthonormalization is done in f64.
    pub fn build(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs: Vec<(usize, usize)> =
            (0..4).flat_map(|ky| (0..4).map(move |kx| (ky, kx))).collect();
        freqs.sort_by_key(|&(ky, kx)| (ky + kx, ky));
        let mut m = Vec::with_capacity(PATCH_DIM * PATCH_DIM);
        for &(ky, kx) in &freqs {
            let base = cosine_pattern(ky, kx);
            let mut noise: Vec<f64> = (0..PATCH_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut noise);
            m.extend(base.iter().zip(&noise).map(|(b, e)| b + LOWFREQ_JITTER * e));
        }
        for _ in KEPT_ROWS..PATCH_DIM {
            for _ in 0..PATCH_DIM {
                m.push(StandardNormal.sample(&mut rng));
            }
        }
        orthonormalize_rows(&mut m, PATCH_DIM);
        let kept = m[..KEPT_ROWS * PATCH_DIM].iter().map(|&v| v as f32).collect();
        Self {
            seed,
            q: m,
            kept,
            channel_scale: [1.0; KEPT_ROWS],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Full 192×192 row-major basis.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// The 16×192 projection actually used for encoding.
    pub fn kept_rows(&self) -> &[f32] {
        &self.kept
    }

    pub fn channel_scale(&self) -> &[f32; KEPT_ROWS] {
        &self.channel_scale
    }

    pub fn with_channel_scale(mut self, scale: [f32; KEPT_ROWS]) -> Result<Self> {
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Parameter(format!("channel scales must be positive: {scale:?}")));
        }
        self.channel_scale = scale;
        Ok(self)
    }

    /// Per-channel `1/std` of unscaled latents, so scaled channels have unit variance.
    pub fn fit_channel_scale(&self, unscaled: &[LatentSlice]) -> Result<[f32; KEPT_ROWS]> {
        let first = unscaled
            .first()
            .ok_or_else(|| Error::Usage("channel scale needs at least one slice".into()))?;
        let hw = first.height() * first.width();
        let mut scale = [1.0f32; KEPT_ROWS];
        for (c, s) in scale.iter_mut().enumerate() {
            let vals = unscaled
                .iter()
                .flat_map(|l| l.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64));
            let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
            for v in vals {
                n += 1.0;
                sum += v;
                sq += v * v;
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(1e-12);
            *s = (1.0 / var.sqrt()) as f32;
        }
        Ok(scale)
    }

    /// Pixel patches of `img` as a `[patches, 192]` row-major matrix.
    fn patchify(img: &SliceImage) -> Vec<f32> {
        let (hp, wp) = (img.height() / PATCH, img.width() / PATCH);
        let mut out = Vec::with_capacity(hp * wp * PATCH_DIM);
        for by in 0..hp {
            for bx in 0..wp {
                for py in 0..PATCH {
                    let row = (by * PATCH + py) * img.width() + bx * PATCH;
                    out.extend_from_slice(&img.data()[row * 3..(row + PATCH) * 3]);
                }
            }
        }
        out
    }

    pub fn encode_slice(&self, img: &SliceImage) -> Result<LatentSlice> {
        if img.height() % PATCH != 0 || img.width() % PATCH != 0 || img.height() == 0 || img.width() == 0 {
            return Err(Error::Shape(format!(
                "slice {}x{} is not divisible by {PATCH}",
                img.height(),
                img.width()
            )));
        }
        let (hp, wp) = (img.height() / PATCH, img.width() / PATCH);
        let np = hp * wp;
        let patches = Self::patchify(img);
        let mut z = vec![0.0f32; np * KEPT_ROWS];
        f32::gemm(
            np,
            PATCH_DIM,
            KEPT_ROWS,
            &patches,
            (PATCH_DIM as isize, 1),
            &self.kept,
            (1, PATCH_DIM as isize),
            0.0,
            &mut z,
        );
        let mut data = vec![0.0f32; KEPT_ROWS * np];
        for p in 0..np {
            for c in 0..KEPT_ROWS {
                data[c * np + p] = z[p * KEPT_ROWS + c] * self.channel_scale[c];
            }
        }
        LatentSlice::new(hp, wp, data)
    }

    pub fn decode_slice(&self, latent: &LatentSlice) -> Result<SliceImage> {
        let [c, hp, wp] = latent.shape();
        if c != KEPT_ROWS {
            return Err(Error::Shape(format!("expected {KEPT_ROWS} latent channels, got {c}")));
        }
        let np = hp * wp;
        let mut z = vec![0.0f32; np * KEPT_ROWS];
        for p in 0..np {
            for c in 0..KEPT_ROWS {
                z[p * KEPT_ROWS + c] = latent.data()[c * np + p] / self.channel_scale[c];
            }
        }
        let mut patches = vec![0.0f32; np * PATCH_DIM];
        f32::gemm(
            np,
            KEPT_ROWS,
            PATCH_DIM,
            &z,
            (KEPT_ROWS as isize, 1),
            &self.kept,
            (PATCH_DIM as isize, 1),
            0.0,
            &mut patches,
        );
        let (h, w) = (hp * PATCH, wp * PATCH);
        let mut out = vec![0.0f32; h * w * 3];
        for by in 0..hp {
            for bx in 0..wp {
                let patch = &patches[(by * wp + bx) * PATCH_DIM..][..PATCH_DIM];
                for py in 0..PATCH {
                    let row = (by * PATCH + py) * w + bx * PATCH;
                    out[row * 3..(row + PATCH) * 3].copy_from_slice(&patch[py * PATCH * 3..(py + 1) * PATCH * 3]);
                }
            }
        }
        let mut img = SliceImage::new(h, w, out)?;
        img.clamp01();
        Ok(img)
    }

    pub fn encode_volume(&self, slices: &[SliceImage]) -> Result<Vec<LatentSlice>> {
        if slices.is_empty() {
            return Err(Error::Usage("cannot encode an empty volume".into()));
        }
        slices.iter().map(|s| self.encode_slice(s)).collect()
    }

    pub fn decode_volume(&self, latents: &[LatentSlice]) -> Result<Vec<SliceImage>> {
        if latents.is_empty() {
            return Err(Error::Usage("cannot decode an empty volume".into()));
        }
        latents.iter().map(|l| self.decode_slice(l)).collect()
    }

    /// Latent encodings of an all-black and an all-white slice.
    pub fn sentinel_slices(&self, h: usize, w: usize) -> Result<(LatentSlice, LatentSlice)> {
        let px = |v| SliceImage::filled(h * PATCH, w * PATCH, v);
        Ok((self.encode_slice(&px(0.0))?, self.encode_slice(&px(1.0))?))
    }

    /// `(black, white)` sentinel blocks for latents of spatial size `h`×`w`.
    pub fn sentinel_blocks(&self, h: usize, w: usize) -> Result<(LatentBlock, LatentBlock)> {
        let (b, wh) = self.sentinel_slices(h, w)?;
        Ok((LatentBlock::repeat(&b), LatentBlock::repeat(&wh)))
    }

    /// Mean decoded pixel of each slice in a block.
    pub fn slice_means(&self, block: &LatentBlock) -> Result<Vec<f32>> {
        (0..BLOCK_LEN)
            .map(|i| Ok(self.decode_slice(&block.slice(i))?.mean()))
            .collect()
    }
}

/// Byte ratio of a 1-byte-per-element pixel array to a latent array.
pub fn compression_report(pixel_shape: &[usize], latent_shape: &[usize], latent_dtype_bytes: usize) -> Result<f64> {
    if pixel_shape.iter().chain(latent_shape).any(|&d| d == 0) || latent_dtype_bytes == 0 {
        return Err(Error::Parameter("extents and dtype size must be positive".into()));
    }
    let pixel: usize = pixel_shape.iter().product();
    let latent: usize = latent_shape.iter().product::<usize>() * latent_dtype_bytes;
    Ok(pixel as f64 / latent as f64)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
