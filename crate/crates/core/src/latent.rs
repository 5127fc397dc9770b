//! Latent slices, 16-slice blocks and whole latent volumes.

use crate::error::{Error, Result};

pub const LATENT_CHANNELS: usize = 16;
pub const BLOCK_LEN: usize = 16;

/// One latent slice, channel-major `[16][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSlice {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl LatentSlice {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != LATENT_CHANNELS * h * w {
            return Err(Error::Shape(format!(
                "latent slice (16, {h}, {w}) needs {} values, got {}",
                LATENT_CHANNELS * h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; LATENT_CHANNELS * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.h, self.w]
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn l2_distance(&self, other: &Self) -> f32 {
        l2(&self.data, &other.data)
    }
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// Sixteen consecutive latent slices, `[16 slices][16 channels][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl LatentBlock {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let n = BLOCK_LEN * LATENT_CHANNELS * h * w;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "latent block (16, 16, {h}, {w}) needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; BLOCK_LEN * LATENT_CHANNELS * h * w],
        }
    }

    pub fn repeat(slice: &LatentSlice) -> Self {
        let data = (0..BLOCK_LEN).flat_map(|_| slice.data.iter().copied()).collect();
        Self {
            h: slice.h,
            w: slice.w,
            data,
        }
    }

    pub fn from_slices(slices: &[LatentSlice]) -> Result<Self> {
        if slices.len() != BLOCK_LEN {
            return Err(Error::Shape(format!(
                "a block holds exactly {BLOCK_LEN} slices, got {}",
                slices.len()
            )));
        }
        let (h, w) = (slices[0].h, slices[0].w);
        if slices.iter().any(|s| s.h != h || s.w != w) {
            return Err(Error::Shape("block slices differ in spatial size".into()));
        }
        let data = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
        Ok(Self { h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [BLOCK_LEN, LATENT_CHANNELS, self.h, self.w]
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn slice_len(&self) -> usize {
        LATENT_CHANNELS * self.h * self.w
    }

    pub fn slice(&self, i: usize) -> LatentSlice {
        let n = self.slice_len();
        LatentSlice {
            h: self.h,
            w: self.w,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<LatentSlice> {
        (0..BLOCK_LEN).map(|i| self.slice(i)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn mse(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn l2_distance(&self, other: &Self) -> f32 {
        l2(&self.data, &other.data)
    }
}

/// A whole latent volume, `[len][16][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    h: usize,
    w: usize,
    len: usize,
    data: Vec<f32>,
}

impl LatentVolume {
    pub fn new(len: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let n = len * LATENT_CHANNELS * h * w;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "latent volume ({len}, 16, {h}, {w}) needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { h, w, len, data })
    }

    pub fn from_slices(slices: &[LatentSlice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Usage("empty latent volume".into()))?;
        let (h, w) = (first.h, first.w);
        if slices.iter().any(|s| s.h != h || s.w != w) {
            return Err(Error::Shape("volume slices differ in spatial size".into()));
        }
        Ok(Self {
            h,
            w,
            len: slices.len(),
            data: slices.iter().flat_map(|s| s.data.iter().copied()).collect(),
        })
    }

    pub fn from_blocks(blocks: &[LatentBlock]) -> Result<Self> {
        let slices: Vec<_> = blocks.iter().flat_map(|b| b.slices()).collect();
        Self::from_slices(&slices)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice_len(&self) -> usize {
        LATENT_CHANNELS * self.h * self.w
    }

    pub fn slice(&self, i: usize) -> LatentSlice {
        let n = self.slice_len();
        LatentSlice {
            h: self.h,
            w: self.w,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<LatentSlice> {
        (0..self.len).map(|i| self.slice(i)).collect()
    }

    /// Slices `[start, start+16)`, with indices past the end filled by `pad`.
    pub fn window(&self, start: usize, pad: &LatentSlice) -> LatentBlock {
        let n = self.slice_len();
        let mut data = Vec::with_capacity(BLOCK_LEN * n);
        for i in start..start + BLOCK_LEN {
            if i < self.len {
                data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
            } else {
                data.extend_from_slice(&pad.data);
            }
        }
        LatentBlock {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            self.len = len;
            self.data.truncate(len * self.slice_len());
        }
    }
}
