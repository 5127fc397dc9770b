//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use volflow::dataset::{DatasetConfig, LatentDataset};
use volflow::latent::LatentBlock;
use volflow::sampler::BlockGenerator;
use volflow::text::TextEmbedding;
use volflow::Result;

/// A few short 32×32 phantoms (4×4 latents) with cheap calibration.
pub fn small_config(n: usize, seed: u64) -> DatasetConfig {
    let mut cfg = DatasetConfig::new(n, seed);
    cfg.resolution = 32;
    cfg.min_length = 32;
    cfg.max_length = 48;
    cfg.scale_phantoms = 8;
    cfg.probe_phantoms = 24;
    cfg
}

pub fn small_dataset(n: usize, seed: u64) -> LatentDataset {
    LatentDataset::build(&small_config(n, seed)).expect("small dataset builds")
}

/// Emits `fill` blocks until call `white_at` (0-based per request), where the
/// block turns white from slice `white_slice` on.
pub struct ScriptedStub {
    pub fill: LatentBlock,
    pub white: LatentBlock,
    pub white_at: Option<usize>,
    pub white_slice: usize,
    pub calls: std::cell::RefCell<Vec<usize>>,
}

impl ScriptedStub {
    pub fn new(fill: LatentBlock, white: LatentBlock, white_at: Option<usize>, white_slice: usize) -> Self {
        Self {
            fill,
            white,
            white_at,
            white_slice,
            calls: Default::default(),
        }
    }
}

impl BlockGenerator for ScriptedStub {
    fn next_blocks(&self, cond: &[&LatentBlock], _text: &[&TextEmbedding], rngs: &mut [ChaCha8Rng]) -> Result<Vec<LatentBlock>> {
        let mut calls = self.calls.borrow_mut();
        let n = calls.len().max(cond.len());
        calls.resize(n, 0);
        let mut out = Vec::new();
        for (i, rng) in rngs.iter_mut().enumerate() {
            // consume randomness like a real sampler would
            let _: f64 = rng.random();
            let k = calls[i];
            calls[i] += 1;
            let mut slices = self.fill.slices();
            if self.white_at == Some(k) {
                for s in slices.iter_mut().skip(self.white_slice) {
                    *s = self.white.slice(0);
                }
            }
            out.push(LatentBlock::from_slices(&slices)?);
        }
        Ok(out)
    }
}

/// Returns its conditioning block plus a tag, so chaining is observable.
pub struct EchoStub;

impl BlockGenerator for EchoStub {
    fn next_blocks(&self, cond: &[&LatentBlock], _text: &[&TextEmbedding], _rngs: &mut [ChaCha8Rng]) -> Result<Vec<LatentBlock>> {
        Ok(cond
            .iter()
            .map(|c| {
                let mut b = (*c).clone();
                b.data_mut().iter_mut().for_each(|v| *v += 0.01);
                b
            })
            .collect())
    }
}
