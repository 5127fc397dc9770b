//! Generate a validation set under one inference mode and score it at one or
//! more output resolutions.

use serde::{Deserialize, Serialize};

use crate::dataset::LatentDataset;
use crate::error::{Error, Result};
use crate::latent::{LatentSlice, BLOCK_LEN};
use crate::metrics::{compute_metrics, FeatureNet, MetricReport, Resolution, DEFAULT_FEATURE_SEED};
use crate::sampler::{
    generate_volumes, next_block_eval, next_block_volume, BlockGenerator, GenerateOptions, GenerationRequest,
    GenerationTrace, InferenceMode,
};
use crate::slice::SliceImage;
use crate::text::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub feature_seed: u64,
    /// Use only the first `n` validation volumes.
    pub max_volumes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_seed: DEFAULT_FEATURE_SEED,
            max_volumes: None,
        }
    }
}

impl EvalConfig {
    fn count(&self, dataset: &LatentDataset) -> usize {
        self.max_volumes.map_or(dataset.len(), |n| n.min(dataset.len()))
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub mode: InferenceMode,
    pub reports: Vec<Report>,
    pub latents: Vec<Vec<LatentSlice>>,
    pub volumes: Vec<Vec<SliceImage>>,
    /// Present for autoregressive modes.
    pub traces: Vec<GenerationTrace>,
}

/// Seed of next-block volume `i` under base seed `seed`.
fn volume_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x100_0000_01b3).wrapping_add(i as u64)
}

pub fn generate_set<G: BlockGenerator + ?Sized>(
    gen: &G,
    dataset: &LatentDataset,
    mode: InferenceMode,
    cfg: &EvalConfig,
) -> Result<GeneratedSet> {
    let n = cfg.count(dataset);
    if n == 0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    let sentinels = dataset.sentinels()?;
    let reports = dataset.reports[..n].to_vec();
    match mode {
        InferenceMode::FullBody | InferenceMode::GtHead => {
            let requests: Vec<GenerationRequest> = (0..n)
                .map(|i| GenerationRequest {
                    report: dataset.reports[i].clone(),
                    text: dataset.embeddings[i].clone(),
                    head: (mode == InferenceMode::GtHead)
                        .then(|| dataset.volumes[i].window(0, &sentinels.white_slice)),
                })
                .collect();
            let opts = GenerateOptions {
                seed: cfg.seed,
                max_blocks: None,
            };
            let out = generate_volumes(gen, &dataset.basis, &sentinels, &requests, mode, &opts)?;
            let mut set = GeneratedSet {
                mode,
                reports,
                latents: Vec::new(),
                volumes: Vec::new(),
                traces: Vec::new(),
            };
            for v in out {
                set.latents.push(v.latents);
                set.volumes.push(v.slices);
                set.traces.push(v.trace);
            }
            Ok(set)
        }
        InferenceMode::NextBlock => {
            let mut latents = Vec::with_capacity(n);
            let mut volumes = Vec::with_capacity(n);
            for i in 0..n {
                let vol = &dataset.volumes[i];
                let preds = next_block_eval(gen, vol, &dataset.embeddings[i], &sentinels, volume_seed(cfg.seed, i))?;
                let slices = next_block_volume(&preds, vol.len());
                volumes.push(dataset.basis.decode_volume(&slices)?);
                latents.push(slices);
            }
            Ok(GeneratedSet {
                mode,
                reports,
                latents,
                volumes,
                traces: Vec::new(),
            })
        }
    }
}

/// Source phantoms of the first validation volumes, rendered at `factor`×
/// the dataset resolution.
pub fn real_volumes(dataset: &LatentDataset, factor: usize, max_volumes: Option<usize>) -> Result<Vec<Vec<SliceImage>>> {
    let n = max_volumes.map_or(dataset.len(), |m| m.min(dataset.len()));
    dataset.records[..n]
        .iter()
        .map(|r| Ok(r.render(r.resolution * factor)?.slices))
        .collect()
}

/// Metrics of an already generated set at each requested resolution.
///
/// The real reference covers the same slice range as the mode generates, so
/// next-block output is compared against real slices from `BLOCK_LEN` on.
pub fn score_set(
    set: &GeneratedSet,
    dataset: &LatentDataset,
    resolutions: &[Resolution],
    cfg: &EvalConfig,
) -> Result<Vec<MetricReport>> {
    let net = FeatureNet::new(cfg.feature_seed);
    let n = set.volumes.len();
    let mut rows = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        let mut real = real_volumes(dataset, res.factor(), Some(n))?;
        if set.mode == InferenceMode::NextBlock {
            // predictions cover slices [BLOCK_LEN, N) only
            for v in &mut real {
                v.drain(..BLOCK_LEN.min(v.len()));
            }
        }
        let generated: Vec<Vec<SliceImage>> = set.volumes.iter().map(|v| res.apply(v)).collect::<Result<_>>()?;
        rows.push(compute_metrics(
            set.mode.name(),
            res,
            &set.reports,
            &generated,
            &real,
            &net,
            &dataset.probe,
        )?);
    }
    Ok(rows)
}

/// Generate under `mode`, then score at every resolution in `resolutions`.
pub fn evaluate<G: BlockGenerator + ?Sized>(
    gen: &G,
    dataset: &LatentDataset,
    mode: InferenceMode,
    resolutions: &[Resolution],
    cfg: &EvalConfig,
) -> Result<(GeneratedSet, Vec<MetricReport>)> {
    let set = generate_set(gen, dataset, mode, cfg)?;
    let rows = score_set(&set, dataset, resolutions, cfg)?;
    Ok((set, rows))
}

/// Real validation volumes scored against themselves (a sanity floor).
pub fn evaluate_real(dataset: &LatentDataset, resolution: Resolution, cfg: &EvalConfig) -> Result<MetricReport> {
    let real = real_volumes(dataset, resolution.factor(), cfg.max_volumes)?;
    let reports = dataset.reports[..real.len()].to_vec();
    compute_metrics(
        "real",
        resolution,
        &reports,
        &real,
        &real,
        &FeatureNet::new(cfg.feature_seed),
        &dataset.probe,
    )
}

/// Number of generated volumes within `tol` slices of their prompted length.
pub fn length_hits(set: &GeneratedSet, tol: usize) -> usize {
    set.reports
        .iter()
        .zip(&set.volumes)
        .filter(|(r, v)| r.length_slices().abs_diff(v.len()) <= tol)
        .count()
}

/// Default tolerance used for length agreement, one block.
pub const LENGTH_TOLERANCE: usize = BLOCK_LEN;
