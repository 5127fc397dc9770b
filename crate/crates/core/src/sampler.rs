//! Block-level autoregression.
//!
//! Generation starts from the black sentinel (or a real first block), repeatedly
//! predicts the next 16 slices from the previous 16 and the report, and stops as
//! soon as a decoded slice turns white or a block cap is hit.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecBasis;
use crate::dataset::Sentinels;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, noise_block, SamplerConfig, VelocityField};
use crate::latent::{LatentBlock, LatentSlice, LatentVolume, BLOCK_LEN};
use crate::slice::SliceImage;
use crate::text::{Report, TextEmbedding};

/// Mean decoded pixel above which a slice counts as the end token.
pub const WHITE_THRESHOLD: f32 = 0.9;

/// Largest batch handed to a generator in one call.
const GEN_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    FullBody,
    GtHead,
    NextBlock,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [Self::FullBody, Self::GtHead, Self::NextBlock];

    pub fn name(self) -> &'static str {
        match self {
            Self::FullBody => "full-body",
            Self::GtHead => "gt-head",
            Self::NextBlock => "next-block",
        }
    }

    /// Whether the mode reads real validation volumes.
    pub fn needs_ground_truth(self) -> bool {
        !matches!(self, Self::FullBody)
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown inference mode {s:?}")))
    }
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Anything that maps conditioning blocks to next blocks.
pub trait BlockGenerator {
    /// One prediction per batch element; element `i` draws only from `rngs[i]`.
    fn next_blocks(
        &self,
        cond: &[&LatentBlock],
        text: &[&TextEmbedding],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<LatentBlock>>;
}

/// Flow-matching generator: noise from each rng, then batched Euler sampling.
pub struct FlowGenerator<'a, F: ?Sized> {
    pub field: &'a F,
    pub sampler: SamplerConfig,
}

impl<'a, F: VelocityField + ?Sized> FlowGenerator<'a, F> {
    pub fn new(field: &'a F, sampler: SamplerConfig) -> Self {
        Self { field, sampler }
    }
}

impl<F: VelocityField + ?Sized> BlockGenerator for FlowGenerator<'_, F> {
    fn next_blocks(
        &self,
        cond: &[&LatentBlock],
        text: &[&TextEmbedding],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<LatentBlock>> {
        if cond.len() != rngs.len() {
            return Err(Error::Shape("one rng per batch element required".into()));
        }
        let x1 = cond
            .iter()
            .zip(rngs.iter_mut())
            .map(|(c, rng)| noise_block(c.height(), c.width(), rng))
            .collect();
        euler_sample(self.field, x1, cond, text, &self.sampler)
    }
}

/// Draw noise and Euler-sample a single block conditioned on `(cond, text)`.
pub fn generate_next<F: VelocityField + ?Sized>(
    field: &F,
    cond: &LatentBlock,
    text: &TextEmbedding,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LatentBlock> {
    let gen = FlowGenerator::new(field, *sampler);
    let mut out = gen.next_blocks(&[cond], &[text], std::slice::from_mut(rng))?;
    Ok(out.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndCheck {
    pub slice_means: Vec<f32>,
    pub first_white: Option<usize>,
}

impl EndCheck {
    pub fn is_end(&self) -> bool {
        self.first_white.is_some()
    }

    /// Largest decoded slice mean in the block.
    pub fn white_score(&self) -> f32 {
        self.slice_means.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

pub fn detect_end(block: &LatentBlock, basis: &CodecBasis) -> Result<EndCheck> {
    let slice_means = basis.slice_means(block)?;
    let first_white = slice_means.iter().position(|&m| m > WHITE_THRESHOLD);
    Ok(EndCheck {
        slice_means,
        first_white,
    })
}

/// Block budget for a requested length: `ceil(len/16) + 2`.
pub fn block_cap(requested_len: usize) -> usize {
    requested_len.div_ceil(BLOCK_LEN) + 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    WhiteSentinel,
    BlockCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub mode: InferenceMode,
    pub requested_length: usize,
    pub output_length: usize,
    pub stop_reason: StopReason,
    /// Max decoded slice mean per generated block.
    pub white_scores: Vec<f32>,
    /// Raw blocks, head included, before truncation.
    #[serde(skip)]
    pub blocks: Vec<LatentBlock>,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub report: Report,
    pub text: TextEmbedding,
    /// Real first block; required by GT-head generation.
    pub head: Option<LatentBlock>,
}

#[derive(Debug, Clone)]
pub struct GeneratedVolume {
    pub latents: Vec<LatentSlice>,
    pub slices: Vec<SliceImage>,
    pub trace: GenerationTrace,
}

impl GeneratedVolume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub seed: u64,
    /// Overrides the length-derived cap when set.
    pub max_blocks: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_blocks: None,
        }
    }
}

struct Running {
    blocks: Vec<LatentBlock>,
    white_scores: Vec<f32>,
    cap: usize,
    stop: Option<(StopReason, usize)>,
}

/// Autoregressive generation for a batch of requests, advanced in lockstep.
///
/// Request `i` draws from stream `i` of `opts.seed`, so results do not depend on
/// how many other requests share the batch.
pub fn generate_volumes<G: BlockGenerator + ?Sized>(
    gen: &G,
    basis: &CodecBasis,
    sentinels: &Sentinels,
    requests: &[GenerationRequest],
    mode: InferenceMode,
    opts: &GenerateOptions,
) -> Result<Vec<GeneratedVolume>> {
    if mode == InferenceMode::NextBlock {
        return Err(Error::Usage("next-block predictions come from next_block_eval".into()));
    }
    let mut states = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let blocks = match mode {
            InferenceMode::GtHead => {
                let head = req
                    .head
                    .clone()
                    .ok_or_else(|| Error::Usage(format!("gt-head request {i} has no ground-truth block")))?;
                if !head.same_shape(&sentinels.black) {
                    return Err(Error::Shape("ground-truth head does not match latent size".into()));
                }
                vec![head]
            }
            _ => Vec::new(),
        };
        let cap = opts.max_blocks.unwrap_or_else(|| block_cap(req.report.length_slices()));
        let stop = (blocks.len() >= cap).then_some((StopReason::BlockCap, blocks.len() * BLOCK_LEN));
        states.push(Running {
            blocks,
            white_scores: Vec::new(),
            cap,
            stop,
        });
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..requests.len()).map(|i| stream_rng(opts.seed, i as u64)).collect();

    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| states[i].stop.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut next = Vec::with_capacity(active.len());
        let mut sub: Vec<ChaCha8Rng> = active.iter().map(|&i| rngs[i].clone()).collect();
        for (idx, chunk_rngs) in active.chunks(GEN_BATCH).zip(sub.chunks_mut(GEN_BATCH)) {
            let cond: Vec<&LatentBlock> = idx
                .iter()
                .map(|&i| states[i].blocks.last().unwrap_or(&sentinels.black))
                .collect();
            let text: Vec<&TextEmbedding> = idx.iter().map(|&i| &requests[i].text).collect();
            let out = gen.next_blocks(&cond, &text, chunk_rngs)?;
            if out.len() != idx.len() {
                return Err(Error::Shape("generator returned the wrong batch size".into()));
            }
            next.extend(out);
        }
        for ((&i, block), rng) in active.iter().zip(next).zip(sub) {
            rngs[i] = rng;
            let check = detect_end(&block, basis)?;
            let st = &mut states[i];
            let offset = st.blocks.len() * BLOCK_LEN;
            st.white_scores.push(check.white_score());
            st.blocks.push(block);
            if let Some(k) = check.first_white {
                st.stop = Some((StopReason::WhiteSentinel, offset + k));
            } else if st.blocks.len() >= st.cap {
                st.stop = Some((StopReason::BlockCap, offset + BLOCK_LEN));
            }
        }
    }

    states
        .into_iter()
        .zip(requests)
        .map(|(st, req)| {
            let (stop_reason, len) = st.stop.expect("loop ends only when every request stopped");
            let latents: Vec<LatentSlice> = st.blocks.iter().flat_map(|b| b.slices()).take(len).collect();
            let slices = basis.decode_volume(&latents)?;
            Ok(GeneratedVolume {
                trace: GenerationTrace {
                    mode,
                    requested_length: req.report.length_slices(),
                    output_length: latents.len(),
                    stop_reason,
                    white_scores: st.white_scores,
                    blocks: st.blocks,
                },
                latents,
                slices,
            })
        })
        .collect()
}

/// Single-request convenience wrapper around [`generate_volumes`].
pub fn generate_volume<G: BlockGenerator + ?Sized>(
    gen: &G,
    basis: &CodecBasis,
    sentinels: &Sentinels,
    request: &GenerationRequest,
    mode: InferenceMode,
    opts: &GenerateOptions,
) -> Result<GeneratedVolume> {
    let mut v = generate_volumes(gen, basis, sentinels, std::slice::from_ref(request), mode, opts)?;
    Ok(v.remove(0))
}

/// Start indices of the real conditioning blocks used by next-block evaluation.
pub fn next_block_starts(len: usize) -> Vec<usize> {
    (0..)
        .map(|k| k * BLOCK_LEN)
        .take_while(|&s| s + BLOCK_LEN <= len)
        .collect()
}

/// Predict each block from the real block before it.
///
/// Conditioning windows start at 0, 16, 32, … and the prediction for the window
/// at `s` targets slices `s+16..s+32` (white-padded past the end). Prediction
/// `k` uses stream `k` of `seed`, so evaluation order does not matter.
pub fn next_block_eval<G: BlockGenerator + ?Sized>(
    gen: &G,
    volume: &LatentVolume,
    text: &TextEmbedding,
    sentinels: &Sentinels,
    seed: u64,
) -> Result<Vec<LatentBlock>> {
    if volume.len() < 2 * BLOCK_LEN {
        return Err(Error::Usage(format!(
            "next-block evaluation needs at least {} slices, got {}",
            2 * BLOCK_LEN,
            volume.len()
        )));
    }
    let conds: Vec<LatentBlock> = next_block_starts(volume.len())
        .into_iter()
        .map(|s| volume.window(s, &sentinels.white_slice))
        .collect();
    let cond_refs: Vec<&LatentBlock> = conds.iter().collect();
    let texts = vec![text; conds.len()];
    let mut rngs: Vec<ChaCha8Rng> = (0..conds.len()).map(|k| stream_rng(seed, k as u64)).collect();
    gen.next_blocks(&cond_refs, &texts, &mut rngs)
}

/// Ground-truth targets parallel to [`next_block_eval`]'s predictions.
pub fn next_block_targets(volume: &LatentVolume, sentinels: &Sentinels) -> Vec<LatentBlock> {
    next_block_starts(volume.len())
        .into_iter()
        .map(|s| volume.window(s + BLOCK_LEN, &sentinels.white_slice))
        .collect()
}

/// Predictions laid end to end and cut to the real slices they cover
/// (`16..len` of the source volume).
pub fn next_block_volume(predictions: &[LatentBlock], source_len: usize) -> Vec<LatentSlice> {
    predictions
        .iter()
        .flat_map(|b| b.slices())
        .take(source_len.saturating_sub(BLOCK_LEN))
        .collect()
}
