//! Spatio-temporal velocity transformer.
//!
//! The noisy target block and the conditioning block are stacked along the
//! channel axis, cut into 2×2×2 patches and embedded as tokens. Blocks
//! alternate attention within a temporal index (spatial) and across temporal
//! indices at a fixed position (temporal). Diffusion time and the report
//! embedding enter through adaptive layer norm; the output projection starts
//! at zero, so an untrained model predicts zero velocity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use volflow_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::latent::{LatentBlock, BLOCK_LEN, LATENT_CHANNELS};
use crate::text::{TextEmbedding, EMBED_DIM};

pub const PATCH_T: usize = 2;
pub const PATCH_S: usize = 2;
/// Width of the sinusoidal timestep features.
pub const FREQ_DIM: usize = 256;
const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    Tiny,
    S,
    B,
    L,
}

impl ModelSize {
    /// `(dim, heads, depth)`; depth counts spatial+temporal pairs.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Self::Tiny => (64, 4, 2),
            Self::S => (384, 6, 7),
            Self::B => (768, 12, 7),
            Self::L => (1152, 16, 11),
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "s" => Ok(Self::S),
            "b" => Ok(Self::B),
            "l" => Ok(Self::L),
            _ => Err(Error::Parameter(format!("unknown model size {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: ModelSize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: [usize; 3],
    pub in_channels: usize,
    pub cond_dim: usize,
    /// Latent spatial size the positional table is built for.
    pub latent_hw: [usize; 2],
}

impl ModelConfig {
    pub fn new(name: ModelSize, latent_h: usize, latent_w: usize) -> Self {
        let (dim, heads, depth) = name.dims();
        Self {
            name,
            dim,
            heads,
            depth,
            patch: [PATCH_T, PATCH_S, PATCH_S],
            in_channels: 2 * LATENT_CHANNELS,
            cond_dim: EMBED_DIM,
            latent_hw: [latent_h, latent_w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.latent_hw;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Parameter("depth must be at least 1".into()));
        }
        if self.patch != [PATCH_T, PATCH_S, PATCH_S] || self.in_channels != 2 * LATENT_CHANNELS {
            return Err(Error::Parameter("only 2x2x2 patches over 32 input channels are supported".into()));
        }
        if self.cond_dim != EMBED_DIM {
            return Err(Error::Parameter(format!("cond_dim must be {EMBED_DIM}")));
        }
        if h == 0 || w == 0 || h % PATCH_S != 0 || w % PATCH_S != 0 {
            return Err(Error::Shape(format!("latent size {h}x{w} must be even")));
        }
        Ok(())
    }

    pub fn temporal_tokens(&self) -> usize {
        BLOCK_LEN / PATCH_T
    }

    pub fn spatial_tokens(&self) -> usize {
        (self.latent_hw[0] / PATCH_S) * (self.latent_hw[1] / PATCH_S)
    }

    pub fn tokens(&self) -> usize {
        self.temporal_tokens() * self.spatial_tokens()
    }

    pub fn patch_features(&self) -> usize {
        self.in_channels * PATCH_T * PATCH_S * PATCH_S
    }

    pub fn out_features(&self) -> usize {
        LATENT_CHANNELS * PATCH_T * PATCH_S * PATCH_S
    }

    /// Every parameter's name and shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        linear("patch_embed", self.patch_features(), d);
        linear("t_embed.fc1", FREQ_DIM, d);
        linear("t_embed.fc2", d, d);
        linear("text_embed", self.cond_dim, d);
        for i in 0..self.depth {
            for kind in ["spatial", "temporal"] {
                let p = format!("blocks.{i}.{kind}");
                linear(&format!("{p}.ada"), d, 6 * d);
                linear(&format!("{p}.attn.qkv"), d, 3 * d);
                linear(&format!("{p}.attn.proj"), d, d);
                linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d);
                linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d);
            }
        }
        linear("final.ada", d, 2 * d);
        linear("final.proj", d, self.out_features());
        linear("final.skip", d, 2 * LATENT_CHANNELS);
        out.push(("pos.temporal".into(), vec![self.temporal_tokens(), d]));
        out.push(("pos.spatial".into(), vec![self.spatial_tokens(), d]));
        out
    }

    /// Parameter count, computed from shapes alone.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

enum Init {
    Zero,
    Xavier,
    Normal(f64),
}

fn init_kind(name: &str) -> Init {
    if name.starts_with("final.proj") || name.starts_with("final.skip") || name.ends_with(".b") {
        Init::Zero
    } else if name.starts_with("pos.") || name.ends_with("ada.w") {
        Init::Normal(EMBED_STD)
    } else {
        Init::Xavier
    }
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform linear weights, N(0, 0.02²)
    /// positional tables and modulation weights, zero biases and a zero
    /// output projection.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init_kind(&name) {
                Init::Zero => vec![0.0; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                }
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let d = Uniform::new(-a, a).expect("valid range");
                    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    /// Add every parameter to `g` as a leaf (trainable or constant).
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.cast(), trainable)))
                .collect(),
        )
    }

    /// Check that names and shapes match the config.
    pub fn validate(&self) -> Result<()> {
        let expected = self.config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for each named parameter.
#[derive(Debug, Clone)]
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }
}

/// Sinusoidal timestep features (`t` scaled by 1000), `[cos | sin]`.
pub fn timestep_features(t: &[f64]) -> Vec<f64> {
    let half = FREQ_DIM / 2;
    let mut out = Vec::with_capacity(t.len() * FREQ_DIM);
    for &ti in t {
        let args: Vec<f64> = (0..half)
            .map(|k| ti * 1000.0 * (-(10000f64).ln() * k as f64 / half as f64).exp())
            .collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
    }
    out
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// `x·(1 + scale) + shift`
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    Ok(g.add(y, shift)?)
}

/// Multi-head self-attention over `x: [groups, len, dim]`.
fn attention<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (groups, len, dim) = (s[0], s[1], s[2]);
    let dh = dim / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[groups, len, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let parts = g.split(qkv, 0, &[1, 1, 1])?;
    let mut qkv4 = Vec::with_capacity(3);
    for v in parts {
        qkv4.push(g.reshape(v, &[groups, heads, len, dh])?);
    }
    let kt = g.transpose(qkv4[1])?;
    let scores = g.matmul(qkv4[0], kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 3)?;
    let o = g.matmul(attn, qkv4[2])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[groups, len, dim])?;
    linear(g, p, &format!("{prefix}.proj"), o)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Spatial,
    Temporal,
}

/// One adaLN transformer block on tokens `x: [b, tt·ss, d]`.
#[allow(clippy::too_many_arguments)]
fn dit_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    c: Var,
    axis: Axis,
    (b, tt, ss, d): (usize, usize, usize, usize),
    heads: usize,
) -> Result<Var> {
    let m = linear(g, p, &format!("{prefix}.ada"), c)?;
    let m = g.reshape(m, &[b, 1, 6 * d])?;
    let m = g.split(m, 2, &[d; 6])?;
    let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

    let h = g.layer_norm(x, None, None, LN_EPS)?;
    let h = modulate(g, h, shift1, scale1)?;
    let h = match axis {
        Axis::Spatial => {
            let h = g.reshape(h, &[b * tt, ss, d])?;
            let h = attention(g, p, &format!("{prefix}.attn"), h, heads)?;
            g.reshape(h, &[b, tt * ss, d])?
        }
        Axis::Temporal => {
            let h = g.reshape(h, &[b, tt, ss, d])?;
            let h = g.permute(h, &[0, 2, 1, 3])?;
            let h = g.reshape(h, &[b * ss, tt, d])?;
            let h = attention(g, p, &format!("{prefix}.attn"), h, heads)?;
            let h = g.reshape(h, &[b, ss, tt, d])?;
            let h = g.permute(h, &[0, 2, 1, 3])?;
            g.reshape(h, &[b, tt * ss, d])?
        }
    };
    let h = g.mul(h, gate1)?;
    let x = g.add(x, h)?;

    let h = g.layer_norm(x, None, None, LN_EPS)?;
    let h = modulate(g, h, shift2, scale2)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    let h = g.mul(h, gate2)?;
    Ok(g.add(x, h)?)
}

/// `[b, 16, c, h, w]` → `[b, tokens, c·8]`, patches ordered (t', y', x').
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [b, t, c, h, w] = s[..] else {
        return Err(Error::Shape(format!("patchify expects a rank-5 input, got {s:?}")));
    };
    if t % PATCH_T != 0 || h % PATCH_S != 0 || w % PATCH_S != 0 {
        return Err(Error::Shape(format!("extents {s:?} are not divisible by the patch size")));
    }
    let (tt, hh, ww) = (t / PATCH_T, h / PATCH_S, w / PATCH_S);
    let x = g.reshape(x, &[b, tt, PATCH_T, c, hh, PATCH_S, ww, PATCH_S])?;
    let x = g.permute(x, &[0, 1, 4, 6, 3, 2, 5, 7])?;
    Ok(g.reshape(x, &[b, tt * hh * ww, c * PATCH_T * PATCH_S * PATCH_S])?)
}

/// Inverse of [`patchify`] for `c` output channels.
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, x: Var, t: usize, c: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (tt, hh, ww) = (t / PATCH_T, h / PATCH_S, w / PATCH_S);
    let [b, n, f] = s[..] else {
        return Err(Error::Shape(format!("unpatchify expects a rank-3 input, got {s:?}")));
    };
    if n != tt * hh * ww || f != c * PATCH_T * PATCH_S * PATCH_S {
        return Err(Error::Shape(format!("token grid {s:?} does not match ({t}, {c}, {h}, {w})")));
    }
    let x = g.reshape(x, &[b, tt, hh, ww, c, PATCH_T, PATCH_S, PATCH_S])?;
    let x = g.permute(x, &[0, 1, 5, 4, 2, 6, 3, 7])?;
    Ok(g.reshape(x, &[b, t, c, h, w])?)
}

/// Velocity for a batch: `x_t`, `cond` are `[b, 16, 16, h, w]`, `text` is `[b, 256]`,
/// `t` holds one time per batch element.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &ParamVars,
    x_t: Var,
    t: &[f64],
    cond: Var,
    text: Var,
) -> Result<Var> {
    let s = g.shape(x_t).to_vec();
    let [b, tl, c, h, w] = s[..] else {
        return Err(Error::Shape(format!("x_t must be [b, 16, 16, h, w], got {s:?}")));
    };
    if tl != BLOCK_LEN || c != LATENT_CHANNELS || [h, w] != cfg.latent_hw {
        return Err(Error::Shape(format!(
            "x_t shape {s:?} does not match model latent size {:?}",
            cfg.latent_hw
        )));
    }
    if g.shape(cond) != s.as_slice() {
        return Err(Error::Shape(format!(
            "cond shape {:?} differs from x_t shape {s:?}",
            g.shape(cond)
        )));
    }
    if g.shape(text) != [b, cfg.cond_dim] {
        return Err(Error::Shape(format!(
            "text shape {:?}, expected [{b}, {}]",
            g.shape(text),
            cfg.cond_dim
        )));
    }
    if t.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
    }
    let d = cfg.dim;
    let (tt, ss) = (cfg.temporal_tokens(), cfg.spatial_tokens());

    let x = g.concat(&[x_t, cond], 2)?;
    let x = patchify(g, x)?;
    let x = linear(g, p, "patch_embed", x)?;
    let x = g.reshape(x, &[b, tt, ss, d])?;
    let pt = p.get("pos.temporal")?;
    let pt = g.reshape(pt, &[tt, 1, d])?;
    let x = g.add(x, pt)?;
    let x = g.add(x, p.get("pos.spatial")?)?;
    let mut x = g.reshape(x, &[b, tt * ss, d])?;

    let tf = Tensor::new(vec![b, FREQ_DIM], timestep_features(t).into_iter().map(T::from_f64).collect())?;
    let tf = g.constant(tf);
    let te = linear(g, p, "t_embed.fc1", tf)?;
    let te = g.gelu(te)?;
    let te = linear(g, p, "t_embed.fc2", te)?;
    let ce = linear(g, p, "text_embed", text)?;
    let c = g.add(te, ce)?;
    let c = g.gelu(c)?;

    for i in 0..cfg.depth {
        for (kind, axis) in [("spatial", Axis::Spatial), ("temporal", Axis::Temporal)] {
            x = dit_block(g, p, &format!("blocks.{i}.{kind}"), x, c, axis, (b, tt, ss, d), cfg.heads)?;
        }
    }

    let m = linear(g, p, "final.ada", c)?;
    let m = g.reshape(m, &[b, 1, 2 * d])?;
    let m = g.split(m, 2, &[d, d])?;
    let y = g.layer_norm(x, None, None, LN_EPS)?;
    let y = modulate(g, y, m[0], m[1])?;
    let out = linear(g, p, "final.proj", y)?;
    let out = unpatchify(g, out, BLOCK_LEN, LATENT_CHANNELS, h, w)?;

    // per-channel gains on x_t and cond, bypassing the token bottleneck
    let gains = linear(g, p, "final.skip", c)?;
    let gains = g.reshape(gains, &[b, 1, 2 * LATENT_CHANNELS, 1, 1])?;
    let gains = g.split(gains, 2, &[LATENT_CHANNELS, LATENT_CHANNELS])?;
    let sx = g.mul(x_t, gains[0])?;
    let sc = g.mul(cond, gains[1])?;
    let out = g.add(out, sx)?;
    Ok(g.add(out, sc)?)
}

/// Stack blocks into a `[b, 16, 16, h, w]` tensor.
pub fn stack_blocks<T: Scalar>(blocks: &[&LatentBlock]) -> Result<Tensor<T>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    if blocks.iter().any(|b| !b.same_shape(first)) {
        return Err(Error::Shape("batch blocks differ in spatial size".into()));
    }
    let mut shape = vec![blocks.len()];
    shape.extend(first.shape());
    let data = blocks
        .iter()
        .flat_map(|b| b.data().iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn stack_text<T: Scalar>(texts: &[&TextEmbedding]) -> Result<Tensor<T>> {
    let data = texts
        .iter()
        .flat_map(|e| e.vector().iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Ok(Tensor::new(vec![texts.len(), EMBED_DIM], data)?)
}

/// Split a `[b, 16, 16, h, w]` tensor back into blocks.
pub fn unstack_blocks<T: Scalar>(t: &Tensor<T>) -> Result<Vec<LatentBlock>> {
    let s = t.shape();
    let [b, _, _, h, w] = s[..] else {
        return Err(Error::Shape(format!("expected rank-5 block batch, got {s:?}")));
    };
    let n = BLOCK_LEN * LATENT_CHANNELS * h * w;
    (0..b)
        .map(|i| {
            let data = t.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64() as f32).collect();
            LatentBlock::new(h, w, data)
        })
        .collect()
}

impl ModelParams {
    /// Inference-only velocity for a batch of blocks sharing one time `t`.
    pub fn velocity(
        &self,
        x_t: &[&LatentBlock],
        t: &[f64],
        cond: &[&LatentBlock],
        text: &[&TextEmbedding],
    ) -> Result<Vec<LatentBlock>> {
        if x_t.len() != cond.len() || x_t.len() != text.len() {
            return Err(Error::Shape("batch lists differ in length".into()));
        }
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(stack_blocks(x_t)?);
        let cv = g.constant(stack_blocks(cond)?);
        let tv = g.constant(stack_text(text)?);
        let v = forward(&self.config, &mut g, &p, xv, t, cv, tv)?;
        unstack_blocks(g.value(v))
    }
}
