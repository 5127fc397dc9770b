//! Rectified-flow objective and the Euler sampler.
//!
//! Data sits at `t = 0` and Gaussian noise at `t = 1`; the straight path
//! `x_t = (1−t)·x0 + t·x1` has constant velocity `u = x1 − x0`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use volflow_tensor::{Graph, Tensor};

use crate::dataset::PairSample;
use crate::error::{Error, Result};
use crate::latent::LatentBlock;
use crate::model::{forward, stack_blocks, stack_text, ModelParams};
use crate::text::TextEmbedding;

pub const DEFAULT_EULER_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("sampler needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    /// Times visited by the sampler: `1, 1−Δt, …, Δt`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.steps).map(|k| 1.0 - k as f64 / self.steps as f64).collect()
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_EULER_STEPS,
        }
    }
}

fn check_same(a: &LatentBlock, b: &LatentBlock) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!("block shapes differ: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// `(1−t)·x0 + t·x1`
pub fn interpolate(x0: &LatentBlock, x1: &LatentBlock, t: f64) -> Result<LatentBlock> {
    check_same(x0, x1)?;
    let t32 = t as f32;
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| (1.0 - t32) * a + t32 * b)
        .collect();
    LatentBlock::new(x0.height(), x0.width(), data)
}

/// `x1 − x0`
pub fn target_velocity(x0: &LatentBlock, x1: &LatentBlock) -> Result<LatentBlock> {
    check_same(x0, x1)?;
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect();
    LatentBlock::new(x0.height(), x0.width(), data)
}

/// Standard-normal block of the given spatial size.
pub fn noise_block(h: usize, w: usize, rng: &mut impl Rng) -> LatentBlock {
    let mut b = LatentBlock::zeros(h, w);
    for v in b.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: LatentBlock,
    pub x1: LatentBlock,
    pub t: f64,
    pub x_t: LatentBlock,
    pub u: LatentBlock,
}

impl FlowSample {
    /// Draw `t ~ U[0, 1)` and then `x1 ~ N(0, I)` for data `x0`.
    pub fn draw(x0: &LatentBlock, rng: &mut impl Rng) -> Result<Self> {
        let t: f64 = rng.random();
        let x1 = noise_block(x0.height(), x0.width(), rng);
        Ok(Self {
            x_t: interpolate(x0, &x1, t)?,
            u: target_velocity(x0, &x1)?,
            x0: x0.clone(),
            x1,
            t,
        })
    }
}

/// A velocity field over batches of blocks, one time per element.
pub trait VelocityField {
    fn velocity(
        &self,
        x_t: &[&LatentBlock],
        t: &[f64],
        cond: &[&LatentBlock],
        text: &[&TextEmbedding],
    ) -> Result<Vec<LatentBlock>>;
}

impl VelocityField for ModelParams {
    fn velocity(
        &self,
        x_t: &[&LatentBlock],
        t: &[f64],
        cond: &[&LatentBlock],
        text: &[&TextEmbedding],
    ) -> Result<Vec<LatentBlock>> {
        ModelParams::velocity(self, x_t, t, cond, text)
    }
}

/// State that an explicit Euler step can advance.
pub trait EulerState {
    /// `self += alpha · v`
    fn axpy(&mut self, alpha: f64, v: &Self) -> Result<()>;
}

impl EulerState for Vec<f64> {
    fn axpy(&mut self, alpha: f64, v: &Self) -> Result<()> {
        if self.len() != v.len() {
            return Err(Error::Shape("state and velocity differ in length".into()));
        }
        for (x, d) in self.iter_mut().zip(v) {
            *x += alpha * d;
        }
        Ok(())
    }
}

impl EulerState for Vec<LatentBlock> {
    fn axpy(&mut self, alpha: f64, v: &Self) -> Result<()> {
        if self.len() != v.len() {
            return Err(Error::Shape("state and velocity differ in batch size".into()));
        }
        let a = alpha as f32;
        for (x, d) in self.iter_mut().zip(v) {
            check_same(x, d)?;
            for (xi, di) in x.data_mut().iter_mut().zip(d.data()) {
                *xi += a * di;
            }
        }
        Ok(())
    }
}

/// Integrate from `t = 1` down to `t = 0`: `x ← x − Δt·v(x, t)`.
pub fn euler_integrate<S: EulerState>(
    x1: S,
    config: &SamplerConfig,
    mut velocity: impl FnMut(&S, f64) -> Result<S>,
) -> Result<S> {
    if config.steps == 0 {
        return Err(Error::Parameter("sampler needs at least one step".into()));
    }
    let dt = 1.0 / config.steps as f64;
    let mut x = x1;
    for t in config.times() {
        let v = velocity(&x, t)?;
        x.axpy(-dt, &v)?;
    }
    Ok(x)
}

/// Map noise blocks `x1` to data estimates under `field`.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    x1: Vec<LatentBlock>,
    cond: &[&LatentBlock],
    text: &[&TextEmbedding],
    config: &SamplerConfig,
) -> Result<Vec<LatentBlock>> {
    if x1.len() != cond.len() || x1.len() != text.len() {
        return Err(Error::Shape("batch lists differ in length".into()));
    }
    euler_integrate(x1, config, |x, t| {
        let refs: Vec<&LatentBlock> = x.iter().collect();
        field.velocity(&refs, &vec![t; x.len()], cond, text)
    })
}

/// Per-sample flow draws for a batch, in batch order.
pub fn draw_flow_samples(batch: &[PairSample], rng: &mut impl Rng) -> Result<Vec<FlowSample>> {
    batch.iter().map(|s| FlowSample::draw(&s.target, rng)).collect()
}

/// Mean squared velocity error of `field` on a batch (no gradients).
pub fn loss_value<F: VelocityField + ?Sized>(field: &F, batch: &[PairSample], rng: &mut impl Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let flows = draw_flow_samples(batch, rng)?;
    let x: Vec<&LatentBlock> = flows.iter().map(|f| &f.x_t).collect();
    let t: Vec<f64> = flows.iter().map(|f| f.t).collect();
    let c: Vec<&LatentBlock> = batch.iter().map(|s| &s.cond).collect();
    let e: Vec<&TextEmbedding> = batch.iter().map(|s| &s.text).collect();
    let v = field.velocity(&x, &t, &c, &e)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (vi, f) in v.iter().zip(&flows) {
        for (a, b) in vi.data().iter().zip(f.u.data()) {
            sum += ((a - b) as f64).powi(2);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub type ParamGrads = BTreeMap<String, Tensor<f32>>;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Flow-matching loss and parameter gradients on one batch.
pub fn fm_loss(params: &ModelParams, batch: &[PairSample], rng: &mut impl Rng) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let flows = draw_flow_samples(batch, rng)?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let xt = g.constant(stack_blocks(&flows.iter().map(|f| &f.x_t).collect::<Vec<_>>())?);
    let u = g.constant(stack_blocks(&flows.iter().map(|f| &f.u).collect::<Vec<_>>())?);
    let cond = g.constant(stack_blocks(&batch.iter().map(|s| &s.cond).collect::<Vec<_>>())?);
    let text = g.constant(stack_text(&batch.iter().map(|s| &s.text).collect::<Vec<_>>())?);
    let t: Vec<f64> = flows.iter().map(|f| f.t).collect();
    let v = forward(&params.config, &mut g, &p, xt, &t, cond, text)?;
    let diff = g.sub(v, u)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq)?;
    let value = g.value(loss).item().expect("scalar loss") as f64;
    let grads = g.backward(loss)?;
    let grads = p
        .0
        .iter()
        .map(|(name, &var)| (name.clone(), grads.get_or_zeros(&g, var)))
        .collect();
    Ok(LossOutput { loss: value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(v: f32) -> LatentBlock {
        let mut b = LatentBlock::zeros(1, 1);
        b.data_mut().iter_mut().for_each(|x| *x = v);
        b
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (a, b) = (block(0.0), block(2.0));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap(), block(1.0));
        assert_eq!(target_velocity(&block(1.0), &block(3.0)).unwrap(), block(2.0));
        assert_eq!(target_velocity(&a, &a).unwrap(), a);
    }

    #[test]
    fn sampler_times() {
        assert_eq!(SamplerConfig::new(4).unwrap().times(), vec![1.0, 0.75, 0.5, 0.25]);
        assert!(SamplerConfig::new(0).is_err());
    }
}
