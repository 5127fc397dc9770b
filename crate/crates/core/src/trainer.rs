//! Adam training loop with linear warmup, gradient accumulation and
//! bit-exact checkpoints.
//!
//! A checkpoint file is `CTCK`, a `u32` version, a length-prefixed JSON
//! metadata block, then named little-endian `f32` tensors: parameters under
//! `param/`, Adam moments under `adam.m/` and `adam.v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volflow_tensor::Tensor;

use crate::dataset::{LatentDataset, PairSample, SamplingRegime, Sentinels};
use crate::error::{io_err, Error, Result};
use crate::flow::{fm_loss, ParamGrads};
use crate::model::{ModelConfig, ModelParams, ModelSize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory written by `gen-data`.
    pub dataset: PathBuf,
    pub model: ModelSize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Micro-batch size.
    pub batch_per_step: usize,
    pub accum_steps: usize,
    pub regime: SamplingRegime,
    pub seed: u64,
    /// Global gradient-norm clip; off when unset.
    pub clip_grad_norm: Option<f64>,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: ModelSize::Tiny,
            lr_peak: 2e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_per_step: 8,
            accum_steps: 1,
            regime: SamplingRegime::default(),
            seed: 0,
            clip_grad_norm: None,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Parameter(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.accum_steps == 0 || self.batch_per_step == 0 {
            return Err(Error::Parameter("batch_per_step and accum_steps must be at least 1".into()));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return Err(Error::Parameter(format!("lr_peak {} must be positive", self.lr_peak)));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Parameter(format!("clip_grad_norm {c} must be positive")));
            }
        }
        self.regime.validate()
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_per_step * self.accum_steps
    }

    /// A checkpoint trained under `other` may be resumed under `self` when only
    /// the step budget and checkpoint cadence differ.
    pub fn check_resumable(&self, other: &TrainConfig) -> Result<()> {
        let mut a = self.clone();
        a.total_steps = other.total_steps;
        a.checkpoint_every = other.checkpoint_every;
        a.dataset = other.dataset.clone();
        if a != *other {
            return Err(Error::Usage("checkpoint was trained with a different configuration".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

/// `lr_peak · min(1, step / warmup)`, constant after warmup.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr_peak;
    }
    config.lr_peak * (step as f64 / config.warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<_, _> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        for (name, p) in &params.tensors {
            for (kind, map) in [("m", &self.m), ("v", &self.v)] {
                match map.get(name) {
                    Some(t) if t.shape() == p.shape() => {}
                    _ => return Err(Error::Shape(format!("adam {kind} moment for {name} missing or misshapen"))),
                }
            }
        }
        if self.m.len() != params.tensors.len() || self.v.len() != params.tensors.len() {
            return Err(Error::Shape("adam moments name unknown parameters".into()));
        }
        Ok(())
    }
}

/// Fail with the first parameter whose gradient holds a NaN or infinity.
pub fn check_finite(grads: &ParamGrads) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteGradient(name.clone())),
        None => Ok(()),
    }
}

pub fn grad_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients down so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update.
pub fn optim_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut OptimState, lr: f64) -> Result<()> {
    check_finite(grads)?;
    for (name, p) in &params.tensors {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            _ => return Err(Error::Shape(format!("gradient for {name} missing or misshapen"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("validated").data_mut();
        let v = state.v.get_mut(name).expect("validated").data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m1 = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
            let v1 = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
            *mi = m1 as f32;
            *vi = v1 as f32;
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + ADAM_EPS);
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in records {
        s.push_str(&format!("{},{:.8},{:.6e}\n", r.step, r.loss, r.lr));
    }
    s
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Parse(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    step: usize,
    optim_step: u64,
    model: ModelConfig,
    train: TrainConfig,
    rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ModelParams,
    pub optim: OptimState,
    pub train: TrainConfig,
    pub rng: RngState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            step: self.step,
            optim_step: self.optim.step,
            model: self.params.config.clone(),
            train: self.train.clone(),
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        let groups = [("param/", &self.params.tensors), ("adam.m/", &self.optim.m), ("adam.v/", &self.optim.v)];
        let count: usize = groups.iter().map(|(_, m)| m.len()).sum();
        put_u32(&mut out, count as u32);
        for (prefix, map) in groups {
            for (name, t) in map {
                let full = format!("{prefix}{name}");
                put_u32(&mut out, full.len() as u32);
                out.extend_from_slice(full.as_bytes());
                put_u32(&mut out, t.ndim() as u32);
                for &d in t.shape() {
                    put_u64(&mut out, d as u64);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(fail("truncated checkpoint".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let json_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(take(json_len)?).map_err(|e| fail(format!("metadata: {e}")))?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| fail("tensor name not utf-8".into()))?;
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if ndim > 8 {
                return Err(fail(format!("implausible rank for {name}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data = take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            let (map, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                (&mut m, k)
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                (&mut v, k)
            } else {
                return Err(fail(format!("unknown tensor group in {name}")));
            };
            map.insert(key.to_string(), t);
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes".into()));
        }
        let params = ModelParams {
            config: meta.model,
            tensors: params,
        };
        params.config.validate()?;
        params.validate()?;
        let optim = OptimState {
            step: meta.optim_step,
            m,
            v,
        };
        optim.validate(&params)?;
        meta.train.validate()?;
        Ok(Self {
            step: meta.step,
            params,
            optim,
            train: meta.train,
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Training state over an in-memory dataset.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optim: OptimState,
    pub step: usize,
    rng: ChaCha8Rng,
    dataset: &'a LatentDataset,
    sentinels: Sentinels,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a LatentDataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Data("dataset holds no volumes".into()));
        }
        let (h, w) = dataset.latent_hw();
        let params = ModelParams::init(&ModelConfig::new(config.model, h, w), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optim: OptimState::new(&params),
            params,
            step: 0,
            rng,
            sentinels: dataset.sentinels()?,
            dataset,
            config,
        })
    }

    /// Continue from `ckpt` with `config`, which may extend the step budget.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, dataset: &'a LatentDataset) -> Result<Self> {
        config.validate()?;
        config.check_resumable(&ckpt.train)?;
        let (h, w) = dataset.latent_hw();
        if ckpt.params.config.latent_hw != [h, w] {
            return Err(Error::Usage("checkpoint latent size does not match the dataset".into()));
        }
        Ok(Self {
            rng: ckpt.rng.restore()?,
            params: ckpt.params,
            optim: ckpt.optim,
            step: ckpt.step,
            sentinels: dataset.sentinels()?,
            dataset,
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            optim: self.optim.clone(),
            train: self.config.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Draw the whole effective batch, then run it as `accum_steps`
    /// micro-batches and apply one averaged update.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let cfg = &self.config;
        let batch: Vec<PairSample> = (0..cfg.effective_batch())
            .map(|_| self.dataset.sample(cfg.regime, &self.sentinels, &mut self.rng))
            .collect::<Result<_>>()?;
        let mut total: Option<ParamGrads> = None;
        let mut loss = 0.0;
        for micro in batch.chunks(cfg.batch_per_step) {
            let out = fm_loss(&self.params, micro, &mut self.rng)?;
            loss += out.loss;
            match total.as_mut() {
                None => total = Some(out.grads),
                Some(acc) => {
                    for (name, g) in out.grads {
                        let a = acc.get_mut(&name).expect("same parameter set");
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        if cfg.accum_steps > 1 {
            let s = 1.0 / cfg.accum_steps as f32;
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        check_finite(&grads)?;
        if let Some(c) = cfg.clip_grad_norm {
            clip_grads(&mut grads, c);
        }
        let step = self.step + 1;
        let lr = lr_schedule(step, cfg);
        optim_step(&mut self.params, &grads, &mut self.optim, lr)?;
        self.step = step;
        Ok(LossRecord {
            step,
            loss: loss / cfg.accum_steps as f64,
            lr,
        })
    }

    /// Run to `total_steps`, calling `on_step` after every update.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>) -> Result<Vec<LossRecord>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let rec = self.train_step()?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Train from scratch and return the final checkpoint with the loss curve.
pub fn train(config: TrainConfig, dataset: &LatentDataset) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut t = Trainer::new(config, dataset)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}
