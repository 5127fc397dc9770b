//! Command-line front end: `gen-data`, `train`, `sample`, `evaluate`, `inspect`.
//!
//! Every command that writes an output directory also writes `run.toml`, a
//! snapshot of the command line and the fully resolved configuration.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure, 5 I/O.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cache::ArrayFile;
use crate::dataset::{DatasetConfig, LatentDataset};
use crate::error::{io_err, Error};
use crate::eval::{evaluate, EvalConfig};
use crate::flow::SamplerConfig;
use crate::latent::LATENT_CHANNELS;
use crate::metrics::{metrics_csv, metrics_table, Resolution};
use crate::model::{ModelConfig, ModelParams, ModelSize};
use crate::render::{dump_pgm, save_montage};
use crate::sampler::{
    generate_volumes, next_block_eval, next_block_volume, FlowGenerator, GenerateOptions, GenerationRequest,
    InferenceMode,
};
use crate::text::{embed_report, parse_report, Finding};
use crate::trainer::{loss_csv, Checkpoint, LossRecord, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "volflow", version, about = "Text-conditioned block-autoregressive volume synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a phantom dataset with latent cache, embeddings and probe calibration.
    GenData(GenDataArgs),
    /// Train a velocity model.
    Train(TrainArgs),
    /// Generate volumes from a checkpoint.
    Sample(SampleArgs),
    /// Score generated volumes against a validation set.
    Evaluate(EvaluateArgs),
    /// Print checkpoint, model or dataset summaries.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub volumes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::phantom::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` config overrides, dotted keys for nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print a loss line every this many steps (0: quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "full-body")]
    pub mode: InferenceMode,
    /// Prompts, one rendered report per line (full-body mode).
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Validation dataset supplying ground truth (gt-head, next-block).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Dataset providing the codec; defaults to the checkpoint's training set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = crate::flow::DEFAULT_EULER_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump every slice as PGM.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate; an untrained model of the same config if `--untrained`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "next-block")]
    pub mode: InferenceMode,
    /// `native`, `x2:bilinear`, `x2:bicubic`, `x2:nearest` or `all`; repeatable.
    #[arg(long, default_value = "native", value_delimiter = ',')]
    pub resolution: Vec<String>,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::flow::DEFAULT_EULER_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_volumes: Option<usize>,
    /// Score a freshly initialized model with the checkpoint's config instead.
    #[arg(long)]
    pub untrained: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "cache")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Parameter ladder at this latent size when neither file is given.
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Parameter(_) | Error::Parse(_) | Error::Vocabulary(_) => EXIT_USAGE,
                Error::Data(_) | Error::Shape(_) | Error::Format { .. } => EXIT_DATA,
                Error::NonFiniteGradient(_) | Error::Tensor(_) => EXIT_NUMERIC,
                Error::Io { .. } => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

/// Parse arguments, run, and map failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a, T: Serialize> {
    command: &'a str,
    args: Vec<String>,
    config: &'a T,
}

fn write_snapshot<T: Serialize>(dir: &Path, command: &str, config: &T) -> anyhow::Result<()> {
    let snap = RunSnapshot {
        command,
        args: std::env::args().skip(1).collect(),
        config,
    };
    let path = dir.join("run.toml");
    let text = toml::to_string(&snap).context("serializing run snapshot")?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    if is_nonempty_dir(&a.out) {
        if !a.force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", a.out.display())).into());
        }
        fs::remove_dir_all(&a.out).map_err(io_err(&a.out))?;
    }
    let mut cfg = DatasetConfig::new(a.volumes, a.seed);
    cfg.resolution = a.resolution;
    let ds = LatentDataset::build(&cfg)?;
    ds.save(&a.out)?;
    write_snapshot(&a.out, "gen-data", &cfg)?;
    let total: usize = ds.volumes.iter().map(|v| v.len()).sum();
    println!(
        "wrote {} volumes ({} slices, latents {}x{}) to {}",
        ds.len(),
        total,
        ds.latent_hw().0,
        ds.latent_hw().1,
        a.out.display()
    );
    Ok(())
}

/// Apply `key=value` overrides to a TOML table; values parse as TOML and fall
/// back to plain strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> crate::Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {o:?} is not KEY=VALUE")))?;
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut *table;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("override key {key:?} crosses a non-table value")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut table = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            text.parse::<toml::Table>().map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, &a.overrides)?;
    if let Some(s) = a.seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    Ok(TrainConfig::from_toml(&toml::to_string(&table)?)?)
}

fn load_dataset(dir: &Path) -> anyhow::Result<LatentDataset> {
    if !dir.join("dataset.json").exists() {
        return Err(Error::Data(format!("no dataset at {}", dir.display())).into());
    }
    Ok(LatentDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(&a)?;
    let ds = load_dataset(&cfg.dataset)?;
    ensure_dir(&a.out)?;
    let csv_path = a.out.join("loss.csv");
    let (mut trainer, mut log) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let step = ckpt.step;
            let t = Trainer::resume(ckpt, cfg.clone(), &ds)?;
            (t, read_loss_csv(&csv_path, step)?)
        }
        None => (Trainer::new(cfg.clone(), &ds)?, Vec::new()),
    };
    write_snapshot(&a.out, "train", &cfg)?;
    println!(
        "model {} ({} parameters), effective batch {} = {} x {} accumulation x 1 worker",
        cfg.model,
        trainer.params.param_count(),
        cfg.effective_batch(),
        cfg.batch_per_step,
        cfg.accum_steps
    );
    let out = a.out.clone();
    let every = cfg.checkpoint_every;
    let log_every = a.log_every;
    let new = trainer.run(|t, rec| {
        if log_every > 0 && rec.step % log_every == 0 {
            println!("step {:>6}  loss {:.5}  lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        if every > 0 && rec.step % every == 0 {
            t.checkpoint().save(&out.join(format!("ckpt_{:06}.ctck", rec.step)))?;
        }
        Ok(())
    })?;
    log.extend(new);
    fs::write(&csv_path, loss_csv(&log)).map_err(io_err(&csv_path))?;
    let last = a.out.join("last.ctck");
    trainer.checkpoint().save(&last)?;
    println!("wrote {}", last.display());
    Ok(())
}

/// Loss rows up to and including `step` from an earlier run, if any.
fn read_loss_csv(path: &Path, step: usize) -> anyhow::Result<Vec<LossRecord>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad loss row {line:?}"),
        };
        if f.len() != 3 {
            return Err(bad().into());
        }
        let rec = LossRecord {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
        };
        if rec.step <= step {
            out.push(rec);
        }
    }
    Ok(out)
}

fn codec_dataset(explicit: Option<&PathBuf>, ckpt: &Checkpoint) -> anyhow::Result<LatentDataset> {
    load_dataset(explicit.unwrap_or(&ckpt.train.dataset))
}

fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let sampler = SamplerConfig::new(a.steps)?;
    let gen = FlowGenerator::new(&ckpt.params, sampler);
    let val = match (&a.val, a.mode.needs_ground_truth()) {
        (Some(v), _) => Some(load_dataset(v)?),
        (None, true) => {
            return Err(Error::Usage(format!("{} sampling needs --val with ground-truth volumes", a.mode)).into())
        }
        (None, false) => None,
    };
    let ds = match (&a.data, &val) {
        (None, Some(v)) => v.clone(),
        _ => codec_dataset(a.data.as_ref(), &ckpt)?,
    };
    let sentinels = ds.sentinels()?;
    if ckpt.params.config.latent_hw != [ds.latent_hw().0, ds.latent_hw().1] {
        return Err(Error::Usage("checkpoint latent size does not match the dataset".into()).into());
    }
    ensure_dir(&a.out)?;

    let (latents, traces) = match a.mode {
        InferenceMode::FullBody | InferenceMode::GtHead => {
            let requests: Vec<GenerationRequest> = match (&a.reports, &val) {
                (Some(path), _) => {
                    let text = fs::read_to_string(path).map_err(io_err(path))?;
                    let mut reqs = Vec::new();
                    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                        let report = parse_report(line).with_context(|| format!("report line {}", i + 1))?;
                        let head = match (&val, a.mode) {
                            (Some(v), InferenceMode::GtHead) => {
                                let vol = v.volumes.get(i).ok_or_else(|| {
                                    Error::Usage(format!("validation set has no volume for report {}", i + 1))
                                })?;
                                Some(vol.window(0, &sentinels.white_slice))
                            }
                            _ => None,
                        };
                        reqs.push(GenerationRequest {
                            text: embed_report(&report, ds.config.embed_seed),
                            report,
                            head,
                        });
                    }
                    reqs
                }
                (None, Some(v)) => (0..v.len())
                    .map(|i| GenerationRequest {
                        report: v.reports[i].clone(),
                        text: v.embeddings[i].clone(),
                        head: (a.mode == InferenceMode::GtHead).then(|| v.volumes[i].window(0, &sentinels.white_slice)),
                    })
                    .collect(),
                (None, None) => return Err(Error::Usage("full-body sampling needs --reports".into()).into()),
            };
            let opts = GenerateOptions {
                seed: a.seed,
                max_blocks: None,
            };
            let out = generate_volumes(&gen, &ds.basis, &sentinels, &requests, a.mode, &opts)?;
            let traces: Vec<_> = out.iter().map(|v| v.trace.clone()).collect();
            (out.into_iter().map(|v| v.latents).collect::<Vec<_>>(), Some(traces))
        }
        InferenceMode::NextBlock => {
            let v = val.as_ref().expect("checked above");
            let mut all = Vec::new();
            for i in 0..v.len() {
                let preds = next_block_eval(&gen, &v.volumes[i], &v.embeddings[i], &sentinels, a.seed.wrapping_add(i as u64))?;
                all.push(next_block_volume(&preds, v.volumes[i].len()));
            }
            (all, None)
        }
    };

    let (h, w) = ds.latent_hw();
    for (i, lat) in latents.iter().enumerate() {
        let stem = format!("vol_{i:04}");
        let data: Vec<f32> = lat.iter().flat_map(|s| s.data().iter().copied()).collect();
        ArrayFile::new(a.seed, vec![lat.len(), LATENT_CHANNELS, h, w], data)?.save(&a.out.join(format!("{stem}.ctfl")))?;
        let slices = ds.basis.decode_volume(lat)?;
        if !slices.is_empty() {
            save_montage(&slices, &a.out.join(format!("{stem}.png")))?;
            if a.pgm {
                dump_pgm(&slices, &a.out.join(&stem))?;
            }
        }
        let stop = traces
            .as_ref()
            .map(|t| format!(", stop {:?}", t[i].stop_reason))
            .unwrap_or_default();
        println!("{stem}: {} slices{stop}", lat.len());
    }
    if let Some(t) = &traces {
        let path = a.out.join("traces.json");
        fs::write(&path, serde_json::to_string_pretty(t)?).map_err(io_err(&path))?;
    }
    #[derive(Serialize)]
    struct SampleSnapshot<'a> {
        ckpt: &'a Path,
        mode: InferenceMode,
        steps: usize,
        seed: u64,
        model: &'a ModelConfig,
    }
    write_snapshot(
        &a.out,
        "sample",
        &SampleSnapshot {
            ckpt: &a.ckpt,
            mode: a.mode,
            steps: a.steps,
            seed: a.seed,
            model: &ckpt.params.config,
        },
    )
}

/// Expand `--resolution` values, `all` meaning native plus the three ×2 variants.
pub fn parse_resolutions(values: &[String]) -> crate::Result<Vec<Resolution>> {
    let mut out = Vec::new();
    for v in values {
        if v == "all" {
            out.extend(Resolution::ALL);
        } else {
            out.push(v.parse()?);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no resolution given".into()));
    }
    Ok(out)
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let resolutions = parse_resolutions(&a.resolution)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params = if a.untrained {
        ModelParams::init(&ckpt.params.config, ckpt.train.seed)?
    } else {
        ckpt.params.clone()
    };
    let val = load_dataset(&a.val)?;
    if params.config.latent_hw != [val.latent_hw().0, val.latent_hw().1] {
        return Err(Error::Usage("checkpoint latent size does not match the validation set".into()).into());
    }
    let gen = FlowGenerator::new(&params, SamplerConfig::new(a.steps)?);
    let cfg = EvalConfig {
        seed: a.seed,
        max_volumes: a.max_volumes,
        ..EvalConfig::default()
    };
    let (_, rows) = evaluate(&gen, &val, a.mode, &resolutions, &cfg)?;
    ensure_dir(&a.out)?;
    let csv = a.out.join("metrics.csv");
    fs::write(&csv, metrics_csv(&rows)).map_err(io_err(&csv))?;
    let table = metrics_table(&rows);
    let txt = a.out.join("metrics.txt");
    fs::write(&txt, &table).map_err(io_err(&txt))?;
    print!("{table}");
    #[derive(Serialize)]
    struct EvalSnapshot<'a> {
        ckpt: &'a Path,
        val: &'a Path,
        mode: InferenceMode,
        resolutions: Vec<String>,
        steps: usize,
        untrained: bool,
        eval: &'a EvalConfig,
    }
    write_snapshot(
        &a.out,
        "evaluate",
        &EvalSnapshot {
            ckpt: &a.ckpt,
            val: &a.val,
            mode: a.mode,
            resolutions: resolutions.iter().map(|r| r.to_string()).collect(),
            steps: a.steps,
            untrained: a.untrained,
            eval: &cfg,
        },
    )
}

fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    if let Some(p) = &a.ckpt {
        let ckpt = Checkpoint::load(p)?;
        let c = &ckpt.params.config;
        println!("checkpoint {} at step {}", p.display(), ckpt.step);
        println!(
            "model {}: dim {} heads {} depth {} latent {}x{}",
            c.name, c.dim, c.heads, c.depth, c.latent_hw[0], c.latent_hw[1]
        );
        println!("parameters {} ({})", ckpt.params.param_count(), millions(ckpt.params.param_count()));
        println!("training config:\n{}", ckpt.train.to_toml());
        return Ok(());
    }
    if let Some(dir) = &a.cache {
        let ds = load_dataset(dir)?;
        let lens: Vec<usize> = ds.volumes.iter().map(|v| v.len()).collect();
        let total: usize = lens.iter().sum();
        println!("dataset {}: {} volumes, {} slices", dir.display(), ds.len(), total);
        println!(
            "length min {} mean {:.1} max {}",
            lens.iter().min().copied().unwrap_or(0),
            total as f64 / lens.len().max(1) as f64,
            lens.iter().max().copied().unwrap_or(0)
        );
        let (h, w) = ds.latent_hw();
        println!("resolution {} -> latents 16x{h}x{w}", ds.config.resolution);
        for f in Finding::ALL {
            let n = ds.reports.iter().filter(|r| r.has(f)).count();
            println!("  {:<14} {n}", f.name());
        }
        return Ok(());
    }
    if a.latent == 0 || a.latent % 2 != 0 {
        bail!(Error::Usage("--latent must be a positive even size".into()));
    }
    println!("parameter counts at {0}x{0} latents", a.latent);
    for size in [ModelSize::Tiny, ModelSize::S, ModelSize::B, ModelSize::L] {
        let c = ModelConfig::new(size, a.latent, a.latent);
        println!(
            "  {:<5} dim {:>4} heads {:>2} depth {:>2}  {:>12} ({})",
            size.to_string(),
            c.dim,
            c.heads,
            c.depth,
            c.param_count(),
            millions(c.param_count())
        );
    }
    Ok(())
}
