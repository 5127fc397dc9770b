//! Build a small phantom dataset and train the Tiny velocity model on it.
//! Writes `train/`, `val/` and `tiny.ctck` for the `generate` and `evaluate`
//! examples.
//!
//! cargo run --example train_toy -- [steps] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use volflow::dataset::{DatasetConfig, LatentDataset};
use volflow::trainer::{loss_csv, Trainer, TrainConfig};

fn config(n: usize, seed: u64) -> DatasetConfig {
    let mut c = DatasetConfig::new(n, seed);
    c.resolution = 32;
    c.min_length = 32;
    c.max_length = 64;
    c
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples/toy".into()));

    let t0 = Instant::now();
    let train_set = LatentDataset::build(&config(32, 11))?;
    let val_set = LatentDataset::build(&config(12, 12))?;
    train_set.save(&out.join("train"))?;
    val_set.save(&out.join("val"))?;
    let (h, w) = train_set.latent_hw();
    println!("datasets ready in {:.1}s, latents {h}x{w}", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        dataset: out.join("train"),
        total_steps: steps,
        warmup_steps: steps.min(50),
        lr_peak: 1e-3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, &train_set)?;
    println!("Tiny model, {} parameters", trainer.params.param_count());
    let report_every = (steps / 10).max(1);
    let mut window = Vec::new();
    let log = trainer.run(|_, rec| {
        window.push(rec.loss);
        if rec.step % report_every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:>5}  mean loss {mean:.4}  lr {:.2e}", rec.step, rec.lr);
            window.clear();
        }
        Ok(())
    })?;
    std::fs::write(out.join("loss.csv"), loss_csv(&log))?;
    trainer.checkpoint().save(&out.join("tiny.ctck"))?;
    println!("trained in {:.1}s; checkpoint at {}", t0.elapsed().as_secs_f64(), out.join("tiny.ctck").display());
    Ok(())
}
