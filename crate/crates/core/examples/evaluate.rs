//! Score generated volumes: Fréchet distances over slice and clip features,
//! a probe-based inception score, and report/finding alignment, at native and
//! upscaled resolution.
//!
//! Uses the output of `train_toy`.
//!
//! cargo run --example evaluate -- [toy_dir]

use std::path::PathBuf;

use volflow::dataset::LatentDataset;
use volflow::eval::{evaluate, evaluate_real, length_hits, EvalConfig, LENGTH_TOLERANCE};
use volflow::flow::SamplerConfig;
use volflow::metrics::{metrics_table, Resolution};
use volflow::model::ModelParams;
use volflow::sampler::{FlowGenerator, InferenceMode};
use volflow::trainer::Checkpoint;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples/toy".into()));
    let ckpt = Checkpoint::load(&dir.join("tiny.ctck"))?;
    let val = LatentDataset::load(&dir.join("val"))?;
    let cfg = EvalConfig::default();
    let sampler = SamplerConfig::new(25)?;

    let mut rows = vec![evaluate_real(&val, Resolution::Native, &cfg)?];
    rows[0].mode = "real".into();

    let untrained = ModelParams::init(&ckpt.params.config, 0)?;
    let (_, mut r) = evaluate(&FlowGenerator::new(&untrained, sampler), &val, InferenceMode::NextBlock, &[Resolution::Native], &cfg)?;
    r[0].mode = "next-block (untrained)".into();
    rows.append(&mut r);

    let gen = FlowGenerator::new(&ckpt.params, sampler);
    let (_, mut r) = evaluate(&gen, &val, InferenceMode::NextBlock, &Resolution::ALL, &cfg)?;
    rows.append(&mut r);
    let (set, mut r) = evaluate(&gen, &val, InferenceMode::FullBody, &[Resolution::Native], &cfg)?;
    rows.append(&mut r);

    print!("{}", metrics_table(&rows));
    println!(
        "full-body lengths within ±{LENGTH_TOLERANCE} slices of the report: {}/{}",
        length_hits(&set, LENGTH_TOLERANCE),
        set.volumes.len()
    );
    Ok(())
}
