//! Autoregressive volume generation in all three inference modes.
//!
//! Uses the checkpoint and datasets written by `train_toy` (run that first).
//!
//! cargo run --example generate -- [toy_dir]

use std::path::PathBuf;

use volflow::dataset::LatentDataset;
use volflow::flow::SamplerConfig;
use volflow::latent::BLOCK_LEN;
use volflow::render::save_montage;
use volflow::sampler::{
    generate_volumes, next_block_eval, next_block_volume, FlowGenerator, GenerateOptions, GenerationRequest,
    InferenceMode,
};
use volflow::text::{embed_report, parse_report};
use volflow::trainer::Checkpoint;

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples/toy".into()));
    let ckpt = Checkpoint::load(&dir.join("tiny.ctck"))?;
    let val = LatentDataset::load(&dir.join("val"))?;
    let sentinels = val.sentinels()?;
    let gen = FlowGenerator::new(&ckpt.params, SamplerConfig::new(25)?);
    let opts = GenerateOptions::default();
    let out = dir.join("samples");
    std::fs::create_dir_all(&out)?;

    // full-body: text only, first block conditioned on the black sentinel
    let prompts = [
        "Findings: normal. Impressions: normal. length of volume: 48",
        "Findings: cardiomegaly, effusion. Impressions: cardiomegaly, effusion. length of volume: 64",
    ];
    let requests = prompts
        .iter()
        .map(|p| {
            let report = parse_report(p)?;
            Ok(GenerationRequest {
                text: embed_report(&report, val.config.embed_seed),
                report,
                head: None,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let full = generate_volumes(&gen, &val.basis, &sentinels, &requests, InferenceMode::FullBody, &opts)?;
    for (i, v) in full.iter().enumerate() {
        let t = &v.trace;
        println!(
            "full-body {i}: asked {} slices, got {} ({:?}), white scores {:?}",
            t.requested_length,
            t.output_length,
            t.stop_reason,
            t.white_scores.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>()
        );
        if !v.is_empty() {
            save_montage(&v.slices, &out.join(format!("full_body_{i}.png")))?;
        }
    }

    // gt-head: the first real block of a validation volume seeds the chain
    let vol = &val.volumes[0];
    let req = GenerationRequest {
        report: val.reports[0].clone(),
        text: val.embeddings[0].clone(),
        head: Some(vol.window(0, &sentinels.white_slice)),
    };
    let head = generate_volumes(&gen, &val.basis, &sentinels, &[req], InferenceMode::GtHead, &opts)?.remove(0);
    println!(
        "gt-head: real volume has {} slices, generated {} ({:?})",
        vol.len(),
        head.len(),
        head.trace.stop_reason
    );

    // next-block: every prediction conditions on a real block
    let preds = next_block_eval(&gen, vol, &val.embeddings[0], &sentinels, 0)?;
    let stitched = next_block_volume(&preds, vol.len());
    let real = vol.slices();
    let mse: f64 = stitched
        .iter()
        .zip(&real[BLOCK_LEN..])
        .map(|(a, b)| a.l2_distance(b).powi(2) as f64 / a.data().len() as f64)
        .sum::<f64>()
        / stitched.len() as f64;
    println!("next-block: {} predictions, {} slices, latent mse vs truth {mse:.4}", preds.len(), stitched.len());
    println!("montages in {}", out.display());
    Ok(())
}
