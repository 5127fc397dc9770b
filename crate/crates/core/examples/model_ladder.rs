//! Velocity-transformer sizes and a forward pass through the smallest one.
//!
//! cargo run --example model_ladder

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volflow::flow::noise_block;
use volflow::latent::LatentBlock;
use volflow::model::{ModelConfig, ModelParams, ModelSize};
use volflow::text::{embed_report, parse_report, DEFAULT_EMBED_SEED};

fn main() -> anyhow::Result<()> {
    println!("{:<5} {:>5} {:>6} {:>6} {:>12}", "size", "dim", "heads", "depth", "parameters");
    for size in [ModelSize::Tiny, ModelSize::S, ModelSize::B, ModelSize::L] {
        let c = ModelConfig::new(size, 32, 32);
        println!("{:<5} {:>5} {:>6} {:>6} {:>12}", size.to_string(), c.dim, c.heads, c.depth, c.param_count());
    }

    let (h, w) = (8, 8);
    let cfg = ModelConfig::new(ModelSize::Tiny, h, w);
    println!("\nTiny at {h}x{w} latents: {} tokens per block", cfg.tokens());
    let mut params = ModelParams::init(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_t = noise_block(h, w, &mut rng);
    let cond = LatentBlock::zeros(h, w);
    let text = embed_report(&parse_report("Findings: nodule. Impressions: nodule. length of volume: 64")?, DEFAULT_EMBED_SEED);

    let v = params.velocity(&[&x_t], &[0.5], &[&cond], &[&text])?;
    let norm = |b: &LatentBlock| b.data().iter().map(|x| x * x).sum::<f32>().sqrt();
    println!("fresh model velocity norm: {}", norm(&v[0]));

    // perturb every weight to show the output now depends on all inputs
    for t in params.tensors.values_mut() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.02 * ((i as f32) * 0.37).sin();
        }
    }
    let v1 = params.velocity(&[&x_t], &[0.5], &[&cond], &[&text])?;
    let v2 = params.velocity(&[&x_t], &[0.9], &[&cond], &[&text])?;
    println!("perturbed model velocity norm at t=0.5: {:.4}", norm(&v1[0]));
    println!("change from t=0.5 to t=0.9: {:.4}", v1[0].l2_distance(&v2[0]));
    println!("output shape {:?}", v1[0].shape());
    Ok(())
}
