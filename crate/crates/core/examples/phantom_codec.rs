//! Render a synthetic chest phantom, push it through the latent codec and back,
//! and report reconstruction quality, storage savings and probe findings.
//!
//! cargo run --example phantom_codec -- [out_dir]

use std::path::PathBuf;

use volflow::codec::{compression_report, psnr, CodecBasis};
use volflow::latent::LATENT_CHANNELS;
use volflow::phantom::{generate_phantom, PhantomSpec, ProbeCalibration};
use volflow::render::save_montage;
use volflow::text::Finding;

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples/phantom".into()));
    std::fs::create_dir_all(&out)?;

    let spec = PhantomSpec::new(&[Finding::Nodule, Finding::Effusion], 72, 7);
    let vol = generate_phantom(&spec)?;
    let (h, w) = (vol.slices[0].height(), vol.slices[0].width());
    println!("phantom: {} slices of {h}x{w}, report {:?}", vol.len(), vol.report.render());

    let basis = CodecBasis::build(0);
    let latents = basis.encode_volume(&vol.slices)?;
    let recon = basis.decode_volume(&latents)?;
    let mean_psnr = vol
        .slices
        .iter()
        .zip(&recon)
        .map(|(a, b)| psnr(a.data(), b.data()))
        .sum::<f64>()
        / vol.len() as f64;
    println!("latents: {} x {LATENT_CHANNELS}x{}x{}", latents.len(), latents[0].height(), latents[0].width());
    println!("round-trip PSNR {mean_psnr:.2} dB");

    let d = vol.len();
    for bytes in [2, 4] {
        let r = compression_report(&[d, h, w, 3], &[d, LATENT_CHANNELS, h / 8, w / 8], bytes)?;
        println!("storage ratio with {bytes}-byte latents: {r:.1}x");
    }

    let probe = ProbeCalibration::calibrate(64, 2, h)?;
    for (name, slices) in [("original", &vol.slices), ("reconstruction", &recon)] {
        let found = volflow::metrics::detect_findings(slices, &probe)?;
        let names: Vec<_> = found.iter().map(|f| f.name()).collect();
        println!("probe on {name}: {}", names.join(", "));
    }

    save_montage(&vol.slices, &out.join("original.png"))?;
    save_montage(&recon, &out.join("reconstruction.png"))?;
    println!("montages in {}", out.display());
    Ok(())
}
