//! Parse, validate and embed radiology-style reports; compare embeddings.
//!
//! cargo run --example reports

use volflow::text::{embed_report, parse_report, render_report, DEFAULT_EMBED_SEED};

fn main() -> anyhow::Result<()> {
    let texts = [
        render_report(&["nodule"], 64)?,
        render_report(&["nodule"], 72)?,
        render_report(&["nodule", "effusion"], 64)?,
        render_report(&["normal"], 64)?,
        render_report(&["normal"], 200)?,
    ];
    let embs: Vec<_> = texts
        .iter()
        .map(|t| parse_report(t).map(|r| embed_report(&r, DEFAULT_EMBED_SEED)))
        .collect::<Result<_, _>>()?;
    for (i, t) in texts.iter().enumerate() {
        println!("[{i}] {t}");
    }
    println!("\ncosine similarity");
    for (i, a) in embs.iter().enumerate() {
        let row: Vec<String> = embs.iter().map(|b| format!("{:5.2}", a.cosine(b))).collect();
        println!("[{i}] {}", row.join(" "));
    }

    // whitespace and list order do not matter; unknown findings are rejected
    let a = parse_report("Findings: effusion ,nodule.  Impressions: nodule, effusion. length of volume: 64")?;
    println!("\nnormalized: {}", a.render());
    for bad in [
        "Findings: tumour. Impressions: tumour. length of volume: 64",
        "Findings: normal, nodule. Impressions: normal, nodule. length of volume: 64",
        "Findings: nodule. Impressions: nodule. length of volume: 4",
    ] {
        println!("rejected: {}", parse_report(bad).unwrap_err());
    }
    Ok(())
}
