//! Structured reports and their fixed-size embeddings.
//!
//! A report is a set of findings plus the requested volume length. It renders
//! to a small template, parses back exactly, and embeds into a unit 256-vector:
//! 192 semantic dimensions (sum of per-finding seeded directions) followed by a
//! 64-dimensional sinusoidal encoding of the length.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 256;
pub const SEMANTIC_DIM: usize = 192;
pub const LENGTH_DIM: usize = 64;
pub const MIN_LENGTH: usize = 16;
pub const MAX_LENGTH: usize = 256;
/// Seed used for report embeddings unless configured otherwise.
pub const DEFAULT_EMBED_SEED: u64 = 0x7e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finding {
    Nodule,
    Effusion,
    Cardiomegaly,
    Emphysema,
    Consolidation,
    Atelectasis,
    Fibrosis,
    Normal,
}

impl Finding {
    pub const ALL: [Finding; 8] = [
        Self::Nodule,
        Self::Effusion,
        Self::Cardiomegaly,
        Self::Emphysema,
        Self::Consolidation,
        Self::Atelectasis,
        Self::Fibrosis,
        Self::Normal,
    ];

    /// The seven findings other than `normal`.
    pub const PATHOLOGIES: [Finding; 7] = [
        Self::Nodule,
        Self::Effusion,
        Self::Cardiomegaly,
        Self::Emphysema,
        Self::Consolidation,
        Self::Atelectasis,
        Self::Fibrosis,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nodule => "nodule",
            Self::Effusion => "effusion",
            Self::Cardiomegaly => "cardiomegaly",
            Self::Emphysema => "emphysema",
            Self::Consolidation => "consolidation",
            Self::Atelectasis => "atelectasis",
            Self::Fibrosis => "fibrosis",
            Self::Normal => "normal",
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Finding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Report {
    findings: BTreeSet<Finding>,
    length_slices: usize,
}

impl Report {
    /// An empty finding set is read as `normal`.
    pub fn new(findings: impl IntoIterator<Item = Finding>, length_slices: usize) -> Result<Self> {
        let mut findings: BTreeSet<Finding> = findings.into_iter().collect();
        if findings.is_empty() {
            findings.insert(Finding::Normal);
        }
        if findings.contains(&Finding::Normal) && findings.len() > 1 {
            return Err(Error::Parameter("\"normal\" cannot be combined with other findings".into()));
        }
        if !(MIN_LENGTH..=MAX_LENGTH).contains(&length_slices) {
            return Err(Error::Parameter(format!(
                "length {length_slices} outside [{MIN_LENGTH}, {MAX_LENGTH}]"
            )));
        }
        Ok(Self {
            findings,
            length_slices,
        })
    }

    pub fn findings(&self) -> &BTreeSet<Finding> {
        &self.findings
    }

    pub fn length_slices(&self) -> usize {
        self.length_slices
    }

    pub fn is_normal(&self) -> bool {
        self.findings.contains(&Finding::Normal)
    }

    pub fn has(&self, f: Finding) -> bool {
        self.findings.contains(&f)
    }

    pub fn render(&self) -> String {
        let list = self.findings.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ");
        format!(
            "Findings: {list}. Impressions: {list}. length of volume: {}",
            self.length_slices
        )
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Render from finding names; unknown names are vocabulary errors.
pub fn render_report(findings: &[&str], length: usize) -> Result<String> {
    let parsed = findings.iter().map(|s| s.parse()).collect::<Result<Vec<Finding>>>()?;
    Ok(Report::new(parsed, length)?.render())
}

fn parse_list(section: &str) -> Result<BTreeSet<Finding>> {
    section
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_report(text: &str) -> Result<Report> {
    let text = collapse_ws(text);
    let (head, length) = text
        .split_once("length of volume:")
        .ok_or_else(|| Error::Parse("missing \"length of volume:\" clause".into()))?;
    let length: usize = length
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("malformed length {:?}", length.trim())))?;
    let rest = head
        .trim()
        .strip_prefix("Findings:")
        .ok_or_else(|| Error::Parse("missing \"Findings:\" section".into()))?;
    let (findings, impressions) = rest
        .split_once("Impressions:")
        .ok_or_else(|| Error::Parse("missing \"Impressions:\" section".into()))?;
    let strip = |s: &str| s.trim().trim_end_matches('.').trim().to_string();
    let findings = parse_list(&strip(findings))?;
    let impressions = parse_list(&strip(impressions))?;
    if findings != impressions {
        return Err(Error::Parse("findings and impressions disagree".into()));
    }
    if findings.is_empty() {
        return Err(Error::Parse("empty findings list".into()));
    }
    Report::new(findings, length)
}

impl FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_report(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f32>,
    source_hash: u64,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f32>, source_hash: u64) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "text embedding has {} dims, expected {EMBED_DIM}",
                vector.len()
            )));
        }
        Ok(Self { vector, source_hash })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn source_hash(&self) -> u64 {
        self.source_hash
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    pub fn length_band(&self) -> &[f32] {
        &self.vector[SEMANTIC_DIM..]
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn finding_direction(f: Finding, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(f.name().as_bytes()));
    let mut v: Vec<f64> = (0..SEMANTIC_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Sinusoidal code of a length: 32 frequencies, periods geometric from
/// 4·MIN_LENGTH to 4·MAX_LENGTH, so every component varies slowly over the
/// valid range and the longest one alone is injective on it.
fn length_code(length: usize) -> Vec<f64> {
    let half = LENGTH_DIM / 2;
    let (min_period, max_period) = (4.0 * MIN_LENGTH as f64, 4.0 * MAX_LENGTH as f64);
    let mut v = Vec::with_capacity(LENGTH_DIM);
    for k in 0..half {
        let period = min_period * (max_period / min_period).powf(k as f64 / (half - 1) as f64);
        let a = std::f64::consts::TAU * length as f64 / period;
        v.push(a.sin());
        v.push(a.cos());
    }
    v
}

pub fn embed_report(report: &Report, seed: u64) -> TextEmbedding {
    let mut v = vec![0.0f64; EMBED_DIM];
    for &f in report.findings() {
        for (a, b) in v[..SEMANTIC_DIM].iter_mut().zip(finding_direction(f, seed)) {
            *a += b;
        }
    }
    // Semantic and length parts contribute equal energy before the final normalization.
    let sn = v[..SEMANTIC_DIM].iter().map(|x| x * x).sum::<f64>().sqrt();
    v[..SEMANTIC_DIM].iter_mut().for_each(|x| *x /= sn);
    let code = length_code(report.length_slices());
    let ln = code.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, b) in v[SEMANTIC_DIM..].iter_mut().zip(code) {
        *a = b / ln;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let text = report.render();
    TextEmbedding {
        vector: v.iter().map(|x| (x / n) as f32).collect(),
        source_hash: fnv1a(text.as_bytes()) ^ seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_renders_single_finding() {
        assert_eq!(
            render_report(&["nodule"], 64).unwrap(),
            "Findings: nodule. Impressions: nodule. length of volume: 64"
        );
        assert!(matches!(render_report(&["tumour"], 64), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn parse_inverts_render() {
        let r = Report::new([Finding::Fibrosis, Finding::Nodule], 100).unwrap();
        assert_eq!(parse_report(&r.render()).unwrap(), r);
    }

    #[test]
    fn malformed_reports_fail() {
        assert!(matches!(parse_report("Findings: nodule. Impressions: nodule."), Err(Error::Parse(_))));
        assert!(matches!(
            parse_report("Findings: nodule. Impressions: nodule. length of volume: sixty"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_report("Findings: polyp. Impressions: polyp. length of volume: 64"),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn normal_is_exclusive() {
        assert!(Report::new([Finding::Normal, Finding::Nodule], 64).is_err());
        assert!(Report::new([], 64).unwrap().is_normal());
    }

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let r = Report::new([Finding::Nodule], 64).unwrap();
        let a = embed_report(&r, 1);
        assert_eq!(a, embed_report(&r, 1));
        let n: f64 = a.vector().iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-6);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-6);
    }
}
