//! Distribution metrics over generated volumes: Fréchet distances on slice and
//! clip features, an inception-style score from probe class distributions, and
//! a report-alignment score.
//!
//! Features come from a frozen, seeded random 3D CNN. Absolute values only mean
//! something relative to other runs with the same feature seed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{probe_findings, ProbeCalibration};
use crate::slice::{downsample, upscale, Interpolation, SliceImage};
use crate::text::{Finding, Report};

pub const FEATURE_DIM: usize = 64;
/// Slices are box-downsampled to this size before feature extraction.
pub const FEATURE_RES: usize = 32;
pub const DEFAULT_FEATURE_SEED: u64 = 0xfea7;
pub const IS_SPLITS: usize = 10;
const CHANNELS: [usize; 5] = [1, 8, 16, 32, FEATURE_DIM];
const K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Window {
    Slice,
    F16,
    F128,
}

impl Window {
    pub fn len(self) -> usize {
        match self {
            Self::Slice => 1,
            Self::F16 => 16,
            Self::F128 => 128,
        }
    }

    /// Non-overlapping windows from slice 0; a short tail is dropped.
    pub fn count(self, volume_len: usize) -> usize {
        volume_len / self.len()
    }
}

struct Conv3d {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3][3]`
    w: Vec<f32>,
}

/// Frozen random 3D CNN: four stride-2 3×3×3 convolutions (depth stride 1
/// once a window is a single slice deep) with ReLU between them, then global
/// average pooling to 64 features. Every layer's weight matrix is rescaled to
/// unit spectral norm, and there are no biases.
pub struct FeatureNet {
    seed: u64,
    layers: Vec<Conv3d>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CHANNELS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let cols = cin * K * K * K;
                let raw: Vec<f64> = (0..cout * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
                let m = DMatrix::from_row_slice(cout, cols, &raw);
                let sigma = m.singular_values().max();
                Conv3d {
                    cin,
                    cout,
                    w: raw.iter().map(|v| (v / sigma) as f32).collect(),
                }
            })
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Features of one window of same-sized slices.
    pub fn features(&self, slices: &[SliceImage]) -> Result<Vec<f64>> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Usage("feature window is empty".into()))?;
        let (h, w) = (first.height(), first.width());
        if h != w || h % FEATURE_RES != 0 || slices.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(Error::Shape(format!(
                "feature windows need equal square slices with side a multiple of {FEATURE_RES}"
            )));
        }
        let factor = h / FEATURE_RES;
        let mut d = slices.len();
        let mut s = FEATURE_RES;
        let mut x = Vec::with_capacity(d * s * s);
        for img in slices {
            let small = if factor == 1 { img.clone() } else { downsample(img, factor)? };
            x.extend(small.gray());
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, nd, ns) = layer.forward(&x, d, s);
            x = y;
            d = nd;
            s = ns;
            if i < last {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let per = d * s * s;
        Ok(x.chunks(per).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / per as f64).collect())
    }
}

impl Conv3d {
    /// Input `[cin][d][s][s]`; returns output and its depth and side.
    fn forward(&self, x: &[f32], d: usize, s: usize) -> (Vec<f32>, usize, usize) {
        let sd = if d > 1 { 2 } else { 1 };
        let od = (d - 1) / sd + 1;
        let os = (s - 1) / 2 + 1;
        let mut out = vec![0.0f32; self.cout * od * os * os];
        for o in 0..self.cout {
            for c in 0..self.cin {
                let wbase = (o * self.cin + c) * K * K * K;
                let xc = &x[c * d * s * s..(c + 1) * d * s * s];
                for zd in 0..od {
                    for kd in 0..K {
                        let id = (zd * sd + kd) as isize - 1;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        let plane = &xc[id as usize * s * s..(id as usize + 1) * s * s];
                        let obase = (o * od + zd) * os * os;
                        for kh in 0..K {
                            for kw in 0..K {
                                let wv = self.w[wbase + (kd * K + kh) * K + kw];
                                for yy in 0..os {
                                    let iy = (yy * 2 + kh) as isize - 1;
                                    if iy < 0 || iy as usize >= s {
                                        continue;
                                    }
                                    let row = &plane[iy as usize * s..(iy as usize + 1) * s];
                                    let orow = &mut out[obase + yy * os..obase + (yy + 1) * os];
                                    for (xx, ov) in orow.iter_mut().enumerate() {
                                        let ix = (xx * 2 + kw) as isize - 1;
                                        if ix >= 0 && (ix as usize) < s {
                                            *ov += wv * row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, od, os)
    }
}

/// One feature row per window of every volume, in volume order.
pub fn extract_features(volumes: &[Vec<SliceImage>], net: &FeatureNet, window: Window) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for v in volumes {
        for chunk in v.chunks_exact(window.len()) {
            rows.push(net.features(chunk)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("covariance does not match mean".into()));
        }
        Ok(Self { mean, cov, count })
    }

    /// Sample mean and unbiased covariance of feature rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data(format!("need at least two feature rows, got {n}")));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
        let mean: DVector<f64> = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape("sqrtm needs a square matrix".into()));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-8 * scale {
        return Err(Error::Data("sqrtm input is not symmetric".into()));
    }
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let lmax = eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * lmax.max(1.0)) {
        return Err(Error::Data("sqrtm input has a clearly negative eigenvalue".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2·(Σ1^½ Σ2 Σ1^½)^½)`, clamped at zero.
pub fn frechet_distance(s1: &FrechetStats, s2: &FrechetStats) -> Result<f64> {
    if s1.mean.len() != s2.mean.len() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            s1.mean.len(),
            s2.mean.len()
        )));
    }
    let r1 = sqrtm_spd(&s1.cov)?;
    let mut inner = &r1 * &s2.cov * &r1;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_spd(&inner)?.trace();
    let d = (&s1.mean - &s2.mean).norm_squared() + s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// `exp(E[KL(p(y|x) ‖ p(y))])` on each of `splits` contiguous chunks; mean and
/// population std across chunks.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() || splits == 0 {
        return Err(Error::Usage("inception score needs rows and at least one split".into()));
    }
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) || row.len() != probs[0].len() {
            return Err(Error::Data(format!("row {i} is not a probability distribution")));
        }
    }
    let splits = splits.min(probs.len());
    let n = probs.len();
    let k = probs[0].len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; k];
            for row in part {
                marginal.iter_mut().zip(row).for_each(|(m, p)| *m += p / part.len() as f64);
            }
            let kl: f64 = part
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// F1 overlap between two finding sets (`normal` counts as a label).
pub fn finding_f1(a: &BTreeSet<Finding>, b: &BTreeSet<Finding>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

/// Mean F1 between report findings and detected findings, ×100.
pub fn alignment_score(reports: &[Report], detected: &[BTreeSet<Finding>]) -> Result<f64> {
    if reports.len() != detected.len() || reports.is_empty() {
        return Err(Error::Usage(format!(
            "alignment needs matching non-empty lists ({} reports, {} volumes)",
            reports.len(),
            detected.len()
        )));
    }
    let total: f64 = reports
        .iter()
        .zip(detected)
        .map(|(r, d)| finding_f1(r.findings(), d))
        .sum();
    Ok(100.0 * total / reports.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub matched: f64,
    pub shuffled_mean: f64,
    /// `(1 + #{shuffled ≥ matched}) / (1 + permutations)`
    pub p_value: f64,
}

/// Compare the matched alignment score against random re-pairings.
pub fn alignment_permutation_test(
    reports: &[Report],
    detected: &[BTreeSet<Finding>],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    let matched = alignment_score(reports, detected)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..detected.len()).collect();
    let mut ge = 0usize;
    let mut sum = 0.0;
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        let shuffled: Vec<BTreeSet<Finding>> = idx.iter().map(|&i| detected[i].clone()).collect();
        let s = alignment_score(reports, &shuffled)?;
        sum += s;
        if s >= matched {
            ge += 1;
        }
    }
    Ok(PermutationTest {
        matched,
        shuffled_mean: sum / permutations.max(1) as f64,
        p_value: (1 + ge) as f64 / (1 + permutations) as f64,
    })
}

/// Findings detected in a pixel volume; an empty volume detects nothing.
pub fn detect_findings(slices: &[SliceImage], probe: &ProbeCalibration) -> Result<BTreeSet<Finding>> {
    if slices.is_empty() {
        return Ok(BTreeSet::new());
    }
    Ok(probe.detect(&probe_findings(slices)?).into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Native,
    X2(Interpolation),
}

impl Resolution {
    /// Native plus the three ×2 interpolation variants.
    pub const ALL: [Resolution; 4] = [
        Self::Native,
        Self::X2(Interpolation::Bilinear),
        Self::X2(Interpolation::Bicubic),
        Self::X2(Interpolation::Nearest),
    ];

    pub fn factor(self) -> usize {
        match self {
            Self::Native => 1,
            Self::X2(_) => 2,
        }
    }

    /// Upscale a generated volume to this resolution.
    pub fn apply(self, slices: &[SliceImage]) -> Result<Vec<SliceImage>> {
        match self {
            Self::Native => Ok(slices.to_vec()),
            Self::X2(mode) => slices.iter().map(|s| upscale(s, 2, mode)).collect(),
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Native => f.write_str("native"),
            Self::X2(m) => write!(f, "x2:{}", m.name()),
        }
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            _ => match s.strip_prefix("x2:") {
                Some(m) => Ok(Self::X2(m.parse()?)),
                None => Err(Error::Parameter(format!("unknown resolution {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: String,
    pub resolution: String,
    pub fid: Option<f64>,
    pub fvd_f16: Option<f64>,
    pub fvd_f128: Option<f64>,
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub alignment: Option<f64>,
    pub n_generated: usize,
    pub n_real: usize,
}

const MISSING: &str = "—";
const HEADER: [&str; 10] = [
    "mode",
    "resolution",
    "fid",
    "fvd_f16",
    "fvd_f128",
    "is_mean",
    "is_std",
    "alignment",
    "n_generated",
    "n_real",
];

/// Four significant digits; small values switch to exponent form.
fn short(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        format!("{x:.4}")
    } else if x.abs() < 0.01 {
        format!("{x:.3e}")
    } else {
        let decimals = (3 - x.abs().log10().floor() as i32).clamp(0, 4) as usize;
        format!("{x:.decimals$}")
    }
}

impl MetricReport {
    /// Table cells; `exact` keeps full precision (CSV).
    fn cells(&self, exact: bool) -> Vec<String> {
        let cell = |v: Option<f64>| v.map_or_else(|| MISSING.to_string(), |x| if exact { x.to_string() } else { short(x) });
        vec![
            self.mode.clone(),
            self.resolution.clone(),
            cell(self.fid),
            cell(self.fvd_f16),
            cell(self.fvd_f128),
            cell(self.is_mean),
            cell(self.is_std),
            cell(self.alignment),
            self.n_generated.to_string(),
            self.n_real.to_string(),
        ]
    }
}

pub fn metrics_csv(rows: &[MetricReport]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells(true).join(","));
        out.push('\n');
    }
    out
}

pub fn metrics_table(rows: &[MetricReport]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.cells(false)).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|j| {
            cells
                .iter()
                .map(|c| c[j].chars().count())
                .chain([HEADER[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |items: Vec<String>| {
        items
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (s, &w))| {
                let pad = " ".repeat(w - s.chars().count());
                if j < 2 {
                    format!("{s}{pad}")
                } else {
                    format!("{pad}{s}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(HEADER.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    for c in cells {
        out.push_str(&line(c));
        out.push('\n');
    }
    out
}

fn frechet_for(
    generated: &[Vec<SliceImage>],
    real: &[Vec<SliceImage>],
    net: &FeatureNet,
    window: Window,
) -> Result<Option<f64>> {
    let g = extract_features(generated, net, window)?;
    let r = extract_features(real, net, window)?;
    if g.len() < 2 || r.len() < 2 {
        return Ok(None);
    }
    Ok(Some(frechet_distance(&FrechetStats::from_rows(&g)?, &FrechetStats::from_rows(&r)?)?))
}

/// All metrics of a generated set against a real set at one resolution.
///
/// `reports[i]` is the prompt behind `generated[i]`. Empty generated volumes
/// count against alignment and are skipped by the other metrics.
pub fn compute_metrics(
    mode: &str,
    resolution: Resolution,
    reports: &[Report],
    generated: &[Vec<SliceImage>],
    real: &[Vec<SliceImage>],
    net: &FeatureNet,
    probe: &ProbeCalibration,
) -> Result<MetricReport> {
    if reports.len() != generated.len() {
        return Err(Error::Usage("one report per generated volume required".into()));
    }
    let nonempty: Vec<Vec<SliceImage>> = generated.iter().filter(|v| !v.is_empty()).cloned().collect();
    let detected: Vec<BTreeSet<Finding>> = generated
        .iter()
        .map(|v| detect_findings(v, probe))
        .collect::<Result<_>>()?;
    let probs: Vec<Vec<f64>> = nonempty
        .iter()
        .map(|v| Ok(probe.class_probs(&probe_findings(v)?).to_vec()))
        .collect::<Result<_>>()?;
    let is = if probs.is_empty() {
        None
    } else {
        Some(inception_score(&probs, IS_SPLITS)?)
    };
    Ok(MetricReport {
        mode: mode.to_string(),
        resolution: resolution.to_string(),
        fid: frechet_for(&nonempty, real, net, Window::Slice)?,
        fvd_f16: frechet_for(&nonempty, real, net, Window::F16)?,
        fvd_f128: frechet_for(&nonempty, real, net, Window::F128)?,
        is_mean: is.map(|x| x.0),
        is_std: is.map(|x| x.1),
        alignment: if reports.is_empty() {
            None
        } else {
            Some(alignment_score(reports, &detected)?)
        },
        n_generated: generated.len(),
        n_real: real.len(),
    })
}
