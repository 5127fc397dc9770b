//! Procedural chest-like phantom volumes and the finding probes read from them.
//!
//! Geometry lives in normalized coordinates (`u` left→right, `v` top→bottom,
//! both in `[-1, 1]`; `p` in `(0, 1)` along the volume), so the same spec
//! renders consistently at any resolution and length.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::slice::SliceImage;
use crate::text::{Finding, Report};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const MIN_PHANTOM_LENGTH: usize = 32;
pub const MAX_PHANTOM_LENGTH: usize = 128;

const BODY: f32 = 0.5;
const LUNG: f32 = 0.2;
const LUNG_EMPHYSEMA: f32 = 0.1;
const HEART: f32 = 0.65;
const SPINE: f32 = 0.8;
const NODULE: f32 = 0.8;
const CONSOLIDATION: f32 = 0.6;
const EFFUSION: f32 = 0.5;
const FIBROSIS_AMPLITUDE: f64 = 0.1;
/// Texture frequency in cycles per unit of normalized coordinate.
const FIBROSIS_FREQ: f64 = 4.0;
const NOISE_SIGMA: f64 = 0.01;

const LUNG_CX: f64 = 0.38;
const LUNG_CY: f64 = -0.05;
const LUNG_AX: f64 = 0.26;
const LUNG_AY: f64 = 0.38;
const HEART_CY: f64 = 0.14;
const HEART_AX: f64 = 0.15;
const HEART_AY: f64 = 0.12;
const CARDIO_FACTOR: f64 = 1.5;
const EFFUSION_V: f64 = 0.14;
const NODULE_R: f64 = 0.12;
const NODULE_RP: f64 = 0.1;
const CONSOLIDATION_R: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub resolution: usize,
    pub length_slices: usize,
    pub findings: Vec<Finding>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(findings: &[Finding], length_slices: usize, seed: u64) -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            length_slices,
            findings: findings.to_vec(),
            seed,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn report(&self) -> Result<Report> {
        Report::new(self.findings.iter().copied(), self.length_slices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub slices: Vec<SliceImage>,
    pub report: Report,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Each pathology independently with probability 1/4; none means normal.
pub fn sample_findings(rng: &mut impl Rng) -> Vec<Finding> {
    Finding::PATHOLOGIES
        .into_iter()
        .filter(|_| rng.random_bool(0.25))
        .collect()
}

fn inside(u: f64, v: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> bool {
    ax > 0.0 && ay > 0.0 && ((u - cx) / ax).powi(2) + ((v - cy) / ay).powi(2) < 1.0
}

fn body_scale(p: f64) -> f64 {
    0.75 + 0.25 * (PI * p).sin()
}

/// Body half-axis multipliers: wide and flat at the top, rounder at the bottom,
/// so every slice carries its own depth.
fn body_aspect(p: f64) -> (f64, f64) {
    (1.08 - 0.16 * p, 0.88 + 0.22 * p)
}

/// Slow growth from the apex, full through the middle, abrupt cut at the base.
fn lung_scale(p: f64) -> f64 {
    let (apex, full, base_start, base) = (0.06, 0.35, 0.8, 0.94);
    if p <= apex || p >= base {
        0.0
    } else if p < full {
        (0.5 * PI * (p - apex) / (full - apex)).sin().sqrt()
    } else if p <= base_start {
        1.0
    } else {
        (0.5 * PI * (base - p) / (base - base_start)).sin().sqrt()
    }
}

fn heart_scale(p: f64) -> f64 {
    let (a, b) = (0.2, 0.85);
    if p <= a || p >= b {
        0.0
    } else {
        (PI * (p - a) / (b - a)).sin().sqrt()
    }
}

fn fibrosis_pattern(u: f64, v: f64) -> f64 {
    (2.0 * PI * FIBROSIS_FREQ * u).sin() * (2.0 * PI * FIBROSIS_FREQ * v).sin()
}

/// Per-volume random placement of the finding structures.
struct Layout {
    lung_dx: f64,
    nodule: (f64, f64, f64),
    consolidation: (f64, f64),
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    if spec.resolution == 0 || spec.resolution % 8 != 0 {
        return Err(Error::Parameter(format!(
            "phantom resolution {} must be a positive multiple of 8",
            spec.resolution
        )));
    }
    let report = spec.report()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = Layout {
        lung_dx: rng.random_range(-0.015..0.015),
        nodule: (
            rng.random_range(-0.44..-0.32),
            rng.random_range(-0.28..-0.18),
            rng.random_range(0.42..0.58),
        ),
        consolidation: (rng.random_range(0.27..0.33), rng.random_range(-0.04..0.04)),
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let has = |f| report.has(f);
    let r = spec.resolution;
    let n = spec.length_slices;
    let mut slices = Vec::with_capacity(n);
    for z in 0..n {
        let p = (z as f64 + 0.5) / n as f64;
        let s = body_scale(p);
        let (bw, bh) = body_aspect(p);
        let l = lung_scale(p);
        let hs = heart_scale(p) * if has(Finding::Cardiomegaly) { CARDIO_FACTOR } else { 1.0 };
        let lung_val = if has(Finding::Emphysema) { LUNG_EMPHYSEMA } else { LUNG };
        let (lax, lay) = (LUNG_AX * l, LUNG_AY * l);
        let left_cx = -LUNG_CX + layout.lung_dx;
        let right_cx = LUNG_CX + layout.lung_dx;
        // Atelectasis collapses the right lung laterally, keeping its medial edge.
        let (rcx, rax) = if has(Finding::Atelectasis) {
            let medial = right_cx - lax;
            (medial + lax / 2.0, lax / 2.0)
        } else {
            (right_cx, lax)
        };
        let mut gray = vec![0.0f32; r * r];
        for i in 0..r {
            let v = (i as f64 + 0.5) / r as f64 * 2.0 - 1.0;
            for j in 0..r {
                let u = (j as f64 + 0.5) / r as f64 * 2.0 - 1.0;
                let mut val = 0.0f32;
                if inside(u, v, 0.0, 0.0, 0.85 * s * bw, 0.65 * s * bh) {
                    val = BODY;
                }
                let in_left = inside(u, v, left_cx, LUNG_CY, lax, lay);
                let in_right = inside(u, v, rcx, LUNG_CY, rax, lay);
                if in_left || in_right {
                    let mut lv = lung_val as f64;
                    if has(Finding::Fibrosis) {
                        lv += FIBROSIS_AMPLITUDE * fibrosis_pattern(u, v);
                    }
                    val = lv as f32;
                    if has(Finding::Effusion) && v > EFFUSION_V {
                        val = EFFUSION;
                    }
                    if in_right && has(Finding::Consolidation) && (0.25..=0.75).contains(&p) {
                        let (cx, cy) = layout.consolidation;
                        if (u - cx).hypot(v - cy) < CONSOLIDATION_R {
                            val = CONSOLIDATION;
                        }
                    }
                    if in_left && has(Finding::Nodule) {
                        let (cx, cy, cp) = layout.nodule;
                        let d = ((u - cx) / NODULE_R).powi(2)
                            + ((v - cy) / NODULE_R).powi(2)
                            + ((p - cp) / NODULE_RP).powi(2);
                        if d < 1.0 {
                            val = NODULE;
                        }
                    }
                }
                if inside(u, v, 0.0, HEART_CY, HEART_AX * hs, HEART_AY * hs) {
                    val = HEART;
                }
                if inside(u, v, 0.0, 0.45 * s, 0.09 * s, 0.09 * s) {
                    val = SPINE;
                }
                gray[i * r + j] = val;
            }
        }
        for g in &mut gray {
            *g = (*g as f64 + noise.sample(&mut noise_rng)).clamp(0.0, 1.0) as f32;
        }
        slices.push(SliceImage::from_gray(r, r, &gray)?);
    }
    Ok(Volume { slices, report })
}

/// Probe outputs, indexed like [`Finding::ALL`].
pub type ProbeVector = [f32; 8];

/// Axis-aligned region in normalized coordinates.
#[derive(Clone, Copy)]
struct Rect {
    u: (f64, f64),
    v: (f64, f64),
}

const EMPHYSEMA_RECT: Rect = Rect { u: (-0.52, -0.27), v: (-0.04, 0.1) };
/// Left mid-lung window, clear of the nodule, effusion band and heart.
const TEXTURE_RECT: Rect = Rect { u: (-0.52, -0.27), v: (-0.04, 0.12) };
const EFFUSION_RECT: Rect = Rect { u: (-0.46, -0.30), v: (0.17, 0.28) };
const CONSOLIDATION_RECT: Rect = Rect { u: (0.24, 0.38), v: (-0.1, 0.1) };
const LATERAL_RECT: Rect = Rect { u: (0.5, 0.6), v: (-0.2, 0.05) };

/// Grey plane with normalized-coordinate lookups.
struct Plane<'a> {
    r: usize,
    g: &'a [f32],
}

impl Plane<'_> {
    fn coord(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.r as f64 * 2.0 - 1.0
    }

    fn rect_mean(&self, rect: Rect) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..self.r {
            let v = self.coord(i);
            if v < rect.v.0 || v > rect.v.1 {
                continue;
            }
            for j in 0..self.r {
                let u = self.coord(j);
                if u >= rect.u.0 && u <= rect.u.1 {
                    s += self.g[i * self.r + j] as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Mean over pixels whose elliptic radius around `(cx, cy)` lies in `[r0, r1)`.
    fn ring_mean(&self, cx: f64, cy: f64, ax: f64, ay: f64, r0: f64, r1: f64) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        let reach = r1 * ax.max(ay);
        for i in 0..self.r {
            let v = self.coord(i);
            if (v - cy).abs() > reach {
                continue;
            }
            for j in 0..self.r {
                let u = self.coord(j);
                let rho = ((u - cx) / ax).hypot((v - cy) / ay);
                if rho >= r0 && rho < r1 {
                    s += self.g[i * self.r + j] as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    fn blob(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut cy = -0.30;
        while cy <= -0.16 + 1e-9 {
            let mut cx = -0.46;
            while cx <= -0.30 + 1e-9 {
                let inner = self.ring_mean(cx, cy, 1.0, 1.0, 0.0, 0.09);
                let outer = self.ring_mean(cx, cy, 1.0, 1.0, 0.13, 0.17);
                best = best.max(inner - outer);
                cx += 0.02;
            }
            cy += 0.02;
        }
        best
    }

    /// Least-squares amplitude of the fibrosis texture inside `rect`.
    fn texture_amplitude(&self, rect: Rect) -> f64 {
        let mut px = Vec::new();
        for i in 0..self.r {
            let v = self.coord(i);
            if v < rect.v.0 || v > rect.v.1 {
                continue;
            }
            for j in 0..self.r {
                let u = self.coord(j);
                if u >= rect.u.0 && u <= rect.u.1 {
                    px.push((self.g[i * self.r + j] as f64, fibrosis_pattern(u, v)));
                }
            }
        }
        if px.is_empty() {
            return 0.0;
        }
        let mean = px.iter().map(|p| p.0).sum::<f64>() / px.len() as f64;
        let pm = px.iter().map(|p| p.1).sum::<f64>() / px.len() as f64;
        let num: f64 = px.iter().map(|(g, t)| (g - mean) * (t - pm)).sum();
        let den: f64 = px.iter().map(|(_, t)| (t - pm).powi(2)).sum();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Slice indices covered by the probe window (middle 30% of the volume).
fn probe_slices(n: usize) -> std::ops::Range<usize> {
    let lo = ((0.35 * n as f64).floor() as usize).min(n.saturating_sub(1));
    let hi = ((0.65 * n as f64).ceil() as usize).clamp(lo + 1, n);
    lo..hi
}

/// Normalized finding statistics of a pixel volume; roughly 0 when absent and 1 when present.
pub fn probe_findings(slices: &[SliceImage]) -> Result<ProbeVector> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Usage("cannot probe an empty volume".into()))?;
    if first.height() != first.width() {
        return Err(Error::Shape("probe expects square slices".into()));
    }
    let range = probe_slices(slices.len());
    let count = range.len() as f64;
    let mut acc = [0.0f64; 7];
    let mut blob = f64::NEG_INFINITY;
    for img in &slices[range] {
        let g = img.gray();
        let plane = Plane { r: img.height(), g: &g };
        blob = blob.max(plane.blob());
        acc[1] += plane.rect_mean(EFFUSION_RECT);
        acc[2] += plane.ring_mean(0.0, HEART_CY, HEART_AX, HEART_AY, 1.15, 1.4);
        acc[3] += plane.rect_mean(EMPHYSEMA_RECT);
        acc[4] += plane.rect_mean(CONSOLIDATION_RECT);
        let left = Rect {
            u: (-LATERAL_RECT.u.1, -LATERAL_RECT.u.0),
            v: LATERAL_RECT.v,
        };
        acc[5] += plane.rect_mean(LATERAL_RECT) - plane.rect_mean(left);
        acc[6] += plane.texture_amplitude(TEXTURE_RECT);
    }
    let m = |k: usize| acc[k] / count;
    let lung = LUNG as f64;
    let mut out = [0.0f32; 8];
    out[Finding::Nodule.index()] = (blob / (NODULE - LUNG) as f64) as f32;
    out[Finding::Effusion.index()] = ((m(1) - lung) / (EFFUSION as f64 - lung)) as f32;
    out[Finding::Cardiomegaly.index()] = ((m(2) - 0.35) / (HEART as f64 - 0.35)) as f32;
    out[Finding::Emphysema.index()] = ((lung - m(3)) / (lung - LUNG_EMPHYSEMA as f64)) as f32;
    out[Finding::Consolidation.index()] = ((m(4) - lung) / (CONSOLIDATION as f64 - lung)) as f32;
    out[Finding::Atelectasis.index()] = (m(5) / (BODY as f64 - lung)) as f32;
    out[Finding::Fibrosis.index()] = (m(6).abs() / FIBROSIS_AMPLITUDE) as f32;
    let max_path = out[..7].iter().fold(0.0f32, |a, &b| a.max(b.clamp(0.0, 1.0)));
    out[Finding::Normal.index()] = 1.0 - max_path;
    Ok(out)
}

pub const PROBE_CONFIG_VERSION: u32 = 1;

/// Detection thresholds for the seven pathology channels and the softmax
/// temperature used to turn probe vectors into class distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCalibration {
    pub version: u32,
    pub thresholds: Vec<f32>,
    pub temperature: f32,
}

impl ProbeCalibration {
    /// Findings whose channel exceeds its threshold; `normal` if none do.
    pub fn detect(&self, probe: &ProbeVector) -> Vec<Finding> {
        let found: Vec<Finding> = Finding::PATHOLOGIES
            .into_iter()
            .filter(|f| probe[f.index()] > self.thresholds[f.index()])
            .collect();
        if found.is_empty() {
            vec![Finding::Normal]
        } else {
            found
        }
    }

    /// Softmax of the probe channels at the calibrated temperature.
    pub fn class_probs(&self, probe: &ProbeVector) -> [f64; 8] {
        let z: Vec<f64> = probe.iter().map(|&v| v as f64 / self.temperature as f64).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut out = [0.0; 8];
        for (o, v) in out.iter_mut().zip(e) {
            *o = v / s;
        }
        out
    }

    /// Fit thresholds (best balanced accuracy per channel) and temperature
    /// (best mean log-likelihood of the report's findings) on labelled probes.
    pub fn fit(probes: &[ProbeVector], reports: &[Report]) -> Result<Self> {
        if probes.len() != reports.len() || probes.is_empty() {
            return Err(Error::Usage("calibration needs matching, non-empty probe and report lists".into()));
        }
        let mut thresholds = Vec::with_capacity(7);
        for f in Finding::PATHOLOGIES {
            let mut vals: Vec<(f32, bool)> = probes
                .iter()
                .zip(reports)
                .map(|(p, r)| (p[f.index()], r.has(f)))
                .collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let pos = vals.iter().filter(|v| v.1).count().max(1) as f64;
            let neg = vals.iter().filter(|v| !v.1).count().max(1) as f64;
            let (mut best, mut best_t) = (f64::NEG_INFINITY, 0.5f32);
            // Candidate cut after position k: negatives at or below, positives above.
            let mut neg_below = 0.0;
            let mut pos_below = 0.0;
            for k in 0..vals.len() {
                if vals[k].1 {
                    pos_below += 1.0;
                } else {
                    neg_below += 1.0;
                }
                if k + 1 < vals.len() && vals[k].0 == vals[k + 1].0 {
                    continue;
                }
                let acc = neg_below / neg + (pos - pos_below) / pos;
                let next = vals.get(k + 1).map_or(vals[k].0 + 0.1, |v| v.0);
                if acc > best {
                    best = acc;
                    best_t = 0.5 * (vals[k].0 + next);
                }
            }
            thresholds.push(best_t);
        }
        let mut cal = Self {
            version: PROBE_CONFIG_VERSION,
            thresholds,
            temperature: 1.0,
        };
        let mut best = (f64::NEG_INFINITY, 1.0f32);
        for k in 1..=40 {
            let t = k as f32 * 0.025;
            cal.temperature = t;
            let ll: f64 = probes
                .iter()
                .zip(reports)
                .map(|(p, r)| {
                    let q = cal.class_probs(p);
                    let fs = r.findings();
                    fs.iter().map(|f| q[f.index()].max(1e-300).ln()).sum::<f64>() / fs.len() as f64
                })
                .sum();
            if ll > best.0 {
                best = (ll, t);
            }
        }
        cal.temperature = best.1;
        Ok(cal)
    }

    /// Calibrate on `n` fresh phantoms drawn from `seed`.
    pub fn calibrate(n: usize, seed: u64, resolution: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probes = Vec::with_capacity(n);
        let mut reports = Vec::with_capacity(n);
        for _ in 0..n {
            let findings = sample_findings(&mut rng);
            let len = rng.random_range(MIN_PHANTOM_LENGTH..=MAX_PHANTOM_LENGTH);
            let spec = PhantomSpec::new(&findings, len, rng.random()).with_resolution(resolution);
            let vol = generate_phantom(&spec)?;
            probes.push(probe_findings(&vol.slices)?);
            reports.push(vol.report);
        }
        Self::fit(&probes, &reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cal: Self = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if cal.version != PROBE_CONFIG_VERSION || cal.thresholds.len() != 7 || cal.temperature <= 0.0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported probe calibration (version {})", cal.version),
            });
        }
        Ok(cal)
    }
}
