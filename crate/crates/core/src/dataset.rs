//! Latent datasets on disk and the two training-pair sampling regimes.
//!
//! A dataset directory holds:
//!
//! * `manifest.jsonl` – one [`ManifestRecord`] per volume
//! * `reports.txt` – rendered reports, one per line, in manifest order
//! * `latents/vol_NNNN.ctfl` – latent volume `[len, 16, h, w]`
//! * `embeddings.ctfl` – report embeddings `[n, 256]`
//! * `codec.json` – basis seed and channel scales
//! * `probe.toml` – probe thresholds and temperature
//! * `dataset.json` – the resolved [`DatasetConfig`]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ArrayFile;
use crate::codec::{CodecBasis, KEPT_ROWS, PATCH};
use crate::error::{io_err, Error, Result};
use crate::latent::{LatentBlock, LatentSlice, LatentVolume, BLOCK_LEN};
use crate::phantom::{
    generate_phantom, sample_findings, PhantomSpec, ProbeCalibration, Volume, MAX_PHANTOM_LENGTH,
    MIN_PHANTOM_LENGTH,
};
use crate::text::{embed_report, parse_report, Finding, Report, TextEmbedding, EMBED_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingRegime {
    /// Every start position and the black-to-first pair are equally likely.
    Uniform,
    /// The black-to-first pair is drawn with probability `p_first`.
    StartBoost { p_first: f64 },
}

impl SamplingRegime {
    pub const DEFAULT_P_FIRST: f64 = 0.30;

    pub fn start_boost() -> Self {
        Self::StartBoost {
            p_first: Self::DEFAULT_P_FIRST,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::StartBoost { p_first } if !(0.0..=1.0).contains(&p_first) => {
                Err(Error::Parameter(format!("p_first {p_first} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl Default for SamplingRegime {
    fn default() -> Self {
        Self::start_boost()
    }
}

/// Black conditioning block and white padding slice for one latent size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentinels {
    pub black: LatentBlock,
    pub white: LatentBlock,
    pub white_slice: LatentSlice,
}

impl Sentinels {
    pub fn new(basis: &CodecBasis, h: usize, w: usize) -> Result<Self> {
        let (black, white_slice) = basis.sentinel_slices(h, w)?;
        Ok(Self {
            black: LatentBlock::repeat(&black),
            white: LatentBlock::repeat(&white_slice),
            white_slice,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub cond: LatentBlock,
    pub target: LatentBlock,
    pub text: TextEmbedding,
    pub is_first: bool,
    pub start_index: usize,
}

pub fn sample_pair(
    volume: &LatentVolume,
    text: &TextEmbedding,
    regime: SamplingRegime,
    sentinels: &Sentinels,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let n = volume.len();
    if n < BLOCK_LEN {
        return Err(Error::Usage(format!("volume of {n} slices is shorter than a block")));
    }
    let positions = n - BLOCK_LEN + 1;
    let start = match regime {
        SamplingRegime::StartBoost { p_first } => {
            if rng.random::<f64>() < p_first {
                None
            } else {
                Some(rng.random_range(0..positions))
            }
        }
        SamplingRegime::Uniform => match rng.random_range(0..positions + 1) {
            0 => None,
            k => Some(k - 1),
        },
    };
    Ok(match start {
        None => PairSample {
            cond: sentinels.black.clone(),
            target: volume.window(0, &sentinels.white_slice),
            text: text.clone(),
            is_first: true,
            start_index: 0,
        },
        Some(i) => PairSample {
            cond: volume.window(i, &sentinels.white_slice),
            target: volume.window(i + BLOCK_LEN, &sentinels.white_slice),
            text: text.clone(),
            is_first: false,
            start_index: i,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_volumes: usize,
    pub seed: u64,
    pub resolution: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub codec_seed: u64,
    pub embed_seed: u64,
    /// Phantoms drawn from `codec_seed` to fit the latent channel scales.
    pub scale_phantoms: usize,
    pub probe_seed: u64,
    pub probe_phantoms: usize,
}

impl DatasetConfig {
    pub fn new(n_volumes: usize, seed: u64) -> Self {
        Self {
            n_volumes,
            seed,
            resolution: crate::phantom::DEFAULT_RESOLUTION,
            min_length: MIN_PHANTOM_LENGTH,
            max_length: MAX_PHANTOM_LENGTH,
            codec_seed: 1,
            embed_seed: crate::text::DEFAULT_EMBED_SEED,
            scale_phantoms: 64,
            probe_seed: 2,
            probe_phantoms: 200,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(Error::Parameter("dataset needs at least one volume".into()));
        }
        if self.min_length < 2 * BLOCK_LEN || self.min_length > self.max_length {
            return Err(Error::Parameter(format!(
                "invalid length range [{}, {}]",
                self.min_length, self.max_length
            )));
        }
        if self.resolution == 0 || self.resolution % (2 * PATCH) != 0 {
            return Err(Error::Parameter(format!(
                "resolution {} must be a multiple of {}",
                self.resolution,
                2 * PATCH
            )));
        }
        Ok(())
    }

    /// Phantom specs of the dataset, in manifest order.
    pub fn specs(&self) -> Vec<PhantomSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_volumes)
            .map(|_| {
                let findings = sample_findings(&mut rng);
                let len = rng.random_range(self.min_length..=self.max_length);
                PhantomSpec::new(&findings, len, rng.random()).with_resolution(self.resolution)
            })
            .collect()
    }

    /// Codec basis with channel scales fitted on dedicated phantoms, so all
    /// datasets sharing `codec_seed` share one latent space.
    pub fn codec(&self) -> Result<CodecBasis> {
        let basis = CodecBasis::build(self.codec_seed);
        let mut cal = self.clone();
        cal.seed = self.codec_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xc0dec;
        cal.n_volumes = self.scale_phantoms.max(1);
        let mut latents = Vec::new();
        for spec in cal.specs() {
            latents.extend(basis.encode_volume(&generate_phantom(&spec)?.slices)?);
        }
        let scale = basis.fit_channel_scale(&latents)?;
        basis.with_channel_scale(scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub volume_id: String,
    pub length: usize,
    pub findings: Vec<Finding>,
    pub latent_file: String,
    pub report: String,
    pub seed: u64,
    pub resolution: usize,
}

impl ManifestRecord {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec::new(&self.findings, self.length, self.seed).with_resolution(self.resolution)
    }

    /// Re-render the source phantom, optionally at a different resolution.
    pub fn render(&self, resolution: usize) -> Result<Volume> {
        generate_phantom(&self.spec().with_resolution(resolution))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecFile {
    seed: u64,
    channel_scale: [f32; KEPT_ROWS],
}

#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub config: DatasetConfig,
    pub basis: CodecBasis,
    pub records: Vec<ManifestRecord>,
    pub reports: Vec<Report>,
    pub volumes: Vec<LatentVolume>,
    pub embeddings: Vec<TextEmbedding>,
    pub probe: ProbeCalibration,
}

impl LatentDataset {
    pub fn build(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let basis = config.codec()?;
        let probe = ProbeCalibration::calibrate(config.probe_phantoms, config.probe_seed, config.resolution)?;
        let mut records = Vec::new();
        let mut reports = Vec::new();
        let mut volumes = Vec::new();
        let mut embeddings = Vec::new();
        for (i, spec) in config.specs().into_iter().enumerate() {
            let vol = generate_phantom(&spec)?;
            let latents = basis.encode_volume(&vol.slices)?;
            let id = format!("vol_{i:04}");
            records.push(ManifestRecord {
                latent_file: format!("latents/{id}.ctfl"),
                volume_id: id,
                length: spec.length_slices,
                findings: vol.report.findings().iter().copied().collect(),
                report: vol.report.render(),
                seed: spec.seed,
                resolution: spec.resolution,
            });
            embeddings.push(embed_report(&vol.report, config.embed_seed));
            reports.push(vol.report);
            volumes.push(LatentVolume::from_slices(&latents)?);
        }
        Ok(Self {
            config: config.clone(),
            basis,
            records,
            reports,
            volumes,
            embeddings,
            probe,
        })
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        let r = self.config.resolution / PATCH;
        (r, r)
    }

    pub fn sentinels(&self) -> Result<Sentinels> {
        let (h, w) = self.latent_hw();
        Sentinels::new(&self.basis, h, w)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Draw a volume uniformly, then a pair from it under `regime`.
    pub fn sample(&self, regime: SamplingRegime, sentinels: &Sentinels, rng: &mut impl Rng) -> Result<PairSample> {
        let i = rng.random_range(0..self.volumes.len());
        sample_pair(&self.volumes[i], &self.embeddings[i], regime, sentinels, rng)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let latent_dir = dir.join("latents");
        fs::create_dir_all(&latent_dir).map_err(io_err(&latent_dir))?;
        let mut manifest = Vec::new();
        let mut reports = String::new();
        for (rec, vol) in self.records.iter().zip(&self.volumes) {
            let line = serde_json::to_string(rec).expect("manifest record serializes");
            writeln!(manifest, "{line}").expect("write to vec");
            reports.push_str(&rec.report);
            reports.push('\n');
            let shape = vec![vol.len(), crate::latent::LATENT_CHANNELS, vol.height(), vol.width()];
            ArrayFile::new(self.basis.seed(), shape, vol.data().to_vec())?.save(&dir.join(&rec.latent_file))?;
        }
        write_file(&dir.join("manifest.jsonl"), &manifest)?;
        write_file(&dir.join("reports.txt"), reports.as_bytes())?;
        let emb: Vec<f32> = self.embeddings.iter().flat_map(|e| e.vector().iter().copied()).collect();
        ArrayFile::new(self.config.embed_seed, vec![self.embeddings.len(), EMBED_DIM], emb)?
            .save(&dir.join("embeddings.ctfl"))?;
        let codec = CodecFile {
            seed: self.basis.seed(),
            channel_scale: *self.basis.channel_scale(),
        };
        write_file(&dir.join("codec.json"), pretty(&codec).as_bytes())?;
        self.probe.save(&dir.join("probe.toml"))?;
        write_file(&dir.join("dataset.json"), pretty(&self.config).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(io_err(p))
        };
        let config: DatasetConfig = parse_json(&read("dataset.json")?, &dir.join("dataset.json"))?;
        let codec: CodecFile = parse_json(&read("codec.json")?, &dir.join("codec.json"))?;
        let basis = CodecBasis::build(codec.seed).with_channel_scale(codec.channel_scale)?;
        let probe = ProbeCalibration::load(&dir.join("probe.toml"))?;
        let manifest_path = dir.join("manifest.jsonl");
        let records: Vec<ManifestRecord> = read("manifest.jsonl")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_json(l, &manifest_path))
            .collect::<Result<_>>()?;
        let mut volumes = Vec::with_capacity(records.len());
        let mut reports = Vec::with_capacity(records.len());
        for rec in &records {
            let path = dir.join(&rec.latent_file);
            let arr = ArrayFile::load(&path)?;
            let [len, c, h, w] = arr.shape[..] else {
                return Err(Error::Format {
                    path,
                    msg: format!("expected a rank-4 latent volume, got {:?}", arr.shape),
                });
            };
            if len != rec.length || c != KEPT_ROWS {
                return Err(Error::Format {
                    path,
                    msg: format!("latent shape {:?} disagrees with manifest length {}", arr.shape, rec.length),
                });
            }
            volumes.push(LatentVolume::new(len, h, w, arr.data)?);
            reports.push(parse_report(&rec.report)?);
        }
        let emb_path = dir.join("embeddings.ctfl");
        let emb = ArrayFile::load(&emb_path)?;
        if emb.shape != [records.len(), EMBED_DIM] {
            return Err(Error::Format {
                path: emb_path,
                msg: format!("embedding shape {:?} does not match {} records", emb.shape, records.len()),
            });
        }
        let embeddings = emb
            .data
            .chunks_exact(EMBED_DIM)
            .zip(&reports)
            .map(|(v, r)| TextEmbedding::new(v.to_vec(), embed_report(r, config.embed_seed).source_hash()))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            basis,
            records,
            reports,
            volumes,
            embeddings,
            probe,
        })
    }
}

/// Build a dataset and write it to `out`.
pub fn build_dataset(n_volumes: usize, seed: u64, out: &Path) -> Result<LatentDataset> {
    let ds = LatentDataset::build(&DatasetConfig::new(n_volumes, seed))?;
    ds.save(out)?;
    Ok(ds)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        msg: e.to_string(),
    })
}
