//! Text-conditioned latent flow matching for block-autoregressive volume
//! synthesis, at desk scale.
//!
//! The pipeline, in module order of use:
//!
//! - [`phantom`] renders seeded chest-like phantom volumes with known findings
//!   and a calibrated probe that detects those findings again.
//! - [`codec`] maps RGB slices to 16-channel latents (8× downsampling) with a
//!   fixed orthonormal patch basis; [`latent`] holds slice/block/volume types.
//! - [`text`] parses reports and embeds them deterministically.
//! - [`dataset`] builds the latent cache and draws (condition, target) block
//!   pairs, with black/white sentinel blocks marking volume start and end.
//! - [`model`] is the factorized spatial/temporal transformer predicting
//!   velocities on top of `volflow-tensor` autodiff; [`flow`] holds the
//!   interpolation path, loss and Euler sampler.
//! - [`trainer`] runs Adam with warmup, accumulation and byte-stable checkpoints.
//! - [`sampler`] generates volumes block by block (full-body, GT-head and
//!   next-block modes) and stops on the white sentinel or a length cap.
//! - [`metrics`] and [`eval`] score generated sets (Fréchet distances over a
//!   seeded feature net, inception score, report alignment).
//! - [`cli`] ties it together behind the `volflow` binary.
//!
//! ```
//! use volflow::text::{embed_report, parse_report, DEFAULT_EMBED_SEED};
//!
//! let r = parse_report("Findings: nodule. Impressions: nodule. length of volume: 64").unwrap();
//! let e = embed_report(&r, DEFAULT_EMBED_SEED);
//! assert_eq!(e.vector().len(), 256);
//! ```

pub mod cache;
pub mod cli;
pub mod codec;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod flow;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod render;
pub mod sampler;
pub mod slice;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
