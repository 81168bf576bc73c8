//! Confounder-aware representation learning for debiased recommendation.
//!
//! Stage one trains an identifiable VAE (conditioned on user proxy
//! features) alongside a plain exposure VAE whose samples are pulled toward
//! the iVAE latents. Stage two feeds the resulting per-user representation
//! into a matrix-factorization recommender through a bilinear confounder
//! head, and evaluates rankings on uniformly collected feedback.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod ivae;
pub mod lcvae;
pub mod metrics;
pub mod numkernel;
pub mod pipeline;
pub mod recommender;
pub mod rng;
pub mod synthlab;
pub mod trainer;
mod vae;

pub use error::{Error, Result};

pub use config::RunConfig;
pub use dataio::{InteractionDataset, Split};
pub use metrics::{EvalResult, MetricsReport, SeedMetrics};
pub use recommender::{Method, RecConfig, Recommender};
pub use trainer::{RepresentationTable, TrainConfig};
