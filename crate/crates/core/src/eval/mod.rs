//! Embeddings, baselines, ridge probes, PCA, ablations and locality checks.

pub mod ablation;
pub mod embed;
pub mod locality;
pub mod pca;
pub mod probe;

pub use ablation::{median, run_ablation, AblationAxis, AblationReport, StudyConfig};
pub use embed::{baseline_embeddings, extract_embeddings, group_mean, BaselineKind, EmbeddingTable, ExtractConfig};
pub use locality::{attention_locality, perturbation_response, reconstruct, LocalityStats, ReconstructionGrids};
pub use pca::{pca, PcaResult};
pub use probe::{fit_probe, r_squared, ProbeResult, ProbeSplit, Ridge};
