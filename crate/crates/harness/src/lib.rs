//! Configuration-driven experiment runner for cross-validated risk inference:
//! coverage and set-size campaigns, stability probes, variance estimates,
//! and one-off bands and confidence sets on user data.

pub mod campaign;
pub mod config;
pub mod experiments;
pub mod oneshot;

pub use campaign::{run_coverage_campaign, run_gen, run_phi, run_stability, CampaignManifest};
pub use config::{ExperimentConfig, ExperimentKind};
