//! Evaluation across the five fingerprinting dimensions: effectiveness and
//! robustness (success rates), harmlessness (perplexity, downstream
//! accuracy), efficiency (time/memory probe), and the latent-representation
//! analysis behind the robustness findings.

mod latents;
mod mem;
mod metrics;
mod report;

pub use latents::{collect_latents, pca_project, separation_ratio, LatentSet, PcaProjection};
pub use mem::{efficiency_probe, Effort};
pub use metrics::{downstream_accuracy, fsr, fsr_star, perplexity};
pub use report::{EvalReport, REPORT_CSV_HEADER};
