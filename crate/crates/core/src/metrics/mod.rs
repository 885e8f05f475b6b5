//! Evaluation: generation quality, attribution faithfulness and coherence,
//! plus the serialized report.

mod attribution;
mod distances;
mod generation;
mod report;

pub use attribution::{
    ablation_fractions, average_ranks, coherence, faithfulness_area, spearman, trapezoid, Ablation, CoherenceReport,
    FaithfulnessCurve,
};
pub use distances::{chamfer, emd, hungarian, sinkhorn, EmdResult, EMD_EXACT_LIMIT};
pub use generation::{fid_latent, modified_is, msr, pcams, Covariance, PROB_FLOOR};
pub use report::{
    attribution_row, attribution_table_csv, evaluate_generation, generation_table_csv, AttributionRow, GenerationInputs, MetricsReport,
    Provenance, METRICS_VERSION,
};
