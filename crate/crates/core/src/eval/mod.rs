//! Measurements on trained checkpoints.

pub mod bench;
pub mod corrupt;
pub mod ood;
pub mod probe;
pub mod retrieval;
pub mod rho;

pub use bench::{bench_tta, BenchReport};
pub use corrupt::{corrupt, Corruption};
pub use ood::{ood_auc, ood_report, pr_curve, tta_confidence, OodReport, PrPoint, TtaMode};
pub use probe::{linear_probe, ProbeConfig, ProbeReport, ProbeTarget};
pub use retrieval::{
    execute_retrieve, mrr, run_mrr, MrrReport, MrrSuite, Neighbor, QueryMode, RetrievalIndex, RetrieveOutcome, RetrieveRequest,
};
pub use rho::{identity_anchoring, measure_rho, RhoReport};

use crate::augment::{self, AugmentKind, AugmentParams, SamplerConfig};
use crate::rng::CounterRng;

/// Draws a θ for `kind`, redrawing until it is not the identity.
pub(crate) fn non_identity(kind: AugmentKind, rng: &mut CounterRng) -> AugmentParams {
    loop {
        let p = augment::sample_params_with(kind, rng, &SamplerConfig::default());
        if !p.is_identity() {
            return p;
        }
    }
}
