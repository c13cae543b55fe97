//! Simulator for the least-favorable models of the resilient filters.

mod mh;
mod proposal;
mod target;

pub use mh::{mh_sample, AcceptanceRecord, MhConfig, MhOutput};
pub use proposal::{
    build_proposal_from_trace, build_proposal_p, build_proposal_p_from_trace, build_proposal_u,
    build_proposal_u_from_trace, eval_proposal_logdensity, jacobians, numerical_jacobian, sample_proposal,
    sample_proposal_with, LfmKind, ProposalModel, ProposalModelP, ProposalModelU, ProposalStepP, ProposalStepU,
    UpdateWeighting,
};
pub use target::{
    estimate_norm_const, eval_target_logdensity_p, eval_target_logdensity_u, eval_target_p_with_trace,
    eval_target_u_with_trace, AdaptiveR, NormConstEstimate, PredictionTilt, TargetEvaluation, UpdateTilt, Welford,
};
