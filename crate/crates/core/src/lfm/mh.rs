//! Metropolis-Hastings sampler over trajectories of the least-favorable
//! model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterTrace, ResilientConfig};
use crate::model::{NonlinearModel, Trajectory};
use crate::rng;

use super::proposal::{
    build_proposal_from_trace, eval_proposal_logdensity, sample_proposal_with, uniform, LfmKind, ProposalModel,
    UpdateWeighting,
};
use super::target::{eval_target_p_with_trace, eval_target_u_with_trace, AdaptiveR, TargetEvaluation};

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhConfig {
    pub r_init: usize,
    pub r_cap: usize,
    pub tau_star: f64,
    /// Accepted moves discarded before samples are kept.
    pub burn_in: usize,
    /// Keep the chain state every `thinning` iterations after burn-in.
    pub thinning: usize,
    pub num_samples: usize,
    pub max_proposals: usize,
    pub seed: u64,
    pub weighting: UpdateWeighting,
}

impl Default for MhConfig {
    fn default() -> Self {
        MhConfig {
            r_init: 100,
            r_cap: 4000,
            tau_star: 2e-3,
            burn_in: 200,
            thinning: 1,
            num_samples: 100,
            max_proposals: 100_000,
            seed: 0,
            weighting: UpdateWeighting::Current,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_init == 0 || self.r_init > self.r_cap {
            return Err(Error::Config(format!("need 0 < r_init <= r_cap, got {} and {}", self.r_init, self.r_cap)));
        }
        if !(self.tau_star > 0.0) {
            return Err(Error::Config(format!("tau_star must be positive, got {}", self.tau_star)));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adaptive_r(&self) -> AdaptiveR {
        AdaptiveR {
            r_init: self.r_init,
            r_cap: self.r_cap,
            tau_star: self.tau_star,
        }
    }
}

/// One accept/reject decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub proposal_index: usize,
    pub accepted: bool,
    pub alpha: f64,
    /// Sum of the `M̂` sample counts spent on this candidate.
    pub r_total: usize,
}

#[derive(Debug, Clone)]
pub struct MhOutput {
    pub kind: LfmKind,
    pub samples: Vec<Trajectory>,
    pub acceptance_log: Vec<AcceptanceRecord>,
    /// Sample count of every `M̂_t` evaluated for a candidate, accepted or not.
    pub r_log: Vec<usize>,
    /// Number of proposals made before burn-in completed.
    pub burn_in_proposals: Option<usize>,
}

impl MhOutput {
    pub fn proposals(&self) -> usize {
        self.acceptance_log.len()
    }

    fn rate(records: &[AcceptanceRecord]) -> f64 {
        if records.is_empty() {
            return f64::NAN;
        }
        records.iter().filter(|r| r.accepted).count() as f64 / records.len() as f64
    }

    pub fn acceptance_rate(&self) -> f64 {
        Self::rate(&self.acceptance_log)
    }

    /// Acceptance rate over the proposals made after burn-in.
    pub fn post_burn_in_acceptance_rate(&self) -> f64 {
        let start = self.burn_in_proposals.unwrap_or(self.acceptance_log.len());
        Self::rate(&self.acceptance_log[start..])
    }

    /// Acceptance rate over consecutive windows of `window` proposals.
    pub fn windowed_acceptance_rates(&self, window: usize) -> Vec<f64> {
        self.acceptance_log.chunks(window.max(1)).map(Self::rate).collect()
    }

    /// One row per `(sample_index, t)` with the state and observation.
    pub fn write_samples_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let (n, m) = match self.samples.first() {
            Some(s) => (s.states[0].len(), s.observations[0].len()),
            None => (0, 0),
        };
        let mut header = vec!["sample_index".to_string(), "t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("y{i}")));
        out.write_record(&header)?;
        for (k, traj) in self.samples.iter().enumerate() {
            for (t, x) in traj.states.iter().enumerate() {
                let mut row = vec![k.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                match traj.observations.get(t) {
                    Some(y) => row.extend(y.iter().map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), m)),
                }
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One row per proposal: index, accepted, alpha, r_total.
    pub fn write_diagnostics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for rec in &self.acceptance_log {
            out.serialize(rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cached evaluation of a chain state.
struct ChainState {
    traj: Trajectory,
    proposal: ProposalModel,
    log_target: f64,
}

/// Whether a failure while evaluating a candidate is a numerical breakdown
/// of that candidate (treated as `alpha = 0`) rather than a setup error.
fn is_candidate_failure(err: &Error) -> bool {
    matches!(
        err.root(),
        Error::ThetaOutOfDomain { .. }
            | Error::ToleranceUnreachable { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::StNotPositiveDefinite { .. }
            | Error::CovNotPositiveDefinite { .. }
            | Error::ONotPositiveDefinite { .. }
            | Error::OmegaSingular { .. }
            | Error::DegenerateDenominator { .. }
            | Error::NonFiniteDerivative
            | Error::NoSignChange { .. }
            | Error::MaxIterations { .. }
    )
}

/// Runs the resilient filter on `traj`'s observations, evaluates the target
/// and builds the proposal conditioned on those observations.
fn evaluate(
    model: &NonlinearModel,
    cfg: &ResilientConfig,
    kind: LfmKind,
    mh: &MhConfig,
    traj: Trajectory,
    key: u64,
) -> (Result<ChainState>, Vec<usize>) {
    let trace: FilterTrace = match run_filter(model, kind.filter_kind(), &traj.observations, cfg) {
        Ok(t) => t,
        Err(e) => return (Err(e), Vec::new()),
    };
    let target: Result<TargetEvaluation> = match kind {
        LfmKind::Prediction => eval_target_p_with_trace(model, cfg, &trace, &traj, mh, key),
        LfmKind::Update => eval_target_u_with_trace(model, &trace, &traj, mh, key),
    };
    let target = match target {
        Ok(t) => t,
        Err(e) => return (Err(e), Vec::new()),
    };
    let rs: Vec<usize> = target.estimates.iter().map(|e| e.sample_count).collect();
    let state = build_proposal_from_trace(model, &trace, kind, mh.weighting).map(|proposal| ChainState {
        traj,
        proposal,
        log_target: target.log_density,
    });
    (state, rs)
}

/// Draws trajectories `x_0..x_{N+1}`, `y_0..y_N` from the least-favorable
/// model of `kind`, starting from a nominal trajectory.
pub fn mh_sample(
    model: &NonlinearModel,
    cfg: &ResilientConfig,
    kind: LfmKind,
    horizon: usize,
    mh: &MhConfig,
) -> Result<MhOutput> {
    mh.validate()?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let start = model.simulate(horizon, mh.seed);
    let (current, _) = evaluate(model, cfg, kind, mh, start, 0);
    let mut current = current?;
    let mut u_rng = rng::stream(mh.seed, rng::Stream::Acceptance);

    let mut out = MhOutput {
        kind,
        samples: Vec::with_capacity(mh.num_samples),
        acceptance_log: Vec::new(),
        r_log: Vec::new(),
        burn_in_proposals: if mh.burn_in == 0 { Some(0) } else { None },
    };
    let mut accepted_total = 0usize;
    let mut since_burn_in = 0usize;

    for k in 1..=mh.max_proposals {
        if out.samples.len() >= mh.num_samples {
            break;
        }
        let mut prop_rng = rng::substream(mh.seed, rng::Stream::ProposalNoise, &[k as u64]);
        let cand_traj = sample_proposal_with(&current.proposal, model, &mut prop_rng);
        let q_cand = eval_proposal_logdensity(&current.proposal, model, &cand_traj)?;
        let (cand, rs) = evaluate(model, cfg, kind, mh, cand_traj, k as u64);
        let r_total = rs.iter().sum();
        out.r_log.extend_from_slice(&rs);
        let u = uniform(&mut u_rng);

        let (accepted, alpha, next) = match cand {
            Ok(cand) => {
                let q_back = eval_proposal_logdensity(&cand.proposal, model, &current.traj)?;
                let log_alpha = cand.log_target - current.log_target + q_back - q_cand;
                let alpha = if log_alpha.is_nan() { 0.0 } else { log_alpha.min(0.0).exp() };
                if alpha > 0.0 && u.ln() <= log_alpha {
                    (true, alpha, Some(cand))
                } else {
                    (false, alpha, None)
                }
            }
            Err(e) if is_candidate_failure(&e) => (false, 0.0, None),
            Err(e) => return Err(e),
        };
        if let Some(cand) = next {
            current = cand;
            accepted_total += 1;
        }
        out.acceptance_log.push(AcceptanceRecord {
            proposal_index: k,
            accepted,
            alpha,
            r_total,
        });

        if out.burn_in_proposals.is_none() {
            if accepted_total >= mh.burn_in {
                out.burn_in_proposals = Some(k);
            }
            continue;
        }
        since_burn_in += 1;
        if since_burn_in.is_multiple_of(mh.thinning) {
            out.samples.push(current.traj.clone());
        }
    }
    if accepted_total == 0 {
        return Err(Error::ChainStalled {
            proposals: out.acceptance_log.len(),
        });
    }
    Ok(out)
}
