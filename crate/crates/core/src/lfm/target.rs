//! Unnormalized least-favorable target densities and the adaptive Monte
//! Carlo estimate of their per-step normalizing constants `M_t`.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::{prop1_density, run_filter, FilterTrace, ResilientConfig};
use crate::model::{standard_normal_vector, GaussianBelief, NonlinearModel, Trajectory};
use crate::numerics::{symmetrize, Matrix, SpdMatrix, Vector};
use crate::rng;

use super::mh::MhConfig;
use super::proposal::LfmKind;

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    fn scale(&mut self, factor: f64) {
        self.mean *= factor;
        self.m2 *= factor * factor;
    }
}

/// Monte Carlo estimate `M̂_{t,r}` with its 95% relative accuracy
/// `tau_r = 1.96 sigma / (sqrt(r) M̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstEstimate {
    pub value: f64,
    pub log_value: f64,
    pub sample_count: usize,
    pub sample_std: f64,
    pub rel_error: f64,
}

impl NormConstEstimate {
    /// `M_t = 1`, used when the tilt vanishes.
    pub fn exact_one() -> Self {
        NormConstEstimate {
            value: 1.0,
            log_value: 0.0,
            sample_count: 0,
            sample_std: 0.0,
            rel_error: 0.0,
        }
    }
}

/// Sample-size policy for [`estimate_norm_const`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveR {
    pub r_init: usize,
    pub r_cap: usize,
    pub tau_star: f64,
}

/// Largest log-scale gap kept before the running statistics are rescaled.
const RESCALE_GAP: f64 = 600.0;

/// Averages `exp(log_sample())` with `r` doubling from `r_init` until
/// `tau_r <= tau_star` or `r = r_cap`. At least two samples are drawn so
/// that `tau_r` is defined. Statistics are kept relative to a
/// running shift so the exponentials never overflow.
pub fn estimate_norm_const<F>(policy: &AdaptiveR, mut log_sample: F) -> NormConstEstimate
where
    F: FnMut() -> f64,
{
    let mut stats = Welford::new();
    let mut shift = f64::NEG_INFINITY;
    let r_cap = policy.r_cap.max(2);
    let mut target = policy.r_init.clamp(2, r_cap);
    loop {
        while stats.count() < target {
            let g = log_sample();
            if g > shift + RESCALE_GAP || shift == f64::NEG_INFINITY {
                if shift != f64::NEG_INFINITY {
                    stats.scale((shift - g).exp());
                }
                shift = g;
            }
            stats.push((g - shift).exp());
        }
        let r = stats.count();
        let mean = stats.mean();
        let sd = stats.variance().sqrt();
        let tau = 1.96 * sd / ((r as f64).sqrt() * mean);
        if tau <= policy.tau_star || r >= r_cap {
            let log_value = shift + mean.ln();
            return NormConstEstimate {
                value: log_value.exp(),
                log_value,
                sample_count: r,
                sample_std: sd * shift.exp(),
                rel_error: tau,
            };
        }
        target = (2 * r).min(r_cap);
    }
}

/// Closed-form inner integral of the prediction-case normalizing constant
/// at time `t`, as a function of `x_t`.
#[derive(Debug, Clone)]
pub struct PredictionTilt {
    pub theta: f64,
    /// `R = blockdiag(B B^T, D D^T)`
    pub r: SpdMatrix,
    /// `S = R^-1 - theta H^T H`, `H = [I, -G]`
    pub s: SpdMatrix,
    /// `theta H^T l`
    pub h_l: Vector,
    /// `-1/2 log|R| - 1/2 log|S| + theta/2 |l|^2`
    pub constant: f64,
    /// Sampling law of `x_t`.
    pub prior: GaussianBelief,
    /// Predictor `x̂_{t+1}` used in the tilt.
    pub predictor: Vector,
}

impl PredictionTilt {
    /// Builds the tilt at step `t` of a prediction-resilient trace.
    pub fn from_trace(model: &NonlinearModel, trace: &FilterTrace, y: &Vector, rule: &crate::sigma::SigmaRule, t: usize) -> Result<Self> {
        let step = &trace.steps[t];
        let theta = step.theta;
        let n = model.state_dim();
        let m = model.obs_dim();
        let joint = prop1_density(model, &step.prior, y, rule)?;
        let g = joint.regression_gain();
        let l = &joint.mean_x - &g * &joint.mean_y;
        let mut hmat = Matrix::zeros(n, n + m);
        hmat.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
        hmat.view_mut((0, n), (n, m)).copy_from(&(-&g));
        let r = SpdMatrix::new(model.joint_noise_cov())?;
        let s_mat = symmetrize(&(r.inverse() - hmat.transpose() * &hmat * theta));
        let s = SpdMatrix::strict(s_mat).map_err(|_| Error::StNotPositiveDefinite { t })?;
        let h_l = hmat.transpose() * &l * theta;
        let constant = -0.5 * r.log_det() - 0.5 * s.log_det() + 0.5 * theta * l.norm_squared();
        Ok(PredictionTilt {
            theta,
            r,
            s,
            h_l,
            constant,
            prior: step.prior.clone(),
            predictor: step.predicted.mean.clone(),
        })
    }

    /// `log N_t(x)`
    pub fn log_integrand(&self, model: &NonlinearModel, x: &Vector) -> f64 {
        let n = model.state_dim();
        let m = model.obs_dim();
        let mut mu = Vector::zeros(n + m);
        mu.rows_mut(0, n).copy_from(&model.f(x));
        mu.rows_mut(n, m).copy_from(&model.h(x));
        let r_mu = self.r.solve_vec(&mu);
        let s = &r_mu - &self.h_l;
        let s_quad = s.dot(&self.s.solve_vec(&s));
        -0.5 * (mu.dot(&r_mu) - s_quad) + self.constant
    }
}

/// Closed-form inner integral of the update-case normalizing constant.
#[derive(Debug, Clone)]
pub struct UpdateTilt {
    pub theta: f64,
    /// `D D^T`
    pub meas_cov: SpdMatrix,
    /// `S = (D D^T)^-1 - theta L^T L`
    pub s: SpdMatrix,
    pub gain: Matrix,
    /// `x̂_t - L m_y`
    pub anchor: Vector,
    /// `-1/2 log|S| - 1/2 log|D D^T|`
    pub constant: f64,
    pub prior: GaussianBelief,
    pub filtered: Vector,
}

impl UpdateTilt {
    pub fn from_trace(model: &NonlinearModel, trace: &FilterTrace, t: usize) -> Result<Self> {
        let step = &trace.steps[t];
        let theta = step.theta;
        let meas_cov = SpdMatrix::new(model.measurement_cov().clone())?;
        let gain = step.gain.clone();
        let s_mat = symmetrize(&(meas_cov.inverse() - gain.transpose() * &gain * theta));
        let s = SpdMatrix::strict(s_mat).map_err(|_| Error::StNotPositiveDefinite { t })?;
        let anchor = &step.prior.mean - &gain * &step.innov_mean;
        let constant = -0.5 * s.log_det() - 0.5 * meas_cov.log_det();
        Ok(UpdateTilt {
            theta,
            meas_cov,
            s,
            gain,
            anchor,
            constant,
            prior: step.prior.clone(),
            filtered: step.updated.mean.clone(),
        })
    }

    /// `log` of `exp(1/2 (s^T S^-1 s + l)) / sqrt(|S| |D D^T|)`.
    pub fn log_integrand(&self, model: &NonlinearModel, x: &Vector) -> f64 {
        let hx = model.h(x);
        let dinv_h = self.meas_cov.solve_vec(&hx);
        let u = x - &self.anchor;
        let l = self.theta * u.norm_squared() - hx.dot(&dinv_h);
        let s = -(self.gain.transpose() * &u) * self.theta + dinv_h;
        let s_quad = s.dot(&self.s.solve_vec(&s));
        0.5 * (s_quad + l) + self.constant
    }
}

/// Log target density together with the per-step `M̂_t` estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEvaluation {
    pub log_density: f64,
    pub estimates: Vec<NormConstEstimate>,
}

fn check_traj(model: &NonlinearModel, traj: &Trajectory) -> Result<()> {
    if traj.states.len() != traj.observations.len() + 1
        || traj.states.iter().any(|x| x.len() != model.state_dim())
        || traj.observations.iter().any(|y| y.len() != model.obs_dim())
    {
        return Err(Error::DimensionMismatch("trajectory does not match the model".into()));
    }
    Ok(())
}

fn sample_estimate<F>(prior: &GaussianBelief, policy: &AdaptiveR, rng: &mut ChaCha8Rng, log_n: F) -> NormConstEstimate
where
    F: Fn(&Vector) -> f64,
{
    let dim = prior.dim();
    estimate_norm_const(policy, || {
        let x = &prior.mean + prior.cov.lower() * standard_normal_vector(dim, rng);
        log_n(&x)
    })
}

/// Prediction-case target `log pi(Z_N)` given the prediction-resilient
/// trace on the trajectory's own observations. `key` selects the random
/// stream of the `M̂` samples.
pub fn eval_target_p_with_trace(
    model: &NonlinearModel,
    cfg: &ResilientConfig,
    trace: &FilterTrace,
    traj: &Trajectory,
    mh: &MhConfig,
    key: u64,
) -> Result<TargetEvaluation> {
    check_traj(model, traj)?;
    let policy = mh.adaptive_r();
    let per_step: Vec<Result<(f64, NormConstEstimate)>> = (0..trace.steps.len())
        .into_par_iter()
        .map(|t| {
            let step = &trace.steps[t];
            let x = &traj.states[t];
            let y = &traj.observations[t];
            let mut resid = traj.z(t);
            {
                let n = model.state_dim();
                let fx = model.f(x);
                let hx = model.h(x);
                for i in 0..n {
                    resid[i] -= fx[i];
                }
                for i in 0..hx.len() {
                    resid[n + i] -= hx[i];
                }
            }
            let r = SpdMatrix::new(model.joint_noise_cov())?;
            let mut log_pi = r.gaussian_log_pdf(&resid);
            let estimate = if step.theta == 0.0 {
                NormConstEstimate::exact_one()
            } else {
                let tilt = PredictionTilt::from_trace(model, trace, y, &cfg.rule, t)?;
                let dev = &traj.states[t + 1] - &tilt.predictor;
                log_pi += 0.5 * step.theta * dev.norm_squared();
                let mut rng = rng::substream(mh.seed, rng::Stream::NormConst, &[key, t as u64]);
                sample_estimate(&tilt.prior, &policy, &mut rng, |xs| tilt.log_integrand(model, xs))
            };
            Ok((log_pi - estimate.log_value, estimate))
        })
        .collect();
    collect_terms(per_step)
}

/// Update-case target `log pi(Z_N)` given the update-resilient trace.
pub fn eval_target_u_with_trace(
    model: &NonlinearModel,
    trace: &FilterTrace,
    traj: &Trajectory,
    mh: &MhConfig,
    key: u64,
) -> Result<TargetEvaluation> {
    check_traj(model, traj)?;
    let policy = mh.adaptive_r();
    let meas_cov = SpdMatrix::new(model.measurement_cov().clone())?;
    let per_step: Vec<Result<(f64, NormConstEstimate)>> = (0..trace.steps.len())
        .into_par_iter()
        .map(|t| {
            let step = &trace.steps[t];
            let x = &traj.states[t];
            let resid = &traj.observations[t] - model.h(x);
            let mut log_pi = meas_cov.gaussian_log_pdf(&resid);
            let estimate = if step.theta == 0.0 {
                NormConstEstimate::exact_one()
            } else {
                let tilt = UpdateTilt::from_trace(model, trace, t)?;
                let dev = x - &tilt.filtered;
                log_pi += 0.5 * step.theta * dev.norm_squared();
                let mut rng = rng::substream(mh.seed, rng::Stream::NormConst, &[key, t as u64]);
                sample_estimate(&tilt.prior, &policy, &mut rng, |xs| tilt.log_integrand(model, xs))
            };
            Ok((log_pi - estimate.log_value, estimate))
        })
        .collect();
    collect_terms(per_step)
}

fn collect_terms(per_step: Vec<Result<(f64, NormConstEstimate)>>) -> Result<TargetEvaluation> {
    let mut log_density = 0.0;
    let mut estimates = Vec::with_capacity(per_step.len());
    for (t, term) in per_step.into_iter().enumerate() {
        let (lp, est) = term.map_err(|e| e.at_step(t))?;
        log_density += lp;
        estimates.push(est);
    }
    Ok(TargetEvaluation { log_density, estimates })
}

/// Runs the prediction-resilient filter on the trajectory's observations and
/// evaluates the prediction-case target.
pub fn eval_target_logdensity_p(
    model: &NonlinearModel,
    cfg: &ResilientConfig,
    traj: &Trajectory,
    mh: &MhConfig,
    key: u64,
) -> Result<TargetEvaluation> {
    let trace = run_filter(model, LfmKind::Prediction.filter_kind(), &traj.observations, cfg)?;
    eval_target_p_with_trace(model, cfg, &trace, traj, mh, key)
}

/// Runs the update-resilient filter on the trajectory's observations and
/// evaluates the update-case target.
pub fn eval_target_logdensity_u(
    model: &NonlinearModel,
    cfg: &ResilientConfig,
    traj: &Trajectory,
    mh: &MhConfig,
    key: u64,
) -> Result<TargetEvaluation> {
    let trace = run_filter(model, LfmKind::Update.filter_kind(), &traj.observations, cfg)?;
    eval_target_u_with_trace(model, &trace, traj, mh, key)
}
