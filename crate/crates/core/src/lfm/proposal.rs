//! Proposal models for the least-favorable simulator.
//!
//! Both proposals linearize the nominal model along a resilient filter run
//! on the conditioning observations, run a backward sweep for `Omega^-1`
//! and a forward Lyapunov sweep for the error covariance, and then use the
//! resulting per-step Gaussian noise around `[f(x_t); h(x_t)]`.
//!
//! The per-step noise is drawn from its marginal law (`e_t ~ N(0, Pi_e)`
//! independently at every step), so the density that is sampled is exactly
//! the density [`eval_proposal_logdensity`] returns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterKind, FilterTrace, ResilientConfig};
use crate::model::{standard_normal_vector, NonlinearModel, Trajectory};
use crate::numerics::{cholesky_lower, symmetrize, Matrix, SpdMatrix, Vector};
use crate::rng;

/// Central finite-difference Jacobian of `g` at `x`, step
/// `1e-6 * max(1, |x_i|)` per coordinate.
pub fn numerical_jacobian<G>(g: G, x: &Vector) -> Result<Matrix>
where
    G: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let mut columns: Vec<Vector> = Vec::with_capacity(n);
    let mut probe = x.clone();
    for i in 0..n {
        let step = 1e-6 * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let plus = g(&probe);
        probe[i] = x[i] - step;
        let minus = g(&probe);
        probe[i] = x[i];
        columns.push((plus - minus) / (2.0 * step));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let jac = Matrix::from_fn(rows, n, |r, c| columns[c][r]);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDerivative);
    }
    Ok(jac)
}

/// `A = df/dx` at `x_f` and `C = dh/dx` at `x_h`.
pub fn jacobians(model: &NonlinearModel, x_f: &Vector, x_h: &Vector) -> Result<(Matrix, Matrix)> {
    let a = numerical_jacobian(|x| model.f(x), x_f)?;
    let c = numerical_jacobian(|x| model.h(x), x_h)?;
    Ok((a, c))
}

/// Which least-favorable model the simulator targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LfmKind {
    Prediction,
    Update,
}

impl LfmKind {
    pub fn filter_kind(&self) -> FilterKind {
        match self {
            LfmKind::Prediction => FilterKind::PredictionResilient,
            LfmKind::Update => FilterKind::UpdateResilient,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LfmKind::Prediction => "prediction",
            LfmKind::Update => "update",
        }
    }
}

/// Risk parameter paired with `Omega^-1_{t+1}` in the update-case weight
/// `W = theta I + Omega^-1_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateWeighting {
    /// `theta_{t|t}`, the same pairing as in the `Omega` recursion. At the
    /// last step this makes the proposal's measurement covariance agree
    /// with the tilted target exactly in the linear case.
    #[default]
    Current,
    /// `theta_{t+1|t+1}`, with zero after the horizon.
    Next,
}

/// Per-step matrices of the prediction-case proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalStepP {
    /// `df/dx` at `x̂_{t|t}`.
    pub a: Matrix,
    /// `dh/dx` at `x̂_t`.
    pub c: Matrix,
    /// `f(x̂_{t|t}) - A x̂_{t|t}`
    pub a_offset: Vector,
    /// `h(x̂_t) - C x̂_t`
    pub b_offset: Vector,
    /// `G_t = A_t L_t`
    pub g: Matrix,
    pub h: Matrix,
    pub o: Matrix,
    /// Lower Cholesky factor of `O_t`.
    pub f: Matrix,
    pub theta: f64,
    /// Joint covariance of `[x_t - x̂_t; e_t]`.
    pub pi: Matrix,
    pub pi_e: Matrix,
    /// Covariance `H Pi_e H^T + O` of the stacked noise `H e + F eps`.
    pub noise_cov: SpdMatrix,
    /// `[B; D] (H Pi_e H^T + O) [B; D]^T`
    pub r_l: SpdMatrix,
}

/// Prediction-case proposal over `t = 0 .. N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalModelP {
    pub steps: Vec<ProposalStepP>,
    /// `Omega^-1_0 .. Omega^-1_{N+1}`, the last one zero.
    pub omega_inv: Vec<Matrix>,
}

/// Per-step matrices of the update-case proposal. `F_t`, `Delta_t`,
/// `Lambda_t` and `O_t` act on whitened measurements `chol(DD^T)^-1 y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalStepU {
    pub a: Matrix,
    pub c: Matrix,
    pub b_offset: Vector,
    pub gain: Matrix,
    pub delta: Matrix,
    pub lambda: Matrix,
    pub o: Matrix,
    pub f: Matrix,
    /// Lower Cholesky factor of `O_t`.
    pub upsilon: Matrix,
    pub w: Matrix,
    pub gamma: Matrix,
    pub x: Matrix,
    pub theta: f64,
    /// Covariance of `[., e_t, B v_t]`.
    pub pi: Matrix,
    pub pi_e: Matrix,
    /// Measurement noise covariance of the proposal, in original units.
    pub q_l: SpdMatrix,
}

/// Update-case proposal over `t = 0 .. N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalModelU {
    pub steps: Vec<ProposalStepU>,
    /// `Omega^-1_0 .. Omega^-1_{N+1}`. Index 0 is never used and left at
    /// zero since it would need a Jacobian before the first step.
    pub omega_inv: Vec<Matrix>,
    /// `blockdiag(B B^T, I_m)`
    pub xi: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalModel {
    Prediction(ProposalModelP),
    Update(ProposalModelU),
}

impl ProposalModel {
    pub fn horizon(&self) -> usize {
        let len = match self {
            ProposalModel::Prediction(p) => p.steps.len(),
            ProposalModel::Update(u) => u.steps.len(),
        };
        len.saturating_sub(1)
    }

    pub fn kind(&self) -> LfmKind {
        match self {
            ProposalModel::Prediction(_) => LfmKind::Prediction,
            ProposalModel::Update(_) => LfmKind::Update,
        }
    }
}

fn block2(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Matrix {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    let mut out = Matrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a);
    out.view_mut((0, c1), (r1, c2)).copy_from(b);
    out.view_mut((r1, 0), (r2, c1)).copy_from(c);
    out.view_mut((r1, c1), (r2, c2)).copy_from(d);
    out
}

fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Inverse of `m` through a plain Cholesky factorization, or `None` when
/// `m` is not positive definite.
fn strict_inverse(m: &Matrix) -> Option<(SpdMatrix, Matrix)> {
    let spd = SpdMatrix::strict(m.clone()).ok()?;
    let inv = symmetrize(&spd.inverse());
    Some((spd, inv))
}

fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Builds the prediction-case proposal from a prediction-resilient filter
/// run on `observations`.
pub fn build_proposal_p(model: &NonlinearModel, observations: &[Vector], cfg: &ResilientConfig) -> Result<ProposalModelP> {
    let trace = run_filter(model, FilterKind::PredictionResilient, observations, cfg)?;
    build_proposal_p_from_trace(model, &trace)
}

pub fn build_proposal_p_from_trace(model: &NonlinearModel, trace: &FilterTrace) -> Result<ProposalModelP> {
    let n = model.state_dim();
    let k = model.noise_dim();
    let len = trace.steps.len();
    if len == 0 {
        return Err(Error::DimensionMismatch("proposal needs at least one observation".into()));
    }
    let b = model.b();
    let d = model.d();

    struct Lin {
        a: Matrix,
        c: Matrix,
        a_offset: Vector,
        b_offset: Vector,
        g: Matrix,
        theta: f64,
    }
    let mut lins = Vec::with_capacity(len);
    for (t, step) in trace.steps.iter().enumerate() {
        let x_filt = &step.updated.mean;
        let x_pred = &step.prior.mean;
        let (a, c) = jacobians(model, x_filt, x_pred).map_err(|e| e.at_step(t))?;
        let a_offset = model.f(x_filt) - &a * x_filt;
        let b_offset = model.h(x_pred) - &c * x_pred;
        let g = &a * &step.gain;
        lins.push(Lin {
            a,
            c,
            a_offset,
            b_offset,
            g,
            theta: step.theta,
        });
    }

    // backward sweep
    let mut omega_inv = vec![Matrix::zeros(n, n); len + 1];
    let mut hs = vec![Matrix::zeros(k, n); len];
    let mut os = vec![Matrix::zeros(k, k); len];
    for t in (0..len).rev() {
        let lin = &lins[t];
        let w = &omega_inv[t + 1] + Matrix::identity(n, n) * lin.theta;
        let v = b - &lin.g * d;
        let closed = &lin.a - &lin.g * &lin.c;
        let o_inv = Matrix::identity(k, k) - v.transpose() * &w * &v;
        let (o_inv_spd, o) = strict_inverse(&o_inv).ok_or(Error::ONotPositiveDefinite { t })?;
        let h = &o * v.transpose() * &w * &closed;
        let next = symmetrize(&(closed.transpose() * &w * &closed + h.transpose() * o_inv_spd.matrix() * &h));
        if !all_finite(&next) {
            return Err(Error::OmegaSingular { t });
        }
        omega_inv[t] = next;
        hs[t] = h;
        os[t] = o;
    }

    // forward Lyapunov sweep
    let p0 = model.initial().cov.matrix();
    let mut pi = block2(p0, p0, p0, p0);
    let bd = model.stacked_noise_gain();
    let mut steps = Vec::with_capacity(len);
    for (t, lin) in lins.into_iter().enumerate() {
        let h = std::mem::replace(&mut hs[t], Matrix::zeros(0, 0));
        let o = std::mem::replace(&mut os[t], Matrix::zeros(0, 0));
        let f = cholesky_lower(&o).map_err(|_| Error::ONotPositiveDefinite { t })?;
        let pi_e = pi.view((n, n), (n, n)).into_owned();
        let noise_cov =
            SpdMatrix::new(&h * &pi_e * h.transpose() + &o).map_err(|_| Error::CovNotPositiveDefinite { t })?;
        let r_l =
            SpdMatrix::new(&bd * noise_cov.matrix() * bd.transpose()).map_err(|_| Error::CovNotPositiveDefinite { t })?;

        let v = b - &lin.g * d;
        let closed = &lin.a - &lin.g * &lin.c;
        let vh = &v * &h;
        let gamma = block2(&closed, &vh, &Matrix::zeros(n, n), &(&closed + &vh));
        let vf = &v * &f;
        let drive = vstack(&vf, &vf);
        let next_pi = symmetrize(&(&gamma * &pi * gamma.transpose() + &drive * drive.transpose()));

        steps.push(ProposalStepP {
            a: lin.a,
            c: lin.c,
            a_offset: lin.a_offset,
            b_offset: lin.b_offset,
            g: lin.g,
            h,
            o,
            f,
            theta: lin.theta,
            pi,
            pi_e,
            noise_cov,
            r_l,
        });
        pi = next_pi;
    }
    Ok(ProposalModelP { steps, omega_inv })
}

/// Builds the update-case proposal from an update-resilient filter run on
/// `observations`.
pub fn build_proposal_u(
    model: &NonlinearModel,
    observations: &[Vector],
    cfg: &ResilientConfig,
    weighting: UpdateWeighting,
) -> Result<ProposalModelU> {
    let trace = run_filter(model, FilterKind::UpdateResilient, observations, cfg)?;
    build_proposal_u_from_trace(model, &trace, weighting)
}

pub fn build_proposal_u_from_trace(
    model: &NonlinearModel,
    trace: &FilterTrace,
    weighting: UpdateWeighting,
) -> Result<ProposalModelU> {
    let n = model.state_dim();
    let m = model.obs_dim();
    let len = trace.steps.len();
    if len == 0 {
        return Err(Error::DimensionMismatch("proposal needs at least one observation".into()));
    }
    let bbt = model.process_cov();
    let root_d = cholesky_lower(model.measurement_cov())?;
    let eye_n = Matrix::identity(n, n);
    let eye_m = Matrix::identity(m, m);

    let mut a_s = Vec::with_capacity(len);
    let mut c_s = Vec::with_capacity(len);
    let mut offsets = Vec::with_capacity(len);
    for (t, step) in trace.steps.iter().enumerate() {
        let x_pred = &step.prior.mean;
        let (a, c) = jacobians(model, &step.updated.mean, x_pred).map_err(|e| e.at_step(t))?;
        offsets.push(model.h(x_pred) - &c * x_pred);
        a_s.push(a);
        c_s.push(c);
    }
    let thetas: Vec<f64> = trace.steps.iter().map(|s| s.theta).collect();
    let gains: Vec<Matrix> = trace.steps.iter().map(|s| s.gain.clone()).collect();
    // gain acting on whitened innovations
    let wgains: Vec<Matrix> = gains.iter().map(|l| l * &root_d).collect();

    let mut omega_inv = vec![Matrix::zeros(n, n); len + 1];
    let mut os = vec![Matrix::zeros(m, m); len];
    let mut fs = vec![Matrix::zeros(m, n); len];
    let mut ws = vec![Matrix::zeros(n, n); len];
    for t in (0..len).rev() {
        let theta_w = match weighting {
            UpdateWeighting::Current => thetas[t],
            UpdateWeighting::Next => thetas.get(t + 1).copied().unwrap_or(0.0),
        };
        let w = &omega_inv[t + 1] + &eye_n * theta_w;
        let lw = &wgains[t];
        let o_inv = &eye_m - lw.transpose() * &w * lw;
        let (_, o) = strict_inverse(&o_inv).ok_or(Error::ONotPositiveDefinite { t })?;
        let resid = &eye_n - &gains[t] * &c_s[t];
        let f = -(&o * lw.transpose() * &w * &resid);
        if t >= 1 {
            let a_prev = &a_s[t - 1];
            let delta = &resid * a_prev;
            let tilt = &omega_inv[t + 1] + &eye_n * thetas[t];
            let fa = &f * a_prev;
            let next = symmetrize(&(fa.transpose() * &o * &fa + delta.transpose() * tilt * &delta));
            if !all_finite(&next) {
                return Err(Error::OmegaSingular { t });
            }
            omega_inv[t] = next;
        }
        os[t] = o;
        fs[t] = f;
        ws[t] = w;
    }

    let mut xi = Matrix::zeros(n + m, n + m);
    xi.view_mut((0, 0), (n, n)).copy_from(bbt);
    xi.view_mut((n, n), (m, m)).copy_from(&eye_m);

    // e_{-1} = 0 and v_{-1} = 0
    let mut pi = Matrix::zeros(3 * n, 3 * n);
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let o = std::mem::replace(&mut os[t], Matrix::zeros(0, 0));
        let f = std::mem::replace(&mut fs[t], Matrix::zeros(0, 0));
        let w = std::mem::replace(&mut ws[t], Matrix::zeros(0, 0));
        let upsilon = cholesky_lower(&o).map_err(|_| Error::ONotPositiveDefinite { t })?;
        let lw = &wgains[t];
        let resid = &eye_n - &gains[t] * &c_s[t];
        let lambda = &resid - lw * &f;
        let (delta, lfa) = if t >= 1 {
            let a_prev = &a_s[t - 1];
            (&resid * a_prev, lw * &f * a_prev)
        } else {
            (Matrix::zeros(n, n), Matrix::zeros(n, n))
        };
        let mut gamma = Matrix::zeros(3 * n, 3 * n);
        gamma.view_mut((0, 0), (n, n)).copy_from(&delta);
        gamma.view_mut((0, n), (n, n)).copy_from(&(-&lfa));
        gamma.view_mut((0, 2 * n), (n, n)).copy_from(&lambda);
        gamma.view_mut((n, n), (n, n)).copy_from(&(&delta - &lfa));
        gamma.view_mut((n, 2 * n), (n, n)).copy_from(&lambda);
        let lu = -(lw * &upsilon);
        let mut x = Matrix::zeros(3 * n, n + m);
        x.view_mut((0, n), (n, m)).copy_from(&lu);
        x.view_mut((n, n), (n, m)).copy_from(&lu);
        // carries B v_t into the next step
        x.view_mut((2 * n, 0), (n, n)).copy_from(&eye_n);

        let prev_pi_e = pi.view((n, n), (n, n)).into_owned();
        let q_white = if t >= 1 {
            let fa = &f * &a_s[t - 1];
            &fa * &prev_pi_e * fa.transpose() + &f * bbt * f.transpose() + &o
        } else {
            o.clone()
        };
        let q_l = SpdMatrix::new(&root_d * q_white * root_d.transpose())
            .map_err(|_| Error::CovNotPositiveDefinite { t })?;

        pi = symmetrize(&(&gamma * &pi * gamma.transpose() + &x * &xi * x.transpose()));
        let pi_e = pi.view((n, n), (n, n)).into_owned();
        steps.push(ProposalStepU {
            a: a_s[t].clone(),
            c: c_s[t].clone(),
            b_offset: offsets[t].clone(),
            gain: gains[t].clone(),
            delta,
            lambda,
            o,
            f,
            upsilon,
            w,
            gamma,
            x,
            theta: thetas[t],
            pi: pi.clone(),
            pi_e,
            q_l,
        });
    }
    Ok(ProposalModelU { steps, omega_inv, xi })
}

/// Builds the proposal for `kind` from a resilient filter trace.
pub fn build_proposal_from_trace(
    model: &NonlinearModel,
    trace: &FilterTrace,
    kind: LfmKind,
    weighting: UpdateWeighting,
) -> Result<ProposalModel> {
    match kind {
        LfmKind::Prediction => build_proposal_p_from_trace(model, trace).map(ProposalModel::Prediction),
        LfmKind::Update => build_proposal_u_from_trace(model, trace, weighting).map(ProposalModel::Update),
    }
}

impl ProposalModelP {
    /// `H = 0`, `F = I`, `Pi = 0`: sampling reduces to the nominal model.
    pub fn nominal(model: &NonlinearModel, horizon: usize) -> Result<Self> {
        let n = model.state_dim();
        let m = model.obs_dim();
        let k = model.noise_dim();
        let bd = model.stacked_noise_gain();
        let r_l = SpdMatrix::new(&bd * bd.transpose())?;
        let step = ProposalStepP {
            a: Matrix::zeros(n, n),
            c: Matrix::zeros(m, n),
            a_offset: Vector::zeros(n),
            b_offset: Vector::zeros(m),
            g: Matrix::zeros(n, m),
            h: Matrix::zeros(k, n),
            o: Matrix::identity(k, k),
            f: Matrix::identity(k, k),
            theta: 0.0,
            pi: Matrix::zeros(2 * n, 2 * n),
            pi_e: Matrix::zeros(n, n),
            noise_cov: SpdMatrix::identity(k),
            r_l,
        };
        Ok(ProposalModelP {
            steps: vec![step; horizon + 1],
            omega_inv: vec![Matrix::zeros(n, n); horizon + 2],
        })
    }
}

/// Draws a trajectory from the proposal with the given seed.
pub fn sample_proposal(pm: &ProposalModel, model: &NonlinearModel, seed: u64) -> Trajectory {
    let mut rng = rng::stream(seed, rng::Stream::ProposalNoise);
    sample_proposal_with(pm, model, &mut rng)
}

/// Draws `x_0 ~ N(x̂_0, P̃_0)` and then the proposal noise step by step.
/// With the nominal prediction proposal this consumes the generator
/// exactly like [`NonlinearModel::simulate_with`].
pub fn sample_proposal_with(pm: &ProposalModel, model: &NonlinearModel, rng: &mut ChaCha8Rng) -> Trajectory {
    let horizon = pm.horizon();
    let mut states = Vec::with_capacity(horizon + 2);
    let mut observations = Vec::with_capacity(horizon + 1);
    let mut x = model.initial().sample(rng);
    match pm {
        ProposalModel::Prediction(p) => {
            for step in &p.steps {
                let eps = standard_normal_vector(model.noise_dim(), rng);
                let w = step.noise_cov.lower() * eps;
                let y = model.h(&x) + model.d() * &w;
                let next = model.f(&x) + model.b() * &w;
                states.push(x);
                observations.push(y);
                x = next;
            }
        }
        ProposalModel::Update(u) => {
            for step in &u.steps {
                let v = standard_normal_vector(model.noise_dim(), rng);
                let upsilon = standard_normal_vector(model.obs_dim(), rng);
                let y = model.h(&x) + step.q_l.lower() * upsilon;
                let next = model.f(&x) + model.b() * &v;
                states.push(x);
                observations.push(y);
                x = next;
            }
        }
    }
    states.push(x);
    Trajectory {
        states,
        observations,
    }
}

fn check_horizon(pm: &ProposalModel, traj: &Trajectory) -> Result<()> {
    if traj.observations.len() != pm.horizon() + 1 || traj.states.len() != pm.horizon() + 2 {
        return Err(Error::DimensionMismatch(format!(
            "trajectory horizon {} does not match proposal horizon {}",
            traj.horizon(),
            pm.horizon()
        )));
    }
    Ok(())
}

/// `log q(Z_N | Y^k_N)` without the initial density: the sum of
/// `log N(z_t; [f(x_t); h(x_t)], R^L_t)` in the prediction case and of
/// `log N(y_t; h(x_t), Q^L_t)` in the update case.
pub fn eval_proposal_logdensity(pm: &ProposalModel, model: &NonlinearModel, traj: &Trajectory) -> Result<f64> {
    check_horizon(pm, traj)?;
    let n = model.state_dim();
    let m = model.obs_dim();
    let mut total = 0.0;
    match pm {
        ProposalModel::Prediction(p) => {
            let mut resid = Vector::zeros(n + m);
            for (t, step) in p.steps.iter().enumerate() {
                let x = &traj.states[t];
                resid.rows_mut(0, n).copy_from(&(&traj.states[t + 1] - model.f(x)));
                resid.rows_mut(n, m).copy_from(&(&traj.observations[t] - model.h(x)));
                total += step.r_l.gaussian_log_pdf(&resid);
            }
        }
        ProposalModel::Update(u) => {
            for (t, step) in u.steps.iter().enumerate() {
                let resid = &traj.observations[t] - model.h(&traj.states[t]);
                total += step.q_l.gaussian_log_pdf(&resid);
            }
        }
    }
    Ok(total)
}

/// Uniform draw in `[0, 1)` used by the accept step.
pub(crate) fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}
