//! Sigma-point Kalman filters: the standard filter, the single-generation
//! transformation filter (UTF), and the prediction- and update-resilient
//! filters that tilt a covariance inside a KL ball of radius `c_t`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianBelief, NonlinearModel};
use crate::numerics::{bisect, eigenvalues, symmetrize, BisectionSpec, Matrix, SpdMatrix, Vector};
use crate::sigma::{generate, SigmaRule, SigmaSet};

/// `gamma(P, theta)` from the eigenvalues of `P`.
fn gamma_from_eigenvalues(eigs: &Vector, theta: f64) -> Result<f64> {
    let mut sum = 0.0;
    for &lambda in eigs.iter() {
        let tl = theta * lambda;
        let one_minus = 1.0 - tl;
        if !(one_minus > 0.0) {
            return Err(Error::ThetaOutOfDomain { theta });
        }
        sum += (-tl).ln_1p() + tl / one_minus;
    }
    Ok(0.5 * sum)
}

/// `gamma(P, theta) = 1/2 (log det(I - theta P) + tr((I - theta P)^-1 - I))`,
/// the KL divergence between `N(0, (P^-1 - theta I)^-1)` and `N(0, P)`.
pub fn gamma(p: &Matrix, theta: f64) -> Result<f64> {
    if theta == 0.0 {
        return Ok(0.0);
    }
    gamma_from_eigenvalues(&eigenvalues(p), theta)
}

/// Tolerance `c_t` as a function of the time index.
#[derive(Clone)]
pub enum ToleranceSchedule {
    Constant(f64),
    Custom(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

impl ToleranceSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            ToleranceSchedule::Constant(c) => *c,
            ToleranceSchedule::Custom(f) => f(t),
        }
    }
}

impl fmt::Debug for ToleranceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToleranceSchedule::Constant(c) => write!(f, "Constant({c})"),
            ToleranceSchedule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Sigma rule, tolerance schedule and the settings of the `theta` search.
#[derive(Debug, Clone)]
pub struct ResilientConfig {
    pub rule: SigmaRule,
    pub tolerance: ToleranceSchedule,
    /// `theta` is searched on `[0, (1 - shrink) / lambda_max]`.
    pub theta_shrink: f64,
    pub bisection: BisectionSpec,
}

impl ResilientConfig {
    pub const DEFAULT_SHRINK: f64 = 1e-9;

    pub fn new(rule: SigmaRule, c: f64) -> Self {
        ResilientConfig {
            rule,
            tolerance: ToleranceSchedule::Constant(c),
            theta_shrink: Self::DEFAULT_SHRINK,
            bisection: BisectionSpec::default(),
        }
    }

    pub fn with_schedule<F>(rule: SigmaRule, schedule: F) -> Self
    where
        F: Fn(usize) -> f64 + Send + Sync + 'static,
    {
        ResilientConfig {
            tolerance: ToleranceSchedule::Custom(Arc::new(schedule)),
            ..Self::new(rule, 0.0)
        }
    }

    pub fn tolerance_at(&self, t: usize) -> f64 {
        self.tolerance.at(t)
    }
}

/// Solves `gamma(P, theta) = c` by bisection. `c = 0` gives exactly zero.
pub fn solve_theta(p: &Matrix, c: f64, cfg: &ResilientConfig) -> Result<f64> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::Config(format!("tolerance must be finite and >= 0, got {c}")));
    }
    if c == 0.0 {
        return Ok(0.0);
    }
    let eigs = eigenvalues(p);
    let lambda_max = eigs.max();
    if !(lambda_max > 0.0) {
        return Err(Error::NotPositiveDefinite { context: "solve_theta" });
    }
    let upper = (1.0 - cfg.theta_shrink) / lambda_max;
    if gamma_from_eigenvalues(&eigs, upper)? < c {
        return Err(Error::ToleranceUnreachable { tolerance: c });
    }
    let spec = cfg.bisection.with_bracket(0.0, upper);
    bisect(
        |theta| gamma_from_eigenvalues(&eigs, theta).map_or(f64::INFINITY, |g| g - c),
        &spec,
    )
}

/// Least-favorable covariance `(P^-1 - theta I)^-1 = (I - theta P)^-1 P`.
pub fn lf_cov(p: &SpdMatrix, theta: f64) -> Result<SpdMatrix> {
    if theta == 0.0 {
        return Ok(p.clone());
    }
    let n = p.dim();
    let m = Matrix::identity(n, n) - p.matrix() * theta;
    let factor = SpdMatrix::strict(m).map_err(|_| Error::ThetaOutOfDomain { theta })?;
    SpdMatrix::new(symmetrize(&factor.solve(p.matrix())))
}

/// Which recursion [`run_filter`] folds over the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Standard,
    PredictionResilient,
    UpdateResilient,
    Utf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [
        FilterKind::Standard,
        FilterKind::PredictionResilient,
        FilterKind::UpdateResilient,
        FilterKind::Utf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterKind::Standard => "standard",
            FilterKind::PredictionResilient => "prediction_resilient",
            FilterKind::UpdateResilient => "update_resilient",
            FilterKind::Utf => "utf",
        }
    }

    /// Display name in the experiment tables, e.g. `P-UKF` or `CKF`.
    pub fn display_name(&self, rule: &SigmaRule) -> String {
        let family = rule.label().to_ascii_uppercase();
        match self {
            FilterKind::Standard => family,
            FilterKind::PredictionResilient => format!("P-{family}"),
            FilterKind::UpdateResilient => format!("U-{family}"),
            FilterKind::Utf => format!("UTF-{family}"),
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(FilterKind::Standard),
            "prediction_resilient" | "prediction" | "p" => Ok(FilterKind::PredictionResilient),
            "update_resilient" | "update" | "u" => Ok(FilterKind::UpdateResilient),
            "utf" => Ok(FilterKind::Utf),
            other => Err(Error::Config(format!("unknown filter kind '{other}'"))),
        }
    }
}

/// Everything one filter step computes at time `t`.
///
/// `prior` holds `x̂_t` and the covariance the sigma points were drawn
/// from (`P̃_t` for the prediction-resilient filter, `P_t` otherwise).
/// The `lf_*` covariances equal their nominal counterparts for filters that
/// do not tilt that stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub prior: GaussianBelief,
    pub predicted: GaussianBelief,
    pub lf_predicted_cov: SpdMatrix,
    pub updated: GaussianBelief,
    pub lf_updated_cov: SpdMatrix,
    pub gain: Matrix,
    pub theta: f64,
    pub innov_mean: Vector,
    pub innov_cov: SpdMatrix,
    pub cross: Matrix,
}

impl FilterStep {
    /// Belief carried into the next step by a filter of this kind.
    pub fn next_belief(&self, kind: FilterKind) -> GaussianBelief {
        match kind {
            FilterKind::PredictionResilient => GaussianBelief {
                mean: self.predicted.mean.clone(),
                cov: self.lf_predicted_cov.clone(),
            },
            _ => self.predicted.clone(),
        }
    }
}

struct MeasurementUpdate {
    innov_mean: Vector,
    innov_cov: SpdMatrix,
    cross: Matrix,
    gain: Matrix,
    updated: GaussianBelief,
}

fn check_obs(model: &NonlinearModel, y: &Vector) -> Result<()> {
    if y.len() != model.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation has length {} but the model has {} outputs",
            y.len(),
            model.obs_dim()
        )));
    }
    Ok(())
}

fn measurement_stats(model: &NonlinearModel, set: &SigmaSet, center: &Vector) -> Result<(Vector, SpdMatrix, Matrix)> {
    let hs = set.map(|x| model.h(x));
    let m_y = set.weighted_mean(&hs);
    let k_y = SpdMatrix::new(set.weighted_cov(&hs, &m_y) + model.measurement_cov())?;
    let k_xy = set.weighted_cross(&set.points, center, &hs, &m_y);
    Ok((m_y, k_y, k_xy))
}

fn measurement_update(
    model: &NonlinearModel,
    rule: &SigmaRule,
    prior: &GaussianBelief,
    y: &Vector,
) -> Result<MeasurementUpdate> {
    check_obs(model, y)?;
    let set = generate(rule, prior)?;
    let (innov_mean, innov_cov, cross) = measurement_stats(model, &set, &prior.mean)?;
    let gain = innov_cov.solve(&cross.transpose()).transpose();
    let mean = &prior.mean + &gain * (y - &innov_mean);
    let cov = SpdMatrix::new(prior.cov.matrix() - &gain * innov_cov.matrix() * gain.transpose())?;
    Ok(MeasurementUpdate {
        innov_mean,
        innov_cov,
        cross,
        gain,
        updated: GaussianBelief { mean, cov },
    })
}

/// Pushes the sigma points of `belief` through `f` and adds `B B^T`.
fn time_update(model: &NonlinearModel, rule: &SigmaRule, belief: &GaussianBelief) -> Result<GaussianBelief> {
    let set = generate(rule, belief)?;
    let fs = set.map(|x| model.f(x));
    let mean = set.weighted_mean(&fs);
    let cov = SpdMatrix::new(set.weighted_cov(&fs, &mean) + model.process_cov())?;
    Ok(GaussianBelief { mean, cov })
}

/// Standard sigma-point Kalman filter step.
pub fn spkf_step(model: &NonlinearModel, belief: &GaussianBelief, y: &Vector, rule: &SigmaRule) -> Result<FilterStep> {
    let mu = measurement_update(model, rule, belief, y)?;
    let predicted = time_update(model, rule, &mu.updated)?;
    Ok(FilterStep {
        prior: belief.clone(),
        lf_predicted_cov: predicted.cov.clone(),
        predicted,
        lf_updated_cov: mu.updated.cov.clone(),
        updated: mu.updated,
        gain: mu.gain,
        theta: 0.0,
        innov_mean: mu.innov_mean,
        innov_cov: mu.innov_cov,
        cross: mu.cross,
    })
}

/// Prediction-resilient step: the prior is `(x̂_t, P̃_t)`, the predicted
/// covariance is tilted by `theta_t` solving `gamma(P_{t+1}, theta_t) = c_t`.
pub fn prediction_resilient_step(
    model: &NonlinearModel,
    lf_belief: &GaussianBelief,
    y: &Vector,
    cfg: &ResilientConfig,
    t: usize,
) -> Result<FilterStep> {
    let mu = measurement_update(model, &cfg.rule, lf_belief, y)?;
    let predicted = time_update(model, &cfg.rule, &mu.updated)?;
    let theta = solve_theta(predicted.cov.matrix(), cfg.tolerance_at(t), cfg)?;
    let lf_predicted_cov = lf_cov(&predicted.cov, theta)?;
    Ok(FilterStep {
        prior: lf_belief.clone(),
        predicted,
        lf_predicted_cov,
        lf_updated_cov: mu.updated.cov.clone(),
        updated: mu.updated,
        gain: mu.gain,
        theta,
        innov_mean: mu.innov_mean,
        innov_cov: mu.innov_cov,
        cross: mu.cross,
    })
}

/// Update-resilient step: the filtered covariance is tilted by
/// `theta_{t|t}` before the time update.
pub fn update_resilient_step(
    model: &NonlinearModel,
    belief: &GaussianBelief,
    y: &Vector,
    cfg: &ResilientConfig,
    t: usize,
) -> Result<FilterStep> {
    let mu = measurement_update(model, &cfg.rule, belief, y)?;
    let theta = solve_theta(mu.updated.cov.matrix(), cfg.tolerance_at(t), cfg)?;
    let lf_updated_cov = lf_cov(&mu.updated.cov, theta)?;
    let tilted = GaussianBelief {
        mean: mu.updated.mean.clone(),
        cov: lf_updated_cov.clone(),
    };
    let predicted = time_update(model, &cfg.rule, &tilted)?;
    Ok(FilterStep {
        prior: belief.clone(),
        lf_predicted_cov: predicted.cov.clone(),
        predicted,
        updated: mu.updated,
        lf_updated_cov,
        gain: mu.gain,
        theta,
        innov_mean: mu.innov_mean,
        innov_cov: mu.innov_cov,
        cross: mu.cross,
    })
}

/// Gaussian approximation of `z_t = [x_{t+1}; y_t]` given `Y_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDensity {
    pub mean_x: Vector,
    pub mean_y: Vector,
    pub cov_x: Matrix,
    pub cov_y: SpdMatrix,
    pub cross_xy: Matrix,
}

impl JointDensity {
    /// `K̄_{x y} K̄_y^-1`
    pub fn regression_gain(&self) -> Matrix {
        self.cov_y.solve(&self.cross_xy.transpose()).transpose()
    }

    /// Conditional mean and covariance of `x_{t+1}` given `y_t`.
    pub fn predictor(&self, y: &Vector) -> Result<GaussianBelief> {
        let g = self.regression_gain();
        let mean = &self.mean_x + &g * (y - &self.mean_y);
        let cov = SpdMatrix::new(&self.cov_x - &g * self.cross_xy.transpose())?;
        Ok(GaussianBelief { mean, cov })
    }

    /// Joint mean `[m̄_x; m̄_y]`.
    pub fn mean(&self) -> Vector {
        let (n, m) = (self.mean_x.len(), self.mean_y.len());
        let mut out = Vector::zeros(n + m);
        out.rows_mut(0, n).copy_from(&self.mean_x);
        out.rows_mut(n, m).copy_from(&self.mean_y);
        out
    }

    /// Joint covariance `[[K̄_x, K̄_xy], [K̄_yx, K̄_y]]`.
    pub fn cov(&self) -> Matrix {
        let (n, m) = (self.mean_x.len(), self.mean_y.len());
        let mut out = Matrix::zeros(n + m, n + m);
        out.view_mut((0, 0), (n, n)).copy_from(&self.cov_x);
        out.view_mut((0, n), (n, m)).copy_from(&self.cross_xy);
        out.view_mut((n, 0), (m, n)).copy_from(&self.cross_xy.transpose());
        out.view_mut((n, n), (m, m)).copy_from(self.cov_y.matrix());
        out
    }
}

/// One sigma generation at `(x̂_t, P_t)` pushed through both `f` and `h`.
pub fn utf_density(model: &NonlinearModel, belief: &GaussianBelief, rule: &SigmaRule) -> Result<JointDensity> {
    let set = generate(rule, belief)?;
    let fs = set.map(|x| model.f(x));
    let hs = set.map(|x| model.h(x));
    let mean_x = set.weighted_mean(&fs);
    let mean_y = set.weighted_mean(&hs);
    let cov_x = symmetrize(&(set.weighted_cov(&fs, &mean_x) + model.process_cov()));
    let cov_y = SpdMatrix::new(set.weighted_cov(&hs, &mean_y) + model.measurement_cov())?;
    let cross_xy = set.weighted_cross(&fs, &mean_x, &hs, &mean_y);
    Ok(JointDensity {
        mean_x,
        mean_y,
        cov_x,
        cov_y,
        cross_xy,
    })
}

/// Smallest admissible `|1 - sum W_c (h - m̄_y)^T K̄_y^-1 (y - m̄_y)|`.
pub const DENOMINATOR_FLOOR: f64 = 1e-10;

/// Joint density of `z_t` whose conditional predictor reproduces the
/// two-stage sigma-point filter exactly. Depends on `y_t` through the
/// mean of `x_{t+1}`.
pub fn prop1_density(
    model: &NonlinearModel,
    belief: &GaussianBelief,
    y: &Vector,
    rule: &SigmaRule,
) -> Result<JointDensity> {
    check_obs(model, y)?;
    let set = generate(rule, belief)?;
    let hs = set.map(|x| model.h(x));
    let fs = set.map(|x| model.f(x));
    let mean_y = set.weighted_mean(&hs);
    let cov_y = SpdMatrix::new(set.weighted_cov(&hs, &mean_y) + model.measurement_cov())?;
    let k_xy = set.weighted_cross(&set.points, &belief.mean, &hs, &mean_y);
    let delta_gain = cov_y.solve(&k_xy.transpose()).transpose();
    let innov = y - &mean_y;

    let shifted = GaussianBelief {
        mean: &belief.mean + &delta_gain * &innov,
        cov: SpdMatrix::new(belief.cov.matrix() - &delta_gain * cov_y.matrix() * delta_gain.transpose())?,
    };
    let shifted_set = generate(rule, &shifted)?;
    let deltas = shifted_set.map(|x| model.f(x));
    let xi = shifted_set.weighted_mean(&deltas);

    // a_i = W_c (h_i - m̄_y)^T K̄_y^-1 (y - m̄_y)
    let k_inv_innov = cov_y.solve_vec(&innov);
    let coeffs: Vec<f64> = set
        .cov_weights
        .iter()
        .zip(&hs)
        .map(|(w, h)| w * (h - &mean_y).dot(&k_inv_innov))
        .collect();
    let denominator = 1.0 - coeffs.iter().sum::<f64>();
    if denominator.abs() < DENOMINATOR_FLOOR {
        return Err(Error::DegenerateDenominator { value: denominator });
    }
    let mut numerator = xi.clone();
    for (a, f) in coeffs.iter().zip(&fs) {
        numerator.axpy(-a, f, 1.0);
    }
    let mean_x = numerator / denominator;
    let cross_xy = set.weighted_cross(&fs, &mean_x, &hs, &mean_y);
    let spread = shifted_set.weighted_cov(&deltas, &xi);
    let cov_x = symmetrize(
        &(spread + model.process_cov() + &cross_xy * cov_y.solve(&cross_xy.transpose())),
    );
    Ok(JointDensity {
        mean_x,
        mean_y,
        cov_x,
        cov_y,
        cross_xy,
    })
}

/// UTF step: predictor from the single-generation joint density.
pub fn utf_step(model: &NonlinearModel, belief: &GaussianBelief, y: &Vector, rule: &SigmaRule) -> Result<FilterStep> {
    check_obs(model, y)?;
    let joint = utf_density(model, belief, rule)?;
    let predicted = joint.predictor(y)?;
    let mu = measurement_update(model, rule, belief, y)?;
    Ok(FilterStep {
        prior: belief.clone(),
        lf_predicted_cov: predicted.cov.clone(),
        predicted,
        lf_updated_cov: mu.updated.cov.clone(),
        updated: mu.updated,
        gain: mu.gain,
        theta: 0.0,
        innov_mean: mu.innov_mean,
        innov_cov: mu.innov_cov,
        cross: mu.cross,
    })
}

/// Per-step records of one filter run over `y_0 .. y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub kind: FilterKind,
    pub steps: Vec<FilterStep>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Predictions `x̂_0 .. x̂_{N+1}` (the first is the initial mean).
    pub fn predictions(&self) -> Vec<Vector> {
        let mut out: Vec<Vector> = self.steps.iter().map(|s| s.prior.mean.clone()).collect();
        if let Some(last) = self.steps.last() {
            out.push(last.predicted.mean.clone());
        }
        out
    }

    /// Filtered estimates `x̂_{0|0} .. x̂_{N|N}`.
    pub fn filtered(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.updated.mean.clone()).collect()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.theta).collect()
    }

    /// One row per step: `t`, `x̂_t`, `diag(P_t)`, `theta`, `x̂_{t|t}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.steps.first().map_or(0, |s| s.prior.dim());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("xhat_{i}")));
        header.extend((0..n).map(|i| format!("p_{i}{i}")));
        header.push("theta".into());
        header.extend((0..n).map(|i| format!("xfilt_{i}")));
        w.write_record(&header)?;
        for (t, s) in self.steps.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(s.prior.mean.iter().map(|v| v.to_string()));
            row.extend(s.prior.cov.matrix().diagonal().iter().map(|v| v.to_string()));
            row.push(s.theta.to_string());
            row.extend(s.updated.mean.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Folds the chosen step over `y_0 .. y_N`, starting from the model's
/// initial belief.
pub fn run_filter(
    model: &NonlinearModel,
    kind: FilterKind,
    observations: &[Vector],
    cfg: &ResilientConfig,
) -> Result<FilterTrace> {
    run_filter_from(model, kind, model.initial().clone(), observations, cfg)
}

pub fn run_filter_from(
    model: &NonlinearModel,
    kind: FilterKind,
    initial: GaussianBelief,
    observations: &[Vector],
    cfg: &ResilientConfig,
) -> Result<FilterTrace> {
    let mut steps = Vec::with_capacity(observations.len());
    let mut belief = initial;
    for (t, y) in observations.iter().enumerate() {
        let step = match kind {
            FilterKind::Standard => spkf_step(model, &belief, y, &cfg.rule),
            FilterKind::PredictionResilient => prediction_resilient_step(model, &belief, y, cfg, t),
            FilterKind::UpdateResilient => update_resilient_step(model, &belief, y, cfg, t),
            FilterKind::Utf => utf_step(model, &belief, y, &cfg.rule),
        }
        .map_err(|e| e.at_step(t))?;
        belief = step.next_belief(kind);
        steps.push(step);
    }
    Ok(FilterTrace { kind, steps })
}
