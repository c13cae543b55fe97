//! Nominal nonlinear state-space models
//!
//! ```text
//! x_{t+1} = f(x_t) + B v_t
//! y_t     = h(x_t) + D v_t,      v_t ~ N(0, I_{n+m}),  B D^T = 0
//! ```
//!
//! plus Gaussian beliefs, trajectory containers and the three experiment
//! models (the scalar benchmark, the worst-case model and the mass-spring
//! system).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SpdMatrix, Vector};
use crate::rng;

pub type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;

/// Absolute tolerance on `B D^T = 0`.
const CROSS_TOLERANCE: f64 = 1e-12;

/// Mean / covariance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: SpdMatrix,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "belief mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `mean + L w` with `w` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let w = standard_normal_vector(self.dim(), rng);
        &self.mean + self.cov.lower() * w
    }
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `x_0 .. x_{N+1}` and `y_0 .. y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub observations: Vec<Vector>,
}

impl Trajectory {
    pub fn new(states: Vec<Vector>, observations: Vec<Vector>) -> Result<Self> {
        if states.len() != observations.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} states but {} observations",
                states.len(),
                observations.len()
            )));
        }
        Ok(Trajectory {
            states,
            observations,
        })
    }

    /// Horizon `N`; the trajectory holds `N + 1` observations.
    pub fn horizon(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    /// `z_t = [x_{t+1}; y_t]`
    pub fn z(&self, t: usize) -> Vector {
        let x = &self.states[t + 1];
        let y = &self.observations[t];
        let mut z = Vector::zeros(x.len() + y.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), y.len()).copy_from(y);
        z
    }
}

/// Nominal model with drift `f`, observation map `h`, noise gains and the
/// initial belief `x_0 ~ N(x̂_0, P̃_0)`.
#[derive(Clone)]
pub struct NonlinearModel {
    state_dim: usize,
    obs_dim: usize,
    drift: VectorFn,
    observation: VectorFn,
    b: Matrix,
    d: Matrix,
    bbt: Matrix,
    ddt: Matrix,
    initial: GaussianBelief,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("state_dim", &self.state_dim)
            .field("obs_dim", &self.obs_dim)
            .field("b", &self.b)
            .field("d", &self.d)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl NonlinearModel {
    /// Checks shapes and `B D^T = 0`. Rank is checked separately by
    /// [`NonlinearModel::check_full_row_rank`] since noise-free models are
    /// legitimate for simulation.
    pub fn new(
        drift: VectorFn,
        observation: VectorFn,
        b: Matrix,
        d: Matrix,
        initial: GaussianBelief,
    ) -> Result<Self> {
        let n = b.nrows();
        let m = d.nrows();
        if b.ncols() != n + m || d.ncols() != n + m {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{} and D is {}x{}, both need n+m = {} columns",
                n,
                b.ncols(),
                m,
                d.ncols(),
                n + m
            )));
        }
        if initial.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "initial belief has dimension {} but the state has {}",
                initial.dim(),
                n
            )));
        }
        let cross = &b * d.transpose();
        if cross.amax() > CROSS_TOLERANCE {
            return Err(Error::Config(format!(
                "B D^T must vanish, max entry is {:e}",
                cross.amax()
            )));
        }
        let bbt = &b * b.transpose();
        let ddt = &d * d.transpose();
        Ok(NonlinearModel {
            state_dim: n,
            obs_dim: m,
            drift,
            observation,
            b,
            d,
            bbt,
            ddt,
            initial,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.state_dim + self.obs_dim
    }

    pub fn f(&self, x: &Vector) -> Vector {
        (self.drift)(x)
    }

    pub fn h(&self, x: &Vector) -> Vector {
        (self.observation)(x)
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn d(&self) -> &Matrix {
        &self.d
    }

    /// `B B^T`
    pub fn process_cov(&self) -> &Matrix {
        &self.bbt
    }

    /// `D D^T`
    pub fn measurement_cov(&self) -> &Matrix {
        &self.ddt
    }

    pub fn initial(&self) -> &GaussianBelief {
        &self.initial
    }

    /// Copy of the model with a different initial belief.
    pub fn with_initial(&self, initial: GaussianBelief) -> Result<Self> {
        NonlinearModel::new(
            self.drift.clone(),
            self.observation.clone(),
            self.b.clone(),
            self.d.clone(),
            initial,
        )
    }

    /// `[B; D]`, the square map from `v_t` to the stacked noise of `z_t`.
    pub fn stacked_noise_gain(&self) -> Matrix {
        let k = self.noise_dim();
        let mut g = Matrix::zeros(k, k);
        g.rows_mut(0, self.state_dim).copy_from(&self.b);
        g.rows_mut(self.state_dim, self.obs_dim).copy_from(&self.d);
        g
    }

    /// `R = blockdiag(B B^T, D D^T)`
    pub fn joint_noise_cov(&self) -> Matrix {
        let g = self.stacked_noise_gain();
        &g * g.transpose()
    }

    /// Checks that B and D have full row rank: every singular value must
    /// exceed `1e-10` times the largest one.
    pub fn check_full_row_rank(&self) -> Result<()> {
        for (name, mat) in [("B", &self.b), ("D", &self.d)] {
            let sv = mat.clone().svd(false, false).singular_values;
            let max = sv.max();
            if sv.len() < mat.nrows() || !(max > 0.0) || sv.min() <= 1e-10 * max {
                return Err(Error::Config(format!("{name} is not full row rank")));
            }
        }
        Ok(())
    }

    /// Simulates `N + 1` steps of the nominal model. One noise draw `v_t`
    /// drives both equations at each step.
    pub fn simulate(&self, horizon: usize, seed: u64) -> Trajectory {
        let mut rng = rng::stream(seed, rng::Stream::Nominal);
        self.simulate_with(horizon, &mut rng)
    }

    pub fn simulate_with(&self, horizon: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let mut states = Vec::with_capacity(horizon + 2);
        let mut observations = Vec::with_capacity(horizon + 1);
        let mut x = self.initial.sample(rng);
        for _ in 0..=horizon {
            let v = standard_normal_vector(self.noise_dim(), rng);
            let y = self.h(&x) + &self.d * &v;
            let next = self.f(&x) + &self.b * &v;
            states.push(x);
            observations.push(y);
            x = next;
        }
        states.push(x);
        Trajectory {
            states,
            observations,
        }
    }
}

/// Simulates the nominal model over `horizon` steps with the given seed.
pub fn simulate_nominal(model: &NonlinearModel, horizon: usize, seed: u64) -> Trajectory {
    model.simulate(horizon, seed)
}

/// Scalar benchmark model:
/// `x' = x/2 + 2.5 x / (x^2 + 1) + 0.5 v1`, `y = x^2 / 20 + 0.1 v2`,
/// `x_0 ~ N(0.1, 2)`.
pub fn example1_model() -> NonlinearModel {
    let f: VectorFn = Arc::new(|x: &Vector| {
        let v = x[0];
        Vector::from_element(1, 0.5 * v + 2.5 * v / (v * v + 1.0))
    });
    let h: VectorFn = Arc::new(|x: &Vector| Vector::from_element(1, x[0] * x[0] / 20.0));
    let b = Matrix::from_row_slice(1, 2, &[0.5, 0.0]);
    let d = Matrix::from_row_slice(1, 2, &[0.0, 0.1]);
    let initial = GaussianBelief::new(
        Vector::from_element(1, 0.1),
        SpdMatrix::from_diagonal(&[2.0]).expect("positive"),
    )
    .expect("consistent dimensions");
    NonlinearModel::new(f, h, b, d, initial).expect("valid benchmark model")
}

/// Second component of the worst-case drift. Only the first component is
/// printed for this benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorstCaseDrift {
    /// `x_2' = x_2`: the second state integrates its noise. The
    /// least-favorable chains barely move under this reading.
    Hold,
    /// `x_2' = 0`: the second state is white noise.
    #[default]
    Zero,
}

impl FromStr for WorstCaseDrift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hold" => Ok(WorstCaseDrift::Hold),
            "zero" => Ok(WorstCaseDrift::Zero),
            other => Err(Error::Config(format!("unknown worst-case drift '{other}'"))),
        }
    }
}

/// Two-state worst-case benchmark with the default second drift component.
/// The observation noise row `[0 0 1]` is used as `D`.
pub fn worstcase_model() -> NonlinearModel {
    worstcase_model_with(WorstCaseDrift::default())
}

pub fn worstcase_model_with(drift: WorstCaseDrift) -> NonlinearModel {
    let f: VectorFn = Arc::new(move |x: &Vector| {
        let (x1, x2) = (x[0], x[1]);
        let second = match drift {
            WorstCaseDrift::Hold => x2,
            WorstCaseDrift::Zero => 0.0,
        };
        Vector::from_column_slice(&[0.1 * x1 + x2 + (0.1 * x2).cos() - 1.0, second])
    });
    let h: VectorFn = Arc::new(|x: &Vector| {
        let (x1, x2) = (x[0], x[1]);
        Vector::from_element(1, x1 - x1 * x1 - x2 + x2 * x2)
    });
    let b = Matrix::from_row_slice(2, 3, &[1.40, 0.014, 0.0, 0.0, 1.40, 0.0]);
    let d = Matrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
    let initial = GaussianBelief::new(
        Vector::zeros(2),
        SpdMatrix::from_diagonal(&[1e-3, 1e-3]).expect("positive"),
    )
    .expect("consistent dimensions");
    NonlinearModel::new(f, h, b, d, initial).expect("valid worst-case model")
}

/// Physical parameters of the hardening mass-spring system with friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MassSpringParams {
    /// mass [kg]
    pub mass: f64,
    /// spring constant [N/m]
    pub stiffness: f64,
    /// viscous friction constant [Ns/m]
    pub viscous: f64,
    /// hardening coefficient [1/m]
    pub hardening: f64,
    pub mu_kinetic: f64,
    pub mu_static: f64,
    /// [m/s^2]
    pub gravity: f64,
    /// sampling time [s]
    pub sample_time: f64,
    /// external force variance [N^2]
    pub force_variance: f64,
    /// measurement noise gain [m]
    pub meas_noise: f64,
    /// displacement noise scale, keeps `B B^T` invertible
    pub epsilon: f64,
    pub initial_mean: [f64; 2],
    pub initial_var: f64,
}

impl Default for MassSpringParams {
    fn default() -> Self {
        MassSpringParams {
            mass: 1.0,
            stiffness: 10.0,
            viscous: 0.5,
            hardening: 0.03,
            mu_kinetic: 0.6,
            mu_static: 0.5,
            gravity: 9.81,
            sample_time: 0.1,
            force_variance: 0.25,
            meas_noise: 1.0,
            epsilon: 1e-8,
            initial_mean: [3.0, 0.0],
            initial_var: 0.1,
        }
    }
}

/// Velocities below this magnitude count as standing still.
pub const STANDSTILL_VELOCITY: f64 = 1e-9;

impl MassSpringParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("viscous", self.viscous),
            ("mu_kinetic", self.mu_kinetic),
            ("mu_static", self.mu_static),
            ("gravity", self.gravity),
            ("sample_time", self.sample_time),
            ("force_variance", self.force_variance),
            ("meas_noise", self.meas_noise),
            ("initial_var", self.initial_var),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.epsilon >= 0.0) || !(self.hardening >= 0.0) {
            return Err(Error::Config(
                "epsilon and hardening must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Piecewise Coulomb / static friction term `eta(p, s)`.
    pub fn friction_eta(&self, p: f64, s: f64) -> f64 {
        let weight = self.mass * self.gravity;
        if s.abs() >= STANDSTILL_VELOCITY {
            self.mu_kinetic * weight * s.signum()
        } else if p.abs() <= self.mu_static * weight / self.stiffness {
            -self.stiffness * p
        } else {
            -self.mu_static * weight * p.signum()
        }
    }

    /// `F_f = alpha s + eta`
    pub fn friction_force(&self, p: f64, s: f64) -> f64 {
        self.viscous * s + self.friction_eta(p, s)
    }

    /// Hardening spring `F_s = k p + k a^2 p^3`.
    pub fn spring_force(&self, p: f64) -> f64 {
        self.stiffness * p + self.stiffness * self.hardening * self.hardening * p * p * p
    }

    pub fn drift(&self, p: f64, s: f64) -> [f64; 2] {
        let ts = self.sample_time;
        let accel = (-self.friction_force(p, s) - self.spring_force(p)) / self.mass;
        [p + ts * s, s + ts * accel]
    }
}

/// Discretized mass-spring model with state `[p, s]` and displacement
/// readout.
pub fn mass_spring_model(params: MassSpringParams) -> Result<NonlinearModel> {
    params.validate()?;
    let f: VectorFn = Arc::new(move |x: &Vector| {
        let [p, s] = params.drift(x[0], x[1]);
        Vector::from_column_slice(&[p, s])
    });
    let h: VectorFn = Arc::new(|x: &Vector| Vector::from_element(1, x[0]));
    let ts = params.sample_time;
    let b = Matrix::from_row_slice(
        2,
        3,
        &[
            ts * params.epsilon,
            0.0,
            0.0,
            0.0,
            ts * params.force_variance.sqrt() / params.mass,
            0.0,
        ],
    );
    let d = Matrix::from_row_slice(1, 3, &[0.0, 0.0, params.meas_noise]);
    let initial = GaussianBelief::new(
        Vector::from_column_slice(&params.initial_mean),
        SpdMatrix::from_diagonal(&[params.initial_var, params.initial_var])?,
    )?;
    NonlinearModel::new(f, h, b, d, initial)
}

/// Builds a model from an affine drift `x -> A x` and readout `x -> C x`.
pub fn linear_model(
    a: Matrix,
    c: Matrix,
    b: Matrix,
    d: Matrix,
    initial: GaussianBelief,
) -> Result<NonlinearModel> {
    if a.nrows() != a.ncols() || c.ncols() != a.ncols() {
        return Err(Error::DimensionMismatch("linear model shapes".into()));
    }
    let f: VectorFn = Arc::new(move |x: &Vector| &a * x);
    let h: VectorFn = Arc::new(move |x: &Vector| &c * x);
    NonlinearModel::new(f, h, b, d, initial)
}
