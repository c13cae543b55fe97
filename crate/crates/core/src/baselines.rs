//! Bootstrap particle filter with systematic resampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{standard_normal_vector, NonlinearModel};
use crate::numerics::{SpdMatrix, Vector};
use crate::rng;

/// Weighted particle approximation of a state density.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<Vector>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    /// `count` equally weighted draws from the model's initial density.
    pub fn from_initial(model: &NonlinearModel, count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("particle count must be positive".into()));
        }
        let particles = (0..count).map(|_| model.initial().sample(rng)).collect();
        Ok(ParticleCloud {
            particles,
            weights: vec![1.0 / count as f64; count],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> Vector {
        let dim = self.particles.first().map_or(0, |p| p.len());
        self.particles
            .iter()
            .zip(&self.weights)
            .fold(Vector::zeros(dim), |acc, (p, &w)| acc + p * w)
    }

    /// Weighted mean of `g` over the cloud.
    pub fn expect<G: Fn(&Vector) -> Vector>(&self, g: G) -> Vector {
        let mut acc: Option<Vector> = None;
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            let v = g(p) * w;
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        acc.unwrap_or_else(|| Vector::zeros(0))
    }

    fn check(&self) -> Result<()> {
        if self.particles.is_empty() || self.particles.len() != self.weights.len() {
            return Err(Error::DimensionMismatch("particle and weight counts differ".into()));
        }
        Ok(())
    }
}

/// Multiplies the weights by `N(y; h(x), D D^T)` and renormalizes in log
/// space. Returns `true` if every weight underflowed, in which case the
/// weights are reset to uniform.
pub fn reweight(model: &NonlinearModel, cloud: &mut ParticleCloud, y: &Vector, meas_cov: &SpdMatrix) -> bool {
    let logs: Vec<f64> = cloud
        .particles
        .iter()
        .zip(&cloud.weights)
        .map(|(x, &w)| w.ln() + meas_cov.gaussian_log_pdf(&(y - model.h(x))))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let count = cloud.len() as f64;
    if !max.is_finite() {
        cloud.weights.iter_mut().for_each(|w| *w = 1.0 / count);
        return true;
    }
    let mut total = 0.0;
    for (w, l) in cloud.weights.iter_mut().zip(&logs) {
        *w = if l.is_nan() { 0.0 } else { (l - max).exp() };
        total += *w;
    }
    cloud.weights.iter_mut().for_each(|w| *w /= total);
    false
}

/// Offspring indices from one uniform draw `u0` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for k in 0..n {
        let u = (u0 + k as f64) / n as f64;
        while i + 1 < n && cumulative + weights[i] <= u {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

pub fn systematic_resample(cloud: &ParticleCloud, rng: &mut ChaCha8Rng) -> ParticleCloud {
    let u0 = rng.random::<f64>();
    let idx = systematic_indices(&cloud.weights, u0);
    let n = idx.len();
    ParticleCloud {
        particles: idx.into_iter().map(|i| cloud.particles[i].clone()).collect(),
        weights: vec![1.0 / n as f64; n],
    }
}

/// Output of one [`pf_step`].
#[derive(Debug, Clone)]
pub struct PfStep {
    /// Resampled cloud at time `t`.
    pub cloud: ParticleCloud,
    /// Weighted mean before resampling, `x̂_{t|t}`.
    pub estimate: Vector,
    /// `E[f(x_t) | Y_t]`, the one-step prediction `x̂_{t+1}`.
    pub prediction: Vector,
    pub weight_collapse: bool,
}

/// Propagates `cloud` (the resampled cloud at `t - 1`) through the nominal
/// transition, weights by `y_t`, and resamples.
pub fn pf_step(model: &NonlinearModel, cloud: &ParticleCloud, y: &Vector, rng: &mut ChaCha8Rng) -> Result<PfStep> {
    cloud.check()?;
    let propagated = ParticleCloud {
        particles: cloud
            .particles
            .iter()
            .map(|x| model.f(x) + model.b() * standard_normal_vector(model.noise_dim(), rng))
            .collect(),
        weights: cloud.weights.clone(),
    };
    pf_update(model, propagated, y, rng)
}

/// Weights an already propagated cloud by `y_t` and resamples.
pub fn pf_update(model: &NonlinearModel, mut cloud: ParticleCloud, y: &Vector, rng: &mut ChaCha8Rng) -> Result<PfStep> {
    cloud.check()?;
    if y.len() != model.obs_dim() {
        return Err(Error::DimensionMismatch(format!("observation has length {}", y.len())));
    }
    let meas_cov = SpdMatrix::new(model.measurement_cov().clone())?;
    let weight_collapse = reweight(model, &mut cloud, y, &meas_cov);
    let estimate = cloud.mean();
    let prediction = cloud.expect(|x| model.f(x));
    let resampled = systematic_resample(&cloud, rng);
    Ok(PfStep {
        cloud: resampled,
        estimate,
        prediction,
        weight_collapse,
    })
}

/// Point estimates of a particle filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct PfTrace {
    /// `x̂_0 .. x̂_{N+1}`
    pub predictions: Vec<Vector>,
    /// `x̂_{0|0} .. x̂_{N|N}`
    pub filtered: Vec<Vector>,
    /// Steps at which every weight underflowed.
    pub collapses: Vec<usize>,
}

/// Runs the bootstrap filter over `observations` with `count` particles.
pub fn run_particle_filter(model: &NonlinearModel, observations: &[Vector], count: usize, seed: u64) -> Result<PfTrace> {
    let mut rng = rng::stream(seed, rng::Stream::Particles);
    let mut cloud = ParticleCloud::from_initial(model, count, &mut rng)?;
    let mut trace = PfTrace {
        predictions: vec![model.initial().mean.clone()],
        filtered: Vec::with_capacity(observations.len()),
        collapses: Vec::new(),
    };
    for (t, y) in observations.iter().enumerate() {
        let step = if t == 0 {
            pf_update(model, cloud, y, &mut rng)
        } else {
            pf_step(model, &cloud, y, &mut rng)
        }
        .map_err(|e| e.at_step(t))?;
        if step.weight_collapse {
            trace.collapses.push(t);
        }
        trace.predictions.push(step.prediction);
        trace.filtered.push(step.estimate);
        cloud = step.cloud;
    }
    Ok(trace)
}
