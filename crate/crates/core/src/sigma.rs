//! Sigma-point rules and moment matching.
//!
//! Three rules are supported: the scaled unscented transform (`2n + 1`
//! points), the spherical cubature rule (`2n` points) and the tensor
//! Gauss–Hermite rule (`q^n` points). All of them use the lower Cholesky
//! factor as the matrix square root.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::model::GaussianBelief;
use crate::numerics::{symmetrize, Matrix, Vector};

/// One-dimensional Gauss–Hermite nodes and weights for the standard normal
/// weight function, i.e. the roots of the probabilists' Hermite polynomial
/// `He_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    order: usize,
    nodes: Arc<[f64]>,
    weights: Arc<[f64]>,
}

/// `He_k(x)` by the three-term recurrence `He_{k+1} = x He_k - k He_{k-1}`.
pub fn hermite_he(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

impl GaussHermiteRule {
    /// Roots from the eigenvalues of the symmetric tridiagonal Jacobi matrix,
    /// polished with Newton steps; weights `q! / (q^2 He_{q-1}(nu)^2)`.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("Gauss-Hermite order must be at least 1".into()));
        }
        let q = order;
        let mut nodes: Vec<f64> = if q == 1 {
            vec![0.0]
        } else {
            let jacobi = Matrix::from_fn(q, q, |i, j| {
                if i + 1 == j || j + 1 == i {
                    (i.max(j) as f64).sqrt()
                } else {
                    0.0
                }
            });
            SymmetricEigen::new(jacobi).eigenvalues.iter().cloned().collect()
        };
        nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let p = hermite_he(q, *x);
                let dp = q as f64 * hermite_he(q - 1, *x);
                if dp != 0.0 {
                    *x -= p / dp;
                }
            }
        }
        // symmetric pairs exactly, and an exact zero for odd orders
        for i in 0..q / 2 {
            let r = 0.5 * (nodes[q - 1 - i] - nodes[i]);
            nodes[i] = -r;
            nodes[q - 1 - i] = r;
        }
        if q % 2 == 1 {
            nodes[q / 2] = 0.0;
        }
        let log_fact: f64 = (1..=q).map(|k| (k as f64).ln()).sum();
        let weights: Vec<f64> = nodes
            .iter()
            .map(|&x| {
                let he = hermite_he(q - 1, x);
                (log_fact - 2.0 * (q as f64).ln() - 2.0 * he.abs().ln()).exp()
            })
            .collect();
        Ok(GaussHermiteRule {
            order,
            nodes: nodes.into(),
            weights: weights.into(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Choice of sigma points and weights.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaRule {
    Unscented { alpha: f64, beta: f64, kappa: f64 },
    Cubature,
    GaussHermite(GaussHermiteRule),
}

impl SigmaRule {
    pub fn unscented(alpha: f64, beta: f64, kappa: f64) -> Self {
        SigmaRule::Unscented { alpha, beta, kappa }
    }

    /// Unscented rule with `a = 0.5, b = 2, kappa = 1`, the setting used in
    /// the experiments.
    pub fn default_unscented() -> Self {
        SigmaRule::unscented(0.5, 2.0, 1.0)
    }

    pub fn cubature() -> Self {
        SigmaRule::Cubature
    }

    pub fn gauss_hermite(order: usize) -> Result<Self> {
        Ok(SigmaRule::GaussHermite(GaussHermiteRule::new(order)?))
    }

    /// `lambda = a^2 (kappa + n) - n` for the unscented rule.
    pub fn unscented_lambda(alpha: f64, kappa: f64, n: usize) -> f64 {
        alpha * alpha * (kappa + n as f64) - n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            SigmaRule::Unscented { alpha, kappa, .. } => {
                if !(*alpha > 0.0) {
                    return Err(Error::Config("unscented alpha must be positive".into()));
                }
                let lambda = Self::unscented_lambda(*alpha, *kappa, n);
                if !(lambda + n as f64 > 0.0) {
                    return Err(Error::Config(format!(
                        "unscented lambda + n = {} must be positive",
                        lambda + n as f64
                    )));
                }
                Ok(())
            }
            SigmaRule::Cubature => {
                if n == 0 {
                    return Err(Error::Config("cubature rule needs n >= 1".into()));
                }
                Ok(())
            }
            SigmaRule::GaussHermite(_) => Ok(()),
        }
    }

    pub fn num_points(&self, n: usize) -> usize {
        match self {
            SigmaRule::Unscented { .. } => 2 * n + 1,
            SigmaRule::Cubature => 2 * n,
            SigmaRule::GaussHermite(gh) => gh.order.pow(n as u32),
        }
    }

    /// Short label used in filter names: `ukf`, `ckf`, `gh3`.
    pub fn label(&self) -> String {
        match self {
            SigmaRule::Unscented { .. } => "ukf".into(),
            SigmaRule::Cubature => "ckf".into(),
            SigmaRule::GaussHermite(gh) => format!("gh{}", gh.order),
        }
    }
}

impl fmt::Display for SigmaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaRule::GaussHermite(gh) => write!(f, "gh:{}", gh.order),
            other => f.write_str(&other.label()),
        }
    }
}

impl FromStr for SigmaRule {
    type Err = Error;

    /// Parses `ukf`, `ckf` or `gh:q`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "ukf" | "unscented" => Ok(SigmaRule::default_unscented()),
            "ckf" | "cubature" => Ok(SigmaRule::cubature()),
            other => {
                let order = other
                    .strip_prefix("gh:")
                    .or_else(|| other.strip_prefix("gh"))
                    .and_then(|q| q.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown sigma rule '{other}'")))?;
                SigmaRule::gauss_hermite(order)
            }
        }
    }
}

/// Serialized as its text form, so only the default unscented parameters
/// survive a round trip.
impl serde::Serialize for SigmaRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for SigmaRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Sigma points with their mean and covariance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    pub points: Vec<Vector>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

/// `sum W_m g_i`, `sum W_c (g_i - mean)(g_i - mean)^T + noise` and the cross
/// covariance with the generating points.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatch {
    pub mean: Vector,
    pub cov: Matrix,
    pub cross: Matrix,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn map<F>(&self, g: F) -> Vec<Vector>
    where
        F: Fn(&Vector) -> Vector,
    {
        self.points.iter().map(g).collect()
    }

    pub fn weighted_mean(&self, values: &[Vector]) -> Vector {
        let mut mean = Vector::zeros(values[0].len());
        for (w, v) in self.mean_weights.iter().zip(values) {
            mean.axpy(*w, v, 1.0);
        }
        mean
    }

    /// `sum W_c (a_i - a_mean)(b_i - b_mean)^T`
    pub fn weighted_cross(&self, a: &[Vector], a_mean: &Vector, b: &[Vector], b_mean: &Vector) -> Matrix {
        let mut out = Matrix::zeros(a_mean.len(), b_mean.len());
        for ((w, ai), bi) in self.cov_weights.iter().zip(a).zip(b) {
            let da = ai - a_mean;
            let db = bi - b_mean;
            out.ger(*w, &da, &db, 1.0);
        }
        out
    }

    /// Symmetrized `sum W_c (v_i - mean)(v_i - mean)^T`.
    pub fn weighted_cov(&self, values: &[Vector], mean: &Vector) -> Matrix {
        symmetrize(&self.weighted_cross(values, mean, values, mean))
    }
}

/// Sigma points of `N(belief.mean, belief.cov)` for `rule`.
pub fn generate(rule: &SigmaRule, belief: &GaussianBelief) -> Result<SigmaSet> {
    let n = belief.dim();
    rule.validate(n)?;
    let mean = &belief.mean;
    let root = belief.cov.lower();
    match rule {
        SigmaRule::Unscented { alpha, beta, kappa } => {
            let lambda = SigmaRule::unscented_lambda(*alpha, *kappa, n);
            let spread = (lambda + n as f64).sqrt();
            let side = 1.0 / (2.0 * (n as f64 + lambda));
            let mut points = Vec::with_capacity(2 * n + 1);
            for i in 0..n {
                points.push(mean + root.column(i) * spread);
            }
            for i in 0..n {
                points.push(mean - root.column(i) * spread);
            }
            points.push(mean.clone());
            let center_m = lambda / (n as f64 + lambda);
            let center_c = center_m + 1.0 - alpha * alpha + beta;
            let mut mean_weights = vec![side; 2 * n];
            let mut cov_weights = vec![side; 2 * n];
            mean_weights.push(center_m);
            cov_weights.push(center_c);
            Ok(SigmaSet {
                points,
                mean_weights,
                cov_weights,
            })
        }
        SigmaRule::Cubature => {
            let spread = (n as f64).sqrt();
            let mut points = Vec::with_capacity(2 * n);
            for i in 0..n {
                points.push(mean + root.column(i) * spread);
            }
            for i in 0..n {
                points.push(mean - root.column(i) * spread);
            }
            let w = 1.0 / (2 * n) as f64;
            Ok(SigmaSet {
                points,
                mean_weights: vec![w; 2 * n],
                cov_weights: vec![w; 2 * n],
            })
        }
        SigmaRule::GaussHermite(gh) => {
            let q = gh.order;
            let total = q.pow(n as u32);
            let mut points = Vec::with_capacity(total);
            let mut weights = Vec::with_capacity(total);
            let mut idx = vec![0usize; n];
            let mut unit = Vector::zeros(n);
            for _ in 0..total {
                let mut w = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    unit[k] = gh.nodes[i];
                    w *= gh.weights[i];
                }
                points.push(mean + root * &unit);
                weights.push(w);
                // lexicographic: last coordinate varies fastest
                for k in (0..n).rev() {
                    idx[k] += 1;
                    if idx[k] < q {
                        break;
                    }
                    idx[k] = 0;
                }
            }
            Ok(SigmaSet {
                points,
                mean_weights: weights.clone(),
                cov_weights: weights,
            })
        }
    }
}

/// Moment match of `g(x)`, `x ~ belief`, with additive `noise_cov`.
pub fn moment_match<G>(
    rule: &SigmaRule,
    belief: &GaussianBelief,
    g: G,
    noise_cov: &Matrix,
) -> Result<MomentMatch>
where
    G: Fn(&Vector) -> Vector,
{
    let set = generate(rule, belief)?;
    moment_match_set(&set, &belief.mean, g, noise_cov)
}

/// Moment match on an already generated sigma set centred at `center`.
pub fn moment_match_set<G>(
    set: &SigmaSet,
    center: &Vector,
    g: G,
    noise_cov: &Matrix,
) -> Result<MomentMatch>
where
    G: Fn(&Vector) -> Vector,
{
    let values = set.map(g);
    let out_dim = values[0].len();
    if noise_cov.nrows() != out_dim || noise_cov.ncols() != out_dim {
        return Err(Error::DimensionMismatch(format!(
            "noise covariance is {}x{} but g has {} outputs",
            noise_cov.nrows(),
            noise_cov.ncols(),
            out_dim
        )));
    }
    let mean = set.weighted_mean(&values);
    let cov = symmetrize(&(set.weighted_cov(&values, &mean) + noise_cov));
    let cross = set.weighted_cross(&set.points, center, &values, &mean);
    Ok(MomentMatch { mean, cov, cross })
}
