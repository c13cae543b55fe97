//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS` or `FAIL` line to stdout (bypassing the test harness capture).

use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resilient_core::baselines::systematic_indices;
use resilient_core::experiments::{
    generate_lfm_datasets, run_mass_spring, score_lfm_datasets, Experiment, ExperimentConfig, LfmDataset,
};
use resilient_core::filters::{gamma, lf_cov, prop1_density, run_filter, solve_theta, FilterTrace};
use resilient_core::lfm::{
    estimate_norm_const, eval_target_logdensity_p, eval_target_logdensity_u, eval_target_p_with_trace,
    eval_target_u_with_trace, sample_proposal, build_proposal_p, build_proposal_u, AdaptiveR, ProposalModel,
    UpdateWeighting, Welford,
};
use resilient_core::model::{
    example1_model, linear_model, mass_spring_model, worstcase_model, MassSpringParams, VectorFn,
};
use resilient_core::numerics::{bisect, cholesky_lower, BisectionSpec};
use resilient_core::sigma::{generate, moment_match, GaussHermiteRule};
use resilient_core::*;

fn report(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let ok = ok && elapsed <= budget;
    let line = format!(
        "{} criterion {id:>2}: {name} [{detail}] ({:.1} s, budget {} s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}

fn rules() -> Vec<SigmaRule> {
    vec![
        SigmaRule::default_unscented(),
        SigmaRule::cubature(),
        SigmaRule::gauss_hermite(3).unwrap(),
    ]
}

/// Largest `|a - b| / max(1, |b|)` over all entries.
fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn vrel_diff(a: &Vector, b: &Vector) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn max_abs(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}

fn trace_diff(a: &FilterTrace, b: &FilterTrace) -> f64 {
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(s, r)| {
            [
                (&s.prior.mean - &r.prior.mean).amax(),
                max_abs(s.prior.cov.matrix(), r.prior.cov.matrix()),
                (&s.predicted.mean - &r.predicted.mean).amax(),
                max_abs(s.predicted.cov.matrix(), r.predicted.cov.matrix()),
                max_abs(s.lf_predicted_cov.matrix(), r.lf_predicted_cov.matrix()),
                (&s.updated.mean - &r.updated.mean).amax(),
                max_abs(s.updated.cov.matrix(), r.updated.cov.matrix()),
                max_abs(s.lf_updated_cov.matrix(), r.lf_updated_cov.matrix()),
                max_abs(&s.gain, &r.gain),
            ]
            .into_iter()
            .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_reduction_to_standard_filter() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut errors = Vec::new();
    for (name, model) in [("example1", example1_model()), ("worstcase", worstcase_model())] {
        let traj = model.simulate(50, 11);
        for rule in rules() {
            let cfg = ResilientConfig::new(rule.clone(), 0.0);
            let standard = run_filter(&model, FilterKind::Standard, &traj.observations, &cfg).unwrap();
            for kind in [FilterKind::PredictionResilient, FilterKind::UpdateResilient] {
                match run_filter(&model, kind, &traj.observations, &cfg) {
                    Ok(trace) => worst = worst.max(trace_diff(&trace, &standard)),
                    Err(e) => errors.push(format!("{name}/{rule}/{kind}: {e}")),
                }
            }
        }
    }
    let ok = errors.is_empty() && worst <= 1e-10;
    let detail = format!("max elementwise difference {worst:.2e}, errors {errors:?}");
    assert!(report(1, "resilient filters with c = 0 equal the standard filter", ok, &detail, start.elapsed(), Duration::from_secs(5)));
}

#[test]
fn criterion_02_joint_density_recursion() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for model in [example1_model(), worstcase_model()] {
        let traj = model.simulate(49, 12);
        for rule in rules() {
            let cfg = ResilientConfig::new(rule.clone(), 0.0);
            let standard = run_filter(&model, FilterKind::Standard, &traj.observations, &cfg).unwrap();
            let mut belief = model.initial().clone();
            for (t, y) in traj.observations.iter().enumerate() {
                let joint = prop1_density(&model, &belief, y, &rule).unwrap();
                let next = joint.predictor(y).unwrap();
                let reference = &standard.steps[t].predicted;
                worst = worst
                    .max(vrel_diff(&next.mean, &reference.mean))
                    .max(rel_diff(next.cov.matrix(), reference.cov.matrix()));
                belief = next;
            }
        }
    }
    let detail = format!("max relative difference {worst:.2e} over 50 steps");
    assert!(report(2, "joint-density recursion reproduces the standard predictor", worst <= 1e-9, &detail, start.elapsed(), Duration::from_secs(5)));
}

#[test]
fn criterion_03_single_generation_filter_differs() {
    let start = Instant::now();
    let model = example1_model();
    let traj = model.simulate(99, 13);
    let cfg = ResilientConfig::new(SigmaRule::unscented(0.5, 2.0, 2.0), 0.0);
    let ukf = run_filter(&model, FilterKind::Standard, &traj.observations, &cfg).unwrap();
    let utf = run_filter(&model, FilterKind::Utf, &traj.observations, &cfg).unwrap();
    let diff = ukf
        .predictions()
        .iter()
        .zip(utf.predictions())
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let detail = format!("max |UKF - UTF| prediction gap {diff:.3e} over 100 steps");
    assert!(report(3, "UKF and UTF predictors differ on the scalar benchmark", diff > 1e-3, &detail, start.elapsed(), Duration::from_secs(1)));
}

/// `gamma(P, theta)` from determinant and inverse.
fn gamma_direct(p: &Matrix, theta: f64) -> f64 {
    let n = p.nrows();
    let m = Matrix::identity(n, n) - p * theta;
    let inv = m.clone().try_inverse().unwrap();
    0.5 * (m.determinant().ln() + inv.trace() - n as f64)
}

fn theta_oracle(p: &Matrix, c: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let lmax = SymmetricEigen::new(p.clone()).eigenvalues.max();
    let (mut lo, mut hi) = (0.0, 1.0 / lmax);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gamma_direct(p, mid) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn lf_oracle(p: &Matrix, theta: f64) -> Matrix {
    let n = p.nrows();
    (p.clone().try_inverse().unwrap() - Matrix::identity(n, n) * theta)
        .try_inverse()
        .unwrap()
}

struct LinearSystem {
    a: Matrix,
    c: Matrix,
    q: Matrix,
    r: Matrix,
    model: NonlinearModel,
}

fn random_linear(rng: &mut ChaCha8Rng) -> LinearSystem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=3);
    let mut a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let target = rng.random_range(0.3..0.95);
    if rho > 0.0 {
        a *= target / rho;
    }
    let c = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let lower = |k: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_fn(k, k, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.random_range(0.3..1.0),
            std::cmp::Ordering::Less => 0.0,
        })
    };
    let bq = lower(n, rng);
    let dr = lower(m, rng);
    let mut b = Matrix::zeros(n, n + m);
    b.view_mut((0, 0), (n, n)).copy_from(&bq);
    let mut d = Matrix::zeros(m, n + m);
    d.view_mut((0, n), (m, m)).copy_from(&dr);
    let mean = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let l0 = lower(n, rng);
    let initial = GaussianBelief::new(mean, SpdMatrix::new(&l0 * l0.transpose()).unwrap()).unwrap();
    let model = linear_model(a.clone(), c.clone(), b.clone(), d.clone(), initial).unwrap();
    LinearSystem {
        q: &bq * bq.transpose(),
        r: &dr * dr.transpose(),
        a,
        c,
        model,
    }
}

/// Prediction-resilient recursion on a linear model; returns
/// `(x̂_t, P̃_t)` for `t = 0 .. N + 1`.
fn linear_prediction_oracle(sys: &LinearSystem, ys: &[Vector], c: f64) -> Vec<(Vector, Matrix)> {
    let mut x = sys.model.initial().mean.clone();
    let mut p = sys.model.initial().cov.matrix().clone();
    let mut out = vec![(x.clone(), p.clone())];
    for y in ys {
        let s = &sys.c * &p * sys.c.transpose() + &sys.r;
        let g = &sys.a * &p * sys.c.transpose() * s.clone().try_inverse().unwrap();
        x = &sys.a * &x + &g * (y - &sys.c * &x);
        let p_next = &sys.a * &p * sys.a.transpose() - &g * &s * g.transpose() + &sys.q;
        let p_next = (&p_next + p_next.transpose()) * 0.5;
        p = lf_oracle(&p_next, theta_oracle(&p_next, c));
        out.push((x.clone(), p.clone()));
    }
    out
}

/// Update-resilient recursion; returns `(x̂_t, P_t, x̂_{t|t})` per step.
fn linear_update_oracle(sys: &LinearSystem, ys: &[Vector], c: f64) -> Vec<(Vector, Matrix, Vector)> {
    let mut x = sys.model.initial().mean.clone();
    let mut p = sys.model.initial().cov.matrix().clone();
    let mut out = Vec::new();
    for y in ys {
        let s = &sys.c * &p * sys.c.transpose() + &sys.r;
        let k = &p * sys.c.transpose() * s.clone().try_inverse().unwrap();
        let xf = &x + &k * (y - &sys.c * &x);
        let pf = &p - &k * &s * k.transpose();
        let pf = (&pf + pf.transpose()) * 0.5;
        out.push((x.clone(), p.clone(), xf.clone()));
        let pt = lf_oracle(&pf, theta_oracle(&pf, c));
        x = &sys.a * &xf;
        p = &sys.a * &pt * sys.a.transpose() + &sys.q;
    }
    out
}

#[test]
fn criterion_04_linear_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut errors = Vec::new();
    for i in 0..20 {
        let sys = random_linear(&mut rng);
        let c = [1e-3, 1e-2, 0.1][i % 3];
        let traj = sys.model.simulate(49, i as u64);
        for rule in rules() {
            let cfg = ResilientConfig::new(rule.clone(), c);
            match run_filter(&sys.model, FilterKind::PredictionResilient, &traj.observations, &cfg) {
                Ok(trace) => {
                    let oracle = linear_prediction_oracle(&sys, &traj.observations, c);
                    for (t, step) in trace.steps.iter().enumerate() {
                        worst = worst
                            .max(vrel_diff(&step.prior.mean, &oracle[t].0))
                            .max(rel_diff(step.prior.cov.matrix(), &oracle[t].1))
                            .max(vrel_diff(&step.predicted.mean, &oracle[t + 1].0))
                            .max(rel_diff(step.lf_predicted_cov.matrix(), &oracle[t + 1].1));
                    }
                }
                Err(e) => errors.push(format!("P model {i} {rule}: {e}")),
            }
            match run_filter(&sys.model, FilterKind::UpdateResilient, &traj.observations, &cfg) {
                Ok(trace) => {
                    let oracle = linear_update_oracle(&sys, &traj.observations, c);
                    for (step, (x, p, xf)) in trace.steps.iter().zip(&oracle) {
                        worst = worst
                            .max(vrel_diff(&step.prior.mean, x))
                            .max(rel_diff(step.prior.cov.matrix(), p))
                            .max(vrel_diff(&step.updated.mean, xf));
                    }
                }
                Err(e) => errors.push(format!("U model {i} {rule}: {e}")),
            }
        }
    }
    let ok = errors.is_empty() && worst <= 1e-8;
    let detail = format!("max relative difference {worst:.2e} on 20 models x 3 rules, errors {errors:?}");
    assert!(report(4, "resilient filters match the closed-form linear recursions", ok, &detail, start.elapsed(), Duration::from_secs(10)));
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let scale = rng.random_range(0.1..5.0);
    (&a * a.transpose() + Matrix::identity(n, n) * 0.05) * scale
}

#[test]
fn criterion_05_theta_solver() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut zero_exact = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let p = random_spd(&mut rng, n);
        zero_exact &= gamma(&p, 0.0).unwrap() == 0.0;
        for c in [1e-4, 1e-3, 1e-2, 0.03, 0.1] {
            let cfg = ResilientConfig::new(SigmaRule::cubature(), c);
            let theta = solve_theta(&p, c, &cfg).unwrap();
            worst = worst.max((gamma_direct(&p, theta) - c).abs());
        }
    }
    let ok = zero_exact && worst <= 1e-12;
    let detail = format!("max |gamma - c| {worst:.2e} on 100 matrices x 5 tolerances, gamma(P, 0) = 0: {zero_exact}");
    assert!(report(5, "theta solver hits the tolerance", ok, &detail, start.elapsed(), Duration::from_secs(2)));
}

/// Probabilists' Gauss–Hermite rule from the eigen-decomposition of the
/// Jacobi matrix.
fn gh_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = Matrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..order).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    (nodes, weights)
}

/// Scalar model `x' = b x + a tanh x + q v1`, `y = x + a2 sin x + d v2`.
struct Scalar {
    b: f64,
    a: f64,
    a2: f64,
    q: f64,
    d: f64,
    model: NonlinearModel,
}

fn random_scalar(rng: &mut ChaCha8Rng) -> Scalar {
    let (b, a, a2) = (rng.random_range(0.3..0.9), rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3));
    let (q, d) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    let f: VectorFn = Arc::new(move |x: &Vector| Vector::from_element(1, b * x[0] + a * x[0].tanh()));
    let h: VectorFn = Arc::new(move |x: &Vector| Vector::from_element(1, x[0] + a2 * x[0].sin()));
    let initial = GaussianBelief::new(
        Vector::from_element(1, rng.random_range(-1.0..1.0)),
        SpdMatrix::from_diagonal(&[rng.random_range(0.3..1.5)]).unwrap(),
    )
    .unwrap();
    let model = NonlinearModel::new(
        f,
        h,
        Matrix::from_row_slice(1, 2, &[q, 0.0]),
        Matrix::from_row_slice(1, 2, &[0.0, d]),
        initial,
    )
    .unwrap();
    Scalar { b, a, a2, q, d, model }
}

impl Scalar {
    fn f(&self, x: f64) -> f64 {
        self.b * x + self.a * x.tanh()
    }

    fn h(&self, x: f64) -> f64 {
        x + self.a2 * x.sin()
    }
}

#[test]
fn criterion_06_normalizing_constant_oracle() {
    let start = Instant::now();
    let (nodes, weights) = gh_rule(24);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mh = MhConfig::default();
    let mut checked = 0usize;
    let mut misses = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let sys = random_scalar(&mut rng);
        let c = rng.random_range(0.001..0.02);
        let cfg = ResilientConfig::new(SigmaRule::default_unscented(), c);
        let traj = sys.model.simulate(3, 600 + i);

        let trace = run_filter(&sys.model, FilterKind::PredictionResilient, &traj.observations, &cfg).unwrap();
        let eval = eval_target_p_with_trace(&sys.model, &cfg, &trace, &traj, &mh, i).unwrap();
        for (t, est) in eval.estimates.iter().enumerate() {
            let step = &trace.steps[t];
            let y = &traj.observations[t];
            let joint = prop1_density(&sys.model, &step.prior, y, &cfg.rule).unwrap();
            let g = joint.regression_gain()[(0, 0)];
            let l = joint.mean_x[0] - g * joint.mean_y[0];
            let (mean, sd) = (step.prior.mean[0], step.prior.cov.matrix()[(0, 0)].sqrt());
            let mut exact = 0.0;
            for (xi, wi) in nodes.iter().zip(&weights) {
                let x = mean + sd * xi;
                let (fx, hx) = (sys.f(x), sys.h(x));
                for (vj, wj) in nodes.iter().zip(&weights) {
                    for (vk, wk) in nodes.iter().zip(&weights) {
                        let resid = fx + sys.q * vj - l - g * (hx + sys.d * vk);
                        exact += wi * wj * wk * (0.5 * step.theta * resid * resid).exp();
                    }
                }
            }
            let band = 3.0 * 1.96 * est.sample_std / (est.sample_count as f64).sqrt();
            worst = worst.max((est.value - exact).abs() / band);
            checked += 1;
            if (est.value - exact).abs() > band {
                misses.push(format!("P instance {i} t {t}: {} vs {exact}", est.value));
            }
        }

        let trace = run_filter(&sys.model, FilterKind::UpdateResilient, &traj.observations, &cfg).unwrap();
        let eval = eval_target_u_with_trace(&sys.model, &trace, &traj, &mh, i).unwrap();
        for (t, est) in eval.estimates.iter().enumerate() {
            let step = &trace.steps[t];
            let (gain, m_y) = (step.gain[(0, 0)], step.innov_mean[0]);
            let (mean, sd) = (step.prior.mean[0], step.prior.cov.matrix()[(0, 0)].sqrt());
            let mut exact = 0.0;
            for (xi, wi) in nodes.iter().zip(&weights) {
                let x = mean + sd * xi;
                let hx = sys.h(x);
                for (vk, wk) in nodes.iter().zip(&weights) {
                    let resid = x - mean - gain * (hx + sys.d * vk - m_y);
                    exact += wi * wk * (0.5 * step.theta * resid * resid).exp();
                }
            }
            let band = 3.0 * 1.96 * est.sample_std / (est.sample_count as f64).sqrt();
            worst = worst.max((est.value - exact).abs() / band);
            checked += 1;
            if (est.value - exact).abs() > band {
                misses.push(format!("U instance {i} t {t}: {} vs {exact}", est.value));
            }
        }
    }
    let ok = misses.is_empty();
    let detail = format!("{checked} estimates, worst |M̂ - M| / band {worst:.2}, misses {misses:?}");
    assert!(report(6, "M̂ within 3 tau of Gauss-Hermite quadrature", ok, &detail, start.elapsed(), Duration::from_secs(30)));
}

fn lfm_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 2,
        ..ExperimentConfig::desk(Experiment::Worstcase)
    }
}

/// Least-favorable datasets shared by criteria 7, 8 and 10.
fn lfm_datasets() -> &'static (Vec<LfmDataset>, Duration) {
    static DATA: OnceLock<(Vec<LfmDataset>, Duration)> = OnceLock::new();
    DATA.get_or_init(|| {
        let start = Instant::now();
        let data = generate_lfm_datasets(&lfm_config()).expect("least-favorable datasets");
        (data, start.elapsed())
    })
}

fn median(values: &[usize]) -> usize {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[v.len() / 2]
}

#[test]
fn criterion_07_adaptive_r() {
    let (data, gen_time) = lfm_datasets();
    let start = Instant::now();
    let mh = MhConfig::default();
    let policy = mh.adaptive_r();
    let model = worstcase_model();
    let mut contract_ok = true;
    let mut evaluated = 0usize;
    for (kind, rule) in [
        (LfmKind::Prediction, SigmaRule::default_unscented()),
        (LfmKind::Update, SigmaRule::cubature()),
    ] {
        let cfg = ResilientConfig::new(rule, 1e-3);
        for seed in 0..3 {
            let traj = model.simulate(50, 70 + seed);
            let eval = match kind {
                LfmKind::Prediction => eval_target_logdensity_p(&model, &cfg, &traj, &mh, seed),
                LfmKind::Update => eval_target_logdensity_u(&model, &cfg, &traj, &mh, seed),
            }
            .unwrap();
            for e in &eval.estimates {
                evaluated += 1;
                contract_ok &= e.rel_error <= policy.tau_star || e.sample_count == policy.r_cap;
            }
        }
    }
    let medians: Vec<(String, usize)> = data.iter().map(|d| (d.name.clone(), median(&d.chain.r_log))).collect();
    let in_band = medians.iter().all(|(_, r)| (500..=2500).contains(r));
    let detail = format!("contract holds on {evaluated} estimates: {contract_ok}; median candidate r {medians:?}");
    let elapsed = start.elapsed() + *gen_time;
    assert!(report(7, "adaptive r contract and typical r", contract_ok && in_band, &detail, elapsed, Duration::from_secs(600)));
}

#[test]
fn criterion_08_acceptance_rates() {
    let (data, gen_time) = lfm_datasets();
    let start = Instant::now();
    let mut ok = true;
    let mut rates = Vec::new();
    for d in data {
        let after = d.chain.proposals() - d.chain.burn_in_proposals.unwrap_or(d.chain.proposals());
        let rate = d.chain.post_burn_in_acceptance_rate();
        let band = match d.kind {
            LfmKind::Prediction => 0.15..=0.50,
            LfmKind::Update => 0.08..=0.40,
        };
        ok &= after >= 500 && band.contains(&rate);
        rates.push(format!("{} {rate:.3} over {after}", d.name));
    }
    let detail = format!("post burn-in acceptance {rates:?}");
    let elapsed = start.elapsed() + *gen_time;
    assert!(report(8, "MH acceptance rates", ok, &detail, elapsed, Duration::from_secs(1200)));
}

fn sample_stats(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..dim)
        .map(|i| samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

/// Mean, variance and lag-one covariance features with their standard
/// errors, as `(value, se)` pairs.
fn features(samples: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let (mean, var) = sample_stats(samples);
    let mut out = Vec::new();
    for i in 0..dim {
        out.push((mean[i], (var[i] / n).sqrt()));
        let sq: Vec<Vec<f64>> = samples.iter().map(|s| vec![(s[i] - mean[i]).powi(2)]).collect();
        let (_, v) = sample_stats(&sq);
        out.push((var[i], (v[0] / n).sqrt()));
    }
    for i in 0..dim - 1 {
        let prod: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| vec![(s[i] - mean[i]) * (s[i + 1] - mean[i + 1])])
            .collect();
        let (m, v) = sample_stats(&prod);
        out.push((m[0], (v[0] / n).sqrt()));
    }
    out
}

fn flatten(traj: &Trajectory) -> Vec<f64> {
    traj.states
        .iter()
        .chain(&traj.observations)
        .flat_map(|v| v.iter().copied())
        .collect()
}

#[test]
fn criterion_09_nominal_limit() {
    let start = Instant::now();
    let model = example1_model();
    let horizon = 5;
    let nominal: Vec<Vec<f64>> = (0..20_000).map(|k| flatten(&model.simulate(horizon, 90_000 + k))).collect();
    let reference = features(&nominal);
    let mut worst = 0.0f64;
    for kind in [LfmKind::Prediction, LfmKind::Update] {
        let mh = MhConfig {
            burn_in: 0,
            thinning: 1,
            num_samples: 4000,
            max_proposals: 4000,
            seed: 9,
            ..MhConfig::default()
        };
        let cfg = ResilientConfig::new(SigmaRule::default_unscented(), 0.0);
        let out = mh_sample(&model, &cfg, kind, horizon, &mh).unwrap();
        let chain: Vec<Vec<f64>> = out.samples.iter().map(flatten).collect();
        for ((a, sa), (b, sb)) in features(&chain).into_iter().zip(&reference) {
            worst = worst.max((a - b).abs() / (sa * sa + sb * sb).sqrt());
        }
    }
    let detail = format!("worst |chain - Monte Carlo| / se = {worst:.2} over means, variances and lag-one covariances");
    assert!(report(9, "chain at c = 0 samples the nominal model", worst <= 3.0, &detail, start.elapsed(), Duration::from_secs(120)));
}

#[test]
fn criterion_10_worstcase_ordering() {
    let (data, gen_time) = lfm_datasets();
    let start = Instant::now();
    let cfg = lfm_config();
    let report_ = score_lfm_datasets(&cfg, data).unwrap();
    let c = Some(cfg.tolerances[0]);
    let robust = ["P-UKF", "P-CKF", "U-UKF", "U-CKF"];
    let mut ok = true;
    let mut lines = Vec::new();
    for d in data {
        let mse = |name: &str| {
            let tol = if name.contains('-') { c } else { None };
            report_.find(&d.name, name, tol).map_or(f64::NAN, |s| s.overall)
        };
        let matched = mse(&d.name);
        let all: Vec<(String, f64)> = robust
            .iter()
            .chain(&["UKF", "CKF"])
            .map(|n| (n.to_string(), mse(n)))
            .collect();
        let best = all.iter().all(|(_, v)| matched <= *v);
        let beat_standard = robust.iter().all(|n| mse(n) < mse("UKF") && mse(n) < mse("CKF"));
        ok &= best && beat_standard;
        let cells: Vec<String> = all.iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
        lines.push(format!("{}: {} matched best {best}, robust beat standard {beat_standard}", d.name, cells.join(" ")));
    }
    let detail = lines.join("; ");
    let elapsed = start.elapsed() + *gen_time;
    assert!(report(10, "matched robust filter is best on its least-favorable data", ok, &detail, elapsed, Duration::from_secs(2700)));
}

#[test]
fn criterion_11_mass_spring_orderings() {
    let start = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for experiment in [Experiment::MassSpringMeasurementDominant, Experiment::MassSpringBalanced] {
        let cfg = ExperimentConfig {
            trials: 200,
            pf_particles: vec![20000],
            seed: 11,
            ..ExperimentConfig::desk(experiment)
        };
        let report_ = run_mass_spring(&cfg).unwrap();
        let ds = experiment.as_str();
        let mut identical = true;
        for (family, standard) in [("UKF", "UKF"), ("CKF", "CKF")] {
            let s = report_.find(ds, standard, None).unwrap();
            for prefix in ["P", "U"] {
                let r = report_.find(ds, &format!("{prefix}-{family}"), Some(0.0)).unwrap();
                identical &= r.per_time == s.per_time && r.overall.to_bits() == s.overall.to_bits();
            }
        }
        ok &= identical;
        lines.push(format!("{ds}: c = 0 rows identical {identical}"));
        for family in ["UKF", "CKF"] {
            let p = report_.best(ds, &format!("P-{family}")).unwrap();
            let u = report_.best(ds, &format!("U-{family}")).unwrap();
            let standard = report_.find(ds, family, None).unwrap().overall;
            let order = match experiment {
                Experiment::MassSpringMeasurementDominant => u.overall <= p.overall && p.overall <= standard,
                _ => p.overall <= u.overall,
            };
            ok &= order;
            lines.push(format!(
                "{ds}: best P-{family} {:.4} (c={}), best U-{family} {:.4} (c={}), {family} {standard:.4}, ordering {order}",
                p.overall,
                p.c.unwrap(),
                u.overall,
                u.c.unwrap()
            ));
        }
        let pf = report_.find_pf(ds, 20000).unwrap().overall;
        let worst_robust = report_
            .series
            .iter()
            .filter(|s| s.c.is_some())
            .map(|s| s.overall)
            .fold(0.0, f64::max);
        ok &= pf > worst_robust;
        lines.push(format!("{ds}: PF(20000) {pf:.4} vs worst robust {worst_robust:.4}"));
        if experiment == Experiment::MassSpringMeasurementDominant {
            let ukf = report_.find(ds, "UKF", None).unwrap().overall;
            let band = (3.0..=12.0).contains(&ukf);
            ok &= band;
            lines.push(format!("{ds}: UKF {ukf:.4} in [3, 12] {band}"));
        }
    }
    let detail = lines.join("; ");
    assert!(report(11, "mass-spring orderings", ok, &detail, start.elapsed(), Duration::from_secs(1800)));
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        PropConfig {
            cases: 100,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn spd_strategy(max_n: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_n, any::<u64>()).prop_map(|(n, seed)| random_spd(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

fn check<S: Strategy>(
    failures: &mut Vec<String>,
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) {
    if let Err(e) = runner().run(&strategy, test) {
        failures.push(format!("{name}: {e}"));
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg.into()))
    }
}

#[test]
fn criterion_12_property_suites() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut count = 0usize;
    let mut run = |name: &str, f: &mut dyn FnMut(&mut Vec<String>)| {
        count += 1;
        let before = failures.len();
        f(&mut failures);
        if failures.len() > before {
            failures.push(format!("({name} failed)"));
        }
    };

    // numerics
    run("cholesky reconstruction", &mut |fails| {
        check(fails, "cholesky", spd_strategy(6), |p| {
            let l = cholesky_lower(&p).map_err(|e| TestCaseError::fail(e.to_string()))?;
            ensure((&l * l.transpose() - &p).norm() <= 1e-12 * p.norm(), "reconstruction error")
        })
    });
    run("bisection on monotone maps", &mut |fails| {
        check(fails, "bisect", (0.1f64..10.0, -5.0f64..5.0, 0.0f64..2.0, any::<bool>()), |(a, root, cubic, up)| {
            let sign = if up { 1.0 } else { -1.0 };
            let f = |x: f64| sign * (a * (x - root) + cubic * (x - root).powi(3));
            let spec = BisectionSpec::new(-10.0, 10.0);
            let x = bisect(f, &spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
            ensure(f(x).abs() <= spec.abs_tolerance || (x - root).abs() < 1e-12, "residual above tolerance")
        })
    });

    // model-core
    run("noise-free orbit", &mut |fails| {
        check(fails, "orbit", (-3.0f64..3.0, any::<u64>()), |(x0, seed)| {
            let ex = example1_model();
            let initial = GaussianBelief::new(Vector::from_element(1, x0), SpdMatrix::from_diagonal(&[1e-30]).unwrap()).unwrap();
            let f: VectorFn = Arc::new(move |x: &Vector| ex.f(x));
            let h: VectorFn = Arc::new(|x: &Vector| Vector::from_element(1, x[0] * x[0] / 20.0));
            let m = NonlinearModel::new(f, h, Matrix::zeros(1, 2), Matrix::zeros(1, 2), initial).unwrap();
            let traj = m.simulate(30, seed);
            for t in 0..traj.observations.len() {
                ensure(traj.states[t + 1] == m.f(&traj.states[t]), "orbit deviates")?;
                ensure(traj.observations[t] == m.h(&traj.states[t]), "readout deviates")?;
            }
            Ok(())
        })
    });
    run("noise structure and rank", &mut |fails| {
        check(fails, "rank", (0.01f64..0.05, 0.1f64..0.8, 0.1f64..0.8, 0.1f64..2.0, 1e-8f64..1e-2), |(a, mk, ms, r, eps)| {
            let params = MassSpringParams { hardening: a, mu_kinetic: mk, mu_static: ms, meas_noise: r, epsilon: eps, ..MassSpringParams::default() };
            let models = [mass_spring_model(params).unwrap(), worstcase_model(), example1_model()];
            for m in &models {
                ensure((m.b() * m.d().transpose()).amax() <= 1e-12, "B D^T != 0")?;
                for (g, rows) in [(m.b(), m.state_dim()), (m.d(), m.obs_dim())] {
                    let sv = g.clone().svd(false, false).singular_values;
                    let big = sv.max();
                    ensure(sv.iter().filter(|s| **s > 1e-10 * big).count() == rows, "rank deficient")?;
                }
            }
            Ok(())
        })
    });
    run("friction opposes motion", &mut |fails| {
        check(fails, "friction", (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..0.8), |(p, s, mk)| {
            let params = MassSpringParams { mu_kinetic: mk, ..MassSpringParams::default() };
            if s.abs() <= 1e-9 {
                return Ok(());
            }
            // the friction acceleration is -F_f / m
            ensure(-params.friction_force(p, s) * s <= 0.0, "friction accelerates the mass")
        })
    });

    // sigma-transform
    run("weights sum to one", &mut |fails| {
        check(fails, "weights", (1usize..=6, 1usize..=5, any::<u64>()), |(n, q, seed)| {
            let p = random_spd(&mut ChaCha8Rng::seed_from_u64(seed), n);
            let belief = GaussianBelief::new(Vector::zeros(n), SpdMatrix::new(p).unwrap()).unwrap();
            for rule in [SigmaRule::default_unscented(), SigmaRule::cubature(), SigmaRule::gauss_hermite(q).unwrap()] {
                let set = generate(&rule, &belief).map_err(|e| TestCaseError::fail(e.to_string()))?;
                ensure((set.mean_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12, format!("{rule} weights"))?;
            }
            Ok(())
        })
    });
    run("linear exactness", &mut |fails| {
        check(fails, "linear", (1usize..=4, 1usize..=3, any::<u64>()), |(n, k, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_spd(&mut rng, n);
            let a = Matrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0));
            let b = Vector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
            let mean = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let noise = random_spd(&mut rng, k);
            let belief = GaussianBelief::new(mean.clone(), SpdMatrix::new(p.clone()).unwrap()).unwrap();
            for rule in rules() {
                let mm = moment_match(&rule, &belief, |x| &a * x + &b, &noise).unwrap();
                let exp_mean = &a * &mean + &b;
                let exp_cov = &a * &p * a.transpose() + &noise;
                let exp_cross = &p * a.transpose();
                let scale = exp_cov.amax().max(exp_mean.amax()).max(1.0);
                let err = (&mm.mean - &exp_mean).amax().max((&mm.cov - &exp_cov).amax()).max((&mm.cross - &exp_cross).amax());
                ensure(err <= 1e-10 * scale, format!("{rule}: error {err:e}"))?;
            }
            Ok(())
        })
    });
    run("Gauss-Hermite monomials", &mut |fails| {
        check(fails, "gh", 1usize..=8, |q| {
            let rule = GaussHermiteRule::new(q).unwrap();
            for deg in 0..2 * q {
                let quad: f64 = rule.nodes().iter().zip(rule.weights()).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { (1..deg).step_by(2).map(|v| v as f64).product() };
                ensure((quad - exact).abs() <= 1e-9 * exact.max(1.0), format!("degree {deg}: {quad} vs {exact}"))?;
            }
            Ok(())
        })
    });
    run("positive weights", &mut |fails| {
        check(fails, "positive", 1usize..=6, |n| {
            let belief = GaussianBelief::new(Vector::zeros(n), SpdMatrix::identity(n)).unwrap();
            let ckf = generate(&SigmaRule::cubature(), &belief).unwrap();
            ensure(ckf.cov_weights.iter().all(|w| *w > 0.0), "cubature weight")?;
            let ukf = generate(&SigmaRule::default_unscented(), &belief).unwrap();
            ensure(ukf.cov_weights.iter().skip(1).all(|w| *w > 0.0), "unscented side weight")
        })
    });

    // resilient-filters
    run("gamma monotone", &mut |fails| {
        check(fails, "gamma", (spd_strategy(5), 0.01f64..0.98, 0.01f64..0.98), |(p, u1, u2)| {
            let lmax = SymmetricEigen::new(p.clone()).eigenvalues.max();
            let (lo, hi) = (u1.min(u2) / lmax, u1.max(u2) / lmax);
            if hi - lo < 1e-9 / lmax {
                return Ok(());
            }
            ensure(gamma(&p, lo).unwrap() < gamma(&p, hi).unwrap(), "gamma not increasing")
        })
    });
    run("solve_theta round trip", &mut |fails| {
        check(fails, "theta", spd_strategy(5), |p| {
            for c in [1e-4, 1e-3, 1e-2] {
                let theta = solve_theta(&p, c, &ResilientConfig::new(SigmaRule::cubature(), c)).unwrap();
                ensure((gamma(&p, theta).unwrap() - c).abs() <= 1e-12, "round trip")?;
            }
            Ok(())
        })
    });
    run("reduction at c = 0", &mut |fails| {
        check(fails, "reduction", (any::<u64>(), 0usize..3), |(seed, which)| {
            let model = if seed % 2 == 0 { worstcase_model() } else { example1_model() };
            let traj = model.simulate(10, seed);
            let cfg = ResilientConfig::new(rules()[which].clone(), 0.0);
            let standard = run_filter(&model, FilterKind::Standard, &traj.observations, &cfg).unwrap();
            for kind in [FilterKind::PredictionResilient, FilterKind::UpdateResilient] {
                let trace = run_filter(&model, kind, &traj.observations, &cfg).unwrap();
                ensure(trace_diff(&trace, &standard) <= 1e-10, "differs from standard")?;
            }
            Ok(())
        })
    });
    run("joint-density recursion", &mut |fails| {
        check(fails, "joint density", (any::<u64>(), 0usize..3), |(seed, which)| {
            let model = if seed % 2 == 0 { worstcase_model() } else { example1_model() };
            let rule = rules()[which].clone();
            let traj = model.simulate(10, seed);
            let standard = run_filter(&model, FilterKind::Standard, &traj.observations, &ResilientConfig::new(rule.clone(), 0.0)).unwrap();
            let mut belief = model.initial().clone();
            for (t, y) in traj.observations.iter().enumerate() {
                let next = prop1_density(&model, &belief, y, &rule).unwrap().predictor(y).unwrap();
                let r = &standard.steps[t].predicted;
                ensure(vrel_diff(&next.mean, &r.mean).max(rel_diff(next.cov.matrix(), r.cov.matrix())) <= 1e-9, "predictor differs")?;
                belief = next;
            }
            Ok(())
        })
    });
    run("linear oracle", &mut |fails| {
        check(fails, "linear oracle", (any::<u64>(), 0usize..3), |(seed, which)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_linear(&mut rng);
            let c = rng.random_range(1e-4..0.1);
            let traj = sys.model.simulate(20, seed);
            let cfg = ResilientConfig::new(rules()[which].clone(), c);
            let trace = run_filter(&sys.model, FilterKind::PredictionResilient, &traj.observations, &cfg).unwrap();
            let oracle = linear_prediction_oracle(&sys, &traj.observations, c);
            for (t, step) in trace.steps.iter().enumerate() {
                ensure(vrel_diff(&step.predicted.mean, &oracle[t + 1].0) <= 1e-8, "P mean")?;
                ensure(rel_diff(step.lf_predicted_cov.matrix(), &oracle[t + 1].1) <= 1e-8, "P covariance")?;
            }
            let trace = run_filter(&sys.model, FilterKind::UpdateResilient, &traj.observations, &cfg).unwrap();
            let oracle = linear_update_oracle(&sys, &traj.observations, c);
            for (step, (x, p, xf)) in trace.steps.iter().zip(&oracle) {
                ensure(vrel_diff(&step.prior.mean, x).max(rel_diff(step.prior.cov.matrix(), p)).max(vrel_diff(&step.updated.mean, xf)) <= 1e-8, "U recursion")?;
            }
            Ok(())
        })
    });
    run("covariance domination", &mut |fails| {
        check(fails, "domination", (spd_strategy(5), 0.0f64..0.2), |(p, c)| {
            let cfg = ResilientConfig::new(SigmaRule::cubature(), c);
            let theta = solve_theta(&p, c, &cfg).unwrap();
            let lf = lf_cov(&SpdMatrix::new(p.clone()).unwrap(), theta).unwrap();
            let min_eig = SymmetricEigen::new(lf.matrix() - &p).eigenvalues.min();
            ensure(min_eig >= -1e-10 * p.amax(), "not PSD")?;
            ensure(c == 0.0 || min_eig > 0.0, "not PD at c > 0")
        })
    });

    // lfm-simulator
    run("finite log densities", &mut |fails| {
        check(fails, "finite", (any::<u64>(), 1usize..6), |(seed, horizon)| {
            let model = worstcase_model();
            let mh = MhConfig { r_init: 8, r_cap: 16, seed, ..MhConfig::default() };
            let cfg = ResilientConfig::new(SigmaRule::default_unscented(), 1e-3);
            let nominal = model.simulate(horizon, seed);
            let pm_p = ProposalModel::Prediction(build_proposal_p(&model, &nominal.observations, &cfg).unwrap());
            let pm_u = ProposalModel::Update(
                build_proposal_u(&model, &nominal.observations, &cfg, UpdateWeighting::Current).unwrap(),
            );
            for traj in [nominal.clone(), sample_proposal(&pm_p, &model, seed), sample_proposal(&pm_u, &model, seed)] {
                for kind in [LfmKind::Prediction, LfmKind::Update] {
                    let eval = match kind {
                        LfmKind::Prediction => eval_target_logdensity_p(&model, &cfg, &traj, &mh, 0),
                        LfmKind::Update => eval_target_logdensity_u(&model, &cfg, &traj, &mh, 0),
                    };
                    if let Ok(e) = eval {
                        ensure(e.log_density.is_finite(), "non-finite target")?;
                    }
                }
            }
            Ok(())
        })
    });
    run("streaming moments", &mut |fails| {
        check(fails, "welford", prop::collection::vec(-1e3f64..1e3, 2..200), |xs| {
            let mut w = Welford::new();
            xs.iter().for_each(|x| w.push(*x));
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            ensure((w.mean() - mean).abs() <= 1e-10 * mean.abs().max(1.0), "mean")?;
            ensure((w.variance() - var).abs() <= 1e-10 * var.max(1.0), "variance")
        })
    });
    run("adaptive r contract", &mut |fails| {
        check(fails, "adaptive", (any::<u64>(), 0.01f64..2.0, 2usize..200), |(seed, spread, r_init)| {
            let policy = AdaptiveR { r_init, r_cap: 4000, tau_star: 2e-3 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate_norm_const(&policy, || spread * rng.random_range(-1.0..1.0));
            ensure(est.rel_error <= policy.tau_star || est.sample_count == policy.r_cap, "contract")
        })
    });

    // baselines
    run("systematic resampling counts", &mut |fails| {
        check(fails, "resampling", (prop::collection::vec(0.001f64..1.0, 1..60), 0.0f64..1.0), |(raw, u0)| {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let idx = systematic_indices(&w, u0);
            ensure(idx.len() == w.len(), "count changed")?;
            let n = w.len() as f64;
            for (i, wi) in w.iter().enumerate() {
                let c = idx.iter().filter(|j| **j == i).count() as f64;
                ensure(c >= (n * wi).floor() - 1.0 && c <= (n * wi).ceil() + 1.0, "offspring count")?;
            }
            Ok(())
        })
    });

    // bench-cli
    run("MSE accounting and determinism", &mut |fails| {
        check(fails, "mse", (any::<u64>(), 1usize..6), |(seed, horizon)| {
            let cfg = ExperimentConfig {
                trials: 3,
                horizon,
                seed,
                tolerances: vec![0.0, 0.05],
                rules: vec![SigmaRule::cubature()],
                pf_particles: vec![20],
                ..ExperimentConfig::desk(Experiment::MassSpringBalanced)
            };
            let a = run_mass_spring(&cfg).unwrap();
            for s in &a.series {
                let mean = s.per_time.iter().sum::<f64>() / s.per_time.len() as f64;
                ensure((s.overall - mean).abs() <= 1e-12 * mean.max(1.0), "overall is not the mean")?;
                ensure(s.per_time.iter().all(|v| *v >= 0.0), "negative MSE")?;
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
            let b = pool.install(|| run_mass_spring(&cfg).unwrap());
            let (mut ca, mut cb) = (Vec::new(), Vec::new());
            a.write_by_time_csv(&mut ca).unwrap();
            b.write_by_time_csv(&mut cb).unwrap();
            ensure(ca == cb, "results depend on scheduling")
        })
    });

    let ok = failures.is_empty();
    let detail = format!("{count} properties x 100 cases, failures {failures:?}");
    assert!(report(12, "property suites", ok, &detail, start.elapsed(), Duration::from_secs(300)));
}
