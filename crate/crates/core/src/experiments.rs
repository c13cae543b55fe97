//! Monte Carlo studies: filters scored on least-favorable datasets of the
//! worst-case model, and on mass-spring trajectories whose actual parameters
//! differ from the nominal ones.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::run_particle_filter;
use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterKind, ResilientConfig};
use crate::lfm::{mh_sample, LfmKind, MhConfig, MhOutput};
use crate::model::{mass_spring_model, worstcase_model_with, MassSpringParams, NonlinearModel, Trajectory, WorstCaseDrift};
use crate::numerics::Vector;
use crate::rng::{self, derive_seed, label_id};
use crate::sigma::SigmaRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Worstcase,
    MassSpringMeasurementDominant,
    MassSpringBalanced,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Worstcase => "worstcase",
            Experiment::MassSpringMeasurementDominant => "mass_spring_measurement_dominant",
            Experiment::MassSpringBalanced => "mass_spring_balanced",
        }
    }

    pub fn is_mass_spring(&self) -> bool {
        !matches!(self, Experiment::Worstcase)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "worstcase" | "worst_case" => Ok(Experiment::Worstcase),
            "mass_spring_measurement_dominant" => Ok(Experiment::MassSpringMeasurementDominant),
            "mass_spring_balanced" => Ok(Experiment::MassSpringBalanced),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

/// Which point estimate is compared with `x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    /// One-step prediction `x̂_t` from `y_0 .. y_{t-1}`.
    Prediction,
    /// Filtered estimate `x̂_{t|t}`.
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Number of trajectories `M`.
    pub trials: usize,
    /// Horizon `N`: observations `y_0 .. y_N`, errors scored at `t = 1 .. N`.
    pub horizon: usize,
    /// Tolerance grid of the resilient filters. The worst-case datasets are
    /// generated with the first entry.
    pub tolerances: Vec<f64>,
    pub rules: Vec<SigmaRule>,
    pub filters: Vec<FilterKind>,
    /// Particle counts of the bootstrap filter (mass-spring only).
    pub pf_particles: Vec<usize>,
    pub mh: MhConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub worstcase_drift: WorstCaseDrift,
    /// Estimate scored in the mass-spring study.
    pub mass_spring_estimate: EstimateKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk(Experiment::Worstcase)
    }
}

impl ExperimentConfig {
    /// Reduced-size defaults that finish in minutes.
    pub fn desk(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            trials: 100,
            horizon: 50,
            tolerances: vec![1e-3],
            rules: vec![SigmaRule::default_unscented(), SigmaRule::cubature()],
            filters: vec![
                FilterKind::Standard,
                FilterKind::PredictionResilient,
                FilterKind::UpdateResilient,
            ],
            pf_particles: Vec::new(),
            mh: MhConfig {
                burn_in: 200,
                thinning: 5,
                ..MhConfig::default()
            },
            seed: 0,
            output_dir: PathBuf::from("out"),
            worstcase_drift: WorstCaseDrift::default(),
            mass_spring_estimate: EstimateKind::Prediction,
        };
        let pf = vec![100, 500, 1000, 2000, 5000, 10000, 20000];
        match experiment {
            Experiment::Worstcase => base,
            Experiment::MassSpringMeasurementDominant => ExperimentConfig {
                trials: 200,
                tolerances: vec![0.0, 1e-4, 1e-3, 0.01, 0.03, 0.05, 0.1],
                pf_particles: pf,
                ..base
            },
            Experiment::MassSpringBalanced => ExperimentConfig {
                trials: 200,
                tolerances: vec![0.0, 1e-4, 0.01, 0.1, 0.2, 0.3, 0.5],
                pf_particles: pf,
                ..base
            },
        }
    }

    /// Full trial counts: 500 datasets per simulator and
    /// 1000 mass-spring trials.
    pub fn full_scale(experiment: Experiment) -> Self {
        let trials = if experiment.is_mass_spring() { 1000 } else { 500 };
        ExperimentConfig {
            trials,
            ..ExperimentConfig::desk(experiment)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "trials and horizon must be positive, got {} and {}",
                self.trials, self.horizon
            )));
        }
        if self.tolerances.is_empty() {
            return Err(Error::Config("at least one tolerance is required".into()));
        }
        if let Some(c) = self.tolerances.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::Config(format!("tolerances must be finite and >= 0, got {c}")));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("at least one sigma rule is required".into()));
        }
        if self.pf_particles.contains(&0) {
            return Err(Error::Config("particle counts must be positive".into()));
        }
        self.mh.validate()
    }

    /// Seed of trial `k`, independent of scheduling.
    pub fn trial_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, &[label_id(self.experiment.as_str()), k as u64])
    }
}

/// Mean squared error of one filter setting on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MseSeries {
    pub dataset: String,
    pub filter: String,
    /// Tolerance of a resilient filter.
    pub c: Option<f64>,
    /// Particle count of the bootstrap filter.
    pub particles: Option<usize>,
    /// `MSE_t` for `t = 1 .. N`.
    pub per_time: Vec<f64>,
    /// Mean of `per_time`.
    pub overall: f64,
    /// Trajectories that entered the average.
    pub trials: usize,
    /// Trajectories on which the filter failed numerically.
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MseReport {
    pub series: Vec<MseSeries>,
}

impl MseReport {
    pub fn find(&self, dataset: &str, filter: &str, c: Option<f64>) -> Option<&MseSeries> {
        self.series
            .iter()
            .find(|s| s.dataset == dataset && s.filter == filter && s.c == c && s.particles.is_none())
    }

    pub fn find_pf(&self, dataset: &str, particles: usize) -> Option<&MseSeries> {
        self.series
            .iter()
            .find(|s| s.dataset == dataset && s.particles == Some(particles))
    }

    /// Lowest overall MSE of `filter` over its tolerance grid.
    pub fn best(&self, dataset: &str, filter: &str) -> Option<&MseSeries> {
        self.series
            .iter()
            .filter(|s| s.dataset == dataset && s.filter == filter && s.particles.is_none())
            .min_by(|a, b| a.overall.total_cmp(&b.overall))
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.series {
            if !out.contains(&s.dataset) {
                out.push(s.dataset.clone());
            }
        }
        out
    }

    fn horizon(&self) -> usize {
        self.series.iter().map(|s| s.per_time.len()).max().unwrap_or(0)
    }

    /// Wide table: one row per series, columns `mse_t1 .. mse_tN`.
    pub fn write_by_time_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["dataset", "filter", "c", "particles"].map(String::from).to_vec();
        header.extend((1..=self.horizon()).map(|t| format!("mse_t{t}")));
        out.write_record(&header)?;
        for s in &self.series {
            let mut row = key_fields(s);
            row.extend(s.per_time.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_overall_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["dataset", "filter", "c", "particles", "overall", "trials", "failures"])?;
        for s in &self.series {
            let mut row = key_fields(s);
            row.extend([s.overall.to_string(), s.trials.to_string(), s.failures.to_string()]);
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long format: one row per `(series, t)`.
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["dataset", "filter", "c", "particles", "t", "mse"])?;
        for s in &self.series {
            for (i, v) in s.per_time.iter().enumerate() {
                let mut row = key_fields(s);
                row.extend([(i + 1).to_string(), v.to_string()]);
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Rebuilds a report from the files written by
    /// [`MseReport::write_by_time_csv`] and [`MseReport::write_overall_csv`].
    pub fn read_csv<R1: std::io::Read, R2: std::io::Read>(by_time: R1, overall: R2) -> Result<Self> {
        let parse_err = |what: &str| Error::Config(format!("malformed report field '{what}'"));
        let mut series = Vec::new();
        let mut by_time = csv::Reader::from_reader(by_time);
        for record in by_time.records() {
            let record = record?;
            let per_time = record
                .iter()
                .skip(4)
                .filter(|v| !v.is_empty())
                .map(|v| v.parse::<f64>().map_err(|_| parse_err(v)))
                .collect::<Result<Vec<_>>>()?;
            series.push(MseSeries {
                dataset: record[0].to_string(),
                filter: record[1].to_string(),
                c: parse_optional(&record[2]).map_err(|_| parse_err("c"))?,
                particles: parse_optional(&record[3]).map_err(|_| parse_err("particles"))?,
                per_time,
                overall: f64::NAN,
                trials: 0,
                failures: 0,
            });
        }
        let mut overall = csv::Reader::from_reader(overall);
        for (s, record) in series.iter_mut().zip(overall.records()) {
            let record = record?;
            s.overall = record[4].parse().map_err(|_| parse_err("overall"))?;
            s.trials = record[5].parse().map_err(|_| parse_err("trials"))?;
            s.failures = record[6].parse().map_err(|_| parse_err("failures"))?;
        }
        Ok(MseReport { series })
    }

    /// Table with one row per tolerance (and per particle count), one column
    /// per filter. Standard filters repeat their single value on every row.
    pub fn write_table_csv<W: Write>(&self, dataset: &str, writer: W) -> Result<()> {
        let rows: Vec<&MseSeries> = self.series.iter().filter(|s| s.dataset == dataset).collect();
        let mut tolerances: Vec<f64> = Vec::new();
        let mut columns: Vec<String> = Vec::new();
        let mut particles: Vec<usize> = Vec::new();
        for s in &rows {
            if let Some(np) = s.particles {
                if !particles.contains(&np) {
                    particles.push(np);
                }
                continue;
            }
            if let Some(c) = s.c {
                if !tolerances.contains(&c) {
                    tolerances.push(c);
                }
            }
            if !columns.contains(&s.filter) {
                columns.push(s.filter.clone());
            }
        }
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["c".to_string()];
        header.extend(columns.iter().cloned());
        header.extend(["particles".to_string(), "PF".to_string()]);
        out.write_record(&header)?;
        for i in 0..tolerances.len().max(particles.len()) {
            let c = tolerances.get(i).copied();
            let mut row = vec![c.map(|v| v.to_string()).unwrap_or_default()];
            for name in &columns {
                let cell = rows
                    .iter()
                    .find(|s| &s.filter == name && s.particles.is_none() && (s.c.is_none() || s.c == c))
                    .filter(|s| s.c.is_none() || c.is_some());
                row.push(cell.map(|s| s.overall.to_string()).unwrap_or_default());
            }
            match particles.get(i) {
                Some(&np) => {
                    row.push(np.to_string());
                    row.push(self.find_pf(dataset, np).map(|s| s.overall.to_string()).unwrap_or_default());
                }
                None => row.extend([String::new(), String::new()]),
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn key_fields(s: &MseSeries) -> Vec<String> {
    vec![
        s.dataset.clone(),
        s.filter.clone(),
        s.c.map(|v| v.to_string()).unwrap_or_default(),
        s.particles.map(|v| v.to_string()).unwrap_or_default(),
    ]
}

fn parse_optional<T: FromStr>(text: &str) -> std::result::Result<Option<T>, T::Err> {
    if text.is_empty() {
        Ok(None)
    } else {
        text.parse().map(Some)
    }
}

/// One estimator evaluated in a study.
#[derive(Debug, Clone)]
enum Estimator {
    Filter { kind: FilterKind, rule: SigmaRule, c: Option<f64> },
    Particles(usize),
}

impl Estimator {
    fn name(&self) -> String {
        match self {
            Estimator::Filter { kind, rule, .. } => kind.display_name(rule),
            Estimator::Particles(_) => "PF".into(),
        }
    }

    fn is_resilient(kind: FilterKind) -> bool {
        matches!(kind, FilterKind::PredictionResilient | FilterKind::UpdateResilient)
    }

    /// Squared errors `||x_t - x̂_t||^2` for `t = 1 .. N`.
    fn squared_errors(
        &self,
        model: &NonlinearModel,
        traj: &Trajectory,
        estimate: EstimateKind,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let estimates: Vec<Vector> = match self {
            Estimator::Filter { kind, rule, c } => {
                let cfg = ResilientConfig::new(rule.clone(), c.unwrap_or(0.0));
                let trace = run_filter(model, *kind, &traj.observations, &cfg)?;
                match estimate {
                    EstimateKind::Prediction => trace.predictions(),
                    EstimateKind::Filtered => trace.filtered(),
                }
            }
            Estimator::Particles(count) => {
                let trace = run_particle_filter(model, &traj.observations, *count, derive_seed(seed, &[*count as u64]))?;
                match estimate {
                    EstimateKind::Prediction => trace.predictions,
                    EstimateKind::Filtered => trace.filtered,
                }
            }
        };
        let horizon = traj.horizon();
        Ok((1..=horizon)
            .map(|t| (&traj.states[t] - &estimates[t]).norm_squared())
            .collect())
    }
}

/// Standard filters once per rule, resilient ones once per rule and
/// tolerance, then the particle filters.
fn estimators(cfg: &ExperimentConfig, with_pf: bool) -> Vec<Estimator> {
    let mut out = Vec::new();
    for &c in &cfg.tolerances {
        for rule in &cfg.rules {
            for &kind in &cfg.filters {
                if Estimator::is_resilient(kind) {
                    out.push(Estimator::Filter {
                        kind,
                        rule: rule.clone(),
                        c: Some(c),
                    });
                }
            }
        }
    }
    for rule in &cfg.rules {
        for &kind in &cfg.filters {
            if !Estimator::is_resilient(kind) {
                out.push(Estimator::Filter {
                    kind,
                    rule: rule.clone(),
                    c: None,
                });
            }
        }
    }
    if with_pf {
        out.extend(cfg.pf_particles.iter().map(|&np| Estimator::Particles(np)));
    }
    out
}

/// Squared-error curves of every estimator on one trajectory; `None` marks
/// a numerical failure.
type TrialErrors = Vec<Option<Vec<f64>>>;

/// Averages per-trial errors in trial order, so the result does not depend
/// on how the trials were scheduled.
fn aggregate(dataset: &str, estimators: &[Estimator], trials: &[TrialErrors], horizon: usize) -> Vec<MseSeries> {
    estimators
        .iter()
        .enumerate()
        .map(|(j, est)| {
            let mut sums = vec![0.0; horizon];
            let mut used = 0usize;
            for trial in trials {
                if let Some(errors) = &trial[j] {
                    sums.iter_mut().zip(errors).for_each(|(s, e)| *s += e);
                    used += 1;
                }
            }
            let per_time: Vec<f64> = if used == 0 {
                vec![f64::NAN; horizon]
            } else {
                sums.iter().map(|s| s / used as f64).collect()
            };
            let overall = per_time.iter().sum::<f64>() / horizon as f64;
            let (c, particles) = match est {
                Estimator::Filter { c, .. } => (*c, None),
                Estimator::Particles(np) => (None, Some(*np)),
            };
            MseSeries {
                dataset: dataset.to_string(),
                filter: est.name(),
                c,
                particles,
                per_time,
                overall,
                trials: used,
                failures: trials.len() - used,
            }
        })
        .collect()
}

fn score_trajectory(
    model: &NonlinearModel,
    estimators: &[Estimator],
    traj: &Trajectory,
    estimate: EstimateKind,
    seed: u64,
) -> TrialErrors {
    estimators
        .iter()
        .map(|est| est.squared_errors(model, traj, estimate, seed).ok())
        .collect()
}

/// One least-favorable dataset of the worst-case study.
#[derive(Debug, Clone)]
pub struct LfmDataset {
    /// Name of the simulator, e.g. `P-UKF`.
    pub name: String,
    pub kind: LfmKind,
    pub rule: SigmaRule,
    pub tolerance: f64,
    pub chain: MhOutput,
}

/// Summary of one chain for `diagnostics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub name: String,
    pub seed: u64,
    pub proposals: usize,
    pub burn_in_proposals: Option<usize>,
    pub acceptance_rate: f64,
    pub post_burn_in_acceptance_rate: f64,
    /// Min, lower quartile, median, upper quartile and max of `r`.
    pub r_quantiles: [usize; 5],
    pub samples: usize,
}

/// Nearest-rank quantiles of a set of counts.
pub fn quantiles(values: &[usize], probs: &[f64]) -> Vec<usize> {
    if values.is_empty() {
        return vec![0; probs.len()];
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    probs
        .iter()
        .map(|p| {
            let rank = (p * (sorted.len() - 1) as f64).round() as usize;
            sorted[rank.min(sorted.len() - 1)]
        })
        .collect()
}

impl LfmDataset {
    pub fn summary(&self, seed: u64) -> ChainSummary {
        let q = quantiles(&self.chain.r_log, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        ChainSummary {
            name: self.name.clone(),
            seed,
            proposals: self.chain.proposals(),
            burn_in_proposals: self.chain.burn_in_proposals,
            acceptance_rate: self.chain.acceptance_rate(),
            post_burn_in_acceptance_rate: self.chain.post_burn_in_acceptance_rate(),
            r_quantiles: [q[0], q[1], q[2], q[3], q[4]],
            samples: self.chain.samples.len(),
        }
    }
}

/// Seed of the chain behind dataset `index`.
pub fn dataset_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, &[label_id(cfg.experiment.as_str()), label_id("dataset"), index as u64])
}

/// Runs one MH chain per (case, rule) pair at the first tolerance, with
/// `M` samples each.
pub fn generate_lfm_datasets(cfg: &ExperimentConfig) -> Result<Vec<LfmDataset>> {
    cfg.validate()?;
    let model = worstcase_model_with(cfg.worstcase_drift);
    let tolerance = cfg.tolerances[0];
    let mut jobs = Vec::new();
    for kind in [LfmKind::Prediction, LfmKind::Update] {
        for rule in &cfg.rules {
            jobs.push((kind, rule.clone()));
        }
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, (kind, rule))| {
            let mh = MhConfig {
                num_samples: cfg.trials,
                seed: dataset_seed(cfg, i),
                ..cfg.mh
            };
            let resilient = ResilientConfig::new(rule.clone(), tolerance);
            let chain = mh_sample(&model, &resilient, kind, cfg.horizon, &mh)?;
            if chain.samples.len() < cfg.trials {
                return Err(Error::Config(format!(
                    "chain for {} produced {} of {} samples within {} proposals",
                    kind.filter_kind().display_name(&rule),
                    chain.samples.len(),
                    cfg.trials,
                    mh.max_proposals
                )));
            }
            Ok(LfmDataset {
                name: kind.filter_kind().display_name(&rule),
                kind,
                rule,
                tolerance,
                chain,
            })
        })
        .collect()
}

/// Scores every configured filter on the given datasets. Prediction-case
/// datasets score the predictions `x̂_t`, update-case ones the filtered
/// estimates `x̂_{t|t}`.
pub fn score_lfm_datasets(cfg: &ExperimentConfig, datasets: &[LfmDataset]) -> Result<MseReport> {
    cfg.validate()?;
    let model = worstcase_model_with(cfg.worstcase_drift);
    let ests = estimators(cfg, false);
    let mut report = MseReport::default();
    for data in datasets {
        let estimate = match data.kind {
            LfmKind::Prediction => EstimateKind::Prediction,
            LfmKind::Update => EstimateKind::Filtered,
        };
        let trials: Vec<TrialErrors> = data
            .chain
            .samples
            .par_iter()
            .map(|traj| score_trajectory(&model, &ests, traj, estimate, 0))
            .collect();
        let horizon = data.chain.samples.first().map_or(cfg.horizon, |t| t.horizon());
        report.series.extend(aggregate(&data.name, &ests, &trials, horizon));
    }
    Ok(report)
}

pub fn run_worstcase(cfg: &ExperimentConfig) -> Result<(MseReport, Vec<LfmDataset>)> {
    if cfg.experiment != Experiment::Worstcase {
        return Err(Error::Config(format!("run_worstcase called for {}", cfg.experiment)));
    }
    let datasets = generate_lfm_datasets(cfg)?;
    let report = score_lfm_datasets(cfg, &datasets)?;
    Ok((report, datasets))
}

/// Nominal parameters of the filters in a mass-spring scenario. `r` is the
/// measurement noise variance.
pub fn mass_spring_nominal(experiment: Experiment) -> MassSpringParams {
    let r: f64 = match experiment {
        Experiment::MassSpringBalanced => 0.1,
        _ => 1.0,
    };
    MassSpringParams {
        meas_noise: r.sqrt(),
        ..MassSpringParams::default()
    }
}

/// Actual parameters of one trial: hardening, friction coefficients and
/// measurement variance drawn uniformly, no displacement noise.
pub fn mass_spring_actual(experiment: Experiment, seed: u64) -> MassSpringParams {
    let mut rng = rng::stream(seed, rng::Stream::Parameters);
    let (r_lo, r_hi) = match experiment {
        Experiment::MassSpringBalanced => (0.1, 0.12),
        _ => (0.8, 1.2),
    };
    let hardening = rng.random_range(0.01..0.05);
    let mu_kinetic = rng.random_range(0.1..0.8);
    let mu_static = rng.random_range(0.1..0.8);
    let r: f64 = rng.random_range(r_lo..r_hi);
    MassSpringParams {
        hardening,
        mu_kinetic,
        mu_static,
        meas_noise: r.sqrt(),
        epsilon: 0.0,
        ..MassSpringParams::default()
    }
}

pub fn run_mass_spring(cfg: &ExperimentConfig) -> Result<MseReport> {
    if !cfg.experiment.is_mass_spring() {
        return Err(Error::Config(format!("run_mass_spring called for {}", cfg.experiment)));
    }
    cfg.validate()?;
    let nominal = mass_spring_model(mass_spring_nominal(cfg.experiment))?;
    let ests = estimators(cfg, true);
    let trials: Vec<TrialErrors> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.trial_seed(k);
            let actual = mass_spring_model(mass_spring_actual(cfg.experiment, seed))?;
            let traj = actual.simulate(cfg.horizon, seed);
            Ok(score_trajectory(&nominal, &ests, &traj, cfg.mass_spring_estimate, seed))
        })
        .collect::<Result<_>>()?;
    Ok(MseReport {
        series: aggregate(cfg.experiment.as_str(), &ests, &trials, cfg.horizon),
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub report: MseReport,
    pub datasets: Vec<LfmDataset>,
    pub runtime_secs: f64,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let (report, datasets) = if cfg.experiment.is_mass_spring() {
        (run_mass_spring(cfg)?, Vec::new())
    } else {
        run_worstcase(cfg)?
    };
    Ok(ExperimentOutput {
        config: cfg.clone(),
        report,
        datasets,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    experiment: Experiment,
    seed: u64,
    runtime_secs: f64,
    config: &'a ExperimentConfig,
    trial_seeds: Vec<u64>,
    chains: Vec<ChainSummary>,
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes `mse_by_time.csv`, `mse_overall.csv`, `mse_long.csv`,
/// `diagnostics.json`, plus `table.csv` for the mass-spring study and the
/// per-chain acceptance logs, `r` values and samples for the worst-case one.
pub fn emit_report(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = vec![
        "mse_by_time.csv".to_string(),
        "mse_overall.csv".to_string(),
        "mse_long.csv".to_string(),
    ];
    output.report.write_by_time_csv(create(dir, "mse_by_time.csv")?)?;
    output.report.write_overall_csv(create(dir, "mse_overall.csv")?)?;
    output.report.write_long_csv(create(dir, "mse_long.csv")?)?;
    if output.config.experiment.is_mass_spring() {
        output
            .report
            .write_table_csv(output.config.experiment.as_str(), create(dir, "table.csv")?)?;
        written.push("table.csv".into());
    }
    for data in &output.datasets {
        let stem = data.name.to_ascii_lowercase();
        let acceptance = format!("acceptance_{stem}.csv");
        data.chain.write_diagnostics_csv(create(dir, &acceptance)?)?;
        let r_values = format!("r_values_{stem}.csv");
        let mut w = csv::Writer::from_writer(create(dir, &r_values)?);
        w.write_record(["r"])?;
        for r in &data.chain.r_log {
            w.write_record([r.to_string()])?;
        }
        w.flush()?;
        let samples = format!("samples_{stem}.csv");
        data.chain.write_samples_csv(create(dir, &samples)?)?;
        written.extend([acceptance, r_values, samples]);
    }
    let cfg = &output.config;
    let diagnostics = Diagnostics {
        experiment: cfg.experiment,
        seed: cfg.seed,
        runtime_secs: output.runtime_secs,
        config: cfg,
        trial_seeds: if cfg.experiment.is_mass_spring() {
            (0..cfg.trials).map(|k| cfg.trial_seed(k)).collect()
        } else {
            (0..output.datasets.len()).map(|i| dataset_seed(cfg, i)).collect()
        },
        chains: output
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| d.summary(dataset_seed(cfg, i)))
            .collect(),
    };
    let mut w = create(dir, "diagnostics.json")?;
    serde_json::to_writer_pretty(&mut w, &diagnostics)?;
    w.flush()?;
    written.push("diagnostics.json".into());
    Ok(written.into_iter().map(|name| dir.join(name)).collect())
}
