//! Monte Carlo engine: Kronecker-correlation DGPs and a deterministic
//! replication scheduler.
//!
//! Replication `r` draws from its own `ChaCha8Rng` stream seeded with
//! `seed ^ r`, and per-replication outcomes are collected in index order
//! before a serial reduction. Summaries are therefore bit-identical for any
//! worker count.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrix, FactorDims};
use crate::error::{dim_mismatch, Error, Result};
use crate::infer::{normal_quantile_upper, normal_sf, overid_test};
use crate::matfun::{spd_log, spd_power, SpdMatrix};
use crate::mdest::{md_estimate, WeightSpec};
use crate::moments::{compute_moments_with, gaussian_v, MomentOptions, Panel, Regime};
use crate::qmle::{one_step, LikelihoodContext};

/// Smallest replication budget accepted by [`run_study`].
pub const MIN_REPLICATIONS: usize = 200;
/// Share of failed replications above which a cell is flagged invalid.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Innovation {
    Gaussian,
    /// Student t scaled to unit variance.
    StudentT(f64),
}

impl Innovation {
    fn validate(&self) -> Result<()> {
        match *self {
            Innovation::Gaussian => Ok(()),
            Innovation::StudentT(df) if df > 8.0 && df.is_finite() => Ok(()),
            Innovation::StudentT(df) => Err(Error::InvalidConfig(format!(
                "Student t innovations need df > 8 for finite eighth moments, got {df}"
            ))),
        }
    }
}

/// Non-Kronecker alternative: `delta` added to one off-diagonal correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct DgpSpec {
    pub dims: FactorDims,
    pub theta0: DVector<f64>,
    pub d0: DVector<f64>,
    pub innovation: Innovation,
    pub t: usize,
    pub seed: u64,
    pub perturbation: Option<Perturbation>,
    correlation: SpdMatrix,
    root: DMatrix<f64>,
}

impl DgpSpec {
    pub fn new(
        dims: FactorDims,
        theta0: DVector<f64>,
        d0: DVector<f64>,
        innovation: Innovation,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        innovation.validate()?;
        let n = dims.n();
        if d0.len() != n {
            return Err(dim_mismatch(format!("{n} variances"), d0.len()));
        }
        if let Some((index, &value)) = d0.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
            return Err(Error::NonPositiveDiagonal { index, value });
        }
        if t < 2 {
            return Err(Error::InvalidConfig(format!("sample size must be at least 2, got {t}")));
        }
        let design = DesignMatrix::build(&dims);
        let (correlation, _) = design.theta_to_correlation(&theta0)?;
        let mut spec = Self {
            dims,
            theta0,
            d0,
            innovation,
            t,
            seed,
            perturbation: None,
            root: DMatrix::zeros(0, 0),
            correlation,
        };
        spec.refresh_root()?;
        Ok(spec)
    }

    /// Builds `theta0` from correlation factors.
    pub fn from_factors(
        factors: &[DMatrix<f64>],
        d0: DVector<f64>,
        innovation: Innovation,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        let dims = FactorDims::new(factors.iter().map(|f| f.nrows()).collect())?;
        let logs = factors
            .iter()
            .map(|f| Ok(spd_log(&SpdMatrix::new(f.clone())?).into_inner()))
            .collect::<Result<Vec<_>>>()?;
        let theta0 = DesignMatrix::build(&dims).theta_from_factor_logs(&logs)?;
        Self::new(dims, theta0, d0, innovation, t, seed)
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Result<Self> {
        let n = self.dims.n();
        if p.row >= n || p.col >= n || p.row == p.col {
            return Err(Error::InvalidConfig(format!(
                "perturbation must hit an off-diagonal entry of a {n}x{n} matrix, got ({}, {})",
                p.row, p.col
            )));
        }
        let mut m = self.correlation.as_matrix().clone();
        m[(p.row, p.col)] += p.delta;
        m[(p.col, p.row)] += p.delta;
        self.correlation = SpdMatrix::new(m)?;
        self.perturbation = Some(p);
        self.refresh_root()?;
        Ok(self)
    }

    pub fn with_t(&self, t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidConfig(format!("sample size must be at least 2, got {t}")));
        }
        let mut s = self.clone();
        s.t = t;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.dims.n()
    }

    /// Correlation of the generated series (perturbed if requested).
    pub fn correlation(&self) -> &SpdMatrix {
        &self.correlation
    }

    /// `D^1/2 Theta D^1/2`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = self.d0.map(f64::sqrt);
        let c = self.correlation.as_matrix();
        DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| s[i] * c[(i, j)] * s[j])
    }

    fn refresh_root(&mut self) -> Result<()> {
        self.root = spd_power(&SpdMatrix::new(self.covariance())?, 0.5).into_inner();
        Ok(())
    }
}

/// Panel for replication `rep`; rows are `eps_t^T Sigma^1/2` with zero mean.
pub fn simulate_panel(spec: &DgpSpec, rep: u64) -> Panel {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ rep);
    let eps = match spec.innovation {
        Innovation::Gaussian => DMatrix::<f64>::from_fn(spec.t, n, |_, _| rng.sample(StandardNormal)),
        Innovation::StudentT(df) => {
            let dist = StudentT::new(df).expect("df validated at construction");
            let scale = ((df - 2.0) / df).sqrt();
            DMatrix::<f64>::from_fn(spec.t, n, |_, _| dist.sample(&mut rng) * scale)
        }
    };
    Panel::new(eps * &spec.root).expect("simulated panel is finite and rectangular")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    MdIdentity,
    MdOptimal,
    /// One Newton step from the identity-weighted estimate.
    OneStep,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::MdIdentity => "md-identity",
            Estimator::MdOptimal => "md-optimal",
            Estimator::OneStep => "one-step",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub overid: bool,
    pub regime: Regime,
    /// Contrast used for intervals and studentized statistics.
    pub contrast: Vec<f64>,
    pub level: f64,
    /// Use the Gaussian form of `V` rather than the fourth-moment estimate.
    pub gaussian_v: bool,
}

impl StudyConfig {
    pub fn new(replications: usize, num_params: usize) -> Self {
        let mut contrast = vec![0.0; num_params];
        if let Some(c) = contrast.first_mut() {
            *c = 1.0;
        }
        Self {
            replications,
            estimators: vec![Estimator::MdIdentity, Estimator::OneStep],
            overid: true,
            regime: Regime::KnownD,
            contrast,
            level: 0.05,
            gaussian_v: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Share of nominal `1 - level` contrast intervals covering the truth.
    pub coverage: f64,
    pub studentized_mean: f64,
    pub studentized_variance: f64,
    /// Kolmogorov-Smirnov distance of the studentized sample from N(0, 1).
    pub ks_distance: f64,
    /// Sample variance of `sqrt(T) c^T estimate`.
    pub scaled_contrast_variance: f64,
    pub studentized: Vec<f64>,
    pub estimates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OveridSummary {
    pub df: usize,
    pub rejection_rate: f64,
    pub mean_statistic: f64,
    pub statistics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    /// Failure counts by error kind.
    pub failure_kinds: BTreeMap<String, usize>,
    pub invalid: bool,
    pub t: usize,
    pub seed: u64,
    pub theta0: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
    pub overid: Option<OveridSummary>,
}

impl McSummary {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

struct RepOutcome {
    estimates: Vec<(Vec<f64>, f64, f64)>,
    overid: Option<(f64, usize, bool)>,
}

fn run_replication(
    spec: &DgpSpec,
    design: &DesignMatrix,
    cfg: &StudyConfig,
    c: &DVector<f64>,
    rep: u64,
) -> Result<RepOutcome> {
    let panel = simulate_panel(spec, rep);
    let opts = MomentOptions {
        known_d: Some(spec.d0.clone()),
        gaussian_v: cfg.gaussian_v,
        ..MomentOptions::default()
    };
    let moments = compute_moments_with(&panel, &opts)?;
    let mut identity = None;
    let mut estimates = Vec::with_capacity(cfg.estimators.len());
    for est in &cfg.estimators {
        if identity.is_none() && *est != Estimator::MdOptimal {
            identity = Some(md_estimate(&moments, design, &WeightSpec::Identity, cfg.regime)?);
        }
        let (theta, (value, se)) = match est {
            Estimator::MdIdentity => {
                let md = identity.as_ref().expect("computed above");
                (md.theta.clone(), md.contrast(c)?)
            }
            Estimator::MdOptimal => {
                let md = md_estimate(&moments, design, &WeightSpec::FeasibleOptimal, cfg.regime)?;
                let r = md.contrast(c)?;
                (md.theta, r)
            }
            Estimator::OneStep => {
                let ctx = LikelihoodContext::from_moments(&moments, design, cfg.regime)?;
                let os = one_step(identity.as_ref().expect("computed above"), &ctx)?;
                let r = os.contrast(c)?;
                (os.theta_tilde, r)
            }
        };
        estimates.push((theta.as_slice().to_vec(), value, se));
    }
    let overid = if cfg.overid {
        let (res, _) = overid_test(&moments, design, cfg.regime)?;
        Some((res.statistic, res.df, res.rejects(cfg.level)))
    } else {
        None
    };
    Ok(RepOutcome { estimates, overid })
}

/// Runs `cfg.replications` replications of one DGP cell on `workers` threads
/// (0 = rayon default).
pub fn run_study(spec: &DgpSpec, cfg: &StudyConfig, workers: usize) -> Result<McSummary> {
    if cfg.replications < MIN_REPLICATIONS {
        return Err(Error::InvalidConfig(format!(
            "replication budget {} is below the minimum of {MIN_REPLICATIONS}",
            cfg.replications
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {}", cfg.level)));
    }
    let design = DesignMatrix::build(&spec.dims);
    if cfg.contrast.len() != design.num_params() {
        return Err(dim_mismatch(design.num_params(), cfg.contrast.len()));
    }
    let c = DVector::from_column_slice(&cfg.contrast);
    let outcomes = parallel_map(cfg.replications, workers, |r| {
        run_replication(spec, &design, cfg, &c, r as u64)
    })?;
    Ok(summarize(spec, cfg, &c, outcomes))
}

/// Runs `f(0..count)` on a pool of `workers` threads, preserving index order.
pub fn parallel_map<T, F>(count: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(&f).collect()))
}

fn summarize(spec: &DgpSpec, cfg: &StudyConfig, c: &DVector<f64>, outcomes: Vec<Result<RepOutcome>>) -> McSummary {
    let mut failure_kinds = BTreeMap::new();
    let mut ok = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(o) => ok.push(o),
            Err(e) => *failure_kinds.entry(e.kind().to_string()).or_insert(0) += 1,
        }
    }
    let failures = cfg.replications - ok.len();
    let truth = c.dot(&spec.theta0);
    let z = normal_quantile_upper(cfg.level / 2.0);
    let sqrt_t = (spec.t as f64).sqrt();

    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, est)| {
            let estimates: Vec<Vec<f64>> = ok.iter().map(|o| o.estimates[k].0.clone()).collect();
            let (bias, rmse) = bias_rmse(&estimates, spec.theta0.as_slice());
            let studentized: Vec<f64> = ok
                .iter()
                .map(|o| {
                    let (_, v, se) = o.estimates[k];
                    (v - truth) / se
                })
                .collect();
            let covered = studentized.iter().filter(|s| s.abs() <= z).count();
            let scaled: Vec<f64> = ok.iter().map(|o| sqrt_t * o.estimates[k].1).collect();
            let (studentized_mean, studentized_variance) = mean_var(&studentized);
            EstimatorSummary {
                name: est.name().to_string(),
                bias,
                rmse,
                coverage: ratio(covered, studentized.len()),
                studentized_mean,
                studentized_variance,
                ks_distance: ks_normal(&studentized),
                scaled_contrast_variance: mean_var(&scaled).1,
                studentized,
                estimates,
            }
        })
        .collect();

    let overid = cfg.overid.then(|| {
        let stats: Vec<f64> = ok.iter().filter_map(|o| o.overid.map(|x| x.0)).collect();
        let rejections = ok.iter().filter(|o| o.overid.is_some_and(|x| x.2)).count();
        OveridSummary {
            df: ok.first().and_then(|o| o.overid.map(|x| x.1)).unwrap_or(0),
            rejection_rate: ratio(rejections, stats.len()),
            mean_statistic: mean_var(&stats).0,
            statistics: stats,
        }
    });

    McSummary {
        replications: cfg.replications,
        successes: ok.len(),
        failures,
        failure_kinds,
        invalid: failures as f64 > MAX_FAILURE_SHARE * cfg.replications as f64,
        t: spec.t,
        seed: spec.seed,
        theta0: spec.theta0.as_slice().to_vec(),
        estimators,
        overid,
    }
}

fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        k as f64 / n as f64
    }
}

/// Mean and sample variance (divisor `n - 1`).
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (mean, var)
}

fn bias_rmse(estimates: &[Vec<f64>], truth: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = estimates.len() as f64;
    let mut bias = vec![0.0; truth.len()];
    let mut mse = vec![0.0; truth.len()];
    for e in estimates {
        for (k, (&x, &t0)) in e.iter().zip(truth).enumerate() {
            bias[k] += x - t0;
            mse[k] += (x - t0).powi(2);
        }
    }
    (
        bias.into_iter().map(|b| b / n).collect(),
        mse.into_iter().map(|m| (m / n).sqrt()).collect(),
    )
}

/// `sup |F_n - Phi|` for the sample `x`.
pub fn ks_normal(x: &[f64]) -> f64 {
    let mut s: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = normal_sf(-v);
            ((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Values along a sample-size ladder and the ratios between neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderSummary {
    pub sample_sizes: Vec<usize>,
    pub values: Vec<f64>,
    /// `values[k] / values[k + 1]`.
    pub ratios: Vec<f64>,
}

impl LadderSummary {
    fn from_values(sample_sizes: Vec<usize>, values: Vec<f64>) -> Self {
        let ratios = values.windows(2).map(|w| w[0] / w[1]).collect();
        Self {
            sample_sizes,
            values,
            ratios,
        }
    }
}

/// Median of `max |V_hat - V|` over `reps` panels at each sample size, with
/// `V` the Gaussian fourth-moment matrix of the true covariance.
pub fn v_hat_rate(spec: &DgpSpec, sample_sizes: &[usize], reps: usize, workers: usize) -> Result<LadderSummary> {
    if spec.innovation != Innovation::Gaussian {
        return Err(Error::InvalidConfig("the V rate check needs Gaussian innovations".into()));
    }
    let v = gaussian_v(&spec.covariance());
    let mut medians = Vec::with_capacity(sample_sizes.len());
    for &t in sample_sizes {
        let cell = spec.with_t(t)?;
        let errs = parallel_map(reps, workers, |r| -> Result<f64> {
            let m = compute_moments_with(&simulate_panel(&cell, r as u64), &MomentOptions::default())?;
            Ok((&m.v_hat - &v).amax())
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        medians.push(median(errs));
    }
    Ok(LadderSummary::from_values(sample_sizes.to_vec(), medians))
}

/// Root mean squared error of the contrast along a sample-size ladder.
pub fn rmse_ladder(
    spec: &DgpSpec,
    cfg: &StudyConfig,
    sample_sizes: &[usize],
    estimator: Estimator,
    workers: usize,
) -> Result<LadderSummary> {
    let mut cfg = cfg.clone();
    cfg.estimators = vec![estimator];
    cfg.overid = false;
    let c = DVector::from_column_slice(&cfg.contrast);
    let truth = c.dot(&spec.theta0);
    let mut values = Vec::with_capacity(sample_sizes.len());
    for &t in sample_sizes {
        let s = run_study(&spec.with_t(t)?, &cfg, workers)?;
        let e = &s.estimators[0];
        let mse = e
            .estimates
            .iter()
            .map(|x| (c.dot(&DVector::from_column_slice(x)) - truth).powi(2))
            .sum::<f64>()
            / e.estimates.len() as f64;
        values.push(mse.sqrt());
    }
    Ok(LadderSummary::from_values(sample_sizes.to_vec(), values))
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => x[n / 2],
        _ => 0.5 * (x[n / 2 - 1] + x[n / 2]),
    }
}
