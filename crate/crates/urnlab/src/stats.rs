//! Replica ensembles and the hypothesis tests behind the three limit
//! theorems: law-of-large-numbers convergence tables, normality of the
//! centered fluctuation field, covariance decay in N, and hitting-time
//! asymptotics.
//!
//! Determinism contract: replica r derives its RNG key as
//! `master.child(r)`, replicas are collected in index order, and every
//! reduction runs over that ordering, so reports are byte-identical for
//! any worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::KernelExpr;
use crate::grid::{dot_mean, GridFunction};
use crate::limit::{
    hitting_time_limit, solve_rho, theta_squared, FluctuationVariance,
};
use crate::model::{discretize, DiscretizedKernel, ModelSpec};
use crate::moments::{integrate_mean, integrate_moments};
use crate::rng::SeedKey;
use crate::sim::{run_trajectory, HitTarget, RateTables, Trajectory, TrajectoryConfig};

/// 99.5th percentile of the standard normal: half-width factor of a
/// two-sided 99% confidence interval.
pub const Z_99: f64 = 2.5758293035489004;

/// Asymptotic Kolmogorov-Smirnov critical coefficient at alpha = 0.01;
/// the threshold for n samples is this over sqrt(n).
pub const KS_CRITICAL_COEFF: f64 = 1.628;

pub const KS_MIN_SAMPLES: usize = 50;

/// Sample statistics of one observable.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub samples: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub std_error: f64,
    pub ci99_lo: f64,
    pub ci99_hi: f64,
}

pub fn summarize(name: &str, samples: &[f64]) -> Result<Summary> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { got: n, need: 2 });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let variance = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let std_error = (variance / n as f64).sqrt();
    Ok(Summary {
        name: name.to_string(),
        samples: n,
        mean,
        variance,
        std_error,
        ci99_lo: mean - Z_99 * std_error,
        ci99_hi: mean + Z_99 * std_error,
    })
}

/// Standard normal CDF via the Abramowitz & Stegun 7.1.26 rational
/// approximation of erf; absolute error below 1e-7 everywhere.
pub fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = sign * (1.0 - poly * (-x * x).exp());
    0.5 * (1.0 + erf)
}

/// One-sample Kolmogorov-Smirnov test against a normal law.
#[derive(Debug, Clone, Serialize)]
pub struct KsReport {
    pub samples: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub target_mean: f64,
    pub target_variance: f64,
}

pub fn ks_normal_test(samples: &[f64], target_mean: f64, target_variance: f64) -> Result<KsReport> {
    let n = samples.len();
    if n < KS_MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            got: n,
            need: KS_MIN_SAMPLES,
        });
    }
    if !(target_variance > 0.0) {
        return Err(Error::DegenerateVariance(target_variance));
    }
    let sd = target_variance.sqrt();
    let mut z: Vec<f64> = samples.iter().map(|x| (x - target_mean) / sd).collect();
    z.sort_by(|a, b| a.partial_cmp(b).expect("samples must be finite"));
    let nf = n as f64;
    let mut statistic = 0.0f64;
    for (i, &zi) in z.iter().enumerate() {
        let cdf = normal_cdf(zi);
        statistic = statistic
            .max((i + 1) as f64 / nf - cdf)
            .max(cdf - i as f64 / nf);
    }
    let threshold = KS_CRITICAL_COEFF / nf.sqrt();
    Ok(KsReport {
        samples: n,
        statistic,
        threshold,
        pass: statistic < threshold,
        target_mean,
        target_variance,
    })
}

/// Ordered, replica-indexed trajectories of one ensemble.
#[derive(Debug)]
pub struct EnsembleRuns {
    pub requested: usize,
    pub trajectories: Vec<(usize, Trajectory)>,
    /// Replica indices that hit the particle cap (at most 1% of the run).
    pub exploded: Vec<usize>,
}

impl EnsembleRuns {
    pub fn observable_samples(&self, record: usize, function: usize) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|(_, t)| t.mu[record][function])
            .collect()
    }

    /// Hitting times of one target: (times of replicas that hit, count
    /// that never hit).
    pub fn hit_samples(&self, target: usize) -> (Vec<f64>, usize) {
        let mut times = Vec::with_capacity(self.trajectories.len());
        let mut not_hit = 0;
        for (_, t) in &self.trajectories {
            match t.hits[target] {
                Some(tau) => times.push(tau),
                None => not_hit += 1,
            }
        }
        (times, not_hit)
    }

    pub fn extinct_count(&self) -> usize {
        self.trajectories
            .iter()
            .filter(|(_, t)| t.extinct_at.is_some())
            .count()
    }
}

/// Run `replicas` independent trajectories on a worker pool. Replica r's
/// key is `master.child(r)`, so the output is a pure function of the
/// arguments and identical for every worker count. Exploded replicas are
/// reported by index; more than 1% of them aborts the ensemble.
pub fn run_ensemble(
    kern: &DiscretizedKernel,
    tables: &RateTables,
    base: &TrajectoryConfig,
    replicas: usize,
    master: SeedKey,
    workers: usize,
) -> Result<EnsembleRuns> {
    if replicas < 2 {
        return Err(Error::TooFewSamples {
            got: replicas,
            need: 2,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        (0..replicas)
            .into_par_iter()
            .map(|r| {
                let cfg = TrajectoryConfig {
                    replica: r,
                    ..base.clone()
                };
                run_trajectory(kern, tables, &cfg, master.child(r as u64))
            })
            .collect()
    });
    let mut trajectories = Vec::with_capacity(replicas);
    let mut exploded = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => trajectories.push((r, t)),
            Err(Error::Explosion { .. }) => exploded.push(r),
            Err(other) => return Err(other),
        }
    }
    if exploded.len() * 100 > replicas {
        return Err(Error::ExplosionRate {
            exploded: exploded.len(),
            replicas,
        });
    }
    Ok(EnsembleRuns {
        requested: replicas,
        trajectories,
        exploded,
    })
}

/// Shared knobs of the three theorem experiments.
#[derive(Debug, Clone)]
pub struct ExperimentParams<'a> {
    pub spec: &'a ModelSpec,
    pub f_name: &'a str,
    pub f: &'a KernelExpr,
    pub n_urns: usize,
    pub t: f64,
    pub replicas: usize,
    /// Grid size for limit-side quantities (density, theta squared).
    pub grid_size: usize,
    pub step: f64,
    pub master: SeedKey,
    pub workers: usize,
    pub particle_cap: u64,
}

fn base_cfg<'a>(
    record_times: &'a [f64],
    functions: &'a [GridFunction],
    targets: &'a [HitTarget],
    horizon: f64,
    particle_cap: u64,
    stop_when_resolved: bool,
) -> TrajectoryConfig<'a> {
    TrajectoryConfig {
        horizon,
        record_times,
        functions,
        targets,
        particle_cap,
        record_events: false,
        record_snapshots: false,
        stop_when_resolved,
        replica: 0,
    }
}

/// Normality check of the centered, sqrt(N)-scaled field against the
/// predicted limit variance.
#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub experiment: String,
    pub f: String,
    pub n_urns: usize,
    pub t: f64,
    pub replicas: usize,
    pub grid_size: usize,
    pub step: f64,
    pub master_seed: u64,
    /// Exact finite-N expectation of the pairing, used as the centering.
    pub centering: f64,
    pub theta: FluctuationVariance,
    pub summary: Summary,
    /// Sample variance over the predicted limit variance.
    pub variance_ratio: f64,
    pub variance_within_10pct: bool,
    pub ks: KsReport,
    pub extinct: usize,
    pub exploded: usize,
    pub pass: bool,
}

pub fn clt_experiment(p: &ExperimentParams) -> Result<CltReport> {
    let kern_n = discretize(p.spec, p.n_urns);
    let f_n = GridFunction::from_expr(p.f, p.n_urns)?;
    let kern_m = discretize(p.spec, p.grid_size);
    let f_m = GridFunction::from_expr(p.f, p.grid_size)?;
    let theta = theta_squared(&f_m, &kern_m, p.t, p.step)?;
    let mean = integrate_mean(&kern_n, &[p.t], p.step)?;
    let centering = dot_mean(mean[0].1.as_slice().expect("contiguous"), f_n.values());
    let tables = RateTables::build(&kern_n);
    let record_times = [p.t];
    let functions = [f_n];
    let cfg = base_cfg(&record_times, &functions, &[], p.t, p.particle_cap, false);
    let runs = run_ensemble(&kern_n, &tables, &cfg, p.replicas, p.master, p.workers)?;
    let scale = (p.n_urns as f64).sqrt();
    let samples: Vec<f64> = runs
        .observable_samples(0, 0)
        .into_iter()
        .map(|mu| scale * (mu - centering))
        .collect();
    let summary = summarize("fluctuation", &samples)?;
    let ks = ks_normal_test(&samples, 0.0, theta.total)?;
    let variance_ratio = summary.variance / theta.total;
    let variance_within_10pct = (variance_ratio - 1.0).abs() <= 0.10;
    let pass = ks.pass && variance_within_10pct;
    Ok(CltReport {
        experiment: "clt".into(),
        f: p.f_name.to_string(),
        n_urns: p.n_urns,
        t: p.t,
        replicas: p.replicas,
        grid_size: p.grid_size,
        step: p.step,
        master_seed: p.master.value(),
        centering,
        theta,
        summary,
        variance_ratio,
        variance_within_10pct,
        ks,
        extinct: runs.extinct_count(),
        exploded: runs.exploded.len(),
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LlnRow {
    pub n_urns: usize,
    pub summary: Summary,
    /// |sample mean - limit value|.
    pub gap: f64,
    pub extinct: usize,
    pub exploded: usize,
}

/// Convergence of the empirical pairing toward the limit value across a
/// ladder of system sizes.
#[derive(Debug, Clone, Serialize)]
pub struct LlnReport {
    pub experiment: String,
    pub f: String,
    pub t: f64,
    pub replicas: usize,
    pub grid_size: usize,
    pub step: f64,
    pub master_seed: u64,
    pub limit_value: f64,
    pub rows: Vec<LlnRow>,
    pub mean_within_3se: bool,
    pub gap_shrinks: bool,
    /// The shrink exceeds the residual 99% half-width at the largest size.
    pub shrink_beyond_ci: bool,
    pub pass: bool,
}

pub fn lln_experiment(p: &ExperimentParams, n_list: &[usize]) -> Result<LlnReport> {
    if n_list.is_empty() {
        return Err(Error::Config("lln needs at least one system size".into()));
    }
    let kern_m = discretize(p.spec, p.grid_size);
    let f_m = GridFunction::from_expr(p.f, p.grid_size)?;
    let rho = solve_rho(&kern_m, p.t, p.step)?;
    let limit_value = dot_mean(rho.final_state().values(), f_m.values());
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let kern_n = discretize(p.spec, n);
        let f_n = GridFunction::from_expr(p.f, n)?;
        let tables = RateTables::build(&kern_n);
        let record_times = [p.t];
        let functions = [f_n];
        let cfg = base_cfg(&record_times, &functions, &[], p.t, p.particle_cap, false);
        let runs = run_ensemble(
            &kern_n,
            &tables,
            &cfg,
            p.replicas,
            p.master.child(n as u64),
            p.workers,
        )?;
        let samples = runs.observable_samples(0, 0);
        let summary = summarize(&format!("mu_N{n}"), &samples)?;
        rows.push(LlnRow {
            n_urns: n,
            gap: (summary.mean - limit_value).abs(),
            extinct: runs.extinct_count(),
            exploded: runs.exploded.len(),
            summary,
        });
    }
    let first = rows.first().expect("n_list nonempty");
    let last = rows.last().expect("n_list nonempty");
    let mean_within_3se = last.gap <= 3.0 * last.summary.std_error;
    let gap_shrinks = n_list.len() < 2 || first.gap > last.gap;
    let shrink_beyond_ci =
        n_list.len() < 2 || first.gap - last.gap > Z_99 * last.summary.std_error;
    let pass = mean_within_3se && gap_shrinks && shrink_beyond_ci;
    Ok(LlnReport {
        experiment: "lln".into(),
        f: p.f_name.to_string(),
        t: p.t,
        replicas: p.replicas,
        grid_size: p.grid_size,
        step: p.step,
        master_seed: p.master.value(),
        limit_value,
        rows,
        mean_within_3se,
        gap_shrinks,
        shrink_beyond_ci,
        pass,
    })
}

/// Hitting-time asymptotics: consistency of tau^N and normality of the
/// sqrt(N)-scaled deviation with variance theta^2_tau / slope^2.
#[derive(Debug, Clone, Serialize)]
pub struct HittingReport {
    pub experiment: String,
    pub f: String,
    pub level: f64,
    pub n_urns: usize,
    pub replicas: usize,
    pub grid_size: usize,
    pub step: f64,
    pub horizon: f64,
    pub master_seed: u64,
    pub tau: f64,
    pub slope: f64,
    pub theta_at_tau: FluctuationVariance,
    pub target_variance: f64,
    pub hit: usize,
    pub not_hit: usize,
    /// Fraction of all replicas with |tau^N - tau| > 0.1; replicas that
    /// never hit count as deviating.
    pub consistency_fraction: f64,
    pub summary: Summary,
    pub ks: KsReport,
    pub extinct: usize,
    pub exploded: usize,
    pub pass: bool,
}

pub fn hitting_experiment(p: &ExperimentParams, level: f64, horizon: f64) -> Result<HittingReport> {
    let kern_m = discretize(p.spec, p.grid_size);
    let f_m = GridFunction::from_expr(p.f, p.grid_size)?;
    let lim = hitting_time_limit(&f_m, level, &kern_m, p.step, horizon)?;
    if !lim.applicable {
        return Err(Error::HypothesisViolated { slope: lim.slope });
    }
    let theta_at_tau = theta_squared(&f_m, &kern_m, lim.tau, p.step)?;
    let target_variance = theta_at_tau.total / (lim.slope * lim.slope);
    let kern_n = discretize(p.spec, p.n_urns);
    let f_n = GridFunction::from_expr(p.f, p.n_urns)?;
    let tables = RateTables::build(&kern_n);
    let functions = [f_n];
    let targets = [HitTarget { function: 0, level }];
    let cfg = base_cfg(&[], &functions, &targets, horizon, p.particle_cap, true);
    let runs = run_ensemble(&kern_n, &tables, &cfg, p.replicas, p.master, p.workers)?;
    let (times, not_hit) = runs.hit_samples(0);
    let usable = runs.trajectories.len();
    if not_hit * 20 > usable {
        return Err(Error::Inconclusive(format!(
            "{not_hit} of {usable} replicas never reached level {level} before t = {horizon}"
        )));
    }
    let scale = (p.n_urns as f64).sqrt();
    let samples: Vec<f64> = times.iter().map(|&tau| scale * (tau - lim.tau)).collect();
    let deviating =
        times.iter().filter(|&&tau| (tau - lim.tau).abs() > 0.1).count() + not_hit;
    let consistency_fraction = deviating as f64 / usable as f64;
    let summary = summarize("scaled_deviation", &samples)?;
    let ks = ks_normal_test(&samples, 0.0, target_variance)?;
    let pass = ks.pass;
    Ok(HittingReport {
        experiment: "hitting".into(),
        f: p.f_name.to_string(),
        level,
        n_urns: p.n_urns,
        replicas: p.replicas,
        grid_size: p.grid_size,
        step: p.step,
        horizon,
        master_seed: p.master.value(),
        tau: lim.tau,
        slope: lim.slope,
        theta_at_tau,
        target_variance,
        hit: times.len(),
        not_hit,
        consistency_fraction,
        summary,
        ks,
        extinct: runs.extinct_count(),
        exploded: runs.exploded.len(),
        pass,
    })
}

/// Decay of the largest between-urn covariance as the system grows,
/// measured from the exact moment system (no sampling).
#[derive(Debug, Clone, Serialize)]
pub struct CovDecayReport {
    pub experiment: String,
    pub t: f64,
    pub step: f64,
    pub n_list: Vec<usize>,
    pub max_offdiag: Vec<f64>,
    pub identically_zero: bool,
    /// Least-squares slope of log max |Cov| against log N.
    pub slope: Option<f64>,
    pub pass: bool,
}

pub fn covariance_decay_experiment(
    spec: &ModelSpec,
    t: f64,
    step: f64,
    n_list: &[usize],
) -> Result<CovDecayReport> {
    if n_list.len() < 2 {
        return Err(Error::Config("covariance decay needs at least two sizes".into()));
    }
    let mut max_offdiag = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let kern = discretize(spec, n);
        let state = integrate_moments(&kern, &[t], step)?.remove(0);
        let cov = state.covariance();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    best = best.max(cov[[i, j]].abs());
                }
            }
        }
        max_offdiag.push(best);
    }
    let identically_zero = max_offdiag.iter().all(|&m| m <= 1e-12);
    let slope = if identically_zero {
        None
    } else if max_offdiag.iter().any(|&m| m <= 1e-300) {
        return Err(Error::Inconclusive(
            "off-diagonal covariance vanishes at some sizes but not all".into(),
        ));
    } else {
        let xs: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = max_offdiag.iter().map(|&m| m.ln()).collect();
        let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let den: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
        Some(num / den)
    };
    let pass = identically_zero || slope.is_some_and(|s| (-1.4..=-0.6).contains(&s));
    Ok(CovDecayReport {
        experiment: "covariance_decay".into(),
        t,
        step,
        n_list: n_list.to_vec(),
        max_offdiag,
        identically_zero,
        slope,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Arity;
    use crate::moments::initial_moments;

    fn spec(json: &str) -> ModelSpec {
        ModelSpec::from_json_str(json).unwrap().0
    }

    fn growth_spec(n: usize) -> ModelSpec {
        spec(&format!(
            r#"{{"n_urns": {n}, "k_max": 2, "lambda": ["0", "1"], "psi": ["0", "0", "1"],
                "phi": "1", "horizon": 2.0, "epsilon0": 1.0}}"#
        ))
    }

    fn one() -> KernelExpr {
        KernelExpr::parse("1", Arity::Univariate).unwrap()
    }

    /// Inverse standard normal CDF by bisection on the forward map; only
    /// as accurate as normal_cdf itself, which is enough for placement.
    fn normal_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn summary_of_known_samples() {
        let s = summarize("x", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.samples, 4);
        assert!((s.mean - 2.5).abs() < 1e-15);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.std_error - (5.0 / 12.0f64).sqrt()).abs() < 1e-15);
        assert!(s.ci99_lo < s.mean && s.mean < s.ci99_hi);
        assert!(matches!(
            summarize("x", &[1.0]),
            Err(Error::TooFewSamples { got: 1, need: 2 })
        ));
    }

    #[test]
    fn normal_cdf_matches_reference_values() {
        let cases = [
            (0.0, 0.5),
            (0.5, 0.6914624612740131),
            (1.0, 0.8413447460685429),
            (2.0, 0.9772498680518208),
            (3.0, 0.9986501019683699),
            (-1.0, 0.15865525393145707),
        ];
        for (z, want) in cases {
            let got = normal_cdf(z);
            assert!((got - want).abs() <= 1e-7, "Phi({z}) = {got}, want {want}");
        }
        for z in [-4.0, -2.0, -0.3, 0.7, 1.9, 3.5] {
            assert!((normal_cdf(z) + normal_cdf(-z) - 1.0).abs() <= 1e-12);
            assert!(normal_cdf(z + 1e-3) >= normal_cdf(z));
        }
    }

    #[test]
    fn perfectly_placed_quantiles_pass_with_tiny_statistic() {
        let r = 1000;
        let samples: Vec<f64> = (0..r)
            .map(|i| 3.0 + 2.0 * normal_quantile((i as f64 + 0.5) / r as f64))
            .collect();
        let ks = ks_normal_test(&samples, 3.0, 4.0).unwrap();
        assert!(ks.statistic <= 0.5 / r as f64 + 1e-6, "D = {}", ks.statistic);
        assert!(ks.pass);
    }

    #[test]
    fn unit_shift_is_detected_with_the_known_statistic() {
        // sup_x |Phi(x) - Phi(x - 1)| = Phi(1/2) - Phi(-1/2) ~ 0.383.
        let r = 1000;
        let samples: Vec<f64> = (0..r)
            .map(|i| 1.0 + normal_quantile((i as f64 + 0.5) / r as f64))
            .collect();
        let ks = ks_normal_test(&samples, 0.0, 1.0).unwrap();
        assert!(
            (0.3..=0.45).contains(&ks.statistic),
            "D = {}",
            ks.statistic
        );
        assert!(!ks.pass);
    }

    #[test]
    fn ks_is_location_scale_consistent() {
        let mut rng = SeedKey::new(17).stream(0);
        use rand::Rng;
        let raw: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let (mu, var): (f64, f64) = (3.7, 6.25);
        let standardized: Vec<f64> = raw.iter().map(|x| (x - mu) / var.sqrt()).collect();
        let a = ks_normal_test(&raw, mu, var).unwrap();
        let b = ks_normal_test(&standardized, 0.0, 1.0).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-12);
    }

    #[test]
    fn ks_preconditions_are_enforced() {
        let ten: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(
            ks_normal_test(&ten, 0.0, 1.0),
            Err(Error::TooFewSamples { got: 10, need: 50 })
        ));
        let fifty: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(matches!(
            ks_normal_test(&fifty, 0.0, 0.0),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn ensembles_are_identical_across_worker_counts() {
        let s = growth_spec(10);
        let kern = discretize(&s, 10);
        let tables = RateTables::build(&kern);
        let f = GridFunction::constant(1.0, 10);
        let record_times = [1.0];
        let functions = [f];
        let cfg = base_cfg(&record_times, &functions, &[], 1.0, u64::MAX, false);
        let a = run_ensemble(&kern, &tables, &cfg, 24, SeedKey::new(5), 1).unwrap();
        let b = run_ensemble(&kern, &tables, &cfg, 24, SeedKey::new(5), 4).unwrap();
        let sa = a.observable_samples(0, 0);
        let sb = b.observable_samples(0, 0);
        assert_eq!(sa, sb, "worker count must not change results");
        assert!(summarize("mu", &sa).unwrap().variance > 0.0, "replicas differ");
    }

    #[test]
    fn explosive_ensembles_abort() {
        let s = growth_spec(10);
        let kern = discretize(&s, 10);
        let tables = RateTables::build(&kern);
        let cfg = base_cfg(&[], &[], &[], 40.0, 30, false);
        match run_ensemble(&kern, &tables, &cfg, 20, SeedKey::new(3), 1) {
            Err(Error::ExplosionRate { exploded, replicas: 20 }) => assert!(exploded > 0),
            other => panic!("expected explosion-rate abort, got {other:?}"),
        }
    }

    #[test]
    fn clt_at_time_zero_is_the_poisson_field() {
        // At t = 0 the fluctuation is a centered weighted Poisson sum with
        // variance mean(phi f^2); the limit prediction and the exact
        // finite-N moment value agree because N = M here.
        let s = growth_spec(50);
        let f = one();
        let p = ExperimentParams {
            spec: &s,
            f_name: "one",
            f: &f,
            n_urns: 50,
            t: 0.0,
            replicas: 400,
            grid_size: 50,
            step: 1e-3,
            master: SeedKey::new(2024),
            workers: 1,
            particle_cap: u64::MAX,
        };
        let rep = clt_experiment(&p).unwrap();
        assert!((rep.theta.total - 1.0).abs() <= 1e-12);
        assert_eq!(rep.theta.noise, 0.0);
        let kern = discretize(&s, 50);
        let exact = initial_moments(&kern)
            .fluctuation_variance(&GridFunction::constant(1.0, 50))
            .unwrap();
        assert!((rep.theta.total - exact).abs() <= 1e-12);
        assert!((rep.centering - 1.0).abs() <= 1e-12);
        assert!(rep.ks.pass, "D = {} vs {}", rep.ks.statistic, rep.ks.threshold);
    }

    #[test]
    fn conserved_fields_keep_the_initial_fluctuation_law() {
        // Pure exchange conserves the total count, so V_t(1) has the t = 0
        // Poisson law at every t.
        // N large enough that the exact law (a centered Poisson lattice,
        // conserved in t) sits within the KS budget of its normal limit.
        let s = spec(
            r#"{"n_urns": 160, "k_max": 1, "lambda": ["0", "1+0.5*cos(2*pi*(u-v))"],
                "psi": [], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let f = one();
        let p = ExperimentParams {
            spec: &s,
            f_name: "one",
            f: &f,
            n_urns: 160,
            t: 0.7,
            replicas: 400,
            grid_size: 64,
            step: 1e-3,
            master: SeedKey::new(11),
            workers: 1,
            particle_cap: u64::MAX,
        };
        let rep = clt_experiment(&p).unwrap();
        assert!((rep.theta.total - 1.0).abs() <= 1e-10, "theta = {:?}", rep.theta);
        assert!((rep.centering - 1.0).abs() <= 1e-10);
        assert!(rep.ks.pass, "D = {} vs {}", rep.ks.statistic, rep.ks.threshold);
    }

    #[test]
    fn ensemble_moments_agree_with_the_exact_moment_system() {
        let n = 20;
        let s = growth_spec(n);
        let kern = discretize(&s, n);
        let f = GridFunction::from_expr(
            &KernelExpr::parse("1+0.5*cos(2*pi*u)", Arity::Univariate).unwrap(),
            n,
        )
        .unwrap();
        let tables = RateTables::build(&kern);
        let record_times = [0.5, 1.0];
        let functions = [f.clone()];
        let cfg = base_cfg(&record_times, &functions, &[], 1.0, u64::MAX, false);
        let replicas = 5000;
        let runs = run_ensemble(&kern, &tables, &cfg, replicas, SeedKey::new(31), 1).unwrap();
        let states = integrate_moments(&kern, &record_times, 1e-3).unwrap();
        for (rec, state) in states.iter().enumerate() {
            let samples = runs.observable_samples(rec, 0);
            let sum = summarize("mu", &samples).unwrap();
            let want_mean = state.mean_pairing(&f);
            let want_var = state.fluctuation_variance(&f).unwrap() / n as f64;
            assert!(
                (sum.mean - want_mean).abs() <= 4.0 * sum.std_error,
                "t = {}: mean {} vs {}",
                state.time,
                sum.mean,
                want_mean
            );
            let var_se = want_var * (2.0 / (replicas as f64 - 1.0)).sqrt();
            assert!(
                (sum.variance - want_var).abs() <= 4.0 * var_se,
                "t = {}: var {} vs {}",
                state.time,
                sum.variance,
                want_var
            );
        }
    }

    #[test]
    fn lln_report_tracks_the_limit() {
        let s = growth_spec(8);
        let f = one();
        let p = ExperimentParams {
            spec: &s,
            f_name: "one",
            f: &f,
            n_urns: 0, // unused by lln; sizes come from the list
            t: 0.5,
            replicas: 200,
            grid_size: 64,
            step: 1e-3,
            master: SeedKey::new(7),
            workers: 1,
            particle_cap: u64::MAX,
        };
        let rep = lln_experiment(&p, &[8, 64]).unwrap();
        assert!((rep.limit_value - 0.5f64.exp()).abs() <= 1e-10);
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].summary.samples, 200);
        assert!(
            rep.rows[0].summary.std_error > rep.rows[1].summary.std_error,
            "standard error must shrink with N"
        );
    }

    #[test]
    fn hitting_times_concentrate_and_normalize() {
        let n = 50;
        let s = growth_spec(n);
        let f = one();
        let level = 0.3f64.exp();
        let p = ExperimentParams {
            spec: &s,
            f_name: "one",
            f: &f,
            n_urns: n,
            t: 0.0, // unused by hitting
            replicas: 150,
            grid_size: 64,
            step: 1e-3,
            master: SeedKey::new(40),
            workers: 1,
            particle_cap: u64::MAX,
        };
        let rep = hitting_experiment(&p, level, 1.5).unwrap();
        assert!((rep.tau - 0.3).abs() <= 1e-6, "tau = {}", rep.tau);
        assert!((rep.slope - level).abs() <= 1e-6);
        assert_eq!(rep.not_hit, 0);
        assert!(rep.ks.pass, "D = {} vs {}", rep.ks.statistic, rep.ks.threshold);
        // Gaussian limit predicts P(|tau^N - tau| > 0.1) ~ 0.53 at this
        // size: sd of tau^N is sqrt(1.26 / 50) ~ 0.159.
        assert!((0.3..=0.75).contains(&rep.consistency_fraction));
    }

    #[test]
    fn decreasing_observables_cannot_be_hit_from_below() {
        let s = spec(
            r#"{"n_urns": 10, "k_max": 0, "lambda": [], "psi": ["1"],
                "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let f = one();
        let p = ExperimentParams {
            spec: &s,
            f_name: "one",
            f: &f,
            n_urns: 10,
            t: 0.0,
            replicas: 100,
            grid_size: 32,
            step: 1e-3,
            master: SeedKey::new(1),
            workers: 1,
            particle_cap: u64::MAX,
        };
        match hitting_experiment(&p, 2.0, 3.0) {
            Err(Error::NotHit { level, .. }) => assert_eq!(level, 2.0),
            other => panic!("expected not-hit, got {other:?}"),
        }
    }

    #[test]
    fn covariance_decay_fits_the_expected_slope() {
        let s = growth_spec(8);
        let rep = covariance_decay_experiment(&s, 0.5, 1e-3, &[8, 16, 32]).unwrap();
        assert!(!rep.identically_zero);
        let slope = rep.slope.unwrap();
        assert!((-1.4..=-0.6).contains(&slope), "slope = {slope}");
        assert!(rep.pass);
    }

    #[test]
    fn non_interacting_models_report_identically_zero() {
        let s = spec(
            r#"{"n_urns": 8, "k_max": 0, "lambda": [], "psi": ["1"],
                "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#,
        );
        let rep = covariance_decay_experiment(&s, 0.3, 1e-3, &[8, 16]).unwrap();
        assert!(rep.identically_zero);
        assert!(rep.slope.is_none());
        assert!(rep.pass);
    }
}
