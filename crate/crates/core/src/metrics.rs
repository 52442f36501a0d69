//! Proper scoring rules and calibration diagnostics over held-out
//! forecasts, plus cross-run aggregation.
//!
//! CRPS, logarithmic score, and PIT variance are computed on the
//! log-glucose scale the forecast distributions live on; RMSE, coverage,
//! and the interval score are computed in mg/dL. A single evaluation run
//! reports per-forecast means; [`ScoreReport::aggregate`] combines runs
//! into mean and standard deviation across runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::autodiff::ParamStore;
use crate::baseline::{features_for, predict_linear, LinearFit};
use crate::error::{Error, Result};
use crate::forecast::ForecastDist;
use crate::losses::nll_normal_kernel;
use crate::model::CtrnnModel;
use crate::sim::{net_input, oracle_forecast, TrajectoryRecord};

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Continuous ranked probability score of `N(mu, sigma^2)` against `y`.
/// A point forecast (`sigma == 0`) scores the absolute error.
pub fn crps_normal(mu: f64, sigma: f64, y: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - INV_SQRT_PI)
}

/// Logarithmic (ignorance) score: negative log predictive density, lower
/// is better. Shares its kernel with the prediction loss.
pub fn log_score(mu: f64, sigma: f64, y: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    nll_normal_kernel(y, mu, sigma)
}

/// Interval score for a central `100(1-alpha)%` interval `[l, u]`.
pub fn interval_score(l: f64, u: f64, y: f64, alpha: f64) -> Result<f64> {
    if l > u {
        return Err(Error::Numeric(format!(
            "interval score needs l <= u, got ({l}, {u})"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Numeric(format!("alpha must be in (0,1), got {alpha}")));
    }
    let mut s = u - l;
    if y < l {
        s += 2.0 / alpha * (l - y);
    }
    if y > u {
        s += 2.0 / alpha * (y - u);
    }
    Ok(s)
}

/// Sample variance of the probability integral transform
/// `Phi((log y - mu_log) / sigma_log)`. Calibrated forecasts give 1/12;
/// smaller means overdispersion, larger underdispersion.
pub fn pit_variance(forecasts: &[ForecastDist], truths_mgdl: &[f64]) -> Result<f64> {
    if forecasts.len() != truths_mgdl.len() {
        return Err(Error::data("forecast/truth length mismatch"));
    }
    if forecasts.len() < 2 {
        return Err(Error::data("PIT variance needs at least 2 forecasts"));
    }
    let pits: Vec<f64> = forecasts
        .iter()
        .zip(truths_mgdl)
        .map(|(f, y)| std_normal_cdf((y.ln() - f.mu_log) / f.sigma_log))
        .collect();
    let n = pits.len() as f64;
    let mean = pits.iter().sum::<f64>() / n;
    Ok(pits.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PointScores {
    pub rmse: f64,
    pub coverage_pct: f64,
    pub interval_score: f64,
}

/// Point prediction quality on the mg/dL scale: RMSE of the log-normal
/// mean, empirical 95%-interval coverage, and the mean interval score at
/// `alpha = 0.05`.
pub fn point_scores(forecasts: &[ForecastDist], truths_mgdl: &[f64]) -> Result<PointScores> {
    if forecasts.len() != truths_mgdl.len() || forecasts.is_empty() {
        return Err(Error::data("point scores need matched, nonempty inputs"));
    }
    let mut sq = 0.0;
    let mut inside = 0usize;
    let mut int_score = 0.0;
    for (f, y) in forecasts.iter().zip(truths_mgdl) {
        let point = f.mean_mgdl();
        sq += (point - y) * (point - y);
        let (l, u) = f.interval95_mgdl();
        if (l..=u).contains(y) {
            inside += 1;
        }
        int_score += interval_score(l, u, *y, 0.05)?;
    }
    let n = forecasts.len() as f64;
    Ok(PointScores {
        rmse: (sq / n).sqrt(),
        coverage_pct: 100.0 * inside as f64 / n,
        interval_score: int_score / n,
    })
}

/// One scored pre-update forecast: the distribution, the realized glucose
/// (true value when observation noise is on), and the forecast gap.
#[derive(Clone, Copy, Debug)]
pub struct ScoredForecast {
    pub dist: ForecastDist,
    pub y_true_mgdl: f64,
    pub gap: f64,
}

/// What produces forecasts at held-out events.
pub enum Forecaster<'a> {
    Model(&'a CtrnnModel, &'a ParamStore),
    /// Exact Gaussian transition of the generating SDE, moment-matched
    /// into the log-normal family.
    Oracle,
    Linear(&'a LinearFit),
}

impl Forecaster<'_> {
    /// Pre-update forecasts for every masked event `k >= 1`.
    pub fn score_trajectory(&self, traj: &TrajectoryRecord) -> Result<Vec<ScoredForecast>> {
        let mut out = Vec::new();
        match self {
            Forecaster::Model(model, store) => {
                let steps = model.rollout_dists(store, traj)?;
                for s in steps {
                    let ev = &traj.events[s.event_idx];
                    if ev.mask == 1 {
                        out.push(ScoredForecast {
                            dist: s.pre,
                            y_true_mgdl: ev.glucose_true,
                            gap: s.gap,
                        });
                    }
                }
            }
            Forecaster::Oracle => {
                for k in 1..traj.events.len() {
                    let prev = &traj.events[k - 1];
                    let ev = &traj.events[k];
                    if ev.mask != 1 {
                        continue;
                    }
                    let gap = ev.t - prev.t;
                    let u = net_input(
                        &traj.params,
                        prev.insulin_rate,
                        prev.glucose_input,
                        traj.insulin_unit_scale,
                    );
                    let f = oracle_forecast(prev.glucose_obs, &traj.params, u, gap);
                    out.push(ScoredForecast {
                        dist: ForecastDist::from_mgdl_moments(f.mu, f.sd),
                        y_true_mgdl: ev.glucose_true,
                        gap,
                    });
                }
            }
            Forecaster::Linear(fit) => {
                for k in 1..traj.events.len() {
                    let ev = &traj.events[k];
                    if ev.mask != 1 {
                        continue;
                    }
                    let feats = features_for(traj, k, fit.feature_set);
                    out.push(ScoredForecast {
                        dist: predict_linear(fit, &feats)?,
                        y_true_mgdl: ev.glucose_true,
                        gap: ev.t - traj.events[k - 1].t,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-metric summary of one or more evaluation runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_runs: usize,
    pub n_forecasts: usize,
    pub rmse: MetricStat,
    pub crps: MetricStat,
    /// Negative log density, lower is better.
    pub log_score: MetricStat,
    pub var_pit: MetricStat,
    pub coverage: MetricStat,
    pub interval_score: MetricStat,
    /// Standard error of the CRPS mean over individual forecasts.
    pub crps_sem: f64,
}

impl ScoreReport {
    /// Mean and (sample) standard deviation across runs, metric by metric.
    pub fn aggregate(reports: &[ScoreReport]) -> Result<ScoreReport> {
        if reports.is_empty() {
            return Err(Error::data("cannot aggregate zero reports"));
        }
        let stat = |pick: fn(&ScoreReport) -> f64| -> MetricStat {
            let vals: Vec<f64> = reports.iter().map(pick).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            MetricStat { mean, std }
        };
        let sem = reports.iter().map(|r| r.crps_sem).sum::<f64>() / reports.len() as f64;
        Ok(ScoreReport {
            n_runs: reports.iter().map(|r| r.n_runs).sum(),
            n_forecasts: reports.iter().map(|r| r.n_forecasts).sum(),
            rmse: stat(|r| r.rmse.mean),
            crps: stat(|r| r.crps.mean),
            log_score: stat(|r| r.log_score.mean),
            var_pit: stat(|r| r.var_pit.mean),
            coverage: stat(|r| r.coverage.mean),
            interval_score: stat(|r| r.interval_score.mean),
            crps_sem: sem,
        })
    }
}

/// Score every masked pre-update forecast of `forecaster` over `records`.
pub fn evaluate(forecaster: &Forecaster<'_>, records: &[TrajectoryRecord]) -> Result<ScoreReport> {
    let per_traj: Vec<Result<Vec<ScoredForecast>>> = records
        .par_iter()
        .map(|traj| forecaster.score_trajectory(traj))
        .collect();
    let mut scored = Vec::new();
    for r in per_traj {
        scored.extend(r?);
    }
    if scored.len() < 2 {
        return Err(Error::data(format!(
            "evaluation needs at least 2 scored forecasts, got {}",
            scored.len()
        )));
    }

    let dists: Vec<ForecastDist> = scored.iter().map(|s| s.dist).collect();
    let truths: Vec<f64> = scored.iter().map(|s| s.y_true_mgdl).collect();
    let n = scored.len() as f64;

    let crps_vals: Vec<f64> = scored
        .iter()
        .map(|s| crps_normal(s.dist.mu_log, s.dist.sigma_log, s.y_true_mgdl.ln()))
        .collect();
    let crps_mean = crps_vals.iter().sum::<f64>() / n;
    let crps_var = crps_vals
        .iter()
        .map(|v| (v - crps_mean) * (v - crps_mean))
        .sum::<f64>()
        / (n - 1.0);

    let log_mean = scored
        .iter()
        .map(|s| log_score(s.dist.mu_log, s.dist.sigma_log, s.y_true_mgdl.ln()))
        .sum::<f64>()
        / n;

    let points = point_scores(&dists, &truths)?;
    let var_pit = pit_variance(&dists, &truths)?;

    let one = |mean: f64| MetricStat { mean, std: 0.0 };
    Ok(ScoreReport {
        n_runs: 1,
        n_forecasts: scored.len(),
        rmse: one(points.rmse),
        crps: one(crps_mean),
        log_score: one(log_mean),
        var_pit: one(var_pit),
        coverage: one(points.coverage_pct),
        interval_score: one(points.interval_score),
        crps_sem: (crps_var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::nll_normal;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Quadrature oracle: integrate the CRPS definition directly,
    /// splitting at the observation to keep the integrand smooth.
    fn crps_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
        let lo = (mu - 14.0 * sigma).min(y - 14.0 * sigma);
        let hi = (mu + 14.0 * sigma).max(y + 14.0 * sigma);
        let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| -> f64 {
            let n = 20_000; // even
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let cdf = |x: f64| std_normal_cdf((x - mu) / sigma);
        let below = simpson(lo, y, &|x| cdf(x) * cdf(x));
        let above = simpson(y, hi, &|x| (cdf(x) - 1.0) * (cdf(x) - 1.0));
        below + above
    }

    #[test]
    fn crps_standard_normal_at_zero() {
        let got = crps_normal(0.0, 1.0, 0.0);
        let oracle = crps_quadrature(0.0, 1.0, 0.0);
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
        // frozen from the quadrature oracle: 2*phi(0) - 1/sqrt(pi)
        assert!((got - 0.2336950).abs() < 1e-6);
    }

    #[test]
    fn crps_degenerate_is_mae() {
        assert_eq!(crps_normal(1.0, 0.0, 3.0), 2.0);
        assert_eq!(crps_normal(5.0, 0.0, 5.0), 0.0);
    }

    #[test]
    fn crps_matches_quadrature_on_100_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mu: f64 = rng.random_range(-10.0..10.0);
            let sigma: f64 = rng.random_range(0.05..5.0);
            let y: f64 = mu + sigma * rng.random_range(-4.0..4.0);
            let got = crps_normal(mu, sigma, y);
            let oracle = crps_quadrature(mu, sigma, y);
            let rel = (got - oracle).abs() / oracle.abs().max(1e-12);
            assert!(rel < 1e-6, "mu={mu} sigma={sigma} y={y}: rel {rel}");
        }
    }

    #[test]
    fn crps_tends_to_mae_as_sigma_shrinks() {
        let (mu, y) = (2.0, 5.0);
        let mae = (y - mu) as f64;
        let mut last = f64::INFINITY;
        for sigma in [1.0, 0.1, 0.01, 1e-4, 1e-8] {
            let diff = (crps_normal(mu, sigma, y) - mae.abs()).abs();
            assert!(diff <= last + 1e-15);
            last = diff;
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn log_score_shares_nll_kernel_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mu: f64 = rng.random_range(-5.0..5.0);
            let sigma: f64 = rng.random_range(0.01..3.0);
            let y: f64 = rng.random_range(-5.0..5.0);
            assert_eq!(
                log_score(mu, sigma, y).to_bits(),
                nll_normal(y, mu, sigma).unwrap().to_bits()
            );
        }
        assert!((log_score(0.0, 1.0, 0.0) - 0.9189).abs() < 5e-5);
        // y = mu +/- sigma adds exactly one half.
        let v = log_score(3.0, 0.5, 3.5);
        assert!((v - (0.9189385332046727 + 0.5f64.ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn interval_score_hand_cases() {
        assert_eq!(interval_score(80.0, 120.0, 100.0, 0.05).unwrap(), 40.0);
        assert_eq!(interval_score(80.0, 120.0, 70.0, 0.05).unwrap(), 440.0);
        assert_eq!(interval_score(80.0, 120.0, 130.0, 0.05).unwrap(), 440.0);
        assert!(interval_score(120.0, 80.0, 100.0, 0.05).is_err());
    }

    #[test]
    fn interval_score_is_width_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let l: f64 = rng.random_range(0.0..100.0);
            let u = l + rng.random_range(0.0..50.0);
            let y = rng.random_range(l..=u);
            assert_eq!(interval_score(l, u, y, 0.1).unwrap(), u - l);
        }
    }

    #[test]
    fn pit_variance_calibrated_over_under() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut forecasts = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let mu: f64 = rng.random_range(4.0..5.5);
            let sigma: f64 = rng.random_range(0.05..0.3);
            let z: f64 = rng.sample(StandardNormal);
            forecasts.push(ForecastDist::new(mu, sigma));
            truths.push((mu + sigma * z).exp());
        }
        let calibrated = pit_variance(&forecasts, &truths).unwrap();
        assert!(
            (calibrated - 1.0 / 12.0).abs() < 0.002,
            "calibrated {calibrated}"
        );

        let over: Vec<ForecastDist> = forecasts
            .iter()
            .map(|f| ForecastDist::new(f.mu_log, f.sigma_log * 10.0))
            .collect();
        assert!(pit_variance(&over, &truths).unwrap() < 1.0 / 12.0);

        let under: Vec<ForecastDist> = forecasts
            .iter()
            .map(|f| ForecastDist::new(f.mu_log, f.sigma_log * 0.1))
            .collect();
        assert!(pit_variance(&under, &truths).unwrap() > 1.0 / 12.0);
    }

    #[test]
    fn pit_variance_needs_two() {
        let f = vec![ForecastDist::new(4.0, 0.1)];
        assert!(pit_variance(&f, &[100.0]).is_err());
    }

    #[test]
    fn point_scores_limits() {
        // Tiny sigma: point prediction converges to the median.
        let f = vec![ForecastDist::new(100.0f64.ln(), 1e-9); 2];
        let t = vec![100.0, 100.0];
        let p = point_scores(&f, &t).unwrap();
        assert!(p.rmse < 1e-6);
        assert_eq!(p.coverage_pct, 100.0);

        let wide = vec![ForecastDist::new(100.0f64.ln(), 0.5); 4];
        let truths = vec![90.0, 100.0, 110.0, 105.0];
        let p = point_scores(&wide, &truths).unwrap();
        assert_eq!(p.coverage_pct, 100.0);
        let (l, u) = wide[0].interval95_mgdl();
        assert!((p.interval_score - (u - l)).abs() < 1e-9);
    }

    #[test]
    fn aggregate_mean_and_std_across_runs() {
        let mk = |crps: f64| ScoreReport {
            n_runs: 1,
            n_forecasts: 10,
            rmse: MetricStat { mean: 30.0, std: 0.0 },
            crps: MetricStat { mean: crps, std: 0.0 },
            log_score: MetricStat { mean: 0.1, std: 0.0 },
            var_pit: MetricStat { mean: 0.08, std: 0.0 },
            coverage: MetricStat { mean: 95.0, std: 0.0 },
            interval_score: MetricStat { mean: 80.0, std: 0.0 },
            crps_sem: 0.001,
        };
        let agg = ScoreReport::aggregate(&[mk(0.1), mk(0.2), mk(0.3)]).unwrap();
        assert_eq!(agg.n_runs, 3);
        assert_eq!(agg.n_forecasts, 30);
        assert!((agg.crps.mean - 0.2).abs() < 1e-12);
        assert!((agg.crps.std - 0.1).abs() < 1e-12);
    }
}
