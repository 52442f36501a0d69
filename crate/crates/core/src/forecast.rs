//! The forecast distribution: a normal over log-glucose, i.e. log-normal
//! over mg/dL, with quantile and moment views on the original scale.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastDist {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl ForecastDist {
    pub fn new(mu_log: f64, sigma_log: f64) -> Self {
        ForecastDist { mu_log, sigma_log }
    }

    pub fn median_mgdl(&self) -> f64 {
        self.mu_log.exp()
    }

    /// Log-normal mean, used as the point prediction for RMSE.
    pub fn mean_mgdl(&self) -> f64 {
        (self.mu_log + 0.5 * self.sigma_log * self.sigma_log).exp()
    }

    pub fn quantile_mgdl(&self, p: f64) -> f64 {
        let z = Normal::standard().inverse_cdf(p);
        (self.mu_log + z * self.sigma_log).exp()
    }

    /// Central 95% interval on the mg/dL scale.
    pub fn interval95_mgdl(&self) -> (f64, f64) {
        (
            (self.mu_log - 1.96 * self.sigma_log).exp(),
            (self.mu_log + 1.96 * self.sigma_log).exp(),
        )
    }

    /// Log-normal with the given mg/dL mean and standard deviation
    /// (moment matching). Converts the oracle's Gaussian transition into
    /// the log-scale family every forecaster reports in.
    pub fn from_mgdl_moments(mean: f64, sd: f64) -> Self {
        let mean = mean.max(1e-6);
        if sd <= 0.0 {
            return ForecastDist {
                mu_log: mean.ln(),
                sigma_log: 0.0,
            };
        }
        let ratio = sd / mean;
        let var_log = (1.0 + ratio * ratio).ln();
        ForecastDist {
            mu_log: mean.ln() - 0.5 * var_log,
            sigma_log: var_log.sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_is_exp_mu() {
        let f = ForecastDist::new(100.0f64.ln(), 0.2);
        assert!((f.median_mgdl() - 100.0).abs() < 1e-9);
        assert!(f.mean_mgdl() > f.median_mgdl());
    }

    #[test]
    fn interval_brackets_median() {
        let f = ForecastDist::new(5.0, 0.1);
        let (lo, hi) = f.interval95_mgdl();
        assert!(lo < f.median_mgdl() && f.median_mgdl() < hi);
        let q025 = f.quantile_mgdl(0.025);
        assert!((q025 - lo).abs() / lo < 1e-3);
    }

    #[test]
    fn moment_matching_recovers_moments() {
        let f = ForecastDist::from_mgdl_moments(150.0, 18.0);
        let mean = f.mean_mgdl();
        let var = ((f.sigma_log * f.sigma_log).exp() - 1.0)
            * (2.0 * f.mu_log + f.sigma_log * f.sigma_log).exp();
        assert!((mean - 150.0).abs() < 1e-9);
        assert!((var.sqrt() - 18.0).abs() < 1e-9);
    }

    #[test]
    fn zero_sd_degenerates_to_point() {
        let f = ForecastDist::from_mgdl_moments(120.0, 0.0);
        assert_eq!(f.sigma_log, 0.0);
        assert!((f.median_mgdl() - 120.0).abs() < 1e-9);
    }
}
