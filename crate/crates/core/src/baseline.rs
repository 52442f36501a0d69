//! Linear benchmark: least-squares mean model over the most recent
//! observation's features, with a second regression predicting the
//! variance from the squared stage-one residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forecast::ForecastDist;
use crate::sim::TrajectoryRecord;

/// Predicted variances are floored here.
pub const VARIANCE_FLOOR: f64 = 1e-6;
const RIDGE: f64 = 1e-6;
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// `(log-glucose last obs, insulin_rate, glucose_input, gap)`.
    #[default]
    Basic,
    /// Basic plus running mean/min/max of past log-glucose and a log
    /// observation count.
    Expanded,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSet::Basic => 4,
            FeatureSet::Expanded => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearFit {
    pub format_version: u32,
    pub feature_set: FeatureSet,
    pub mean_weights: Vec<f64>,
    pub mean_intercept: f64,
    pub var_weights: Vec<f64>,
    pub var_intercept: f64,
    /// True when the normal equations needed the ridge fallback.
    pub ridged: bool,
}

/// Features for forecasting event `k` of a trajectory from event `k-1`.
pub fn features_for(traj: &TrajectoryRecord, k: usize, set: FeatureSet) -> Vec<f64> {
    let prev = &traj.events[k - 1];
    let gap = traj.events[k].t - prev.t;
    let mut f = vec![
        prev.glucose_obs.ln(),
        prev.insulin_rate,
        prev.glucose_input,
        gap,
    ];
    if set == FeatureSet::Expanded {
        let past: Vec<f64> = traj.events[..k].iter().map(|e| e.glucose_obs.ln()).collect();
        let n = past.len() as f64;
        let mean = past.iter().sum::<f64>() / n;
        let min = past.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = past.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        f.extend_from_slice(&[mean, min, max, (1.0 + n).ln()]);
    }
    f
}

fn solve_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    if let Some(chol) = xtx.clone().cholesky() {
        let w = chol.solve(&xty);
        if w.iter().all(|v| v.is_finite()) {
            return (w, false);
        }
    }
    let n = xtx.nrows();
    let ridged = &xtx + DMatrix::identity(n, n) * RIDGE;
    let w = ridged
        .cholesky()
        .expect("ridged normal matrix is positive definite")
        .solve(&xty);
    (w, true)
}

/// Two-stage fit: least squares for the mean on log-glucose targets, then
/// least squares for the variance on the squared stage-one residuals.
pub fn fit_linear(records: &[TrajectoryRecord], set: FeatureSet) -> Result<LinearFit> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for traj in records {
        for k in 1..traj.events.len() {
            if traj.events[k].mask != 1 {
                continue;
            }
            rows.push(features_for(traj, k, set));
            targets.push(traj.events[k].glucose_obs.ln());
        }
    }
    if rows.len() < 2 {
        return Err(Error::data(format!(
            "linear fit needs at least 2 usable pairs, got {}",
            rows.len()
        )));
    }

    let d = set.dim();
    let n = rows.len();
    let mut design = DMatrix::zeros(n, d + 1);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
        design[(i, d)] = 1.0;
    }
    let y = DVector::from_vec(targets);
    let (w_mean, ridged_mean) = solve_least_squares(&design, &y);

    let resid_sq = {
        let pred = &design * &w_mean;
        DVector::from_iterator(n, (0..n).map(|i| (y[i] - pred[i]) * (y[i] - pred[i])))
    };
    let (w_var, ridged_var) = solve_least_squares(&design, &resid_sq);

    Ok(LinearFit {
        format_version: FORMAT_VERSION,
        feature_set: set,
        mean_weights: w_mean.as_slice()[..d].to_vec(),
        mean_intercept: w_mean[d],
        var_weights: w_var.as_slice()[..d].to_vec(),
        var_intercept: w_var[d],
        ridged: ridged_mean || ridged_var,
    })
}

pub fn predict_linear(fit: &LinearFit, features: &[f64]) -> Result<ForecastDist> {
    if features.len() != fit.mean_weights.len() {
        return Err(Error::ShapeMismatch {
            op: "predict_linear",
            lhs: format!("{} features", features.len()),
            rhs: format!("{} weights", fit.mean_weights.len()),
        });
    }
    let mu: f64 = fit.mean_intercept
        + features
            .iter()
            .zip(&fit.mean_weights)
            .map(|(x, w)| x * w)
            .sum::<f64>();
    let var: f64 = fit.var_intercept
        + features
            .iter()
            .zip(&fit.var_weights)
            .map(|(x, w)| x * w)
            .sum::<f64>();
    Ok(ForecastDist::new(mu, var.max(VARIANCE_FLOOR).sqrt()))
}

impl LinearFit {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fit: LinearFit = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if fit.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported linear-fit format_version {}",
                fit.format_version
            )));
        }
        Ok(fit)
    }
}
