//! Synthetic ICU glucose data: a mean-reverting SDE stepped with
//! Euler-Maruyama, an intensity-modulated measurement process, a threshold
//! insulin protocol, scenario variants (observation noise, regime-switching
//! insulin sensitivity), and the exact Gaussian transition used as the
//! oracle forecaster.
//!
//! Per trajectory the generator draws from four independent RNG streams
//! (SDE noise, measurement gaps, observation error, sensitivity regime),
//! each derived from `(seed, traj_id)`. Scenarios therefore share the
//! underlying glucose path: with observation noise switched on, the true
//! process and the event times are bit-identical to the standard scenario
//! under the same seed.

mod dataset;

pub use dataset::{read_dataset, write_dataset, write_summary, DatasetSummary};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum spacing between measurements (5 minutes, in hours).
pub const MIN_GAP_HOURS: f64 = 5.0 / 60.0;

/// Recorded glucose values are floored here so log-scale modelling stays
/// defined in the far tail.
const GLUCOSE_FLOOR: f64 = 1.0;

/// Per-subject parameters of the glucose SDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeParams {
    /// Initial glucose, mg/dL.
    pub g0: f64,
    /// Baseline glucose the process reverts to, mg/dL.
    pub gb: f64,
    /// Mean-reversion rate, 1/hour.
    pub gamma: f64,
    /// Stationary scale, mg/dL.
    pub sigma: f64,
    /// Insulin sensitivity: drift of `-beta * m / insulin_unit_scale`
    /// mg/dL per hour at insulin rate `m` U/h.
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Standard,
    MeasurementError,
    NonstationaryBeta,
}

/// Piecewise-constant feeding segment: `rate` g/h applies from `start`
/// hours until the next segment (or the horizon).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedSegment {
    pub start: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_trajectories: usize,
    /// Hours simulated per trajectory.
    pub horizon: f64,
    /// Euler-Maruyama step, hours. Must divide the horizon.
    pub dt: f64,
    pub seed: u64,
    pub scenario: Scenario,
    /// Observation-noise SD, mg/dL (measurement_error scenario).
    pub error_sd: f64,
    /// Constant sugar intake, g/h, unless a feeding schedule is given.
    pub glucose_input_rate: f64,
    /// Optional piecewise-constant feeding; overrides the constant rate
    /// from each segment start onward.
    pub feeding: Vec<FeedSegment>,
    /// Insulin rates are divided by this before multiplying beta, so the
    /// maximum protocol rate (20 U/h) exerts a drift of `-beta` mg/dL/h.
    pub insulin_unit_scale: f64,
    /// Mean holding time of each sensitivity regime, hours
    /// (nonstationary_beta scenario).
    pub beta_switch_mean_hours: f64,
    /// Sensitivity multiplier in the reduced regime.
    pub beta_switch_factor: f64,
    /// Record the true path on a coarse grid for diagnostics/plots.
    pub store_dense_truth: bool,
    /// Dense-grid spacing, hours; must be a multiple of `dt`.
    pub dense_grid_dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_trajectories: 1000,
            horizon: 24.0,
            dt: 0.05,
            seed: 0,
            scenario: Scenario::Standard,
            error_sd: 10.0,
            glucose_input_rate: 0.0,
            feeding: Vec::new(),
            insulin_unit_scale: 20.0,
            beta_switch_mean_hours: 8.0,
            beta_switch_factor: 0.5,
            store_dense_truth: false,
            dense_grid_dt: 0.25,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::Config("n_trajectories must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "horizon {} must be an integral number of dt {} steps",
                self.horizon, self.dt
            )));
        }
        if self.error_sd < 0.0 {
            return Err(Error::Config("error_sd must be >= 0".into()));
        }
        if !(self.insulin_unit_scale > 0.0) {
            return Err(Error::Config("insulin_unit_scale must be positive".into()));
        }
        if self.store_dense_truth {
            let r = self.dense_grid_dt / self.dt;
            if (r - r.round()).abs() > 1e-9 || self.dense_grid_dt <= 0.0 {
                return Err(Error::Config(
                    "dense_grid_dt must be a positive multiple of dt".into(),
                ));
            }
        }
        Ok(())
    }

    fn feed_rate(&self, t: f64) -> f64 {
        self.feeding
            .iter()
            .rev()
            .find(|s| s.start <= t)
            .map(|s| s.rate)
            .unwrap_or(self.glucose_input_rate)
    }

    fn next_feed_change(&self, t: f64) -> f64 {
        self.feeding
            .iter()
            .map(|s| s.start)
            .filter(|&s| s > t + 1e-12)
            .fold(f64::INFINITY, f64::min)
    }
}

/// One measurement event. Insulin and feeding rates cover `[t, next event)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajEvent {
    pub t: f64,
    pub glucose_obs: f64,
    pub glucose_true: f64,
    pub insulin_rate: f64,
    pub glucose_input: f64,
    pub mask: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTruth {
    pub times: Vec<f64>,
    pub glucose: Vec<f64>,
}

/// One simulated patient: the observed process plus the generative
/// parameters, which the analytic oracle forecaster needs at evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub traj_id: u64,
    pub params: SdeParams,
    pub insulin_unit_scale: f64,
    pub events: Vec<TrajEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_truth: Option<DenseTruth>,
}

/// Exact Gaussian transition of the glucose process over a gap with
/// constant net input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleForecast {
    pub mu: f64,
    pub sd: f64,
}

const PURPOSE_PARAMS: u64 = 0;
const PURPOSE_SDE: u64 = 1;
const PURPOSE_MEAS: u64 = 2;
const PURPOSE_ERR: u64 = 3;
const PURPOSE_REGIME: u64 = 4;

/// Independent, reproducible stream for `(seed, traj_id, purpose, salt)`.
fn stream(seed: u64, traj_id: u64, purpose: u64, salt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&traj_id.to_le_bytes());
    key[16..24].copy_from_slice(&purpose.to_le_bytes());
    key[24..32].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draw per-subject SDE parameters from the population priors. The rate
/// and scale are redrawn while nonpositive.
pub fn sample_params(rng: &mut impl Rng) -> SdeParams {
    fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        mean + sd * z
    }
    let g0 = normal(rng, 140.0, 20.0);
    let gb = normal(rng, 140.0, 5.0);
    let mut gamma = normal(rng, 0.5, 0.01);
    while gamma <= 0.0 {
        gamma = normal(rng, 0.5, 0.01);
    }
    let mut sigma = normal(rng, 20.0, 2.0);
    while sigma <= 0.0 {
        sigma = normal(rng, 20.0, 2.0);
    }
    let beta = normal(rng, 50.0, 5.0);
    SdeParams {
        g0,
        gb,
        gamma,
        sigma,
        beta,
    }
}

/// Threshold insulin protocol: a step function of the measured glucose.
pub fn treatment_policy(glucose: f64) -> f64 {
    if glucose < 140.0 {
        0.0
    } else if glucose < 160.0 {
        3.0
    } else if glucose < 200.0 {
        10.0
    } else {
        20.0
    }
}

/// Median of the next measurement gap in hours: shorter for extreme
/// glucose and while insulin runs.
pub fn median_gap(glucose: f64, insulin_rate: f64) -> f64 {
    let base = if insulin_rate > 0.0 { 3.0 } else { 5.0 };
    let width = if glucose < 80.0 { 50.0 } else { 140.0 };
    let dev = (glucose - 120.0) / width;
    base * (-dev * dev).exp()
}

/// Sample the gap to the next measurement: lognormal around
/// [`median_gap`] with log-scale SD 0.2, floored at five minutes. The
/// caller truncates against the horizon.
pub fn next_measurement_gap(glucose: f64, insulin_rate: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let gap = median_gap(glucose, insulin_rate) * (0.2 * z).exp();
    gap.max(MIN_GAP_HOURS)
}

/// Exact transition of `dG = (-gamma (G - Gb) + u) dt + sqrt(2 gamma sigma^2) dW`
/// over `gap` hours with constant net input `u` (mg/dL per hour).
pub fn oracle_forecast(g_now: f64, params: &SdeParams, u: f64, gap: f64) -> OracleForecast {
    debug_assert!(gap >= 0.0);
    let target = params.gb + u / params.gamma;
    let decay = (-params.gamma * gap).exp();
    let mu = target + (g_now - target) * decay;
    let sd = params.sigma * (1.0 - (-2.0 * params.gamma * gap).exp()).max(0.0).sqrt();
    OracleForecast { mu, sd }
}

/// Net drift input from the running treatment: feeding minus the scaled
/// insulin effect.
pub fn net_input(params: &SdeParams, insulin_rate: f64, glucose_input: f64, unit_scale: f64) -> f64 {
    glucose_input - params.beta * insulin_rate / unit_scale
}

struct RegimeProcess {
    active: bool,
    reduced: bool,
    next_switch: f64,
    factor: f64,
    mean_hold: f64,
}

impl RegimeProcess {
    fn new(config: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        if config.scenario != Scenario::NonstationaryBeta {
            return RegimeProcess {
                active: false,
                reduced: false,
                next_switch: f64::INFINITY,
                factor: 1.0,
                mean_hold: 0.0,
            };
        }
        let reduced = rng.random_bool(0.5);
        let exp = Exp::new(1.0 / config.beta_switch_mean_hours).expect("positive rate");
        let next_switch: f64 = rng.sample(exp);
        RegimeProcess {
            active: true,
            reduced,
            next_switch,
            factor: config.beta_switch_factor,
            mean_hold: config.beta_switch_mean_hours,
        }
    }

    fn beta_factor(&self) -> f64 {
        if self.active && self.reduced {
            self.factor
        } else {
            1.0
        }
    }

    fn maybe_switch(&mut self, t: f64, rng: &mut ChaCha8Rng) {
        while self.active && t >= self.next_switch - 1e-12 {
            self.reduced = !self.reduced;
            let exp = Exp::new(1.0 / self.mean_hold).expect("positive rate");
            let hold: f64 = rng.sample(exp);
            self.next_switch += hold;
        }
    }
}

fn observe(g_true: f64, config: &SimConfig, err_rng: &mut ChaCha8Rng) -> f64 {
    let obs = match config.scenario {
        Scenario::MeasurementError => {
            let e: f64 = err_rng.sample(StandardNormal);
            g_true + config.error_sd * e
        }
        _ => g_true,
    };
    obs.max(GLUCOSE_FLOOR)
}

/// Simulate one trajectory. Deterministic in `(config.seed, traj_id, salt)`
/// and independent of thread count. Returns an error if the state leaves
/// the finite range (the caller resamples with a new salt).
pub fn simulate_trajectory(
    params: &SdeParams,
    config: &SimConfig,
    traj_id: u64,
    salt: u64,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    let mut sde_rng = stream(config.seed, traj_id, PURPOSE_SDE, salt);
    let mut meas_rng = stream(config.seed, traj_id, PURPOSE_MEAS, salt);
    let mut err_rng = stream(config.seed, traj_id, PURPOSE_ERR, salt);
    let mut regime_rng = stream(config.seed, traj_id, PURPOSE_REGIME, salt);

    let horizon = config.horizon;
    let dt = config.dt;
    let diffusion = (2.0 * params.gamma * params.sigma * params.sigma).sqrt();

    let mut regime = RegimeProcess::new(config, &mut regime_rng);
    let mut g = params.g0;
    let mut t = 0.0f64;
    let mut events = Vec::with_capacity(10);
    let mut dense = if config.store_dense_truth {
        Some(DenseTruth {
            times: vec![0.0],
            glucose: vec![g],
        })
    } else {
        None
    };

    // Admission measurement at t = 0: insulin is set from it and the first
    // gap sampled.
    let mut insulin = treatment_policy(g);
    events.push(TrajEvent {
        t: 0.0,
        glucose_obs: observe(g, config, &mut err_rng),
        glucose_true: g.max(GLUCOSE_FLOOR),
        insulin_rate: insulin,
        glucose_input: config.feed_rate(0.0),
        mask: 1,
    });
    let mut next_obs = {
        let gap = next_measurement_gap(g, insulin, &mut meas_rng);
        (t + gap.min(horizon - t)).min(horizon)
    };

    let on_grid = |t: f64, step: f64| -> bool {
        let k = (t / step).round();
        (t - k * step).abs() < 1e-9
    };

    while t < horizon - 1e-9 {
        let boundary = next_obs
            .min(regime.next_switch)
            .min(config.next_feed_change(t))
            .min(horizon);
        // Step to the boundary, realigning to the global dt grid after
        // partial steps so dense samples land on exact grid times.
        while t < boundary - 1e-12 {
            let grid_next = dt * ((t / dt + 1e-9).floor() + 1.0);
            let h = grid_next.min(boundary) - t;
            if h < 1e-12 {
                break;
            }
            let beta_eff = params.beta * regime.beta_factor();
            let drift = -params.gamma * (g - params.gb) - beta_eff * insulin
                / config.insulin_unit_scale
                + config.feed_rate(t);
            let z: f64 = sde_rng.sample(StandardNormal);
            g += drift * h + diffusion * h.sqrt() * z;
            t += h;
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "trajectory {traj_id} diverged at t={t:.3}"
                )));
            }
            if let Some(d) = dense.as_mut() {
                if on_grid(t, config.dense_grid_dt) {
                    d.times.push(t);
                    d.glucose.push(g);
                }
            }
        }
        t = boundary;
        regime.maybe_switch(t, &mut regime_rng);
        if (t - next_obs).abs() < 1e-9 && t <= horizon + 1e-9 {
            insulin = treatment_policy(g);
            events.push(TrajEvent {
                t,
                glucose_obs: observe(g, config, &mut err_rng),
                glucose_true: g.max(GLUCOSE_FLOOR),
                insulin_rate: insulin,
                glucose_input: config.feed_rate(t),
                mask: 1,
            });
            let remaining = horizon - t;
            if remaining <= MIN_GAP_HOURS + 1e-9 {
                break;
            }
            let gap = next_measurement_gap(g, insulin, &mut meas_rng).min(remaining);
            next_obs = t + gap;
        }
    }

    Ok(TrajectoryRecord {
        traj_id,
        params: *params,
        insulin_unit_scale: config.insulin_unit_scale,
        events,
        dense_truth: dense,
    })
}

/// Simulate the full dataset in parallel. Diverged trajectories are
/// resampled with a fresh stream salt; the count of resamples is returned
/// alongside the records.
pub fn simulate_dataset(config: &SimConfig) -> Result<(Vec<TrajectoryRecord>, usize)> {
    config.validate()?;
    let results: Vec<Result<(TrajectoryRecord, usize)>> = (0..config.n_trajectories as u64)
        .into_par_iter()
        .map(|traj_id| {
            let mut salt = 0u64;
            loop {
                let mut prng = stream(config.seed, traj_id, PURPOSE_PARAMS, salt);
                let params = sample_params(&mut prng);
                match simulate_trajectory(&params, config, traj_id, salt) {
                    Ok(rec) => return Ok((rec, salt as usize)),
                    Err(Error::Numeric(_)) if salt < 100 => salt += 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect();
    let mut records = Vec::with_capacity(config.n_trajectories);
    let mut resamples = 0;
    for r in results {
        let (rec, salt) = r?;
        resamples += salt;
        records.push(rec);
    }
    Ok((records, resamples))
}
