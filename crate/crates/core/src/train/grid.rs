//! Grid hyperparameter search over hidden dimension, jump-loss weight,
//! and (for the KL jump) the assumed observation-error variance, selected
//! by CRPS on an external hold-out set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{JumpKind, LossConfig};
use crate::metrics::{evaluate, Forecaster};
use crate::model::{ArchKind, ArchSpec};
use crate::sim::TrajectoryRecord;
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub hidden_dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Observation-error variances; only enters when the jump loss is KL.
    pub obs_error_vars: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            hidden_dims: vec![16, 32],
            lambdas: vec![0.0, 0.1, 1.0],
            obs_error_vars: vec![0.01],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden_dim: usize,
    pub lambda: f64,
    pub obs_error_var: Option<f64>,
    pub crps: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_hidden_dim: usize,
    pub best_lambda: f64,
    pub best_obs_error_var: Option<f64>,
    pub cells: Vec<GridCell>,
}

/// Train one model per grid cell and pick the minimal external-holdout
/// CRPS; ties break toward the smaller hidden dimension, then smaller
/// lambda. Failed cells are recorded, not fatal.
pub fn grid_search(
    kind: ArchKind,
    base_spec: &ArchSpec,
    train_set: &[TrajectoryRecord],
    external_holdout: &[TrajectoryRecord],
    grid: &GridSpec,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<GridOutcome> {
    if grid.hidden_dims.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::Config("grid lists must be nonempty".into()));
    }
    if lcfg.jump_kind == JumpKind::Kl && grid.obs_error_vars.is_empty() {
        return Err(Error::Config(
            "KL jump grid needs at least one obs_error_var".into(),
        ));
    }

    let var_axis: Vec<Option<f64>> = match lcfg.jump_kind {
        JumpKind::Kl => grid.obs_error_vars.iter().map(|&v| Some(v)).collect(),
        JumpKind::Nll => vec![None],
    };

    let mut cells = Vec::new();
    for &hidden in &grid.hidden_dims {
        for &lambda in &grid.lambdas {
            for &var in &var_axis {
                let mut spec = ArchSpec::new(kind, hidden);
                spec.solve = base_spec.solve;
                let cell_lcfg = LossConfig {
                    lambda,
                    jump_kind: lcfg.jump_kind,
                    obs_error_var: var.unwrap_or(lcfg.obs_error_var),
                };
                let outcome = train(&spec, train_set, tcfg, &cell_lcfg).and_then(|res| {
                    evaluate(
                        &Forecaster::Model(&res.model, &res.params),
                        external_holdout,
                    )
                });
                cells.push(match outcome {
                    Ok(report) => GridCell {
                        hidden_dim: hidden,
                        lambda,
                        obs_error_var: var,
                        crps: Some(report.crps.mean),
                        error: None,
                    },
                    Err(e) => GridCell {
                        hidden_dim: hidden,
                        lambda,
                        obs_error_var: var,
                        crps: None,
                        error: Some(e.to_string()),
                    },
                });
            }
        }
    }

    let best = cells
        .iter()
        .filter_map(|c| c.crps.map(|s| (s, c)))
        .min_by(|(sa, ca), (sb, cb)| {
            sa.partial_cmp(sb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ca.hidden_dim.cmp(&cb.hidden_dim))
                .then(
                    ca.lambda
                        .partial_cmp(&cb.lambda)
                        .unwrap_or(std::cmp::Ordering::Equal),
                )
        })
        .map(|(_, c)| c.clone())
        .ok_or_else(|| Error::Numeric("every grid cell failed".into()))?;

    Ok(GridOutcome {
        best_hidden_dim: best.hidden_dim,
        best_lambda: best.lambda,
        best_obs_error_var: best.obs_error_var,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::SolveMethod;
    use crate::sim::{simulate_dataset, SimConfig};

    fn data(n: usize, seed: u64) -> Vec<TrajectoryRecord> {
        simulate_dataset(&SimConfig {
            n_trajectories: n,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
        .0
    }

    fn quick_cfgs() -> (ArchSpec, TrainConfig, LossConfig) {
        let mut spec = ArchSpec::new(ArchKind::TimegapGru, 4);
        spec.solve.method = SolveMethod::Euler;
        let tcfg = TrainConfig {
            max_epochs: 2,
            patience: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        (spec, tcfg, LossConfig::default())
    }

    #[test]
    fn one_cell_grid_returns_that_cell() {
        let train_set = data(30, 1);
        let holdout = data(10, 2);
        let (spec, tcfg, lcfg) = quick_cfgs();
        let grid = GridSpec {
            hidden_dims: vec![4],
            lambdas: vec![0.5],
            obs_error_vars: vec![],
        };
        let out = grid_search(
            ArchKind::TimegapGru,
            &spec,
            &train_set,
            &holdout,
            &grid,
            &tcfg,
            &lcfg,
        )
        .unwrap();
        assert_eq!(out.best_hidden_dim, 4);
        assert_eq!(out.best_lambda, 0.5);
        assert_eq!(out.cells.len(), 1);
        assert!(out.best_obs_error_var.is_none());
    }

    #[test]
    fn table_covers_full_grid_and_kl_adds_var_axis() {
        let train_set = data(20, 3);
        let holdout = data(8, 4);
        let (spec, tcfg, _) = quick_cfgs();
        let grid = GridSpec {
            hidden_dims: vec![3, 4],
            lambdas: vec![0.0, 1.0],
            obs_error_vars: vec![0.01, 0.04],
        };
        let nll = grid_search(
            ArchKind::TimegapGru,
            &spec,
            &train_set,
            &holdout,
            &grid,
            &tcfg,
            &LossConfig {
                jump_kind: JumpKind::Nll,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(nll.cells.len(), 4);

        let kl = grid_search(
            ArchKind::TimegapGru,
            &spec,
            &train_set,
            &holdout,
            &grid,
            &tcfg,
            &LossConfig {
                jump_kind: JumpKind::Kl,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(kl.cells.len(), 8);
        assert!(kl.best_obs_error_var.is_some());
    }

    #[test]
    fn ties_break_toward_smaller_hidden_dim() {
        let cells = [
            GridCell {
                hidden_dim: 8,
                lambda: 0.0,
                obs_error_var: None,
                crps: Some(0.2),
                error: None,
            },
            GridCell {
                hidden_dim: 4,
                lambda: 1.0,
                obs_error_var: None,
                crps: Some(0.2),
                error: None,
            },
        ];
        let best = cells
            .iter()
            .filter_map(|c| c.crps.map(|s| (s, c)))
            .min_by(|(sa, ca), (sb, cb)| {
                sa.partial_cmp(sb)
                    .unwrap()
                    .then(ca.hidden_dim.cmp(&cb.hidden_dim))
            })
            .unwrap()
            .1;
        assert_eq!(best.hidden_dim, 4);
    }
}
