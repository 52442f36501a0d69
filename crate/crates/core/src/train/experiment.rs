//! Seeded experiment sweeps: for each (data size, architecture, run)
//! simulate a training set, train, and score a fresh test set, alongside
//! the linear benchmark and the analytic oracle on the same test data.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::baseline::{fit_linear, FeatureSet};
use crate::error::{Error, Result};
use crate::evolve::{SolveConfig, SolveMethod};
use crate::losses::LossConfig;
use crate::metrics::{evaluate, Forecaster, ScoreReport};
use crate::model::{ArchKind, ArchSpec};
use crate::sim::{simulate_dataset, Scenario, SimConfig};
use crate::train::{train, TrainConfig, TrainHistory};

const BUNDLE_VERSION: u32 = 1;

/// Pseudo-architecture rows carried in every experiment.
pub const ORACLE_ROW: &str = "oracle";
pub const LINEAR_ROW: &str = "linear";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub sizes: Vec<usize>,
    pub archs: Vec<ArchKind>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub test_size: usize,
    pub hidden_dim: usize,
    pub solve: SolveConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub include_oracle: bool,
    pub include_linear: bool,
    pub error_sd: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Standard,
            sizes: vec![1000, 5000],
            archs: ArchKind::ALL.to_vec(),
            n_runs: 3,
            base_seed: 0,
            test_size: 1000,
            hidden_dim: 16,
            solve: SolveConfig {
                method: SolveMethod::Euler,
                steps_per_hour: 4,
                max_steps: 10_000,
            },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            include_oracle: true,
            include_linear: true,
            error_sd: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub report: ScoreReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub arch: String,
    pub size: usize,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentCell {
    pub fn aggregate(&self) -> Result<ScoreReport> {
        let reports: Vec<ScoreReport> = self.runs.iter().map(|r| r.report.clone()).collect();
        ScoreReport::aggregate(&reports)
    }

    pub fn crps_mean(&self) -> f64 {
        self.runs.iter().map(|r| r.report.crps.mean).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn crps_min(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.report.crps.mean)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn crps_max(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.report.crps.mean)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub cells: Vec<ExperimentCell>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix(base);
    for &p in parts {
        s = splitmix(s ^ p);
    }
    s
}

fn scenario_tag(s: Scenario) -> u64 {
    match s {
        Scenario::Standard => 1,
        Scenario::MeasurementError => 2,
        Scenario::NonstationaryBeta => 3,
    }
}

/// Run the full sweep. `progress` receives one line per completed step.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<ExperimentBundle> {
    if cfg.sizes.is_empty() || cfg.n_runs == 0 {
        return Err(Error::Config("experiment needs sizes and runs".into()));
    }
    let mut cells: Vec<ExperimentCell> = Vec::new();
    let mut push_run = |arch: &str, size: usize, outcome: RunOutcome, cells: &mut Vec<ExperimentCell>| {
        if let Some(cell) = cells
            .iter_mut()
            .find(|c| c.arch == arch && c.size == size)
        {
            cell.runs.push(outcome);
        } else {
            cells.push(ExperimentCell {
                arch: arch.to_string(),
                size,
                runs: vec![outcome],
            });
        }
    };

    for &size in &cfg.sizes {
        for run in 0..cfg.n_runs {
            let tag = scenario_tag(cfg.scenario);
            let data_seed = mix_seed(cfg.base_seed, &[tag, size as u64, run as u64]);
            let test_seed = mix_seed(cfg.base_seed, &[tag, size as u64, run as u64, 0x7e57]);
            let sim_cfg = SimConfig {
                n_trajectories: size,
                seed: data_seed,
                scenario: cfg.scenario,
                error_sd: cfg.error_sd,
                ..SimConfig::default()
            };
            let test_cfg = SimConfig {
                n_trajectories: cfg.test_size,
                seed: test_seed,
                ..sim_cfg.clone()
            };
            let (train_data, _) = simulate_dataset(&sim_cfg)?;
            let (test_data, _) = simulate_dataset(&test_cfg)?;
            progress(&format!(
                "simulated size={size} run={run} ({} train, {} test trajectories)",
                train_data.len(),
                test_data.len()
            ));

            for &arch in &cfg.archs {
                let mut spec = ArchSpec::new(arch, cfg.hidden_dim);
                spec.solve = cfg.solve;
                let mut tcfg = cfg.train;
                tcfg.seed = mix_seed(data_seed, &[arch as u64 + 1]);
                let started = std::time::Instant::now();
                let res = train(&spec, &train_data, &tcfg, &cfg.loss)?;
                let report = evaluate(&Forecaster::Model(&res.model, &res.params), &test_data)?;
                progress(&format!(
                    "trained {arch} size={size} run={run}: crps={:.4} ({} epochs, {:.1}s)",
                    report.crps.mean,
                    res.history.epochs.len(),
                    started.elapsed().as_secs_f64()
                ));
                push_run(
                    arch.name(),
                    size,
                    RunOutcome {
                        run,
                        report,
                        history: Some(res.history),
                    },
                    &mut cells,
                );
            }

            if cfg.include_linear {
                let fit = fit_linear(&train_data, FeatureSet::Basic)?;
                let report = evaluate(&Forecaster::Linear(&fit), &test_data)?;
                progress(&format!(
                    "linear size={size} run={run}: crps={:.4}",
                    report.crps.mean
                ));
                push_run(
                    LINEAR_ROW,
                    size,
                    RunOutcome {
                        run,
                        report,
                        history: None,
                    },
                    &mut cells,
                );
            }
            if cfg.include_oracle {
                let report = evaluate(&Forecaster::Oracle, &test_data)?;
                progress(&format!(
                    "oracle size={size} run={run}: crps={:.4}",
                    report.crps.mean
                ));
                push_run(
                    ORACLE_ROW,
                    size,
                    RunOutcome {
                        run,
                        report,
                        history: None,
                    },
                    &mut cells,
                );
            }
        }
    }

    Ok(ExperimentBundle {
        format_version: BUNDLE_VERSION,
        config: cfg.clone(),
        cells,
    })
}

impl ExperimentBundle {
    pub fn cell(&self, arch: &str, size: usize) -> Option<&ExperimentCell> {
        self.cells.iter().find(|c| c.arch == arch && c.size == size)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.cells.iter().map(|c| c.size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    pub fn archs(&self) -> Vec<String> {
        let mut archs: Vec<String> = self.cells.iter().map(|c| c.arch.clone()).collect();
        archs.sort();
        archs.dedup();
        archs
    }

    /// Continuous-vs-discrete ordering checks at the largest size present.
    /// Returns one message per violated pairing (soft finding, reported
    /// rather than fatal).
    pub fn soft_ordering_flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        let Some(&size) = self.sizes().last() else {
            return flags;
        };
        for (cont, disc) in [("ode_lstm", "timegap_lstm"), ("flow_gru", "timegap_gru")] {
            if let (Some(c), Some(d)) = (self.cell(cont, size), self.cell(disc, size)) {
                if c.crps_mean() > d.crps_mean() {
                    flags.push(format!(
                        "at N={size}: {cont} mean CRPS {:.4} exceeds {disc} {:.4}",
                        c.crps_mean(),
                        d.crps_mean()
                    ));
                }
            }
        }
        flags
    }

    /// Write `experiment.json` plus per-run history CSVs under `cells/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("experiment.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        for cell in &self.cells {
            for run in &cell.runs {
                if let Some(h) = &run.history {
                    let run_dir = dir
                        .join("cells")
                        .join(format!("{}_{}", cell.arch, cell.size))
                        .join(format!("run{}", run.run));
                    std::fs::create_dir_all(&run_dir)?;
                    std::fs::write(run_dir.join("history.csv"), h.to_csv())?;
                    std::fs::write(
                        run_dir.join("report.json"),
                        serde_json::to_string_pretty(&run.report)?,
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("experiment.json"))?;
        let bundle: ExperimentBundle = serde_json::from_str(&text)?;
        if bundle.format_version != BUNDLE_VERSION {
            return Err(Error::data(format!(
                "unsupported experiment format_version {}",
                bundle.format_version
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            sizes: vec![60],
            archs: vec![ArchKind::DecayGru],
            n_runs: 1,
            test_size: 40,
            hidden_dim: 4,
            train: TrainConfig {
                max_epochs: 2,
                patience: 1,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn single_cell_experiment_produces_reports() {
        let bundle = run_experiment(&tiny_config(), |_| {}).unwrap();
        // decay_gru + linear + oracle rows
        assert_eq!(bundle.cells.len(), 3);
        let cell = bundle.cell("decay_gru", 60).unwrap();
        assert_eq!(cell.runs.len(), 1);
        assert!(cell.runs[0].report.n_forecasts > 0);
        assert!(bundle.cell(ORACLE_ROW, 60).is_some());
        assert!(bundle.cell(LINEAR_ROW, 60).is_some());
    }

    #[test]
    fn three_runs_min_le_mean_le_max() {
        let cfg = ExperimentConfig {
            n_runs: 3,
            ..tiny_config()
        };
        let bundle = run_experiment(&cfg, |_| {}).unwrap();
        let cell = bundle.cell("decay_gru", 60).unwrap();
        assert_eq!(cell.runs.len(), 3);
        let (lo, mid, hi) = (cell.crps_min(), cell.crps_mean(), cell.crps_max());
        assert!(lo <= mid && mid <= hi);
        let agg = cell.aggregate().unwrap();
        assert!((agg.crps.mean - mid).abs() < 1e-12);
    }

    #[test]
    fn bundle_save_load_roundtrip() {
        let bundle = run_experiment(&tiny_config(), |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ExperimentBundle::load(dir.path()).unwrap();
        assert_eq!(back.cells.len(), bundle.cells.len());
        assert!(dir
            .path()
            .join("cells")
            .join("decay_gru_60")
            .join("run0")
            .join("history.csv")
            .exists());
        assert_eq!(
            back.cell("decay_gru", 60).unwrap().runs[0].report.crps.mean,
            bundle.cell("decay_gru", 60).unwrap().runs[0].report.crps.mean
        );
    }
}
