//! Mini-batch BPTT training with an internal hold-out for early stopping.
//!
//! Trajectories in a batch run data-parallel against a read-only parameter
//! snapshot; gradients merge in trajectory order, so results do not depend
//! on the worker count.

mod experiment;
mod grid;

pub use experiment::{run_experiment, ExperimentBundle, ExperimentCell, ExperimentConfig};
pub use grid::{grid_search, GridCell, GridOutcome, GridSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_jump, loss_jump_kl, loss_pred, total_loss, JumpKind, LossConfig};
use crate::model::{ArchSpec, CtrnnModel};
use crate::sim::TrajectoryRecord;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adaptive-moment decay pair (first, second).
    pub adam_betas: (f64, f64),
    pub clip_norm: f64,
    /// Epochs without hold-out improvement tolerated before stopping.
    pub patience: usize,
    /// Fraction of the training set held out internally.
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            clip_norm: 5.0,
            patience: 5,
            holdout_frac: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac <= 0.5) {
            return Err(Error::Config("holdout_frac must be in (0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub pred_loss: f64,
    pub jump_loss: f64,
    pub holdout_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Trajectories dropped for having fewer than two events.
    pub skipped_short: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,pred_loss,jump_loss,holdout_loss,learning_rate\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                e.epoch, e.train_loss, e.pred_loss, e.jump_loss, e.holdout_loss, e.learning_rate
            ));
        }
        s
    }
}

/// Adam-style adaptive-moment optimizer over a [`ParamStore`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: std::collections::BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            moments: Default::default(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One step from the accumulated gradients in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads.iter() {
            let value = store
                .value(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| {
                    (
                        Tensor::zeros(value.rows(), value.cols()),
                        Tensor::zeros(value.rows(), value.cols()),
                    )
                });
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            let gdata = grad.data();
            let mdata = m.data_mut();
            let vdata = v.data_mut();
            let mut update = vec![0.0; gdata.len()];
            for i in 0..gdata.len() {
                mdata[i] = b1 * mdata[i] + (1.0 - b1) * gdata[i];
                vdata[i] = b2 * vdata[i] + (1.0 - b2) * gdata[i] * gdata[i];
                let mhat = mdata[i] / bc1;
                let vhat = vdata[i] / bc2;
                update[i] = -lr * mhat / (vhat.sqrt() + eps);
            }
            store.apply(name, |t| {
                for (x, u) in t.data_mut().iter_mut().zip(&update) {
                    *x += u;
                }
            })?;
        }
        Ok(())
    }
}

/// Scale gradients so the global norm does not exceed `clip`.
pub fn clip_global_norm(grads: &mut GradBuffer, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip && norm > 0.0 {
        grads.scale(clip / norm);
    }
    norm
}

pub struct TrainResult {
    pub model: CtrnnModel,
    pub params: ParamStore,
    pub history: TrainHistory,
}

struct TrajLoss {
    grads: GradBuffer,
    total: f64,
    pred: f64,
    jump: f64,
}

fn trajectory_losses(
    model: &CtrnnModel,
    store: &ParamStore,
    traj: &TrajectoryRecord,
    lcfg: &LossConfig,
    with_grads: bool,
) -> Result<TrajLoss> {
    let mut g = Graph::new();
    let steps = model.rollout(&mut g, store, traj)?;
    let pred = loss_pred(&mut g, &steps)?;
    let jump = match lcfg.jump_kind {
        JumpKind::Nll => loss_jump(&mut g, &steps)?,
        JumpKind::Kl => loss_jump_kl(&mut g, &steps, lcfg.obs_error_var)?,
    };
    let total = total_loss(&mut g, &steps, lcfg)?;
    let grads = if with_grads {
        g.backward(total)?
    } else {
        GradBuffer::new()
    };
    Ok(TrajLoss {
        grads,
        total: g.value(total).item(),
        pred: g.value(pred).item(),
        jump: g.value(jump).item(),
    })
}

fn mean_holdout_loss(
    model: &CtrnnModel,
    store: &ParamStore,
    holdout: &[&TrajectoryRecord],
    lcfg: &LossConfig,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = holdout
        .par_iter()
        .map(|traj| trajectory_losses(model, store, traj, lcfg, false).map(|l| l.total))
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / holdout.len() as f64)
}

/// Train `spec` on `dataset`. Returns the parameters achieving the best
/// internal hold-out loss, not the final ones.
pub fn train(
    spec: &ArchSpec,
    dataset: &[TrajectoryRecord],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainResult> {
    tcfg.validate()?;
    lcfg.validate()?;
    spec.validate()?;

    let usable: Vec<&TrajectoryRecord> = dataset.iter().filter(|t| t.events.len() >= 2).collect();
    let skipped_short = dataset.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::data("no trajectories with >= 2 events to train on"));
    }

    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7261_696e);
    order.shuffle(&mut rng);
    let n_holdout = ((usable.len() as f64 * tcfg.holdout_frac).ceil() as usize)
        .clamp(1, usable.len().saturating_sub(1).max(1));
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let holdout: Vec<&TrajectoryRecord> = holdout_idx.iter().map(|&i| usable[i]).collect();
    let mut train_set: Vec<&TrajectoryRecord> = train_idx.iter().map(|&i| usable[i]).collect();
    if train_set.is_empty() {
        train_set = holdout.clone();
    }

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let model = CtrnnModel::init(spec.clone(), &mut store, &mut init_rng)?;

    let mut opt = Adam::new(tcfg.learning_rate, tcfg.adam_betas);
    let mut history = TrainHistory {
        skipped_short,
        ..Default::default()
    };
    let mut best_loss = f64::INFINITY;
    let mut best_params = store.clone();
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut last_good = store.clone();
    let mut retries = 0usize;

    'epochs: for epoch in 0..tcfg.max_epochs {
        train_set.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_pred = 0.0;
        let mut epoch_jump = 0.0;
        let mut n_seen = 0usize;

        let mut start = 0;
        while start < train_set.len() {
            let end = (start + tcfg.batch_size).min(train_set.len());
            let batch = &train_set[start..end];
            let results: Vec<Result<TrajLoss>> = batch
                .par_iter()
                .map(|traj| trajectory_losses(&model, &store, traj, lcfg, true))
                .collect();

            let mut merged = GradBuffer::new();
            let mut batch_ok = true;
            let mut batch_total = 0.0;
            let mut batch_pred = 0.0;
            let mut batch_jump = 0.0;
            for r in &results {
                match r {
                    Ok(l) if l.total.is_finite() => {
                        batch_total += l.total;
                        batch_pred += l.pred;
                        batch_jump += l.jump;
                    }
                    _ => {
                        batch_ok = false;
                        break;
                    }
                }
            }
            if !batch_ok {
                // A step blew the parameters up. Back off: restore the last
                // good parameters, halve the learning rate, redo this batch.
                retries += 1;
                if retries > 3 {
                    return Err(Error::Numeric(format!(
                        "training diverged after {retries} learning-rate halvings \
                         (epoch {epoch}, lr {:.3e})",
                        opt.lr()
                    )));
                }
                store.copy_values_from(&last_good)?;
                opt.set_lr(opt.lr() / 2.0);
                continue;
            }
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let l = r.expect("checked above");
                merged.merge_scaled(&l.grads, scale)?;
            }
            clip_global_norm(&mut merged, tcfg.clip_norm);
            last_good = store.clone();
            opt.step(&mut store, &merged)?;

            epoch_total += batch_total;
            epoch_pred += batch_pred;
            epoch_jump += batch_jump;
            n_seen += batch.len();
            start = end;
        }

        let holdout_loss = match mean_holdout_loss(&model, &store, &holdout, lcfg) {
            Ok(l) if l.is_finite() => l,
            _ => f64::INFINITY,
        };
        let nf = n_seen.max(1) as f64;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_total / nf,
            pred_loss: epoch_pred / nf,
            jump_loss: epoch_jump / nf,
            holdout_loss,
            learning_rate: opt.lr(),
        });

        if holdout_loss < best_loss {
            best_loss = holdout_loss;
            best_params = store.clone();
            best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > tcfg.patience {
                break 'epochs;
            }
        }
    }

    history.best_epoch = best_epoch;
    Ok(TrainResult {
        model,
        params: best_params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchKind;
    use crate::sim::{simulate_dataset, SimConfig};

    fn toy_dataset(n: usize, seed: u64) -> Vec<TrajectoryRecord> {
        simulate_dataset(&SimConfig {
            n_trajectories: n,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
        .0
    }

    fn fast_spec(kind: ArchKind) -> ArchSpec {
        let mut spec = ArchSpec::new(kind, 8);
        spec.solve.method = crate::evolve::SolveMethod::Euler;
        spec
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // Minimize (w - 3)^2 by gradient descent on the quadratic.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0])).unwrap();
        let mut opt = Adam::new(0.1, (0.9, 0.999));
        for _ in 0..300 {
            let w = store.value("w").unwrap().data()[0];
            let mut grads = GradBuffer::new();
            grads
                .accumulate_tensor("w", &Tensor::vector(vec![2.0 * (w - 3.0)]))
                .unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        let w = store.value("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut grads = GradBuffer::new();
        grads
            .accumulate_tensor("a", &Tensor::vector(vec![30.0, 40.0]))
            .unwrap();
        let pre = clip_global_norm(&mut grads, 5.0);
        assert!((pre - 50.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-9);
        // Below the clip nothing changes.
        let mut small = GradBuffer::new();
        small
            .accumulate_tensor("a", &Tensor::vector(vec![0.3, 0.4]))
            .unwrap();
        clip_global_norm(&mut small, 5.0);
        assert!((small.global_norm() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn training_loss_decreases_on_toy_set() {
        let data = toy_dataset(100, 5);
        let tcfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            seed: 1,
            ..TrainConfig::default()
        };
        let res = train(&fast_spec(ArchKind::DecayGru), &data, &tcfg, &LossConfig::default())
            .unwrap();
        let losses: Vec<f64> = res.history.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(losses.len(), 5);
        let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreases >= 4, "losses {losses:?}");
    }

    #[test]
    fn jump_loss_strictly_decreases_early() {
        let data = toy_dataset(100, 6);
        let tcfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let res = train(
            &fast_spec(ArchKind::TimegapGru),
            &data,
            &tcfg,
            &LossConfig {
                lambda: 1.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        let jumps: Vec<f64> = res.history.epochs.iter().map(|e| e.jump_loss).collect();
        for w in jumps.windows(2) {
            assert!(w[1] < w[0], "jump losses {jumps:?}");
        }
    }

    #[test]
    fn patience_zero_stops_one_epoch_past_first_non_improvement() {
        let data = toy_dataset(40, 7);
        // Aggressive rate so the hold-out loss actually fluctuates.
        let tcfg = TrainConfig {
            max_epochs: 200,
            patience: 0,
            learning_rate: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let res = train(&fast_spec(ArchKind::TimegapGru), &data, &tcfg, &LossConfig::default())
            .unwrap();
        let h: Vec<f64> = res.history.epochs.iter().map(|e| e.holdout_loss).collect();
        // The last epoch is the first one that failed to improve on the best.
        let last = h.len() - 1;
        let best_before: f64 = h[..last].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(h[last] >= best_before, "history {h:?}");
        for k in 1..last {
            assert!(
                h[k] < h[..k].iter().cloned().fold(f64::INFINITY, f64::min),
                "stopped late: {h:?}"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_history_bitwise() {
        let data = toy_dataset(60, 8);
        let tcfg = TrainConfig {
            max_epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&fast_spec(ArchKind::FlowGru), &data, &tcfg, &LossConfig::default()).unwrap();
        let b = train(&fast_spec(ArchKind::FlowGru), &data, &tcfg, &LossConfig::default()).unwrap();
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.holdout_loss.to_bits(), y.holdout_loss.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_history() {
        let data = toy_dataset(60, 8);
        let tcfg = TrainConfig {
            max_epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let spec = fast_spec(ArchKind::OdeGru);
        let a = train(&spec, &data, &tcfg, &LossConfig::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool
            .install(|| train(&spec, &data, &tcfg, &LossConfig::default()))
            .unwrap();
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.holdout_loss.to_bits(), y.holdout_loss.to_bits());
        }
    }

    #[test]
    fn short_trajectories_are_skipped_and_counted() {
        let mut data = toy_dataset(20, 10);
        for t in data.iter_mut().take(5) {
            t.events.truncate(1);
        }
        let tcfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let res = train(&fast_spec(ArchKind::TimegapLstm), &data, &tcfg, &LossConfig::default())
            .unwrap();
        assert_eq!(res.history.skipped_short, 5);
    }

    #[test]
    fn best_params_beat_final_params_on_holdout() {
        let data = toy_dataset(80, 11);
        let tcfg = TrainConfig {
            max_epochs: 12,
            patience: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let res = train(&fast_spec(ArchKind::DecayGru), &data, &tcfg, &LossConfig::default())
            .unwrap();
        let best: f64 = res
            .history
            .epochs
            .iter()
            .map(|e| e.holdout_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(
            res.history.epochs[res.history.best_epoch].holdout_loss, best,
            "returned parameters come from the best epoch"
        );
    }
}
