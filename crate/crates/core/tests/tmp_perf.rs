use ctrnn_core::evolve::SolveMethod;
use ctrnn_core::losses::LossConfig;
use ctrnn_core::model::{ArchKind, ArchSpec};
use ctrnn_core::sim::{simulate_dataset, SimConfig};
use ctrnn_core::train::{train, TrainConfig};

#[test]
fn perf() {
    let (data, _) = simulate_dataset(&SimConfig { n_trajectories: 1000, seed: 1, ..SimConfig::default() }).unwrap();
    for kind in [ArchKind::OdeLstm, ArchKind::OdeGru, ArchKind::FlowGru, ArchKind::Imode, ArchKind::TimegapGru, ArchKind::DecayGru] {
        let mut spec = ArchSpec::new(kind, 16);
        spec.solve.method = SolveMethod::Euler;
        let tcfg = TrainConfig { max_epochs: 3, patience: 5, seed: 1, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let res = train(&spec, &data, &tcfg, &LossConfig::default()).unwrap();
        eprintln!("{kind}: 3 epochs on N=1000 took {:.2}s ({:.1} ms/traj/epoch), loss {:.2} -> {:.2}",
            t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64() * 1000.0 / 3000.0,
            res.history.epochs[0].train_loss, res.history.epochs.last().unwrap().train_loss);
    }
}
