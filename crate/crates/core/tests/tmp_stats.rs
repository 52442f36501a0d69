#[test]
fn stats() {
    use ctrnn_core::sim::*;
    let cfg = SimConfig { n_trajectories: 2000, ..SimConfig::default() };
    let t0 = std::time::Instant::now();
    let (records, resamples) = simulate_dataset(&cfg).unwrap();
    let mean = records.iter().map(|r| r.events.len()).sum::<usize>() as f64 / records.len() as f64;
    let mut lo = f64::MAX; let mut hi: f64 = 0.0; let mut sumg = 0.0; let mut n = 0;
    let mut insulin_on = 0usize; let mut tot = 0usize;
    for r in &records { for e in &r.events {
        lo = lo.min(e.glucose_true); hi = hi.max(e.glucose_true); sumg += e.glucose_true; n += 1;
        if e.insulin_rate > 0.0 { insulin_on += 1; } tot += 1;
    }}
    eprintln!("mean events {mean:.3}, resamples {resamples}, glucose range [{lo:.1},{hi:.1}] mean {:.1}, insulin-on fraction {:.3}, sim time {:?}",
        sumg / n as f64, insulin_on as f64 / tot as f64, t0.elapsed());
}
