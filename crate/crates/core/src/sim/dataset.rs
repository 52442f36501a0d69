//! JSONL dataset storage (one trajectory per line) and summary statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::TrajectoryRecord;

pub fn write_dataset(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data_at(idx + 1, e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

/// Event-count and inter-measurement-gap distributions for a dataset.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub n_trajectories: usize,
    pub mean_events: f64,
    /// `events_hist[k]` = number of trajectories with exactly `k` events.
    pub events_hist: Vec<(usize, usize)>,
    /// Half-hour bins of gaps between consecutive measurements.
    pub gap_hist: Vec<(f64, usize)>,
}

impl DatasetSummary {
    pub fn from_records(records: &[TrajectoryRecord]) -> Self {
        let n_trajectories = records.len();
        let total_events: usize = records.iter().map(|r| r.events.len()).sum();
        let mean_events = if n_trajectories == 0 {
            0.0
        } else {
            total_events as f64 / n_trajectories as f64
        };

        let max_events = records.iter().map(|r| r.events.len()).max().unwrap_or(0);
        let mut counts = vec![0usize; max_events + 1];
        for r in records {
            counts[r.events.len()] += 1;
        }
        let events_hist = counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .collect();

        const BIN: f64 = 0.5;
        let mut gap_counts: Vec<usize> = Vec::new();
        for r in records {
            for pair in r.events.windows(2) {
                let gap = pair[1].t - pair[0].t;
                let bin = (gap / BIN).floor() as usize;
                if gap_counts.len() <= bin {
                    gap_counts.resize(bin + 1, 0);
                }
                gap_counts[bin] += 1;
            }
        }
        let gap_hist = gap_counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 * BIN, c))
            .filter(|(_, c)| *c > 0)
            .collect();

        DatasetSummary {
            n_trajectories,
            mean_events,
            events_hist,
            gap_hist,
        }
    }
}

/// CSV with three columns `kind,key,value`: scalar stats, the
/// events-per-trajectory histogram, and the measurement-gap histogram.
pub fn write_summary(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let s = DatasetSummary::from_records(records);
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "kind,key,value")?;
    writeln!(w, "stat,n_trajectories,{}", s.n_trajectories)?;
    writeln!(w, "stat,mean_events_per_trajectory,{:.6}", s.mean_events)?;
    for (k, c) in &s.events_hist {
        writeln!(w, "events_hist,{k},{c}")?;
    }
    for (lo, c) in &s.gap_hist {
        writeln!(w, "gap_hist,{lo:.1},{c}")?;
    }
    w.flush()?;
    Ok(())
}
