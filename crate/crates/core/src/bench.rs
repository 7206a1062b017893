//! Stability sweeps over chain length, initial distribution and seed.

use std::fmt::Write as _;
use std::sync::Mutex;

use crate::data::Dataset;
use crate::diag::median;
use crate::error::{Error, Result};
use crate::init::InitKind;
use crate::trainer::{divergence_monitor, run, Health, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub k: usize,
    pub init: InitKind,
    pub seed: u64,
    pub healthy: bool,
    pub diverged_at: Option<u64>,
    /// Mean `|E+ - E-|` over the last `divergence_window` completed steps.
    pub final_gap: f64,
    pub iters: u64,
}

pub const STABILITY_HEADER: &str = "k,init,seed,healthy,diverged_at,final_gap,iters";

impl StabilityRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k,
            self.init,
            self.seed,
            self.healthy,
            self.diverged_at.map(|i| i.to_string()).unwrap_or_default(),
            self.final_gap,
            self.iters
        )
    }
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut s = format!("{STABILITY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Per-(K, init) aggregate of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySummary {
    pub k: usize,
    pub init: InitKind,
    pub runs: usize,
    pub healthy: usize,
    pub median_final_gap: f64,
}

impl StabilitySummary {
    pub fn divergence_rate(&self) -> f64 {
        (self.runs - self.healthy) as f64 / self.runs as f64
    }
}

pub const SUMMARY_HEADER: &str = "k,init,runs,healthy,divergence_rate,median_final_gap";

/// Groups rows by `(k, init)` in order of first appearance.
pub fn summarize(rows: &[StabilityRow]) -> Vec<StabilitySummary> {
    let mut keys: Vec<(usize, InitKind)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.k, r.init)) {
            keys.push((r.k, r.init));
        }
    }
    keys.into_iter()
        .map(|(k, init)| {
            let cell: Vec<&StabilityRow> = rows.iter().filter(|r| r.k == k && r.init == init).collect();
            let gaps: Vec<f64> = cell.iter().map(|r| r.final_gap).collect();
            StabilitySummary {
                k,
                init,
                runs: cell.len(),
                healthy: cell.iter().filter(|r| r.healthy).count(),
                median_final_gap: median(&gaps),
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[StabilitySummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.k,
            r.init,
            r.runs,
            r.healthy,
            r.divergence_rate(),
            r.median_final_gap
        );
    }
    s
}

/// Trains one sweep cell for `cfg.total_iters()` steps. Divergence is
/// recorded in the row rather than returned.
pub fn stability_cell(cfg: &TrainConfig, data: &Dataset) -> Result<StabilityRow> {
    let mut state = TrainState::new(cfg, data)?;
    let outcome = run(&mut state, cfg, data, None);
    let mut diverged_at = match outcome {
        Ok(()) => None,
        Err(Error::TrainingDivergence { iter, .. }) => Some(iter),
        Err(e) => return Err(e),
    };
    if let Health::Diverged(i) = divergence_monitor(&state.history, cfg.divergence_threshold, cfg.divergence_window) {
        diverged_at = Some(diverged_at.map_or(i, |d| d.min(i)));
    }
    let h = &state.history;
    let tail = &h[h.len().saturating_sub(cfg.divergence_window)..];
    let final_gap = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|b| b.energy_gap()).sum::<f64>() / tail.len() as f64
    };
    Ok(StabilityRow {
        k: cfg.sgld.steps,
        init: cfg.init,
        seed: cfg.seed,
        healthy: diverged_at.is_none(),
        diverged_at,
        final_gap,
        iters: state.iteration,
    })
}

/// Runs every `(k, init, seed)` cell of the sweep on up to `threads` worker
/// threads. Rows come back in sweep order regardless of scheduling.
pub fn bench_stability(
    base: &TrainConfig,
    data: &Dataset,
    ks: &[usize],
    inits: &[InitKind],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<StabilityRow>> {
    if ks.is_empty() || inits.is_empty() || seeds.is_empty() {
        return Err(Error::Config("stability sweep needs non-empty K, init and seed lists".into()));
    }
    let mut cells = Vec::new();
    for &k in ks {
        for &init in inits {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.sgld.steps = k;
                cfg.init = init;
                cfg.seed = seed;
                cfg.validate()?;
                cells.push(cfg);
            }
        }
    }
    let results: Vec<Mutex<Option<Result<StabilityRow>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(cfg) = cells.get(i) else { break };
                let row = stability_cell(cfg, data);
                *results[i].lock().expect("sweep slot") = Some(row);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("sweep slot").expect("every cell ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_2d, Synth2d};

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            iters_per_epoch: 3,
            gen_batch: 8,
            hidden: vec![8],
            buffer_capacity: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_row_per_cell_in_order() {
        let data = synth_2d(Synth2d::EightGaussians, 64, 0).unwrap();
        let inits = [InitKind::Informative, InitKind::Uniform, InitKind::Mixture];
        let rows = bench_stability(&tiny(), &data, &[1], &inits, &[3, 4], 2).unwrap();
        assert_eq!(rows.len(), 6);
        for (r, (init, seed)) in rows.iter().zip(inits.iter().flat_map(|i| [(*i, 3), (*i, 4)])) {
            assert_eq!((r.k, r.init, r.seed), (1, init, seed));
            assert!(r.healthy);
            assert_eq!(r.iters, 3);
        }
        let serial = bench_stability(&tiny(), &data, &[1], &inits, &[3, 4], 1).unwrap();
        assert_eq!(rows, serial);
        let csv = stability_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(STABILITY_HEADER));
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 3);
        assert!(summary.iter().all(|s| s.runs == 2 && s.divergence_rate() == 0.0));
        assert_eq!(summary_csv(&summary).lines().count(), 4);
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let data = synth_2d(Synth2d::EightGaussians, 64, 0).unwrap();
        let cfg = TrainConfig {
            divergence_threshold: 1e-12,
            ..tiny()
        };
        let rows = bench_stability(&cfg, &data, &[2], &[InitKind::Uniform], &[0], 1).unwrap();
        assert!(!rows[0].healthy);
        assert_eq!(rows[0].diverged_at, Some(0));
        assert!(bench_stability(&cfg, &data, &[], &[InitKind::Uniform], &[0], 1).is_err());
    }
}
