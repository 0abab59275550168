//! File formats, checkpoints, reports, sweeps and the `tmcn` command line on
//! top of `tmcn-core`.

pub mod checkpoint;
pub mod config;
pub mod format;
pub mod report;
pub mod sweep;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const THREADS_VAR: &str = "TMCN_THREADS";

/// Worker count from `TMCN_THREADS`, default 1.
pub fn threads() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// `f` over every item on up to `threads` scoped workers. Results are in
/// input order, so the output does not depend on the thread count.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = threads.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new(items.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Ablation rows for every mode, run on up to `threads` workers.
pub fn run_ablation(
    config: &tmcn_core::train::TrainConfig,
    dataset: &tmcn_core::dataset::MultiViewDataset,
    threads: usize,
) -> Result<tmcn_core::train::AblationTable, tmcn_core::Error> {
    use tmcn_core::train::{ablation_row, AblationTable, Mode};
    let rows = parallel_map(&Mode::ALL, threads, |&m| ablation_row(config, dataset, m));
    Ok(AblationTable {
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    })
}
