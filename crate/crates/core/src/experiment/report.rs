//! Running groups of cells and reducing them to curves and timings.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{prepare_dataset, run_training_on, write_record, RunConfig, RunRecord, SchemeKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metric::{aggregate, mean_std, QualitySummary, CSV_HEADER, DEFAULT_BINS};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub name: String,
    pub config: RunConfig,
    /// Ordered by run index.
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Bundle {
    pub cells: Vec<CellResult>,
}

impl Bundle {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn find(&self, optimizer: OptimizerKind, scheme: SchemeKind) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.config.optimizer.kind == optimizer && c.config.scheme == scheme)
    }
}

/// Runs every repetition of every cell on a pool of `jobs` threads
/// (`jobs = 1` runs everything sequentially, including the per-item loops
/// inside a run, as timing requires). `progress` sees each finished run.
pub fn run_cells<F>(cells: &[(String, RunConfig)], jobs: usize, progress: F) -> Result<Bundle>
where
    F: Fn(&str, &RunRecord) + Sync,
{
    let mut datasets: Vec<(RunConfig, Dataset)> = Vec::new();
    let mut data_of = Vec::with_capacity(cells.len());
    for (_, cfg) in cells {
        cfg.validate()?;
        let same = |c: &RunConfig| c.dataset == cfg.dataset && c.seed == cfg.seed && c.data_dir == cfg.data_dir;
        let k = match datasets.iter().position(|(c, _)| same(c)) {
            Some(k) => k,
            None => {
                datasets.push((cfg.clone(), prepare_dataset(cfg)?));
                datasets.len() - 1
            }
        };
        data_of.push(k);
    }

    let work: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, (_, cfg))| (0..cfg.repetitions).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        work.par_iter()
            .map(|&(c, r)| {
                let (name, cfg) = &cells[c];
                let rec = run_training_on(cfg, &datasets[data_of[c]].1, r)?;
                progress(name, &rec);
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut out: Vec<CellResult> = cells
        .iter()
        .map(|(name, cfg)| CellResult {
            name: name.clone(),
            config: cfg.clone(),
            runs: Vec::with_capacity(cfg.repetitions),
        })
        .collect();
    for (&(c, _), rec) in work.iter().zip(records) {
        out[c].runs.push(rec);
    }
    Ok(Bundle { cells: out })
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub name: String,
    pub optimizer: OptimizerKind,
    pub scheme: SchemeKind,
    pub runs: usize,
    pub failed: usize,
    /// Per-step mean and population standard deviation of the loss over
    /// the runs that completed.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mean_secs: f64,
    pub std_secs: f64,
    pub quality: Option<QualitySummary>,
}

impl CellSummary {
    pub fn final_mean(&self) -> Option<f64> {
        self.mean.last().copied()
    }
}

pub fn summarize_cell(cell: &CellResult) -> Result<CellSummary> {
    let done: Vec<&RunRecord> = cell.runs.iter().filter(|r| r.completed()).collect();
    let len = done.iter().map(|r| r.losses.len()).min().unwrap_or(0);
    let (mut mean, mut std) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for t in 0..len {
        let col: Vec<f64> = done.iter().map(|r| r.losses[t]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    let secs: Vec<f64> = cell.runs.iter().map(|r| r.wall_clock_secs).collect();
    let (mean_secs, std_secs) = mean_std(&secs);
    let quality: Vec<_> = cell.runs.iter().flat_map(|r| r.quality.iter().copied()).collect();
    Ok(CellSummary {
        name: cell.name.clone(),
        optimizer: cell.config.optimizer.kind,
        scheme: cell.config.scheme,
        runs: cell.runs.len(),
        failed: cell.runs.len() - done.len(),
        mean,
        std,
        mean_secs,
        std_secs,
        quality: if quality.is_empty() {
            None
        } else {
            Some(aggregate(&quality, DEFAULT_BINS)?)
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub optimizer: OptimizerKind,
    pub scheme: SchemeKind,
    pub runs: usize,
    pub mean_secs: f64,
    pub std_secs: f64,
    /// `mean_secs` over the same optimizer's uniform-scheme mean.
    pub ratio_to_uniform: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn get(&self, optimizer: OptimizerKind, scheme: SchemeKind) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.optimizer == optimizer && r.scheme == scheme)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("optimizer,scheme,runs,mean_secs,std_secs,ratio_to_uniform\n");
        for r in &self.rows {
            let ratio = r.ratio_to_uniform.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.optimizer, r.scheme, r.runs, r.mean_secs, r.std_secs, ratio
            );
        }
        s
    }
}

/// Wall-clock mean and spread per cell. Needs at least two runs per cell.
pub fn timing_table(bundle: &Bundle) -> Result<TimingTable> {
    let mut rows = Vec::with_capacity(bundle.cells.len());
    for cell in &bundle.cells {
        if cell.runs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "timing needs at least 2 runs, cell `{}` has {}",
                cell.name,
                cell.runs.len()
            )));
        }
        let secs: Vec<f64> = cell.runs.iter().map(|r| r.wall_clock_secs).collect();
        let (mean_secs, std_secs) = mean_std(&secs);
        rows.push(TimingRow {
            optimizer: cell.config.optimizer.kind,
            scheme: cell.config.scheme,
            runs: secs.len(),
            mean_secs,
            std_secs,
            ratio_to_uniform: None,
        });
    }
    let uniform: Vec<(OptimizerKind, f64)> = rows
        .iter()
        .filter(|r| r.scheme == SchemeKind::Uniform)
        .map(|r| (r.optimizer, r.mean_secs))
        .collect();
    for r in &mut rows {
        r.ratio_to_uniform = uniform
            .iter()
            .find(|(k, _)| *k == r.optimizer)
            .map(|(_, base)| r.mean_secs / base);
    }
    Ok(TimingTable { rows })
}

fn curves_csv(summaries: &[CellSummary]) -> String {
    let mut s = String::from("optimizer,scheme,step,mean_loss,std_loss\n");
    for c in summaries {
        for (t, (m, sd)) in c.mean.iter().zip(&c.std).enumerate() {
            let _ = writeln!(s, "{},{},{t},{m},{sd}", c.optimizer, c.scheme);
        }
    }
    s
}

fn metric_csv(bundle: &Bundle) -> Option<String> {
    let mut s = format!("optimizer,scheme,run,{CSV_HEADER}\n");
    let mut any = false;
    for cell in &bundle.cells {
        for run in &cell.runs {
            for q in &run.quality {
                any = true;
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    cell.config.optimizer.kind,
                    cell.config.scheme,
                    run.run_index,
                    q.csv_row()
                );
            }
        }
    }
    any.then_some(s)
}

/// Writes `curves.csv`, `summary.json`, `runs/<cell>/<idx>.json`, and, when
/// applicable, `timing.csv` and `metric.csv` under `dir`.
pub fn write_outputs(bundle: &Bundle, dir: &Path) -> Result<Vec<CellSummary>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summaries = bundle.cells.iter().map(summarize_cell).collect::<Result<Vec<_>>>()?;
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write("curves.csv", &curves_csv(&summaries))?;
    write("summary.json", &serde_json::to_string_pretty(&summaries)?)?;
    for cell in &bundle.cells {
        for run in &cell.runs {
            write_record(run, &dir.join("runs").join(&cell.name).join(format!("{}.json", run.run_index)))?;
        }
    }
    if bundle.cells.iter().all(|c| c.runs.len() >= 2) {
        write("timing.csv", &timing_table(bundle)?.to_csv())?;
    }
    if let Some(m) = metric_csv(bundle) {
        write("metric.csv", &m)?;
    }
    Ok(summaries)
}
