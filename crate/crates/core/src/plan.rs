//! Parameter sweeps over `ε`, `K` and `R` with seeded repetitions.
//!
//! Each cell streams its metrics to `<cell>.csv.partial`, flushing after
//! every round, and renames the file once the run completes. The plan summary
//! is rewritten after every cell, so an interrupted sweep resumes by cell.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::flsim::metrics::write_csv_header;
use crate::flsim::{run_experiment_with, FLConfig};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_SCHEMA: &str = "cpa-fed plan v1";

/// Values swept for each axis. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub epsilon: Vec<f64>,
    pub users: Vec<usize>,
    pub rate: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub base: FLConfig,
    pub axes: SweepAxes,
    /// Seeds `base.seed, base.seed + 1, ...`.
    pub repetitions: usize,
    /// Upper bound on the number of cells.
    pub cap: usize,
    /// Run cells concurrently, one worker thread each.
    pub parallel_cells: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            base: FLConfig::default(),
            axes: SweepAxes::default(),
            repetitions: 1,
            cap: 1000,
            parallel_cells: false,
        }
    }
}

/// One run of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: FLConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanReport {
    pub ran: usize,
    pub skipped: usize,
    pub summary_path: PathBuf,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl ExperimentPlan {
    /// Plan with `base` as the base config and no sweep.
    pub fn single(base: FLConfig) -> Self {
        ExperimentPlan {
            base,
            ..ExperimentPlan::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.cells()?;
        Ok(plan)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn num_cells(&self) -> usize {
        let n = |len: usize| len.max(1);
        n(self.axes.epsilon.len())
            * n(self.axes.users.len())
            * n(self.axes.rate.len())
            * self.repetitions
    }

    /// Expand the cross product, validating every cell config.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.num_cells() > self.cap {
            return Err(Error::Config(format!(
                "plan has {} cells, cap is {}",
                self.num_cells(),
                self.cap
            )));
        }
        if self
            .base
            .seed
            .checked_add(self.repetitions as u64 - 1)
            .is_none()
        {
            return Err(Error::Config("seed range overflows".into()));
        }
        let b = &self.base;
        let mut cells = Vec::with_capacity(self.num_cells());
        for &epsilon in &axis(&self.axes.epsilon, b.epsilon) {
            for &users in &axis(&self.axes.users, b.users) {
                for &rate in &axis(&self.axes.rate, b.rate) {
                    for rep in 0..self.repetitions as u64 {
                        let config = FLConfig {
                            epsilon,
                            users,
                            rate,
                            seed: b.seed + rep,
                            ..b.clone()
                        };
                        config.validate()?;
                        let name = format!(
                            "{}-eps{epsilon}-K{users}-R{rate}-seed{}",
                            b.scheme.name(),
                            config.seed
                        );
                        cells.push(Cell { name, config });
                    }
                }
            }
        }
        Ok(cells)
    }

    /// Run every cell whose CSV is missing from `out`, writing one metrics
    /// CSV per cell and `summary.json`.
    pub fn run(&self, out: &Path, threads: usize, mut log: impl FnMut(&str)) -> Result<PlanReport> {
        let cells = self.cells()?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let summary_path = out.join(SUMMARY_FILE);
        let mut done = load_summaries(&summary_path)?;
        done.retain(|name, _| csv_path(out, name).exists());

        let todo: Vec<&Cell> = cells
            .iter()
            .filter(|c| !done.contains_key(&c.name))
            .collect();
        let skipped = cells.len() - todo.len();
        if skipped > 0 {
            log(&format!(
                "resuming: {skipped} of {} cells already complete",
                cells.len()
            ));
        }

        if self.parallel_cells {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let results: Vec<Result<Value>> =
                pool.install(|| todo.par_iter().map(|c| run_cell(c, out, 1)).collect());
            for (cell, res) in todo.iter().zip(results) {
                done.insert(cell.name.clone(), res?);
                log(&format!("finished {}", cell.name));
            }
            write_summary(&summary_path, &cells, &done)?;
        } else {
            for cell in &todo {
                log(&format!("running {}", cell.name));
                done.insert(cell.name.clone(), run_cell(cell, out, threads)?);
                write_summary(&summary_path, &cells, &done)?;
            }
        }
        if todo.is_empty() {
            write_summary(&summary_path, &cells, &done)?;
        }
        Ok(PlanReport {
            ran: todo.len(),
            skipped,
            summary_path,
        })
    }
}

pub fn csv_path(out: &Path, cell: &str) -> PathBuf {
    out.join(format!("{cell}.csv"))
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn run_cell(cell: &Cell, out: &Path, threads: usize) -> Result<Value> {
    let final_path = csv_path(out, &cell.name);
    let tmp = partial(&final_path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    write_csv_header(&mut writer).map_err(|e| Error::io(&tmp, e))?;
    let output = run_experiment_with(&cell.config, threads, |m| {
        writeln!(writer, "{}", m.csv_row())
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(&tmp, e))
    })?;
    drop(writer);
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(json!({
        "cell": cell.name,
        "epsilon": cell.config.epsilon,
        "users": cell.config.users,
        "rate": cell.config.rate,
        "seed": cell.config.seed,
        "summary": serde_json::to_value(&output.summary).expect("summary serializes"),
    }))
}

fn load_summaries(path: &Path) -> Result<Map<String, Value>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Map::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let parsed: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut map = Map::new();
    for entry in parsed["cells"].as_array().into_iter().flatten() {
        if let Some(name) = entry["cell"].as_str() {
            map.insert(name.to_string(), entry.clone());
        }
    }
    Ok(map)
}

fn write_summary(path: &Path, cells: &[Cell], done: &Map<String, Value>) -> Result<()> {
    let entries: Vec<&Value> = cells.iter().filter_map(|c| done.get(&c.name)).collect();
    let doc = json!({
        "schema": SUMMARY_SCHEMA,
        "total_cells": cells.len(),
        "completed_cells": entries.len(),
        "cells": entries,
    });
    let tmp = partial(path);
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
