//! Ablation grids: the cartesian product of override axes, each cell run
//! once per seed, aggregated as mean ± sample std.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{MipaError, Result};
use crate::eval::EvalRow;

use super::config::{set_path, ExperimentConfig};
use super::plot::plot_grid_bars;
use super::runner::run_training;

/// One grid dimension. With `key`, every value is assigned to that dotted
/// key. Without it, every value must be an object of `key: value` pairs
/// applied together (e.g. a regime plus its own fields).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub values: Vec<Value>,
    /// Optional display names, one per value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl GridAxis {
    pub fn key(key: &str, values: Vec<Value>) -> Self {
        Self {
            key: Some(key.into()),
            values,
            labels: None,
        }
    }

    pub fn bundles(values: Vec<Value>, labels: Vec<String>) -> Self {
        Self {
            key: None,
            values,
            labels: Some(labels),
        }
    }

    fn assignments(&self, i: usize) -> Result<Vec<(String, Value)>> {
        let v = &self.values[i];
        match &self.key {
            Some(k) => Ok(vec![(k.clone(), v.clone())]),
            None => v
                .as_object()
                .map(|o| o.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                .ok_or_else(|| MipaError::Config(format!("grid bundle {v} is not an object"))),
        }
    }

    fn label(&self, i: usize) -> String {
        if let Some(l) = self.labels.as_ref().and_then(|l| l.get(i)) {
            return l.clone();
        }
        let show = |v: &Value| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        match &self.key {
            Some(k) => format!("{k}={}", show(&self.values[i])),
            None => show(&self.values[i]),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    /// Cartesian product of the axes; an empty spec yields one empty cell.
    pub fn cells(&self) -> Result<Vec<(String, Vec<(String, Value)>)>> {
        let mut cells = vec![(Vec::<String>::new(), Vec::new())];
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(MipaError::Config("grid axis with no values".into()));
            }
            let mut next = Vec::new();
            for (labels, sets) in &cells {
                for i in 0..axis.values.len() {
                    let mut l = labels.clone();
                    l.push(axis.label(i));
                    let mut s = sets.clone();
                    s.extend(axis.assignments(i)?);
                    next.push((l, s));
                }
            }
            cells = next;
        }
        Ok(cells
            .into_iter()
            .map(|(l, s)| (if l.is_empty() { "base".into() } else { l.join(", ") }, s))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed: u64,
    pub row: Option<EvalRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub overrides: Map<String, Value>,
    pub runs: Vec<RunStatus>,
    pub mean: EvalRow,
    pub std: EvalRow,
}

impl GridRow {
    pub fn n_ok(&self) -> usize {
        self.runs.iter().filter(|r| r.row.is_some()).count()
    }

    /// `(mean, std)` of AP50 for 0 = rgb, 1 = ir, 2 = average.
    pub fn ap50(&self, which: usize) -> Option<(f64, f64)> {
        let pick = |r: &EvalRow| match which {
            0 => r.ap50_rgb,
            1 => r.ap50_ir,
            _ => r.ap50_avg,
        };
        Some((pick(&self.mean)?, pick(&self.std).unwrap_or(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
}

fn path_exists(v: &Value, key: &str) -> bool {
    key.split('.').try_fold(v, |cur, part| cur.get(part)).is_some()
}

fn metric_columns() -> [(&'static str, fn(&EvalRow) -> Option<f64>); 9] {
    [
        ("ap50_rgb", |r| r.ap50_rgb),
        ("ap50_ir", |r| r.ap50_ir),
        ("ap50_avg", |r| r.ap50_avg),
        ("ap75_rgb", |r| r.ap75_rgb),
        ("ap75_ir", |r| r.ap75_ir),
        ("ap75_avg", |r| r.ap75_avg),
        ("ap_rgb", |r| r.ap_rgb),
        ("ap_ir", |r| r.ap_ir),
        ("ap_avg", |r| r.ap_avg),
    ]
}

fn set_metric(row: &mut EvalRow, idx: usize, v: Option<f64>) {
    let slot = match idx {
        0 => &mut row.ap50_rgb,
        1 => &mut row.ap50_ir,
        2 => &mut row.ap50_avg,
        3 => &mut row.ap75_rgb,
        4 => &mut row.ap75_ir,
        5 => &mut row.ap75_avg,
        6 => &mut row.ap_rgb,
        7 => &mut row.ap_ir,
        _ => &mut row.ap_avg,
    };
    *slot = v;
}

/// Mean and sample standard deviation (n − 1; 0 for a single run).
fn aggregate(rows: &[EvalRow]) -> (EvalRow, EvalRow) {
    let mut mean = EvalRow::default();
    let mut std = EvalRow::default();
    for (i, (_, get)) in metric_columns().iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(get).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let s = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        set_metric(&mut mean, i, Some(m));
        set_metric(&mut std, i, Some(s));
    }
    (mean, std)
}

/// Build the config for one cell: apply its overrides, check each key is
/// part of the schema, drop fields the resulting regime does not use.
pub fn cell_config(base: &ExperimentConfig, sets: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(base)?;
    for (k, v) in sets {
        set_path(&mut value, k, v.clone())?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| MipaError::Config(format!("grid cell: {e}")))?;
    let back = serde_json::to_value(&cfg)?;
    for (k, _) in sets {
        if !path_exists(&back, k) {
            return Err(MipaError::Config(format!("grid key {k:?} is not a config field")));
        }
    }
    cfg.prune_for_regime();
    cfg.validate()?;
    Ok(cfg)
}

/// Run every cell for every seed. Failed runs are recorded and the grid
/// continues. With `out_dir`, each run writes its own outputs under
/// `cell_<i>/seed_<s>/` and the aggregate goes to `grid.csv`, `grid.json`
/// and `grid_ap50.svg`.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    grid: &GridSpec,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<GridOutcome> {
    if seeds.is_empty() {
        return Err(MipaError::Config("grid needs at least one seed".into()));
    }
    let cells = grid.cells()?;
    // Reject unknown keys up front rather than after hours of training.
    let configs: Vec<Result<ExperimentConfig>> = cells.iter().map(|(_, sets)| cell_config(base, sets)).collect();
    for c in &configs {
        if let Err(e @ MipaError::Config(m)) = c {
            if m.contains("is not a config field") {
                return Err(MipaError::Config(e.to_string()));
            }
        }
    }
    let mut rows = Vec::new();
    for (ci, ((label, sets), cfg)) in cells.into_iter().zip(configs).enumerate() {
        let mut runs = Vec::new();
        for &seed in seeds {
            let status = match &cfg {
                Err(e) => RunStatus {
                    seed,
                    row: None,
                    error: Some(e.to_string()),
                },
                Ok(cfg) => {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    let dir = out_dir.map(|d| d.join(format!("cell_{ci}")).join(format!("seed_{seed}")));
                    log::info!("grid cell {ci} ({label}), seed {seed}");
                    match run_training(&c, dir.as_deref()) {
                        Ok(o) => RunStatus {
                            seed,
                            row: Some(o.final_report.row()),
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("grid cell {ci} ({label}), seed {seed} failed: {e}");
                            RunStatus {
                                seed,
                                row: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                }
            };
            runs.push(status);
        }
        let ok: Vec<EvalRow> = runs.iter().filter_map(|r| r.row).collect();
        let (mean, std) = aggregate(&ok);
        rows.push(GridRow {
            label,
            overrides: sets.into_iter().collect(),
            runs,
            mean,
            std,
        });
    }
    let outcome = GridOutcome { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_grid_csv(&dir.join("grid.csv"), &outcome.rows)?;
        std::fs::write(dir.join("grid.json"), serde_json::to_string_pretty(&outcome)?)?;
        plot_grid_bars(&dir.join("grid_ap50.svg"), &outcome.rows)?;
    }
    Ok(outcome)
}

/// One line per cell: label, run counts, then `<metric>_mean`,
/// `<metric>_std` for every report key, then the first error if any.
pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string(), "runs_ok".into(), "runs_failed".into()];
    for (name, _) in metric_columns() {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    header.push("error".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.label.clone(),
            r.n_ok().to_string(),
            (r.runs.len() - r.n_ok()).to_string(),
        ];
        for (_, get) in metric_columns() {
            rec.push(get(&r.mean).map(|v| v.to_string()).unwrap_or_default());
            rec.push(get(&r.std).map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.runs.iter().find_map(|s| s.error.clone()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
