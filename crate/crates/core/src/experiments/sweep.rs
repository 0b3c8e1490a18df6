use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{create_dir, read_json, resolve, write_json, SweepSpec};
use crate::error::{Error, Result};
use crate::graph::{split_dataset, Dataset, TaskKind};
use crate::message_passing::ConvKind;
use crate::model::ModelSpec;
use crate::parallel::par_map;
use crate::readouts::ReadoutKind;
use crate::training::{train_run, MetricsRecord, RunOptions, RunStatus, TestMetrics, TrainConfig};

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub dataset: usize,
    pub dataset_name: String,
    pub conv: ConvKind,
    pub readout: ReadoutKind,
    pub depth: usize,
    pub heads: Option<usize>,
    pub seed: u64,
}

impl Cell {
    /// File stem of the cell's run record.
    pub fn name(&self) -> String {
        let mut s = format!(
            "{}__{}__{}__d{}",
            self.dataset_name, self.conv, self.readout, self.depth
        );
        if let Some(h) = self.heads {
            write!(s, "__h{h}").unwrap();
        }
        write!(s, "__s{}", self.seed).unwrap();
        s
    }
}

/// Dataset name used in records and reports: the file name up to its
/// first dot.
pub fn dataset_name(path: &Path) -> String {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.split('.').next().unwrap_or_default().to_string()
}

pub fn cells(spec: &SweepSpec) -> Result<Vec<Cell>> {
    spec.validate()?;
    let names: Vec<String> = spec.datasets.iter().map(|p| dataset_name(p)).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::InvalidArgument(format!(
                "two datasets share the name {n:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for (di, name) in names.iter().enumerate() {
        for &conv in &spec.convs {
            for &readout in &spec.readouts {
                for &depth in &spec.depths {
                    let heads: Vec<Option<usize>> = match &spec.heads {
                        Some(hs) if readout.is_set_transformer() => {
                            hs.iter().map(|&h| Some(h)).collect()
                        }
                        _ => vec![None],
                    };
                    for heads in heads {
                        for &seed in &spec.seeds {
                            out.push(Cell {
                                dataset: di,
                                dataset_name: name.clone(),
                                conv,
                                readout,
                                depth,
                                heads,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn cell_spec(spec: &SweepSpec, cell: &Cell) -> (ModelSpec, TrainConfig) {
    let mut model = ModelSpec::new(cell.conv, cell.readout);
    model.depth = cell.depth;
    model.hidden = spec.hidden;
    model.family = spec.family;
    model.readout_params = spec.readout_params.clone();
    if let Some(h) = cell.heads {
        model.readout_params.st_heads = h;
    }
    let train = TrainConfig {
        seed: cell.seed,
        ..spec.train.clone()
    };
    (model, train)
}

/// Trains one cell. Errors become a failed record so sibling cells keep
/// running.
pub fn run_cell(spec: &SweepSpec, datasets: &[Dataset], cell: &Cell) -> MetricsRecord {
    let (model, train) = cell_spec(spec, cell);
    let ds = &datasets[cell.dataset];
    let opts = RunOptions {
        dataset_name: cell.dataset_name.clone(),
        probe: None,
    };
    let result = split_dataset(ds.len(), cell.seed, spec.split_fractions)
        .and_then(|split| train_run(&model, ds, &split, &train, &opts));
    match result {
        Ok(outcome) => outcome.record,
        Err(e) => MetricsRecord {
            dataset: cell.dataset_name.clone(),
            model,
            train,
            split_seed: cell.seed,
            status: RunStatus::Failed,
            failure: Some(e.to_string()),
            epochs_run: 0,
            best_epoch: 0,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            test: TestMetrics::default(),
            probe: None,
        },
    }
}

/// Mean and population standard deviation over the seeds of one
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub conv: ConvKind,
    pub readout: ReadoutKind,
    pub depth: usize,
    /// Attention heads, for set-transformer readouts.
    pub heads: Option<usize>,
    /// `r2` or `mcc`.
    pub metric: String,
    pub runs: usize,
    pub failed: usize,
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl SummaryRow {
    /// Readout label distinguishing head counts, e.g. `st_default/h8`.
    pub fn label(&self) -> String {
        match self.heads {
            Some(h) => format!("{}/h{h}", self.readout),
            None => self.readout.to_string(),
        }
    }
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn metric_name(r: &MetricsRecord) -> &'static str {
    if r.test.mcc.is_some() || r.test.auroc.is_some() {
        "mcc"
    } else {
        "r2"
    }
}

/// Groups records by configuration, in order of first appearance.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut index: HashMap<(String, ConvKind, ReadoutKind, usize, Option<usize>), usize> =
        HashMap::new();
    for r in records {
        let heads = r
            .model
            .readout
            .is_set_transformer()
            .then_some(r.model.readout_params.st_heads);
        let key = (
            r.dataset.clone(),
            r.model.conv,
            r.model.readout,
            r.model.depth,
            heads,
        );
        let i = *index.entry(key).or_insert_with(|| {
            rows.push(SummaryRow {
                dataset: r.dataset.clone(),
                conv: r.model.conv,
                readout: r.model.readout,
                depth: r.model.depth,
                heads,
                metric: String::new(),
                runs: 0,
                failed: 0,
                values: Vec::new(),
                mean: None,
                std: None,
            });
            rows.len() - 1
        });
        let row = &mut rows[i];
        row.runs += 1;
        if r.status == RunStatus::Failed {
            row.failed += 1;
            continue;
        }
        if row.metric.is_empty() {
            row.metric = metric_name(r).to_string();
        }
        if let Some(v) = r.headline() {
            row.values.push(v);
        }
    }
    for row in &mut rows {
        if let Some((m, s)) = mean_std(&row.values) {
            row.mean = Some(m);
            row.std = Some(s);
        }
        if row.metric.is_empty() {
            row.metric = "na".into();
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("dataset,conv,readout,depth,heads,metric,runs,failed,mean,std\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.dataset,
            r.conv,
            r.readout,
            r.depth,
            r.heads.map_or_else(|| "NA".into(), |h| h.to_string()),
            r.metric,
            r.runs,
            r.failed,
            fmt_opt(r.mean),
            fmt_opt(r.std)
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    pub failed: usize,
}

pub const RUNS_DIR: &str = "runs";

/// Runs every cell, writing `runs/<cell>.json`, `summary.json` and
/// `summary.csv` under `out`. Dataset paths resolve against `base`.
pub fn run_sweep(spec: &SweepSpec, base: &Path, out: &Path) -> Result<SweepReport> {
    let grid = cells(spec)?;
    let datasets = spec
        .datasets
        .iter()
        .map(|p| Dataset::load(resolve(base, p)))
        .collect::<Result<Vec<_>>>()?;
    let runs = out.join(RUNS_DIR);
    create_dir(&runs)?;
    let results: Vec<Result<MetricsRecord>> = par_map(&grid, |cell| {
        let record = run_cell(spec, &datasets, cell);
        write_json(runs.join(format!("{}.json", cell.name())), &record)?;
        Ok(record)
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records);
    write_json(out.join("summary.json"), &summary)?;
    let csv = out.join("summary.csv");
    std::fs::write(&csv, summary_csv(&summary)).map_err(|e| Error::io(&csv, e))?;
    let failed = records
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    Ok(SweepReport {
        records,
        summary,
        failed,
    })
}

/// Loads every run record under `dir/runs`, ordered by file name.
pub fn load_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let runs = dir.join(RUNS_DIR);
    let entries = std::fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(read_json).collect()
}

/// Task kind implied by a headline metric name.
pub fn metric_task(metric: &str) -> Option<TaskKind> {
    match metric {
        "r2" => Some(TaskKind::Regression),
        "mcc" => Some(TaskKind::Classification),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synthetic::{generate_additive_task, SyntheticConfig};

    fn record(readout: ReadoutKind, seed: u64, r2: Option<f64>, failed: bool) -> MetricsRecord {
        MetricsRecord {
            dataset: "d".into(),
            model: ModelSpec::new(ConvKind::Gcn, readout),
            train: TrainConfig::default(),
            split_seed: seed,
            status: if failed {
                RunStatus::Failed
            } else {
                RunStatus::Completed
            },
            failure: None,
            epochs_run: 1,
            best_epoch: 1,
            train_loss: vec![],
            val_loss: vec![],
            test: TestMetrics {
                r2,
                ..TestMetrics::default()
            },
            probe: None,
        }
    }

    #[test]
    fn grid_enumeration() {
        let mut s = SweepSpec::new(
            vec!["data/a.jsonl".into(), "b.jsonl".into()],
            vec![ConvKind::Gcn],
            vec![ReadoutKind::Sum, ReadoutKind::StMinimal],
        );
        s.heads = Some(vec![1, 8]);
        s.seeds = vec![3];
        let c = cells(&s).unwrap();
        // per dataset: sum once, st twice
        assert_eq!(c.len(), 6);
        assert_eq!(c[0].name(), "a__gcn__sum__d2__s3");
        assert_eq!(c[2].name(), "a__gcn__st_minimal__d2__h8__s3");
        s.datasets.push("other/a.jsonl".into());
        assert!(cells(&s).is_err());
    }

    #[test]
    fn five_seed_summary_is_mean_and_population_std() {
        let vals = [0.1, 0.2, 0.3, 0.4, 0.5];
        let recs: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| record(ReadoutKind::Mlp, i as u64, Some(v), false))
            .collect();
        let rows = summarize(&recs);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.runs, r.failed, r.metric.as_str()), (5, 0, "r2"));
        assert!((r.mean.unwrap() - 0.3).abs() < 1e-15);
        assert!((r.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(summary_csv(&rows).contains("d,gcn,mlp,2,NA,r2,5,0,0.300000,0.141421"));
    }

    #[test]
    fn failed_runs_are_counted_not_averaged() {
        let recs = vec![
            record(ReadoutKind::Sum, 0, Some(0.5), false),
            record(ReadoutKind::Sum, 1, None, true),
            record(ReadoutKind::Max, 0, None, true),
        ];
        let rows = summarize(&recs);
        assert_eq!((rows[0].failed, rows[0].mean), (1, Some(0.5)));
        assert_eq!(
            (rows[1].failed, rows[1].mean, rows[1].metric.as_str()),
            (1, None, "na")
        );
        assert!(summary_csv(&rows).ends_with("NA,NA\n"));
    }

    #[test]
    fn single_cell_sweep_writes_one_record_and_is_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_additive_task(&SyntheticConfig::new(30, 2, 5, 2, 0)).unwrap();
        ds.save(dir.path().join("add.jsonl")).unwrap();
        let mut s = SweepSpec::new(
            vec!["add.jsonl".into()],
            vec![ConvKind::Gin],
            vec![ReadoutKind::Mean],
        );
        s.seeds = vec![1];
        s.train.epochs = 2;
        let out = dir.path().join("out");
        let rep = run_sweep(&s, dir.path(), &out).unwrap();
        assert_eq!((rep.records.len(), rep.failed), (1, 0));
        assert_eq!(load_records(&out).unwrap(), rep.records);
        let first = std::fs::read(out.join("summary.csv")).unwrap();
        run_sweep(&s, dir.path(), &out).unwrap();
        assert_eq!(std::fs::read(out.join("summary.csv")).unwrap(), first);
    }

    #[test]
    fn diverged_cell_does_not_stop_siblings() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_additive_task(&SyntheticConfig::new(30, 2, 5, 2, 0)).unwrap();
        ds.save(dir.path().join("add.jsonl")).unwrap();
        let mut s = SweepSpec::new(
            vec!["add.jsonl".into()],
            vec![ConvKind::Gcn],
            vec![ReadoutKind::Sum],
        );
        s.seeds = vec![0, 1];
        s.train.epochs = 20;
        s.train.lr = 1e300;
        s.train.standardize_targets = false;
        let diverged = run_sweep(&s, dir.path(), &dir.path().join("x")).unwrap();
        assert_eq!(diverged.failed, 2);
        assert_eq!(diverged.records.len(), 2);
        assert!(diverged.records.iter().all(|r| r.failure.is_some()));

        // a cell that errors (probe-free, bad split fractions) is recorded as failed
        s.train.lr = 1e-3;
        s.split_fractions = [0.5, 0.5, 0.5];
        s.seeds = vec![0];
        let bad = run_sweep(&s, dir.path(), &dir.path().join("y")).unwrap();
        assert_eq!(bad.failed, 1);
    }
}
