use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use super::{MeanMetrics, RunMode, RunResult};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Sample mean and standard error (`sample std / √n`; zero for `n = 1`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One table row: a method at one hyperparameter point, over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub p: f64,
    pub k: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    /// (mean, standard error) pairs.
    pub bacc: (f64, f64),
    pub acc: (f64, f64),
    pub acc_star: (f64, f64),
    pub macro_f1: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub rows: Vec<SummaryRow>,
    pub tables: Vec<PathBuf>,
    /// Result files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

struct Entry {
    rank: u8,
    method: String,
    k: usize,
    seed: u64,
    metrics: [f64; 4],
}

fn quad(m: &MetricsReport) -> [f64; 4] {
    [m.bacc, m.acc, m.acc_star, m.macro_f1]
}

fn quad_mean(m: &MeanMetrics) -> [f64; 4] {
    [m.bacc, m.acc, m.acc_star, m.macro_f1]
}

fn entries(r: &RunResult) -> Vec<Entry> {
    let k = r.point.ensemble_size;
    let e = |rank, method: String, k, metrics| Entry {
        rank,
        method,
        k,
        seed: r.seed,
        metrics,
    };
    match r.mode {
        RunMode::BaselineFsl => vec![e(0, "Baseline".into(), 1, quad(&r.primary.ensemble))],
        RunMode::ProposedSsl => {
            let mut v = Vec::new();
            if let Some(s) = &r.single {
                v.push(e(1, "Proposed (K=1)".into(), 1, quad(&s.ensemble)));
            }
            v.push(e(2, "Proposed (KD)".into(), k, quad_mean(&r.primary.member_mean)));
            v.push(e(3, format!("Proposed (K={k})"), k, quad(&r.primary.ensemble)));
            v
        }
    }
}

/// Groups results by method and hyperparameters, averaging over seeds.
/// Rows are ordered by method, then p, K, λ, T and τ ascending.
pub fn aggregate(results: &[RunResult]) -> Vec<SummaryRow> {
    type Key = (u8, String, u64, usize, u64, u64, u64);
    let mut groups: Vec<(Key, SummaryRow, Vec<[f64; 4]>)> = Vec::new();
    let mut seen: HashSet<(Key, u64)> = HashSet::new();
    for r in results {
        let p = &r.point;
        for e in entries(r) {
            let key: Key = (
                e.rank,
                e.method.clone(),
                p.labeled_fraction.to_bits(),
                e.k,
                p.lambda.to_bits(),
                p.temperature.to_bits(),
                p.threshold.to_bits(),
            );
            // The paired single model recurs at every K of a sweep.
            if !seen.insert((key.clone(), e.seed)) {
                continue;
            }
            match groups.iter_mut().find(|(k, _, _)| *k == key) {
                Some((_, row, vals)) => {
                    row.seeds.push(e.seed);
                    vals.push(e.metrics);
                }
                None => groups.push((
                    key,
                    SummaryRow {
                        method: e.method,
                        p: p.labeled_fraction,
                        k: e.k,
                        lambda: p.lambda,
                        temperature: p.temperature,
                        threshold: p.threshold,
                        seeds: vec![e.seed],
                        bacc: (0.0, 0.0),
                        acc: (0.0, 0.0),
                        acc_star: (0.0, 0.0),
                        macro_f1: (0.0, 0.0),
                    },
                    vec![e.metrics],
                )),
            }
        }
    }
    let mut rows: Vec<(u8, SummaryRow)> = groups
        .into_iter()
        .map(|(key, mut row, vals)| {
            let col = |i: usize| mean_se(&vals.iter().map(|v| v[i]).collect::<Vec<_>>());
            row.bacc = col(0);
            row.acc = col(1);
            row.acc_star = col(2);
            row.macro_f1 = col(3);
            row.seeds.sort_unstable();
            (key.0, row)
        })
        .collect();
    rows.sort_by(|(ra, a), (rb, b)| {
        ra.cmp(rb)
            .then(a.k.cmp(&b.k).then(a.method.cmp(&b.method)).then_with(|| {
                [a.p, a.lambda, a.temperature, a.threshold]
                    .partial_cmp(&[b.p, b.lambda, b.temperature, b.threshold])
                    .expect("finite hyperparameters")
            }))
    });
    // p is the outermost sort key within a method.
    rows.sort_by(|(ra, a), (rb, b)| ra.cmp(rb).then(a.p.partial_cmp(&b.p).expect("finite")));
    rows.into_iter().map(|(_, r)| r).collect()
}

fn pm((mean, se): (f64, f64)) -> String {
    format!("{mean:.4}±{se:.4}")
}

/// Writes `summary.csv` and, for every axis that takes more than one value,
/// `plot_<axis>.csv` with columns `series,x,y,se` (y = balanced accuracy).
pub fn write_tables(results: &[RunResult], dir: &Path) -> Result<ReportOutcome> {
    fs::create_dir_all(dir)?;
    let rows = aggregate(results);
    let mut tables = Vec::new();

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["method", "p", "K", "lambda", "T", "tau", "BAcc", "Acc", "AccStar", "F1"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.method.clone(),
            r.p.to_string(),
            r.k.to_string(),
            r.lambda.to_string(),
            r.temperature.to_string(),
            r.threshold.to_string(),
            pm(r.bacc),
            pm(r.acc),
            pm(r.acc_star),
            pm(r.macro_f1),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    tables.push(path);

    type Axis = (&'static str, fn(&SummaryRow) -> f64);
    let axes: [Axis; 4] = [
        ("tau", |r| r.threshold),
        ("k", |r| r.k as f64),
        ("lambda", |r| r.lambda),
        ("p", |r| r.p),
    ];
    for (name, get) in axes {
        let distinct: HashSet<u64> = rows.iter().map(|r| get(r).to_bits()).collect();
        if distinct.len() < 2 {
            continue;
        }
        let path = dir.join(format!("plot_{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["series", "x", "y", "se"]).map_err(csv_err)?;
        for r in &rows {
            let mut series = r.method.clone();
            for (other, g) in axes {
                if other != name && other != "k" {
                    let vals: HashSet<u64> = rows.iter().map(|r| g(r).to_bits()).collect();
                    if vals.len() > 1 {
                        series.push_str(&format!(" {other}={}", g(r)));
                    }
                }
            }
            w.write_record([
                series,
                get(r).to_string(),
                format!("{:.6}", r.bacc.0),
                format!("{:.6}", r.bacc.1),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        tables.push(path);
    }
    Ok(ReportOutcome {
        rows,
        tables,
        skipped: Vec::new(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Rebuilds the tables of a result directory from `runs/*.json`.
/// Unreadable result files are skipped with a warning and listed in the
/// outcome.
pub fn report(dir: &Path) -> Result<ReportOutcome> {
    let runs = dir.join("runs");
    let mut paths: Vec<PathBuf> = match fs::read_dir(&runs) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.ends_with(".json") && !name.ends_with(".timing.json")
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        let parsed = fs::read(&p)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<RunResult>(&b).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => results.push(r),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                skipped.push((p, e));
            }
        }
    }
    if results.is_empty() {
        return Err(Error::NoData(format!("no readable run results in {}", runs.display())));
    }
    let mut out = write_tables(&results, &dir.join("tables"))?;
    out.skipped = skipped;
    Ok(out)
}
