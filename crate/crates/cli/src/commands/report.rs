use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tinc_core::eval::MetricsReport;

use crate::config::write_file;
use crate::svg::{line_plot, Series};
use crate::{CliError, GlobalArgs};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.json files or glob patterns.
    #[arg(required = true, value_name = "PATTERN")]
    pub inputs: Vec<String>,
    /// Also write SVG plots of loss curves and per-dimension std.
    #[arg(long)]
    pub svg: bool,
}

/// One CSV line per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub scan_auroc: f64,
    pub scan_prauc: f64,
    pub volume_auroc: f64,
    pub volume_prauc: f64,
    pub dv_spearman: Option<f64>,
}

pub fn expand_inputs(patterns: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in patterns {
        let paths = glob::glob(p).map_err(|e| CliError::Usage(format!("bad pattern {p:?}: {e}")))?;
        for entry in paths {
            files.push(entry.map_err(|e| CliError::Validation(format!("cannot read {}: {e}", e.path().display())))?);
        }
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(CliError::Validation(format!("no metrics files match {}", patterns.join(" "))));
    }
    Ok(files)
}

pub fn load_reports(files: &[PathBuf]) -> Result<Vec<(PathBuf, MetricsReport)>, CliError> {
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", f.display())))?;
            let r: MetricsReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("malformed metrics file {}: {e}", f.display())))?;
            Ok((f.clone(), r))
        })
        .collect()
}

pub fn rows(reports: &[(PathBuf, MetricsReport)]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = reports
        .iter()
        .map(|(_, r)| ReportRow {
            method: r.method.clone().unwrap_or_else(|| "unknown".into()),
            seed: r.seed,
            scan_auroc: r.scan_auroc,
            scan_prauc: r.scan_prauc,
            volume_auroc: r.volume_auroc,
            volume_prauc: r.volume_prauc,
            dv_spearman: r.dv_spearman,
        })
        .collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
    rows
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<ReportRow>, CliError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("csv: {e}")))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean over seeds per method, with the per-seed scan AUROC listed.
pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<18} {:>4} {:>10} {:>10} {:>12} {:>12} {:>11}  per-seed scan_auroc\n",
        "method", "runs", "scan_auroc", "scan_prauc", "volume_auroc", "volume_prauc", "dv_spearman"
    );
    for (method, rs) in by_method {
        let per_seed: Vec<String> = rs.iter().map(|r| format!("{}:{:.4}", r.seed, r.scan_auroc)).collect();
        let _ = writeln!(
            s,
            "{:<18} {:>4} {:>10} {:>10} {:>12} {:>12} {:>11}  {}",
            method,
            rs.len(),
            fmt(mean(rs.iter().map(|r| r.scan_auroc))),
            fmt(mean(rs.iter().map(|r| r.scan_prauc))),
            fmt(mean(rs.iter().map(|r| r.volume_auroc))),
            fmt(mean(rs.iter().map(|r| r.volume_prauc))),
            fmt(mean(rs.iter().filter_map(|r| r.dv_spearman))),
            per_seed.join(" ")
        );
    }
    s
}

fn run_label(r: &MetricsReport) -> String {
    format!("{} s{}", r.method.as_deref().unwrap_or("unknown"), r.seed)
}

pub fn run(global: &GlobalArgs, args: ReportArgs) -> Result<(), CliError> {
    let files = expand_inputs(&args.inputs)?;
    let reports = load_reports(&files)?;
    let rows = rows(&reports);
    let table = summary_table(&rows);
    print!("{table}");
    let Some(out) = &global.out else {
        if args.svg {
            return Err(CliError::Usage("--svg needs --out DIR".into()));
        }
        return Ok(());
    };
    write_file(&out.join("report.txt"), table.as_bytes())?;
    write_file(&out.join("report.csv"), to_csv(&rows)?.as_bytes())?;
    if args.svg {
        let losses: Vec<Series> = reports
            .iter()
            .filter(|(_, r)| !r.loss_log.is_empty())
            .map(|(_, r)| Series {
                label: run_label(r),
                points: r.loss_log.iter().map(|e| (e.epoch as f64, e.total)).collect(),
            })
            .collect();
        write_file(&out.join("loss_curves.svg"), line_plot("Total loss per epoch", "epoch", "loss", &losses).as_bytes())?;
        let stds: Vec<Series> = reports
            .iter()
            .map(|(_, r)| {
                let mut v = r.collapse.per_dim_std.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                Series {
                    label: run_label(r),
                    points: v.into_iter().enumerate().map(|(i, s)| (i as f64, s)).collect(),
                }
            })
            .collect();
        write_file(
            &out.join("per_dim_std.svg"),
            line_plot("Per-dimension embedding std (sorted)", "dimension rank", "std", &stds).as_bytes(),
        )?;
    }
    println!("report written to {}", out.display());
    Ok(())
}
