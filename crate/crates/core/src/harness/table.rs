use std::fmt::Write as _;
use std::str::FromStr;

use super::{MetricsReport, Setting};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Invalid(format!(
                "unknown format `{s}` (expected text, csv or json)"
            ))),
        }
    }
}

pub const CSV_HEADER: &str = "method,setting,n,k,mean_pct,ci95_pct,episodes,wall_time_s";

/// Serializes a report. Floats in csv and json use the shortest
/// representation that parses back to the same value.
pub fn emit_table(report: &MetricsReport, format: Format) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Invalid("report has no rows".into()));
    }
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in &report.rows {
                writeln!(
                    s,
                    "{},{},{},{},{:?},{:?},{},{:?}",
                    r.method, r.setting, r.n, r.k, r.mean_pct, r.ci95_pct, r.episodes, r.wall_time_s
                )
                .unwrap();
            }
            Ok(s)
        }
        Format::Text => Ok(text_table(report)),
    }
}

fn setting_rank(name: &str) -> usize {
    match name.parse::<Setting>() {
        Ok(Setting::Conventional) => 0,
        Ok(Setting::CrossDomain) => 1,
        Err(_) => 2,
    }
}

/// Methods as rows, (setting, N, K) as columns; `*` marks the best mean of
/// each column.
fn text_table(report: &MetricsReport) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut columns: Vec<(usize, &str, usize, usize)> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        let col = (setting_rank(&r.setting), r.setting.as_str(), r.n, r.k);
        if !columns.contains(&col) {
            columns.push(col);
        }
    }
    columns.sort();

    let best: Vec<f64> = columns
        .iter()
        .map(|&(_, s, n, k)| {
            report
                .rows
                .iter()
                .filter(|r| r.setting == s && r.n == n && r.k == k)
                .map(|r| r.mean_pct)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().map(|&(_, s, n, k)| format!("{s} {n}-way {k}-shot")));
    grid.push(header);
    for m in &methods {
        let mut line = vec![m.to_string()];
        for (c, &(_, s, n, k)) in columns.iter().enumerate() {
            let cell = report
                .rows
                .iter()
                .find(|r| r.method == *m && r.setting == s && r.n == n && r.k == k)
                .map(|r| {
                    let mark = if r.mean_pct == best[c] { "*" } else { "" };
                    format!("{:.2} ± {:.2}{mark}", r.mean_pct, r.ci95_pct)
                })
                .unwrap_or_else(|| "-".to_string());
            line.push(cell);
        }
        grid.push(line);
    }

    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

/// Parses rows written by the csv format.
pub fn parse_csv_rows(csv: &str) -> Result<Vec<super::MetricsRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Invalid("missing report csv header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Invalid(format!("report csv row {}: {line:?}", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(super::MetricsRow {
                method: f[0].to_string(),
                setting: f[1].to_string(),
                n: int(f[2])?,
                k: int(f[3])?,
                mean_pct: num(f[4])?,
                ci95_pct: num(f[5])?,
                episodes: int(f[6])?,
                wall_time_s: num(f[7])?,
            })
        })
        .collect()
}
