//! Pivot of a results CSV into variant × noise-rate tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use chnr::hashing::Variant;
use chnr::retrieval::{Task, REPORT_HEADER};

use crate::error::{CliError, Result};

/// One parsed results row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: String,
    pub variant: String,
    pub noise_rate: f64,
    pub code_length: usize,
    pub seed: u64,
    pub k: usize,
    pub map_at_k: f64,
    pub precision_at_k: f64,
}

pub fn read_results<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(chnr::Error::from)?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(chnr::Error::Data(format!(
            "results header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            REPORT_HEADER
        ))
        .into());
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(chnr::Error::from)?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |i: usize| {
            CliError::Core(chnr::Error::Data(format!(
                "results row {}: cannot parse {} = {:?}",
                line + 1,
                REPORT_HEADER[i],
                field(i)
            )))
        };
        rows.push(ResultRow {
            task: field(0).to_string(),
            variant: field(1).to_string(),
            noise_rate: field(2).parse().map_err(|_| bad(2))?,
            code_length: field(3).parse().map_err(|_| bad(3))?,
            seed: field(4).parse().map_err(|_| bad(4))?,
            k: field(5).parse().map_err(|_| bad(5))?,
            map_at_k: field(6).parse().map_err(|_| bad(6))?,
            precision_at_k: field(7).parse().map_err(|_| bad(7))?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one table cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl Cell {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Cell { mean, std, n }
    }
}

/// Seed-averaged mAP for one retrieval direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub task: String,
    pub k: usize,
    /// Row order: the four known variants first, in canonical order, then any others.
    pub variants: Vec<String>,
    /// Ascending.
    pub rates: Vec<f64>,
    pub cells: BTreeMap<(String, u64), Cell>,
}

impl Table {
    pub fn cell(&self, variant: &str, rate: f64) -> Option<&Cell> {
        self.cells.get(&(variant.to_string(), rate.to_bits()))
    }

    /// Whether mean CHNR ≥ mean CHNR-WNR at each rate; `None` where either is missing.
    pub fn trend_flags(&self) -> Vec<(f64, Option<bool>)> {
        self.rates
            .iter()
            .map(|&r| {
                let full = self.cell(Variant::Chnr.as_str(), r);
                let base = self.cell(Variant::ChnrWnr.as_str(), r);
                (r, full.zip(base).map(|(a, b)| a.mean >= b.mean))
            })
            .collect()
    }
}

/// One table per direction, I→T first.
pub fn pivot(rows: &[ResultRow]) -> Result<Vec<Table>> {
    if rows.is_empty() {
        return Err(chnr::Error::Data("results file holds no rows".into()).into());
    }
    let mut tasks: Vec<String> = Vec::new();
    for t in [Task::ImageToText, Task::TextToImage].map(|t| t.as_str().to_string()) {
        if rows.iter().any(|r| r.task == t) {
            tasks.push(t);
        }
    }
    for r in rows {
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
    }
    let mut tables = Vec::new();
    for task in tasks {
        let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.task == task).collect();
        let ks: BTreeSet<usize> = sel.iter().map(|r| r.k).collect();
        if ks.len() > 1 {
            return Err(
                chnr::Error::Data(format!("{task} rows mix retrieval depths {ks:?}")).into(),
            );
        }
        let mut values: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
        for r in &sel {
            values
                .entry((r.variant.clone(), r.noise_rate.to_bits()))
                .or_default()
                .push(r.map_at_k);
        }
        let mut rates: Vec<f64> = sel.iter().map(|r| r.noise_rate).collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        let mut variants: Vec<String> = Variant::ALL
            .iter()
            .map(|v| v.as_str().to_string())
            .filter(|v| sel.iter().any(|r| &r.variant == v))
            .collect();
        for r in &sel {
            if !variants.contains(&r.variant) {
                variants.push(r.variant.clone());
            }
        }
        let cells = values
            .into_iter()
            .map(|(key, v)| (key, Cell::of(&v)))
            .collect();
        tables.push(Table {
            task,
            k: ks.into_iter().next().unwrap_or(0),
            variants,
            rates,
            cells,
        });
    }
    Ok(tables)
}

fn percent(rate: f64) -> String {
    format!("{}%", (rate * 1000.0).round() / 10.0)
}

/// Plain-text rendering: one block per direction, `mean±std` cells, then the
/// CHNR ≥ CHNR-WNR flags.
pub fn render(tables: &[Table]) -> String {
    let mut out = String::new();
    for t in tables {
        let _ = writeln!(out, "{} mAP@{} (mean±std over seeds)", t.task, t.k);
        let _ = write!(out, "{:<10}", "variant");
        for &r in &t.rates {
            let _ = write!(out, " {:>15}", percent(r));
        }
        out.push('\n');
        for v in &t.variants {
            let _ = write!(out, "{v:<10}");
            for &r in &t.rates {
                let text = match t.cell(v, r) {
                    Some(Cell {
                        mean, std: Some(s), ..
                    }) => format!("{mean:.4}±{s:.4}"),
                    Some(Cell {
                        mean, std: None, ..
                    }) => format!("{mean:.4}"),
                    None => "-".to_string(),
                };
                let _ = write!(out, " {text:>15}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "CHNR>=WNR");
        for (_, flag) in t.trend_flags() {
            let text = match flag {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            };
            let _ = write!(out, " {text:>15}");
        }
        out.push_str("\n\n");
    }
    out
}
