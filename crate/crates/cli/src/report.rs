//! Renders aggregate results into the benchmark table layouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use crate::simulate::AGGREGATE_CSV;

pub const REPORT_TXT: &str = "report.txt";
pub const ITE_QUANTILES_CSV: &str = "s3_ite_quantiles.csv";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub method: String,
    pub estimand: String,
    pub replications: usize,
    pub excluded: usize,
    pub bias_e3: Option<f64>,
    pub rmse_e3: Option<f64>,
    pub ite_min: Option<f64>,
    pub ite_q1: Option<f64>,
    pub ite_median: Option<f64>,
    pub ite_q3: Option<f64>,
    pub ite_max: Option<f64>,
}

/// Cells keyed by (scenario, estimand, method); later files override earlier ones.
pub type Cells = BTreeMap<(String, String, String), AggregateRow>;

fn find_aggregates(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_aggregates(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == AGGREGATE_CSV) {
            out.push(p);
        }
    }
    Ok(())
}

pub fn load_cells(dir: &Path) -> Result<Cells> {
    let mut files = Vec::new();
    find_aggregates(dir, &mut files)?;
    if files.is_empty() {
        bail!(
            "no results under {}: expected one or more {AGGREGATE_CSV} files (with replications.csv and manifest.json) written by `ace simulate`",
            dir.display()
        );
    }
    let mut cells = Cells::new();
    for f in files {
        let mut rdr = csv::Reader::from_path(&f).with_context(|| format!("reading {}", f.display()))?;
        for row in rdr.deserialize::<AggregateRow>() {
            let row = row.with_context(|| format!("parsing {}", f.display()))?;
            cells.insert((row.scenario.clone(), row.estimand.clone(), row.method.clone()), row);
        }
    }
    Ok(cells)
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

struct Table<'a> {
    title: &'a str,
    methods: &'a [&'a str],
    /// Column groups as (label, scenario, estimand).
    groups: &'a [(&'a str, &'a str, &'a str)],
}

fn render(t: &Table, cells: &Cells, missing: &mut Vec<String>) -> String {
    let mut s = String::new();
    writeln!(s, "{}", t.title).unwrap();
    let mut head = format!("{:<10}", "method");
    for (label, _, _) in t.groups {
        head += &format!(" | {:^19}", label);
    }
    writeln!(s, "{head}").unwrap();
    let mut sub = format!("{:<10}", "");
    for _ in t.groups {
        sub += &format!(" | {:>9} {:>9}", "bias", "rmse");
    }
    writeln!(s, "{sub}").unwrap();
    for m in t.methods {
        let mut line = format!("{m:<10}");
        for (_, sc, est) in t.groups {
            match cells.get(&(sc.to_string(), est.to_string(), m.to_string())) {
                Some(r) => line += &format!(" | {:>9} {:>9}", num(r.bias_e3), num(r.rmse_e3)),
                None => {
                    missing.push(format!("{sc}/{est}/{m}"));
                    line += &format!(" | {:>9} {:>9}", "-", "-");
                }
            }
        }
        writeln!(s, "{line}").unwrap();
    }
    s
}

/// Text report plus the scenario 3 quantile rows.
#[derive(Debug)]
pub struct Report {
    pub text: String,
    pub ite_quantiles_csv: String,
    pub missing: Vec<String>,
}

pub fn build(cells: &Cells) -> Report {
    let mut missing = Vec::new();
    let mut text = String::from("All bias and RMSE values are multiplied by 1e3.\n\n");
    text += &render(
        &Table {
            title: "Scenarios 1 and 2A, ATE",
            methods: &["random", "alc", "ace"],
            groups: &[("Scenario 1", "s1", "ate"), ("Scenario 2A", "s2a", "ate")],
        },
        cells,
        &mut missing,
    );
    text.push('\n');
    text += &render(
        &Table {
            title: "Scenario 2B",
            methods: &["random", "alc_e", "ace_e"],
            groups: &[("ATE", "s2b", "ate"), ("ATTE", "s2b", "atte"), ("ATO", "s2b", "ato")],
        },
        cells,
        &mut missing,
    );
    text.push('\n');
    text += "Scenario 3, cumulative ITE\n";
    text += &format!(
        "{:<10} | {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "method", "min", "q1", "median", "q3", "max"
    );
    let mut q = String::from("method,min,q1,median,q3,max\n");
    for m in ["random", "greedy", "ace_ucb"] {
        match cells.get(&("s3".to_string(), "ite".to_string(), m.to_string())) {
            Some(r) => {
                let vals = [r.ite_min, r.ite_q1, r.ite_median, r.ite_q3, r.ite_max];
                text += &format!("{m:<10}");
                for v in vals {
                    text += &format!(" {:>9}", v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()));
                }
                text.push('\n');
                q += m;
                for v in vals {
                    q += &format!(",{}", v.map(|x| x.to_string()).unwrap_or_default());
                }
                q.push('\n');
            }
            None => {
                missing.push(format!("s3/ite/{m}"));
                text += &format!("{m:<10} {:>9}\n", "-");
            }
        }
    }
    let other: Vec<_> = cells
        .values()
        .filter(|r| !is_standard_cell(r))
        .map(|r| format!("{}/{}/{}", r.scenario, r.estimand, r.method))
        .collect();
    if !other.is_empty() {
        text += &format!("\nAdditional cells not in the standard layout: {}\n", other.join(", "));
    }
    let excluded: usize = cells.values().map(|r| r.excluded).sum();
    if excluded > 0 {
        text += &format!("\nExcluded replications across all cells: {excluded}\n");
    }
    if !missing.is_empty() {
        text += &format!("\nMissing cells ({}): {}\n", missing.len(), missing.join(", "));
    }
    Report {
        text,
        ite_quantiles_csv: q,
        missing,
    }
}

fn is_standard_cell(r: &AggregateRow) -> bool {
    match (r.scenario.as_str(), r.estimand.as_str()) {
        ("s1" | "s2a", "ate") => ["random", "alc", "ace"].contains(&r.method.as_str()),
        ("s2b", "ate" | "atte" | "ato") => ["random", "alc_e", "ace_e"].contains(&r.method.as_str()),
        ("s3", "ite") => ["random", "greedy", "ace_ucb"].contains(&r.method.as_str()),
        _ => false,
    }
}

/// Loads every aggregate under `dir`, writes the report files there and returns the report.
pub fn run(dir: &Path) -> Result<Report> {
    let cells = load_cells(dir)?;
    let report = build(&cells);
    fs::write(dir.join(REPORT_TXT), &report.text)?;
    fs::write(dir.join(ITE_QUANTILES_CSV), &report.ite_quantiles_csv)?;
    Ok(report)
}
