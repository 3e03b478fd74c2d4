//! Replication batches and their on-disk results.
//!
//! Output files are byte-identical for identical configurations: rows are
//! ordered by method then seed and wall-clock times are never written.

use std::fs;
use std::io::Write;
use std::path::Path;

use ace_core::simulation::{aggregate, run_replication, Method, Metrics, ReplicationResult};
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const REPLICATIONS_CSV: &str = "replications.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

pub const REPLICATION_HEADER: [&str; 9] = [
    "seed",
    "scenario",
    "method",
    "estimand",
    "estimate",
    "truth",
    "bias",
    "cumulative_ite",
    "excluded",
];

pub const AGGREGATE_HEADER: [&str; 12] = [
    "scenario",
    "method",
    "estimand",
    "replications",
    "excluded",
    "bias_e3",
    "rmse_e3",
    "ite_min",
    "ite_q1",
    "ite_median",
    "ite_q3",
    "ite_max",
];

/// All replications of one run, grouped by method in config order.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub by_method: Vec<(Method, Vec<ReplicationResult>)>,
}

impl BatchResult {
    pub fn metrics(&self) -> Vec<(Method, Metrics)> {
        self.by_method.iter().map(|(m, r)| (*m, aggregate(r))).collect()
    }

    pub fn excluded(&self) -> usize {
        self.by_method
            .iter()
            .flat_map(|(_, r)| r)
            .filter(|r| r.excluded.is_some())
            .count()
    }
}

/// Runs every (method, seed) pair; parallel across replications only.
pub fn run_batch(cfg: &RunConfig) -> Result<BatchResult> {
    cfg.validate()?;
    let seeds = cfg.seeds()?;
    let methods = cfg.effective_methods();
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("building worker pool")?;
    let results: Vec<ReplicationResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, s)| run_replication(&cfg.scenario_config(m), s))
            .collect::<ace_core::Result<Vec<_>>>()
    })?;
    let mut by_method = Vec::new();
    let mut it = results.into_iter();
    for &m in &methods {
        by_method.push((m, it.by_ref().take(seeds.len()).collect()));
    }
    Ok(BatchResult {
        config: cfg.clone(),
        seeds,
        by_method,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_replications<W: Write>(batch: &BatchResult, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(REPLICATION_HEADER)?;
    for (_, results) in &batch.by_method {
        for r in results {
            out.write_record([
                r.seed.to_string(),
                r.scenario.to_string(),
                r.method.to_string(),
                r.estimand.clone(),
                fmt_opt(r.estimate),
                fmt_opt(r.truth),
                fmt_opt(r.error()),
                fmt_opt(r.cumulative_ite),
                r.excluded.clone().unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_aggregate<W: Write>(batch: &BatchResult, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(AGGREGATE_HEADER)?;
    let estimand = batch.config.scenario_config(batch.by_method[0].0).estimand();
    for (m, metrics) in batch.metrics() {
        let q = metrics.cumulative_ite;
        out.write_record([
            batch.config.scenario.to_string(),
            m.to_string(),
            estimand.clone(),
            metrics.replications.to_string(),
            metrics.excluded.to_string(),
            fmt_opt(metrics.bias_e3()),
            fmt_opt(metrics.rmse_e3()),
            fmt_opt(q.map(|f| f.min)),
            fmt_opt(q.map(|f| f.q1)),
            fmt_opt(q.map(|f| f.median)),
            fmt_opt(q.map(|f| f.q3)),
            fmt_opt(q.map(|f| f.max)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    config_sha256: String,
    seeds: &'a [u64],
    replications: usize,
    excluded: usize,
    files: [&'static str; 2],
}

pub fn manifest_json(batch: &BatchResult) -> Result<String> {
    let mut config = batch.config.clone();
    config.seed = Some(config.resolved_seed()?);
    let m = Manifest {
        tool: "ace",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: config.hash()?,
        config: &config,
        seeds: &batch.seeds,
        replications: batch.by_method.iter().map(|(_, r)| r.len()).sum(),
        excluded: batch.excluded(),
        files: [REPLICATIONS_CSV, AGGREGATE_CSV],
    };
    Ok(serde_json::to_string_pretty(&m)? + "\n")
}

/// Writes the per-replication CSV, the aggregate CSV and the manifest into `dir`.
pub fn write_outputs(batch: &BatchResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut buf = Vec::new();
    write_replications(batch, &mut buf)?;
    fs::write(dir.join(REPLICATIONS_CSV), &buf)?;
    buf.clear();
    write_aggregate(batch, &mut buf)?;
    fs::write(dir.join(AGGREGATE_CSV), &buf)?;
    fs::write(dir.join(MANIFEST_JSON), manifest_json(batch)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ace_core::simulation::Scenario;

    fn tiny() -> RunConfig {
        RunConfig {
            scenario: Scenario::S3,
            methods: vec![Method::Random, Method::Greedy],
            n: 12,
            n_pool: 30,
            n_test: 20,
            n_init: 3,
            restarts: 2,
            refit_restarts: 1,
            refit_interval: 3,
            reps: 2,
            seed: Some(5),
            threads: 1,
            ..Default::default()
        }
    }

    #[test]
    fn rows_are_grouped_by_method_then_seed() {
        let b = run_batch(&tiny()).unwrap();
        let mut buf = Vec::new();
        write_replications(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPLICATION_HEADER.join(","));
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("5,s3,random,ite,"));
        assert!(lines[2].starts_with("6,s3,random,ite,"));
        assert!(lines[3].starts_with("5,s3,greedy,ite,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn aggregate_has_quantiles_for_s3() {
        let b = run_batch(&tiny()).unwrap();
        let mut buf = Vec::new();
        write_aggregate(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[..5], ["s3", "random", "ite", "2", "0"]);
        assert_eq!(row[5], "");
        assert!(row[9].parse::<f64>().is_ok());
    }

    #[test]
    fn manifest_records_hash_and_seeds() {
        let b = run_batch(&tiny()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&manifest_json(&b).unwrap()).unwrap();
        assert_eq!(v["seeds"], serde_json::json!([5, 6]));
        assert_eq!(v["config_sha256"].as_str().unwrap(), tiny().hash().unwrap());
        assert_eq!(v["excluded"], 0);
    }
}
