//! `metrics.csv`: one row per `MetricsRow`, header first.

use std::fs;
use std::path::Path;

use crate::error::{io_err, LaddError, Result};
use crate::evalbench::{Metric, MetricsRow};

pub const METRICS_HEADER: &str = "run_id,config_hash,metric,value,seed,step,n_samples";

fn csv_err(msg: impl Into<String>) -> LaddError {
    LaddError::Invalid {
        what: "metrics csv",
        reason: msg.into(),
    }
}

/// Values use the shortest representation that parses back to the same bits.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        if r.run_id.contains([',', '\n']) || r.config_hash.contains([',', '\n']) {
            return Err(csv_err(format!("field of run `{}` contains a separator", r.run_id)));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id, r.config_hash, r.metric, r.value, r.seed, r.step, r.n_samples
        ));
    }
    Ok(out)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(csv_err("missing or unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| csv_err(format!("line {}: bad {what}", i + 2));
            if f.len() != 7 {
                return Err(bad("column count"));
            }
            Ok(MetricsRow {
                run_id: f[0].to_string(),
                config_hash: f[1].to_string(),
                metric: Metric::parse(f[2])?,
                value: f[3].parse().map_err(|_| bad("value"))?,
                seed: f[4].parse().map_err(|_| bad("seed"))?,
                step: f[5].parse().map_err(|_| bad("step"))?,
                n_samples: f[6].parse().map_err(|_| bad("n_samples"))?,
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)?).map_err(|e| io_err(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_metrics(&text)
}
