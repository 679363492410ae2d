//! Plain-text and JSON summaries of a results file.
//!
//! Per-seed metrics are aggregated into per-(policy, rank) means and
//! standard deviations; slope fits and variance cells are listed as-is.

use crate::error::CliError;
use crate::report::ResultRow;
use serde_json::json;
use std::collections::BTreeMap;

/// Metrics that exist once per (policy, rank, seed) cell and get averaged
/// over seeds.
const CELL_METRICS: &[&str] = &[
    "final_eval",
    "frozen_eval",
    "mean_update_norm_50",
    "final_update_norm",
    "base_eval",
    "pruned_eval",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStat {
    pub experiment: String,
    pub policy: String,
    pub rank: Option<usize>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub groups: Vec<GroupStat>,
    /// Non-aggregated rows (slopes, variance cells, scalar metrics), in file
    /// order.
    pub singles: Vec<ResultRow>,
}

pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut grouped: BTreeMap<(String, String, Option<usize>, String), Vec<f64>> = BTreeMap::new();
    let mut singles = Vec::new();
    for row in rows {
        let aggregatable = row.seed.is_some() && CELL_METRICS.contains(&row.metric.as_str());
        if aggregatable {
            let key = (
                row.experiment.clone(),
                row.policy.clone().unwrap_or_default(),
                row.rank,
                row.metric.clone(),
            );
            grouped.entry(key).or_default().push(row.value);
        } else if row.step.is_none() {
            singles.push(row.clone());
        }
        // per-step traces are intentionally not summarized
    }
    let groups = grouped
        .into_iter()
        .map(|((experiment, policy, rank, metric), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
            } else {
                0.0
            };
            GroupStat {
                experiment,
                policy,
                rank,
                metric,
                n,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Summary { groups, singles }
}

pub fn render_text(summary: &Summary) -> String {
    let mut out = String::new();
    if summary.groups.is_empty() && summary.singles.is_empty() {
        out.push_str("no results\n");
        return out;
    }
    if !summary.groups.is_empty() {
        out.push_str("per-cell aggregates (mean +/- std over seeds)\n");
        out.push_str("experiment       policy   rank  metric                mean          std      n\n");
        for g in &summary.groups {
            out.push_str(&format!(
                "{:<16} {:<8} {:>4}  {:<20} {:>12.6} {:>12.6} {:>4}\n",
                g.experiment,
                if g.policy.is_empty() { "-" } else { &g.policy },
                g.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
                g.metric,
                g.mean,
                g.std,
                g.n
            ));
        }
    }
    if !summary.singles.is_empty() {
        out.push_str("single metrics\n");
        for row in &summary.singles {
            let mut coords = Vec::new();
            if let Some(p) = &row.policy {
                coords.push(format!("policy={p}"));
            }
            if let Some(r) = row.rank {
                coords.push(format!("rank={r}"));
            }
            if let Some(s) = row.seed {
                coords.push(format!("seed={s}"));
            }
            if !row.extra.is_empty() {
                coords.push(row.extra.clone());
            }
            let coord_str = if coords.is_empty() {
                String::new()
            } else {
                format!(" [{}]", coords.join(" "))
            };
            out.push_str(&format!(
                "{} {}{} = {:.6}\n",
                row.experiment, row.metric, coord_str, row.value
            ));
        }
    }
    out
}

pub fn render_json(summary: &Summary) -> Result<String, CliError> {
    let groups: Vec<_> = summary
        .groups
        .iter()
        .map(|g| {
            json!({
                "experiment": g.experiment,
                "policy": g.policy,
                "rank": g.rank,
                "metric": g.metric,
                "n": g.n,
                "mean": g.mean,
                "std": g.std,
            })
        })
        .collect();
    let singles: Vec<_> = summary
        .singles
        .iter()
        .map(|r| {
            json!({
                "experiment": r.experiment,
                "policy": r.policy,
                "rank": r.rank,
                "seed": r.seed,
                "extra": r.extra,
                "metric": r.metric,
                "value": r.value,
            })
        })
        .collect();
    serde_json::to_string_pretty(&json!({ "groups": groups, "singles": singles }))
        .map_err(|e| CliError::Io(e.to_string()))
}
