//! Versioned CSV result schema.
//!
//! One metric per row. Floats are emitted with 17 significant digits so a
//! read-back is bit-exact, and nothing in a file depends on wall-clock,
//! locale, or worker count: running the same config twice yields identical
//! bytes.

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "schema_version,experiment,config_hash,policy,rank,seed,step,extra,metric,value";

/// One emitted metric with its cell coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub config_hash: String,
    pub policy: Option<String>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub step: Option<usize>,
    /// Additional coordinates as `key=value` pairs joined by ';'.
    pub extra: String,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(experiment: &str, config_hash: &str, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            policy: None,
            rank: None,
            seed: None,
            step: None,
            extra: String::new(),
            metric: metric.to_string(),
            value,
        }
    }

    pub fn policy(mut self, policy: &str) -> ResultRow {
        self.policy = Some(policy.to_string());
        self
    }

    pub fn rank(mut self, rank: usize) -> ResultRow {
        self.rank = Some(rank);
        self
    }

    pub fn seed(mut self, seed: u64) -> ResultRow {
        self.seed = Some(seed);
        self
    }

    pub fn step(mut self, step: usize) -> ResultRow {
        self.step = Some(step);
        self
    }

    pub fn extra(mut self, extra: String) -> ResultRow {
        self.extra = extra;
        self
    }
}

/// 17 significant digits; parses back to the identical f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_field(name: &str, value: &str) -> Result<(), CliError> {
    if value.contains(',') || value.contains('\n') || value.contains('"') {
        return Err(CliError::Validation(format!(
            "{name} value '{value}' contains CSV delimiter characters"
        )));
    }
    Ok(())
}

pub fn to_csv(rows: &[ResultRow]) -> Result<String, CliError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        check_field("experiment", &row.experiment)?;
        check_field("extra", &row.extra)?;
        check_field("metric", &row.metric)?;
        if let Some(p) = &row.policy {
            check_field("policy", p)?;
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            SCHEMA_VERSION,
            row.experiment,
            row.config_hash,
            row.policy.as_deref().unwrap_or(""),
            row.rank.map(|r| r.to_string()).unwrap_or_default(),
            row.seed.map(|s| s.to_string()).unwrap_or_default(),
            row.step.map(|s| s.to_string()).unwrap_or_default(),
            row.extra,
            row.metric,
            fmt_f64(row.value),
        ));
    }
    Ok(out)
}

/// Parse a results file written by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<ResultRow>, CliError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Validation("results file is empty (missing header)".into()))?;
    if header != CSV_HEADER {
        return Err(CliError::Validation(format!(
            "results schema mismatch: expected header '{CSV_HEADER}', found '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(CliError::Validation(format!(
                "line {}: expected 10 fields, found {}",
                i + 2,
                fields.len()
            )));
        }
        let version: u32 = fields[0]
            .parse()
            .map_err(|_| CliError::Validation(format!("line {}: bad schema version", i + 2)))?;
        if version != SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "line {}: unsupported schema version {version} (this build reads {SCHEMA_VERSION})",
                i + 2
            )));
        }
        let parse_opt_usize = |s: &str| -> Result<Option<usize>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| CliError::Validation(format!("line {}: bad integer '{s}'", i + 2)))
            }
        };
        let value: f64 = fields[9]
            .parse()
            .map_err(|_| CliError::Validation(format!("line {}: bad value '{}'", i + 2, fields[9])))?;
        rows.push(ResultRow {
            experiment: fields[1].to_string(),
            config_hash: fields[2].to_string(),
            policy: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].to_string())
            },
            rank: parse_opt_usize(fields[4])?,
            seed: if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|_| {
                    CliError::Validation(format!("line {}: bad seed '{}'", i + 2, fields[5]))
                })?)
            },
            step: parse_opt_usize(fields[6])?,
            extra: fields[7].to_string(),
            metric: fields[8].to_string(),
            value,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips_exactly() {
        for v in [
            0.1,
            -3.5e-300,
            1.0 / 3.0,
            123456.789,
            f64::MIN_POSITIVE,
            0.0,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![
            ResultRow::new("variance", "abc", "empirical_var", 0.16)
                .extra("r=2;p_in=4;gamma=1".into()),
            ResultRow::new("sweep", "abc", "final_eval", 0.25)
                .policy("rora")
                .rank(8)
                .seed(3),
        ];
        let csv = to_csv(&rows).unwrap();
        let back = from_csv(&csv).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = format!("{CSV_HEADER}\n9,x,h,,,,,,m,1.0e0\n");
        let err = from_csv(&text).unwrap_err();
        assert!(err.to_string().contains("schema version"), "{err}");
    }

    #[test]
    fn header_mismatch_is_explicit() {
        let err = from_csv("a,b,c\n").unwrap_err();
        assert!(err.to_string().contains("schema mismatch"), "{err}");
    }
}
