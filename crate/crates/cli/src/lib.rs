//! Library surface of the lab CLI, exposed for integration tests.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod summary;

use error::CliError;
use sha2::{Digest, Sha256};
use std::path::Path;

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Execute a config file end to end: results.csv, verbatim config echo, and
/// a human-readable summary, all under `out_dir`.
pub fn run_config_file(config_path: &Path, out_dir: &Path, workers: usize) -> Result<(), CliError> {
    let raw = std::fs::read(config_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", config_path.display())))?;
    let text = String::from_utf8(raw.clone())
        .map_err(|_| CliError::Validation("config is not valid UTF-8".into()))?;
    let config = config::RunConfig::from_toml(&text)?;
    let hash = hash_bytes(&raw);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))?;
    let output = pool.install(|| runner::execute(&config, &hash))?;

    std::fs::create_dir_all(out_dir)?;
    let csv = report::to_csv(&output.rows)?;
    std::fs::write(out_dir.join("results.csv"), csv)?;
    std::fs::write(out_dir.join("config_echo.toml"), &raw)?;
    let summary = summary::summarize(&output.rows);
    std::fs::write(out_dir.join("summary.txt"), summary::render_text(&summary))?;
    for (name, bytes) in &output.artifacts {
        runner::write_artifact(out_dir, name, bytes)?;
    }
    Ok(())
}

/// Summarize an existing results file to stdout-ready text or JSON.
pub fn summarize_file(results_path: &Path, json: bool) -> Result<String, CliError> {
    let text = std::fs::read_to_string(results_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", results_path.display())))?;
    let rows = report::from_csv(&text)?;
    let summary = summary::summarize(&rows);
    if json {
        summary::render_json(&summary)
    } else {
        Ok(summary::render_text(&summary))
    }
}
