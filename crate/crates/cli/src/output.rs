use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use volunteer_core::metrics::{self, MetricEvent, SessionClassification, Summary};

use crate::commands::CliError;

pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
}

pub fn summaries(dir: &Path, name: &str, rows: &[Summary]) -> Result<(), CliError> {
    metrics::write_summaries_csv(rows, create(dir, name)?)?;
    Ok(())
}

pub fn histogram(dir: &Path, name: &str, rows: &[(String, SessionClassification)]) -> Result<(), CliError> {
    metrics::write_histogram_csv(rows, create(dir, name)?)?;
    Ok(())
}

pub fn events(dir: &Path, name: &str, events: &[MetricEvent]) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    metrics::write_ndjson(events, &mut w).map_err(|e| CliError::io(&dir.join(name), e))?;
    w.flush().map_err(|e| CliError::io(&dir.join(name), e))
}

pub fn sessions(dir: &Path, name: &str, events: &[MetricEvent]) -> Result<(), CliError> {
    metrics::write_sessions_csv(&metrics::session_records(events), create(dir, name)?)?;
    Ok(())
}

/// Short human-readable line for stdout.
pub fn describe(s: &Summary) -> String {
    format!(
        "{:<28} runtime {:>9.2}s  sessions {:>5}  value {:>5.1}%  downtime {:>9.2}s  req/s {:>7.2}",
        s.label,
        s.runtime,
        s.sessions,
        100.0 * s.value_fraction,
        s.downtime,
        s.request_rate
    )
}
