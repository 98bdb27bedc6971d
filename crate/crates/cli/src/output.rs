//! CSV writing shared by the commands.

use std::path::Path;

use crate::config::ConfigError;

/// Shortest round-trip formatting; empty for a missing value.
pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

/// Writes a header row and the given rows, creating parent directories.
pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ConfigError> {
    let io = |e: &dyn std::fmt::Display| ConfigError::Data(format!("writing {}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(header).map_err(|e| io(&e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))?;
    Ok(())
}
