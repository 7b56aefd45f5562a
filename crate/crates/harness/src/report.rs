//! Plain-text summary of whatever result files exist in an output directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentId;
use crate::error::Result;
use crate::experiments::outputs;

fn table(path: &Path, out: &mut String) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let _ = writeln!(out, "{} ({} rows)", path.display(), rows.len());
    let _ = writeln!(out, "  {}", headers.iter().collect::<Vec<_>>().join("  "));
    for row in rows.iter().take(12) {
        let _ = writeln!(out, "  {}", row.iter().collect::<Vec<_>>().join("  "));
    }
    if rows.len() > 12 {
        let _ = writeln!(out, "  ...");
    }
    Ok(())
}

/// Summarizes every known CSV found in `dir`. Dumps of raw pairs are skipped.
pub fn summarize(dir: &Path) -> Result<String> {
    let mut out = String::new();
    for id in ExperimentId::ALL {
        for name in outputs(id) {
            if name.ends_with("_dump.csv") {
                continue;
            }
            let path = dir.join(name);
            if path.exists() {
                table(&path, &mut out)?;
            }
        }
    }
    if out.is_empty() {
        let _ = writeln!(out, "no results in {}", dir.display());
    }
    Ok(out)
}
