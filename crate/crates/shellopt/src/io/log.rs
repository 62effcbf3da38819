//! Deterministic CSV export of the optimizer's iteration history.

use crate::optimizer::IterationRecord;
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

/// Render the history as CSV with 17 significant digits per value (the
/// shortest representation that reproduces every f64 exactly), one row per
/// accepted iterate. An empty history yields a header-only file.
pub fn iteration_log_string(history: &[IterationRecord]) -> String {
    let mut out = String::from("iter,objective,constraint_violation,step_norm,kkt_residual\n");
    for rec in history {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            rec.iter, rec.objective, rec.constraint_violation, rec.step_norm, rec.kkt_residual
        );
    }
    out
}

pub fn write_iteration_log(history: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, iteration_log_string(history))?)
}
