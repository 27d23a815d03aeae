use std::path::PathBuf;

use multipod::netsim::{end_to_end_speedup, read_breakdown_csv, StepBreakdown};

use super::{sha256_hex, Context};
use crate::output::{fixed, num};
use crate::{CliError, Format, Grid};

/// Chip count the speedup columns are normalized to when present.
pub const BASELINE_CHIPS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub row: StepBreakdown,
    pub source: String,
    /// `step_s(baseline) / step_s(chips)`.
    pub speedup: f64,
    /// Examples-per-second ratio against the baseline.
    pub throughput_speedup: f64,
    /// Throughput speedup scaled by the epoch budgets.
    pub e2e_speedup: f64,
}

/// Merges sweeps into one table sorted by chips. Rows for the same chip
/// count must agree; speedups are relative to the 16-chip row, or the
/// smallest chip count when there is none.
pub fn merge(inputs: &[(String, Vec<StepBreakdown>)]) -> Result<Vec<ReportRow>, CliError> {
    let mut rows: Vec<(String, StepBreakdown)> = Vec::new();
    for (source, sweep) in inputs {
        for r in sweep {
            match rows.iter().find(|(_, e)| e.chips == r.chips) {
                Some((other, existing)) if existing != r => {
                    return Err(CliError::Input(format!(
                        "conflicting rows for {} chips in {other} and {source}; pass only one of them",
                        r.chips
                    )));
                }
                Some(_) => {}
                None => rows.push((source.clone(), r.clone())),
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Input("no rows to report".into()));
    }
    rows.sort_by_key(|(_, r)| r.chips);
    let base = rows
        .iter()
        .find(|(_, r)| r.chips == BASELINE_CHIPS)
        .unwrap_or(&rows[0])
        .1
        .clone();
    Ok(rows
        .into_iter()
        .map(|(source, r)| {
            let throughput_speedup = r.throughput() / base.throughput();
            let e2e_speedup = match (base.epochs, r.epochs) {
                (Some(b), Some(e)) => end_to_end_speedup(throughput_speedup, b, e),
                _ => throughput_speedup,
            };
            ReportRow {
                speedup: base.step_s / r.step_s,
                throughput_speedup,
                e2e_speedup,
                row: r,
                source,
            }
        })
        .collect())
}

pub fn run(ctx: &Context, inputs: &[PathBuf]) -> Result<(Vec<Grid>, bool), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Input("report needs at least one CSV produced by `simulate`".into()));
    }
    let mut sweeps = Vec::with_capacity(inputs.len());
    let mut hashes = Vec::with_capacity(inputs.len());
    for path in inputs {
        let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let rows = read_breakdown_csv(bytes.as_slice())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        hashes.push((path.display().to_string(), sha256_hex(&bytes)));
        sweeps.push((path.display().to_string(), rows));
    }
    let merged = merge(&sweeps)?;
    let base = merged
        .iter()
        .find(|r| r.row.chips == BASELINE_CHIPS)
        .unwrap_or(&merged[0])
        .row
        .chips;

    let table = ctx.format == Format::Table;
    let mut g = Grid::new([
        "chips",
        "global_batch",
        "epochs",
        "step_s",
        "allreduce_fraction",
        "speedup",
        "throughput_speedup",
        "e2e_speedup",
    ])
    .titled(format!("simulated scaling summary (speedups relative to {base} chips)"));
    for r in &merged {
        let f = |v: f64, d: usize| if table { fixed(v, d) } else { num(v) };
        g.push([
            r.row.chips.to_string(),
            r.row.global_batch.to_string(),
            r.row.epochs.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            f(r.row.step_s, 6),
            f(r.row.allreduce_fraction, 4),
            f(r.speedup, 3),
            f(r.throughput_speedup, 3),
            f(r.e2e_speedup, 3),
        ]);
    }
    g.note("values are simulated, not measured");
    for (path, hash) in &hashes {
        g.note(format!("input {path} sha256={hash}"));
    }
    if let Some(cfg) = &ctx.config {
        let bytes = std::fs::read(cfg).map_err(|e| CliError::Input(format!("cannot read {}: {e}", cfg.display())))?;
        g.note(format!("config {} sha256={}", cfg.display(), sha256_hex(&bytes)));
    }
    g.note(format!("seed={}", ctx.seed));
    Ok((vec![g], true))
}
