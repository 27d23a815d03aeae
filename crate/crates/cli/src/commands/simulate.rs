use multipod::netsim::{sweep_scaling, StepBreakdown};

use super::Context;
use crate::config::Scenario;
use crate::output::num;
use crate::{CliError, Grid};

pub const COLUMNS: [&str; 8] = [
    "chips",
    "compute_s",
    "allreduce_s",
    "step_s",
    "allreduce_fraction",
    "e2e_speedup",
    "global_batch",
    "epochs",
];

/// Breakdown rows of the scenario's sweep.
pub fn breakdown(scenario: &Scenario) -> Result<Vec<StepBreakdown>, CliError> {
    let (scaling, sweep) = scenario.scaling()?;
    sweep_scaling(&scaling, &sweep.chips).map_err(|e| CliError::at("sweep.chips", e))
}

pub fn grid(rows: &[StepBreakdown]) -> Grid {
    let mut g = Grid::new(COLUMNS);
    for r in rows {
        g.push([
            r.chips.to_string(),
            num(r.compute_s),
            num(r.allreduce_s),
            num(r.step_s),
            num(r.allreduce_fraction),
            num(r.e2e_speedup),
            r.global_batch.to_string(),
            r.epochs.map(|e| e.to_string()).unwrap_or_default(),
        ]);
    }
    g
}

pub fn run(ctx: &Context) -> Result<(Vec<Grid>, bool), CliError> {
    let (scenario, _) = ctx.scenario()?;
    let rows = breakdown(&scenario)?;
    let name = scenario.name.as_deref().unwrap_or("scenario");
    let mut g = grid(&rows).titled(format!("{name}: simulated compute/all-reduce breakdown"));
    g.note("all times are simulated by the alpha-beta cost model");
    if let Some(r) = rows.iter().find(|r| r.chips == 4096) {
        g.note(format!(
            "calibration check: allreduce_fraction at 4096 chips = {}",
            num(r.allreduce_fraction)
        ));
    }
    Ok((vec![g], true))
}
