use multipod::collectives::{hierarchical_schedule, HierarchicalOptions};
use multipod::netsim::allreduce_seconds;
use multipod::sharding::{
    optimizer_cost_fraction, optimizer_seconds, place_tables, Decision, StepCosts, WeightUpdateShardingPlan,
};

use super::Context;
use crate::config::Scenario;
use crate::output::num;
use crate::{CliError, Grid};

/// Unsharded and sharded optimizer fractions at the configured chip count.
pub fn optimizer_fractions(scenario: &Scenario) -> Result<Option<(usize, f64, f64)>, CliError> {
    let Some(oc) = &scenario.optimizer_cost else {
        return Ok(None);
    };
    let (scaling, sweep) = scenario.scaling()?;
    let compute_s = scaling.compute.step_seconds(sweep.global_batch, oc.chips);
    let allreduce_s = allreduce_seconds(&scaling, oc.chips).map_err(|e| CliError::at("optimizer_cost.chips", e))?;
    let costs = StepCosts {
        compute_s,
        allreduce_s,
        optimizer_s: optimizer_seconds(oc.params, oc.flops_per_param, oc.flops_rate),
    };
    let shards = oc.chips / scaling.stride;
    Ok(Some((
        shards,
        optimizer_cost_fraction(&costs, 1),
        optimizer_cost_fraction(&costs, shards),
    )))
}

pub fn run(ctx: &Context) -> Result<(Vec<Grid>, bool), CliError> {
    let (scenario, _) = ctx.scenario()?;
    let mesh = scenario.mesh()?;
    let c = scenario.require(&scenario.collective, "collective")?;
    let align = scenario.optimizer.map_or(1, |o| o.shard_align());
    let n = c.payload_elems();
    let plan = WeightUpdateShardingPlan::new(&mesh, c.stride, n, align).map_err(|e| CliError::at("collective.stride", e))?;

    let mut summary = Grid::new(["item", "value"]).titled("weight-update sharding plan");
    let lens: Vec<usize> = plan.shards.iter().map(|s| s.len).collect();
    summary.push(["mesh", &format!("{}x{}", mesh.x_size(), mesh.y_size())]);
    summary.push(["stride", &c.stride.to_string()]);
    summary.push(["weights_per_group", &n.to_string()]);
    summary.push(["padded_len", &plan.padded_len.to_string()]);
    summary.push(["shards_per_group", &plan.shards_per_group().to_string()]);
    summary.push(["max_shard", &lens.iter().max().unwrap_or(&0).to_string()]);
    summary.push(["min_shard", &lens.iter().min().unwrap_or(&0).to_string()]);
    if let Some((shards, unsharded, sharded)) = optimizer_fractions(&scenario)? {
        summary.push(["optimizer_fraction_unsharded", &num(unsharded)]);
        summary.push(["optimizer_fraction_sharded", &num(sharded)]);
        summary.push(["optimizer_shards", &shards.to_string()]);
    }
    summary.note("fractions are simulated");

    let opts = HierarchicalOptions {
        y_direction: c.y_direction,
        x_direction: c.x_direction,
        shard_align: align,
    };
    let schedule = hierarchical_schedule(&mesh, c.stride, &vec![n; c.stride], c.elem_type, opts)
        .map_err(|e| CliError::at("collective", e))?;
    let mut phases = Grid::new([
        "kind",
        "ring_length",
        "rings",
        "steps",
        "direction",
        "payload_elems",
        "bytes_per_device",
    ])
    .titled("schedule");
    for r in schedule.records() {
        phases.push([
            format!("{:?}", r.kind),
            r.ring_length.to_string(),
            r.rings.to_string(),
            r.steps.to_string(),
            format!("{:?}", r.direction).to_lowercase(),
            r.payload_elems.to_string(),
            r.bytes_per_device.to_string(),
        ]);
    }
    let mut grids = vec![summary, phases];

    if let Some(t) = &scenario.tables {
        let placement = place_tables(&t.table, t.devices, t.capacity_bytes, t.threshold_bytes)
            .map_err(|e| CliError::at("tables", e))?;
        let mut g = Grid::new(["table", "decision", "parts", "max_device_bytes"]).titled("table placement");
        for (i, d) in placement.decisions.iter().enumerate() {
            let (name, parts) = match d {
                Decision::Replicate => ("replicate", t.devices),
                Decision::Partition(rows) => ("partition", rows.iter().filter(|&&r| r > 0).count()),
            };
            let max = placement.device_bytes(&t.table, i).into_iter().max().unwrap_or(0);
            g.push([i.to_string(), name.into(), parts.to_string(), max.to_string()]);
        }
        g.note(format!(
            "peak device bytes {} of {} (threshold {})",
            placement.peak_bytes(),
            placement.capacity,
            placement.threshold
        ));
        grids.push(g);
    }
    Ok((grids, true))
}
