//! Weight-update sharding and embedding-table placement.
//!
//! [`sharded_update`] runs the optimizer inside the hierarchical all-reduce:
//! each device updates only the shard of summed gradients it holds after
//! the reduce-scatters, and the broadcasts distribute updated weights.
//! [`replicated_update`] is the reference that sums everything and updates
//! the full vector; both sum in the same order, so they agree bit for bit.

use std::io;

use serde::{Deserialize, Serialize};

use crate::collectives::{
    hierarchical_allreduce_2d_with_update, hierarchical_padded_len, CollectiveSchedule, HierarchicalOptions,
    Payload, ShardUpdate,
};
use crate::error::{Error, Result};
use crate::topology::{Coord, DeviceMesh};

/// Scope of the norms in the trust-ratio step of [`OptimizerSpec::LambLike`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSpan {
    /// One norm per row of `row_len` elements.
    #[default]
    Row,
    /// One norm over the whole vector.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f32,
    },
    Momentum {
        lr: f32,
        momentum: f32,
    },
    LambLike {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        #[serde(default)]
        weight_decay: f32,
        /// Elements per weight tensor row; trust ratios never span rows.
        row_len: usize,
        #[serde(default)]
        norm_span: NormSpan,
    },
}

impl OptimizerSpec {
    /// Alignment that keeps every norm group inside a single shard.
    pub fn shard_align(&self) -> usize {
        match *self {
            OptimizerSpec::LambLike { row_len, .. } => row_len.max(1),
            _ => 1,
        }
    }

    fn check(&self) -> Result<()> {
        if let OptimizerSpec::LambLike { row_len: 0, .. } = self {
            return Err(Error::InvalidArgument("row_len must be positive".into()));
        }
        Ok(())
    }

    /// Whether the update of a shard can be computed from that shard alone
    /// when the vector is split into `shards` pieces.
    pub fn is_shard_local(&self, shards: usize) -> bool {
        !matches!(
            self,
            OptimizerSpec::LambLike {
                norm_span: NormSpan::Global,
                ..
            }
        ) || shards <= 1
    }
}

/// Per-weight optimizer state of one replica group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u32,
    /// Momentum buffer or first moment.
    pub m: Vec<f32>,
    /// Second moment.
    pub v: Vec<f32>,
}

impl OptimizerState {
    pub fn new(opt: &OptimizerSpec, n: usize) -> Self {
        match opt {
            OptimizerSpec::Sgd { .. } => Self::default(),
            OptimizerSpec::Momentum { .. } => Self {
                step: 0,
                m: vec![0.0; n],
                v: Vec::new(),
            },
            OptimizerSpec::LambLike { .. } => Self {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    fn check(&self, opt: &OptimizerSpec, n: usize) -> Result<()> {
        let (m, v) = match opt {
            OptimizerSpec::Sgd { .. } => (0, 0),
            OptimizerSpec::Momentum { .. } => (n, 0),
            OptimizerSpec::LambLike { .. } => (n, n),
        };
        for (want, got) in [(m, self.m.len()), (v, self.v.len())] {
            if want != got {
                return Err(Error::LengthMismatch {
                    expected: want,
                    actual: got,
                });
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to `w[start..start + g.len()]` given summed
/// gradients `g`, writing the new weights into `out`. `step` is the
/// 1-based step number.
fn update_range(
    opt: &OptimizerSpec,
    step: u32,
    w: &[f32],
    g: &[f32],
    out: &mut [f32],
    state: &mut OptimizerState,
    start: usize,
) {
    let end = start + g.len();
    match *opt {
        OptimizerSpec::Sgd { lr } => {
            for i in 0..g.len() {
                out[i] = w[start + i] - lr * g[i];
            }
        }
        OptimizerSpec::Momentum { lr, momentum } => {
            let m = &mut state.m[start..end];
            for i in 0..g.len() {
                m[i] = momentum * m[i] + g[i];
                out[i] = w[start + i] - lr * m[i];
            }
        }
        OptimizerSpec::LambLike {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            row_len,
            norm_span,
        } => {
            let c1 = 1.0 - beta1.powi(step as i32);
            let c2 = 1.0 - beta2.powi(step as i32);
            let mut u = vec![0.0f32; g.len()];
            for i in 0..g.len() {
                let m = &mut state.m[start + i];
                let v = &mut state.v[start + i];
                *m = beta1 * *m + (1.0 - beta1) * g[i];
                *v = beta2 * *v + (1.0 - beta2) * g[i] * g[i];
                u[i] = (*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * w[start + i];
            }
            let group = match norm_span {
                NormSpan::Row => row_len,
                NormSpan::Global => g.len().max(1),
            };
            let mut lo = 0;
            while lo < g.len() {
                let hi = (lo + group).min(g.len());
                let wn = w[start + lo..start + hi].iter().map(|x| x * x).sum::<f32>().sqrt();
                let un = u[lo..hi].iter().map(|x| x * x).sum::<f32>().sqrt();
                let trust = if wn > 0.0 && un > 0.0 { wn / un } else { 1.0 };
                for i in lo..hi {
                    out[i] = w[start + i] - lr * trust * u[i];
                }
                lo = hi;
            }
        }
    }
}

/// Reference update. `grads_per_replica` lists one gradient vector per
/// replica, column by column: consecutive runs of `column_len` replicas
/// are summed first, then the column sums are added in order.
pub fn replicated_update(
    weights: &[f32],
    grads_per_replica: &[Vec<f32>],
    column_len: usize,
    opt: &OptimizerSpec,
    state: &mut OptimizerState,
) -> Result<Vec<f32>> {
    opt.check()?;
    let n = weights.len();
    state.check(opt, n)?;
    if grads_per_replica.is_empty() || column_len == 0 {
        return Err(Error::Empty);
    }
    if !grads_per_replica.len().is_multiple_of(column_len) {
        return Err(Error::Shape(format!(
            "{} replicas do not form columns of {column_len}",
            grads_per_replica.len()
        )));
    }
    for g in grads_per_replica {
        if g.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: g.len(),
            });
        }
    }
    let mut sum: Option<Vec<f32>> = None;
    for column in grads_per_replica.chunks(column_len) {
        let mut col = column[0].clone();
        for g in &column[1..] {
            col.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        match sum.as_mut() {
            None => sum = Some(col),
            Some(s) => s.iter_mut().zip(&col).for_each(|(a, b)| *a += b),
        }
    }
    let sum = sum.expect("at least one column");
    state.step += 1;
    let mut out = vec![0.0; n];
    update_range(opt, state.step, weights, &sum, &mut out, state, 0);
    Ok(out)
}

/// Range of the weight vector one device updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShardRange {
    pub device: Coord,
    pub group: usize,
    pub start: usize,
    /// Unpadded elements owned; zero for shards made entirely of padding.
    pub len: usize,
    /// Padded shard size.
    pub padded_len: usize,
}

/// Which device updates which slice of each group's weight vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightUpdateShardingPlan {
    pub stride: usize,
    pub weight_len: usize,
    pub padded_len: usize,
    pub shards: Vec<ShardRange>,
}

impl WeightUpdateShardingPlan {
    pub fn new(mesh: &DeviceMesh, stride: usize, weight_len: usize, shard_align: usize) -> Result<Self> {
        mesh.check_stride(stride)?;
        let y_size = mesh.y_size();
        let q = mesh.x_size() / stride;
        let padded = hierarchical_padded_len(mesh, stride, weight_len, shard_align);
        let chunk_y = padded / y_size;
        let chunk = chunk_y / q;
        let mut shards = Vec::with_capacity(mesh.num_devices());
        for d in mesh.devices() {
            let start = d.y * chunk_y + (d.x / stride) * chunk;
            shards.push(ShardRange {
                device: d,
                group: d.x % stride,
                start,
                len: weight_len.saturating_sub(start).min(chunk),
                padded_len: chunk,
            });
        }
        Ok(Self {
            stride,
            weight_len,
            padded_len: padded,
            shards,
        })
    }

    pub fn shards_per_group(&self) -> usize {
        self.shards.len() / self.stride
    }

    pub fn group(&self, group: usize) -> impl Iterator<Item = &ShardRange> {
        self.shards.iter().filter(move |s| s.group == group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedUpdateOutput {
    /// New weights per device, indexed by [`DeviceMesh::linear_index`].
    pub weights: Vec<Vec<f32>>,
    pub plan: WeightUpdateShardingPlan,
    pub schedule: CollectiveSchedule,
}

/// Weight-update sharding on `mesh`. `weights[o]` and `states[o]` belong to
/// data-parallel group `o` (devices with `x % stride == o`); `grads` holds
/// one vector per device in linear-index order. All groups share one
/// weight length.
pub fn sharded_update(
    mesh: &DeviceMesh,
    stride: usize,
    weights: &[Vec<f32>],
    grads: &[Vec<f32>],
    opt: &OptimizerSpec,
    states: &mut [OptimizerState],
) -> Result<ShardedUpdateOutput> {
    opt.check()?;
    mesh.check_stride(stride)?;
    if weights.len() != stride || states.len() != stride {
        return Err(Error::LengthMismatch {
            expected: stride,
            actual: if weights.len() != stride { weights.len() } else { states.len() },
        });
    }
    let n = weights[0].len();
    for (w, s) in weights.iter().zip(states.iter()) {
        if w.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: w.len(),
            });
        }
        s.check(opt, n)?;
    }
    let plan = WeightUpdateShardingPlan::new(mesh, stride, n, opt.shard_align())?;
    if !opt.is_shard_local(plan.shards_per_group()) {
        return Err(Error::NotShardLocal(
            "trust-ratio norm spans the whole vector but the update is split into shards".into(),
        ));
    }
    let payloads: Vec<Payload> = grads.iter().map(|g| Payload::f32(g.clone())).collect();
    for s in states.iter_mut() {
        s.step += 1;
    }
    let opts = HierarchicalOptions {
        shard_align: opt.shard_align(),
        ..HierarchicalOptions::default()
    };
    let out = hierarchical_allreduce_2d_with_update(mesh, stride, &payloads, opts, |shard: ShardUpdate<'_>| {
        let g = shard.values.to_vec();
        let state = &mut states[shard.group];
        update_range(opt, state.step, &weights[shard.group], &g, shard.values, state, shard.start);
        Ok(())
    })?;
    Ok(ShardedUpdateOutput {
        weights: out.values.into_iter().map(Payload::into_values).collect(),
        plan,
        schedule: out.schedule,
    })
}

/// Step-time components for the optimizer cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCosts {
    /// Forward and backward compute seconds.
    pub compute_s: f64,
    pub allreduce_s: f64,
    /// Unsharded weight-update seconds.
    pub optimizer_s: f64,
}

/// Fraction of the step spent in the optimizer when its work is divided
/// over `shards` devices.
pub fn optimizer_cost_fraction(costs: &StepCosts, shards: usize) -> f64 {
    let opt = costs.optimizer_s / shards.max(1) as f64;
    let step = costs.compute_s + costs.allreduce_s + opt;
    if step > 0.0 {
        opt / step
    } else {
        0.0
    }
}

/// Optimizer seconds for `params` weights at `flops_per_param` each.
pub fn optimizer_seconds(params: f64, flops_per_param: f64, flops_rate: f64) -> f64 {
    params * flops_per_param / flops_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub rows: u64,
    pub row_bytes: u64,
}

impl Table {
    pub fn bytes(&self) -> u64 {
        self.rows * self.row_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Decision {
    Replicate,
    /// Rows per device; the number of parts is the count of non-empty
    /// entries.
    Partition(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TablePlacement {
    pub capacity: u64,
    pub threshold: u64,
    /// Decision per table, in input order.
    pub decisions: Vec<Decision>,
    /// Bytes used per device.
    pub ledger: Vec<u64>,
}

/// Row counts per device when `table` (input position `index`) is split
/// over `devices`; the remainder rows start at device `index % devices`.
pub fn partition_rows(table: &Table, index: usize, devices: usize) -> Vec<u64> {
    let d = devices as u64;
    let (base, rem) = (table.rows / d, table.rows % d);
    let mut rows = vec![base; devices];
    for j in 0..rem as usize {
        rows[(index + j) % devices] += 1;
    }
    rows
}

fn fits(ledger: &[u64], add: impl Fn(usize) -> u64, capacity: u64) -> bool {
    ledger.iter().enumerate().all(|(i, &u)| u + add(i) <= capacity)
}

/// Replicates tables up to `threshold` bytes (default `capacity / 16`)
/// when the remaining tables still fit partitioned; partitions the rest
/// row-wise over all devices. Tables are visited largest first, ties by
/// index.
pub fn place_tables(tables: &[Table], devices: usize, capacity: u64, threshold: Option<u64>) -> Result<TablePlacement> {
    if devices == 0 {
        return Err(Error::InvalidArgument("at least one device is required".into()));
    }
    let threshold = threshold.unwrap_or(capacity / 16);
    let mut order: Vec<usize> = (0..tables.len()).collect();
    order.sort_by(|&a, &b| tables[b].bytes().cmp(&tables[a].bytes()).then(a.cmp(&b)));

    let partition_all = |ledger: &mut Vec<u64>, rest: &[usize]| -> std::result::Result<(), usize> {
        for &t in rest {
            let rows = partition_rows(&tables[t], t, devices);
            let rb = tables[t].row_bytes;
            if !fits(ledger, |i| rows[i] * rb, capacity) {
                return Err(t);
            }
            ledger.iter_mut().zip(&rows).for_each(|(u, r)| *u += r * rb);
        }
        Ok(())
    };

    let mut ledger = vec![0u64; devices];
    let mut decisions = vec![Decision::Replicate; tables.len()];
    for (pos, &t) in order.iter().enumerate() {
        let bytes = tables[t].bytes();
        if bytes <= threshold && fits(&ledger, |_| bytes, capacity) {
            let mut trial: Vec<u64> = ledger.iter().map(|u| u + bytes).collect();
            if partition_all(&mut trial, &order[pos + 1..]).is_ok() {
                ledger.iter_mut().for_each(|u| *u += bytes);
                decisions[t] = Decision::Replicate;
                continue;
            }
        }
        let mut trial = ledger.clone();
        if let Err(bad) = partition_all(&mut trial, &[t]) {
            let worst = partition_rows(&tables[bad], bad, devices).into_iter().max().unwrap_or(0);
            return Err(Error::Placement {
                table: bad,
                reason: format!(
                    "{} bytes per device needed with {} already used of {capacity}",
                    worst * tables[bad].row_bytes,
                    ledger.iter().max().copied().unwrap_or(0)
                ),
            });
        }
        ledger = trial;
        decisions[t] = Decision::Partition(partition_rows(&tables[t], t, devices));
    }
    Ok(TablePlacement {
        capacity,
        threshold,
        decisions,
        ledger,
    })
}

#[derive(Debug, Serialize)]
struct PlacementRow<'a> {
    table: usize,
    decision: &'a str,
    parts: usize,
    max_device_bytes: u64,
}

impl TablePlacement {
    pub fn peak_bytes(&self) -> u64 {
        self.ledger.iter().copied().max().unwrap_or(0)
    }

    /// Bytes table `index` occupies on each device.
    pub fn device_bytes(&self, tables: &[Table], index: usize) -> Vec<u64> {
        let t = &tables[index];
        match &self.decisions[index] {
            Decision::Replicate => vec![t.bytes(); self.ledger.len()],
            Decision::Partition(rows) => rows.iter().map(|r| r * t.row_bytes).collect(),
        }
    }

    /// One row per table (`table,decision,parts,max_device_bytes`)
    /// followed by the per-device ledger (`device,bytes,capacity`).
    pub fn write_report<W: io::Write>(&self, tables: &[Table], out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["table", "decision", "parts", "max_device_bytes"])?;
        for (i, d) in self.decisions.iter().enumerate() {
            let (decision, parts) = match d {
                Decision::Replicate => ("replicate", self.ledger.len()),
                Decision::Partition(rows) => ("partition", rows.iter().filter(|&&r| r > 0).count()),
            };
            let max = self.device_bytes(tables, i).into_iter().max().unwrap_or(0);
            w.serialize(PlacementRow {
                table: i,
                decision,
                parts,
                max_device_bytes: max,
            })?;
        }
        w.write_record(["device", "bytes", "capacity"])?;
        for (i, u) in self.ledger.iter().enumerate() {
            w.write_record([i.to_string(), u.to_string(), self.capacity.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
