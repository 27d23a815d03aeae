//! Alpha-beta cost simulation of collective schedules and the
//! compute/all-reduce step breakdown.
//!
//! Phases run as synchronous bulk steps: a phase of `s` steps costs
//! `s · (alpha + bytes_per_step · beta · hops)`, where alpha and beta are
//! the worst over the link classes the phase's rings traverse and `hops` is
//! the longest route between consecutive ring members. Phases never
//! overlap each other or compute.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::collectives::{hierarchical_schedule, CollectiveSchedule, Direction, ElemType, HierarchicalOptions, PhaseKind};
use crate::error::{Error, Result};
use crate::topology::{Coord, DeviceMesh, LinkClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCost {
    /// Seconds per message.
    pub alpha: f64,
    /// Seconds per byte.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCostModel {
    pub within_pod: LinkCost,
    pub cross_pod: LinkCost,
    pub torus_wrap: LinkCost,
}

impl LinkCostModel {
    pub fn uniform(alpha: f64, beta: f64) -> Self {
        let c = LinkCost { alpha, beta };
        Self {
            within_pod: c,
            cross_pod: c,
            torus_wrap: c,
        }
    }

    pub fn get(&self, class: LinkClass) -> LinkCost {
        match class {
            LinkClass::WithinPod => self.within_pod,
            LinkClass::CrossPod => self.cross_pod,
            LinkClass::TorusWrap => self.torus_wrap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [
            ("within_pod", self.within_pod),
            ("cross_pod", self.cross_pod),
            ("torus_wrap", self.torus_wrap),
        ] {
            if !(c.alpha >= 0.0 && c.beta >= 0.0 && c.alpha.is_finite() && c.beta.is_finite()) {
                return Err(Error::InvalidCost(format!("{name}: alpha and beta must be finite and >= 0")));
            }
        }
        if self.cross_pod.alpha < self.within_pod.alpha {
            return Err(Error::InvalidCost("cross_pod alpha must be >= within_pod alpha".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub kind: PhaseKind,
    pub steps: usize,
    pub hops: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bytes_per_step: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub seconds: f64,
    pub phases: Vec<PhaseTiming>,
}

/// Route between two collinear devices: number of links and the classes
/// crossed. Uses the wrap link when the axis is a torus and that is
/// shorter.
fn route(mesh: &DeviceMesh, a: Coord, b: Coord) -> Result<(usize, Vec<LinkClass>)> {
    let walk = |from: Coord, step: &dyn Fn(Coord) -> Coord, n: usize| {
        let mut classes = Vec::with_capacity(n);
        let mut cur = from;
        for _ in 0..n {
            let next = step(cur);
            classes.push(mesh.link_class(cur, next).expect("adjacent along route"));
            cur = next;
        }
        classes
    };
    let (xs, ys) = (mesh.x_size(), mesh.y_size());
    if a == b {
        return Ok((0, Vec::new()));
    }
    if a.x == b.x {
        let fwd = (b.y + ys - a.y) % ys;
        let back = ys - fwd;
        let direct = a.y.abs_diff(b.y);
        if mesh.y_torus() && fwd.min(back) < direct {
            return Ok(if fwd <= back {
                (fwd, walk(a, &|c| Coord::new(c.x, (c.y + 1) % ys), fwd))
            } else {
                (back, walk(a, &|c| Coord::new(c.x, (c.y + ys - 1) % ys), back))
            });
        }
        let step: &dyn Fn(Coord) -> Coord = if b.y > a.y {
            &|c| Coord::new(c.x, c.y + 1)
        } else {
            &|c| Coord::new(c.x, c.y - 1)
        };
        return Ok((direct, walk(a, step, direct)));
    }
    if a.y == b.y {
        let fwd = (b.x + xs - a.x) % xs;
        let back = xs - fwd;
        let direct = a.x.abs_diff(b.x);
        if mesh.x_torus() && fwd.min(back) < direct {
            return Ok(if fwd <= back {
                (fwd, walk(a, &|c| Coord::new((c.x + 1) % xs, c.y), fwd))
            } else {
                (back, walk(a, &|c| Coord::new((c.x + xs - 1) % xs, c.y), back))
            });
        }
        let step: &dyn Fn(Coord) -> Coord = if b.x > a.x {
            &|c| Coord::new(c.x + 1, c.y)
        } else {
            &|c| Coord::new(c.x - 1, c.y)
        };
        return Ok((direct, walk(a, step, direct)));
    }
    Err(Error::NotCollinear(a, b))
}

/// Whether the ring closes through a wrap link (a cycle) or is an open
/// line whose return traffic rides the reverse links.
fn closes(mesh: &DeviceMesh, ring: &[Coord]) -> bool {
    if ring.len() < 2 {
        return false;
    }
    let (first, last) = (ring[0], ring[ring.len() - 1]);
    if ring.len() == 2 {
        return true;
    }
    if first.x == last.x {
        mesh.y_torus() && first.y == 0 && last.y == mesh.y_size() - 1
    } else {
        mesh.x_torus() && first.x == 0 && last.x == mesh.x_size() - 1
    }
}

/// Worst alpha, worst beta and longest hop count over one ring.
fn ring_cost(mesh: &DeviceMesh, ring: &[Coord], cost: &LinkCostModel) -> Result<(f64, f64, usize)> {
    let mut edges: Vec<(Coord, Coord)> = ring.windows(2).map(|w| (w[0], w[1])).collect();
    if closes(mesh, ring) && ring.len() > 2 {
        edges.push((ring[ring.len() - 1], ring[0]));
    }
    let (mut alpha, mut beta, mut hops) = (0.0f64, 0.0f64, 0usize);
    for (a, b) in edges {
        let (n, classes) = route(mesh, a, b)?;
        hops = hops.max(n);
        for class in classes {
            let c = cost.get(class);
            alpha = alpha.max(c.alpha);
            beta = beta.max(c.beta);
        }
    }
    Ok((alpha, beta, hops))
}

/// Makespan of `schedule` on `mesh`, phase by phase.
pub fn simulate_schedule(mesh: &DeviceMesh, schedule: &CollectiveSchedule, cost: &LinkCostModel) -> Result<Timeline> {
    cost.validate()?;
    schedule.check_devices(mesh)?;
    let mut phases = Vec::with_capacity(schedule.phases.len());
    let mut total = 0.0;
    for phase in &schedule.phases {
        let steps = phase.steps();
        let bytes_per_step = phase.bytes_per_step_per_lane();
        let mut worst = PhaseTiming {
            kind: phase.kind,
            steps,
            hops: 0,
            alpha: 0.0,
            beta: 0.0,
            bytes_per_step,
            seconds: 0.0,
        };
        if steps > 0 {
            for ring in &phase.rings {
                let (alpha, beta, hops) = ring_cost(mesh, ring, cost)?;
                let seconds = steps as f64 * (alpha + bytes_per_step * beta * hops as f64);
                if seconds > worst.seconds || worst.hops == 0 {
                    worst = PhaseTiming {
                        kind: phase.kind,
                        steps,
                        hops,
                        alpha,
                        beta,
                        bytes_per_step,
                        seconds,
                    };
                }
            }
        }
        total += worst.seconds;
        phases.push(worst);
    }
    Ok(Timeline { seconds: total, phases })
}

/// Closed-form ring all-reduce time: `2(p-1)·alpha + 2(p-1)·(N/p)·beta`,
/// with the beta term halved for bidirectional rings.
pub fn analytic_ring_time(p: usize, n_bytes: u64, alpha: f64, beta: f64, direction: Direction) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let steps = 2.0 * (p - 1) as f64;
    let per_step = n_bytes as f64 / p as f64 / direction.lanes() as f64;
    steps * alpha + steps * per_step * beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    /// Work per training example.
    pub flops_per_example: f64,
    /// Sustained per-device throughput.
    pub flops_rate: f64,
    /// Seconds per step that do not scale with the device count.
    #[serde(default)]
    pub fixed_overhead: f64,
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.flops_per_example) && ok(self.flops_rate) && ok(self.fixed_overhead)) || self.flops_rate == 0.0 {
            return Err(Error::InvalidArgument("compute model fields must be finite, >= 0, rate > 0".into()));
        }
        Ok(())
    }

    /// Per-device compute seconds for one step of `global_batch` examples
    /// spread over `devices`.
    pub fn step_seconds(&self, global_batch: u64, devices: usize) -> f64 {
        self.flops_per_example * global_batch as f64 / devices as f64 / self.flops_rate + self.fixed_overhead
    }
}

/// Epoch budget needed to converge at a given global batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochTable {
    entries: BTreeMap<u64, u32>,
}

impl EpochTable {
    pub fn new(entries: impl IntoIterator<Item = (u64, u32)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    /// 44 epochs at batch 4096, 88 at batch 65536.
    pub fn resnet50() -> Self {
        Self::new([(4096, 44), (65536, 88)])
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.entries.iter().map(|(&b, &e)| (b, e))
    }

    pub fn epochs_to_train(&self, batch: u64) -> Result<u32> {
        self.entries.get(&batch).copied().ok_or_else(|| Error::UnknownBatch {
            batch,
            known: self.entries.keys().copied().collect(),
        })
    }
}

/// Throughput speedup converted to time-to-train given the epoch budgets.
pub fn end_to_end_speedup(throughput_speedup: f64, base_epochs: u32, epochs: u32) -> f64 {
    throughput_speedup * (base_epochs as f64 / epochs as f64)
}

/// Global batch per chip count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchPlan {
    Fixed(u64),
    PerChips(BTreeMap<usize, u64>),
}

impl BatchPlan {
    pub fn batch_for(&self, chips: usize) -> Result<u64> {
        match self {
            BatchPlan::Fixed(b) => Ok(*b),
            BatchPlan::PerChips(m) => m
                .get(&chips)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no global batch configured for {chips} chips"))),
        }
    }
}

/// Everything a scaling sweep needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingScenario {
    pub pod_x: usize,
    pub pod_y: usize,
    pub payload_elems: usize,
    pub elem_type: ElemType,
    pub stride: usize,
    pub options: HierarchicalOptions,
    pub cost: LinkCostModel,
    pub compute: ComputeModel,
    pub batch: BatchPlan,
    pub epochs: EpochTable,
}

/// Mesh used for `chips` devices: whole pods concatenated along X, or a
/// slice of full Y columns (`min(pod_y, chips)` tall) within one pod.
pub fn mesh_for_chips(chips: usize, pod_x: usize, pod_y: usize) -> Result<DeviceMesh> {
    let pod = pod_x * pod_y;
    if chips == 0 || pod == 0 {
        return Err(Error::UnsupportedChipCount(chips));
    }
    if chips >= pod {
        if !chips.is_multiple_of(pod) {
            return Err(Error::UnsupportedChipCount(chips));
        }
        return DeviceMesh::build_multipod(chips / pod, pod_x, pod_y, true);
    }
    let y = pod_y.min(chips);
    if !chips.is_multiple_of(y) {
        return Err(Error::UnsupportedChipCount(chips));
    }
    DeviceMesh::new(chips / y, y, 1, true, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBreakdown {
    pub chips: usize,
    pub compute_s: f64,
    pub allreduce_s: f64,
    pub step_s: f64,
    pub allreduce_fraction: f64,
    pub e2e_speedup: f64,
    pub global_batch: u64,
    pub epochs: Option<u32>,
}

impl StepBreakdown {
    pub fn new(chips: usize, compute_s: f64, allreduce_s: f64, global_batch: u64, epochs: Option<u32>) -> Self {
        let step_s = compute_s + allreduce_s;
        let allreduce_fraction = if step_s > 0.0 { allreduce_s / step_s } else { 0.0 };
        Self {
            chips,
            compute_s,
            allreduce_s,
            step_s,
            allreduce_fraction,
            e2e_speedup: 1.0,
            global_batch,
            epochs,
        }
    }

    pub fn throughput(&self) -> f64 {
        self.global_batch as f64 / self.step_s
    }
}

/// Fills `e2e_speedup` of every row relative to `base`: throughput ratio
/// scaled by the epoch ratio when both rows carry epoch budgets.
pub fn apply_speedups(rows: &mut [StepBreakdown], base: &StepBreakdown) {
    for r in rows.iter_mut() {
        let throughput = r.throughput() / base.throughput();
        r.e2e_speedup = match (base.epochs, r.epochs) {
            (Some(b), Some(e)) => end_to_end_speedup(throughput, b, e),
            _ => throughput,
        };
    }
}

/// All-reduce seconds of the hierarchical schedule for one chip count.
pub fn allreduce_seconds(scenario: &ScalingScenario, chips: usize) -> Result<f64> {
    let mesh = mesh_for_chips(chips, scenario.pod_x, scenario.pod_y)?;
    if mesh.x_size() % scenario.stride != 0 {
        return Err(Error::UnsupportedChipCount(chips));
    }
    let groups = vec![scenario.payload_elems; scenario.stride];
    let schedule = hierarchical_schedule(&mesh, scenario.stride, &groups, scenario.elem_type, scenario.options)?;
    Ok(simulate_schedule(&mesh, &schedule, &scenario.cost)?.seconds)
}

/// Compute/all-reduce breakdown for each chip count. Speedups are relative
/// to the first entry of `chip_counts`; rows whose batch is missing from
/// the epoch table carry no epoch budget.
pub fn sweep_scaling(scenario: &ScalingScenario, chip_counts: &[usize]) -> Result<Vec<StepBreakdown>> {
    scenario.cost.validate()?;
    scenario.compute.validate()?;
    let mut rows = Vec::with_capacity(chip_counts.len());
    for &chips in chip_counts {
        let batch = scenario.batch.batch_for(chips)?;
        let epochs = scenario.epochs.epochs_to_train(batch).ok();
        let compute = scenario.compute.step_seconds(batch, chips);
        let allreduce = allreduce_seconds(scenario, chips)?;
        rows.push(StepBreakdown::new(chips, compute, allreduce, batch, epochs));
    }
    if let Some(base) = rows.first().cloned() {
        apply_speedups(&mut rows, &base);
    }
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    chips: usize,
    compute_s: f64,
    allreduce_s: f64,
    step_s: f64,
    allreduce_fraction: f64,
    e2e_speedup: f64,
    global_batch: u64,
    epochs: Option<u32>,
}

/// CSV columns: chips, compute_s, allreduce_s, step_s, allreduce_fraction,
/// e2e_speedup, global_batch, epochs.
pub fn write_breakdown_csv<W: io::Write>(rows: &[StepBreakdown], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(CsvRow {
            chips: r.chips,
            compute_s: r.compute_s,
            allreduce_s: r.allreduce_s,
            step_s: r.step_s,
            allreduce_fraction: r.allreduce_fraction,
            e2e_speedup: r.e2e_speedup,
            global_batch: r.global_batch,
            epochs: r.epochs,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_breakdown_csv`]; lines starting with `#`
/// are skipped.
pub fn read_breakdown_csv<R: io::Read>(input: R) -> csv::Result<Vec<StepBreakdown>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input)
        .deserialize::<CsvRow>()
        .map(|r| {
            r.map(|r| StepBreakdown {
                chips: r.chips,
                compute_s: r.compute_s,
                allreduce_s: r.allreduce_s,
                step_s: r.step_s,
                allreduce_fraction: r.allreduce_fraction,
                e2e_speedup: r.e2e_speedup,
                global_batch: r.global_batch,
                epochs: r.epochs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::{all_reduce_schedule, ring_phase, PhaseKind};

    fn column(p: usize) -> (DeviceMesh, Vec<Coord>) {
        let mesh = DeviceMesh::new(1, p, 1, true, false).unwrap();
        let ring = mesh.ring_y(0).unwrap();
        (mesh, ring)
    }

    #[test]
    fn two_device_reduce_scatter() {
        let (mesh, ring) = column(2);
        let mut s = CollectiveSchedule::new();
        // 256 f32 = 1024 bytes
        s.push(ring_phase(PhaseKind::ReduceScatter, &ring, 256, ElemType::F32, Direction::Unidirectional).unwrap());
        let t = simulate_schedule(&mesh, &s, &LinkCostModel::uniform(0.0, 0.5)).unwrap();
        assert_eq!(t.seconds, 0.5 * 1024.0 * 0.5);
    }

    #[test]
    fn empty_schedule_costs_nothing() {
        let (mesh, _) = column(4);
        let t = simulate_schedule(&mesh, &CollectiveSchedule::new(), &LinkCostModel::uniform(1.0, 1.0)).unwrap();
        assert_eq!(t.seconds, 0.0);
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(analytic_ring_time(1, 100, 1.0, 1.0, Direction::Unidirectional), 0.0);
        assert_eq!(analytic_ring_time(4, 4, 0.0, 1.0, Direction::Unidirectional), 6.0);
        assert_eq!(analytic_ring_time(4, 4, 0.0, 1.0, Direction::Bidirectional), 3.0);
    }

    #[test]
    fn matches_analytic_on_a_column() {
        let (mesh, ring) = column(8);
        let s = all_reduce_schedule(&ring, 64, ElemType::F32, Direction::Bidirectional).unwrap();
        let cost = LinkCostModel::uniform(0.125, 0.25);
        let sim = simulate_schedule(&mesh, &s, &cost).unwrap().seconds;
        assert_eq!(sim, analytic_ring_time(8, 256, 0.125, 0.25, Direction::Bidirectional));
    }

    #[test]
    fn seam_ring_is_slower() {
        let mesh = DeviceMesh::build_multipod(2, 2, 1, false).unwrap();
        let within = vec![Coord::new(0, 0), Coord::new(1, 0)];
        let seam = vec![Coord::new(1, 0), Coord::new(2, 0)];
        let mut cost = LinkCostModel::uniform(1.0, 0.01);
        cost.cross_pod.alpha = 2.0;
        let time = |ring: &[Coord]| {
            let s = all_reduce_schedule(ring, 100, ElemType::F32, Direction::Bidirectional).unwrap();
            simulate_schedule(&mesh, &s, &cost).unwrap().seconds
        };
        assert!(time(&seam) > time(&within));
    }

    #[test]
    fn strided_hops_pay_beta_per_link() {
        let mesh = DeviceMesh::new(8, 1, 1, false, false).unwrap();
        let ring = mesh.ring_x_with_stride(0, 4, 0).unwrap();
        let s = all_reduce_schedule(&ring, 8, ElemType::F32, Direction::Unidirectional).unwrap();
        let t = simulate_schedule(&mesh, &s, &LinkCostModel::uniform(1.0, 1.0)).unwrap();
        assert_eq!(t.phases[0].hops, 4);
        // 2 phases · 1 step · (alpha + 16 bytes · 4 hops)
        assert_eq!(t.seconds, 2.0 * (1.0 + 16.0 * 4.0));
    }

    #[test]
    fn out_of_mesh_schedule_is_rejected() {
        let (mesh, _) = column(2);
        let ring = vec![Coord::new(0, 0), Coord::new(0, 5)];
        let s = all_reduce_schedule(&ring, 4, ElemType::F32, Direction::Unidirectional).unwrap();
        assert!(matches!(
            simulate_schedule(&mesh, &s, &LinkCostModel::uniform(0.0, 1.0)),
            Err(Error::OutOfMesh { .. })
        ));
    }

    #[test]
    fn cost_model_validation() {
        let mut c = LinkCostModel::uniform(1.0, 1.0);
        c.cross_pod.alpha = 0.5;
        assert!(c.validate().is_err());
        assert!(LinkCostModel::uniform(-1.0, 0.0).validate().is_err());
    }

    #[test]
    fn epoch_lookup() {
        let t = EpochTable::resnet50();
        assert_eq!(t.epochs_to_train(65536).unwrap(), 88);
        assert_eq!(t.epochs_to_train(4096).unwrap(), 44);
        assert_eq!(
            t.epochs_to_train(8192).unwrap_err(),
            Error::UnknownBatch {
                batch: 8192,
                known: vec![4096, 65536]
            }
        );
        assert_eq!(end_to_end_speedup(10.0, 44, 88), 5.0);
    }

    #[test]
    fn chip_count_meshes() {
        let m = mesh_for_chips(4096, 32, 32).unwrap();
        assert_eq!((m.x_size(), m.y_size(), m.pods()), (128, 32, 4));
        let m = mesh_for_chips(512, 32, 32).unwrap();
        assert_eq!((m.x_size(), m.y_size()), (16, 32));
        let m = mesh_for_chips(16, 32, 32).unwrap();
        assert_eq!((m.x_size(), m.y_size()), (1, 16));
        assert!(mesh_for_chips(1536 + 7, 32, 32).is_err());
        assert!(mesh_for_chips(48 + 1, 32, 32).is_err());
    }

    #[test]
    fn single_chip_has_no_allreduce() {
        let scenario = ScalingScenario {
            pod_x: 4,
            pod_y: 4,
            payload_elems: 1000,
            elem_type: ElemType::F32,
            stride: 1,
            options: HierarchicalOptions::default(),
            cost: LinkCostModel::uniform(1e-6, 1e-9),
            compute: ComputeModel {
                flops_per_example: 1e9,
                flops_rate: 1e12,
                fixed_overhead: 0.0,
            },
            batch: BatchPlan::Fixed(64),
            epochs: EpochTable::default(),
        };
        let rows = sweep_scaling(&scenario, &[1, 4]).unwrap();
        assert_eq!(rows[0].allreduce_fraction, 0.0);
        assert_eq!(rows[0].e2e_speedup, 1.0);
        assert!(rows[1].allreduce_s > 0.0);
    }

    #[test]
    fn breakdown_csv_columns() {
        let rows = vec![StepBreakdown::new(16, 0.75, 0.25, 4096, Some(44))];
        let mut buf = Vec::new();
        write_breakdown_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "chips,compute_s,allreduce_s,step_s,allreduce_fraction,e2e_speedup,global_batch,epochs\n"
        ));
        assert_eq!(read_breakdown_csv(buf.as_slice()).unwrap(), rows);
    }
}
