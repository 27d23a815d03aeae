//! Ring collectives executed numerically on in-memory payloads.
//!
//! Every collective returns its result together with the
//! [`CollectiveSchedule`] that a real fabric would run, so the same call
//! drives both correctness checks and the cost simulator.
//!
//! Reduction order is ascending ring order for every shard. For bf16
//! payloads, local math is f32 and each partial sum is rounded to bf16 when
//! it leaves a device, i.e. after every addition of the ring chain.
//! Payloads whose length is not a multiple of the ring length are
//! zero-padded for the collective and the pad is stripped afterwards.

pub mod bf16;
pub mod schedule;

pub use bf16::{bf16_round, is_bf16_exact, ElemType};
pub use schedule::{
    all_reduce_schedule, padded_len, ring_phase, ring_volume, CollectiveSchedule, Direction, Phase,
    PhaseKind, PhaseRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{Coord, DeviceMesh, Tile};

/// A flat vector of values tagged with its element type. For bf16 payloads
/// every stored value is bf16-representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    values: Vec<f32>,
    elem_type: ElemType,
}

impl Payload {
    /// Wraps `values`, rounding them to `elem_type`.
    pub fn new(mut values: Vec<f32>, elem_type: ElemType) -> Self {
        if elem_type == ElemType::Bf16 {
            values.iter_mut().for_each(|v| *v = bf16_round(*v));
        }
        Self { values, elem_type }
    }

    pub fn f32(values: Vec<f32>) -> Self {
        Self::new(values, ElemType::F32)
    }

    pub fn bf16(values: Vec<f32>) -> Self {
        Self::new(values, ElemType::Bf16)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn elem_type(&self) -> ElemType {
        self.elem_type
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn common_shape(payloads: &[Payload]) -> Result<(usize, ElemType)> {
    let first = payloads.first().ok_or(Error::Empty)?;
    for p in &payloads[1..] {
        if p.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                actual: p.len(),
            });
        }
        if p.elem_type != first.elem_type {
            return Err(Error::ElemTypeMismatch);
        }
    }
    Ok((first.len(), first.elem_type))
}

fn check_ring(ring: &[Coord], participants: usize) -> Result<()> {
    if ring.is_empty() {
        return Err(Error::Empty);
    }
    if ring.len() != participants {
        return Err(Error::LengthMismatch {
            expected: ring.len(),
            actual: participants,
        });
    }
    Ok(())
}

/// Sum of `inputs[..][range]` folded in input order, rounding every partial
/// sum to `elem_type`.
fn fold_range(inputs: &[&[f32]], lo: usize, hi: usize, elem_type: ElemType) -> Vec<f32> {
    let mut acc = inputs[0][lo..hi].to_vec();
    for input in &inputs[1..] {
        for (a, &v) in acc.iter_mut().zip(&input[lo..hi]) {
            *a = elem_type.round(*a + v);
        }
    }
    acc
}

/// Reduce-scatter of equal-length padded vectors: shard `i` of the sum for
/// each ring position `i`.
fn reduce_scatter_core(inputs: &[&[f32]], elem_type: ElemType) -> Vec<Vec<f32>> {
    let p = inputs.len();
    let chunk = inputs[0].len() / p;
    (0..p)
        .map(|i| fold_range(inputs, i * chunk, (i + 1) * chunk, elem_type))
        .collect()
}

fn pad_to(values: &[f32], len: usize) -> Vec<f32> {
    let mut v = Vec::with_capacity(len);
    v.extend_from_slice(values);
    v.resize(len, 0.0);
    v
}

/// Output of [`ring_reduce_scatter`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceScatterOutput {
    /// Shard held by each ring position, each `padded_len / p` long.
    pub shards: Vec<Payload>,
    /// Payload length before padding.
    pub original_len: usize,
    pub padded_len: usize,
    pub schedule: CollectiveSchedule,
}

/// Ring reduce-scatter: ring position `i` ends with shard `i` of the
/// elementwise sum of all payloads.
pub fn ring_reduce_scatter(
    ring: &[Coord],
    payloads: &[Payload],
    direction: Direction,
) -> Result<ReduceScatterOutput> {
    check_ring(ring, payloads.len())?;
    let (n, elem_type) = common_shape(payloads)?;
    let p = ring.len();
    let padded = padded_len(n, p);
    let padded_inputs: Vec<Vec<f32>> = payloads.iter().map(|pl| pad_to(&pl.values, padded)).collect();
    let views: Vec<&[f32]> = padded_inputs.iter().map(Vec::as_slice).collect();
    let shards = reduce_scatter_core(&views, elem_type)
        .into_iter()
        .map(|values| Payload { values, elem_type })
        .collect();
    let mut schedule = CollectiveSchedule::new();
    if p > 1 {
        schedule.push(Phase::ring(PhaseKind::ReduceScatter, vec![ring.to_vec()], direction, padded, elem_type));
    }
    Ok(ReduceScatterOutput {
        shards,
        original_len: n,
        padded_len: padded,
        schedule,
    })
}

/// Ring all-gather: every ring position ends with the concatenation of all
/// shards in ring order.
pub fn ring_all_gather(
    ring: &[Coord],
    shards: &[Payload],
    direction: Direction,
) -> Result<(Vec<Payload>, CollectiveSchedule)> {
    check_ring(ring, shards.len())?;
    let (chunk, elem_type) = common_shape(shards)?;
    let p = ring.len();
    let full: Vec<f32> = shards.iter().flat_map(|s| s.values.iter().copied()).collect();
    let mut schedule = CollectiveSchedule::new();
    if p > 1 {
        schedule.push(Phase::ring(PhaseKind::AllGather, vec![ring.to_vec()], direction, chunk * p, elem_type));
    }
    let out = (0..p)
        .map(|_| Payload {
            values: full.clone(),
            elem_type,
        })
        .collect();
    Ok((out, schedule))
}

/// Output of the all-reduce style collectives: one result per participant.
#[derive(Debug, Clone, PartialEq)]
pub struct AllReduceOutput {
    pub values: Vec<Payload>,
    pub schedule: CollectiveSchedule,
}

/// Ring all-reduce as reduce-scatter followed by all-gather.
pub fn all_reduce(ring: &[Coord], payloads: &[Payload], direction: Direction) -> Result<AllReduceOutput> {
    let rs = ring_reduce_scatter(ring, payloads, direction)?;
    let (mut values, ag) = ring_all_gather(ring, &rs.shards, direction)?;
    for v in &mut values {
        v.values.truncate(rs.original_len);
    }
    let mut schedule = rs.schedule;
    schedule.extend(ag);
    Ok(AllReduceOutput { values, schedule })
}

/// Sum over a model-parallel tile along its short X line.
pub fn model_parallel_allreduce(
    tile: &Tile,
    activations: &[Payload],
    direction: Direction,
) -> Result<AllReduceOutput> {
    all_reduce(&tile.devices(), activations, direction)
}

/// Knobs of [`hierarchical_allreduce_2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalOptions {
    pub y_direction: Direction,
    pub x_direction: Direction,
    /// Shard boundaries are padded to multiples of this many elements.
    pub shard_align: usize,
}

impl Default for HierarchicalOptions {
    fn default() -> Self {
        Self {
            y_direction: Direction::Bidirectional,
            x_direction: Direction::Bidirectional,
            shard_align: 1,
        }
    }
}

/// The gradient shard handed to a weight-update hook.
#[derive(Debug)]
pub struct ShardUpdate<'a> {
    /// Data-parallel group, i.e. the model-parallel peer offset.
    pub group: usize,
    /// Offset of `values[0]` in the unpadded vector.
    pub start: usize,
    /// Summed gradients of the shard, padding excluded. The hook
    /// overwrites them with its output.
    pub values: &'a mut [f32],
}

/// Padded length used by the hierarchical all-reduce for a group vector of
/// `n` elements.
pub fn hierarchical_padded_len(mesh: &DeviceMesh, stride: usize, n: usize, shard_align: usize) -> usize {
    let q = mesh.x_size() / stride;
    padded_len(n, mesh.y_size() * q * shard_align.max(1))
}

/// Schedule of [`hierarchical_allreduce_2d`] without executing it.
/// `group_elems[o]` is the vector length of data-parallel group `o`.
pub fn hierarchical_schedule(
    mesh: &DeviceMesh,
    stride: usize,
    group_elems: &[usize],
    elem_type: ElemType,
    opts: HierarchicalOptions,
) -> Result<CollectiveSchedule> {
    mesh.check_stride(stride)?;
    if group_elems.len() != stride {
        return Err(Error::LengthMismatch {
            expected: stride,
            actual: group_elems.len(),
        });
    }
    let y = mesh.y_size();
    let q = mesh.x_size() / stride;
    let padded = group_elems
        .iter()
        .map(|&n| hierarchical_padded_len(mesh, stride, n, opts.shard_align))
        .max()
        .unwrap_or(0);

    let y_rings = (0..mesh.x_size()).map(|x| mesh.ring_y(x)).collect::<Result<Vec<_>>>()?;
    let mut x_rings = Vec::with_capacity(y * stride);
    for yy in 0..y {
        for off in 0..stride {
            x_rings.push(mesh.ring_x_with_stride(yy, stride, off)?);
        }
    }

    let mut s = CollectiveSchedule::new();
    if y > 1 {
        s.push(Phase::ring(PhaseKind::ReduceScatter, y_rings.clone(), opts.y_direction, padded, elem_type));
    }
    if q > 1 {
        s.push(Phase::ring(PhaseKind::ReduceScatter, x_rings.clone(), opts.x_direction, padded / y, elem_type));
    }
    s.push(Phase::local_update(mesh.devices().collect(), padded / (y * q), elem_type));
    if q > 1 {
        s.push(Phase::ring(PhaseKind::Broadcast, x_rings, opts.x_direction, padded / y, elem_type));
    }
    if y > 1 {
        s.push(Phase::ring(PhaseKind::Broadcast, y_rings, opts.y_direction, padded, elem_type));
    }
    Ok(s)
}

/// Hierarchical 2D all-reduce without a weight-update step.
pub fn hierarchical_allreduce_2d(
    mesh: &DeviceMesh,
    stride: usize,
    grads: &[Payload],
    opts: HierarchicalOptions,
) -> Result<AllReduceOutput> {
    hierarchical_allreduce_2d_with_update(mesh, stride, grads, opts, |_| Ok(()))
}

/// Topology-aware all-reduce on a Y-torus mesh with a weight-update hook.
///
/// `grads` is indexed by [`DeviceMesh::linear_index`]. Devices whose X
/// coordinate is congruent modulo `stride` form one data-parallel group
/// (model-parallel peer). Per device the phases are:
///
/// 1. reduce-scatter along its Y ring,
/// 2. reduce-scatter along its strided X group,
/// 3. `update` applied to the resulting gradient shard,
/// 4. all-gather (broadcast) along X,
/// 5. all-gather (broadcast) along Y.
///
/// Every device of group `o` ends with `update(sum of group o's
/// gradients)`, summed as `Σ_x (Σ_y g(x, y))` in ascending order.
pub fn hierarchical_allreduce_2d_with_update<F>(
    mesh: &DeviceMesh,
    stride: usize,
    grads: &[Payload],
    opts: HierarchicalOptions,
    mut update: F,
) -> Result<AllReduceOutput>
where
    F: FnMut(ShardUpdate<'_>) -> Result<()>,
{
    mesh.check_stride(stride)?;
    if grads.len() != mesh.num_devices() {
        return Err(Error::LengthMismatch {
            expected: mesh.num_devices(),
            actual: grads.len(),
        });
    }
    let y_size = mesh.y_size();
    let q = mesh.x_size() / stride;
    let at = |x: usize, y: usize| &grads[mesh.linear_index(Coord::new(x, y))];

    let mut group_elems = Vec::with_capacity(stride);
    let mut group_results = Vec::with_capacity(stride);
    for off in 0..stride {
        let members: Vec<Payload> = (0..q)
            .flat_map(|k| (0..y_size).map(move |y| (off + k * stride, y)))
            .map(|(x, y)| at(x, y).clone())
            .collect();
        let (n, elem_type) = common_shape(&members)?;
        group_elems.push(n);
        let padded = hierarchical_padded_len(mesh, stride, n, opts.shard_align);
        let chunk_y = padded / y_size;
        let chunk = chunk_y / q;

        // Phase 1: reduce-scatter down each Y column of the group.
        let column_shards: Vec<Vec<Vec<f32>>> = (0..q)
            .map(|k| {
                let col: Vec<Vec<f32>> = (0..y_size)
                    .map(|y| pad_to(&at(off + k * stride, y).values, padded))
                    .collect();
                let views: Vec<&[f32]> = col.iter().map(Vec::as_slice).collect();
                reduce_scatter_core(&views, elem_type)
            })
            .collect();

        let mut y_shards = Vec::with_capacity(y_size);
        for y in 0..y_size {
            // Phase 2: reduce-scatter along the strided X group on row y.
            let views: Vec<&[f32]> = column_shards.iter().map(|c| c[y].as_slice()).collect();
            let mut sub = reduce_scatter_core(&views, elem_type);

            // Phase 3: weight update on each device's shard.
            for (k, shard) in sub.iter_mut().enumerate() {
                let start = y * chunk_y + k * chunk;
                let valid = n.saturating_sub(start).min(chunk);
                if valid > 0 {
                    update(ShardUpdate {
                        group: off,
                        start,
                        values: &mut shard[..valid],
                    })?;
                }
                shard[valid..].iter_mut().for_each(|v| *v = 0.0);
                if elem_type == ElemType::Bf16 {
                    shard.iter_mut().for_each(|v| *v = bf16_round(*v));
                }
            }

            // Phase 4: all-gather along X restores the row's Y shard.
            y_shards.push(sub.concat());
        }

        // Phase 5: all-gather along Y restores the full vector.
        let mut full = y_shards.concat();
        full.truncate(n);
        group_results.push(Payload { values: full, elem_type });
    }

    let elem_type = grads[0].elem_type;
    let schedule = hierarchical_schedule(mesh, stride, &group_elems, elem_type, opts)?;
    let values = mesh
        .devices()
        .map(|d| group_results[d.x % stride].clone())
        .collect();
    Ok(AllReduceOutput { values, schedule })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(p: usize) -> Vec<Coord> {
        (0..p).map(|y| Coord::new(0, y)).collect()
    }

    #[test]
    fn reduce_scatter_of_identical_replicas() {
        let payloads = vec![Payload::f32(vec![1.0, 2.0, 3.0, 4.0]); 4];
        let out = ring_reduce_scatter(&line(4), &payloads, Direction::Unidirectional).unwrap();
        let shards: Vec<Vec<f32>> = out.shards.iter().map(|s| s.values().to_vec()).collect();
        assert_eq!(shards, vec![vec![4.0], vec![8.0], vec![12.0], vec![16.0]]);
        assert_eq!(out.schedule.phases[0].steps(), 3);
        assert_eq!(out.schedule.total_bytes_per_device(), 3 * 4);
    }

    #[test]
    fn reduce_scatter_single_device_is_identity() {
        let out = ring_reduce_scatter(&line(1), &[Payload::f32(vec![1.0, 2.0])], Direction::Unidirectional)
            .unwrap();
        assert_eq!(out.shards[0].values(), &[1.0, 2.0]);
        assert!(out.schedule.is_empty());
    }

    #[test]
    fn reduce_scatter_of_basis_vectors() {
        let payloads = vec![
            Payload::f32(vec![1.0, 0.0, 0.0]),
            Payload::f32(vec![0.0, 1.0, 0.0]),
            Payload::f32(vec![0.0, 0.0, 1.0]),
        ];
        let out = ring_reduce_scatter(&line(3), &payloads, Direction::Bidirectional).unwrap();
        assert!(out.shards.iter().all(|s| s.values() == [1.0]));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let payloads = vec![Payload::f32(vec![1.0]), Payload::f32(vec![1.0, 2.0])];
        assert_eq!(
            ring_reduce_scatter(&line(2), &payloads, Direction::Bidirectional).unwrap_err(),
            Error::LengthMismatch { expected: 1, actual: 2 }
        );
        assert!(ring_all_gather(&line(2), &payloads, Direction::Bidirectional).is_err());
        let mixed = vec![Payload::f32(vec![1.0]), Payload::bf16(vec![1.0])];
        assert_eq!(
            all_reduce(&line(2), &mixed, Direction::Bidirectional).unwrap_err(),
            Error::ElemTypeMismatch
        );
    }

    #[test]
    fn all_gather_concatenates_in_ring_order() {
        let (out, sched) = ring_all_gather(
            &line(2),
            &[Payload::f32(vec![1.0]), Payload::f32(vec![2.0])],
            Direction::Unidirectional,
        )
        .unwrap();
        assert!(out.iter().all(|p| p.values() == [1.0, 2.0]));
        assert_eq!(sched.total_bytes_per_device(), 4);
        let (single, sched) = ring_all_gather(&line(1), &[Payload::f32(vec![5.0])], Direction::Unidirectional)
            .unwrap();
        assert_eq!(single[0].values(), &[5.0]);
        assert!(sched.is_empty());
    }

    #[test]
    fn all_reduce_small_cases() {
        let out = all_reduce(&line(4), &vec![Payload::f32(vec![1.5]); 4], Direction::Bidirectional).unwrap();
        assert!(out.values.iter().all(|p| p.values() == [6.0]));
        assert_eq!(out.values[0].len(), 1);

        let out = all_reduce(
            &line(2),
            &[Payload::bf16(vec![128.0]), Payload::bf16(vec![0.25])],
            Direction::Bidirectional,
        )
        .unwrap();
        assert!(out.values.iter().all(|p| p.values() == [128.0]));
    }

    #[test]
    fn padding_is_stripped() {
        let payloads: Vec<Payload> = (0..3).map(|i| Payload::f32(vec![i as f32; 7])).collect();
        let out = all_reduce(&line(3), &payloads, Direction::Unidirectional).unwrap();
        assert!(out.values.iter().all(|p| p.values() == [3.0; 7]));
        // padded to 9: 2 · 2/3 · 9 · 4 bytes
        assert_eq!(out.schedule.total_bytes_per_device(), 48);
    }

    #[test]
    fn model_parallel_tile() {
        let tile = Tile::new(Coord::new(4, 1), 2);
        let out = model_parallel_allreduce(
            &tile,
            &[Payload::f32(vec![1.0, 2.0]), Payload::f32(vec![3.0, 4.0])],
            Direction::Bidirectional,
        )
        .unwrap();
        assert!(out.values.iter().all(|p| p.values() == [4.0, 6.0]));
        assert_eq!(out.schedule.phases[0].rings[0], tile.devices());

        let one = Tile::new(Coord::new(0, 0), 1);
        let out = model_parallel_allreduce(&one, &[Payload::f32(vec![7.0])], Direction::Bidirectional).unwrap();
        assert_eq!(out.values[0].values(), &[7.0]);
    }

    #[test]
    fn hierarchical_identical_payloads() {
        let mesh = DeviceMesh::new(4, 4, 1, true, false).unwrap();
        let v = vec![1.0, -2.0, 0.5];
        let grads = vec![Payload::f32(v.clone()); 16];
        let doubled = |u: ShardUpdate<'_>| {
            u.values.iter_mut().for_each(|x| *x *= 2.0);
            Ok(())
        };
        let out = hierarchical_allreduce_2d_with_update(&mesh, 1, &grads, HierarchicalOptions::default(), doubled)
            .unwrap();
        let want: Vec<f32> = v.iter().map(|x| 2.0 * 16.0 * x).collect();
        assert!(out.values.iter().all(|p| p.values() == want.as_slice()));
        let kinds: Vec<PhaseKind> = out.schedule.phases.iter().map(|p| p.kind).collect();
        assert_eq!(
            kinds,
            vec![
                PhaseKind::ReduceScatter,
                PhaseKind::ReduceScatter,
                PhaseKind::LocalUpdate,
                PhaseKind::Broadcast,
                PhaseKind::Broadcast
            ]
        );
    }

    #[test]
    fn hierarchical_single_device() {
        let mesh = DeviceMesh::build_multipod(1, 1, 1, false).unwrap();
        let grads = vec![Payload::f32(vec![3.0, 4.0])];
        let out = hierarchical_allreduce_2d_with_update(&mesh, 1, &grads, HierarchicalOptions::default(), |u| {
            u.values.iter_mut().for_each(|x| *x += 1.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.values[0].values(), &[4.0, 5.0]);
        assert_eq!(out.schedule.phases.len(), 1);
        assert_eq!(out.schedule.phases[0].kind, PhaseKind::LocalUpdate);
    }

    #[test]
    fn hierarchical_rejects_bad_stride() {
        let mesh = DeviceMesh::new(4, 4, 1, true, false).unwrap();
        let grads = vec![Payload::f32(vec![1.0]); 16];
        assert!(matches!(
            hierarchical_allreduce_2d(&mesh, 3, &grads, HierarchicalOptions::default()),
            Err(Error::StrideMismatch { .. })
        ));
    }

    #[test]
    fn x_phase_payload_is_y_payload_over_y_size() {
        let mesh = DeviceMesh::build_multipod(4, 32, 32, true).unwrap();
        let s = hierarchical_schedule(&mesh, 1, &[1 << 20], ElemType::Bf16, HierarchicalOptions::default())
            .unwrap();
        let (p1, p2) = (&s.phases[0], &s.phases[1]);
        assert_eq!(p1.payload_bytes(), 32 * p2.payload_bytes());
        assert_eq!(p1.rings.len(), 128);
        assert_eq!(p2.rings.len(), 32);
        assert_eq!(p2.ring_len(), 128);
    }

    #[test]
    fn update_sees_each_valid_element_once() {
        let mesh = DeviceMesh::new(4, 2, 1, true, false).unwrap();
        let n = 13;
        let grads = vec![Payload::f32(vec![1.0; n]); 8];
        let mut seen = vec![0usize; n];
        hierarchical_allreduce_2d_with_update(&mesh, 2, &grads, HierarchicalOptions::default(), |u| {
            for i in 0..u.values.len() {
                seen[u.start + i] += 1;
            }
            Ok(())
        })
        .unwrap();
        // two groups, each covering the vector once
        assert!(seen.iter().all(|&c| c == 2));
    }
}
