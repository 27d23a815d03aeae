//! Communication schedules emitted by the collectives and consumed by the
//! cost simulator.
//!
//! A schedule is a totally ordered list of phases. Each phase runs one or
//! more rings concurrently; every ring of a phase has the same length and
//! moves the same per-device volume.

use std::io;

use serde::{Deserialize, Serialize};

use super::bf16::ElemType;
use crate::error::{Error, Result};
use crate::topology::{Coord, DeviceMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    ReduceScatter,
    AllGather,
    Broadcast,
    LocalUpdate,
}

/// A bidirectional ring is two simultaneous unidirectional rings, each
/// carrying half of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Unidirectional,
    #[default]
    Bidirectional,
}

impl Direction {
    pub fn lanes(self) -> usize {
        match self {
            Direction::Unidirectional => 1,
            Direction::Bidirectional => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    /// Rings executing concurrently in this phase.
    pub rings: Vec<Vec<Coord>>,
    pub direction: Direction,
    /// Length (elements, after padding) of the full vector the phase
    /// operates on: the input of a reduce-scatter, the output of a gather.
    pub payload_elems: usize,
    pub elem_type: ElemType,
    /// Total bytes each device sends during the phase.
    pub bytes_per_device: u64,
}

impl Phase {
    /// Ring phase over `rings` of common length `p` with a padded vector of
    /// `payload_elems` (a multiple of `p`).
    pub fn ring(
        kind: PhaseKind,
        rings: Vec<Vec<Coord>>,
        direction: Direction,
        payload_elems: usize,
        elem_type: ElemType,
    ) -> Self {
        let p = rings.first().map_or(1, Vec::len);
        debug_assert!(rings.iter().all(|r| r.len() == p));
        debug_assert_eq!(payload_elems % p.max(1), 0);
        let bytes_per_device = ring_volume(p, payload_elems, elem_type.width());
        Self {
            kind,
            rings,
            direction,
            payload_elems,
            elem_type,
            bytes_per_device,
        }
    }

    pub fn local_update(devices: Vec<Coord>, shard_elems: usize, elem_type: ElemType) -> Self {
        Self {
            kind: PhaseKind::LocalUpdate,
            rings: devices.into_iter().map(|d| vec![d]).collect(),
            direction: Direction::Unidirectional,
            payload_elems: shard_elems,
            elem_type,
            bytes_per_device: 0,
        }
    }

    pub fn ring_len(&self) -> usize {
        self.rings.first().map_or(0, Vec::len)
    }

    /// Number of synchronous ring steps.
    pub fn steps(&self) -> usize {
        match self.kind {
            PhaseKind::LocalUpdate => 0,
            _ => self.ring_len().saturating_sub(1),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.payload_elems * self.elem_type.width()) as u64
    }

    /// Bytes one lane moves per step.
    pub fn bytes_per_step_per_lane(&self) -> f64 {
        match self.steps() {
            0 => 0.0,
            s => self.bytes_per_device as f64 / s as f64 / self.direction.lanes() as f64,
        }
    }

    pub fn record(&self) -> PhaseRecord {
        PhaseRecord {
            kind: self.kind,
            ring_length: self.ring_len(),
            rings: self.rings.len(),
            steps: self.steps(),
            direction: self.direction,
            payload_elems: self.payload_elems,
            bytes_per_device: self.bytes_per_device,
        }
    }
}

/// `(p-1)/p · elems · width` bytes, exact for `elems` divisible by `p`.
pub fn ring_volume(p: usize, elems: usize, width: usize) -> u64 {
    if p <= 1 {
        return 0;
    }
    ((p - 1) * (elems / p) * width) as u64
}

/// Smallest multiple of `multiple` that is at least `n`.
pub fn padded_len(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple.max(1)) * multiple.max(1)
}

/// Flat record of one phase, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub kind: PhaseKind,
    pub ring_length: usize,
    pub rings: usize,
    pub steps: usize,
    pub direction: Direction,
    pub payload_elems: usize,
    pub bytes_per_device: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectiveSchedule {
    pub phases: Vec<Phase>,
}

impl CollectiveSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, phase: Phase) {
        self.phases.push(phase);
    }

    pub fn extend(&mut self, other: CollectiveSchedule) {
        self.phases.extend(other.phases);
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn total_bytes_per_device(&self) -> u64 {
        self.phases.iter().map(|p| p.bytes_per_device).sum()
    }

    pub fn records(&self) -> Vec<PhaseRecord> {
        self.phases.iter().map(Phase::record).collect()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.records() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Every device referenced by the schedule lies in `mesh`.
    pub fn check_devices(&self, mesh: &DeviceMesh) -> Result<()> {
        for phase in &self.phases {
            for d in phase.rings.iter().flatten() {
                mesh.check(*d)?;
            }
        }
        Ok(())
    }
}

/// Schedule of a reduce-scatter (or gather) on one ring without executing
/// it. `elems` is padded up to a multiple of the ring length.
pub fn ring_phase(
    kind: PhaseKind,
    ring: &[Coord],
    elems: usize,
    elem_type: ElemType,
    direction: Direction,
) -> Result<Phase> {
    if ring.is_empty() {
        return Err(Error::Empty);
    }
    Ok(Phase::ring(
        kind,
        vec![ring.to_vec()],
        direction,
        padded_len(elems, ring.len()),
        elem_type,
    ))
}

/// Schedule of a flat ring all-reduce (reduce-scatter then all-gather).
pub fn all_reduce_schedule(
    ring: &[Coord],
    elems: usize,
    elem_type: ElemType,
    direction: Direction,
) -> Result<CollectiveSchedule> {
    let mut s = CollectiveSchedule::new();
    if ring.len() > 1 {
        s.push(ring_phase(PhaseKind::ReduceScatter, ring, elems, elem_type, direction)?);
        s.push(ring_phase(PhaseKind::AllGather, ring, elems, elem_type, direction)?);
    }
    Ok(s)
}
