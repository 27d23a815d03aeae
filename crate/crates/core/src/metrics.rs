//! Distributed evaluation: padded eval layouts, globally summed accuracy,
//! exact ROC AUC, multi-step accumulation and round-robin eval placement.

use std::io;

use rayon::slice::ParallelSliceMut;
use serde::{Deserialize, Serialize};

use crate::collectives::{all_reduce, Direction, Payload};
use crate::error::{Error, Result};
use crate::topology::Coord;

/// Slot layout of an eval set padded to whole steps. Device `d` owns slots
/// `d * slots_per_device ..` in example order, so dummy slots sit at the
/// tail of the highest-index devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedEvalLayout {
    pub n_examples: u64,
    pub n_devices: u64,
    pub per_device_batch: u64,
    pub steps: u64,
}

impl PaddedEvalLayout {
    pub fn total_slots(&self) -> u64 {
        self.steps * self.n_devices * self.per_device_batch
    }

    pub fn dummies(&self) -> u64 {
        self.total_slots() - self.n_examples
    }

    pub fn slots_per_device(&self) -> u64 {
        self.steps * self.per_device_batch
    }

    /// Real examples held by `device`.
    pub fn real_on(&self, device: u64) -> u64 {
        let per = self.slots_per_device();
        self.n_examples.saturating_sub(device * per).min(per)
    }

    /// Example id in slot `slot` of `device`, `None` for a dummy.
    pub fn example_at(&self, device: u64, slot: u64) -> Option<u64> {
        let id = device * self.slots_per_device() + slot;
        (id < self.n_examples).then_some(id)
    }

    /// Validity mask of `device`'s slots.
    pub fn mask(&self, device: u64) -> Vec<bool> {
        let real = self.real_on(device);
        (0..self.slots_per_device()).map(|s| s < real).collect()
    }

    /// Fills every device's batch; `example(id)` gives (prediction, label,
    /// score) of a real example, dummies get zeros.
    pub fn batches(&self, example: impl Fn(u64) -> (u32, u32, f32)) -> Vec<EvalBatch> {
        (0..self.n_devices)
            .map(|d| {
                let n = self.slots_per_device() as usize;
                let mut b = EvalBatch {
                    predictions: Vec::with_capacity(n),
                    labels: Vec::with_capacity(n),
                    scores: Vec::with_capacity(n),
                    mask: self.mask(d),
                };
                for s in 0..n as u64 {
                    let (p, l, sc) = self.example_at(d, s).map_or((0, 0, 0.0), &example);
                    b.predictions.push(p);
                    b.labels.push(l);
                    b.scores.push(sc);
                }
                b
            })
            .collect()
    }
}

/// Pads `n_examples` up to the smallest multiple of
/// `n_devices * per_device_batch`.
pub fn pad_eval_dataset(n_examples: u64, n_devices: u64, per_device_batch: u64) -> Result<PaddedEvalLayout> {
    if n_devices == 0 || per_device_batch == 0 {
        return Err(Error::InvalidArgument("devices and batch must be positive".into()));
    }
    Ok(PaddedEvalLayout {
        n_examples,
        n_devices,
        per_device_batch,
        steps: n_examples.div_ceil(n_devices * per_device_batch),
    })
}

/// One device's evaluation slice. `scores` is either empty or as long as
/// the labels; a label is positive when nonzero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub predictions: Vec<u32>,
    pub labels: Vec<u32>,
    pub scores: Vec<f32>,
    pub mask: Vec<bool>,
}

impl EvalBatch {
    fn check(&self) -> Result<()> {
        let n = self.mask.len();
        for len in [self.predictions.len(), self.labels.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, actual: len });
            }
        }
        if !self.scores.is_empty() && self.scores.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.scores.len(),
            });
        }
        Ok(())
    }

    fn real(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

const LIMB_BITS: u32 = 11;
const LIMBS: usize = 3;

fn to_limbs(v: u64) -> Result<[f32; LIMBS]> {
    if v >> (LIMB_BITS as usize * LIMBS) != 0 {
        return Err(Error::Metric(format!("count {v} too large for exact summation")));
    }
    let mask = (1u64 << LIMB_BITS) - 1;
    Ok(std::array::from_fn(|i| ((v >> (LIMB_BITS * i as u32)) & mask) as f32))
}

fn from_limbs(l: &[f32]) -> u64 {
    l.iter().enumerate().map(|(i, &x)| (x as u64) << (LIMB_BITS * i as u32)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub correct: u64,
    pub count: u64,
    pub value: f64,
}

/// Accuracy over the real examples of all devices. Per-device counts are
/// split into 11-bit limbs so that the f32 ring all-reduce sums them
/// exactly.
pub fn distributed_accuracy(batches: &[EvalBatch]) -> Result<Accuracy> {
    if batches.is_empty() {
        return Err(Error::Empty);
    }
    if batches.len() >= 1 << (24 - LIMB_BITS) {
        return Err(Error::Metric("too many devices for exact limb summation".into()));
    }
    let mut payloads = Vec::with_capacity(batches.len());
    for b in batches {
        b.check()?;
        let count = b.real().count() as u64;
        let correct = b.real().filter(|&i| b.predictions[i] == b.labels[i]).count() as u64;
        let mut v = to_limbs(correct)?.to_vec();
        v.extend(to_limbs(count)?);
        payloads.push(Payload::f32(v));
    }
    let ring: Vec<Coord> = (0..batches.len()).map(|x| Coord::new(x, 0)).collect();
    let out = all_reduce(&ring, &payloads, Direction::Bidirectional)?;
    let sums = out.values[0].values();
    let correct = from_limbs(&sums[..LIMBS]);
    let count = from_limbs(&sums[LIMBS..]);
    if count == 0 {
        return Err(Error::Metric("no real examples".into()));
    }
    Ok(Accuracy {
        correct,
        count,
        value: correct as f64 / count as f64,
    })
}

/// Order-preserving map of an f32 onto u32; both zeros map together.
fn score_key(x: f32) -> u32 {
    let x = if x == 0.0 { 0.0 } else { x };
    let bits = x.to_bits();
    if bits >> 31 == 1 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

/// Rank-based ROC AUC: the probability that a random positive outscores a
/// random negative, ties counting one half. Sorts packed (score, label)
/// keys and sweeps them once.
pub fn auc_roc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut keys: Vec<u64> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| ((score_key(s) as u64) << 1) | l as u64)
        .collect();
    keys.par_sort_unstable();
    auc_from_sorted(&keys)
}

fn auc_from_sorted(keys: &[u64]) -> Result<f64> {
    // Twice the Mann-Whitney statistic, so ties stay integral.
    let (mut twice, mut neg_below, mut pos_total) = (0u128, 0u64, 0u64);
    let mut i = 0;
    while i < keys.len() {
        let score = keys[i] >> 1;
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < keys.len() && keys[i] >> 1 == score {
            if keys[i] & 1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        twice += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
        pos_total += pos;
    }
    if pos_total == 0 || neg_below == 0 {
        return Err(Error::Metric("AUC needs both positive and negative examples".into()));
    }
    Ok(twice as f64 / (2 * pos_total as u128 * neg_below as u128) as f64)
}

/// Running evaluation sums. Merging is associative and commutative; the
/// scored samples are kept as a multiset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricAccumulator {
    pub correct: u64,
    pub count: u64,
    pub dummies: u64,
    /// Packed (score, label) keys of real examples.
    scored: Vec<u64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, batch: &EvalBatch) -> Result<()> {
        batch.check()?;
        for i in 0..batch.mask.len() {
            if !batch.mask[i] {
                self.dummies += 1;
                continue;
            }
            self.count += 1;
            if batch.predictions[i] == batch.labels[i] {
                self.correct += 1;
            }
            if let Some(&s) = batch.scores.get(i) {
                if s.is_nan() {
                    return Err(Error::Metric("NaN score".into()));
                }
                self.scored.push(((score_key(s) as u64) << 1) | (batch.labels[i] != 0) as u64);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.correct += other.correct;
        self.count += other.count;
        self.dummies += other.dummies;
        self.scored.extend_from_slice(&other.scored);
    }

    pub fn scored_len(&self) -> usize {
        self.scored.len()
    }

    /// Scored samples in canonical order, for multiset comparison.
    pub fn sorted_scores(&self) -> Vec<u64> {
        let mut v = self.scored.clone();
        v.sort_unstable();
        v
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Metric("no real examples".into()));
        }
        Ok(self.correct as f64 / self.count as f64)
    }

    pub fn auc(&self) -> Result<f64> {
        let mut keys = self.scored.clone();
        keys.par_sort_unstable();
        auc_from_sorted(&keys)
    }
}

/// Accumulates `steps_per_transfer` batches on device before each merge
/// into the host-side total.
pub fn multi_step_eval(batches: &[EvalBatch], steps_per_transfer: usize) -> Result<MetricAccumulator> {
    if steps_per_transfer == 0 {
        return Err(Error::InvalidArgument("steps_per_transfer must be at least 1".into()));
    }
    let mut total = MetricAccumulator::new();
    for group in batches.chunks(steps_per_transfer) {
        let mut on_device = MetricAccumulator::new();
        for b in group {
            on_device.observe(b)?;
        }
        total.merge(&on_device);
    }
    Ok(total)
}

/// Worker index for each of `n_events` eval events.
pub fn round_robin_assign(n_events: usize, workers: usize) -> Result<Vec<usize>> {
    if workers == 0 {
        return Err(Error::InvalidArgument("at least one worker is required".into()));
    }
    Ok((0..n_events).map(|i| i % workers).collect())
}

/// Events per worker under an assignment.
pub fn loads(assignment: &[usize], workers: usize) -> Vec<usize> {
    let mut l = vec![0; workers];
    for &w in assignment {
        l[w] += 1;
    }
    l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n_real: u64,
    pub n_dummy: u64,
    pub wall_time: f64,
}

pub fn write_records<W: io::Write>(records: &[MetricRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
