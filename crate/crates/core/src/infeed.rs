//! Input pipeline simulation: file sharding across hosts, file-order and
//! streaming-buffer shuffles, and the coverage and run-to-run dispersion
//! they produce.
//!
//! The buffer shuffle keeps `B` pending items, emits a uniformly chosen
//! one and refills its slot from the input. Under
//! [`FileOrder::ShuffleThenRepeat`] each epoch gets a fresh file order and
//! the buffer drains at the epoch boundary; under
//! [`FileOrder::RepeatThenShuffle`] one file order is repeated and a single
//! buffer runs across epochs.

use std::collections::HashSet;
use std::io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed seeds for Monte Carlo estimates.
pub const REFERENCE_SEEDS: [u64; 100] = [
    0x9af3706e3d0a, 0xd9dc253aaed6, 0x14f66a3a027e, 0x2277b7fed563, 0x3df62a7f1d47, 0x259cc71f3e54,
    0x25144ac7596c, 0xc56da97450dd, 0xe004d89ed45b, 0x841bb5d3f86a, 0x2864c18bf4ac, 0x2993cde9fab7,
    0x2650d10645c9, 0xea75c5c1d934, 0x9181fecda3b2, 0x210c1adcfe02, 0x91690eb06838, 0x916e2498dfac,
    0x2c522e466541, 0xeb353d799bbd, 0xd8e5607d6d2e, 0x4798882cff08, 0x42e95f85e164, 0xca9bca134ce3,
    0xef8d7dbf416b, 0xea739d112053, 0x3ae3aa10eb74, 0x8d832b386074, 0x201792ec9ad4, 0xab8937b1315c,
    0x486cd0b2c5b9, 0x164789030d81, 0x6ee82dd65ebb, 0x6b81d9a7a9e6, 0xb832182b7ee4, 0x03c8bdc25387,
    0xe690efaf9376, 0xa24c8eb96361, 0x5287059c2fab, 0x9e1d96802154, 0x51acb3b3f0c0, 0xfcd4a939d64d,
    0x818bd9edc643, 0xb2c8683be4a2, 0xcc6988081a29, 0x2f2cf43ca79e, 0xaff545f34d7a, 0x885a7be48f50,
    0xaae904922a52, 0xff14ef4e23f6, 0xe602b0a03924, 0x47eaf7b12400, 0x415c93bd648d, 0xd7c7d02524b6,
    0x15ce8275f838, 0xcd6f24c4edc6, 0x2f6060f6b514, 0xa1cff0f89702, 0x4d53cbbd0d5e, 0xbfd541a67d42,
    0x67d311577b26, 0x3ede83b5fa28, 0x58654cef3d71, 0xcaa4928a7de7, 0x5a5a8e5c8896, 0xb1cdee5d6934,
    0xd1b8c671fdfa, 0xaa54969368f0, 0x14b6058b9584, 0xa8b3376b066c, 0x3a6fb2b204e5, 0x79fe2413140a,
    0xc61a9a639577, 0x152a5e3fb1d5, 0x42202f426a8e, 0x8b40cc782f9c, 0x8830f72dc976, 0xa34dc7902971,
    0x27f5db67fe2a, 0xc157f8d99b04, 0x0adadd3b8bad, 0xb5dfd72860b5, 0x5aa5e45d7f0b, 0x5d402a7a2734,
    0x629c104ea5b5, 0x6ac00d473edb, 0x89a3f0c58617, 0x1e0b9a3c1bf1, 0xb06a7b134ecf, 0xf8f820367aa2,
    0x6b67e6fe858d, 0x19f10dd2b4d1, 0x104cd433f65a, 0x801ab5593cbd, 0xe5f504a021d1, 0x3c6730cbe887,
    0xa62ab69bcc56, 0x140c3b9134d0, 0xdcf2dd67d995, 0xde6ac2c48a4a,
];

/// Contiguous file ranges per host; the first `n_files % n_hosts` hosts
/// take one extra file.
pub fn shard_files(n_files: usize, n_hosts: usize) -> Result<Vec<Vec<usize>>> {
    if n_hosts == 0 {
        return Err(Error::InvalidArgument("at least one host is required".into()));
    }
    let (base, extra) = (n_files / n_hosts, n_files % n_hosts);
    let mut next = 0;
    Ok((0..n_hosts)
        .map(|h| {
            let n = base + usize::from(h < extra);
            let files = (next..next + n).collect();
            next += n;
            files
        })
        .collect())
}

/// Sequence counts per file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub file_sizes: Vec<usize>,
}

impl Dataset {
    pub fn uniform(files: usize, per_file: usize) -> Self {
        Self {
            file_sizes: vec![per_file; files],
        }
    }

    pub fn len(&self) -> usize {
        self.file_sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn files(&self) -> usize {
        self.file_sizes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileOrder {
    ShuffleThenRepeat,
    RepeatThenShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShufflePolicy {
    pub file_order: FileOrder,
    pub buffer_size: usize,
    pub seed: u64,
}

/// One emitted sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Emitted {
    pub file: usize,
    pub seq: usize,
    /// Position in the pre-shuffle input stream.
    pub input_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTrace {
    pub items: Vec<Emitted>,
}

fn file_order_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(0);
    r
}

fn buffer_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn buffer_shuffle(input: impl Iterator<Item = Emitted>, size: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Emitted>) {
    let mut input = input.peekable();
    let mut buf: Vec<Emitted> = Vec::with_capacity(size);
    while buf.len() < size {
        match input.next() {
            Some(e) => buf.push(e),
            None => break,
        }
    }
    while !buf.is_empty() {
        let j = rng.gen_range(0..buf.len());
        out.push(buf[j]);
        match input.next() {
            Some(e) => buf[j] = e,
            None => {
                buf.swap_remove(j);
            }
        }
    }
}

fn sequences<'a>(dataset: &'a Dataset, order: &'a [usize], offset: usize) -> impl Iterator<Item = Emitted> + 'a {
    order
        .iter()
        .flat_map(move |&f| (0..dataset.file_sizes[f]).map(move |seq| (f, seq)))
        .enumerate()
        .map(move |(i, (file, seq))| Emitted {
            file,
            seq,
            input_pos: offset + i,
        })
}

/// Emission order of `epochs` passes over `dataset` under `policy`.
pub fn stream_with_policy(dataset: &Dataset, policy: &ShufflePolicy, epochs: usize) -> Result<StreamTrace> {
    if policy.buffer_size == 0 {
        return Err(Error::InvalidArgument("buffer_size must be at least 1".into()));
    }
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    let mut order_rng = file_order_rng(policy.seed);
    let mut buf_rng = buffer_rng(policy.seed);
    let n = dataset.len();
    let mut items = Vec::with_capacity(n * epochs);
    let mut order: Vec<usize> = (0..dataset.files()).collect();
    match policy.file_order {
        FileOrder::ShuffleThenRepeat => {
            for e in 0..epochs {
                order.shuffle(&mut order_rng);
                buffer_shuffle(sequences(dataset, &order, e * n), policy.buffer_size, &mut buf_rng, &mut items);
            }
        }
        FileOrder::RepeatThenShuffle => {
            order.shuffle(&mut order_rng);
            let repeated = (0..epochs).flat_map(|e| sequences(dataset, &order, e * n));
            buffer_shuffle(repeated, policy.buffer_size, &mut buf_rng, &mut items);
        }
    }
    Ok(StreamTrace { items })
}

/// Fraction of the dataset's distinct sequences among the first `window`
/// emissions.
pub fn coverage(trace: &StreamTrace, dataset: &Dataset, window: usize) -> Result<f64> {
    if window > trace.items.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds trace length {}",
            trace.items.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty);
    }
    let seen: HashSet<(usize, usize)> = trace.items[..window].iter().map(|e| (e.file, e.seq)).collect();
    Ok(seen.len() as f64 / dataset.len() as f64)
}

/// Run-to-run spread of batch composition: for each step, the per-file
/// counts in the batch are compared across runs (one run per seed); the
/// score is the mean over steps of the summed across-run variances.
pub fn dispersion(
    policy: &ShufflePolicy,
    dataset: &Dataset,
    seeds: &[u64],
    batch_size: usize,
    epochs: usize,
) -> Result<f64> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("dispersion needs at least two runs".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let files = dataset.files();
    let traces = seeds
        .iter()
        .map(|&seed| stream_with_policy(dataset, &ShufflePolicy { seed, ..*policy }, epochs))
        .collect::<Result<Vec<_>>>()?;
    let steps = traces[0].items.len() / batch_size;
    if steps == 0 {
        return Err(Error::InvalidArgument("batch larger than the stream".into()));
    }
    let runs = seeds.len() as f64;
    let mut total = 0.0;
    for s in 0..steps {
        let hists: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| {
                let mut h = vec![0.0; files];
                for e in &t.items[s * batch_size..(s + 1) * batch_size] {
                    h[e.file] += 1.0;
                }
                h
            })
            .collect();
        for f in 0..files {
            let mean = hists.iter().map(|h| h[f]).sum::<f64>() / runs;
            total += hists.iter().map(|h| (h[f] - mean).powi(2)).sum::<f64>() / runs;
        }
    }
    Ok(total / steps as f64)
}

/// CSV of a trace: output_pos, input_pos, file, seq.
pub fn write_trace_csv<W: io::Write>(trace: &StreamTrace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["output_pos", "input_pos", "file", "seq"])?;
    for (i, e) in trace.items.iter().enumerate() {
        w.write_record([i.to_string(), e.input_pos.to_string(), e.file.to_string(), e.seq.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(file_order: FileOrder, buffer_size: usize, seed: u64) -> ShufflePolicy {
        ShufflePolicy {
            file_order,
            buffer_size,
            seed,
        }
    }

    #[test]
    fn file_shards() {
        let loads = |f, h| shard_files(f, h).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(loads(7, 3), vec![3, 2, 2]);
        assert_eq!(loads(4, 4), vec![1; 4]);
        let l = loads(500, 128);
        assert!(l.iter().all(|&n| n == 3 || n == 4));
        assert_eq!(l.iter().filter(|&&n| n == 4).count(), 116);
        assert_eq!(shard_files(7, 3).unwrap()[1], vec![3, 4]);
    }

    #[test]
    fn buffer_of_one_keeps_order() {
        let d = Dataset::uniform(3, 4);
        let t = stream_with_policy(&d, &policy(FileOrder::RepeatThenShuffle, 1, 9), 2).unwrap();
        assert!(t.items.iter().enumerate().all(|(i, e)| e.input_pos == i));
    }

    #[test]
    fn full_buffer_is_a_permutation() {
        let d = Dataset::uniform(4, 5);
        let t = stream_with_policy(&d, &policy(FileOrder::ShuffleThenRepeat, 20, 3), 1).unwrap();
        assert_eq!(coverage(&t, &d, 20).unwrap(), 1.0);
        assert_eq!(coverage(&t, &d, 0).unwrap(), 0.0);
        assert!(coverage(&t, &d, 21).is_err());
    }

    #[test]
    fn same_seed_same_trace() {
        let d = Dataset::uniform(5, 7);
        let p = policy(FileOrder::ShuffleThenRepeat, 4, 11);
        assert_eq!(stream_with_policy(&d, &p, 3).unwrap(), stream_with_policy(&d, &p, 3).unwrap());
    }

    #[test]
    fn degenerate_dispersion() {
        let d = Dataset::uniform(10, 10);
        let p = policy(FileOrder::ShuffleThenRepeat, 2, 0);
        assert_eq!(dispersion(&p, &d, &[5, 5, 5], 10, 1).unwrap(), 0.0);
        let one = Dataset::uniform(1, 8);
        assert_eq!(dispersion(&p, &one, &[1, 2], 8, 1).unwrap(), 0.0);
        assert!(dispersion(&p, &d, &[1], 10, 1).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let d = Dataset::uniform(1, 2);
        let t = stream_with_policy(&d, &policy(FileOrder::ShuffleThenRepeat, 1, 0), 1).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "output_pos,input_pos,file,seq\n0,0,0,0\n1,1,0,1\n");
    }
}
