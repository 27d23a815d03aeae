use std::collections::HashMap;

use multipod::infeed::{
    coverage, dispersion, shard_files, stream_with_policy, Dataset, FileOrder, ShufflePolicy, REFERENCE_SEEDS,
};
use proptest::prelude::*;

fn order_strategy() -> impl Strategy<Value = FileOrder> {
    prop_oneof![Just(FileOrder::ShuffleThenRepeat), Just(FileOrder::RepeatThenShuffle)]
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(0usize..12, 1..8).prop_map(|file_sizes| Dataset { file_sizes })
}

proptest! {
    #[test]
    fn every_example_is_emitted_once_per_epoch(
        d in dataset_strategy(),
        order in order_strategy(),
        buffer in 1usize..40,
        epochs in 1usize..4,
        seed in any::<u64>(),
    ) {
        let p = ShufflePolicy { file_order: order, buffer_size: buffer, seed };
        let t = stream_with_policy(&d, &p, epochs).unwrap();
        prop_assert_eq!(t.items.len(), d.len() * epochs);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for e in &t.items {
            prop_assert!(e.seq < d.file_sizes[e.file]);
            *counts.entry((e.file, e.seq)).or_default() += 1;
        }
        prop_assert_eq!(counts.len(), d.len());
        prop_assert!(counts.values().all(|&c| c == epochs));
        let mut positions: Vec<usize> = t.items.iter().map(|e| e.input_pos).collect();
        positions.sort_unstable();
        prop_assert_eq!(positions, (0..d.len() * epochs).collect::<Vec<_>>());
    }

    #[test]
    fn output_never_runs_more_than_a_buffer_ahead(
        d in dataset_strategy(),
        order in order_strategy(),
        buffer in 1usize..40,
        epochs in 1usize..4,
        seed in any::<u64>(),
    ) {
        let p = ShufflePolicy { file_order: order, buffer_size: buffer, seed };
        let t = stream_with_policy(&d, &p, epochs).unwrap();
        for (j, e) in t.items.iter().enumerate() {
            prop_assert!(e.input_pos < j + buffer, "output {} holds input {}", j, e.input_pos);
        }
    }

    #[test]
    fn unit_buffer_preserves_input_order(d in dataset_strategy(), order in order_strategy(), seed in any::<u64>()) {
        let p = ShufflePolicy { file_order: order, buffer_size: 1, seed };
        let t = stream_with_policy(&d, &p, 2).unwrap();
        prop_assert!(t.items.iter().enumerate().all(|(j, e)| e.input_pos == j));
    }

    #[test]
    fn identical_seeds_give_identical_traces(d in dataset_strategy(), order in order_strategy(), seed in any::<u64>()) {
        let p = ShufflePolicy { file_order: order, buffer_size: 5, seed };
        prop_assert_eq!(stream_with_policy(&d, &p, 2).unwrap(), stream_with_policy(&d, &p, 2).unwrap());
    }

    #[test]
    fn hosts_get_contiguous_balanced_files(files in 0usize..50, hosts in 1usize..10) {
        let s = shard_files(files, hosts).unwrap();
        prop_assert_eq!(s.len(), hosts);
        let flat: Vec<usize> = s.iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..files).collect::<Vec<_>>());
        let sizes: Vec<usize> = s.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn full_buffer_single_epoch_is_a_permutation() {
    let d = Dataset::uniform(4, 5);
    let p = ShufflePolicy {
        file_order: FileOrder::ShuffleThenRepeat,
        buffer_size: d.len(),
        seed: 9,
    };
    let t = stream_with_policy(&d, &p, 1).unwrap();
    assert_eq!(coverage(&t, &d, d.len()).unwrap(), 1.0);
}

#[test]
fn ordinal_claims_hold_on_reference_seeds() {
    let d = Dataset::uniform(10, 100);
    let mut cov = [0.0; 2];
    for (slot, order) in [FileOrder::ShuffleThenRepeat, FileOrder::RepeatThenShuffle].into_iter().enumerate() {
        for &seed in &REFERENCE_SEEDS {
            let p = ShufflePolicy {
                file_order: order,
                buffer_size: 2,
                seed,
            };
            let t = stream_with_policy(&d, &p, 2).unwrap();
            cov[slot] += coverage(&t, &d, d.len()).unwrap() / REFERENCE_SEEDS.len() as f64;
        }
    }
    assert!(cov[0] > cov[1], "{cov:?}");

    let policy = |b| ShufflePolicy {
        file_order: FileOrder::ShuffleThenRepeat,
        buffer_size: b,
        seed: 0,
    };
    let wide = dispersion(&policy(d.len()), &d, &REFERENCE_SEEDS, 32, 2).unwrap();
    let narrow = dispersion(&policy(2), &d, &REFERENCE_SEEDS, 32, 2).unwrap();
    assert!(wide < narrow, "{wide} vs {narrow}");
}
