use multipod::metrics::{
    auc_roc, distributed_accuracy, loads, multi_step_eval, pad_eval_dataset, round_robin_assign, EvalBatch,
    MetricAccumulator,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mann-Whitney count over all positive/negative pairs, ties worth half.
fn pairwise_auc(scores: &[f32], labels: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

fn tied_sample(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> (Vec<f32>, Vec<bool>) {
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f32 / levels as f32 - 0.5).collect();
    let labels = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    (scores, labels)
}

fn tie_fraction(scores: &[f32]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f32::total_cmp);
    let tied = (0..s.len())
        .filter(|&i| (i > 0 && s[i - 1] == s[i]) || (i + 1 < s.len() && s[i + 1] == s[i]))
        .count();
    tied as f64 / s.len() as f64
}

#[test]
fn auc_matches_pairwise_with_heavy_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let n = rng.gen_range(2..=2000);
        let levels = rng.gen_range(1..(n as u32 / 3).max(2));
        let (scores, labels) = tied_sample(&mut rng, n, levels);
        assert!(tie_fraction(&scores) >= 0.3);
        match pairwise_auc(&scores, &labels) {
            Some(want) => assert_eq!(auc_roc(&scores, &labels).unwrap(), want, "n={n}"),
            None => assert!(auc_roc(&scores, &labels).is_err()),
        }
    }
}

#[test]
fn signed_zero_scores_tie() {
    let auc = auc_roc(&[0.0, -0.0], &[true, false]).unwrap();
    assert_eq!(auc, 0.5);
}

fn batches(rng: &mut ChaCha8Rng, count: usize, per: usize) -> Vec<EvalBatch> {
    (0..count)
        .map(|_| {
            let labels: Vec<u32> = (0..per).map(|_| rng.gen_range(0..2)).collect();
            EvalBatch {
                predictions: (0..per).map(|_| rng.gen_range(0..2)).collect(),
                scores: (0..per).map(|_| rng.gen_range(0..8) as f32).collect(),
                mask: (0..per).map(|_| rng.gen_bool(0.8)).collect(),
                labels,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn auc_matches_pairwise(n in 2usize..300, levels in 1u32..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = tied_sample(&mut rng, n, levels);
        match pairwise_auc(&scores, &labels) {
            Some(want) => prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), want),
            None => prop_assert!(auc_roc(&scores, &labels).is_err()),
        }
    }

    #[test]
    fn padding_does_not_change_accuracy(
        n in 1u64..500,
        devices in 1u64..9,
        per in 1u64..9,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<(u32, u32, f32)> = (0..n).map(|_| (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen())).collect();
        let layout = pad_eval_dataset(n, devices, per).unwrap();
        prop_assert!(layout.total_slots() >= n);
        prop_assert!(layout.total_slots() - n < devices * per);
        let b = layout.batches(|id| data[id as usize]);
        let acc = distributed_accuracy(&b).unwrap();
        let correct = data.iter().filter(|(p, l, _)| p == l).count() as u64;
        prop_assert_eq!(acc.correct, correct);
        prop_assert_eq!(acc.count, n);
        prop_assert_eq!(acc.value, correct as f64 / n as f64);
        let mut seen: Vec<u64> = (0..devices)
            .flat_map(|d| (0..layout.slots_per_device()).filter_map(move |s| layout.example_at(d, s)))
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn merge_is_associative_and_commutative(count in 1usize..12, per in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = batches(&mut rng, count, per);
        let mut whole = MetricAccumulator::new();
        for b in &bs {
            whole.observe(b).unwrap();
        }
        let parts: Vec<MetricAccumulator> = bs
            .iter()
            .map(|b| {
                let mut a = MetricAccumulator::new();
                a.observe(b).unwrap();
                a
            })
            .collect();
        let mut order: Vec<usize> = (0..parts.len()).collect();
        order.shuffle(&mut rng);
        let mut left = MetricAccumulator::new();
        for &i in &order {
            left.merge(&parts[i]);
        }
        let mut right = MetricAccumulator::new();
        for &i in order.iter().rev() {
            let mut acc = parts[i].clone();
            acc.merge(&right);
            right = acc;
        }
        for acc in [&left, &right] {
            prop_assert_eq!(acc.correct, whole.correct);
            prop_assert_eq!(acc.count, whole.count);
            prop_assert_eq!(acc.dummies, whole.dummies);
            prop_assert_eq!(acc.sorted_scores(), whole.sorted_scores());
            prop_assert_eq!(acc.auc().ok(), whole.auc().ok());
        }
        let k = rng.gen_range(1..=count);
        let grouped = multi_step_eval(&bs, k).unwrap();
        prop_assert_eq!(grouped.sorted_scores(), whole.sorted_scores());
        prop_assert_eq!((grouped.correct, grouped.count), (whole.correct, whole.count));
    }

    #[test]
    fn round_robin_balances_within_one(n in 0usize..500, workers in 1usize..17) {
        let a = round_robin_assign(n, workers).unwrap();
        let l = loads(&a, workers);
        prop_assert_eq!(l.iter().sum::<usize>(), n);
        prop_assert!(l.iter().max().unwrap() - l.iter().min().unwrap() <= 1);
    }
}
