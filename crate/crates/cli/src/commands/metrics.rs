use std::time::Instant;

use multipod::metrics::{
    auc_roc, distributed_accuracy, loads, multi_step_eval, pad_eval_dataset, round_robin_assign, MetricRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Context;
use crate::output::num;
use crate::{CliError, Grid};

/// Synthetic scores with a weak label signal, quantized to force ties.
pub fn synthetic_scores(n: usize, seed: u64) -> (Vec<f32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_bool(0.3);
        let s: f32 = rng.gen::<f32>() + if label { 0.25 } else { 0.0 };
        scores.push((s * 4096.0).round() / 4096.0);
        labels.push(label);
    }
    (scores, labels)
}

pub fn run(ctx: &Context) -> Result<(Vec<Grid>, bool), CliError> {
    let (scenario, _) = ctx.scenario()?;
    let mc = scenario.require(&scenario.metrics, "metrics")?;
    let mut records = Vec::new();
    let mut ok = true;

    let layout = pad_eval_dataset(mc.eval_examples, mc.devices, mc.per_device_batch)
        .map_err(|e| CliError::at("metrics", e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let truth: Vec<(u32, u32, f32)> = (0..mc.eval_examples)
        .map(|_| {
            let label = rng.gen_range(0..10u32);
            let pred = if rng.gen_bool(0.75) { label } else { rng.gen_range(0..10) };
            (pred, label, rng.gen())
        })
        .collect();
    let batches = layout.batches(|id| truth[id as usize]);
    let t = Instant::now();
    let acc = distributed_accuracy(&batches).map_err(|e| CliError::at("metrics.eval_examples", e))?;
    let wall = t.elapsed().as_secs_f64();
    let central = truth.iter().filter(|(p, l, _)| p == l).count() as u64;
    ok &= acc.correct == central && acc.count == mc.eval_examples;
    records.push(MetricRecord {
        metric: "accuracy".into(),
        value: acc.value,
        n_real: acc.count,
        n_dummy: layout.dummies(),
        wall_time: wall,
    });

    // Per-device batches split into steps for the multi-step accumulator.
    let steps: Vec<_> = batches
        .iter()
        .flat_map(|b| {
            let per = mc.per_device_batch as usize;
            (0..b.mask.len() / per).map(move |s| multipod::metrics::EvalBatch {
                predictions: b.predictions[s * per..(s + 1) * per].to_vec(),
                labels: b.labels[s * per..(s + 1) * per].to_vec(),
                scores: b.scores[s * per..(s + 1) * per].to_vec(),
                mask: b.mask[s * per..(s + 1) * per].to_vec(),
            })
        })
        .collect();
    let t = Instant::now();
    let per_step = multi_step_eval(&steps, 1).map_err(|e| CliError::at("metrics", e))?;
    let grouped = multi_step_eval(&steps, mc.steps_per_transfer).map_err(|e| CliError::at("metrics", e))?;
    let wall = t.elapsed().as_secs_f64();
    ok &= per_step.correct == grouped.correct
        && per_step.count == grouped.count
        && per_step.sorted_scores() == grouped.sorted_scores();
    records.push(MetricRecord {
        metric: format!("multi_step_accuracy_k{}", mc.steps_per_transfer),
        value: grouped.accuracy().map_err(|e| CliError::at("metrics", e))?,
        n_real: grouped.count,
        n_dummy: grouped.dummies,
        wall_time: wall,
    });

    let (scores, labels) = synthetic_scores(mc.auc_samples, ctx.seed);
    let t = Instant::now();
    let auc = auc_roc(&scores, &labels).map_err(|e| CliError::at("metrics.auc_samples", e))?;
    records.push(MetricRecord {
        metric: "auc_roc".into(),
        value: auc,
        n_real: mc.auc_samples as u64,
        n_dummy: 0,
        wall_time: t.elapsed().as_secs_f64(),
    });

    let assignment = round_robin_assign(mc.eval_events, mc.workers).map_err(|e| CliError::at("metrics.workers", e))?;
    let l = loads(&assignment, mc.workers);
    let spread = l.iter().max().unwrap_or(&0) - l.iter().min().unwrap_or(&0);
    ok &= spread <= 1;
    records.push(MetricRecord {
        metric: "round_robin_load_spread".into(),
        value: spread as f64,
        n_real: mc.eval_events as u64,
        n_dummy: 0,
        wall_time: 0.0,
    });

    let mut g = Grid::new(["metric", "value", "n_real", "n_dummy", "wall_time"]).titled("distributed evaluation");
    for r in &records {
        g.push([
            r.metric.clone(),
            num(r.value),
            r.n_real.to_string(),
            r.n_dummy.to_string(),
            num(r.wall_time),
        ]);
    }
    g.note(format!("seed={}", ctx.seed));
    Ok((vec![g], ok))
}
