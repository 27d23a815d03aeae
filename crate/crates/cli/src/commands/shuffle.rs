use multipod::infeed::{
    coverage, dispersion, stream_with_policy, Dataset, FileOrder, ShufflePolicy, REFERENCE_SEEDS,
};

use super::Context;
use crate::config::{file_order_name, ShuffleConfig};
use crate::output::num;
use crate::{CliError, Grid};

/// Reference seeds shifted by the run seed.
pub fn seeds(runs: usize, seed: u64) -> Vec<u64> {
    REFERENCE_SEEDS[..runs].iter().map(|s| s.wrapping_add(seed)).collect()
}

fn err(e: multipod::Error) -> CliError {
    CliError::at("shuffle", e)
}

/// Mean first-epoch coverage of `order` over the seed list.
pub fn mean_coverage(cfg: &ShuffleConfig, order: FileOrder, seeds: &[u64]) -> Result<f64, CliError> {
    let d = cfg.dataset();
    let mut total = 0.0;
    for &seed in seeds {
        let policy = ShufflePolicy {
            file_order: order,
            buffer_size: cfg.buffer_size,
            seed,
        };
        let trace = stream_with_policy(&d, &policy, cfg.epochs).map_err(err)?;
        total += coverage(&trace, &d, d.len()).map_err(err)?;
    }
    Ok(total / seeds.len() as f64)
}

/// Mean dispersion over consecutive seed pairs.
pub fn mean_pair_dispersion(
    dataset: &Dataset,
    buffer_size: usize,
    batch_size: usize,
    epochs: usize,
    seeds: &[u64],
) -> Result<f64, CliError> {
    let policy = ShufflePolicy {
        file_order: FileOrder::ShuffleThenRepeat,
        buffer_size,
        seed: 0,
    };
    let mut total = 0.0;
    for i in 0..seeds.len() {
        let pair = [seeds[i], seeds[(i + 1) % seeds.len()]];
        total += dispersion(&policy, dataset, &pair, batch_size, epochs).map_err(err)?;
    }
    Ok(total / seeds.len() as f64)
}

pub fn run(ctx: &Context) -> Result<(Vec<Grid>, bool), CliError> {
    let (scenario, _) = ctx.scenario()?;
    let cfg = scenario.require(&scenario.shuffle, "shuffle")?;
    let seeds = seeds(cfg.runs, ctx.seed);
    let d = cfg.dataset();
    let mut g = Grid::new(["metric", "file_order", "buffer_size", "value"]).titled(format!(
        "shuffle simulation: {} files, {} examples, {} runs",
        d.files(),
        d.len(),
        seeds.len()
    ));
    let mut cov = Vec::new();
    for order in [FileOrder::ShuffleThenRepeat, FileOrder::RepeatThenShuffle] {
        let c = mean_coverage(cfg, order, &seeds)?;
        cov.push(c);
        g.push(["mean_coverage", file_order_name(order), &cfg.buffer_size.to_string(), &num(c)]);
    }
    let mut disp = Vec::new();
    for b in [d.len(), cfg.buffer_size] {
        let v = mean_pair_dispersion(&d, b, cfg.batch_size, cfg.epochs, &seeds)?;
        disp.push(v);
        g.push([
            "mean_dispersion",
            file_order_name(FileOrder::ShuffleThenRepeat),
            &b.to_string(),
            &num(v),
        ]);
    }
    g.note(format!("seed offset={}", ctx.seed));
    let ok = cov[0] > cov[1] && disp[0] < disp[1];
    Ok((vec![g], ok))
}
