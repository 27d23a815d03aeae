use multipod::collectives::{hierarchical_allreduce_2d, HierarchicalOptions, Payload};
use multipod::metrics::auc_roc;
use multipod::partitioner::{
    distributed_batch_norm, distributed_top_k, gather_as_onehot_matmul, matmul, reshard, scalar_reassociate,
    sharded_gather_onehot, sharded_matmul_feature, spatial_partition_conv, ShardDim, ShardSpec, Side, Tensor,
};
use multipod::sharding::{replicated_update, sharded_update, NormSpan, OptimizerSpec, OptimizerState};
use multipod::topology::{Coord, DeviceMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Context;
use crate::config::VerifyConfig;
use crate::{CliError, Grid};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn error(&mut self, what: String, e: multipod::Error) {
        self.cases += 1;
        self.failures.push(format!("{what}: {e}"));
    }
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], vector(rng, r * c)).expect("shape matches")
}

/// Small integers keep every partial sum exact whatever the order.
fn int_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.gen_range(-8i32..=8) as f32).collect();
    Tensor::new(vec![r, c], data).expect("shape matches")
}

/// Hierarchical all-reduce against per-group sums in column order.
pub fn collectives_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut s = SuiteResult::new("collectives");
    let mesh = match DeviceMesh::new(cfg.mesh_x, cfg.mesh_y, 1, true, false) {
        Ok(m) => m,
        Err(e) => {
            s.error("mesh".into(), e);
            return s;
        }
    };
    for &n in &cfg.payload_elems {
        let grads: Vec<Vec<f32>> = (0..mesh.num_devices()).map(|_| vector(rng, n)).collect();
        let payloads: Vec<Payload> = grads.iter().cloned().map(Payload::f32).collect();
        let out = match hierarchical_allreduce_2d(&mesh, cfg.stride, &payloads, HierarchicalOptions::default()) {
            Ok(o) => o,
            Err(e) => {
                s.error(format!("payload {n}"), e);
                continue;
            }
        };
        for d in mesh.devices() {
            let group = d.x % cfg.stride;
            let mut want: Option<Vec<f32>> = None;
            for x in (group..cfg.mesh_x).step_by(cfg.stride) {
                let mut col = grads[mesh.linear_index(Coord::new(x, 0))].clone();
                for y in 1..cfg.mesh_y {
                    for (a, b) in col.iter_mut().zip(&grads[mesh.linear_index(Coord::new(x, y))]) {
                        *a += b;
                    }
                }
                match want.as_mut() {
                    None => want = Some(col),
                    Some(w) => w.iter_mut().zip(&col).for_each(|(a, b)| *a += b),
                }
            }
            let got = out.values[mesh.linear_index(d)].values();
            s.check(want.as_deref() == Some(got), || format!("payload {n} device {d:?}"));
        }
    }
    s
}

pub fn optimizers() -> [OptimizerSpec; 3] {
    [
        OptimizerSpec::Sgd { lr: 0.1 },
        OptimizerSpec::Momentum { lr: 0.05, momentum: 0.9 },
        OptimizerSpec::LambLike {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            row_len: 4,
            norm_span: NormSpan::Row,
        },
    ]
}

/// Two steps of sharded against replicated updates, bit for bit.
pub fn sharding_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut s = SuiteResult::new("weight_update_sharding");
    let mesh = match DeviceMesh::new(cfg.mesh_x, cfg.mesh_y, 1, true, false) {
        Ok(m) => m,
        Err(e) => {
            s.error("mesh".into(), e);
            return s;
        }
    };
    let stride = cfg.stride;
    for opt in optimizers() {
        for &n in &cfg.payload_elems {
            let mut weights: Vec<Vec<f32>> = (0..stride).map(|_| vector(rng, n)).collect();
            let mut sharded_states: Vec<OptimizerState> = (0..stride).map(|_| OptimizerState::new(&opt, n)).collect();
            let mut ref_states = sharded_states.clone();
            for step in 0..2 {
                let grads: Vec<Vec<f32>> = (0..mesh.num_devices()).map(|_| vector(rng, n)).collect();
                let out = match sharded_update(&mesh, stride, &weights, &grads, &opt, &mut sharded_states) {
                    Ok(o) => o,
                    Err(e) => {
                        s.error(format!("{opt:?} n={n}"), e);
                        break;
                    }
                };
                let mut next = Vec::with_capacity(stride);
                for g in 0..stride {
                    let replicas: Vec<Vec<f32>> = (g..cfg.mesh_x)
                        .step_by(stride)
                        .flat_map(|x| (0..cfg.mesh_y).map(move |y| Coord::new(x, y)))
                        .map(|c| grads[mesh.linear_index(c)].clone())
                        .collect();
                    let want = replicated_update(&weights[g], &replicas, cfg.mesh_y, &opt, &mut ref_states[g])
                        .expect("reference update");
                    for d in mesh.devices().filter(|d| d.x % stride == g) {
                        let got = &out.weights[mesh.linear_index(d)];
                        let same = got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
                        s.check(same, || format!("{opt:?} n={n} step {step} device {d:?}"));
                    }
                    next.push(want);
                }
                weights = next;
            }
        }
    }
    s
}

fn conv_oracle(img: &Tensor, k: &Tensor) -> Vec<f32> {
    let (h, w) = (img.rows(), img.cols());
    let ks = k.rows();
    let r = (ks / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0f32;
            for a in 0..ks as isize {
                for b in 0..ks as isize {
                    let (y, x) = (i + a - r, j + b - r);
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        acc += img.at(y as usize, x as usize) * k.at(a as usize, b as usize);
                    }
                }
            }
            out[i as usize * w + j as usize] = acc;
        }
    }
    out
}

/// Partitioned kernels against their dense counterparts.
pub fn partition_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut s = SuiteResult::new("partitioning");
    for case in 0..cfg.instances {
        let parts = [1, 2, 4, 8][case % 4];
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let h = parts * (k / 2).max(1) + rng.gen_range(0..12);
        let w = rng.gen_range(1..16);
        let img = matrix(rng, h, w);
        let ker = matrix(rng, k, k);
        match spatial_partition_conv(&img, &ker, parts, 0) {
            Ok(out) => s.check(out.output.data() == conv_oracle(&img, &ker).as_slice(), || {
                format!("conv {h}x{w} k={k} parts={parts}")
            }),
            Err(e) => s.error(format!("conv {h}x{w} k={k} parts={parts}"), e),
        }

        let (b, d, f) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..9));
        let p = rng.gen_range(1..4);
        let a = int_matrix(rng, b, d);
        let wt = int_matrix(rng, d, f);
        let dense = matmul(&a, &wt).expect("shapes agree");
        match sharded_matmul_feature(&a, &wt, p, ShardDim::F) {
            Ok(out) => s.check(out.output == dense, || format!("matmul f {b}x{d}x{f} parts={p}")),
            Err(e) => s.error("matmul f".into(), e),
        }
        match sharded_matmul_feature(&a, &wt, p, ShardDim::D) {
            Ok(out) => s.check(out.output == dense, || format!("matmul d {b}x{d}x{f} parts={p}")),
            Err(e) => s.error("matmul d".into(), e),
        }

        let (tr, tc) = (rng.gen_range(1..10), rng.gen_range(1..5));
        let table = matrix(rng, tr, tc);
        let idx: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..table.rows())).collect();
        match gather_as_onehot_matmul(&table, &idx) {
            Ok(out) => {
                let want: Vec<f32> = idx
                    .iter()
                    .flat_map(|&r| (0..table.cols()).map(move |c| (r, c)))
                    .map(|(r, c)| table.at(r, c))
                    .collect();
                s.check(out.data() == want.as_slice(), || "onehot gather".into());
                let parts = rng.gen_range(1..=table.rows());
                match sharded_gather_onehot(&table, &idx, parts) {
                    Ok((sharded, _)) => s.check(sharded.data() == want.as_slice(), || format!("sharded gather parts={parts}")),
                    Err(e) => s.error("sharded gather".into(), e),
                }
            }
            Err(e) => s.error("onehot gather".into(), e),
        }

        let scalar = rng.gen_range(-4.0f32..4.0);
        let (m, kk, n) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8));
        let (ra, rb) = (matrix(rng, m, kk), matrix(rng, kk, n));
        for hint in [Side::Auto, Side::Left, Side::Right] {
            match scalar_reassociate(scalar, &ra, &rb, hint) {
                Ok((out, report)) => {
                    let mut ok = report.scalar_multiplies <= (m * kk).max(kk * n) as u64;
                    if hint == Side::Auto {
                        ok &= report.scalar_multiplies <= (m * kk).min(kk * n) as u64;
                    }
                    for i in 0..m {
                        for j in 0..n {
                            let (mut v, mut mag) = (0.0f64, 0.0f64);
                            for t in 0..kk {
                                let p = ra.at(i, t) as f64 * rb.at(t, j) as f64;
                                v += p;
                                mag += p.abs();
                            }
                            let want = scalar as f64 * v;
                            ok &= (out.at(i, j) as f64 - want).abs() <= 1e-6 * (scalar.abs() as f64 * mag).max(1e-30);
                        }
                    }
                    s.check(ok, || format!("scalar reassociation {m}x{kk}x{n} {hint:?}"));
                }
                Err(e) => s.error("scalar reassociation".into(), e),
            }
        }

        let shards: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..4) as f32).collect())
            .collect();
        let total: usize = shards.iter().map(Vec::len).sum();
        let kk = rng.gen_range(0..=total);
        match distributed_top_k(&shards, kk) {
            Ok(top) => {
                let mut all: Vec<(f32, usize, usize)> = shards
                    .iter()
                    .enumerate()
                    .flat_map(|(o, v)| v.iter().enumerate().map(move |(i, &x)| (x, o, i)))
                    .collect();
                all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let got: Vec<(f32, usize, usize)> = top.iter().map(|e| (e.value, e.owner, e.index)).collect();
                s.check(got == all[..kk], || format!("top-{kk}"));
            }
            Err(e) => s.error("top-k".into(), e),
        }

        let (tr, tc) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let t = matrix(rng, tr, tc);
        let devices = 2;
        let from = ShardSpec::Split { dim: 0, parts: 2 };
        let to = ShardSpec::Split { dim: 1, parts: 2 };
        match reshard(&t, from, to, devices) {
            Ok(r) => {
                let back = multipod::partitioner::assemble(&r.blocks, to, t.shape());
                s.check(back.as_ref() == Ok(&t), || "reshard reassembly".into());
            }
            Err(e) => s.error("reshard".into(), e),
        }

        let c = rng.gen_range(1..5);
        let bn_shards: Vec<Tensor> = (0..4)
            .map(|_| {
                let r = rng.gen_range(1..6);
                matrix(rng, r, c)
            })
            .collect();
        match distributed_batch_norm(&bn_shards, 1e-5) {
            Ok(out) => {
                let rows: Vec<&Tensor> = bn_shards.iter().collect();
                let n: usize = rows.iter().map(|t| t.rows()).sum();
                let mut ok = true;
                for j in 0..c {
                    let vals: Vec<f64> = rows.iter().flat_map(|t| (0..t.rows()).map(move |i| t.at(i, j) as f64)).collect();
                    let mean = vals.iter().sum::<f64>() / n as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let mut k = 0;
                    for t in &out {
                        for i in 0..t.rows() {
                            let want = (vals[k] - mean) / (var + 1e-5).sqrt();
                            ok &= (t.at(i, j) as f64 - want).abs() <= 1e-5 * want.abs().max(1.0);
                            k += 1;
                        }
                    }
                }
                s.check(ok, || "batch norm".into());
            }
            Err(e) => s.error("batch norm".into(), e),
        }
    }
    s
}

/// Rank AUC against the pairwise count.
pub fn auc_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut s = SuiteResult::new("auc");
    for _ in 0..20 {
        let n = rng.gen_range(2..=cfg.auc_samples.max(2));
        let levels = rng.gen_range(1..20);
        let mut scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..levels) as f32 / levels as f32).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        scores[0] = scores[1];
        let (mut num, mut den) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    den += 2;
                    num += match scores[i].partial_cmp(&scores[j]) {
                        Some(std::cmp::Ordering::Greater) => 2,
                        Some(std::cmp::Ordering::Equal) => 1,
                        _ => 0,
                    };
                }
            }
        }
        match auc_roc(&scores, &labels) {
            Ok(a) => s.check(a == num as f64 / den as f64, || format!("auc n={n}")),
            Err(e) => s.error(format!("auc n={n}"), e),
        }
    }
    s
}

pub fn run(ctx: &Context) -> Result<(Vec<Grid>, bool), CliError> {
    let (scenario, _) = ctx.scenario()?;
    let cfg = scenario.require(&scenario.verify, "verify")?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let suites = [
        collectives_suite(cfg, &mut rng),
        sharding_suite(cfg, &mut rng),
        partition_suite(cfg, &mut rng),
        auc_suite(cfg, &mut rng),
    ];
    let mut g = Grid::new(["suite", "cases", "failures", "status"]).titled("oracle equivalence");
    let mut ok = true;
    for s in &suites {
        let pass = s.failures.is_empty();
        ok &= pass;
        g.push([
            s.name.to_string(),
            s.cases.to_string(),
            s.failures.len().to_string(),
            if pass { "pass" } else { "FAIL" }.to_string(),
        ]);
        for f in s.failures.iter().take(5) {
            g.note(format!("{}: {f}", s.name));
        }
    }
    g.note(format!("seed={}", ctx.seed));
    Ok((vec![g], ok))
}
