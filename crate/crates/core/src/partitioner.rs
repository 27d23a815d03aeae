//! SPMD partitioning kernels, each with an unpartitioned counterpart it
//! must reproduce.
//!
//! Split dimensions use contiguous strips: every strip has
//! `extent / parts` entries and the last one also takes the remainder.

use std::cmp::Ordering;
use std::io;

use serde::{Deserialize, Serialize};

use crate::collectives::{model_parallel_allreduce, ring_all_gather, Direction, Payload};
use crate::error::{Error, Result};
use crate::topology::{Coord, Tile};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Sub-matrix of rows `r0..r1` and columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
        Tensor::from_fn(r1 - r0, c1 - c0, |i, j| self.at(r0 + i, c0 + j))
    }
}

/// Start offsets of `parts` strips over `extent`, plus `extent` itself.
pub fn strip_bounds(extent: usize, parts: usize) -> Vec<usize> {
    let base = extent / parts;
    let mut b: Vec<usize> = (0..parts).map(|i| i * base).collect();
    b.push(extent);
    b
}

fn imbalance(bounds: &[usize]) -> f64 {
    let sizes: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / sizes.len() as f64;
    *sizes.iter().max().unwrap() as f64 / mean
}

/// Dense `a · b`, contraction in ascending index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("inner dimensions differ: {k} vs {k2}")));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// One row of the traffic/flop report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub parts: usize,
    pub elements_moved: u64,
    pub scalar_flops: u64,
    pub imbalance_ratio: f64,
}

pub fn write_reports<W: io::Write>(reports: &[OpReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn check_kernel(kernel: &Tensor) -> Result<usize> {
    let (k, k2) = kernel.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    Ok(k)
}

/// Same-size cross-correlation of the interior of `buf`, a buffer that
/// already carries `h = (k-1)/2` border rows and columns.
fn conv_buffer(buf: &Tensor, kernel: &Tensor, k: usize) -> Tensor {
    let h = (k - 1) / 2;
    let (rows, cols) = (buf.rows() - 2 * h, buf.cols() - 2 * h);
    Tensor::from_fn(rows, cols, |i, j| {
        let mut acc = 0.0f32;
        for a in 0..k {
            for b in 0..k {
                acc += buf.at(i + a, j + b) * kernel.data[a * k + b];
            }
        }
        acc
    })
}

/// 2D cross-correlation with zero "same" padding; `kernel` is k x k with
/// k odd.
pub fn conv2d(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (hgt, wid) = image.dims2()?;
    let k = check_kernel(kernel)?;
    let h = (k - 1) / 2;
    let buf = Tensor::from_fn(hgt + 2 * h, wid + 2 * h, |i, j| {
        if i < h || j < h || i >= hgt + h || j >= wid + h {
            0.0
        } else {
            image.at(i - h, j - h)
        }
    });
    Ok(conv_buffer(&buf, kernel, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConvOutput {
    pub output: Tensor,
    /// Halo elements each device received from its strip neighbors.
    pub halo_per_device: Vec<u64>,
    pub report: OpReport,
}

/// Convolution with the image split into `parts` strips along `split_dim`
/// (0 = rows, 1 = columns). Each device builds its padded buffer from its
/// own strip, the halo received from its neighbors and zeros at the image
/// border, then convolves locally.
pub fn spatial_partition_conv(image: &Tensor, kernel: &Tensor, parts: usize, split_dim: usize) -> Result<SpatialConvOutput> {
    let (hgt, wid) = image.dims2()?;
    let k = check_kernel(kernel)?;
    if !matches!(parts, 1 | 2 | 4 | 8) {
        return Err(Error::InvalidArgument(format!("parts must be 1, 2, 4 or 8, got {parts}")));
    }
    if split_dim > 1 {
        return Err(Error::InvalidArgument(format!("split_dim must be 0 or 1, got {split_dim}")));
    }
    let h = (k - 1) / 2;
    let (extent, cross) = if split_dim == 0 { (hgt, wid) } else { (wid, hgt) };
    let bounds = strip_bounds(extent, parts);
    for w in bounds.windows(2) {
        let strip = w[1] - w[0];
        if strip == 0 || (parts > 1 && strip < h) {
            return Err(Error::StripTooThin { strip, halo: h });
        }
    }
    // Element (along, across) of the image in strip-major orientation.
    let get = |along: usize, across: usize| {
        if split_dim == 0 {
            image.at(along, across)
        } else {
            image.at(across, along)
        }
    };

    let mut halo_per_device = vec![0u64; parts];
    let mut out = Tensor::zeros(vec![hgt, wid]);
    for (d, w) in bounds.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        // Halo lines: `h` from the previous strip, `h` from the next one.
        let recv_before: Vec<Vec<f32>> = if d > 0 {
            (lo - h..lo).map(|r| (0..cross).map(|c| get(r, c)).collect()).collect()
        } else {
            Vec::new()
        };
        let recv_after: Vec<Vec<f32>> = if d + 1 < parts {
            (hi..hi + h).map(|r| (0..cross).map(|c| get(r, c)).collect()).collect()
        } else {
            Vec::new()
        };
        halo_per_device[d] = ((recv_before.len() + recv_after.len()) * cross) as u64;

        let len = hi - lo;
        let local = |r: usize, c: usize| -> f32 {
            // r in 0..len+2h along the split axis, c in 0..cross+2h across.
            if c < h || c >= cross + h {
                return 0.0;
            }
            let c = c - h;
            if r < h {
                recv_before.get(r).map_or(0.0, |v| v[c])
            } else if r < h + len {
                get(lo + r - h, c)
            } else {
                recv_after.get(r - h - len).map_or(0.0, |v| v[c])
            }
        };
        let buf = if split_dim == 0 {
            Tensor::from_fn(len + 2 * h, cross + 2 * h, local)
        } else {
            Tensor::from_fn(cross + 2 * h, len + 2 * h, |i, j| local(j, i))
        };
        let strip = conv_buffer(&buf, kernel, k);
        for i in 0..strip.rows() {
            for j in 0..strip.cols() {
                let (r, c) = if split_dim == 0 { (lo + i, j) } else { (i, lo + j) };
                out.data[r * wid + c] = strip.at(i, j);
            }
        }
    }
    let report = OpReport {
        op: "spatial_conv".into(),
        parts,
        elements_moved: halo_per_device.iter().sum(),
        scalar_flops: (hgt * wid * k * k) as u64,
        imbalance_ratio: imbalance(&bounds),
    };
    Ok(SpatialConvOutput {
        output: out,
        halo_per_device,
        report,
    })
}

/// Dimension of the weight matrix split by [`sharded_matmul_feature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardDim {
    /// Output features: column blocks of W, results gathered.
    F,
    /// Contraction: row blocks of W with matching column blocks of A,
    /// partial products all-reduced.
    D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedMatmulOutput {
    pub output: Tensor,
    pub report: OpReport,
    pub schedule: crate::collectives::CollectiveSchedule,
}

fn model_ring(parts: usize) -> Vec<Coord> {
    (0..parts).map(|x| Coord::new(x, 0)).collect()
}

/// `a · w` with `w` split `parts` ways along `dim`. The split extent is
/// zero-padded up to a multiple of `parts`.
pub fn sharded_matmul_feature(a: &Tensor, w: &Tensor, parts: usize, dim: ShardDim) -> Result<ShardedMatmulOutput> {
    let (b, d) = a.dims2()?;
    let (d2, f) = w.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!("inner dimensions differ: {d} vs {d2}")));
    }
    if parts == 0 {
        return Err(Error::InvalidArgument("parts must be positive".into()));
    }
    match dim {
        ShardDim::F => {
            let fp = f.div_ceil(parts) * parts;
            let chunk = fp / parts;
            let wp = Tensor::from_fn(d, fp, |i, j| if j < f { w.at(i, j) } else { 0.0 });
            let shards: Vec<Payload> = (0..parts)
                .map(|p| Ok(Payload::f32(matmul(a, &wp.block(0, d, p * chunk, (p + 1) * chunk))?.into_data())))
                .collect::<Result<_>>()?;
            let (gathered, schedule) = ring_all_gather(&model_ring(parts), &shards, Direction::Bidirectional)?;
            // Every device holds the concatenated column blocks; reorder.
            let flat = gathered[0].values();
            let output = Tensor::from_fn(b, f, |i, j| flat[(j / chunk) * b * chunk + i * chunk + j % chunk]);
            let moved = ((parts - 1) * b * chunk * parts) as u64;
            Ok(ShardedMatmulOutput {
                output,
                report: OpReport {
                    op: "matmul_split_f".into(),
                    parts,
                    elements_moved: moved,
                    scalar_flops: (b * d * fp) as u64,
                    imbalance_ratio: 1.0,
                },
                schedule,
            })
        }
        ShardDim::D => {
            let dp = d.div_ceil(parts) * parts;
            let chunk = dp / parts;
            let ap = Tensor::from_fn(b, dp, |i, j| if j < d { a.at(i, j) } else { 0.0 });
            let wp = Tensor::from_fn(dp, f, |i, j| if i < d { w.at(i, j) } else { 0.0 });
            let partials: Vec<Payload> = (0..parts)
                .map(|p| {
                    let lo = p * chunk;
                    let hi = lo + chunk;
                    Ok(Payload::f32(matmul(&ap.block(0, b, lo, hi), &wp.block(lo, hi, 0, f))?.into_data()))
                })
                .collect::<Result<_>>()?;
            let tile = Tile::new(Coord::new(0, 0), parts);
            let reduced = model_parallel_allreduce(&tile, &partials, Direction::Bidirectional)?;
            let output = Tensor::new(vec![b, f], reduced.values[0].values().to_vec())?;
            let moved = (2 * (parts - 1) * (b * f).div_ceil(parts) * parts) as u64;
            Ok(ShardedMatmulOutput {
                output,
                report: OpReport {
                    op: "matmul_split_d".into(),
                    parts,
                    elements_moved: moved,
                    scalar_flops: (b * dp * f) as u64,
                    imbalance_ratio: 1.0,
                },
                schedule: reduced.schedule,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShardSpec {
    Replicated,
    Split { dim: usize, parts: usize },
}

impl ShardSpec {
    pub fn validate(&self, shape: &[usize], devices: usize) -> Result<()> {
        if let ShardSpec::Split { dim, parts } = *self {
            if parts == 0 || parts > devices {
                return Err(Error::ShardSpec(format!("{parts} parts on {devices} devices")));
            }
            let extent = *shape
                .get(dim)
                .ok_or_else(|| Error::ShardSpec(format!("dimension {dim} out of range for rank {}", shape.len())))?;
            if extent < parts {
                return Err(Error::ShardSpec(format!("extent {extent} of dimension {dim} is below {parts} parts")));
            }
        }
        if devices == 0 {
            return Err(Error::ShardSpec("no devices".into()));
        }
        Ok(())
    }

    /// Whether `device` holds the element whose coordinate along the split
    /// dimension is `along`.
    fn owns(&self, device: usize, index: &[usize], shape: &[usize]) -> bool {
        match *self {
            ShardSpec::Replicated => true,
            ShardSpec::Split { dim, parts } => {
                let base = shape[dim] / parts;
                let strip = (index[dim] / base).min(parts - 1);
                strip == device
            }
        }
    }

    /// Shape of the block `device` holds, if any.
    pub fn local_shape(&self, device: usize, shape: &[usize]) -> Option<Vec<usize>> {
        match *self {
            ShardSpec::Replicated => Some(shape.to_vec()),
            ShardSpec::Split { dim, parts } => {
                if device >= parts {
                    return None;
                }
                let b = strip_bounds(shape[dim], parts);
                let mut s = shape.to_vec();
                s[dim] = b[device + 1] - b[device];
                Some(s)
            }
        }
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Blocks of `tensor` held by each of `devices` devices under `spec`,
/// elements in row-major order of the block.
pub fn distribute(tensor: &Tensor, spec: ShardSpec, devices: usize) -> Result<Vec<Option<Tensor>>> {
    spec.validate(&tensor.shape, devices)?;
    let mut blocks: Vec<Option<Vec<f32>>> = (0..devices)
        .map(|d| spec.local_shape(d, &tensor.shape).map(|s| Vec::with_capacity(s.iter().product())))
        .collect();
    for (flat, &v) in tensor.data.iter().enumerate() {
        let idx = unravel(flat, &tensor.shape);
        for (d, block) in blocks.iter_mut().enumerate() {
            if let Some(b) = block {
                if spec.owns(d, &idx, &tensor.shape) {
                    b.push(v);
                }
            }
        }
    }
    blocks
        .into_iter()
        .enumerate()
        .map(|(d, b)| b.map(|data| Tensor::new(spec.local_shape(d, &tensor.shape).unwrap(), data)).transpose())
        .collect()
}

/// Reassembles the logical tensor of `shape` from per-device blocks.
pub fn assemble(blocks: &[Option<Tensor>], spec: ShardSpec, shape: &[usize]) -> Result<Tensor> {
    spec.validate(shape, blocks.len())?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut cursors = vec![0usize; blocks.len()];
    for flat in 0..n {
        let idx = unravel(flat, shape);
        let d = (0..blocks.len())
            .find(|&d| blocks[d].is_some() && spec.owns(d, &idx, shape))
            .ok_or_else(|| Error::ShardSpec("element has no owner".into()))?;
        let block = blocks[d].as_ref().unwrap();
        data.push(block.data[cursors[d]]);
        cursors[d] += 1;
    }
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReshardOutput {
    pub blocks: Vec<Option<Tensor>>,
    pub sent: Vec<u64>,
    pub received: Vec<u64>,
    pub report: OpReport,
}

/// Moves `tensor` from layout `from` to `to` over `devices` devices. An
/// element a device needs and lacks is sent by its lowest-numbered owner.
pub fn reshard(tensor: &Tensor, from: ShardSpec, to: ShardSpec, devices: usize) -> Result<ReshardOutput> {
    from.validate(&tensor.shape, devices)?;
    to.validate(&tensor.shape, devices)?;
    let mut sent = vec![0u64; devices];
    let mut received = vec![0u64; devices];
    for flat in 0..tensor.len() {
        let idx = unravel(flat, &tensor.shape);
        let holds = |spec: ShardSpec, d: usize| spec.local_shape(d, &tensor.shape).is_some() && spec.owns(d, &idx, &tensor.shape);
        let sender = (0..devices).find(|&d| holds(from, d)).expect("every element has an owner");
        for (d, r) in received.iter_mut().enumerate() {
            if holds(to, d) && !holds(from, d) {
                *r += 1;
                sent[sender] += 1;
            }
        }
    }
    let blocks = distribute(tensor, to, devices)?;
    let parts = match to {
        ShardSpec::Replicated => devices,
        ShardSpec::Split { parts, .. } => parts,
    };
    let report = OpReport {
        op: "reshard".into(),
        parts,
        elements_moved: received.iter().sum(),
        scalar_flops: 0,
        imbalance_ratio: match to {
            ShardSpec::Replicated => 1.0,
            ShardSpec::Split { dim, parts } => imbalance(&strip_bounds(tensor.shape[dim], parts)),
        },
    };
    Ok(ReshardOutput {
        blocks,
        sent,
        received,
        report,
    })
}

/// Row gather written as `onehot(indices) · table`.
pub fn gather_as_onehot_matmul(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (n, _) = table.dims2()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let onehot = Tensor::from_fn(indices.len(), n, |i, j| if indices[i] == j { 1.0 } else { 0.0 });
    matmul(&onehot, table)
}

/// One-hot gather against a table whose rows are split over `parts`
/// devices; each device contributes the rows it owns and the partial
/// results are all-reduced.
pub fn sharded_gather_onehot(table: &Tensor, indices: &[usize], parts: usize) -> Result<(Tensor, OpReport)> {
    let (n, d) = table.dims2()?;
    if parts == 0 || parts > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows into {parts} parts")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let bounds = strip_bounds(n, parts);
    let partials: Vec<Payload> = bounds
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let onehot = Tensor::from_fn(indices.len(), hi - lo, |i, j| if indices[i] == lo + j { 1.0 } else { 0.0 });
            Ok(Payload::f32(matmul(&onehot, &table.block(lo, hi, 0, d))?.into_data()))
        })
        .collect::<Result<_>>()?;
    let tile = Tile::new(Coord::new(0, 0), parts);
    let reduced = model_parallel_allreduce(&tile, &partials, Direction::Bidirectional)?;
    let out = Tensor::new(vec![indices.len(), d], reduced.values[0].values().to_vec())?;
    let m = indices.len() * d;
    let report = OpReport {
        op: "onehot_gather".into(),
        parts,
        elements_moved: (2 * (parts - 1) * m.div_ceil(parts) * parts) as u64,
        scalar_flops: (indices.len() * n * d) as u64,
        imbalance_ratio: imbalance(&bounds),
    };
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Auto,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReassociateReport {
    /// Operand that received the scalar.
    pub side: Side,
    pub scalar_multiplies: u64,
    /// Multiplies when scaling the product instead.
    pub output_multiplies: u64,
}

/// `s · (a · b)` computed by scaling the operand with fewer elements, or
/// the one named by `hint`.
pub fn scalar_reassociate(s: f32, a: &Tensor, b: &Tensor, hint: Side) -> Result<(Tensor, ReassociateReport)> {
    if !s.is_finite() {
        return Err(Error::InvalidArgument("scalar must be finite".into()));
    }
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let side = match hint {
        Side::Auto if m * k <= k * n => Side::Left,
        Side::Auto => Side::Right,
        h => h,
    };
    let scale = |t: &Tensor| Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|v| s * v).collect(),
    };
    let (out, count) = match side {
        Side::Left => (matmul(&scale(a), b)?, m * k),
        _ => (matmul(a, &scale(b))?, k * n),
    };
    Ok((
        out,
        ReassociateReport {
            side,
            scalar_multiplies: count as u64,
            output_multiplies: (m * n) as u64,
        },
    ))
}

/// Batch normalization of `shards` (each `batch_i x features`) with
/// statistics over the concatenated batch. The group all-reduces the
/// per-feature sums, then the per-feature sums of squared deviations from
/// the group mean.
pub fn distributed_batch_norm(shards: &[Tensor], eps: f32) -> Result<Vec<Tensor>> {
    let first = shards.first().ok_or(Error::Empty)?;
    let c = first.dims2()?.1;
    let mut total = 0usize;
    for s in shards {
        let (b, cc) = s.dims2()?;
        if cc != c {
            return Err(Error::LengthMismatch { expected: c, actual: cc });
        }
        total += b;
    }
    if total == 0 {
        return Err(Error::InvalidArgument("batch norm over an empty batch".into()));
    }
    let tile = Tile::new(Coord::new(0, 0), shards.len());
    let column_sums = |f: &dyn Fn(usize, f32) -> f32| -> Result<Vec<f32>> {
        let partial: Vec<Payload> = shards
            .iter()
            .map(|s| {
                let mut acc = vec![0.0f32; c];
                for i in 0..s.rows() {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += f(j, s.at(i, j));
                    }
                }
                Payload::f32(acc)
            })
            .collect();
        Ok(model_parallel_allreduce(&tile, &partial, Direction::Bidirectional)?.values[0]
            .values()
            .to_vec())
    };
    let n = total as f32;
    let mean: Vec<f32> = column_sums(&|_, x| x)?.into_iter().map(|s| s / n).collect();
    let var: Vec<f32> = column_sums(&|j, x| (x - mean[j]) * (x - mean[j]))?
        .into_iter()
        .map(|s| s / n)
        .collect();
    let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(shards
        .iter()
        .map(|s| Tensor::from_fn(s.rows(), c, |i, j| (s.at(i, j) - mean[j]) * inv[j]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopKEntry {
    pub value: f32,
    pub owner: usize,
    pub index: usize,
}

fn rank(a: &TopKEntry, b: &TopKEntry) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(a.owner.cmp(&b.owner))
        .then(a.index.cmp(&b.index))
}

/// Global top `k` of per-device score lists: local top-k on each device,
/// then a merge. Ties go to the lower (owner, index).
pub fn distributed_top_k(shards: &[Vec<f32>], k: usize) -> Result<Vec<TopKEntry>> {
    let total: usize = shards.iter().map(Vec::len).sum();
    if k > total {
        return Err(Error::TopKTooLarge { k, total });
    }
    if shards.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("scores must not be NaN".into()));
    }
    let mut candidates = Vec::with_capacity(k * shards.len());
    for (owner, scores) in shards.iter().enumerate() {
        let mut local: Vec<TopKEntry> = scores
            .iter()
            .enumerate()
            .map(|(index, &value)| TopKEntry { value, owner, index })
            .collect();
        local.sort_by(rank);
        local.truncate(k);
        candidates.extend(local);
    }
    candidates.sort_by(rank);
    candidates.truncate(k);
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_is_checked() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_kernel() {
        let img = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f32);
        let out = conv2d(&img, &t(1, 1, &[1.0])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let img = Tensor::from_fn(5, 5, |_, _| 2.0);
        let out = conv2d(&img, &Tensor::from_fn(3, 3, |_, _| 1.0)).unwrap();
        assert_eq!(out.at(2, 2), 18.0);
        assert_eq!(out.at(0, 0), 8.0);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let img = Tensor::zeros(vec![4, 4]);
        assert_eq!(conv2d(&img, &Tensor::zeros(vec![2, 2])), Err(Error::EvenKernel(2)));
    }

    #[test]
    fn one_part_has_no_halo() {
        let img = Tensor::from_fn(6, 6, |i, j| (i as f32) - (j as f32) * 0.5);
        let k = Tensor::from_fn(3, 3, |i, j| (i + j) as f32);
        let out = spatial_partition_conv(&img, &k, 1, 0).unwrap();
        assert_eq!(out.output, conv2d(&img, &k).unwrap());
        assert_eq!(out.report.elements_moved, 0);
    }

    #[test]
    fn eight_strips_of_300() {
        let img = Tensor::from_fn(300, 300, |i, j| ((i * 7 + j * 3) % 11) as f32);
        let k = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f32 * 0.25);
        let out = spatial_partition_conv(&img, &k, 8, 0).unwrap();
        assert_eq!(out.halo_per_device[3], 2 * 300);
        assert_eq!(out.halo_per_device[0], 300);
        assert_eq!(out.output, conv2d(&img, &k).unwrap());
    }

    #[test]
    fn thin_strips() {
        let img = Tensor::from_fn(4, 4, |i, j| (i * 4 + j) as f32);
        let k3 = Tensor::from_fn(3, 3, |i, j| (i + 2 * j) as f32);
        let out = spatial_partition_conv(&img, &k3, 4, 1).unwrap();
        assert_eq!(out.output, conv2d(&img, &k3).unwrap());
        let k5 = Tensor::from_fn(5, 5, |_, _| 1.0);
        assert_eq!(
            spatial_partition_conv(&img, &k5, 4, 0).unwrap_err(),
            Error::StripTooThin { strip: 1, halo: 2 }
        );
    }

    #[test]
    fn feature_split_reassembles_w() {
        let a = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = t(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = sharded_matmul_feature(&a, &w, 2, ShardDim::F).unwrap();
        assert_eq!(out.output, w);
        let out = sharded_matmul_feature(&a, &w, 1, ShardDim::D).unwrap();
        assert_eq!(out.output, w);
    }

    #[test]
    fn reshard_rows_to_columns() {
        let x = Tensor::from_fn(4, 4, |i, j| (i * 4 + j) as f32);
        let r = reshard(&x, ShardSpec::Split { dim: 0, parts: 2 }, ShardSpec::Split { dim: 1, parts: 2 }, 2).unwrap();
        assert_eq!(r.sent, vec![4, 4]);
        assert_eq!(r.received, vec![4, 4]);
        assert_eq!(assemble(&r.blocks, ShardSpec::Split { dim: 1, parts: 2 }, &[4, 4]).unwrap(), x);
    }

    #[test]
    fn reshard_to_replicated_and_back() {
        let x = Tensor::from_fn(4, 4, |i, j| (i + j) as f32);
        let split = ShardSpec::Split { dim: 0, parts: 4 };
        let r = reshard(&x, split, ShardSpec::Replicated, 4).unwrap();
        assert_eq!(r.received, vec![12; 4]);
        let same = reshard(&x, split, split, 4).unwrap();
        assert_eq!(same.report.elements_moved, 0);
        assert!(reshard(&x, ShardSpec::Split { dim: 2, parts: 2 }, split, 4).is_err());
    }

    #[test]
    fn onehot_gather() {
        let table = Tensor::from_fn(3, 2, |i, j| (i * 10 + j) as f32);
        assert_eq!(gather_as_onehot_matmul(&table, &[0, 1, 2]).unwrap(), table);
        let dup = gather_as_onehot_matmul(&table, &[2, 2]).unwrap();
        assert_eq!(dup.data(), &[20.0, 21.0, 20.0, 21.0]);
        assert_eq!(
            gather_as_onehot_matmul(&table, &[3]).unwrap_err(),
            Error::IndexOutOfRange { index: 3, len: 3 }
        );
    }

    #[test]
    fn reassociation_picks_smaller_side() {
        let a = Tensor::from_fn(2, 3, |i, j| (i + j) as f32);
        let b = Tensor::from_fn(3, 4, |i, j| (i * j) as f32);
        let (out, rep) = scalar_reassociate(1.0, &a, &b, Side::Auto).unwrap();
        assert_eq!(out, matmul(&a, &b).unwrap());
        assert_eq!((rep.side, rep.scalar_multiplies), (Side::Left, 6));
        let (_, rep) = scalar_reassociate(2.0, &a, &b, Side::Right).unwrap();
        assert_eq!(rep.scalar_multiplies, 12);
    }

    #[test]
    fn batch_norm_constant_is_zero() {
        let shards = vec![Tensor::from_fn(3, 2, |_, _| 0.5), Tensor::from_fn(5, 2, |_, _| 0.5)];
        let out = distributed_batch_norm(&shards, 1e-5).unwrap();
        assert!(out.iter().flat_map(|t| t.data()).all(|&v| v == 0.0));
        assert!(distributed_batch_norm(&[Tensor::zeros(vec![0, 2])], 1e-5).is_err());
    }

    #[test]
    fn top_k_ties_by_owner_then_index() {
        let shards = vec![vec![1.0, 3.0], vec![3.0, 2.0, 3.0]];
        let top = distributed_top_k(&shards, 3).unwrap();
        let key: Vec<(usize, usize)> = top.iter().map(|e| (e.owner, e.index)).collect();
        assert_eq!(key, vec![(0, 1), (1, 0), (1, 2)]);
        assert_eq!(distributed_top_k(&shards, 1).unwrap()[0].value, 3.0);
        assert_eq!(distributed_top_k(&shards, 6).unwrap_err(), Error::TopKTooLarge { k: 6, total: 5 });
    }
}
