use crate::topology::Coord;

/// Errors raised across the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coordinate ({}, {}) is outside the {x_size}x{y_size} mesh", .coord.x, .coord.y)]
    OutOfMesh {
        coord: Coord,
        x_size: usize,
        y_size: usize,
    },

    #[error("no Y ring: the mesh has no torus wrap links along Y")]
    NoTorusWrap,

    #[error("stride {stride} does not divide x_size {x_size}")]
    StrideMismatch { stride: usize, x_size: usize },

    #[error("offset {offset} must be smaller than stride {stride}")]
    BadOffset { offset: usize, stride: usize },

    #[error("tile of width {width} would straddle a pod seam (pod width {pod_x})")]
    TileStraddlesSeam { width: usize, pod_x: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("element types differ between participants")]
    ElemTypeMismatch,

    #[error("empty participant set")]
    Empty,

    #[error("devices ({}, {}) and ({}, {}) are not on a common row or column", .0.x, .0.y, .1.x, .1.y)]
    NotCollinear(Coord, Coord),

    #[error("invalid cost model: {0}")]
    InvalidCost(String),

    #[error("chip count {0} cannot be arranged as a supported mesh")]
    UnsupportedChipCount(usize),

    #[error("unknown batch size {batch}; known entries: {known:?}")]
    UnknownBatch { batch: u64, known: Vec<u64> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid shard spec: {0}")]
    ShardSpec(String),

    #[error("kernel extent {0} must be odd")]
    EvenKernel(usize),

    #[error("strip of extent {strip} is thinner than the halo width {halo}")]
    StripTooThin { strip: usize, halo: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("k = {k} exceeds the {total} available elements")]
    TopKTooLarge { k: usize, total: usize },

    #[error("optimizer is not shard-local: {0}")]
    NotShardLocal(String),

    #[error("table {table} cannot be placed: {reason}")]
    Placement { table: usize, reason: String },

    #[error("metric needs {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
