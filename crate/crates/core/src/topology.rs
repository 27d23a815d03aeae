//! 2D mesh/torus device topologies with multipod structure.
//!
//! Pods are concatenated along X; the seam between two pods is crossed by
//! the (longer) cross-pod links. Wrap links are modeled on Y by default and
//! optionally on X.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-based device coordinate. X is the pod-concatenation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub x: usize,
    pub y: usize,
}

impl Coord {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Physical class of a link between two adjacent devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    WithinPod,
    CrossPod,
    TorusWrap,
}

pub const DEFAULT_DEVICES_PER_HOST: usize = 8;

/// A 2D mesh of `x_size * y_size` devices built from `pods` pods laid out
/// along X.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMesh {
    x_size: usize,
    y_size: usize,
    pods: usize,
    y_torus: bool,
    x_torus: bool,
    devices_per_host: usize,
}

impl DeviceMesh {
    pub fn new(x_size: usize, y_size: usize, pods: usize, y_torus: bool, x_torus: bool) -> Result<Self> {
        if x_size == 0 || y_size == 0 || pods == 0 {
            return Err(Error::InvalidMesh("all extents must be at least 1".into()));
        }
        if !x_size.is_multiple_of(pods) {
            return Err(Error::InvalidMesh(format!(
                "x_size {x_size} is not divisible by {pods} pods"
            )));
        }
        Ok(Self {
            x_size,
            y_size,
            pods,
            y_torus,
            x_torus,
            devices_per_host: DEFAULT_DEVICES_PER_HOST,
        })
    }

    /// Mesh of `pods` pods, each `pod_x` by `pod_y`, concatenated along X.
    ///
    /// `build_multipod(4, 32, 32, true)` is the 128x32 multipod with
    /// torus wraps on the Y edges.
    pub fn build_multipod(pods: usize, pod_x: usize, pod_y: usize, y_torus: bool) -> Result<Self> {
        if pod_x == 0 {
            return Err(Error::InvalidMesh("pod_x must be at least 1".into()));
        }
        Self::new(pods * pod_x, pod_y, pods, y_torus, false)
    }

    pub fn with_x_torus(mut self, x_torus: bool) -> Self {
        self.x_torus = x_torus;
        self
    }

    pub fn with_devices_per_host(mut self, devices_per_host: usize) -> Result<Self> {
        if devices_per_host == 0 {
            return Err(Error::InvalidMesh("devices_per_host must be at least 1".into()));
        }
        self.devices_per_host = devices_per_host;
        Ok(self)
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn pods(&self) -> usize {
        self.pods
    }

    pub fn pod_x(&self) -> usize {
        self.x_size / self.pods
    }

    pub fn y_torus(&self) -> bool {
        self.y_torus
    }

    pub fn x_torus(&self) -> bool {
        self.x_torus
    }

    pub fn devices_per_host(&self) -> usize {
        self.devices_per_host
    }

    pub fn num_devices(&self) -> usize {
        self.x_size * self.y_size
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x < self.x_size && c.y < self.y_size
    }

    pub fn check(&self, c: Coord) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::OutOfMesh {
                coord: c,
                x_size: self.x_size,
                y_size: self.y_size,
            })
        }
    }

    /// All devices in row-major order (X fastest).
    pub fn devices(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.y_size).flat_map(move |y| (0..self.x_size).map(move |x| Coord::new(x, y)))
    }

    pub fn linear_index(&self, c: Coord) -> usize {
        c.y * self.x_size + c.x
    }

    /// Host owning `c`. Hosts own contiguous blocks of `devices_per_host`
    /// devices in row-major order.
    pub fn host_of(&self, c: Coord) -> Result<usize> {
        self.check(c)?;
        Ok(self.linear_index(c) / self.devices_per_host)
    }

    pub fn num_hosts(&self) -> usize {
        self.num_devices().div_ceil(self.devices_per_host)
    }

    /// Class of the direct link between `a` and `b`, or `None` if they are
    /// not adjacent.
    pub fn link_class(&self, a: Coord, b: Coord) -> Option<LinkClass> {
        if !self.contains(a) || !self.contains(b) || a == b {
            return None;
        }
        if a.x == b.x {
            let (lo, hi) = (a.y.min(b.y), a.y.max(b.y));
            if hi - lo == 1 {
                return Some(LinkClass::WithinPod);
            }
            if self.y_torus && lo == 0 && hi == self.y_size - 1 {
                return Some(LinkClass::TorusWrap);
            }
            return None;
        }
        if a.y == b.y {
            let (lo, hi) = (a.x.min(b.x), a.x.max(b.x));
            if hi - lo == 1 {
                return Some(if hi % self.pod_x() == 0 {
                    LinkClass::CrossPod
                } else {
                    LinkClass::WithinPod
                });
            }
            if self.x_torus && lo == 0 && hi == self.x_size - 1 {
                return Some(LinkClass::TorusWrap);
            }
        }
        None
    }

    /// Mesh-adjacent devices of `d`, including torus wraps.
    pub fn neighbors(&self, d: Coord) -> Result<BTreeSet<(Coord, LinkClass)>> {
        self.check(d)?;
        let mut candidates = Vec::with_capacity(4);
        if d.x > 0 {
            candidates.push(Coord::new(d.x - 1, d.y));
        }
        if d.x + 1 < self.x_size {
            candidates.push(Coord::new(d.x + 1, d.y));
        }
        if d.y > 0 {
            candidates.push(Coord::new(d.x, d.y - 1));
        }
        if d.y + 1 < self.y_size {
            candidates.push(Coord::new(d.x, d.y + 1));
        }
        if self.x_torus && self.x_size > 2 {
            if d.x == 0 {
                candidates.push(Coord::new(self.x_size - 1, d.y));
            } else if d.x == self.x_size - 1 {
                candidates.push(Coord::new(0, d.y));
            }
        }
        if self.y_torus && self.y_size > 2 {
            if d.y == 0 {
                candidates.push(Coord::new(d.x, self.y_size - 1));
            } else if d.y == self.y_size - 1 {
                candidates.push(Coord::new(d.x, 0));
            }
        }
        Ok(candidates
            .into_iter()
            .filter_map(|n| self.link_class(d, n).map(|class| (n, class)))
            .collect())
    }

    /// Every undirected link once, as `(lower, higher, class)`.
    pub fn links(&self) -> Vec<(Coord, Coord, LinkClass)> {
        let mut out = Vec::new();
        for d in self.devices() {
            for (n, class) in self.neighbors(d).expect("device from iterator") {
                if d < n {
                    out.push((d, n, class));
                }
            }
        }
        out
    }

    /// Devices visible under sparse routing: everything sharing `d`'s row
    /// or column, excluding `d`.
    pub fn visible_set(&self, d: Coord) -> Result<BTreeSet<Coord>> {
        self.check(d)?;
        let row = (0..self.x_size).filter(|&x| x != d.x).map(|x| Coord::new(x, d.y));
        let col = (0..self.y_size).filter(|&y| y != d.y).map(|y| Coord::new(d.x, y));
        Ok(row.chain(col).collect())
    }

    /// Size of [`visible_set`](Self::visible_set) without materializing it.
    pub fn visible_count(&self) -> usize {
        (self.x_size - 1) + (self.y_size - 1)
    }

    /// The Y column at `x` as a cycle, usable for bidirectional ring
    /// collectives. A single-row mesh yields a singleton cycle even
    /// without wrap links.
    pub fn ring_y(&self, x: usize) -> Result<Vec<Coord>> {
        self.check(Coord::new(x, 0))?;
        if self.y_size > 1 && !self.y_torus {
            return Err(Error::NoTorusWrap);
        }
        Ok((0..self.y_size).map(|y| Coord::new(x, y)).collect())
    }

    /// The X reduction group of model-parallel peer `offset` on row `y`:
    /// `(offset, y), (offset + stride, y), ...`. Stride 1 is the full row.
    pub fn ring_x_with_stride(&self, y: usize, stride: usize, offset: usize) -> Result<Vec<Coord>> {
        self.check(Coord::new(0, y))?;
        self.check_stride(stride)?;
        if offset >= stride {
            return Err(Error::BadOffset { offset, stride });
        }
        Ok((offset..self.x_size).step_by(stride).map(|x| Coord::new(x, y)).collect())
    }

    pub fn check_stride(&self, stride: usize) -> Result<()> {
        if stride == 0 || !self.x_size.is_multiple_of(stride) {
            return Err(Error::StrideMismatch {
                stride,
                x_size: self.x_size,
            });
        }
        Ok(())
    }

    /// Partition the mesh into model-parallel tiles of `width` consecutive
    /// X devices. Tiles stay inside a pod unless `allow_straddle` is set.
    pub fn tiles(&self, width: usize, allow_straddle: bool) -> Result<Vec<Tile>> {
        self.check_stride(width)?;
        if !allow_straddle && !self.pod_x().is_multiple_of(width) {
            return Err(Error::TileStraddlesSeam {
                width,
                pod_x: self.pod_x(),
            });
        }
        Ok((0..self.y_size)
            .flat_map(|y| (0..self.x_size).step_by(width).map(move |x| Tile::new(Coord::new(x, y), width)))
            .collect())
    }
}

/// A model-parallel group: `width` consecutive devices along X on one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub anchor: Coord,
    pub width: usize,
}

impl Tile {
    pub fn new(anchor: Coord, width: usize) -> Self {
        Self { anchor, width }
    }

    pub fn devices(&self) -> Vec<Coord> {
        (0..self.width)
            .map(|i| Coord::new(self.anchor.x + i, self.anchor.y))
            .collect()
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.y == self.anchor.y && c.x >= self.anchor.x && c.x < self.anchor.x + self.width
    }
}
