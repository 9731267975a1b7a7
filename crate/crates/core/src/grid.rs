//! Discretized 3D location model.
//!
//! A [`LocationGrid`] is an axis-aligned box split into `dims.x * dims.y * dims.z`
//! cells. Cells are indexed x-major (x varies slowest, z fastest) so indices are
//! stable across runs. Distances are measured between cell centers.
//!
//! The grid also produces space-filling traversals: one 3D Hilbert curve per
//! proper rotation of the cube, used by the protection-set search to enumerate
//! spatially compact windows.

use serde::{Deserialize, Serialize};

/// Number of orientation-preserving rotations of the cube.
pub const CUBE_ROTATIONS: usize = 24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("axis {axis} has {value} cells; cell counts must be powers of two")]
    NotPowerOfTwo { axis: char, value: usize },
    #[error("axis {axis} extent {value} must be finite and positive")]
    BadExtent { axis: char, value: f64 },
    #[error("cell index {index} out of range for grid of {len} cells")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("rotation count {0} must be in 1..=24")]
    BadRotationCount(usize),
}

/// Which distance the caller wants: full 3D Euclidean, or planar with heights ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Metric {
    #[default]
    Spatial,
    Planar,
}

/// Integer lattice coordinates of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lattice {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Lattice {
    pub fn l1(&self, other: &Lattice) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub lattice: Lattice,
    /// Center of the cell in meters.
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrid {
    dims: [usize; 3],
    extent: [f64; 3],
    pitch: [f64; 3],
    cells: Vec<Cell>,
}

impl LocationGrid {
    /// Builds a grid with `dims` cells per axis spanning `extent` meters.
    ///
    /// Every axis count must be a power of two. A count of one is accepted so a
    /// flat (single-layer) map can be modeled.
    pub fn new(dims: [usize; 3], extent: [f64; 3]) -> Result<Self, GridError> {
        for (axis, (&d, &e)) in ['x', 'y', 'z'].iter().zip(dims.iter().zip(extent.iter())) {
            if d == 0 || !d.is_power_of_two() {
                return Err(GridError::NotPowerOfTwo { axis: *axis, value: d });
            }
            if !(e.is_finite() && e > 0.0) {
                return Err(GridError::BadExtent { axis: *axis, value: e });
            }
        }
        let pitch = [
            extent[0] / dims[0] as f64,
            extent[1] / dims[1] as f64,
            extent[2] / dims[2] as f64,
        ];
        let mut cells = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    cells.push(Cell {
                        lattice: Lattice { x, y, z },
                        center: [
                            (x as f64 + 0.5) * pitch[0],
                            (y as f64 + 0.5) * pitch[1],
                            (z as f64 + 0.5) * pitch[2],
                        ],
                    });
                }
            }
        }
        Ok(Self { dims, extent, pitch, cells })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn extent(&self) -> [f64; 3] {
        self.extent
    }

    pub fn pitch(&self) -> [f64; 3] {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> Result<&Cell, GridError> {
        self.cells
            .get(i)
            .ok_or(GridError::IndexOutOfRange { index: i, len: self.cells.len() })
    }

    pub fn lattice(&self, i: usize) -> Lattice {
        self.cells[i].lattice
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        self.cells[i].center
    }

    /// Index of the cell at lattice coordinates, if inside the grid.
    pub fn index_of(&self, l: Lattice) -> Option<usize> {
        if l.x < self.dims[0] && l.y < self.dims[1] && l.z < self.dims[2] {
            Some((l.x * self.dims[1] + l.y) * self.dims[2] + l.z)
        } else {
            None
        }
    }

    /// Euclidean distance in meters between the centers of cells `i` and `j`.
    pub fn distance3(&self, i: usize, j: usize) -> Result<f64, GridError> {
        let a = self.cell(i)?.center;
        let b = self.cell(j)?.center;
        Ok(euclid(a, b, 3))
    }

    /// Like [`distance3`](Self::distance3) with both heights treated as zero.
    pub fn distance2(&self, i: usize, j: usize) -> Result<f64, GridError> {
        let a = self.cell(i)?.center;
        let b = self.cell(j)?.center;
        Ok(euclid(a, b, 2))
    }

    /// Unchecked distance for hot loops; panics on a bad index.
    #[inline]
    pub fn dist(&self, metric: Metric, i: usize, j: usize) -> f64 {
        let a = self.cells[i].center;
        let b = self.cells[j].center;
        match metric {
            Metric::Spatial => euclid(a, b, 3),
            Metric::Planar => euclid(a, b, 2),
        }
    }

    /// Largest center-to-center distance on the grid.
    pub fn max_distance(&self, metric: Metric) -> f64 {
        let last = self.cells.len() - 1;
        self.dist(metric, 0, last)
    }

    /// Cells sharing the horizontal position of `i` keep their column; this returns
    /// the cell at `i`'s (x, y) on the height layer of `layer_of`.
    pub fn with_layer_of(&self, i: usize, layer_of: usize) -> usize {
        let mut l = self.lattice(i);
        l.z = self.lattice(layer_of).z;
        self.index_of(l).expect("layer exists on grid")
    }
}

#[inline]
fn euclid(a: [f64; 3], b: [f64; 3], axes: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..axes {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

/// A signed axis permutation with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rotation {
    /// Output axis `k` reads input axis `perm[k]`.
    perm: [usize; 3],
    flip: [bool; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { perm: [0, 1, 2], flip: [false; 3] };

    /// Applies the rotation to lattice coordinates inside a cube of side `side`.
    pub fn apply(&self, c: [usize; 3], side: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for k in 0..3 {
            let v = c[self.perm[k]];
            out[k] = if self.flip[k] { side - 1 - v } else { v };
        }
        out
    }
}

/// The 24 proper rotations of the cube, identity first.
pub fn cube_rotations() -> Vec<Rotation> {
    const PERMS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    const PARITY: [i32; 6] = [1, -1, -1, 1, 1, -1];
    let mut out = Vec::with_capacity(CUBE_ROTATIONS);
    for (perm, parity) in PERMS.iter().zip(PARITY) {
        for mask in 0..8u8 {
            let flip = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let sign = flip.iter().fold(parity, |s, &f| if f { -s } else { s });
            if sign == 1 {
                out.push(Rotation { perm: *perm, flip });
            }
        }
    }
    debug_assert_eq!(out.len(), CUBE_ROTATIONS);
    out
}

/// Lattice coordinates of Hilbert index `h` on a 3D curve of `bits` levels.
///
/// Skilling's transpose formulation: the index is de-interleaved into three
/// words, Gray-decoded, then the per-level reflections are undone.
pub fn hilbert_point(h: u64, bits: u32) -> [usize; 3] {
    let mut x = [0u64; 3];
    // De-interleave: the most significant index bit lands in x[0].
    for level in 0..bits {
        for (axis, word) in x.iter_mut().enumerate() {
            let bit = (h >> (3 * level + (2 - axis as u32))) & 1;
            *word |= bit << level;
        }
    }
    if bits == 0 {
        return [0; 3];
    }
    let n = 2u64 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u64;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    [x[0] as usize, x[1] as usize, x[2] as usize]
}

/// One rotated Hilbert traversal of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HilbertOrder {
    pub rotation_id: usize,
    /// Cell indices in curve order.
    pub permutation: Vec<usize>,
    /// `inverse[cell] == rank` of the cell in `permutation`.
    pub inverse: Vec<usize>,
}

/// All 24 rotated Hilbert traversals.
pub fn hilbert_orders(grid: &LocationGrid) -> Vec<HilbertOrder> {
    hilbert_orders_n(grid, CUBE_ROTATIONS).expect("24 is a valid rotation count")
}

/// The first `count` rotated traversals (identity first).
///
/// Non-cubic grids are traversed along the curve of the smallest enclosing cube,
/// skipping cells that fall outside the grid.
pub fn hilbert_orders_n(grid: &LocationGrid, count: usize) -> Result<Vec<HilbertOrder>, GridError> {
    if count == 0 || count > CUBE_ROTATIONS {
        return Err(GridError::BadRotationCount(count));
    }
    let side = *grid.dims().iter().max().expect("three axes");
    let bits = side.trailing_zeros();
    let total = (side as u64).pow(3);
    let base: Vec<[usize; 3]> = (0..total).map(|h| hilbert_point(h, bits)).collect();

    Ok(cube_rotations()
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(rotation_id, rot)| {
            let permutation: Vec<usize> = base
                .iter()
                .filter_map(|&c| {
                    let [x, y, z] = rot.apply(c, side);
                    grid.index_of(Lattice { x, y, z })
                })
                .collect();
            let mut inverse = vec![0; permutation.len()];
            for (rank, &cell) in permutation.iter().enumerate() {
                inverse[cell] = rank;
            }
            HilbertOrder { rotation_id, permutation, inverse }
        })
        .collect())
}
