//! Occupancy grids, rigid poses, and the resampling transform shared by every
//! other module.
//!
//! A grid is a dense row-major array of occupancy values in `[0, 1]` with an
//! optional unknown mask. Unknown cells carry no evidence: they are skipped by
//! [`grid_sse`] and produced wherever a transform has no source support.
//!
//! The transform convention: a source grid placed on a canvas at the identity
//! pose sits at the integer offset `floor((canvas - src) / 2)` along each axis.
//! A pose rotates the source about its own centre by `theta` and then shifts
//! it by whole cells `(dx, dy)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per cell used unless a file or caller says otherwise.
pub const DEFAULT_RESOLUTION: f64 = 0.05;

/// Minimum total bilinear weight of known source cells for a resampled cell
/// to count as known.
const SUPPORT_THRESHOLD: f64 = 0.5 - 1e-12;

/// Sample coordinates this close to an integer are snapped onto it, so
/// right-angle rotations and pure translations resample exactly.
const SNAP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize) -> Self {
        Dims { width, height }
    }

    pub const fn square(side: usize) -> Self {
        Dims::new(side, side)
    }

    pub const fn len(&self) -> usize {
        self.width * self.height
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pair(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// A dense occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    dims: Dims,
    resolution: f64,
    cells: Vec<f64>,
    unknown: Option<Vec<bool>>,
}

impl OccupancyGrid {
    /// Builds a fully known grid at the default resolution.
    pub fn new(dims: Dims, cells: Vec<f64>) -> Result<Self> {
        Self::with_resolution(dims, cells, DEFAULT_RESOLUTION)
    }

    pub fn with_resolution(dims: Dims, cells: Vec<f64>, resolution: f64) -> Result<Self> {
        if cells.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "{}x{} grid needs {} cells, got {}",
                dims.width,
                dims.height,
                dims.len(),
                cells.len()
            )));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidGrid(format!("resolution must be positive, got {resolution}")));
        }
        if let Some(bad) = cells.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGrid(format!("cell value {bad} outside [0, 1]")));
        }
        Ok(OccupancyGrid {
            dims,
            resolution,
            cells,
            unknown: None,
        })
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        OccupancyGrid {
            dims,
            resolution: DEFAULT_RESOLUTION,
            cells: vec![value.clamp(0.0, 1.0); dims.len()],
            unknown: None,
        }
    }

    /// Builds a grid from a per-cell function of `(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut cells = Vec::with_capacity(dims.len());
        for y in 0..dims.height {
            for x in 0..dims.width {
                cells.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        OccupancyGrid {
            dims,
            resolution: DEFAULT_RESOLUTION,
            cells,
            unknown: None,
        }
    }

    /// Attaches an unknown mask (`true` = unknown). Masked cell values are reset to 0.
    pub fn with_unknown(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.cells.len() {
            return Err(Error::InvalidGrid(format!(
                "unknown mask has {} entries for {} cells",
                mask.len(),
                self.cells.len()
            )));
        }
        for (v, &u) in self.cells.iter_mut().zip(&mask) {
            if u {
                *v = 0.0;
            }
        }
        self.unknown = if mask.iter().any(|&u| u) { Some(mask) } else { None };
        Ok(self)
    }

    pub fn set_resolution(&mut self, resolution: f64) {
        if resolution > 0.0 && resolution.is_finite() {
            self.resolution = resolution;
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn unknown_mask(&self) -> Option<&[bool]> {
        self.unknown.as_deref()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.dims.width + x
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.cells[self.index(x, y)]
    }

    #[inline]
    pub fn is_known(&self, i: usize) -> bool {
        self.unknown.as_ref().is_none_or(|m| !m[i])
    }

    /// Value at cell `i`, or `None` when the cell is unknown.
    #[inline]
    pub fn known_value(&self, i: usize) -> Option<f64> {
        self.is_known(i).then(|| self.cells[i])
    }

    pub fn known_count(&self) -> usize {
        match &self.unknown {
            None => self.cells.len(),
            Some(m) => m.iter().filter(|&&u| !u).count(),
        }
    }

    /// Sets a known cell value, clamping to `[0, 1]` and clearing any unknown flag.
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = self.index(x, y);
        self.cells[i] = value.clamp(0.0, 1.0);
        if let Some(m) = &mut self.unknown {
            m[i] = false;
        }
    }

    /// Overwrites every cell value, keeping the unknown mask.
    pub(crate) fn replace_cells(&mut self, cells: Vec<f64>) {
        debug_assert_eq!(cells.len(), self.cells.len());
        self.cells = cells;
        if let Some(m) = &self.unknown {
            for (v, &u) in self.cells.iter_mut().zip(m) {
                if u {
                    *v = 0.0;
                }
            }
        }
    }

    fn sample(&self, sx: f64, sy: f64) -> Option<f64> {
        let sx = snap(sx);
        let sy = snap(sy);
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (w, h) = (self.dims.width as i64, self.dims.height as i64);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let x = x0 as i64 + ox;
                let y = y0 as i64 + oy;
                if x < 0 || y < 0 || x >= w || y >= h {
                    continue;
                }
                let i = (y * w + x) as usize;
                if self.is_known(i) {
                    let wt = wx * wy;
                    acc += wt * self.cells[i];
                    wsum += wt;
                }
            }
        }
        (wsum >= SUPPORT_THRESHOLD).then(|| (acc / wsum).clamp(0.0, 1.0))
    }
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// A rigid alignment: whole-cell translation plus a rotation in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPose")]
pub struct Pose {
    pub dx: i32,
    pub dy: i32,
    theta: f64,
}

#[derive(Deserialize)]
struct RawPose {
    dx: i32,
    dy: i32,
    theta: f64,
}

impl From<RawPose> for Pose {
    fn from(p: RawPose) -> Self {
        Pose::new(p.dx, p.dy, p.theta)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(dx: i32, dy: i32, theta: f64) -> Self {
        Pose {
            dx,
            dy,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Pose {
            dx: 0,
            dy: 0,
            theta: 0.0,
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `(cos, sin)` of the rotation with values within 1e-12 of -1, 0, 1 snapped exactly.
    pub fn rotation(&self) -> (f64, f64) {
        let clean = |v: f64| {
            for t in [-1.0, 0.0, 1.0] {
                if (v - t).abs() < 1e-12 {
                    return t;
                }
            }
            v
        };
        (clean(self.theta.cos()), clean(self.theta.sin()))
    }

    /// Key used to break ties between equally good poses: smaller shifts first,
    /// then smaller angles.
    pub fn tie_key(&self) -> (i32, f64, i32, i32) {
        (self.dx.abs() + self.dy.abs(), self.theta, self.dy, self.dx)
    }
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU || (TAU - t) < 1e-12 {
        0.0
    } else {
        t
    }
}

fn centre(d: Dims) -> (f64, f64) {
    ((d.width as f64 - 1.0) / 2.0, (d.height as f64 - 1.0) / 2.0)
}

/// Integer offset of a `src`-sized grid centred on `canvas` at the identity pose.
pub fn canvas_offset(src: Dims, canvas: Dims) -> (i64, i64) {
    (
        (canvas.width as i64 - src.width as i64).div_euclid(2),
        (canvas.height as i64 - src.height as i64).div_euclid(2),
    )
}

/// Canvas position of the source centre under `pose`.
fn anchor(src: Dims, canvas: Dims, pose: &Pose) -> (f64, f64) {
    let (cx, cy) = centre(src);
    let (ox, oy) = canvas_offset(src, canvas);
    (
        cx + ox as f64 + pose.dx as f64,
        cy + oy as f64 + pose.dy as f64,
    )
}

fn resample(src: &OccupancyGrid, canvas: Dims, to_src: impl Fn(f64, f64) -> (f64, f64)) -> OccupancyGrid {
    let mut cells = vec![0.0; canvas.len()];
    let mut unknown = vec![false; canvas.len()];
    for py in 0..canvas.height {
        for px in 0..canvas.width {
            let i = py * canvas.width + px;
            let (sx, sy) = to_src(px as f64, py as f64);
            match src.sample(sx, sy) {
                Some(v) => cells[i] = v,
                None => unknown[i] = true,
            }
        }
    }
    OccupancyGrid {
        dims: canvas,
        resolution: src.resolution,
        cells,
        unknown: unknown.iter().any(|&u| u).then_some(unknown),
    }
}

/// Rotates `src` about its centre by `pose.theta`, shifts it by `(dx, dy)`, and
/// resamples it bilinearly onto a grid of size `canvas`. Canvas cells without
/// source support are 0 and flagged unknown.
pub fn transform_grid(src: &OccupancyGrid, pose: &Pose, canvas: Dims) -> OccupancyGrid {
    let (c, s) = pose.rotation();
    let (cx, cy) = centre(src.dims);
    let (ax, ay) = anchor(src.dims, canvas, pose);
    resample(src, canvas, |px, py| {
        let vx = px - ax;
        let vy = py - ay;
        (c * vx + s * vy + cx, -s * vx + c * vy + cy)
    })
}

/// Undoes [`transform_grid`]: takes a grid living on a canvas and maps it back
/// into the frame of an `original`-sized source that was placed with `pose`.
pub fn inverse_transform_grid(grid: &OccupancyGrid, pose: &Pose, original: Dims) -> OccupancyGrid {
    let (c, s) = pose.rotation();
    let (cx, cy) = centre(original);
    let (ax, ay) = anchor(original, grid.dims, pose);
    resample(grid, original, |qx, qy| {
        let vx = qx - cx;
        let vy = qy - cy;
        (c * vx - s * vy + ax, s * vx + c * vy + ay)
    })
}

/// Sum of squared differences over cells known in both grids.
pub fn grid_sse(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch {
            left: a.dims.pair(),
            right: b.dims.pair(),
        });
    }
    Ok(sse_unchecked(a, b))
}

pub(crate) fn sse_unchecked(a: &OccupancyGrid, b: &OccupancyGrid) -> f64 {
    match (&a.unknown, &b.unknown) {
        (None, None) => a
            .cells
            .iter()
            .zip(&b.cells)
            .map(|(x, y)| (x - y) * (x - y))
            .sum(),
        _ => (0..a.cells.len())
            .filter(|&i| a.is_known(i) && b.is_known(i))
            .map(|i| {
                let d = a.cells[i] - b.cells[i];
                d * d
            })
            .sum(),
    }
}

/// Centres every grid on the smallest canvas that encloses all of them.
/// Added cells are unknown.
pub fn pad_to_common_canvas(grids: &[OccupancyGrid]) -> Vec<OccupancyGrid> {
    let canvas = Dims::new(
        grids.iter().map(|g| g.width()).max().unwrap_or(0),
        grids.iter().map(|g| g.height()).max().unwrap_or(0),
    );
    grids
        .iter()
        .map(|g| {
            if g.dims == canvas {
                g.clone()
            } else {
                transform_grid(g, &Pose::identity(), canvas)
            }
        })
        .collect()
}
