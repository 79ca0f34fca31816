//! Discrete search over snapshot poses.
//!
//! Each snapshot is rotated once per candidate angle onto a canvas enlarged by
//! the translation radius; a translation is then a pure index shift, so the
//! cost of every candidate is a sparse dot product against two per-epoch
//! accumulators of the current objects.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{transform_grid, Dims, OccupancyGrid, Pose};
use crate::segmentation::Dataset;

/// Candidate poses: every integer translation in `[-radius, radius]²`
/// combined with every multiple of `rot_step` in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub radius: u32,
    pub rot_step: f64,
}

impl Default for PoseGrid {
    fn default() -> Self {
        PoseGrid {
            radius: 5,
            rot_step: std::f64::consts::PI / 18.0,
        }
    }
}

impl PoseGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.rot_step > 0.0 && self.rot_step <= TAU) {
            return Err(Error::InvalidParameter(format!(
                "rotation step must lie in (0, 2π], got {}",
                self.rot_step
            )));
        }
        Ok(())
    }

    pub fn rotations(&self) -> Vec<f64> {
        let steps = TAU / self.rot_step;
        let count = if (steps - steps.round()).abs() < 1e-9 {
            steps.round() as usize
        } else {
            steps.ceil() as usize
        };
        (0..count.max(1)).map(|k| k as f64 * self.rot_step).collect()
    }

    /// All candidates, ordered by [`Pose::tie_key`].
    pub fn candidates(&self) -> Vec<Pose> {
        let r = self.radius as i32;
        let mut out = Vec::new();
        for theta in self.rotations() {
            for dy in -r..=r {
                for dx in -r..=r {
                    out.push(Pose::new(dx, dy, theta));
                }
            }
        }
        out.sort_by(|a, b| a.tie_key().partial_cmp(&b.tie_key()).unwrap());
        out
    }
}

/// Square canvas large enough that no candidate pose clips any snapshot.
pub fn model_canvas(data: &Dataset, grid: &PoseGrid) -> Dims {
    let rotations = grid.rotations();
    let mut extent: f64 = 0.0;
    for s in data.snapshots() {
        let (w, h) = (s.grid.width() as f64, s.grid.height() as f64);
        for &t in &rotations {
            let (c, sn) = (t.cos().abs(), t.sin().abs());
            extent = extent.max(w * c + h * sn).max(w * sn + h * c);
        }
    }
    // snap away rounding before taking the ceiling
    let side = (extent - 1e-9).ceil().max(1.0) as usize;
    Dims::square(side + 2 * grid.radius as usize + 2)
}

struct Rotated {
    // (x, y, value) on the enlarged canvas
    cells: Vec<(i32, i32, f64)>,
}

/// Pre-rotated snapshots of one dataset for one canvas and pose grid.
pub struct AlignmentTable {
    canvas: Dims,
    radius: i32,
    rotations: Vec<f64>,
    candidates: Vec<Pose>,
    // [t][k][rotation]
    rotated: Vec<Vec<Vec<Rotated>>>,
}

impl AlignmentTable {
    pub fn new(data: &Dataset, canvas: Dims, grid: &PoseGrid) -> Result<Self> {
        grid.validate()?;
        let radius = grid.radius as i32;
        let big = Dims::new(canvas.width + 2 * grid.radius as usize, canvas.height + 2 * grid.radius as usize);
        let rotations = grid.rotations();
        let rotated = data
            .epochs()
            .iter()
            .map(|snaps| {
                snaps
                    .iter()
                    .map(|s| {
                        rotations
                            .iter()
                            .map(|&theta| {
                                let g = transform_grid(&s.grid, &Pose::new(0, 0, theta), big);
                                let cells = (0..big.len())
                                    .filter_map(|i| {
                                        g.known_value(i).map(|v| {
                                            ((i % big.width) as i32, (i / big.width) as i32, v)
                                        })
                                    })
                                    .collect();
                                Rotated { cells }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(AlignmentTable {
            canvas,
            radius,
            rotations,
            candidates: grid.candidates(),
            rotated,
        })
    }

    pub fn canvas(&self) -> Dims {
        self.canvas
    }

    fn rotation_index(&self, theta: f64) -> usize {
        self.rotations
            .iter()
            .position(|&r| crate::grid::normalize_angle(r) == theta)
            .expect("candidate angle comes from the same grid")
    }

    /// `Σ_n a_n Σ_j (snapshot(pose)[j] - objects[n][j])²` over the snapshot's
    /// known cells, for objects summarized as `t1 = Σ a θ`, `t2 = Σ a θ²`, `mass = Σ a`.
    fn cost(&self, t: usize, k: usize, pose: &Pose, acc: &Accumulator) -> f64 {
        let rot = &self.rotated[t][k][self.rotation_index(pose.theta())];
        let shift_x = pose.dx - self.radius;
        let shift_y = pose.dy - self.radius;
        let (w, h) = (self.canvas.width as i32, self.canvas.height as i32);
        let mut total = 0.0;
        for &(x, y, v) in &rot.cells {
            let px = x + shift_x;
            let py = y + shift_y;
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let j = (py * w + px) as usize;
            total += v * v * acc.mass - 2.0 * v * acc.t1[j] + acc.t2[j];
        }
        total
    }

    /// The cost-minimizing pose for snapshot `(t, k)` with object weights `a`.
    pub fn best_pose(&self, t: usize, k: usize, objects: &[OccupancyGrid], a: &[f64]) -> Pose {
        let acc = Accumulator::new(objects, a, self.canvas);
        self.best_with(t, k, &acc)
    }

    fn best_with(&self, t: usize, k: usize, acc: &Accumulator) -> Pose {
        let mut best = self.candidates[0];
        let mut best_cost = self.cost(t, k, &best, acc);
        for pose in &self.candidates[1..] {
            let c = self.cost(t, k, pose, acc);
            if c < best_cost - 1e-12 * best_cost.abs().max(1.0) {
                best = *pose;
                best_cost = c;
            }
        }
        best
    }

    /// Best pose for every snapshot given `alpha[t][k][n]`.
    pub fn best_poses(&self, objects: &[OccupancyGrid], alpha: &[Vec<Vec<f64>>]) -> Vec<Vec<Pose>> {
        alpha
            .iter()
            .enumerate()
            .map(|(t, rows)| {
                rows.iter()
                    .enumerate()
                    .map(|(k, a)| self.best_pose(t, k, objects, a))
                    .collect()
            })
            .collect()
    }

    /// Per-object SSE for snapshot `(t, k)` at `pose`, via the sparse path.
    pub fn sse_at(&self, t: usize, k: usize, pose: &Pose, object: &OccupancyGrid) -> f64 {
        let acc = Accumulator::new(std::slice::from_ref(object), &[1.0], self.canvas);
        self.cost(t, k, pose, &acc)
    }
}

struct Accumulator {
    mass: f64,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl Accumulator {
    fn new(objects: &[OccupancyGrid], a: &[f64], canvas: Dims) -> Self {
        let mut t1 = vec![0.0; canvas.len()];
        let mut t2 = vec![0.0; canvas.len()];
        let mut mass = 0.0;
        for (o, &w) in objects.iter().zip(a) {
            if w == 0.0 {
                continue;
            }
            mass += w;
            for (j, &v) in o.cells().iter().enumerate() {
                t1[j] += w * v;
                t2[j] += w * v * v;
            }
        }
        Accumulator { mass, t1, t2 }
    }
}

/// Alignment update: each snapshot gets the candidate pose minimizing its
/// alpha-weighted SSE against the objects. Ties go to the smallest
/// `(|dx| + |dy|, θ)`.
pub fn mstep_alignment(
    data: &Dataset,
    objects: &[OccupancyGrid],
    alpha: &[Vec<Vec<f64>>],
    grid: &PoseGrid,
) -> Result<Vec<Vec<Pose>>> {
    let canvas = objects
        .first()
        .map(OccupancyGrid::dims)
        .ok_or_else(|| Error::InvalidParameter("no objects to align against".into()))?;
    let table = AlignmentTable::new(data, canvas, grid)?;
    Ok(table.best_poses(objects, alpha))
}
