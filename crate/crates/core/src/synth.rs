//! Synthetic environments with known templates, objects, and placements.
//!
//! A scenario is a walled room plus a schedule saying which objects stand
//! where in each epoch. Rendering composites the placed objects into the room
//! and adds per-cell Gaussian noise.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::em::{AlignmentTable, PoseGrid};
use crate::error::{Error, Result};
use crate::grid::{canvas_offset, sse_unchecked, transform_grid, Dims, OccupancyGrid, Pose};
use crate::io::{read_pgm, write_pgm, PgmFormat};
use crate::model::HierModel;
use crate::segmentation::Dataset;

/// Shape library. Every shape is rasterized with value 1 inside and framed by
/// a one-cell border of zeros.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Box { side: usize },
    Disc { diameter: usize },
    /// A square with its upper-right quarter cut away.
    LShape { side: usize },
}

impl Shape {
    pub fn rasterize(&self) -> OccupancyGrid {
        let side = match *self {
            Shape::Box { side } | Shape::LShape { side } => side,
            Shape::Disc { diameter } => diameter,
        };
        let shape = *self;
        OccupancyGrid::from_fn(Dims::square(side + 2), move |x, y| {
            if x == 0 || y == 0 || x > side || y > side {
                return 0.0;
            }
            let (u, v) = (x - 1, y - 1);
            let inside = match shape {
                Shape::Box { .. } => true,
                Shape::Disc { diameter } => {
                    let c = (diameter as f64 - 1.0) / 2.0;
                    let r = diameter as f64 / 2.0;
                    let (du, dv) = (u as f64 - c, v as f64 - c);
                    du * du + dv * dv <= r * r
                }
                Shape::LShape { side } => !(u >= side / 2 && v < side / 2),
            };
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// How objects are switched on and off across epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PresenceSpec {
    All,
    /// Each object is present independently with probability `prob`; draws
    /// are rejected until every epoch holds between `min_per_epoch` and
    /// `max_per_epoch` objects, every object appears at least
    /// `min_appearances` times, and each pair in `together` shares an epoch.
    Random {
        prob: f64,
        min_per_epoch: usize,
        max_per_epoch: usize,
        min_appearances: usize,
        together: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub room: (usize, usize),
    pub templates: Vec<Shape>,
    /// Template index of every object.
    pub objects: Vec<usize>,
    pub epochs: usize,
    pub presence: PresenceSpec,
    /// Standard deviation of the per-object cell deviations from its template.
    pub deviation: f64,
    /// Standard deviation of the per-cell map noise.
    pub noise: f64,
    /// Placement angles are multiples of π/2 when true, otherwise any angle in [0, 2π).
    pub right_angles: bool,
    pub max_attempts: usize,
}

impl GeneratorSpec {
    /// Four objects (two share a shape) in four epochs, all present.
    pub fn study_room() -> Self {
        GeneratorSpec {
            room: (40, 40),
            templates: library(),
            objects: vec![0, 0, 1, 2],
            epochs: 4,
            presence: PresenceSpec::All,
            deviation: 0.03,
            noise: 0.05,
            right_angles: true,
            max_attempts: 2000,
        }
    }

    /// Same objects over nine epochs, two or three present at a time.
    pub fn robotics_lab() -> Self {
        GeneratorSpec {
            epochs: 9,
            presence: PresenceSpec::Random {
                prob: 0.65,
                min_per_epoch: 2,
                max_per_epoch: 3,
                min_appearances: 3,
                together: vec![(0, 1)],
            },
            ..Self::study_room()
        }
    }

    /// Six objects drawn from two shapes, all present in every epoch.
    pub fn shared_shapes() -> Self {
        GeneratorSpec {
            room: (44, 44),
            templates: vec![Shape::Box { side: 5 }, Shape::LShape { side: 6 }],
            objects: vec![0, 0, 0, 1, 1, 1],
            epochs: 5,
            presence: PresenceSpec::All,
            deviation: 0.03,
            noise: 0.1,
            right_angles: true,
            max_attempts: 2000,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "study-room" => Ok(Self::study_room()),
            "robotics-lab" => Ok(Self::robotics_lab()),
            "shared-shapes" => Ok(Self::shared_shapes()),
            _ => Err(Error::InvalidParameter(format!(
                "unknown preset {name:?} (expected study-room, robotics-lab, or shared-shapes)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.templates.is_empty() || self.objects.is_empty() {
            return bad("need at least one template and one object".into());
        }
        if let Some(&t) = self.objects.iter().find(|&&t| t >= self.templates.len()) {
            return bad(format!("object references template {t} of {}", self.templates.len()));
        }
        if self.epochs == 0 {
            return bad("need at least one epoch".into());
        }
        if !(self.deviation >= 0.0 && self.noise >= 0.0) {
            return bad("deviation and noise must be non-negative".into());
        }
        let biggest = self.templates.iter().map(|s| s.rasterize().width()).max().unwrap_or(0);
        if self.room.0 < biggest + 2 || self.room.1 < biggest + 2 {
            return bad(format!("room {:?} cannot hold a {biggest}-cell shape", self.room));
        }
        if let PresenceSpec::Random {
            prob,
            min_per_epoch,
            max_per_epoch,
            together,
            ..
        } = &self.presence
        {
            let n = self.objects.len();
            if !(0.0..=1.0).contains(prob) || min_per_epoch > max_per_epoch || *min_per_epoch > n {
                return bad("inconsistent presence settings".into());
            }
            if together.iter().any(|&(a, b)| a >= n || b >= n || a == b) {
                return bad("presence pair out of range".into());
            }
        }
        Ok(())
    }
}

/// Box of side 5, disc of diameter 7, L of side 6.
pub fn library() -> Vec<Shape> {
    vec![
        Shape::Box { side: 5 },
        Shape::Disc { diameter: 7 },
        Shape::LShape { side: 6 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrueObject {
    pub template: usize,
    pub grid: OccupancyGrid,
}

/// Where an object stands in one epoch; `pose` is `None` when it is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub object: usize,
    pub pose: Option<Pose>,
}

impl Placement {
    pub fn present(&self) -> bool {
        self.pose.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub room: OccupancyGrid,
    pub templates: Vec<OccupancyGrid>,
    pub objects: Vec<TrueObject>,
    /// Per epoch, one placement per object.
    pub schedule: Vec<Vec<Placement>>,
}

/// Cells of a placed grid that belong to the object body.
const BODY_THRESHOLD: f64 = 0.5;

fn walled_room(w: usize, h: usize) -> OccupancyGrid {
    OccupancyGrid::from_fn(Dims::new(w, h), |x, y| {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            1.0
        } else {
            0.0
        }
    })
}

fn sample_presence(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>> {
    let n = spec.objects.len();
    let PresenceSpec::Random {
        prob,
        min_per_epoch,
        max_per_epoch,
        min_appearances,
        together,
    } = &spec.presence
    else {
        return Ok(vec![vec![true; n]; spec.epochs]);
    };
    for _ in 0..spec.max_attempts.max(1) * 10 {
        let mut table = Vec::with_capacity(spec.epochs);
        for _ in 0..spec.epochs {
            loop {
                let row: Vec<bool> = (0..n).map(|_| rng.random_bool(*prob)).collect();
                let k = row.iter().filter(|&&p| p).count();
                if (*min_per_epoch..=*max_per_epoch).contains(&k) {
                    table.push(row);
                    break;
                }
            }
        }
        let enough = (0..n).all(|o| table.iter().filter(|r| r[o]).count() >= *min_appearances);
        let pairs = together
            .iter()
            .all(|&(a, b)| table.iter().any(|r| r[a] && r[b]));
        if enough && pairs {
            return Ok(table);
        }
    }
    Err(Error::PlacementInfeasible {
        epoch: 0,
        attempts: spec.max_attempts * 10,
    })
}

/// Body cells of `grid` placed in the room with `pose`.
fn body(grid: &OccupancyGrid, pose: &Pose, room: Dims) -> Vec<usize> {
    let placed = transform_grid(grid, pose, room);
    (0..room.len())
        .filter(|&j| placed.known_value(j).is_some_and(|v| v >= BODY_THRESHOLD))
        .collect()
}

fn dilate(cells: &[usize], room: Dims, out: &mut [bool]) {
    let (w, h) = (room.width as i64, room.height as i64);
    for &j in cells {
        let (x, y) = ((j % room.width) as i64, (j / room.width) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out[(ny * w + nx) as usize] = true;
                }
            }
        }
    }
}

/// Samples a scenario. Objects in one epoch keep at least one free cell
/// between each other and the walls, and no object body overlaps any body of
/// the previous epoch, so every body cell is seen free in some other epoch.
pub fn gen_scenario(spec: &GeneratorSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = walled_room(spec.room.0, spec.room.1);
    let dims = room.dims();
    let templates: Vec<OccupancyGrid> = spec.templates.iter().map(Shape::rasterize).collect();
    let dev = Normal::new(0.0, spec.deviation.max(f64::MIN_POSITIVE)).expect("finite std");
    let objects: Vec<TrueObject> = spec
        .objects
        .iter()
        .map(|&t| {
            let base = &templates[t];
            let grid = OccupancyGrid::from_fn(base.dims(), |x, y| {
                let d = if spec.deviation > 0.0 { dev.sample(&mut rng) } else { 0.0 };
                base.value(x, y) + d
            });
            TrueObject { template: t, grid }
        })
        .collect();
    let presence = sample_presence(spec, &mut rng)?;
    let walls: Vec<usize> = (0..dims.len()).filter(|&j| room.cells()[j] >= BODY_THRESHOLD).collect();
    let mut schedule: Vec<Vec<Placement>> = Vec::with_capacity(spec.epochs);
    let mut previous: Vec<bool> = vec![false; dims.len()];
    for (t, row) in presence.iter().enumerate() {
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            if let Some(p) = try_epoch(spec, &objects, row, dims, &walls, &previous, &mut rng) {
                placed = Some(p);
                break;
            }
        }
        let (placements, bodies) = placed.ok_or(Error::PlacementInfeasible {
            epoch: t,
            attempts: spec.max_attempts,
        })?;
        previous = bodies;
        schedule.push(placements);
    }
    Ok(Scenario {
        spec: spec.clone(),
        seed,
        room,
        templates,
        objects,
        schedule,
    })
}

fn try_epoch(
    spec: &GeneratorSpec,
    objects: &[TrueObject],
    present: &[bool],
    room: Dims,
    walls: &[usize],
    previous: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Placement>, Vec<bool>)> {
    let mut blocked = vec![false; room.len()];
    dilate(walls, room, &mut blocked);
    let mut bodies = vec![false; room.len()];
    let mut placements: Vec<Placement> = (0..objects.len())
        .map(|o| Placement { object: o, pose: None })
        .collect();
    let mut order: Vec<usize> = (0..objects.len()).filter(|&o| present[o]).collect();
    order.shuffle(rng);
    for o in order {
        let g = &objects[o].grid;
        let (ox, oy) = canvas_offset(g.dims(), room);
        let lo_x = 1 - ox;
        let hi_x = room.width as i64 - 1 - g.width() as i64 - ox;
        let lo_y = 1 - oy;
        let hi_y = room.height as i64 - 1 - g.height() as i64 - oy;
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        let mut done = false;
        for _ in 0..50 {
            let theta = if spec.right_angles {
                rng.random_range(0..4) as f64 * FRAC_PI_2
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            let pose = Pose::new(
                rng.random_range(lo_x..=hi_x) as i32,
                rng.random_range(lo_y..=hi_y) as i32,
                theta,
            );
            let cells = body(g, &pose, room);
            if cells.iter().any(|&j| blocked[j] || previous[j]) {
                continue;
            }
            dilate(&cells, room, &mut blocked);
            for &j in &cells {
                bodies[j] = true;
            }
            placements[o].pose = Some(pose);
            done = true;
            break;
        }
        if !done {
            return None;
        }
    }
    Some((placements, bodies))
}

impl Scenario {
    pub fn num_epochs(&self) -> usize {
        self.schedule.len()
    }

    /// Number of present objects per epoch.
    pub fn present_counts(&self) -> Vec<usize> {
        self.schedule
            .iter()
            .map(|e| e.iter().filter(|p| p.present()).count())
            .collect()
    }

    /// Body cells (map indices) of every present object in epoch `t`.
    pub fn footprints(&self, t: usize) -> Vec<(usize, Vec<usize>)> {
        self.schedule[t]
            .iter()
            .filter_map(|p| p.pose.map(|pose| (p.object, body(&self.objects[p.object].grid, &pose, self.room.dims()))))
            .collect()
    }

    /// Noise-free composite of room and present objects for epoch `t`.
    pub fn clean_map(&self, t: usize) -> OccupancyGrid {
        let dims = self.room.dims();
        let mut cells = self.room.cells().to_vec();
        for p in &self.schedule[t] {
            if let Some(pose) = p.pose {
                let placed = transform_grid(&self.objects[p.object].grid, &pose, dims);
                for (j, c) in cells.iter_mut().enumerate() {
                    if let Some(v) = placed.known_value(j) {
                        *c = c.max(v);
                    }
                }
            }
        }
        let mut g = self.room.clone();
        g.replace_cells(cells);
        g
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pgm(&dir.join("room.pgm"), &self.room, PgmFormat::Binary)?;
        for (m, t) in self.templates.iter().enumerate() {
            write_pgm(&dir.join(format!("true_template_{m}.pgm")), t, PgmFormat::Binary)?;
        }
        for (n, o) in self.objects.iter().enumerate() {
            write_pgm(&dir.join(format!("true_object_{n}.pgm")), &o.grid, PgmFormat::Binary)?;
        }
        let file = ScenarioFile {
            seed: self.seed,
            spec: self.spec.clone(),
            object_templates: self.objects.iter().map(|o| o.template).collect(),
            schedule: self.schedule.clone(),
        };
        let path = dir.join("scenario.json");
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a scenario written by [`Scenario::save`]. Grids come back
    /// quantized to 8 bits.
    pub fn load(dir: &Path) -> Result<Scenario> {
        let path = dir.join("scenario.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let templates = (0..file.spec.templates.len())
            .map(|m| read_pgm(&dir.join(format!("true_template_{m}.pgm"))))
            .collect::<Result<Vec<_>>>()?;
        let objects = file
            .object_templates
            .iter()
            .enumerate()
            .map(|(n, &template)| {
                Ok(TrueObject {
                    template,
                    grid: read_pgm(&dir.join(format!("true_object_{n}.pgm")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            spec: file.spec,
            seed: file.seed,
            room: read_pgm(&dir.join("room.pgm"))?,
            templates,
            objects,
            schedule: file.schedule,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    seed: u64,
    spec: GeneratorSpec,
    object_templates: Vec<usize>,
    schedule: Vec<Vec<Placement>>,
}

/// One map per epoch: the clean composite plus clamped Gaussian noise.
pub fn render_maps(scenario: &Scenario) -> Vec<OccupancyGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, scenario.spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    (0..scenario.num_epochs())
        .map(|t| {
            let clean = scenario.clean_map(t);
            if scenario.spec.noise == 0.0 {
                return clean;
            }
            let cells = clean
                .cells()
                .iter()
                .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            let mut g = clean;
            g.replace_cells(cells);
            g
        })
        .collect()
}

/// Comparison of a learned model against the scenario's truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    /// RMSE per true object against its matched model object.
    pub object_rmse: Vec<f64>,
    /// RMSE per true template against its matched model template.
    pub template_rmse: Vec<f64>,
    /// Fraction of matched objects whose most likely template is the matched
    /// counterpart of their true template.
    pub accuracy: f64,
    /// `object_match[j]`: model object matched to true object `j`, if any.
    pub object_match: Vec<Option<usize>>,
    pub template_match: Vec<Option<usize>>,
}

impl TruthReport {
    pub fn max_object_rmse(&self) -> f64 {
        self.object_rmse.iter().copied().fold(0.0, f64::max)
    }
}

/// RMSE of `model_grid` against `truth` placed with the best candidate pose,
/// over the cells the placed truth covers.
fn aligned_rmse(truth: &OccupancyGrid, model_grid: &OccupancyGrid, candidates: &[Pose]) -> f64 {
    let canvas = model_grid.dims();
    candidates
        .iter()
        .map(|pose| {
            let placed = transform_grid(truth, pose, canvas);
            let n = placed.known_count().max(1) as f64;
            (sse_unchecked(&placed, model_grid) / n).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Injective matching of rows to columns (or columns to rows when there are
/// fewer columns) minimizing the summed squared cost. Returns `col_of[row]`.
fn best_matching(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let col_match = best_matching(&transposed);
        let mut out = vec![None; rows];
        for (c, r) in col_match.iter().enumerate() {
            if let Some(r) = r {
                out[*r] = Some(c);
            }
        }
        return out;
    }
    fn go(
        r: usize,
        cost: &[Vec<f64>],
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if acc >= best.0 {
            return;
        }
        if r == cost.len() {
            *best = (acc, cur.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(r + 1, cost, used, cur, acc + cost[r][c] * cost[r][c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(0, cost, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best.1.into_iter().map(Some).collect()
}

/// Scores a model against the truth: best alignment per pair, best
/// permutation overall.
pub fn ground_truth_score(model: &HierModel, scenario: &Scenario, grid: &PoseGrid) -> TruthReport {
    let candidates = grid.candidates();
    let obj_cost: Vec<Vec<f64>> = scenario
        .objects
        .iter()
        .map(|t| model.objects.iter().map(|o| aligned_rmse(&t.grid, o, &candidates)).collect())
        .collect();
    let tpl_cost: Vec<Vec<f64>> = scenario
        .templates
        .iter()
        .map(|t| model.templates.iter().map(|m| aligned_rmse(t, m, &candidates)).collect())
        .collect();
    let object_match = best_matching(&obj_cost);
    let template_match = best_matching(&tpl_cost);
    let object_rmse = object_match
        .iter()
        .enumerate()
        .map(|(j, m)| m.map_or(f64::NAN, |i| obj_cost[j][i]))
        .collect();
    let template_rmse = template_match
        .iter()
        .enumerate()
        .map(|(j, m)| m.map_or(f64::NAN, |i| tpl_cost[j][i]))
        .collect();
    let beta = crate::em::estep_beta(model);
    let mut hits = 0;
    let mut total = 0;
    for (j, m) in object_match.iter().enumerate() {
        let Some(i) = m else { continue };
        total += 1;
        let predicted = beta[*i]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
            .0;
        if template_match[scenario.objects[j].template] == Some(predicted) {
            hits += 1;
        }
    }
    TruthReport {
        object_rmse,
        template_rmse,
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        object_match,
        template_match,
    }
}

/// The true hierarchy placed at the identity on `canvas`, with each
/// snapshot's alignment set to its best pose against the object it fits best.
pub fn truth_model(scenario: &Scenario, data: &Dataset, canvas: Dims, grid: &PoseGrid, sigma: f64, rho: f64) -> Result<HierModel> {
    let place = |g: &OccupancyGrid| {
        let t = transform_grid(g, &Pose::identity(), canvas);
        OccupancyGrid::from_fn(canvas, |x, y| t.value(x, y))
    };
    let objects: Vec<OccupancyGrid> = scenario.objects.iter().map(|o| place(&o.grid)).collect();
    let templates: Vec<OccupancyGrid> = scenario.templates.iter().map(place).collect();
    let table = AlignmentTable::new(data, canvas, grid)?;
    let n = objects.len();
    let alignments = data
        .epochs()
        .iter()
        .enumerate()
        .map(|(t, snaps)| {
            (0..snaps.len())
                .map(|k| {
                    (0..n)
                        .map(|i| {
                            let mut a = vec![0.0; n];
                            a[i] = 1.0;
                            let pose = table.best_pose(t, k, &objects, &a);
                            (table.sse_at(t, k, &pose, &objects[i]), pose)
                        })
                        .fold((f64::INFINITY, Pose::identity()), |b, c| if c.0 < b.0 { c } else { b })
                        .1
                })
                .collect()
        })
        .collect();
    let model = HierModel {
        templates,
        objects,
        alignments,
        sigma,
        rho,
        flat: false,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_have_zero_frame() {
        for s in library() {
            let g = s.rasterize();
            let w = g.width();
            for i in 0..w {
                assert_eq!(g.value(i, 0), 0.0);
                assert_eq!(g.value(0, i), 0.0);
                assert_eq!(g.value(i, w - 1), 0.0);
                assert_eq!(g.value(w - 1, i), 0.0);
            }
        }
        let l = Shape::LShape { side: 6 }.rasterize();
        assert_eq!(l.cells().iter().filter(|&&v| v == 1.0).count(), 36 - 9);
        let d = Shape::Disc { diameter: 7 }.rasterize();
        assert_eq!(d.value(4, 4), 1.0);
        assert_eq!(d.value(1, 1), 0.0);
    }

    #[test]
    fn zero_deviation_objects_equal_templates() {
        let spec = GeneratorSpec {
            deviation: 0.0,
            noise: 0.0,
            ..GeneratorSpec::study_room()
        };
        let s = gen_scenario(&spec, 3).unwrap();
        for o in &s.objects {
            assert_eq!(o.grid, s.templates[o.template]);
        }
    }

    #[test]
    fn deterministic() {
        let spec = GeneratorSpec::robotics_lab();
        assert_eq!(gen_scenario(&spec, 11).unwrap(), gen_scenario(&spec, 11).unwrap());
        assert_ne!(gen_scenario(&spec, 11).unwrap(), gen_scenario(&spec, 12).unwrap());
    }

    #[test]
    fn robotics_lab_presence() {
        for seed in 0..5 {
            let s = gen_scenario(&GeneratorSpec::robotics_lab(), seed).unwrap();
            let counts = s.present_counts();
            assert_eq!(counts.len(), 9);
            assert!(counts.iter().all(|&k| (2..=3).contains(&k)));
            assert!(s.schedule.iter().any(|e| e[0].present() && e[1].present()));
        }
    }

    #[test]
    fn placements_are_separated() {
        for seed in 0..5 {
            let s = gen_scenario(&GeneratorSpec::shared_shapes(), seed).unwrap();
            let dims = s.room.dims();
            for t in 0..s.num_epochs() {
                let fp = s.footprints(t);
                for (a, (_, ca)) in fp.iter().enumerate() {
                    let mut near = vec![false; dims.len()];
                    dilate(ca, dims, &mut near);
                    for (_, cb) in fp.iter().skip(a + 1) {
                        assert!(cb.iter().all(|&j| !near[j]));
                    }
                    assert!(ca.iter().all(|&j| s.room.cells()[j] == 0.0));
                }
            }
        }
    }

    #[test]
    fn clean_render_of_empty_room_is_room() {
        let spec = GeneratorSpec {
            noise: 0.0,
            presence: PresenceSpec::Random {
                prob: 0.0,
                min_per_epoch: 0,
                max_per_epoch: 0,
                min_appearances: 0,
                together: vec![],
            },
            ..GeneratorSpec::study_room()
        };
        let s = gen_scenario(&spec, 0).unwrap();
        for m in render_maps(&s) {
            assert_eq!(m, s.room);
        }
    }

    #[test]
    fn single_object_changes_exactly_its_footprint() {
        let spec = GeneratorSpec {
            objects: vec![1],
            deviation: 0.0,
            noise: 0.0,
            epochs: 2,
            ..GeneratorSpec::study_room()
        };
        let s = gen_scenario(&spec, 4).unwrap();
        let map = &render_maps(&s)[0];
        let fp = &s.footprints(0)[0].1;
        for j in 0..map.dims().len() {
            assert_eq!(map.cells()[j] != s.room.cells()[j], fp.contains(&j));
        }
    }

    #[test]
    fn noise_mean_absolute_deviation() {
        // free cells clamp at 0, so the mean is half the half-normal mean
        let spec = GeneratorSpec {
            room: (200, 200),
            objects: vec![],
            noise: 0.05,
            ..GeneratorSpec::study_room()
        };
        let spec = GeneratorSpec {
            objects: vec![0],
            presence: PresenceSpec::Random {
                prob: 0.0,
                min_per_epoch: 0,
                max_per_epoch: 0,
                min_appearances: 0,
                together: vec![],
            },
            epochs: 3,
            ..spec
        };
        let s = gen_scenario(&spec, 9).unwrap();
        let maps = render_maps(&s);
        let free: Vec<f64> = maps
            .iter()
            .flat_map(|m| {
                m.cells()
                    .iter()
                    .zip(s.room.cells())
                    .filter(|(_, r)| **r == 0.0)
                    .map(|(v, _)| *v)
                    .collect::<Vec<_>>()
            })
            .collect();
        assert!(free.len() > 100_000);
        let mean = free.iter().sum::<f64>() / free.len() as f64;
        let expect = 0.05 * (2.0 / std::f64::consts::PI).sqrt() / 2.0;
        assert!((mean - expect).abs() < 5e-4, "{mean} vs {expect}");
    }

    #[test]
    fn matching_prefers_cheapest_assignment() {
        let cost = vec![vec![0.1, 0.9], vec![0.2, 0.3]];
        assert_eq!(best_matching(&cost), vec![Some(0), Some(1)]);
        let wide = vec![vec![0.9, 0.1, 0.5]];
        assert_eq!(best_matching(&wide), vec![Some(1)]);
        let tall = vec![vec![0.9], vec![0.1]];
        assert_eq!(best_matching(&tall), vec![None, Some(0)]);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(GeneratorSpec::preset("office").is_err());
        assert!(GeneratorSpec::preset("study-room").is_ok());
    }
}
