//! Choosing the number of objects and templates, the flat baseline, and
//! leave-one-out scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{
    run_em, run_em_flat, AlignmentTable, AssignmentPosterior, EMConfig, EmRun, ExactEnumeration, PoseGrid,
};
use crate::error::{Error, Result};
use crate::grid::{sse_unchecked, transform_grid, OccupancyGrid, Pose};
use crate::model::{penalized_objective, HierModel};
use crate::segmentation::Dataset;

/// `(max_t K_t, Σ_t K_t)`: every snapshot needs an object, and no object
/// can be needed that was never seen.
pub fn candidate_bounds(data: &Dataset) -> Result<(usize, usize)> {
    let total = data.total_snapshots();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((data.max_count(), total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub penalty_n: f64,
    pub penalty_m: f64,
    pub restarts: usize,
    /// Upper limit on N, below the bound implied by the snapshot count.
    pub max_n: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            penalty_n: 35.0,
            penalty_m: 15.0,
            restarts: 5,
            max_n: None,
        }
    }
}

/// Results of every restart in one `(N, M)` cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub m: usize,
    pub seeds: Vec<u64>,
    /// Expected complete log-likelihood per restart; `None` if the run failed.
    pub objectives: Vec<Option<f64>>,
    /// Same minus the size penalty.
    pub penalized: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    /// Best penalized value over restarts, `-inf` when every restart failed.
    #[serde(with = "neg_inf_as_null")]
    pub best: f64,
    pub best_seed: Option<u64>,
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    /// Cells ordered by `(N, M)`.
    pub cells: Vec<Cell>,
    pub best_pair: (usize, usize),
    /// Best run of each cell, aligned with `cells`.
    pub models: Vec<Option<EmRun>>,
    pub penalty_n: f64,
    pub penalty_m: f64,
}

impl SelectionResult {
    pub fn value(&self, n: usize, m: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.n == n && c.m == m).map(|c| c.best)
    }

    pub fn best_value(&self) -> f64 {
        self.value(self.best_pair.0, self.best_pair.1).unwrap_or(f64::NEG_INFINITY)
    }

    /// True when the best cell beats every other cell by more than the tie tolerance.
    pub fn peaks_strictly(&self) -> bool {
        let best = self.best_value();
        self.cells
            .iter()
            .filter(|c| (c.n, c.m) != self.best_pair)
            .all(|c| c.best < best - tie_tolerance(best))
    }

    pub fn best_model(&self) -> Option<&EmRun> {
        let (n, m) = self.best_pair;
        let i = self.cells.iter().position(|c| c.n == n && c.m == m)?;
        self.models[i].as_ref()
    }

    /// Table with one row per M and one column per N; blank where M > N or
    /// the cell was not evaluated, `-inf` where every restart failed.
    pub fn to_csv(&self) -> String {
        let ns: Vec<usize> = dedup(self.cells.iter().map(|c| c.n));
        let ms: Vec<usize> = dedup(self.cells.iter().map(|c| c.m));
        let mut out = format!("# penalty_n={} penalty_m={}\n", self.penalty_n, self.penalty_m);
        out.push_str("M\\N");
        for n in &ns {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
        for &m in &ms {
            out.push_str(&m.to_string());
            for &n in &ns {
                out.push(',');
                if let Some(v) = self.value(n, m) {
                    if v.is_finite() {
                        out.push_str(&format!("{v:.4}"));
                    } else {
                        out.push_str("-inf");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn dedup(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn tie_tolerance(v: f64) -> f64 {
    1e-9 * v.abs().max(1.0)
}

/// A finished run with its raw and penalized objectives.
type Scored = (EmRun, f64, f64);

/// Runs EM on every `(N, M)` with `N_min ≤ N ≤ N_max` and `1 ≤ M ≤ N`,
/// `restarts` times each with seeds `config.seed + r`, and picks the cell with
/// the highest penalized objective. Ties go to smaller N, then smaller M.
pub fn select_model(data: &Dataset, config: &EMConfig, sel: &SelectionConfig) -> Result<SelectionResult> {
    config.validate()?;
    if sel.restarts == 0 {
        return Err(Error::InvalidParameter("need at least one restart".into()));
    }
    if sel.penalty_n < 0.0 || sel.penalty_m < 0.0 {
        return Err(Error::InvalidParameter("penalties must be non-negative".into()));
    }
    let (n_min, mut n_max) = candidate_bounds(data)?;
    if let Some(cap) = sel.max_n {
        n_max = n_max.min(cap.max(n_min));
    }
    let pairs: Vec<(usize, usize)> = (n_min..=n_max).flat_map(|n| (1..=n).map(move |m| (n, m))).collect();
    let jobs: Vec<(usize, usize, u64)> = pairs
        .iter()
        .flat_map(|&(n, m)| (0..sel.restarts as u64).map(move |r| (n, m, r)))
        .collect();
    let runs: Vec<(u64, Result<Scored>)> = jobs
        .par_iter()
        .map(|&(n, m, r)| {
            let seed = config.seed.wrapping_add(r);
            let cfg = EMConfig { seed, ..config.clone() };
            let out = run_em(data, n, m, &cfg).and_then(|run| {
                let pen = penalized_objective(&run.model, data, &run.expectations, sel.penalty_n, sel.penalty_m)?;
                let raw = pen + crate::model::penalty(n, m, sel.penalty_n, sel.penalty_m);
                Ok((run, raw, pen))
            });
            (seed, out)
        })
        .collect();
    let mut cells = Vec::with_capacity(pairs.len());
    let mut models = Vec::with_capacity(pairs.len());
    let mut runs = runs.into_iter();
    for &(n, m) in &pairs {
        let mut cell = Cell {
            n,
            m,
            seeds: Vec::new(),
            objectives: Vec::new(),
            penalized: Vec::new(),
            errors: Vec::new(),
            best: f64::NEG_INFINITY,
            best_seed: None,
        };
        let mut best_run = None;
        for _ in 0..sel.restarts {
            let (seed, out) = runs.next().expect("one result per job");
            cell.seeds.push(seed);
            match out {
                Ok((run, raw, pen)) => {
                    cell.objectives.push(Some(raw));
                    cell.penalized.push(Some(pen));
                    cell.errors.push(None);
                    if pen > cell.best {
                        cell.best = pen;
                        cell.best_seed = Some(seed);
                        best_run = Some(run);
                    }
                }
                Err(e) => {
                    cell.objectives.push(None);
                    cell.penalized.push(None);
                    cell.errors.push(Some(e.to_string()));
                }
            }
        }
        cells.push(cell);
        models.push(best_run);
    }
    let mut best_pair = pairs[0];
    let mut best = f64::NEG_INFINITY;
    for c in &cells {
        if c.best > best + tie_tolerance(best) || (best == f64::NEG_INFINITY && c.best > best) {
            best = c.best;
            best_pair = (c.n, c.m);
        }
    }
    Ok(SelectionResult {
        cells,
        best_pair,
        models,
        penalty_n: sel.penalty_n,
        penalty_m: sel.penalty_m,
    })
}

/// EM with the template level disabled.
pub fn flat_baseline(data: &Dataset, n: usize, config: &EMConfig) -> Result<EmRun> {
    run_em_flat(data, n, config)
}

/// For each snapshot of epoch `t`, the pose that best fits any single object.
fn single_object_poses(table: &AlignmentTable, t: usize, k: usize, objects: &[OccupancyGrid]) -> Vec<Pose> {
    (0..k)
        .map(|k| {
            (0..objects.len())
                .map(|i| {
                    let mut a = vec![0.0; objects.len()];
                    a[i] = 1.0;
                    let pose = table.best_pose(t, k, objects, &a);
                    (table.sse_at(t, k, &pose, &objects[i]), pose)
                })
                .fold((f64::INFINITY, Pose::identity()), |b, c| if c.0 < b.0 { c } else { b })
                .1
        })
        .collect()
}

/// Log-likelihood of the first epoch of `held_out` under a frozen model:
/// alignments are optimized by alternating correspondence posteriors and
/// pose search, and the score is the log of the summed weights of all
/// injective snapshot-to-object assignments at the model's `ρ`.
pub fn holdout_loglik(model: &HierModel, held_out: &Dataset, grid: &PoseGrid) -> Result<f64> {
    holdout_loglik_with(model, held_out, grid, &ExactEnumeration::default())
}

pub fn holdout_loglik_with(
    model: &HierModel,
    held_out: &Dataset,
    grid: &PoseGrid,
    strategy: &dyn AssignmentPosterior,
) -> Result<f64> {
    model.validate()?;
    let Some(snaps) = held_out.epochs().first() else {
        return Ok(0.0);
    };
    if snaps.is_empty() {
        return Ok(0.0);
    }
    let canvas = model.canvas();
    let table = AlignmentTable::new(&held_out.only_epoch(0), canvas, grid)?;
    let mut poses = single_object_poses(&table, 0, snaps.len(), &model.objects);
    let scale = -1.0 / (2.0 * model.rho * model.rho);
    let score = |poses: &[Pose]| {
        let lw: Vec<Vec<f64>> = snaps
            .iter()
            .zip(poses)
            .map(|(s, p)| {
                let aligned = transform_grid(&s.grid, p, canvas);
                model.objects.iter().map(|o| sse_unchecked(&aligned, o) * scale).collect()
            })
            .collect();
        strategy.posterior(snaps[0].epoch, &lw)
    };
    let mut post = score(&poses)?;
    for _ in 0..20 {
        let next = table.best_poses(&model.objects, std::slice::from_ref(&post.marginals));
        if next[0] == poses {
            break;
        }
        poses = next.into_iter().next().expect("one epoch");
        post = score(&poses)?;
    }
    Ok(post.log_normalizer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub held_out_epoch: usize,
    pub hier_train: f64,
    pub hier_test: f64,
    pub flat_train: f64,
    pub flat_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub m: usize,
    pub folds: Vec<FoldScore>,
}

impl EvalReport {
    /// Means of `(hier_train, hier_test, flat_train, flat_test)` over folds.
    pub fn means(&self) -> (f64, f64, f64, f64) {
        let k = self.folds.len().max(1) as f64;
        let sum = self.folds.iter().fold((0.0, 0.0, 0.0, 0.0), |a, f| {
            (a.0 + f.hier_train, a.1 + f.hier_test, a.2 + f.flat_train, a.3 + f.flat_test)
        });
        (sum.0 / k, sum.1 / k, sum.2 / k, sum.3 / k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,held_out_epoch,hier_train,hier_test,flat_train,flat_test\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                f.fold, f.held_out_epoch, f.hier_train, f.hier_test, f.flat_train, f.flat_test
            ));
        }
        let (a, b, c, d) = self.means();
        out.push_str(&format!("mean,,{a:.6},{b:.6},{c:.6},{d:.6}\n"));
        out
    }
}

/// Best of `restarts` runs (seeds `config.seed + r`) by final penalized trace value.
fn best_of(restarts: usize, config: &EMConfig, run: impl Fn(&EMConfig) -> Result<EmRun>) -> Result<EmRun> {
    let mut best: Option<EmRun> = None;
    let mut last_err = None;
    for r in 0..restarts.max(1) as u64 {
        let cfg = EMConfig {
            seed: config.seed.wrapping_add(r),
            ..config.clone()
        };
        match run(&cfg) {
            Ok(out) => {
                let v = out.trace.last().map_or(f64::NEG_INFINITY, |l| l.penalized_objective);
                let cur = best
                    .as_ref()
                    .and_then(|b| b.trace.last())
                    .map_or(f64::NEG_INFINITY, |l| l.penalized_objective);
                if best.is_none() || v > cur {
                    best = Some(out);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

fn mean_epoch_score(model: &HierModel, data: &Dataset, grid: &PoseGrid) -> Result<f64> {
    let t = data.num_epochs();
    let mut total = 0.0;
    for s in 0..t {
        total += holdout_loglik(model, &data.only_epoch(s), grid)?;
    }
    Ok(total / t.max(1) as f64)
}

/// Leave-one-out comparison of the hierarchical model against the flat
/// baseline, both trained with `n` objects (`m` templates for the hierarchy).
pub fn leave_one_out(data: &Dataset, n: usize, m: usize, config: &EMConfig, restarts: usize) -> Result<EvalReport> {
    let t = data.num_epochs();
    if t < 2 {
        return Err(Error::TooFewEpochs { needed: 2, got: t });
    }
    let folds = (0..t)
        .into_par_iter()
        .map(|held| {
            let train = data.without_epoch(held);
            let test = data.only_epoch(held);
            let hier = best_of(restarts, config, |c| run_em(&train, n, m, c))?;
            let flat = best_of(restarts, config, |c| flat_baseline(&train, n, c))?;
            let grid = &config.pose_grid;
            Ok(FoldScore {
                fold: held,
                held_out_epoch: held,
                hier_train: mean_epoch_score(&hier.model, &train, grid)?,
                hier_test: holdout_loglik(&hier.model, &test, grid)?,
                flat_train: mean_epoch_score(&flat.model, &train, grid)?,
                flat_test: holdout_loglik(&flat.model, &test, grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { n, m, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    fn counts(k: &[usize]) -> Dataset {
        Dataset::from_grids(
            k.iter()
                .map(|&c| vec![OccupancyGrid::filled(Dims::square(3), 0.5); c])
                .collect(),
        )
    }

    #[test]
    fn bounds() {
        assert_eq!(candidate_bounds(&counts(&[2, 3, 2])).unwrap(), (3, 7));
        assert_eq!(candidate_bounds(&counts(&[1])).unwrap(), (1, 1));
        assert_eq!(candidate_bounds(&counts(&[4, 4, 4, 4])).unwrap(), (4, 16));
        assert!(matches!(candidate_bounds(&counts(&[0, 0])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn empty_holdout_scores_zero() {
        let model = HierModel {
            templates: vec![OccupancyGrid::filled(Dims::square(5), 0.0)],
            objects: vec![OccupancyGrid::filled(Dims::square(5), 0.0)],
            alignments: vec![vec![]],
            sigma: 0.1,
            rho: 0.1,
            flat: false,
        };
        let v = holdout_loglik(&model, &counts(&[0]), &PoseGrid { radius: 1, rot_step: 1.0 }).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn csv_layout() {
        let cell = |n, m, best| Cell {
            n,
            m,
            seeds: vec![0],
            objectives: vec![Some(best)],
            penalized: vec![Some(best)],
            errors: vec![None],
            best,
            best_seed: Some(0),
        };
        let r = SelectionResult {
            cells: vec![cell(1, 1, -3.0), cell(2, 1, -1.0), cell(2, 2, f64::NEG_INFINITY)],
            best_pair: (2, 1),
            models: vec![None, None, None],
            penalty_n: 35.0,
            penalty_m: 15.0,
        };
        assert_eq!(
            r.to_csv(),
            "# penalty_n=35 penalty_m=15\nM\\N,1,2\n1,-3.0000,-1.0000\n2,,-inf\n"
        );
        assert!(r.peaks_strictly());
        let json = serde_json::to_string(&r.cells[2]).unwrap();
        assert!(json.contains("\"best\":null"));
    }
}
