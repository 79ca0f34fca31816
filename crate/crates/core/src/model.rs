//! The hierarchical parameter set (templates, objects, alignments, noise
//! levels) and the likelihood terms evaluated on it.
//!
//! All log-likelihoods drop normalizing constants. The expected complete
//! log-likelihood follows the two-term form
//!
//! ```text
//! -Σ_n [ Σ_m beta[n][m] / σ² · SSE(θ_n, φ_m)
//!      + Σ_t Σ_k alpha[t][k][n] / ρ² · SSE(f(μ_kt, δ_kt), θ_n) ]
//! ```
//!
//! while the per-snapshot and per-object terms carry the usual `1 / 2σ²`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grid_sse, sse_unchecked, transform_grid, Dims, OccupancyGrid, Pose};
use crate::io::{read_pgm, write_pgm, PgmFormat};
use crate::segmentation::{Dataset, Snapshot};

#[derive(Clone, Debug, PartialEq)]
pub struct HierModel {
    pub templates: Vec<OccupancyGrid>,
    pub objects: Vec<OccupancyGrid>,
    /// One pose per snapshot, indexed `[epoch][k]`.
    pub alignments: Vec<Vec<Pose>>,
    pub sigma: f64,
    pub rho: f64,
    /// Template level disabled: templates mirror objects and beta is the identity.
    pub flat: bool,
}

/// E-step posteriors over the correspondence variables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    /// `beta[n][m] = p(object n instantiates template m)`.
    pub beta: Vec<Vec<f64>>,
    /// `alpha[t][k][n] = p(snapshot k of epoch t shows object n)`.
    pub alpha: Vec<Vec<Vec<f64>>>,
}

impl Expectations {
    /// Zero-filled expectations shaped for `n` objects, `m` templates, and per-epoch counts.
    pub fn zeros(n: usize, m: usize, counts: &[usize]) -> Self {
        Expectations {
            beta: vec![vec![0.0; m]; n],
            alpha: counts.iter().map(|&k| vec![vec![0.0; n]; k]).collect(),
        }
    }

    /// Largest absolute entry-wise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Expectations) -> f64 {
        let same_shape = self.beta.len() == other.beta.len()
            && self.alpha.len() == other.alpha.len()
            && self.alpha.iter().zip(&other.alpha).all(|(a, b)| a.len() == b.len());
        if !same_shape {
            return f64::INFINITY;
        }
        let rows = |e: &'_ Expectations| -> Vec<Vec<f64>> {
            e.beta
                .iter()
                .cloned()
                .chain(e.alpha.iter().flatten().cloned())
                .collect()
        };
        rows(self)
            .iter()
            .zip(rows(other).iter())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

impl HierModel {
    pub fn n(&self) -> usize {
        self.objects.len()
    }

    pub fn m(&self) -> usize {
        self.templates.len()
    }

    pub fn canvas(&self) -> Dims {
        self.objects
            .first()
            .or(self.templates.first())
            .map(OccupancyGrid::dims)
            .unwrap_or(Dims::new(0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.templates.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "model needs N >= 1 and M >= 1, got N = {} M = {}",
                self.n(),
                self.m()
            )));
        }
        let canvas = self.canvas();
        for g in self.objects.iter().chain(&self.templates) {
            if g.dims() != canvas {
                return Err(Error::DimensionMismatch {
                    left: (canvas.width, canvas.height),
                    right: (g.width(), g.height()),
                });
            }
        }
        if !(self.sigma > 0.0 && self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise levels must be positive, got sigma {} rho {}",
                self.sigma, self.rho
            )));
        }
        Ok(())
    }

    /// Checks that the alignment table matches the dataset's snapshot counts.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let counts = data.counts();
        let ok = self.alignments.len() == counts.len()
            && self.alignments.iter().zip(&counts).all(|(a, &k)| a.len() == k);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "alignment table {:?} does not match snapshot counts {:?}",
                self.alignments.iter().map(Vec::len).collect::<Vec<_>>(),
                counts
            )))
        }
    }

    /// Every snapshot resampled onto the model canvas at its current alignment.
    pub fn aligned_snapshots(&self, data: &Dataset) -> Vec<Vec<OccupancyGrid>> {
        let canvas = self.canvas();
        data.epochs()
            .iter()
            .zip(&self.alignments)
            .map(|(snaps, poses)| {
                snaps
                    .iter()
                    .zip(poses)
                    .map(|(s, p)| transform_grid(&s.grid, p, canvas))
                    .collect()
            })
            .collect()
    }

    /// Writes `template_<m>.pgm`, `object_<n>.pgm`, and `model.json`.
    pub fn save(&self, dir: &Path, exp: &Expectations) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, t) in self.templates.iter().enumerate() {
            write_pgm(&dir.join(format!("template_{m}.pgm")), t, PgmFormat::Binary)?;
        }
        for (n, o) in self.objects.iter().enumerate() {
            write_pgm(&dir.join(format!("object_{n}.pgm")), o, PgmFormat::Binary)?;
        }
        let meta = ModelFile {
            n: self.n(),
            m: self.m(),
            sigma: self.sigma,
            rho: self.rho,
            flat: self.flat,
            canvas: self.canvas(),
            alignments: self.alignments.clone(),
            expectations: exp.clone(),
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(HierModel, Expectations)> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let templates = (0..meta.m)
            .map(|m| read_pgm(&dir.join(format!("template_{m}.pgm"))))
            .collect::<Result<Vec<_>>>()?;
        let objects = (0..meta.n)
            .map(|n| read_pgm(&dir.join(format!("object_{n}.pgm"))))
            .collect::<Result<Vec<_>>>()?;
        let model = HierModel {
            templates,
            objects,
            alignments: meta.alignments,
            sigma: meta.sigma,
            rho: meta.rho,
            flat: meta.flat,
        };
        model.validate()?;
        Ok((model, meta.expectations))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    m: usize,
    sigma: f64,
    rho: f64,
    flat: bool,
    canvas: Dims,
    alignments: Vec<Vec<Pose>>,
    expectations: Expectations,
}

/// Log-likelihood of one snapshot under an object at a given alignment.
pub fn snapshot_loglik(snapshot: &Snapshot, object: &OccupancyGrid, pose: &Pose, rho: f64) -> f64 {
    let aligned = transform_grid(&snapshot.grid, pose, object.dims());
    -sse_unchecked(&aligned, object) / (2.0 * rho * rho)
}

/// Log-likelihood of an object under a template.
pub fn object_loglik(object: &OccupancyGrid, template: &OccupancyGrid, sigma: f64) -> Result<f64> {
    Ok(-grid_sse(object, template)? / (2.0 * sigma * sigma))
}

fn check_expectations(model: &HierModel, data: &Dataset, exp: &Expectations) -> Result<()> {
    let counts = data.counts();
    let ok = exp.beta.len() == model.n()
        && exp.beta.iter().all(|r| r.len() == model.m())
        && exp.alpha.len() == counts.len()
        && exp
            .alpha
            .iter()
            .zip(&counts)
            .all(|(a, &k)| a.len() == k && a.iter().all(|r| r.len() == model.n()));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "expectation shapes do not match model and data".into(),
        ))
    }
}

/// Template-level and data-level SSE tables: `coupling[n][m]` and `data[t][k][n]`.
pub(crate) struct SseTables {
    pub coupling: Vec<Vec<f64>>,
    pub data: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn sse_tables(model: &HierModel, aligned: &[Vec<OccupancyGrid>]) -> SseTables {
    let coupling = model
        .objects
        .iter()
        .map(|o| model.templates.iter().map(|t| sse_unchecked(o, t)).collect())
        .collect();
    let data = aligned
        .iter()
        .map(|snaps| {
            snaps
                .iter()
                .map(|s| model.objects.iter().map(|o| sse_unchecked(s, o)).collect())
                .collect()
        })
        .collect();
    SseTables { coupling, data }
}

pub(crate) fn objective_from_tables(tables: &SseTables, exp: &Expectations, sigma: f64, rho: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2 = rho * rho;
    let mut total = 0.0;
    for (brow, crow) in exp.beta.iter().zip(&tables.coupling) {
        for (b, c) in brow.iter().zip(crow) {
            total += b / s2 * c;
        }
    }
    for (at, dt) in exp.alpha.iter().zip(&tables.data) {
        for (arow, drow) in at.iter().zip(dt) {
            for (a, d) in arow.iter().zip(drow) {
                total += a / r2 * d;
            }
        }
    }
    -total
}

/// The expected complete log-likelihood at the model's current `σ`, `ρ`.
pub fn expected_complete_loglik(model: &HierModel, data: &Dataset, exp: &Expectations) -> Result<f64> {
    model.validate()?;
    model.check_data(data)?;
    check_expectations(model, data, exp)?;
    let aligned = model.aligned_snapshots(data);
    let tables = sse_tables(model, &aligned);
    Ok(objective_from_tables(&tables, exp, model.sigma, model.rho))
}

/// Expected complete log-likelihood minus `c_theta · N + c_phi · M`.
pub fn penalized_objective(
    model: &HierModel,
    data: &Dataset,
    exp: &Expectations,
    c_theta: f64,
    c_phi: f64,
) -> Result<f64> {
    if c_theta < 0.0 || c_phi < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "penalties must be non-negative, got {c_theta} and {c_phi}"
        )));
    }
    Ok(expected_complete_loglik(model, data, exp)? - penalty(model.n(), model.m(), c_theta, c_phi))
}

pub(crate) fn penalty(n: usize, m: usize, c_theta: f64, c_phi: f64) -> f64 {
    c_theta * n as f64 + c_phi * m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgrid(rng: &mut ChaCha8Rng, d: Dims) -> OccupancyGrid {
        OccupancyGrid::from_fn(d, |_, _| rng.random::<f64>())
    }

    fn snap(grid: OccupancyGrid) -> Snapshot {
        Snapshot {
            grid,
            epoch: 0,
            index: 0,
            origin: (0, 0),
        }
    }

    /// Random model/data/expectations with every snapshot already on the canvas.
    fn instance(seed: u64, n: usize, m: usize, counts: &[usize]) -> (HierModel, Dataset, Expectations) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims::square(3);
        let data = Dataset::from_grids(
            counts
                .iter()
                .map(|&k| (0..k).map(|_| rgrid(&mut rng, d)).collect())
                .collect(),
        );
        let model = HierModel {
            templates: (0..m).map(|_| rgrid(&mut rng, d)).collect(),
            objects: (0..n).map(|_| rgrid(&mut rng, d)).collect(),
            alignments: counts.iter().map(|&k| vec![Pose::identity(); k]).collect(),
            sigma: 0.3 + rng.random::<f64>(),
            rho: 0.3 + rng.random::<f64>(),
            flat: false,
        };
        let mut exp = Expectations::zeros(n, m, counts);
        for row in exp.beta.iter_mut().chain(exp.alpha.iter_mut().flatten()) {
            for v in row.iter_mut() {
                *v = rng.random::<f64>();
            }
        }
        (model, data, exp)
    }

    #[test]
    fn snapshot_loglik_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = rgrid(&mut rng, Dims::square(4));
        assert_eq!(snapshot_loglik(&snap(o.clone()), &o, &Pose::identity(), 0.2), 0.0);

        let a = OccupancyGrid::new(Dims::new(2, 1), vec![1.0, 0.0]).unwrap();
        let b = OccupancyGrid::new(Dims::new(2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(snapshot_loglik(&snap(a), &b, &Pose::identity(), 1.0), -1.0);

        let s = rgrid(&mut rng, Dims::square(4));
        let rho = 0.37;
        let mut sse = 0.0;
        for (x, y) in s.cells().iter().zip(o.cells()) {
            sse += (x - y) * (x - y);
        }
        approx::assert_relative_eq!(
            snapshot_loglik(&snap(s), &o, &Pose::identity(), rho),
            -sse / (2.0 * rho * rho),
            max_relative = 1e-12
        );
    }

    #[test]
    fn object_loglik_cases() {
        let t = OccupancyGrid::filled(Dims::square(2), 0.0);
        assert_eq!(object_loglik(&t, &t, 0.5).unwrap(), 0.0);
        let mut o = t.clone();
        o.set(1, 0, 1.0);
        assert_eq!(object_loglik(&o, &t, 1.0).unwrap(), -0.5);
        assert!(object_loglik(&o, &OccupancyGrid::filled(Dims::square(3), 0.0), 1.0).is_err());
    }

    #[test]
    fn zero_expectations_give_zero() {
        let (model, data, _) = instance(1, 3, 2, &[2, 1]);
        let exp = Expectations::zeros(3, 2, &[2, 1]);
        assert_eq!(expected_complete_loglik(&model, &data, &exp).unwrap(), 0.0);
    }

    #[test]
    fn single_term_hand_sum() {
        let o = OccupancyGrid::new(Dims::new(2, 1), vec![0.5, 0.5]).unwrap();
        let t = OccupancyGrid::new(Dims::new(2, 1), vec![0.0, 0.5]).unwrap();
        let s = OccupancyGrid::new(Dims::new(2, 1), vec![1.0, 0.0]).unwrap();
        let model = HierModel {
            templates: vec![t],
            objects: vec![o],
            alignments: vec![vec![Pose::identity()]],
            sigma: 0.5,
            rho: 2.0,
            flat: false,
        };
        let data = Dataset::from_grids(vec![vec![s]]);
        let exp = Expectations {
            beta: vec![vec![1.0]],
            alpha: vec![vec![vec![1.0]]],
        };
        // coupling SSE 0.25 / 0.25 = 1; data SSE 0.5 / 4 = 0.125
        assert_eq!(expected_complete_loglik(&model, &data, &exp).unwrap(), -1.125);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        for seed in 0..10 {
            let counts = [2, 0, 3];
            let (model, data, exp) = instance(seed, 3, 2, &counts);
            let mut oracle = 0.0;
            for n in 0..3 {
                for m in 0..2 {
                    let mut sse = 0.0;
                    for j in 0..9 {
                        let d = model.objects[n].cells()[j] - model.templates[m].cells()[j];
                        sse += d * d;
                    }
                    oracle += exp.beta[n][m] * sse / (model.sigma * model.sigma);
                }
                for (t, &k_t) in counts.iter().enumerate() {
                    for k in 0..k_t {
                        let mut sse = 0.0;
                        for j in 0..9 {
                            let d = data.epochs()[t][k].grid.cells()[j] - model.objects[n].cells()[j];
                            sse += d * d;
                        }
                        oracle += exp.alpha[t][k][n] * sse / (model.rho * model.rho);
                    }
                }
            }
            let got = expected_complete_loglik(&model, &data, &exp).unwrap();
            approx::assert_relative_eq!(got, -oracle, max_relative = 1e-12);
            assert!(got <= 0.0);
        }
    }

    #[test]
    fn level_swap_symmetry() {
        // equal-shape instance: one object, one template, one snapshot equal to the template
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Dims::square(3);
        let a = rgrid(&mut rng, d);
        let b = rgrid(&mut rng, d);
        let exp = Expectations {
            beta: vec![vec![1.0]],
            alpha: vec![vec![vec![1.0]]],
        };
        let build = |obj: &OccupancyGrid, other: &OccupancyGrid, sigma, rho| {
            (
                HierModel {
                    templates: vec![other.clone()],
                    objects: vec![obj.clone()],
                    alignments: vec![vec![Pose::identity()]],
                    sigma,
                    rho,
                    flat: false,
                },
                Dataset::from_grids(vec![vec![other.clone()]]),
            )
        };
        let (m1, d1) = build(&a, &b, 0.4, 0.9);
        let (m2, d2) = build(&a, &b, 0.9, 0.4);
        let tables1 = sse_tables(&m1, &m1.aligned_snapshots(&d1));
        let tables2 = sse_tables(&m2, &m2.aligned_snapshots(&d2));
        let coupling1 = tables1.coupling[0][0] / (0.4 * 0.4);
        let data2 = tables2.data[0][0][0] / (0.4 * 0.4);
        approx::assert_relative_eq!(coupling1, data2, max_relative = 1e-12);
        approx::assert_relative_eq!(
            expected_complete_loglik(&m1, &d1, &exp).unwrap(),
            expected_complete_loglik(&m2, &d2, &exp).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn penalties() {
        let (model, data, exp) = instance(3, 4, 3, &[1, 2]);
        let base = expected_complete_loglik(&model, &data, &exp).unwrap();
        assert_eq!(penalized_objective(&model, &data, &exp, 0.0, 0.0).unwrap(), base);
        approx::assert_relative_eq!(
            penalized_objective(&model, &data, &exp, 35.0, 15.0).unwrap(),
            base - 185.0,
            max_relative = 1e-12
        );
        assert!(penalized_objective(&model, &data, &exp, -1.0, 0.0).is_err());
    }

    #[test]
    fn penalty_strictly_decreasing_in_counts() {
        for n in 1..6 {
            for m in 1..=n {
                assert!(penalty(n + 1, m, 35.0, 15.0) > penalty(n, m, 35.0, 15.0));
                assert!(penalty(n, m + 1, 35.0, 15.0) > penalty(n, m, 35.0, 15.0));
            }
        }
    }

    #[test]
    fn mismatched_expectations_rejected() {
        let (model, data, _) = instance(2, 2, 1, &[1]);
        let exp = Expectations::zeros(3, 1, &[1]);
        assert!(expected_complete_loglik(&model, &data, &exp).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (mut model, data, exp) = instance(4, 2, 2, &[1, 1]);
        for g in model.objects.iter_mut().chain(model.templates.iter_mut()) {
            let q: Vec<f64> = g.cells().iter().map(|&v| crate::io::dequantize(crate::io::quantize(v))).collect();
            g.replace_cells(q);
        }
        let _ = data;
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), &exp).unwrap();
        let (back, e) = HierModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(e, exp);
    }
}
