//! Closed-form update of templates and objects, one pixel at a time.
//!
//! At a fixed pixel the expected complete log-likelihood is a quadratic in the
//! `N + M` unknowns. Its Hessian couples object `n` and template `m` with
//! weight `beta[n][m] / σ²` and anchors object `n` to each observed value with
//! weight `alpha / ρ²`. Variables split into connected components of the
//! coupling graph; each component is solved on its own.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::grid::OccupancyGrid;
use crate::model::{Expectations, HierModel};

/// The quadratic at one pixel.
#[derive(Clone, Debug)]
pub struct PixelSystem {
    pub sigma: f64,
    pub rho: f64,
    /// `beta[n][m]`; ignored when `flat`.
    pub beta: Vec<Vec<f64>>,
    /// Observed values at this pixel with their object weights `alpha[n]`.
    pub observations: Vec<(f64, Vec<f64>)>,
    pub flat: bool,
}

impl PixelSystem {
    pub fn n(&self) -> usize {
        self.beta.len()
    }

    pub fn m(&self) -> usize {
        if self.flat {
            0
        } else {
            self.beta.first().map_or(0, Vec::len)
        }
    }

    /// The pixel's contribution to the expected complete log-likelihood at
    /// `x = [θ_0 .. θ_{N-1}, φ_0 .. φ_{M-1}]`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let s2 = self.sigma * self.sigma;
        let r2 = self.rho * self.rho;
        let mut total = 0.0;
        if !self.flat {
            for (i, row) in self.beta.iter().enumerate() {
                for (j, b) in row.iter().enumerate() {
                    let d = x[i] - x[n + j];
                    total += b / s2 * d * d;
                }
            }
        }
        for (v, a) in &self.observations {
            for (i, w) in a.iter().enumerate() {
                let d = v - x[i];
                total += w / r2 * d * d;
            }
        }
        -total
    }

    /// Normal equations `H x = g` of the negated objective, up to a factor 2.
    fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n();
        let d = n + self.m();
        let mut h = DMatrix::zeros(d, d);
        let mut g = DVector::zeros(d);
        if !self.flat {
            let s2 = self.sigma * self.sigma;
            for (i, row) in self.beta.iter().enumerate() {
                for (j, &b) in row.iter().enumerate() {
                    if b > 0.0 {
                        let c = b / s2;
                        h[(i, i)] += c;
                        h[(n + j, n + j)] += c;
                        h[(i, n + j)] -= c;
                        h[(n + j, i)] -= c;
                    }
                }
            }
        }
        let r2 = self.rho * self.rho;
        for (v, a) in &self.observations {
            for (i, &w) in a.iter().enumerate() {
                if w > 0.0 {
                    let c = w / r2;
                    h[(i, i)] += c;
                    g[i] += c * v;
                }
            }
        }
        (h, g)
    }

    /// Maximizer of [`PixelSystem::objective`], starting from `prev` for the
    /// directions the data leaves free. Not clamped.
    ///
    /// Components with observations are solved exactly, falling back to the
    /// minimum-change pseudo-inverse step if the block is singular. Components
    /// with none are flat directions of the objective; their variables move to
    /// the mean of the component's previous object values, or keep their
    /// previous value if the component holds no object.
    pub fn solve(&self, prev: &[f64]) -> Vec<f64> {
        let n = self.n();
        let d = n + self.m();
        let (h, g) = self.normal_equations();
        let mut parent: Vec<usize> = (0..d).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..n {
            for j in n..d {
                if h[(i, j)] != 0.0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); d];
        for i in 0..d {
            let r = find(&mut parent, i);
            groups[r].push(i);
        }
        let mut x = prev.to_vec();
        for group in groups.into_iter().filter(|g| !g.is_empty()) {
            let anchored = group
                .iter()
                .any(|&i| i < n && self.observations.iter().any(|(_, a)| a[i] > 0.0));
            if anchored {
                let k = group.len();
                let hs = DMatrix::from_fn(k, k, |r, c| h[(group[r], group[c])]);
                let gs = DVector::from_fn(k, |r, _| g[group[r]]);
                let sol = match Cholesky::new(hs.clone()) {
                    Some(ch) => ch.solve(&gs),
                    None => {
                        let x0 = DVector::from_fn(k, |r, _| prev[group[r]]);
                        let resid = &gs - &hs * &x0;
                        x0 + pseudo_inverse(hs) * resid
                    }
                };
                for (r, &i) in group.iter().enumerate() {
                    x[i] = sol[r];
                }
            } else {
                let thetas: Vec<f64> = group.iter().filter(|&&i| i < n).map(|&i| prev[i]).collect();
                if !thetas.is_empty() {
                    let mean = thetas.iter().sum::<f64>() / thetas.len() as f64;
                    for &i in &group {
                        x[i] = mean;
                    }
                }
            }
        }
        x
    }
}

fn pseudo_inverse(h: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(h);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = top * 1e-12 * eig.eigenvalues.len() as f64;
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > cut { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Convenience wrapper: solve and clamp to `[0, 1]`.
pub fn solve_pixel(system: &PixelSystem, prev: &[f64]) -> Vec<f64> {
    system
        .solve(prev)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Joint template and object update given expectations and snapshots already
/// resampled at the current alignments. Returns `(templates, objects)`; in a
/// flat model the templates are copies of the objects.
pub fn mstep_model(
    model: &HierModel,
    aligned: &[Vec<OccupancyGrid>],
    exp: &Expectations,
    sigma: f64,
    rho: f64,
) -> (Vec<OccupancyGrid>, Vec<OccupancyGrid>) {
    let n = model.n();
    let m = if model.flat { 0 } else { model.m() };
    let canvas = model.canvas();
    let mut obj_cells = vec![vec![0.0; canvas.len()]; n];
    let mut tpl_cells = vec![vec![0.0; canvas.len()]; m];
    let beta = if model.flat {
        (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    } else {
        exp.beta.clone()
    };
    let snaps: Vec<(&OccupancyGrid, &Vec<f64>)> = aligned
        .iter()
        .zip(&exp.alpha)
        .flat_map(|(s, a)| s.iter().zip(a))
        .collect();
    let mut system = PixelSystem {
        sigma,
        rho,
        beta,
        observations: Vec::new(),
        flat: model.flat,
    };
    let mut prev = vec![0.0; n + m];
    for j in 0..canvas.len() {
        system.observations.clear();
        for (s, a) in &snaps {
            if let Some(v) = s.known_value(j) {
                system.observations.push((v, (*a).clone()));
            }
        }
        for (i, o) in model.objects.iter().enumerate() {
            prev[i] = o.cells()[j];
        }
        for (i, t) in model.templates.iter().take(m).enumerate() {
            prev[n + i] = t.cells()[j];
        }
        let x = solve_pixel(&system, &prev);
        for i in 0..n {
            obj_cells[i][j] = x[i];
        }
        for i in 0..m {
            tpl_cells[i][j] = x[n + i];
        }
    }
    let rebuild = |src: &OccupancyGrid, cells: Vec<f64>| {
        let mut g = src.clone();
        g.replace_cells(cells);
        g
    };
    let objects: Vec<OccupancyGrid> = model
        .objects
        .iter()
        .zip(obj_cells)
        .map(|(o, c)| rebuild(o, c))
        .collect();
    let templates = if model.flat {
        objects.clone()
    } else {
        model
            .templates
            .iter()
            .zip(tpl_cells)
            .map(|(t, c)| rebuild(t, c))
            .collect()
    };
    (templates, objects)
}
