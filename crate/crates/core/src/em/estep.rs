//! Exact E-step: template posteriors per object, and snapshot-to-object
//! posteriors per epoch under the mutual exclusion constraint.

use crate::error::{Error, Result};
use crate::model::HierModel;
use crate::segmentation::Dataset;

/// Normalized posterior for one epoch's snapshot-to-object correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPosterior {
    /// `marginals[k][n] = p(α(k) = n)`.
    pub marginals: Vec<Vec<f64>>,
    /// `log Σ_α exp(Σ_k log_weights[k][α(k)])` over injective `α`.
    pub log_normalizer: f64,
}

/// Computes correspondence posteriors from per-pair log weights.
///
/// [`ExactEnumeration`] is the only strategy shipped. A sampling scheme for
/// epochs with many snapshots would implement this trait and be passed to
/// [`alpha_posteriors`].
pub trait AssignmentPosterior {
    fn posterior(&self, epoch: usize, log_weights: &[Vec<f64>]) -> Result<EpochPosterior>;
}

/// Sums over every injective assignment, refusing epochs whose assignment
/// count exceeds `max_terms`.
#[derive(Clone, Copy, Debug)]
pub struct ExactEnumeration {
    pub max_terms: u64,
}

impl Default for ExactEnumeration {
    fn default() -> Self {
        ExactEnumeration {
            max_terms: 10_000_000,
        }
    }
}

/// `n! / (n - k)!`, or 0 when `k > n`.
pub fn injective_count(k: usize, n: usize) -> u128 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).fold(1u128, |acc, v| acc.saturating_mul(v as u128))
}

struct Enumerator<'a> {
    log_weights: &'a [Vec<f64>],
    used: Vec<bool>,
    assign: Vec<usize>,
    // running log-sum-exp state, rescaled whenever a larger term appears
    shift: f64,
    total: f64,
    marginals: Vec<Vec<f64>>,
}

impl Enumerator<'_> {
    fn visit(&mut self, k: usize, acc: f64) {
        let kk = self.log_weights.len();
        if k == kk {
            if acc > self.shift {
                let scale = (self.shift - acc).exp();
                self.total *= scale;
                for row in &mut self.marginals {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.shift = acc;
            }
            let w = (acc - self.shift).exp();
            self.total += w;
            for (kk, &n) in self.assign.iter().enumerate() {
                self.marginals[kk][n] += w;
            }
            return;
        }
        for n in 0..self.used.len() {
            if self.used[n] {
                continue;
            }
            self.used[n] = true;
            self.assign[k] = n;
            self.visit(k + 1, acc + self.log_weights[k][n]);
            self.used[n] = false;
        }
    }
}

impl AssignmentPosterior for ExactEnumeration {
    fn posterior(&self, epoch: usize, log_weights: &[Vec<f64>]) -> Result<EpochPosterior> {
        let k = log_weights.len();
        if k == 0 {
            return Ok(EpochPosterior {
                marginals: Vec::new(),
                log_normalizer: 0.0,
            });
        }
        let n = log_weights[0].len();
        if k > n {
            return Err(Error::TooManySnapshots {
                epoch,
                snapshots: k,
                objects: n,
            });
        }
        let terms = injective_count(k, n);
        if terms > self.max_terms as u128 {
            return Err(Error::EnumerationLimit {
                epoch,
                terms,
                cap: self.max_terms,
            });
        }
        let mut e = Enumerator {
            log_weights,
            used: vec![false; n],
            assign: vec![0; k],
            shift: f64::NEG_INFINITY,
            total: 0.0,
            marginals: vec![vec![0.0; n]; k],
        };
        e.visit(0, 0.0);
        let Enumerator {
            shift,
            total,
            mut marginals,
            ..
        } = e;
        for row in &mut marginals {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(EpochPosterior {
            marginals,
            log_normalizer: shift + total.ln(),
        })
    }
}

/// Per-epoch posteriors from data SSE tables `sse[t][k][n]` at noise level `rho`.
pub fn alpha_posteriors(
    sse: &[Vec<Vec<f64>>],
    rho: f64,
    strategy: &dyn AssignmentPosterior,
) -> Result<Vec<EpochPosterior>> {
    let scale = -1.0 / (2.0 * rho * rho);
    sse.iter()
        .enumerate()
        .map(|(t, epoch)| {
            let lw: Vec<Vec<f64>> = epoch
                .iter()
                .map(|row| row.iter().map(|s| s * scale).collect())
                .collect();
            strategy.posterior(t, &lw)
        })
        .collect()
}

/// Template posteriors from coupling SSE `sse[n][m]`; also returns
/// `Σ_n log Σ_m exp(-sse[n][m] / 2σ²)`.
pub(crate) fn beta_from_sse(sse: &[Vec<f64>], sigma: f64) -> (Vec<Vec<f64>>, f64) {
    let scale = -1.0 / (2.0 * sigma * sigma);
    let mut log_total = 0.0;
    let beta = sse
        .iter()
        .map(|row| {
            let lw: Vec<f64> = row.iter().map(|s| s * scale).collect();
            let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            log_total += max + z.ln();
            w.into_iter().map(|v| v / z).collect()
        })
        .collect();
    (beta, log_total)
}

/// `beta[n][m] ∝ exp(-SSE(θ_n, φ_m) / 2σ²)`, normalized over templates.
pub fn estep_beta(model: &HierModel) -> Vec<Vec<f64>> {
    let sse: Vec<Vec<f64>> = model
        .objects
        .iter()
        .map(|o| {
            model
                .templates
                .iter()
                .map(|t| crate::grid::sse_unchecked(o, t))
                .collect()
        })
        .collect();
    beta_from_sse(&sse, model.sigma).0
}

/// Snapshot-to-object marginals for every epoch, by exact enumeration of
/// injective assignments at the model's alignments and `ρ`.
pub fn estep_alpha(model: &HierModel, data: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    estep_alpha_with(model, data, &ExactEnumeration::default())
}

pub fn estep_alpha_with(
    model: &HierModel,
    data: &Dataset,
    strategy: &dyn AssignmentPosterior,
) -> Result<Vec<Vec<Vec<f64>>>> {
    model.check_data(data)?;
    let aligned = model.aligned_snapshots(data);
    let tables = crate::model::sse_tables(model, &aligned);
    Ok(alpha_posteriors(&tables.data, model.rho, strategy)?
        .into_iter()
        .map(|p| p.marginals)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, OccupancyGrid};

    fn one_hot(n: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; n]]
    }

    #[test]
    fn counts() {
        assert_eq!(injective_count(0, 4), 1);
        assert_eq!(injective_count(2, 3), 6);
        assert_eq!(injective_count(4, 3), 0);
        assert_eq!(injective_count(10, 20), 670_442_572_800);
    }

    #[test]
    fn single_assignment() {
        let p = ExactEnumeration::default().posterior(0, &one_hot(1)).unwrap();
        assert_eq!(p.marginals, vec![vec![1.0]]);
        assert_eq!(p.log_normalizer, 0.0);
    }

    #[test]
    fn symmetric_costs_are_uniform() {
        let lw = vec![vec![-1.5, -1.5], vec![-1.5, -1.5]];
        let p = ExactEnumeration::default().posterior(0, &lw).unwrap();
        for row in &p.marginals {
            for &v in row {
                approx::assert_relative_eq!(v, 0.5, max_relative = 1e-15);
            }
        }
        approx::assert_relative_eq!(p.log_normalizer, -3.0 + 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn too_many_snapshots() {
        let lw = vec![vec![0.0], vec![0.0]];
        let err = ExactEnumeration::default().posterior(3, &lw).unwrap_err();
        assert!(matches!(err, Error::TooManySnapshots { epoch: 3, snapshots: 2, objects: 1 }));
    }

    #[test]
    fn enumeration_cap() {
        let lw = vec![vec![0.0; 6]; 3];
        let err = ExactEnumeration { max_terms: 100 }.posterior(0, &lw).unwrap_err();
        assert!(matches!(err, Error::EnumerationLimit { terms: 120, .. }));
    }

    #[test]
    fn extreme_log_weights_stay_finite() {
        let lw = vec![vec![-1e5, -1e5 - 3.0, -2e5], vec![-4e5, -1e5, -1e5 - 1.0]];
        let p = ExactEnumeration::default().posterior(0, &lw).unwrap();
        assert!(p.log_normalizer.is_finite());
        for row in &p.marginals {
            approx::assert_relative_eq!(row.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn beta_worked_value() {
        // σ = 1, SSE (0, 2): weights e^0 and e^-1
        let (beta, _) = beta_from_sse(&[vec![0.0, 2.0]], 1.0);
        approx::assert_abs_diff_eq!(beta[0][0], 0.731_058_578_630_004_9, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(beta[0][1], 0.268_941_421_369_995_1, epsilon = 1e-15);
    }

    #[test]
    fn beta_single_template_and_ties() {
        let g = |v| OccupancyGrid::filled(Dims::square(2), v);
        let model = HierModel {
            templates: vec![g(0.2), g(0.8)],
            objects: vec![g(0.5), g(0.1)],
            alignments: vec![],
            sigma: 0.3,
            rho: 0.3,
            flat: false,
        };
        let beta = estep_beta(&model);
        approx::assert_relative_eq!(beta[0][0], 0.5, max_relative = 1e-12);
        assert!(beta[1][0] > 0.99);
        let single = HierModel {
            templates: vec![g(0.2)],
            ..model
        };
        assert!(estep_beta(&single).iter().all(|r| r == &vec![1.0]));
    }
}
