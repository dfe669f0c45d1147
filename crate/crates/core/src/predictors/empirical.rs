use rayon::prelude::*;

use super::{Backend, Prediction, Predictors};
use crate::coupling::CouplingPlan;
use crate::schedule::sb_sigma;
use crate::{Error, Result};

/// Exact posterior means over the atom pairs of a coupling plan.
///
/// The posterior weight of pair `(i, j)` given `x_t` is
/// `P_ij N(x_t; (1 - t) x0_i + t x1_j, sigma_t^2 I)`. In general that is a
/// sum over all `n0 n1` pairs. When the plan is a Sinkhorn plan solved with
/// `reg = 2 tau`, the cross term `x0_i . x1_j` of the plan's Gibbs exponent
/// cancels the one of the Gaussian likelihood and the posterior factorises:
///
/// ```text
/// w_ij ∝ exp(f_i / reg - |x_t - x0_i|^2 / (2 tau t))
///      * exp(g_j / reg - |x_t - x1_j|^2 / (2 tau (1 - t)))
/// ```
///
/// which costs `O(n0 + n1)` per query instead of `O(n0 n1)`.
#[derive(Debug, Clone)]
pub struct EmpiricalBayes {
    plan: CouplingPlan,
    tau: f64,
    factorized: bool,
}

impl EmpiricalBayes {
    /// Uses the factorised posterior whenever the plan allows it.
    pub fn new(plan: CouplingPlan, tau: f64) -> Result<Self> {
        let mut eb = EmpiricalBayes::dense(plan, tau)?;
        eb.factorized = eb
            .plan
            .gibbs()
            .is_some_and(|g| (g.reg - 2.0 * tau).abs() <= 1e-12 * g.reg);
        Ok(eb)
    }

    /// Always sums over every pair.
    pub fn dense(plan: CouplingPlan, tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::param(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(EmpiricalBayes {
            plan,
            tau,
            factorized: false,
        })
    }

    pub fn is_factorized(&self) -> bool {
        self.factorized
    }

    pub fn plan(&self) -> &CouplingPlan {
        &self.plan
    }

    fn dense_means(&self, x: &[f64], t: f64, s2: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = x.len();
        let (n0, n1) = self.plan.shape();
        let x0s = self.plan.x0_atoms();
        let x1s = self.plan.x1_atoms();
        // log weights, -inf for empty cells
        let mut logw = vec![f64::NEG_INFINITY; n0 * n1];
        let fill = |(i, row): (usize, &mut [f64])| {
            let a = x0s.row(i);
            for (j, lw) in row.iter_mut().enumerate() {
                let p = self.plan.weight(i, j);
                if p > 0.0 {
                    let b = x1s.row(j);
                    let r2: f64 = (0..d)
                        .map(|k| {
                            let diff = x[k] - (1.0 - t) * a[k] - t * b[k];
                            diff * diff
                        })
                        .sum();
                    *lw = p.ln() - r2 / (2.0 * s2);
                }
            }
        };
        if n0 * n1 >= 1 << 14 {
            logw.par_chunks_mut(n1).enumerate().for_each(fill);
        } else {
            logw.chunks_mut(n1).enumerate().for_each(fill);
        }
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegeneratePosterior(format!(
                "no pair has a finite log weight at t = {t} (max {m})"
            )));
        }
        let mut x0hat = vec![0.0; d];
        let mut x1hat = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..n0 {
            let a = x0s.row(i);
            for j in 0..n1 {
                let w = (logw[i * n1 + j] - m).exp();
                if w == 0.0 {
                    continue;
                }
                total += w;
                let b = x1s.row(j);
                for k in 0..d {
                    x0hat[k] += w * a[k];
                    x1hat[k] += w * b[k];
                }
            }
        }
        x0hat.iter_mut().chain(x1hat.iter_mut()).for_each(|v| *v /= total);
        Ok((x0hat, x1hat))
    }

    fn factorized_means(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.plan.gibbs().expect("factorized plans carry potentials");
        let a = softmax_mean(self.plan.x0_atoms().rows(), &g.f, g.reg, x, 2.0 * self.tau * t)?;
        let b = softmax_mean(self.plan.x1_atoms().rows(), &g.g, g.reg, x, 2.0 * self.tau * (1.0 - t))?;
        Ok((a, b))
    }
}

/// `sum_i w_i atom_i / sum_i w_i` with `w_i = exp(pot_i / reg - |x - atom_i|^2 / scale)`.
fn softmax_mean<'a>(
    atoms: impl Iterator<Item = &'a [f64]> + Clone,
    pot: &[f64],
    reg: f64,
    x: &[f64],
    scale: f64,
) -> Result<Vec<f64>> {
    let logits: Vec<f64> = atoms
        .clone()
        .zip(pot)
        .map(|(a, p)| p / reg - a.iter().zip(x).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / scale)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegeneratePosterior(format!("max log weight is {m}")));
    }
    let mut mean = vec![0.0; x.len()];
    let mut total = 0.0;
    for (a, l) in atoms.zip(&logits) {
        let w = (l - m).exp();
        total += w;
        for (acc, v) in mean.iter_mut().zip(a) {
            *acc += w * v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= total);
    Ok(mean)
}

impl Predictors for EmpiricalBayes {
    fn dim(&self) -> usize {
        self.plan.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn backend(&self) -> Backend {
        Backend::EmpiricalBayes
    }

    fn predict(&self, x_t: &[f64], t: f64) -> Result<Prediction> {
        if x_t.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x_t.len(),
            });
        }
        let sigma = sb_sigma(t, self.tau);
        if !(sigma > 0.0) || !(t > 0.0 && t < 1.0) {
            return Err(Error::DegeneratePosterior(format!(
                "sigma_t = {sigma} at t = {t}; the empirical posterior needs sigma_t > 0"
            )));
        }
        let (x0, x1) = if self.factorized {
            self.factorized_means(x_t, t)?
        } else {
            self.dense_means(x_t, t, sigma * sigma)?
        };
        let eps = (0..x_t.len())
            .map(|k| (x_t[k] - ((1.0 - t) * x0[k] + t * x1[k])) / sigma)
            .collect();
        Ok(Prediction {
            x0,
            x1,
            eps,
            eps_degenerate: false,
        })
    }
}
