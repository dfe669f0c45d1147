//! Discrete couplings between two equally weighted point clouds.
//!
//! [`sinkhorn`] solves the entropy-regularised transport problem
//!
//! ```text
//! min_P  sum_ij P_ij |x0_i - x1_j|^2  -  reg * H(P)
//! ```
//!
//! over plans with uniform marginals, in the log domain. Its optimum has the
//! Gibbs form `P_ij = exp((f_i + g_j - C_ij) / reg)`; the potentials `f, g`
//! are kept on the plan because the bridge posterior factorises over rows
//! and columns when `reg = 2 tau` (see
//! [`crate::predictors::EmpiricalBayes`]).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::io::Reader;
use crate::{Error, Result, SampleBatch};

/// Plans smaller than this many entries are solved single-threaded.
const PAR_THRESHOLD: usize = 1 << 14;

/// Plans with at most this many atoms in total get Newton polishing when
/// Sinkhorn stalls.
const NEWTON_MAX_ATOMS: usize = 512;
/// Sinkhorn iterations between Newton attempts.
const NEWTON_EVERY: usize = 500;

const PLAN_MAGIC: &[u8; 8] = b"LSBPLAN\0";
const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iter: usize,
    /// L1 tolerance on the row-marginal violation (columns are exact after
    /// every full iteration).
    pub tol: f64,
    /// Anneal the regularisation geometrically from the cost scale down to
    /// `reg`, warm-starting the potentials at each stage.
    pub anneal: bool,
}

impl SinkhornConfig {
    pub fn new(reg: f64) -> Self {
        SinkhornConfig {
            reg,
            ..Default::default()
        }
    }

    /// Regularisation matching a bridge of variance `tau`.
    pub fn for_bridge(tau: f64) -> Self {
        SinkhornConfig::new(2.0 * tau)
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 1.0,
            max_iter: 100_000,
            tol: 1e-9,
            anneal: true,
        }
    }
}

/// Dual potentials of a Gibbs-form plan.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsPotentials {
    pub reg: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// A joint distribution over `(x0_atoms[i], x1_atoms[j])` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    x0: SampleBatch,
    x1: SampleBatch,
    weights: Vec<f64>,
    gibbs: Option<GibbsPotentials>,
}

impl CouplingPlan {
    /// Validates nonnegativity, unit mass and uniform marginals (L1 within
    /// `1e-6`).
    pub fn new(x0: SampleBatch, x1: SampleBatch, weights: Vec<f64>) -> Result<Self> {
        x0.check_dim(&x1)?;
        let (n0, n1) = (x0.len(), x1.len());
        if weights.len() != n0 * n1 {
            return Err(Error::DimensionMismatch {
                expected: n0 * n1,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("plan weights must be finite and nonnegative"));
        }
        let plan = CouplingPlan {
            x0,
            x1,
            weights,
            gibbs: None,
        };
        let total: f64 = plan.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("plan mass is {total}, expected 1")));
        }
        let v = plan.marginal_violation();
        if v > 1e-6 {
            return Err(Error::param(format!("plan marginals deviate from uniform by {v:e} (L1)")));
        }
        Ok(plan)
    }

    pub fn x0_atoms(&self) -> &SampleBatch {
        &self.x0
    }

    pub fn x1_atoms(&self) -> &SampleBatch {
        &self.x1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.x1.len() + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.x0.len(), self.x1.len())
    }

    pub fn dim(&self) -> usize {
        self.x0.dim()
    }

    pub fn gibbs(&self) -> Option<&GibbsPotentials> {
        self.gibbs.as_ref()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.x1.len()).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n1 = self.x1.len();
        let mut c = vec![0.0; n1];
        for r in self.weights.chunks_exact(n1) {
            for (acc, w) in c.iter_mut().zip(r) {
                *acc += w;
            }
        }
        c
    }

    /// L1 distance of both marginals from uniform, summed.
    pub fn marginal_violation(&self) -> f64 {
        let (n0, n1) = self.shape();
        let rows: f64 = self.row_sums().iter().map(|s| (s - 1.0 / n0 as f64).abs()).sum();
        let cols: f64 = self.col_sums().iter().map(|s| (s - 1.0 / n1 as f64).abs()).sum();
        rows + cols
    }

    /// Shannon entropy `-sum P ln P`.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| w * w.ln())
            .sum::<f64>()
    }

    /// Binary dump: magic, version, shape, flags, atoms, weights and the
    /// Gibbs potentials when present. All numbers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n0, n1) = self.shape();
        let mut out = Vec::with_capacity(40 + 8 * (self.weights.len() + (n0 + n1) * (self.dim() + 1)));
        out.extend_from_slice(PLAN_MAGIC);
        out.extend_from_slice(&PLAN_VERSION.to_le_bytes());
        for v in [n0, n1, self.dim()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&u32::from(self.gibbs.is_some()).to_le_bytes());
        let floats = self
            .x0
            .as_slice()
            .iter()
            .chain(self.x1.as_slice())
            .chain(&self.weights);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(g) = &self.gibbs {
            for v in std::iter::once(&g.reg).chain(&g.f).chain(&g.g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "plan dump");
        r.expect_magic(PLAN_MAGIC)?;
        let version = r.u32()?;
        if version != PLAN_VERSION {
            return Err(Error::Format {
                what: "plan dump",
                detail: format!("unsupported version {version}"),
            });
        }
        let n0 = r.u64()? as usize;
        let n1 = r.u64()? as usize;
        let d = r.u64()? as usize;
        let flags = r.u32()?;
        let x0 = SampleBatch::new(d, r.f64s(n0 * d)?)?;
        let x1 = SampleBatch::new(d, r.f64s(n1 * d)?)?;
        let weights = r.f64s(n0 * n1)?;
        let gibbs = if flags & 1 == 1 {
            let reg = r.f64()?;
            Some(GibbsPotentials {
                reg,
                f: r.f64s(n0)?,
                g: r.f64s(n1)?,
            })
        } else {
            None
        };
        r.finish()?;
        let mut plan = CouplingPlan::new(x0, x1, weights)?;
        plan.gibbs = gibbs;
        Ok(plan)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Squared-Euclidean cost matrix, row-major `n0 x n1`.
pub fn cost_matrix(x0s: &SampleBatch, x1s: &SampleBatch) -> Vec<f64> {
    let n1 = x1s.len();
    let mut c = vec![0.0; x0s.len() * n1];
    c.par_chunks_mut(n1).zip(x0s.as_slice().par_chunks(x0s.dim())).for_each(|(row, a)| {
        for (cij, b) in row.iter_mut().zip(x1s.rows()) {
            *cij = sq_dist(a, b);
        }
    });
    c
}

/// One half-iteration: `out_i = reg ln(1/n_out) - reg LSE_j((other_j - C_ij) / reg)`.
fn update_potential(cost: &[f64], other: &[f64], reg: f64, out: &mut [f64]) {
    let n = other.len();
    let log_marg = -(out.len() as f64).ln();
    let body = |(o, row): (&mut f64, &[f64])| {
        let lse = log_sum_exp(row.iter().zip(other).map(|(c, g)| (g - c) / reg));
        *o = reg * (log_marg - lse);
    };
    if cost.len() >= PAR_THRESHOLD {
        out.par_iter_mut().zip(cost.par_chunks(n)).for_each(body);
    } else {
        out.iter_mut().zip(cost.chunks(n)).for_each(body);
    }
}

fn row_violation(cost: &[f64], f: &[f64], g: &[f64], reg: f64) -> f64 {
    let n1 = g.len();
    let target = 1.0 / f.len() as f64;
    let body = |(fi, row): (&f64, &[f64])| {
        let s: f64 = row.iter().zip(g).map(|(c, gj)| ((fi + gj - c) / reg).exp()).sum();
        (s - target).abs()
    };
    if cost.len() >= PAR_THRESHOLD {
        f.par_iter().zip(cost.par_chunks(n1)).map(body).sum()
    } else {
        f.iter().zip(cost.chunks(n1)).map(body).sum()
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

/// Newton ascent on the dual
/// `F(f, g) = sum_i f_i / n0 + sum_j g_j / n1 - reg sum_ij P_ij`.
///
/// Sinkhorn contracts slowly when the plan is close to block diagonal; the
/// Newton step moves mass between blocks directly. The Hessian is singular
/// along `(1, .., 1, -1, .., -1)`, which the gradient never has a component
/// along, so that direction is pinned with a rank-one term.
fn newton_polish(cost: &[f64], f: &mut [f64], g: &mut [f64], reg: f64, tol: f64) {
    let (n0, n1) = (f.len(), g.len());
    let n = n0 + n1;
    let (a, b) = (1.0 / n0 as f64, 1.0 / n1 as f64);
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n0 * n1)
            .map(|k| ((f[k / n1] + g[k % n1] - cost[k]) / reg).exp())
            .collect()
    };
    let dual = |f: &[f64], g: &[f64], p: &[f64]| -> f64 {
        a * f.iter().sum::<f64>() + b * g.iter().sum::<f64>() - reg * p.iter().sum::<f64>()
    };
    let mut p = plan(f, g);
    for _ in 0..50 {
        let mut r = vec![0.0; n0];
        let mut c = vec![0.0; n1];
        for k in 0..n0 * n1 {
            r[k / n1] += p[k];
            c[k % n1] += p[k];
        }
        let grad: Vec<f64> = r.iter().map(|v| a - v).chain(c.iter().map(|v| b - v)).collect();
        if grad.iter().map(|v| v.abs()).sum::<f64>() <= 0.1 * tol {
            return;
        }
        let pin = 1.0 / n as f64;
        let mut h = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let si = if i < n0 { 1.0 } else { -1.0 };
                let sj = if j < n0 { 1.0 } else { -1.0 };
                h[(i, j)] = pin * si * sj;
            }
        }
        for i in 0..n0 {
            h[(i, i)] += r[i];
            for j in 0..n1 {
                h[(i, n0 + j)] += p[i * n1 + j];
                h[(n0 + j, i)] += p[i * n1 + j];
            }
        }
        for j in 0..n1 {
            h[(n0 + j, n0 + j)] += c[j];
        }
        let Some(chol) = h.cholesky() else { return };
        let step = chol.solve(&nalgebra::DVector::from_vec(grad)) * reg;
        let base = dual(f, g, &p);
        let mut s = 1.0;
        let accepted = loop {
            let nf: Vec<f64> = (0..n0).map(|i| f[i] + s * step[i]).collect();
            let ng: Vec<f64> = (0..n1).map(|j| g[j] + s * step[n0 + j]).collect();
            let np = plan(&nf, &ng);
            let val = dual(&nf, &ng, &np);
            if val.is_finite() && val >= base {
                f.copy_from_slice(&nf);
                g.copy_from_slice(&ng);
                p = np;
                break true;
            }
            s *= 0.5;
            if s < 1e-10 {
                break false;
            }
        };
        if !accepted {
            return;
        }
    }
}

/// Entropic optimal-transport plan between two uniformly weighted batches.
pub fn sinkhorn(x0s: &SampleBatch, x1s: &SampleBatch, cfg: &SinkhornConfig) -> Result<CouplingPlan> {
    x0s.check_dim(x1s)?;
    if !(cfg.reg > 0.0 && cfg.reg.is_finite()) {
        return Err(Error::param(format!("sinkhorn regularisation must be > 0, got {}", cfg.reg)));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::param("sinkhorn tolerance must be > 0"));
    }
    let (n0, n1) = (x0s.len(), x1s.len());
    let cost = cost_matrix(x0s, x1s);
    let cost_t = transpose(&cost, n0, n1);

    let mut f = vec![0.0; n0];
    let mut g = vec![0.0; n1];

    let cmax = cost.iter().copied().fold(0.0, f64::max);
    let mut stages = Vec::new();
    if cfg.anneal {
        let mut r = cmax;
        while r > 2.0 * cfg.reg {
            stages.push(r);
            r *= 0.5;
        }
    }

    let mut iterations = 0;
    for &reg in &stages {
        for _ in 0..20 {
            update_potential(&cost, &g, reg, &mut f);
            update_potential(&cost_t, &f, reg, &mut g);
            iterations += 1;
        }
    }

    let reg = cfg.reg;
    let mut violation = f64::INFINITY;
    let mut since_newton = 0;
    while iterations < cfg.max_iter.max(1) {
        update_potential(&cost, &g, reg, &mut f);
        update_potential(&cost_t, &f, reg, &mut g);
        iterations += 1;
        since_newton += 1;
        if iterations % 5 == 0 || iterations >= cfg.max_iter {
            violation = row_violation(&cost, &f, &g, reg);
            if violation <= cfg.tol {
                break;
            }
            if since_newton >= NEWTON_EVERY && n0 + n1 <= NEWTON_MAX_ATOMS {
                newton_polish(&cost, &mut f, &mut g, reg, cfg.tol);
                since_newton = 0;
            }
        }
    }
    if !(violation <= cfg.tol) {
        return Err(Error::SinkhornNotConverged { iterations, violation });
    }

    let mut weights = vec![0.0; n0 * n1];
    weights.par_chunks_mut(n1).zip(cost.par_chunks(n1)).zip(&f).for_each(|((w, c), fi)| {
        for ((wij, cij), gj) in w.iter_mut().zip(c).zip(&g) {
            *wij = ((fi + gj - cij) / reg).exp();
        }
    });
    Ok(CouplingPlan {
        x0: x0s.clone(),
        x1: x1s.clone(),
        weights,
        gibbs: Some(GibbsPotentials { reg, f, g }),
    })
}

/// The product of the two uniform empirical measures.
pub fn independent_coupling(x0s: &SampleBatch, x1s: &SampleBatch) -> Result<CouplingPlan> {
    x0s.check_dim(x1s)?;
    let (n0, n1) = (x0s.len(), x1s.len());
    let w = 1.0 / (n0 * n1) as f64;
    Ok(CouplingPlan {
        x0: x0s.clone(),
        x1: x1s.clone(),
        weights: vec![w; n0 * n1],
        gibbs: None,
    })
}

/// `k` i.i.d. draws of atom pairs with probability `weights[i][j]`.
pub fn sample_pairs<'p>(plan: &'p CouplingPlan, k: usize, rng: &mut impl Rng) -> Vec<(&'p [f64], &'p [f64])> {
    let n1 = plan.x1.len();
    let dist = WeightedIndex::new(&plan.weights).expect("plan has positive mass");
    (0..k)
        .map(|_| {
            let idx = dist.sample(rng);
            (plan.x0.row(idx / n1), plan.x1.row(idx % n1))
        })
        .collect()
}

/// Expected squared displacement under the plan.
pub fn transport_cost(plan: &CouplingPlan) -> f64 {
    let n1 = plan.x1.len();
    plan.weights
        .chunks_exact(n1)
        .zip(plan.x0.rows())
        .map(|(w, a)| w.iter().zip(plan.x1.rows()).map(|(wij, b)| wij * sq_dist(a, b)).sum::<f64>())
        .sum()
}
