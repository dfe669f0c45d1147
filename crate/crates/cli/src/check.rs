//! Invariant battery behind `lsb check`.

use std::fmt;

use lsb_core::bridge::velocity;
use lsb_core::coupling::{sinkhorn, SinkhornConfig};
use lsb_core::denoiser::{Mlp, MlpArch};
use lsb_core::io::read_bytes;
use lsb_core::predictors::{cfg_scale_check, EmpiricalBayes, GaussianAnalytic, Predictors, VpBackend, VpOptions};
use lsb_core::rng::{standard_normal, RootSeed};
use lsb_core::schedule::{sb_sigma, snr_match, SbParams};
use lsb_core::toy::{gen_toy, GaussianMixture};
use lsb_core::SampleBatch;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Measured residual; larger is worse.
    pub residual: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.residual <= self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<24} residual={:.3e} tol={:.0e}", self.name, self.residual, self.tol)
    }
}

/// Relative error of `alpha_bar / (1 - alpha_bar) = sigma_t^-2` over random
/// `(t, tau)`. `fault` scales the reference `sigma_t` by `1 + fault`.
pub fn snr_identity(seed: u64, probes: usize, fault: f64) -> CheckResult {
    let mut rng = RootSeed(seed).stream("check-snr", 0);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let t = rng.random_range(0.001..0.999);
        let tau = 10.0 * (1.0 - rng.random::<f64>());
        let (level, _) = snr_match(&[1.0], t, tau);
        let s = sb_sigma(t, tau) * (1.0 + fault);
        let want = 1.0 / (s * s);
        worst = worst.max((level.snr() - want).abs() / want);
    }
    CheckResult {
        name: "snr_identity",
        residual: worst,
        tol: 1e-12,
    }
}

fn decomposition_residual(x: &[f64], t: f64, tau: f64, p: &lsb_core::predictors::Prediction) -> f64 {
    let s = sb_sigma(t, tau);
    x.iter()
        .enumerate()
        .map(|(k, xk)| (xk - (1.0 - t) * p.x0[k] - t * p.x1[k] - s * p.eps[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `|x_t - (1 - t) x0_hat - t x1_hat - sigma_t eps_hat|` for the empirical
/// posterior over random 8 x 8 entropic plans, alternating the factorised and
/// dense routes.
pub fn posterior_consistency(seed: u64, plans: usize, probes_per_plan: usize) -> Result<CheckResult> {
    let root = RootSeed(seed);
    let mut worst = 0.0f64;
    for k in 0..plans {
        let mut rng = root.stream("check-posterior", k as u64);
        let a = SampleBatch::new(2, (0..16).map(|_| rng.random_range(-3.0..3.0)).collect())?;
        let b = SampleBatch::new(2, (0..16).map(|_| rng.random_range(-3.0..3.0)).collect())?;
        let tau = rng.random_range(0.05..4.0);
        let eb = if k % 2 == 0 {
            EmpiricalBayes::new(sinkhorn(&a, &b, &SinkhornConfig::for_bridge(tau))?, tau)?
        } else {
            let reg = rng.random_range(0.1..5.0);
            EmpiricalBayes::dense(sinkhorn(&a, &b, &SinkhornConfig::new(reg))?, tau)?
        };
        for _ in 0..probes_per_plan {
            let t = rng.random_range(0.01..0.99);
            let x: Vec<f64> = standard_normal(&mut rng, 2).iter().map(|z| 2.0 * z).collect();
            worst = worst.max(decomposition_residual(&x, t, tau, &eb.predict(&x, t)?));
        }
    }
    Ok(CheckResult {
        name: "posterior_consistency",
        residual: worst,
        tol: 1e-10,
    })
}

/// Guided minus unguided endpoint difference, `(x1 - x0)^w = w (x1 - x0)`,
/// on a noise network.
pub fn cfg_identity(model: &Mlp, seed: u64, probes: usize) -> Result<CheckResult> {
    let tau = 6.25;
    let unguided = VpBackend::new(model, tau, VpOptions { omega: 1.0, ..Default::default() })?;
    let mut rng = RootSeed(seed).stream("check-cfg", 0);
    let mut worst = 0.0f64;
    for omega in [0.0, 1.0, 3.0, 11.0] {
        let guided = VpBackend::new(model, tau, VpOptions { omega, ..Default::default() })?;
        for _ in 0..probes {
            let t = rng.random_range(0.01..0.99);
            let x: Vec<f64> = standard_normal(&mut rng, model.arch().d).iter().map(|z| 3.0 * z).collect();
            worst = worst.max(cfg_scale_check(&guided, &unguided, omega, &x, t)?);
        }
    }
    Ok(CheckResult {
        name: "cfg_identity",
        residual: worst,
        tol: 1e-10,
    })
}

/// A network with every parameter random, so that all branches differ.
pub fn random_network(d: usize, hidden: Vec<usize>, seed: u64) -> Result<Mlp> {
    let arch = MlpArch::new(d, hidden);
    let mut rng = RootSeed(seed).stream("check-net", 0);
    let params = (0..arch.param_count()).map(|_| 0.5 * standard_normal(&mut rng, 1)[0]).collect();
    Ok(Mlp::from_params(arch, params)?)
}

/// Velocity of the straight-line interpolation between independent draws of
/// `N(m0, v0 I)` and `N(0, I)` at `x`, by self-normalised importance
/// sampling over the standard normal draws `z`. Draws whichever endpoint
/// leaves the flatter weight.
pub fn flow_velocity_mc(m0: &[f64], v0: f64, x: &[f64], t: f64, z: &[Vec<f64>]) -> Vec<f64> {
    let d = x.len();
    let mut x0 = vec![0.0; d];
    let mut x1 = vec![0.0; d];
    let pair = |zi: &[f64], x0: &mut [f64], x1: &mut [f64]| -> f64 {
        if t < 0.5 {
            for k in 0..d {
                x1[k] = zi[k];
                x0[k] = (x[k] - t * zi[k]) / (1.0 - t);
            }
            -0.5 * (0..d).map(|k| (x0[k] - m0[k]).powi(2)).sum::<f64>() / v0
        } else {
            for k in 0..d {
                x0[k] = m0[k] + v0.sqrt() * zi[k];
                x1[k] = (x[k] - (1.0 - t) * x0[k]) / t;
            }
            -0.5 * x1.iter().map(|v| v * v).sum::<f64>()
        }
    };
    let max = z.iter().map(|zi| pair(zi, &mut x0, &mut x1)).fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for zi in z {
        let w = (pair(zi, &mut x0, &mut x1) - max).exp();
        den += w;
        for k in 0..d {
            num[k] += w * (x1[k] - x0[k]);
        }
    }
    num.iter().map(|n| n / den).collect()
}

/// Worst relative RMS error, over `t` in {0.1, 0.5, 0.9}, between the
/// closed-form `tau = 0` velocity and the importance-sampled flow velocity
/// on a 5 x 5 grid around the interpolant mean.
pub fn flow_velocity_match(seed: u64, draws: usize) -> Result<CheckResult> {
    let m0 = [2.0, 0.0];
    let v0 = 0.5;
    let an = GaussianAnalytic::new(GaussianMixture::isotropic(m0.to_vec(), v0)?, GaussianMixture::standard(2), 0.0)?;
    let sb = SbParams::new(0.0, 0.0, 1e-3)?;
    let mut rng = RootSeed(seed).stream("check-flow", 0);
    let z: Vec<Vec<f64>> = (0..draws).map(|_| standard_normal(&mut rng, 2)).collect();
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 0.9] {
        let sd = (v0 * (1.0 - t) * (1.0 - t) + t * t).sqrt();
        let offsets = [-1.5, -0.75, 0.0, 0.75, 1.5];
        let (mut err, mut norm) = (0.0, 0.0);
        for a in offsets {
            for b in offsets {
                let x = [(1.0 - t) * m0[0] + a * sd, b * sd];
                let v = velocity(&an, &x, t, &sb)?;
                let want = flow_velocity_mc(&m0, v0, &x, t, &z);
                err += (v[0] - want[0]).powi(2) + (v[1] - want[1]).powi(2);
                norm += want[0].powi(2) + want[1].powi(2);
            }
        }
        worst = worst.max((err / norm).sqrt());
    }
    Ok(CheckResult {
        name: "flow_velocity_match",
        residual: worst,
        tol: 1e-2,
    })
}

/// L1 marginal violation of 64 x 64 plans.
pub fn sinkhorn_marginals(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for k in 0..3 {
        let s = derive_seed(seed, "check-sinkhorn") ^ k;
        let a = gen_toy("eight-gaussians", 64, s)?;
        let b = gen_toy("two-moons", 64, s.wrapping_add(1))?;
        let plan = sinkhorn(&a, &b, &SinkhornConfig::new(0.05))?;
        worst = worst.max(plan.marginal_violation());
    }
    Ok(CheckResult {
        name: "sinkhorn_marginals",
        residual: worst,
        tol: 1e-6,
    })
}

/// Runs every check. The guidance check uses `out/model.ckpt` when present
/// and a random network otherwise. A check that errors is reported as a
/// failure with an infinite residual.
pub fn run_all(cfg: &ExperimentConfig) -> Vec<CheckResult> {
    let seed = cfg.seed;
    let failed = |name: &'static str, e: &dyn fmt::Display| {
        log::error!("{name}: {e}");
        CheckResult {
            name,
            residual: f64::INFINITY,
            tol: 0.0,
        }
    };
    let ckpt = cfg.out.join("model.ckpt");
    let model = if ckpt.exists() {
        read_bytes(&ckpt).map_err(Into::into).and_then(|b| Ok(Mlp::from_bytes(&b)?))
    } else {
        let d = cfg.source_spec().map(|s| s.dim()).unwrap_or(2);
        random_network(d, cfg.train.arch_hidden.clone(), derive_seed(seed, "check-net"))
    };
    vec![
        snr_identity(seed, 1000, cfg.sigma_fault),
        posterior_consistency(seed, 10, 100).unwrap_or_else(|e| failed("posterior_consistency", &e)),
        match model {
            Ok(m) => cfg_identity(&m, seed, 100).unwrap_or_else(|e| failed("cfg_identity", &e)),
            Err(e) => failed("cfg_identity", &e),
        },
        flow_velocity_match(seed, 1_000_000).unwrap_or_else(|e| failed("flow_velocity_match", &e)),
        sinkhorn_marginals(seed).unwrap_or_else(|e| failed("sinkhorn_marginals", &e)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_fault_is_detected() {
        assert!(snr_identity(1, 100, 0.0).passed());
        assert!(!snr_identity(1, 100, 1e-6).passed());
    }

    #[test]
    fn importance_sampler_at_the_mean_of_a_symmetric_case() {
        // both endpoints N(0, I): by symmetry the velocity at the origin is 0
        let mut rng = RootSeed(3).stream("z", 0);
        let z: Vec<Vec<f64>> = (0..20_000).map(|_| standard_normal(&mut rng, 2)).collect();
        for t in [0.2, 0.7] {
            let v = flow_velocity_mc(&[0.0, 0.0], 1.0, &[0.0, 0.0], t, &z);
            assert!(v.iter().all(|c| c.abs() < 0.05), "{v:?}");
        }
    }
}
