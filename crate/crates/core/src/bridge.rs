//! Velocity assembly and the Euler solver for the decomposed bridge ODE.
//!
//! ```text
//! v(x_t, t) = (1/2 - t) sqrt(tau) / sqrt(t (1 - t)) * eps_hat + x1_hat - x0_hat
//! ```
//!
//! [`solve`] starts from `x_{t0} = (1 - t0) x0 + sigma_{t0} eps`, takes
//! `M = nfe - final_denoise` uniform Euler steps of size `(1 - t0) / M` and, if
//! requested, replaces the result by `x1_hat` read at the end state and time.

use rayon::prelude::*;

use crate::predictors::Predictors;
use crate::rng::{standard_normal, RootSeed};
use crate::schedule::{noise_coefficient, sb_sigma, BridgeConfig, SbParams};
use crate::{Error, Result, SampleBatch};

/// Bridge velocity at a clamped time.
pub fn velocity(preds: &impl Predictors, x_t: &[f64], t: f64, sb: &SbParams) -> Result<Vec<f64>> {
    sb.check_time(t)?;
    let p = preds.predict(x_t, t)?;
    let c = noise_coefficient(t, sb.tau);
    Ok((0..x_t.len()).map(|k| c * p.eps[k] + p.x1[k] - p.x0[k]).collect())
}

/// `x_{t0} = (1 - t0) x0 + sqrt(t0 (1 - t0) tau) eps` with one noise stream
/// per row, `(seed, "init", row)`.
pub fn init_state(x0: &SampleBatch, t0: f64, tau: f64, seed: u64) -> Result<SampleBatch> {
    if !(0.0..1.0).contains(&t0) {
        return Err(Error::param(format!("t0 must lie in [0, 1), got {t0}")));
    }
    let d = x0.dim();
    let s = sb_sigma(t0, tau);
    let data: Vec<f64> = x0
        .rows()
        .enumerate()
        .flat_map(|(i, row)| init_row(row, t0, s, seed, i))
        .collect();
    SampleBatch::new(d, data)
}

fn init_row(row: &[f64], t0: f64, s: f64, seed: u64, i: usize) -> Vec<f64> {
    let mut rng = RootSeed(seed).stream("init", i as u64);
    let eps = standard_normal(&mut rng, row.len());
    row.iter().zip(eps).map(|(x, e)| (1.0 - t0) * x + s * e).collect()
}

/// One row of `x1_hat` at `t_last`.
pub fn final_denoise(x_last: &SampleBatch, t_last: f64, preds: &impl Predictors, sb: &SbParams) -> Result<SampleBatch> {
    sb.check_time(t_last)?;
    let rows = x_last
        .rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|r| preds.predict(r, t_last).map(|p| p.x1))
        .collect::<Result<Vec<_>>>()?;
    SampleBatch::from_rows(&rows)
}

/// Output of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Grid times `t0 + (1 - t0) i / M` for `i = 0..=M`.
    pub times: Vec<f64>,
    /// The state at every grid time, when retained.
    pub states: Vec<SampleBatch>,
    /// The returned batch: the last state, or its denoised version.
    pub final_batch: SampleBatch,
    /// Predictor evaluations per sample.
    pub nfe_used: usize,
}

impl Trajectory {
    /// Long-format CSV with header `sample,t,x0,..`; empty body when states
    /// were not retained.
    pub fn to_csv(&self) -> String {
        let d = self.final_batch.dim();
        let mut out = String::from("sample,t");
        for k in 0..d {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for i in 0..self.final_batch.len() {
            for (t, s) in self.times.iter().zip(&self.states) {
                out.push_str(&format!("{i},{t}"));
                for v in s.row(i) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Translates `x0` with the state history discarded.
pub fn solve(x0: &SampleBatch, cfg: &BridgeConfig, preds: &impl Predictors) -> Result<Trajectory> {
    solve_with(x0, cfg, preds, false)
}

/// Like [`solve`], keeping every intermediate state.
pub fn solve_traced(x0: &SampleBatch, cfg: &BridgeConfig, preds: &impl Predictors) -> Result<Trajectory> {
    solve_with(x0, cfg, preds, true)
}

fn solve_with(x0: &SampleBatch, cfg: &BridgeConfig, preds: &impl Predictors, retain: bool) -> Result<Trajectory> {
    cfg.validate()?;
    x0.expect_dim(preds.dim())?;
    if (preds.tau() - cfg.sb.tau).abs() > 1e-12 * cfg.sb.tau.max(1.0) {
        return Err(Error::param(format!(
            "predictors were built for tau = {} but the config has tau = {}",
            preds.tau(),
            cfg.sb.tau
        )));
    }
    let m = cfg.euler_steps();
    if m < 1 {
        return Err(Error::param("nfe must leave at least one Euler step"));
    }
    let sb = cfg.sb;
    let dt = (1.0 - sb.t0) / m as f64;
    let times: Vec<f64> = (0..=m).map(|i| sb.t0 + (1.0 - sb.t0) * i as f64 / m as f64).collect();
    let s0 = sb_sigma(sb.t0, sb.tau);

    let per_sample = x0
        .rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut x = init_row(row, sb.t0, s0, cfg.seed, i);
            let mut hist = Vec::new();
            if retain {
                hist.push(x.clone());
            }
            for (step, &t) in times[..m].iter().enumerate() {
                let v = velocity(preds, &x, sb.clamp_time(t), &sb)?;
                x.iter_mut().zip(&v).for_each(|(x, v)| *x += dt * v);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step });
                }
                if retain {
                    hist.push(x.clone());
                }
            }
            let out = if cfg.final_denoise {
                let p = preds.predict(&x, sb.clamp_time(times[m]))?;
                if p.x1.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step: m });
                }
                p.x1
            } else {
                x
            };
            Ok((hist, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = x0.dim();
    let final_batch = SampleBatch::new(d, per_sample.iter().flat_map(|(_, o)| o.iter().copied()).collect())?;
    let states = if retain {
        (0..=m)
            .map(|k| SampleBatch::new(d, per_sample.iter().flat_map(|(h, _)| h[k].iter().copied()).collect()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Trajectory {
        times,
        states,
        final_batch,
        nfe_used: cfg.nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{independent_coupling, CouplingPlan};
    use crate::predictors::{Counting, EmpiricalBayes, GaussianAnalytic};
    use crate::toy::{gen_toy, GaussianMixture};

    fn single_pair(a: [f64; 2], b: [f64; 2], tau: f64) -> EmpiricalBayes {
        let plan = CouplingPlan::new(
            SampleBatch::from_rows(&[a]).unwrap(),
            SampleBatch::from_rows(&[b]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        EmpiricalBayes::new(plan, tau).unwrap()
    }

    fn cfg(tau: f64, t0: f64, nfe: usize, final_denoise: bool) -> BridgeConfig {
        BridgeConfig {
            sb: SbParams::new(tau, t0, 1e-3).unwrap(),
            omega: 1.0,
            nfe,
            final_denoise,
            seed: 7,
        }
    }

    #[test]
    fn midpoint_and_zero_tau_velocity() {
        let eb = single_pair([1.0, 2.0], [-3.0, 0.5], 2.0);
        let sb = SbParams::new(2.0, 0.2, 1e-3).unwrap();
        for x in [[0.0, 0.0], [5.0, -1.0]] {
            assert_eq!(velocity(&eb, &x, 0.5, &sb).unwrap(), vec![-4.0, -1.5]);
        }
        let g = GaussianAnalytic::new(
            GaussianMixture::isotropic(vec![1.0, 0.0], 0.5).unwrap(),
            GaussianMixture::standard(2),
            0.0,
        )
        .unwrap();
        let sb0 = SbParams::new(0.0, 0.0, 1e-3).unwrap();
        let p = g.predict(&[0.3, 0.4], 0.3).unwrap();
        let v = velocity(&g, &[0.3, 0.4], 0.3, &sb0).unwrap();
        for (k, vk) in v.iter().enumerate() {
            assert_eq!(*vk, p.x1[k] - p.x0[k]);
        }
        assert!(velocity(&g, &[0.3, 0.4], 0.0, &sb0).is_err());
        assert!(velocity(&g, &[0.3, 0.4], 0.9995, &sb0).is_err());
    }

    #[test]
    fn init_state_examples() {
        let x0 = gen_toy("gaussian(1,-1)", 50, 3).unwrap();
        assert_eq!(init_state(&x0, 0.0, 6.25, 1).unwrap(), x0);
        let x = init_state(&x0, 0.2, 6.25, 1).unwrap();
        for (i, (a, b)) in x.rows().zip(x0.rows()).enumerate() {
            let eps = standard_normal(&mut RootSeed(1).stream("init", i as u64), 2);
            for k in 0..2 {
                assert!((a[k] - (0.8 * b[k] + eps[k])).abs() < 1e-15);
            }
        }
        assert!(init_state(&x0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn init_state_variance() {
        let n = 100_000;
        let x0 = SampleBatch::new(1, vec![0.5; n]).unwrap();
        let (t0, tau) = (0.3, 2.0);
        let x = init_state(&x0, t0, tau, 11).unwrap();
        let r: Vec<f64> = x.as_slice().iter().map(|v| v - (1.0 - t0) * 0.5).collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = t0 * (1.0 - t0) * tau;
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
    }

    #[test]
    fn one_step_from_source_atom() {
        let (a, b) = ([1.0, -1.0], [3.0, 2.0]);
        let eb = single_pair(a, b, 1.0);
        let x0 = SampleBatch::from_rows(&[a]).unwrap();
        let tr = solve(&x0, &cfg(1.0, 0.0, 1, false), &eb).unwrap();
        let f = 0.5 / (1.0 - 1e-3);
        for k in 0..2 {
            let want = a[k] + (b[k] - a[k]) * f;
            assert!((tr.final_batch.row(0)[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn final_denoise_on_single_pair_returns_target_atom() {
        let eb = single_pair([0.0, 0.0], [2.0, 1.0], 1.0);
        let x0 = SampleBatch::from_rows(&[[0.0, 0.0], [0.3, -0.2]]).unwrap();
        let tr = solve(&x0, &cfg(1.0, 0.2, 4, true), &eb).unwrap();
        for r in tr.final_batch.rows() {
            assert_eq!(r, &[2.0, 1.0]);
        }
        let sb = SbParams::new(1.0, 0.2, 1e-3).unwrap();
        let fd = final_denoise(&x0, 0.7, &eb, &sb).unwrap();
        assert_eq!(fd.row(1), &[2.0, 1.0]);
    }

    #[test]
    fn final_denoise_reads_the_end_state_at_its_own_time() {
        // same Euler path with and without the extra evaluation; the denoised
        // end point must stay on top of the undenoised one
        let g = GaussianAnalytic::new(
            GaussianMixture::isotropic(vec![-4.0, 0.0], 0.3).unwrap(),
            GaussianMixture::isotropic(vec![4.0, 0.0], 0.3).unwrap(),
            1.0,
        )
        .unwrap();
        let x0 = gen_toy("gaussian(-4,0;0.3)", 50, 2).unwrap();
        let plain = solve(&x0, &cfg(1.0, 0.0, 15, false), &g).unwrap().final_batch;
        let denoised = solve(&x0, &cfg(1.0, 0.0, 16, true), &g).unwrap().final_batch;
        for (a, b) in plain.rows().zip(denoised.rows()) {
            assert!((a[0] - b[0]).abs() < 0.05 && (a[1] - b[1]).abs() < 0.05, "{a:?} {b:?}");
        }
    }

    #[test]
    fn final_denoise_at_zero_noise_is_identity() {
        let g = GaussianAnalytic::new(
            GaussianMixture::isotropic(vec![1.0, 0.0], 0.5).unwrap(),
            GaussianMixture::standard(2),
            0.0,
        )
        .unwrap();
        let sb = SbParams::new(0.0, 0.0, 1e-3).unwrap();
        let x = gen_toy("gaussian(0,0)", 20, 1).unwrap();
        let out = final_denoise(&x, 0.999, &g, &sb).unwrap();
        // at t -> 1 with no bridge noise the state pins down x1 exactly
        for (a, b) in out.rows().zip(x.rows()) {
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 5e-3);
            }
        }
    }

    #[test]
    fn final_denoise_contracts_toward_target_mode() {
        let p1 = GaussianMixture::isotropic(vec![3.0, 3.0], 0.1).unwrap();
        // source centred on the same mode so the bridge mean stays there
        let p0 = GaussianMixture::isotropic(vec![3.0, 3.0], 1.0).unwrap();
        let g = GaussianAnalytic::new(p0, p1, 1.0).unwrap();
        let sb = SbParams::new(1.0, 0.2, 1e-3).unwrap();
        let probes = gen_toy("gaussian(2.9,2.9;0.3)", 100, 5).unwrap();
        let out = final_denoise(&probes, 0.9, &g, &sb).unwrap();
        let dist = |r: &[f64]| ((r[0] - 3.0).powi(2) + (r[1] - 3.0).powi(2)).sqrt();
        for (a, b) in out.rows().zip(probes.rows()) {
            assert!(dist(a) < dist(b));
        }
    }

    #[test]
    fn nfe_accounting() {
        let a = gen_toy("gaussian(0,0)", 8, 1).unwrap();
        let b = gen_toy("gaussian(3,0)", 8, 2).unwrap();
        let eb = EmpiricalBayes::new(independent_coupling(&a, &b).unwrap(), 1.0).unwrap();
        let x = gen_toy("gaussian(0,0)", 5, 3).unwrap();
        for (nfe, fd) in [(1, false), (2, true), (8, true), (8, false)] {
            let c = Counting::new(&eb);
            let tr = solve(&x, &cfg(1.0, 0.2, nfe, fd), &c).unwrap();
            assert_eq!(c.calls(), nfe * x.len());
            assert_eq!(tr.nfe_used, nfe);
            let steps = if fd { nfe - 1 } else { nfe };
            assert_eq!(tr.times.len(), steps + 1);
        }
        assert!(solve(&x, &cfg(1.0, 0.2, 1, true), &eb).is_err());
        assert!(solve(&x, &cfg(2.0, 0.2, 4, true), &eb).is_err());
    }

    #[test]
    fn trajectory_grid_and_replay() {
        let a = gen_toy("eight-gaussians", 16, 1).unwrap();
        let b = gen_toy("two-moons", 16, 2).unwrap();
        let eb = EmpiricalBayes::new(independent_coupling(&a, &b).unwrap(), 1.0).unwrap();
        let x = gen_toy("eight-gaussians", 6, 9).unwrap();
        let c = cfg(1.0, 0.2, 9, true);
        let t1 = solve_traced(&x, &c, &eb).unwrap();
        let t2 = solve_traced(&x, &c, &eb).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.states.len(), t1.times.len());
        assert_eq!(t1.times[0], 0.2);
        assert_eq!(*t1.times.last().unwrap(), 1.0);
        assert!(t1.times.windows(2).all(|w| w[0] < w[1]));
        let csv = t1.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 * t1.times.len());
        assert!(csv.starts_with("sample,t,x0,x1\n"));
        assert!(solve(&x, &c, &eb).unwrap().states.is_empty());
    }

    #[test]
    fn zero_tau_flow_reaches_standard_normal() {
        let p0 = GaussianMixture::isotropic(vec![2.0, 0.0], 0.5).unwrap();
        let g = GaussianAnalytic::new(p0.clone(), GaussianMixture::standard(2), 0.0).unwrap();
        let x = crate::toy::sample(&crate::toy::DatasetSpec::Mixture(p0), 4000, 4).unwrap();
        let tr = solve(&x, &cfg(0.0, 0.0, 512, false), &g).unwrap();
        let m = tr.final_batch.mean();
        let c = tr.final_batch.covariance();
        assert!(m[0].abs() < 0.05 && m[1].abs() < 0.05, "{m:?}");
        assert!((c[0] - 1.0).abs() < 0.05 && (c[3] - 1.0).abs() < 0.05 && c[1].abs() < 0.05, "{c:?}");
    }

    #[test]
    fn reversed_roles_translate_back() {
        let p0 = GaussianMixture::isotropic(vec![-1.5, 0.0], 0.3).unwrap();
        let p1 = GaussianMixture::isotropic(vec![1.5, 0.0], 0.3).unwrap();
        let tau = 0.5;
        let fwd = GaussianAnalytic::new(p0.clone(), p1.clone(), tau).unwrap();
        let bwd = GaussianAnalytic::new(p1, p0.clone(), tau).unwrap();
        let x = crate::toy::sample(&crate::toy::DatasetSpec::Mixture(p0), 200, 8).unwrap();
        let c = cfg(tau, 0.0, 512, false);
        let there = solve(&x, &c, &fwd).unwrap().final_batch;
        let back = solve(&there, &c, &bwd).unwrap().final_batch;
        let rms = (x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / x.as_slice().len() as f64)
            .sqrt();
        assert!(rms < 2e-2, "{rms}");
    }
}
