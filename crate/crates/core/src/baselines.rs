//! Comparison translators over the VP noise predictor: SDEdit-style
//! noise-then-denoise and invert-then-generate ("dual bridge").
//!
//! Both integrate the deterministic VP probability-flow ODE with the
//! denoising-step update
//!
//! ```text
//! y' = sqrt(a') x_hat + sqrt(1 - a') eps_w,   x_hat = (y - sqrt(1 - a) eps_w) / sqrt(a)
//! ```
//!
//! where `eps_w` is the guided noise at the current level `a`. One update is
//! one network evaluation. Levels are spaced uniformly in `sigma^(1/7)` of the
//! variance-exploding sigma `sqrt((1 - a) / a)`.

use rayon::prelude::*;

use crate::denoiser::{tweedie, Domain, NoisePredictor};
use crate::rng::{standard_normal, RootSeed};
use crate::schedule::{sb_sigma, NoiseLevel, SbParams};
use crate::{Error, Result, SampleBatch};

/// Noisiest level reached by inversion; the floor of the training range.
pub const INVERSION_FLOOR: f64 = 0.02;

const RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Toward noise, `alpha_bar` non-increasing.
    Invert,
    /// Toward data, `alpha_bar` non-decreasing.
    Generate,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Invert => "invert",
            Direction::Generate => "generate",
        }
    }
}

/// One deterministic step from `from` to `to`.
pub fn pf_ode_step(
    model: &impl NoisePredictor,
    y: &[f64],
    from: NoiseLevel,
    to: NoiseLevel,
    token: Domain,
    omega: f64,
    direction: Direction,
) -> Result<Vec<f64>> {
    let ok = match direction {
        Direction::Invert => to.alpha_bar() <= from.alpha_bar(),
        Direction::Generate => to.alpha_bar() >= from.alpha_bar(),
    };
    if !ok {
        return Err(Error::LevelOrder {
            from: from.alpha_bar(),
            to: to.alpha_bar(),
            direction: direction.name(),
        });
    }
    if from == to {
        return Ok(y.to_vec());
    }
    let eps = model.predict_guided(y, from, token, omega);
    let x = tweedie(y, &eps, from);
    let (s, n) = (to.signal(), to.noise());
    Ok(x.iter().zip(&eps).map(|(x, e)| s * x + n * e).collect())
}

/// `steps + 1` levels from `from` to `to`, uniform in `sigma^(1/7)`.
pub fn level_path(from: NoiseLevel, to: NoiseLevel, steps: usize) -> Vec<NoiseLevel> {
    let (a, b) = (from.ve_sigma().powf(1.0 / RHO), to.ve_sigma().powf(1.0 / RHO));
    (0..=steps)
        .map(|i| match i {
            0 => from,
            i if i == steps => to,
            i => {
                let f = i as f64 / steps as f64;
                NoiseLevel::from_ve_sigma((a + f * (b - a)).powf(RHO))
            }
        })
        .collect()
}

fn run_path(
    model: &impl NoisePredictor,
    y: &mut Vec<f64>,
    path: &[NoiseLevel],
    token: Domain,
    omega: f64,
    direction: Direction,
) -> Result<()> {
    for (step, w) in path.windows(2).enumerate() {
        *y = pf_ode_step(model, y, w[0], w[1], token, omega, direction)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
    }
    Ok(())
}

fn per_row(x: &SampleBatch, f: impl Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync) -> Result<SampleBatch> {
    let rows = x
        .rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| f(i, r))
        .collect::<Result<Vec<_>>>()?;
    SampleBatch::from_rows(&rows)
}

fn check(model: &impl NoisePredictor, x: &SampleBatch, nfe: usize) -> Result<()> {
    x.expect_dim(model.dim())?;
    if nfe == 0 {
        return Err(Error::param("nfe must be >= 1"));
    }
    Ok(())
}

/// Forward-noises each row to the level matching the bridge state at `t0`,
/// then runs `nfe` target-conditioned steps to the clean level. Row `i` draws
/// its noise from stream `(seed, "sdedit", i)`.
pub fn sdedit_translate(
    x0: &SampleBatch,
    nfe: usize,
    sb: &SbParams,
    model: &impl NoisePredictor,
    omega: f64,
    seed: u64,
) -> Result<SampleBatch> {
    check(model, x0, nfe)?;
    let start = NoiseLevel::from_ve_sigma(sb_sigma(sb.t0, sb.tau));
    let path = level_path(start, NoiseLevel::CLEAN, nfe);
    per_row(x0, |i, r| {
        let mut rng = RootSeed(seed).stream("sdedit", i as u64);
        let eps = standard_normal(&mut rng, r.len());
        let mut y: Vec<f64> = r.iter().zip(eps).map(|(x, e)| start.signal() * x + start.noise() * e).collect();
        run_path(model, &mut y, &path, Domain::Target, omega, Direction::Generate)?;
        Ok(y)
    })
}

/// `nfe / 2` inversion steps conditioned on `from`, down to
/// [`INVERSION_FLOOR`], then `nfe / 2` generation steps conditioned on `to`.
pub fn invert_then_generate(
    x: &SampleBatch,
    nfe: usize,
    model: &impl NoisePredictor,
    omega: f64,
    from: Domain,
    to: Domain,
) -> Result<SampleBatch> {
    check(model, x, nfe)?;
    if !nfe.is_multiple_of(2) {
        return Err(Error::param(format!("nfe must be even, got {nfe}")));
    }
    let floor = NoiseLevel::new(INVERSION_FLOOR)?;
    let down: Vec<NoiseLevel> = {
        let mut p = level_path(floor, NoiseLevel::CLEAN, nfe / 2);
        p.reverse();
        p
    };
    let up = level_path(floor, NoiseLevel::CLEAN, nfe / 2);
    per_row(x, |_, r| {
        let mut y = r.to_vec();
        run_path(model, &mut y, &down, from, omega, Direction::Invert)?;
        run_path(model, &mut y, &up, to, omega, Direction::Generate)?;
        Ok(y)
    })
}

/// Source-to-target invert-then-generate.
pub fn dual_bridge_translate(x0: &SampleBatch, nfe: usize, model: &impl NoisePredictor, omega: f64) -> Result<SampleBatch> {
    invert_then_generate(x0, nfe, model, omega, Domain::Source, Domain::Target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::GaussianNoiseOracle;
    use crate::schedule::snr_match;
    use crate::toy::{gen_toy, GaussianMixture};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counted<'a> {
        inner: &'a GaussianNoiseOracle,
        calls: AtomicUsize,
    }

    impl NoisePredictor for Counted<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }

        fn predict_noise(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Vec<f64> {
            self.inner.predict_noise(y, level, token)
        }

        fn predict_guided(&self, y: &[f64], level: NoiseLevel, token: Domain, omega: f64) -> Vec<f64> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.predict_guided(y, level, token, omega)
        }
    }

    fn oracle() -> GaussianNoiseOracle {
        GaussianNoiseOracle::with_pooled_null(
            GaussianMixture::isotropic(vec![-2.0, 0.0], 0.3).unwrap(),
            GaussianMixture::isotropic(vec![2.0, 1.0], 0.2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_step_and_ordering() {
        let o = oracle();
        let l = NoiseLevel::new(0.4).unwrap();
        let y = [0.3, -0.1];
        assert_eq!(pf_ode_step(&o, &y, l, l, Domain::Source, 3.0, Direction::Invert).unwrap(), y.to_vec());
        let hi = NoiseLevel::new(0.9).unwrap();
        assert!(matches!(
            pf_ode_step(&o, &y, l, hi, Domain::Source, 1.0, Direction::Invert),
            Err(Error::LevelOrder { .. })
        ));
        assert!(pf_ode_step(&o, &y, hi, l, Domain::Source, 1.0, Direction::Generate).is_err());
        assert!(pf_ode_step(&o, &y, hi, l, Domain::Source, 1.0, Direction::Invert).is_ok());
    }

    #[test]
    fn level_path_is_monotone_with_exact_ends() {
        let a = NoiseLevel::new(0.02).unwrap();
        let p = level_path(a, NoiseLevel::CLEAN, 10);
        assert_eq!(p.len(), 11);
        assert_eq!(p[0], a);
        assert_eq!(p[10], NoiseLevel::CLEAN);
        assert!(p.windows(2).all(|w| w[0].alpha_bar() < w[1].alpha_bar()));
    }

    #[test]
    fn inversion_with_oracle_reaches_noise_moments() {
        // single Gaussian data; the deterministic flow carries it to the
        // marginal at the floor level, N(sqrt(a) m, a S + (1 - a) I)
        let p = GaussianMixture::single(vec![1.0, -0.5], vec![0.5, 0.1, 0.1, 0.3]).unwrap();
        let o = GaussianNoiseOracle::new(p.clone(), p.clone(), p.clone()).unwrap();
        let x = crate::toy::sample(&crate::toy::DatasetSpec::Mixture(p), 4000, 2).unwrap();
        let path = level_path(NoiseLevel::new(0.999).unwrap(), NoiseLevel::new(INVERSION_FLOOR).unwrap(), 200);
        let out = per_row(&x, |_, r| {
            // start from the forward marginal at 0.999, which is almost x
            let mut y: Vec<f64> = r.iter().map(|v| v * path[0].signal()).collect();
            run_path(&o, &mut y, &path, Domain::Source, 1.0, Direction::Invert)?;
            Ok(y)
        })
        .unwrap();
        let a = INVERSION_FLOOR;
        let m = out.mean();
        let c = out.covariance();
        let want_m = [a.sqrt() * 1.0, a.sqrt() * -0.5];
        let want_c = [a * 0.5 + 1.0 - a, a * 0.1, a * 0.1, a * 0.3 + 1.0 - a];
        for k in 0..2 {
            assert!((m[k] - want_m[k]).abs() < 0.05, "{m:?}");
        }
        for k in 0..4 {
            assert!((c[k] - want_c[k]).abs() < 0.05 * want_c[0], "{c:?}");
        }
    }

    #[test]
    fn sdedit_start_matches_snr_level_and_identity_at_t0_zero() {
        let o = oracle();
        let sb = SbParams::new(6.25, 0.2, 1e-3).unwrap();
        let (l, _) = snr_match(&[0.0], sb.t0, sb.tau);
        assert_eq!(NoiseLevel::from_ve_sigma(sb_sigma(0.2, 6.25)), l);
        let x = gen_toy("gaussian(-2,0;0.3)", 10, 1).unwrap();
        let sb0 = SbParams::new(6.25, 0.0, 1e-3).unwrap();
        assert_eq!(sdedit_translate(&x, 4, &sb0, &o, 2.0, 3).unwrap(), x);
    }

    #[test]
    fn budget_is_exactly_nfe() {
        let o = oracle();
        let c = Counted {
            inner: &o,
            calls: AtomicUsize::new(0),
        };
        let x = gen_toy("gaussian(-2,0;0.3)", 7, 1).unwrap();
        let sb = SbParams::default();
        sdedit_translate(&x, 8, &sb, &c, 2.0, 1).unwrap();
        assert_eq!(c.calls.swap(0, Ordering::Relaxed), 8 * 7);
        dual_bridge_translate(&x, 6, &c, 2.0).unwrap();
        assert_eq!(c.calls.load(Ordering::Relaxed), 6 * 7);
        assert!(dual_bridge_translate(&x, 5, &o, 2.0).is_err());
        assert!(dual_bridge_translate(&x, 0, &o, 2.0).is_err());
    }

    #[test]
    fn oracle_round_trip_is_first_order() {
        let o = oracle();
        let x = gen_toy("gaussian(-2,0;0.3)", 50, 4).unwrap();
        // argument: steps per direction
        let err = |steps: usize| {
            let y = invert_then_generate(&x, 2 * steps, &o, 1.0, Domain::Source, Domain::Source).unwrap();
            (x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 100.0).sqrt()
        };
        let (e8, e16, e64, e512) = (err(8), err(16), err(64), err(512));
        assert!(e16 < e8 && e64 < e16 && e512 < e64, "{e8} {e16} {e64} {e512}");
        let order = (e16 / e64).log2() / 2.0;
        assert!((order - 1.0).abs() < 0.2, "{order}");
        assert!(e512 < 1e-2, "{e512}");
    }

    #[test]
    fn dual_bridge_moves_to_target_with_oracle() {
        let o = oracle();
        let x = gen_toy("gaussian(-2,0;0.3)", 500, 4).unwrap();
        let y = dual_bridge_translate(&x, 64, &o, 1.0).unwrap();
        let m = y.mean();
        // the floor level still carries sqrt(0.02) of the source signal, so
        // the generated mean falls slightly short of the target mean
        assert!(m[0] > 1.5 && m[0] < 2.1 && m[1] > 0.7 && m[1] < 1.1, "{m:?}");
    }
}
