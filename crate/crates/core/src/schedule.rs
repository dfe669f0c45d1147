//! Bridge and VP noise schedules, and the signal-to-noise conversion that
//! lets a VP noise predictor read bridge states.

use crate::{Error, Result};

/// Bridge variance, initial time and the interior margin used whenever a
/// velocity is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbParams {
    pub tau: f64,
    pub t0: f64,
    pub t_clamp: f64,
}

impl SbParams {
    pub fn new(tau: f64, t0: f64, t_clamp: f64) -> Result<Self> {
        let p = SbParams { tau, t0, t_clamp };
        p.validate()?;
        Ok(p)
    }

    pub fn from_sqrt_tau(sqrt_tau: f64, t0: f64) -> Result<Self> {
        SbParams::new(sqrt_tau * sqrt_tau, t0, DEFAULT_T_CLAMP)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.t0) {
            return Err(Error::param(format!("t0 must lie in [0, 1), got {}", self.t0)));
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.5) {
            return Err(Error::param(format!(
                "t_clamp must lie in (0, 0.5), got {}",
                self.t_clamp
            )));
        }
        Ok(())
    }

    pub fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(self.t_clamp, 1.0 - self.t_clamp)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = (self.t_clamp, 1.0 - self.t_clamp);
        if t < lo || t > hi || t.is_nan() {
            return Err(Error::TimeOutOfRange { t, lo, hi });
        }
        Ok(())
    }
}

pub const DEFAULT_T_CLAMP: f64 = 1e-3;

impl Default for SbParams {
    /// `t0 = 0.2`, `sqrt(tau) = 2.5`.
    fn default() -> Self {
        SbParams {
            tau: 6.25,
            t0: 0.2,
            t_clamp: DEFAULT_T_CLAMP,
        }
    }
}

/// Solver inputs: bridge parameters, guidance scale, evaluation budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub sb: SbParams,
    pub omega: f64,
    /// Total predictor evaluations per sample, including the final
    /// denoising step when enabled.
    pub nfe: usize,
    pub final_denoise: bool,
    pub seed: u64,
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.sb.validate()?;
        if self.nfe < 1 {
            return Err(Error::param("nfe must be at least 1"));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::param(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        Ok(())
    }

    /// Number of Euler steps left after the final denoising step.
    pub fn euler_steps(&self) -> usize {
        self.nfe - usize::from(self.final_denoise)
    }
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            sb: SbParams::default(),
            omega: 11.0,
            nfe: 8,
            final_denoise: true,
            seed: 0,
        }
    }
}

/// Cumulative signal coefficient `alpha_bar` of a VP forward process.
///
/// The complement `1 - alpha_bar` is carried alongside so that nearly clean
/// levels keep full relative precision in their noise coefficient and SNR.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel {
    alpha_bar: f64,
    complement: f64,
}

impl NoiseLevel {
    pub const CLEAN: NoiseLevel = NoiseLevel {
        alpha_bar: 1.0,
        complement: 0.0,
    };

    pub fn new(alpha_bar: f64) -> Result<Self> {
        if alpha_bar > 0.0 && alpha_bar <= 1.0 {
            Ok(NoiseLevel {
                alpha_bar,
                complement: 1.0 - alpha_bar,
            })
        } else {
            Err(Error::param(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")))
        }
    }

    /// The level whose variance-exploding sigma is `sigma`, i.e.
    /// `alpha_bar = 1 / (sigma^2 + 1)`.
    pub fn from_ve_sigma(sigma: f64) -> Self {
        let s2 = sigma * sigma;
        NoiseLevel {
            alpha_bar: 1.0 / (s2 + 1.0),
            complement: s2 / (s2 + 1.0),
        }
    }

    pub fn alpha_bar(self) -> f64 {
        self.alpha_bar
    }

    /// `1 - alpha_bar`.
    pub fn complement(self) -> f64 {
        self.complement
    }

    pub fn signal(self) -> f64 {
        self.alpha_bar.sqrt()
    }

    pub fn noise(self) -> f64 {
        self.complement.sqrt()
    }

    /// `alpha_bar / (1 - alpha_bar)`; infinite at the clean level.
    pub fn snr(self) -> f64 {
        self.alpha_bar / self.complement
    }

    /// `sqrt((1 - alpha_bar) / alpha_bar)`, the variance-exploding sigma of
    /// the same level.
    pub fn ve_sigma(self) -> f64 {
        (self.complement / self.alpha_bar).sqrt()
    }
}

/// Standard deviation of the bridge at time `t`: `sqrt(t (1 - t) tau)`.
pub fn sb_sigma(t: f64, tau: f64) -> f64 {
    // ordered product: sb_sigma(t) and sb_sigma(1 - t) differ only by the
    // rounding of 1 - t
    let (a, b) = (t, 1.0 - t);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (lo * hi * tau).sqrt()
}

/// Bridge mean `(1 - t) x0 + t x1`.
pub fn sb_mu(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: x1.len(),
        });
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// Map a bridge state to the VP level with the same signal-to-noise ratio:
/// `alpha_bar = 1 / (sigma_t^2 + 1)` and `y = sqrt(alpha_bar) x_t`.
pub fn snr_match(x_t: &[f64], t: f64, tau: f64) -> (NoiseLevel, Vec<f64>) {
    let sigma = sb_sigma(t, tau);
    let level = NoiseLevel::from_ve_sigma(sigma);
    let scale = level.signal();
    (level, x_t.iter().map(|v| v * scale).collect())
}

/// Weight of the noise predictor in the bridge velocity,
/// `(1/2 - t) sqrt(tau) / sqrt(t (1 - t))`.
pub fn noise_coefficient(t: f64, tau: f64) -> f64 {
    (0.5 - t) * tau.sqrt() / (t * (1.0 - t)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigma_examples() {
        assert_eq!(sb_sigma(0.0, 4.0), 0.0);
        assert_eq!(sb_sigma(1.0, 4.0), 0.0);
        assert_eq!(sb_sigma(0.5, 4.0), 1.0);
        // sqrt(0.2 * 0.8 * 6.25) = sqrt(1)
        assert!((sb_sigma(0.2, 6.25) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mu_examples() {
        let (x0, x1) = ([0.0, 0.0], [2.0, 4.0]);
        assert_eq!(sb_mu(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(sb_mu(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(sb_mu(&x0, &x1, 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            sb_mu(&[0.0], &[1.0, 2.0], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn snr_match_examples() {
        let x = [1.0, -3.0];
        let (l, y) = snr_match(&x, 0.0, 4.0);
        assert_eq!(l.alpha_bar(), 1.0);
        assert_eq!(y, x.to_vec());

        let (l, y) = snr_match(&x, 0.2, 6.25);
        assert!((l.alpha_bar() - 0.5).abs() < 1e-15);
        for (a, b) in y.iter().zip(x) {
            assert!((a - b / 2f64.sqrt()).abs() < 1e-15);
        }

        let (l, _) = snr_match(&x, 0.5, 4.0);
        assert!((l.alpha_bar() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noise_level_bounds() {
        assert!(NoiseLevel::new(0.0).is_err());
        assert!(NoiseLevel::new(1.0 + 1e-12).is_err());
        let l = NoiseLevel::new(0.2).unwrap();
        assert!((NoiseLevel::from_ve_sigma(l.ve_sigma()).alpha_bar() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(SbParams::new(-1.0, 0.2, 1e-3).is_err());
        assert!(SbParams::new(1.0, 1.0, 1e-3).is_err());
        assert!(SbParams::new(1.0, 0.2, 0.5).is_err());
        let cfg = BridgeConfig { nfe: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = BridgeConfig { omega: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn sigma_is_symmetric(t in 0.0f64..=1.0, tau in 0.0f64..20.0) {
            // exact whenever the mirror time round-trips
            prop_assume!(1.0 - (1.0 - t) == t);
            prop_assert_eq!(sb_sigma(t, tau), sb_sigma(1.0 - t, tau));
        }

        #[test]
        fn snr_identity(t in 0.001f64..0.999, tau in 1e-6f64..10.0) {
            let (l, _) = snr_match(&[0.0], t, tau);
            let s2 = sb_sigma(t, tau).powi(2);
            prop_assert!(((l.snr() - 1.0 / s2) * s2).abs() <= 1e-12);
        }
    }
}
