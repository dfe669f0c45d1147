use super::gaussian::gaussian_denoise;
use super::{Backend, Prediction, Predictors};
use crate::denoiser::{tweedie, Domain, NoisePredictor};
use crate::schedule::{sb_sigma, NoiseLevel};
use crate::toy::GaussianMixture;
use crate::{Error, Result};

/// Switches for the VP backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpOptions {
    /// Guidance weight; `1` disables guidance.
    pub omega: f64,
    /// Scale the state by `sqrt(alpha_bar)` before querying. When off the raw
    /// state is passed at the same level.
    pub snr_matching: bool,
    /// Read the noise from the source predictor before the midpoint and from
    /// the target predictor after it. When off the source predictor is used
    /// throughout.
    pub time_dependent_eps: bool,
}

impl Default for VpOptions {
    fn default() -> Self {
        VpOptions {
            omega: 11.0,
            snr_matching: true,
            time_dependent_eps: true,
        }
    }
}

/// Bridge predictors read off a domain-conditioned VP noise predictor.
///
/// At time `t` the state is mapped to the level `alpha_bar = 1 / (sigma_t^2 + 1)`
/// and `y = sqrt(alpha_bar) x_t`. Each endpoint estimate is Tweedie's formula
/// applied to the guided noise of its domain; the noise estimate itself is
/// unguided. Each call batches the three conditioning branches into one
/// evaluation.
#[derive(Debug, Clone)]
pub struct VpBackend<N> {
    model: N,
    tau: f64,
    opts: VpOptions,
}

impl<N: NoisePredictor> VpBackend<N> {
    pub fn new(model: N, tau: f64, opts: VpOptions) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::param(format!("tau must be finite and >= 0, got {tau}")));
        }
        if !opts.omega.is_finite() {
            return Err(Error::param(format!("omega must be finite, got {}", opts.omega)));
        }
        Ok(VpBackend { model, tau, opts })
    }

    pub fn options(&self) -> VpOptions {
        self.opts
    }

    pub fn model(&self) -> &N {
        &self.model
    }
}

impl<N: NoisePredictor> Predictors for VpBackend<N> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn backend(&self) -> Backend {
        Backend::Vp
    }

    fn predict(&self, x: &[f64], t: f64) -> Result<Prediction> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let level = NoiseLevel::from_ve_sigma(sb_sigma(t, self.tau));
        let y: Vec<f64> = if self.opts.snr_matching {
            x.iter().map(|v| v * level.signal()).collect()
        } else {
            x.to_vec()
        };
        let w = self.opts.omega;
        let e0 = self.model.predict_noise(&y, level, Domain::Source);
        let e1 = self.model.predict_noise(&y, level, Domain::Target);
        let (g0, g1) = if w == 1.0 {
            (e0.clone(), e1.clone())
        } else {
            let en = self.model.predict_noise(&y, level, Domain::Null);
            let guide = |c: &[f64]| -> Vec<f64> { en.iter().zip(c).map(|(u, c)| (1.0 - w) * u + w * c).collect() };
            (guide(&e0), guide(&e1))
        };
        let x0 = tweedie(&y, &g0, level);
        let x1 = tweedie(&y, &g1, level);
        let eps = if self.opts.time_dependent_eps && t >= 0.5 { e1 } else { e0 };
        Ok(Prediction {
            x0,
            x1,
            eps,
            eps_degenerate: false,
        })
    }
}

/// Exact noise posterior `E[eps | y, c]` for Gaussian-mixture data under the
/// VP forward process `y = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps`.
#[derive(Debug, Clone)]
pub struct GaussianNoiseOracle {
    by_domain: [GaussianMixture; 3],
}

impl GaussianNoiseOracle {
    pub fn new(source: GaussianMixture, target: GaussianMixture, null: GaussianMixture) -> Result<Self> {
        let d = source.dim();
        for m in [&target, &null] {
            if m.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.dim() });
            }
        }
        Ok(GaussianNoiseOracle {
            by_domain: [source, target, null],
        })
    }

    /// Uses the equal-weight union of both domains for the null token.
    pub fn with_pooled_null(source: GaussianMixture, target: GaussianMixture) -> Result<Self> {
        let mut w = Vec::new();
        let mut m = Vec::new();
        let mut c = Vec::new();
        for p in [&source, &target] {
            for k in 0..p.components() {
                w.push(0.5 * p.weight(k));
                m.push(p.mean(k).to_vec());
                c.push(p.cov(k).to_vec());
            }
        }
        let null = GaussianMixture::new(w, m, c)?;
        GaussianNoiseOracle::new(source, target, null)
    }

    pub fn mixture(&self, token: Domain) -> &GaussianMixture {
        &self.by_domain[token.index()]
    }
}

impl NoisePredictor for GaussianNoiseOracle {
    fn dim(&self) -> usize {
        self.by_domain[0].dim()
    }

    fn predict_noise(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Vec<f64> {
        let (s, n) = (level.signal(), level.noise());
        if n == 0.0 {
            return vec![0.0; y.len()];
        }
        let scaled: Vec<f64> = y.iter().map(|v| v / s).collect();
        let var = level.complement() / level.alpha_bar();
        let x = gaussian_denoise(self.mixture(token), &scaled, var).expect("oracle mixtures are well formed");
        y.iter().zip(&x).map(|(y, x)| (y - s * x) / n).collect()
    }
}
