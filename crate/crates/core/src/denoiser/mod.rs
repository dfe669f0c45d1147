//! Domain-conditioned VP noise predictor `eps(y, alpha_bar, c)` and its
//! denoising score matching trainer.

mod mlp;
mod train;

pub use mlp::{Activation, Mlp, MlpArch};
pub use train::{draw_dsm_batch, dsm_loss, dsm_loss_with, eval_loss, train, DsmSample, TrainConfig, TrainOutcome};

use crate::schedule::NoiseLevel;

/// Conditioning token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
    /// Unconditional branch, used for classifier-free guidance.
    Null,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Source, Domain::Target, Domain::Null];

    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
            Domain::Null => 2,
        }
    }
}

/// Anything that predicts the noise component of a VP sample.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;

    fn predict_noise(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Vec<f64>;

    /// `(1 - omega) eps(y, null) + omega eps(y, token)`.
    fn predict_guided(&self, y: &[f64], level: NoiseLevel, token: Domain, omega: f64) -> Vec<f64> {
        let cond = self.predict_noise(y, level, token);
        if omega == 1.0 || token == Domain::Null {
            return cond;
        }
        let null = self.predict_noise(y, level, Domain::Null);
        null.iter().zip(&cond).map(|(u, c)| (1.0 - omega) * u + omega * c).collect()
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_noise(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Vec<f64> {
        (**self).predict_noise(y, level, token)
    }
}

/// Tweedie's posterior mean `(y - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar)`.
pub fn tweedie(y: &[f64], eps: &[f64], level: NoiseLevel) -> Vec<f64> {
    let (s, n) = (level.signal(), level.noise());
    y.iter().zip(eps).map(|(y, e)| (y - n * e) / s).collect()
}
