//! The predictor triple `(x0_hat, x1_hat, eps_hat)`: posterior means of the
//! source point, the target point and the injected noise given a bridge
//! state `x_t = (1 - t) x0 + t x1 + sigma_t eps`.
//!
//! Three backends implement [`Predictors`]:
//!
//! * [`EmpiricalBayes`]: exact posterior over the atoms of a
//!   [`CouplingPlan`](crate::coupling::CouplingPlan);
//! * [`GaussianAnalytic`]: closed form for Gaussian-mixture endpoints under
//!   the independent coupling;
//! * [`VpBackend`]: a learned domain-conditioned noise predictor read through
//!   SNR matching and Tweedie's formula, with classifier-free guidance.

mod empirical;
mod gaussian;
mod vp;

pub use empirical::EmpiricalBayes;
pub use gaussian::{gaussian_denoise, GaussianAnalytic};
pub use vp::{GaussianNoiseOracle, VpBackend, VpOptions};

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::Result;

/// One evaluation of the predictor triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub eps: Vec<f64>,
    /// Set when `sigma_t = 0` and `eps` is zero by convention rather than a
    /// posterior mean.
    pub eps_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    EmpiricalBayes,
    GaussianAnalytic,
    Vp,
}

pub trait Predictors: Sync {
    fn dim(&self) -> usize;

    fn tau(&self) -> f64;

    fn backend(&self) -> Backend;

    fn predict(&self, x_t: &[f64], t: f64) -> Result<Prediction>;
}

impl<P: Predictors + ?Sized> Predictors for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn tau(&self) -> f64 {
        (**self).tau()
    }

    fn backend(&self) -> Backend {
        (**self).backend()
    }

    fn predict(&self, x_t: &[f64], t: f64) -> Result<Prediction> {
        (**self).predict(x_t, t)
    }
}

/// Wraps a backend and counts evaluations.
pub struct Counting<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<P: Predictors> Predictors for Counting<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn tau(&self) -> f64 {
        self.inner.tau()
    }

    fn backend(&self) -> Backend {
        self.inner.backend()
    }

    fn predict(&self, x_t: &[f64], t: f64) -> Result<Prediction> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x_t, t)
    }
}

/// Residual `|(x1_hat^w - x0_hat^w) - w (x1_hat - x0_hat)|` between a backend
/// evaluated with guidance `omega` and the same backend without guidance.
pub fn cfg_scale_check(guided: &impl Predictors, unguided: &impl Predictors, omega: f64, x_t: &[f64], t: f64) -> Result<f64> {
    let g = guided.predict(x_t, t)?;
    let u = unguided.predict(x_t, t)?;
    let r2: f64 = (0..x_t.len())
        .map(|k| {
            let lhs = g.x1[k] - g.x0[k];
            let rhs = omega * (u.x1[k] - u.x0[k]);
            (lhs - rhs).powi(2)
        })
        .sum();
    Ok(r2.sqrt())
}
