use rand::Rng;

use super::mlp::Tape;
use super::{Domain, Mlp, MlpArch, NoisePredictor};
use crate::rng::{standard_normal, RootSeed, Stream};
use crate::schedule::NoiseLevel;
use crate::{Error, Result, SampleBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch_hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the domain token by [`Domain::Null`].
    pub cond_dropout: f64,
    /// `alpha_bar` is drawn log-uniformly in SNR between these levels.
    pub alpha_bar_range: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch_hidden: vec![64, 64],
            steps: 4000,
            batch_size: 256,
            lr: 1e-3,
            cond_dropout: 0.2,
            alpha_bar_range: (0.02, 0.999),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::param(format!("cond_dropout must lie in [0, 1), got {}", self.cond_dropout)));
        }
        let (lo, hi) = self.alpha_bar_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::param(format!(
                "alpha_bar_range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        Ok(())
    }

    fn log_snr_range(&self) -> (f64, f64) {
        let (lo, hi) = self.alpha_bar_range;
        ((lo / (1.0 - lo)).ln(), (hi / (1.0 - hi)).ln())
    }

    pub(crate) fn draw_level(&self, rng: &mut impl Rng) -> NoiseLevel {
        let (a, b) = self.log_snr_range();
        let lambda = if a == b { a } else { rng.random_range(a..b) };
        // sigmoid(lambda) with its complement sigmoid(-lambda)
        NoiseLevel::from_ve_sigma((-lambda).exp().sqrt())
    }
}

/// One denoising score matching draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmSample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub level: NoiseLevel,
    pub token: Domain,
    /// `sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps`.
    pub y: Vec<f64>,
}

/// Draw `cfg.batch_size` noisy samples: a domain uniformly at random, a data
/// point from that domain, a level and a noise vector; the token is then
/// dropped to null with probability `cfg.cond_dropout`.
pub fn draw_dsm_batch(batch0: &SampleBatch, batch1: &SampleBatch, cfg: &TrainConfig, rng: &mut Stream) -> Vec<DsmSample> {
    (0..cfg.batch_size)
        .map(|_| {
            let (token, data) = if rng.random::<bool>() {
                (Domain::Target, batch1)
            } else {
                (Domain::Source, batch0)
            };
            let x = data.row(rng.random_range(0..data.len())).to_vec();
            let level = cfg.draw_level(rng);
            let eps = standard_normal(rng, x.len());
            let y = x
                .iter()
                .zip(&eps)
                .map(|(xv, e)| level.signal() * xv + level.noise() * e)
                .collect();
            let token = if rng.random::<f64>() < cfg.cond_dropout { Domain::Null } else { token };
            DsmSample { x, eps, level, token, y }
        })
        .collect()
}

/// Mean squared noise-prediction error of an arbitrary predictor.
pub fn dsm_loss_with(samples: &[DsmSample], mut predict: impl FnMut(&DsmSample) -> Vec<f64>) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| predict(s).iter().zip(&s.eps).map(|(p, e)| (e - p).powi(2)).sum::<f64>())
        .sum();
    total / samples.len() as f64
}

impl Mlp {
    pub fn loss(&self, samples: &[DsmSample]) -> f64 {
        dsm_loss_with(samples, |s| self.predict_noise(&s.y, s.level, s.token))
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, samples: &[DsmSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params().len()];
        let mut tape = Tape::default();
        let scale = 1.0 / samples.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Vec::new();
        for s in samples {
            self.forward_tape(&s.y, s.level, s.token, &mut tape);
            d_out.clear();
            for (p, e) in tape.out.iter().zip(&s.eps) {
                loss += (p - e).powi(2);
                d_out.push(2.0 * (p - e) * scale);
            }
            self.backward(s.token, &mut tape, &d_out, &mut grad);
        }
        (loss * scale, grad)
    }
}

/// Loss and gradient on a fresh draw.
pub fn dsm_loss(
    model: &Mlp,
    batch0: &SampleBatch,
    batch1: &SampleBatch,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> (f64, Vec<f64>) {
    let samples = draw_dsm_batch(batch0, batch1, cfg, rng);
    model.loss_and_grad(&samples)
}

/// Held-out loss on one domain with a fixed token and no dropout.
pub fn eval_loss(model: &impl NoisePredictor, data: &SampleBatch, token: Domain, cfg: &TrainConfig, draws: usize, seed: u64) -> f64 {
    let eval_cfg = TrainConfig {
        batch_size: draws,
        cond_dropout: 0.0,
        ..cfg.clone()
    };
    let mut rng = RootSeed(seed).stream("dsm-eval", 0);
    let samples = draw_dsm_batch(data, data, &eval_cfg, &mut rng);
    dsm_loss_with(&samples, |s| model.predict_noise(&s.y, s.level, token))
}

pub struct TrainOutcome {
    pub model: Mlp,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    /// Returns false once a moment estimate has overflowed.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> bool {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
        self.v.iter().all(|v| v.is_finite())
    }
}

/// Train a single network on both domains. Deterministic given `cfg.seed`.
pub fn train(dataset0: &SampleBatch, dataset1: &SampleBatch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset0.check_dim(dataset1)?;
    let root = RootSeed(cfg.seed);
    let arch = MlpArch::new(dataset0.dim(), cfg.arch_hidden.clone());
    let mut model = Mlp::init(arch, &mut root.stream("init", 0))?;
    let mut adam = Adam::new(model.params().len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = root.stream("dsm", step as u64);
        let (loss, grad) = dsm_loss(&model, dataset0, dataset1, cfg, &mut rng);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let moments_ok = adam.step(model.params_mut(), &grad);
        if !moments_ok || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}
