//! Data, model and single-run plumbing shared by the commands.

use lsb_core::bridge::{self, Trajectory};
use lsb_core::coupling::sinkhorn;
use lsb_core::baselines::{dual_bridge_translate, sdedit_translate};
use lsb_core::denoiser::{self, Mlp, NoisePredictor, TrainConfig, TrainOutcome};
use lsb_core::predictors::{EmpiricalBayes, GaussianAnalytic, GaussianNoiseOracle, Predictors, VpBackend, VpOptions};
use lsb_core::rng::RootSeed;
use lsb_core::schedule::BridgeConfig;
use lsb_core::toy::{self, DatasetSpec};
use lsb_core::SampleBatch;

use crate::config::{Ablation, BackendKind, ExperimentConfig, Method};
use crate::error::{CliError, Result};

/// Seed for one purpose, derived from the root seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    RootSeed(seed).child(label, 0).0
}

/// Training and held-out draws of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub source: SampleBatch,
    pub target: SampleBatch,
    pub source_eval: SampleBatch,
    pub target_eval: SampleBatch,
}

pub const DATA_FILES: [&str; 4] = ["source.csv", "target.csv", "source_eval.csv", "target_eval.csv"];

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (s, t) = (cfg.source_spec()?, cfg.target_spec()?);
        Ok(Datasets {
            source: toy::sample(&s, cfg.n, derive_seed(seed, "source"))?,
            target: toy::sample(&t, cfg.n, derive_seed(seed, "target"))?,
            source_eval: toy::sample(&s, cfg.n_eval, derive_seed(seed, "source-eval"))?,
            target_eval: toy::sample(&t, cfg.n_eval, derive_seed(seed, "target-eval"))?,
        })
    }

    /// A third pair of draws, used only to pick hyperparameters.
    pub fn validation(cfg: &ExperimentConfig, seed: u64) -> Result<(SampleBatch, SampleBatch)> {
        Ok((
            toy::sample(&cfg.source_spec()?, cfg.n_eval, derive_seed(seed, "source-val"))?,
            toy::sample(&cfg.target_spec()?, cfg.n_eval, derive_seed(seed, "target-val"))?,
        ))
    }

    pub fn batches(&self) -> [&SampleBatch; 4] {
        [&self.source, &self.target, &self.source_eval, &self.target_eval]
    }
}

pub fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, "train"),
        ..cfg.train.clone()
    }
}

pub fn train_model(cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<TrainOutcome> {
    Ok(denoiser::train(&data.source, &data.target, &train_config(cfg, seed))?)
}

/// Whatever a backend needs at translation time.
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Learned(Mlp),
    Oracle(EmpiricalBayes),
    Analytic {
        bridge: GaussianAnalytic,
        noise: GaussianNoiseOracle,
    },
}

impl Model {
    pub fn oracle(cfg: &ExperimentConfig, data: &Datasets) -> Result<Self> {
        let plan = sinkhorn(&data.source, &data.target, &cfg.sinkhorn())?;
        Ok(Model::Oracle(EmpiricalBayes::new(plan, cfg.bridge.sb.tau)?))
    }

    pub fn analytic(cfg: &ExperimentConfig) -> Result<Self> {
        let mixture = |spec: DatasetSpec, name: &str| {
            spec.as_mixture()
                .ok_or_else(|| CliError::usage(format!("the analytic backend needs a Gaussian-mixture {name} dataset")))
        };
        let p0 = mixture(cfg.source_spec()?, "source")?;
        let p1 = mixture(cfg.target_spec()?, "target")?;
        Ok(Model::Analytic {
            bridge: GaussianAnalytic::new(p0.clone(), p1.clone(), cfg.bridge.sb.tau)?,
            noise: GaussianNoiseOracle::with_pooled_null(p0, p1)?,
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Model::Learned(_) => BackendKind::Learned,
            Model::Oracle(_) => BackendKind::Oracle,
            Model::Analytic { .. } => BackendKind::Analytic,
        }
    }

    fn noise(&self) -> Result<&dyn NoisePredictor> {
        match self {
            Model::Learned(m) => Ok(m),
            Model::Analytic { noise, .. } => Ok(noise),
            Model::Oracle(_) => Err(CliError::usage("baselines need the learned or analytic backend")),
        }
    }
}

/// One translation job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub nfe: usize,
    pub omega: f64,
    pub ablation: Ablation,
    /// Seed of the run's own noise.
    pub seed: u64,
}

pub struct RunOutput {
    pub translated: SampleBatch,
    pub trajectory: Option<Trajectory>,
    /// Euler steps actually taken; 0 for the baselines.
    pub euler_steps: usize,
    /// Guidance weight in effect, 1 when guidance is off or not applicable.
    pub omega: f64,
}

impl RunSpec {
    /// Guidance weight the run actually uses on `kind`.
    pub fn effective_omega(&self, kind: BackendKind) -> f64 {
        match (self.method, kind) {
            (Method::Lsb, BackendKind::Learned) if !self.ablation.cfg => self.omega,
            (Method::Lsb, _) => 1.0,
            _ => self.omega,
        }
    }
}

fn solve(x0: &SampleBatch, cfg: &BridgeConfig, preds: &impl Predictors, trace: bool) -> Result<Trajectory> {
    Ok(if trace {
        bridge::solve_traced(x0, cfg, preds)?
    } else {
        bridge::solve(x0, cfg, preds)?
    })
}

/// Translates `x0`; `trace` keeps the LSB state history.
pub fn run(cfg: &ExperimentConfig, model: &Model, spec: &RunSpec, x0: &SampleBatch, trace: bool) -> Result<RunOutput> {
    let omega = spec.effective_omega(model.kind());
    let abl = spec.ablation;
    if spec.method != Method::Lsb && !abl.is_none() {
        return Err(CliError::usage(format!("ablations apply to lsb only, not {}", spec.method)));
    }
    let sb = cfg.sb();
    match spec.method {
        Method::Lsb => {
            let bcfg = BridgeConfig {
                sb,
                omega,
                nfe: spec.nfe,
                final_denoise: cfg.bridge.final_denoise && !abl.denoise,
                seed: spec.seed,
            };
            let traj = match model {
                Model::Learned(m) => {
                    let opts = VpOptions {
                        omega,
                        snr_matching: !abl.snr,
                        time_dependent_eps: !abl.time_eps,
                    };
                    solve(x0, &bcfg, &VpBackend::new(m, sb.tau, opts)?, trace)?
                }
                Model::Oracle(_) | Model::Analytic { .. } if abl.snr || abl.time_eps || abl.cfg => {
                    return Err(CliError::usage(format!(
                        "ablation {abl} needs the learned backend; only denoise applies to {}",
                        model.kind()
                    )))
                }
                Model::Oracle(eb) => solve(x0, &bcfg, eb, trace)?,
                Model::Analytic { bridge, .. } => solve(x0, &bcfg, bridge, trace)?,
            };
            Ok(RunOutput {
                translated: traj.final_batch.clone(),
                euler_steps: traj.times.len() - 1,
                trajectory: trace.then_some(traj),
                omega,
            })
        }
        Method::Sdedit | Method::DualBridge => {
            let noise = model.noise()?;
            let translated = if spec.method == Method::Sdedit {
                sdedit_translate(x0, spec.nfe, &sb, &noise, omega, spec.seed)?
            } else {
                dual_bridge_translate(x0, spec.nfe, &noise, omega)?
            };
            Ok(RunOutput {
                translated,
                trajectory: None,
                euler_steps: 0,
                omega,
            })
        }
    }
}
