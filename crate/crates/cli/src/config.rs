//! Flat `key=value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key has a default (see [`KEYS`]). Values are resolved in
//! order: defaults, config file, environment (`LSB_` followed by the key in
//! upper case with `.` replaced by `_`, e.g. `LSB_SB_SQRT_TAU`), then
//! explicit overrides such as command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lsb_core::coupling::SinkhornConfig;
use lsb_core::denoiser::TrainConfig;
use lsb_core::schedule::{BridgeConfig, SbParams};
use lsb_core::toy::DatasetSpec;

use crate::error::{CliError, Result};

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.source", "gmm(0.3;-4,-1;-4,1)", "source dataset id"),
    ("data.target", "gmm(0.3;4,-1;4,1)", "target dataset id"),
    ("data.n", "2048", "training points per domain"),
    ("data.n_eval", "1024", "held-out points per domain"),
    ("sb.sqrt_tau", "2.5", "bridge noise scale; sets sb.tau to its square"),
    ("sb.tau", "6.25", "bridge variance"),
    ("sb.t0", "0.2", "initial bridge time"),
    ("sb.t_clamp", "0.001", "velocity time margin"),
    ("bridge.nfe", "8", "predictor evaluations per sample"),
    ("bridge.omega", "11", "guidance weight"),
    ("bridge.final_denoise", "true", "spend the last evaluation on a denoising step"),
    ("backend", "learned", "learned | oracle | analytic"),
    ("method", "lsb", "lsb | sdedit | dual-bridge"),
    ("ablate", "none", "disabled lsb components: snr, time-eps, cfg, denoise, joined by +"),
    ("save_trajectory", "false", "write trajectory.csv on translate"),
    ("sinkhorn.reg", "auto", "entropic regularisation; auto is 2 tau"),
    ("sinkhorn.tol", "1e-9", "row-marginal L1 tolerance"),
    ("sinkhorn.max_iter", "100000", "iteration cap"),
    ("train.steps", "4000", "optimizer steps"),
    ("train.batch_size", "256", "draws per step"),
    ("train.lr", "0.001", "learning rate"),
    ("train.cond_dropout", "0.2", "probability of the null token"),
    ("train.hidden", "64,64", "hidden layer widths"),
    ("sweep.nfe_list", "2,4,8,16,32", "budgets"),
    ("sweep.methods", "lsb,sdedit,dual-bridge", "methods"),
    ("sweep.seeds", "0", "seeds; each gets fresh data and a fresh model"),
    ("sweep.omega_grid", "", "guidance candidates chosen on a validation split; empty uses bridge.omega"),
    ("sweep.ablations", "none", "lsb ablation rows, comma separated"),
    ("check.sigma_fault", "0", "relative sigma perturbation injected into the SNR check"),
    ("seed", "0", "root seed"),
    ("out", "out", "output directory"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    /// Domain-conditioned noise network trained by `train`.
    Learned,
    /// Empirical-Bayes posterior over an entropic plan between the data files.
    Oracle,
    /// Closed-form posteriors; both datasets must be Gaussian mixtures.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Lsb,
    Sdedit,
    DualBridge,
}

/// Components switched off in an LSB run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub snr: bool,
    pub time_eps: bool,
    pub cfg: bool,
    pub denoise: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        snr: false,
        time_eps: false,
        cfg: false,
        denoise: false,
    };

    pub const ALL: Ablation = Ablation {
        snr: true,
        time_eps: true,
        cfg: true,
        denoise: true,
    };

    pub fn is_none(self) -> bool {
        self == Ablation::NONE
    }
}

/// Sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub nfe_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub omega_grid: Vec<f64>,
    pub ablations: Vec<Ablation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: String,
    pub target: String,
    pub n: usize,
    pub n_eval: usize,
    pub bridge: BridgeConfig,
    pub backend: BackendKind,
    pub method: Method,
    pub ablation: Ablation,
    pub save_trajectory: bool,
    /// `None` means `2 tau`.
    pub sinkhorn_reg: Option<f64>,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub sigma_fault: f64,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| CliError::config(format!("{key} = `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(BackendKind::Learned),
            "oracle" => Ok(BackendKind::Oracle),
            "analytic" => Ok(BackendKind::Analytic),
            _ => Err(format!("unknown backend `{s}`")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Learned => "learned",
            BackendKind::Oracle => "oracle",
            BackendKind::Analytic => "analytic",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lsb" => Ok(Method::Lsb),
            "sdedit" => Ok(Method::Sdedit),
            "dual-bridge" => Ok(Method::DualBridge),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lsb => "lsb",
            Method::Sdedit => "sdedit",
            Method::DualBridge => "dual-bridge",
        })
    }
}

/// Accepts `none`, `all`, or flags joined by `+` (or `,` on the command line).
impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "" | "none" => return Ok(Ablation::NONE),
            "all" => return Ok(Ablation::ALL),
            _ => {}
        }
        let mut a = Ablation::NONE;
        for flag in s.split(['+', ',']).map(str::trim) {
            match flag {
                "snr" => a.snr = true,
                "time-eps" => a.time_eps = true,
                "cfg" => a.cfg = true,
                "denoise" => a.denoise = true,
                _ => return Err(format!("unknown ablation flag `{flag}`")),
            }
        }
        Ok(a)
    }
}

/// Canonical `+`-joined form, `none` when nothing is disabled.
impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags: Vec<&str> = [
            (self.snr, "snr"),
            (self.time_eps, "time-eps"),
            (self.cfg, "cfg"),
            (self.denoise, "denoise"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if flags.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&flags.join("+"))
        }
    }
}

fn parse_ablations(v: &str) -> Result<Vec<Ablation>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::config(format!("sweep.ablations: {e}"))))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::config(format!("{key} = `{v}`: expected a boolean"))),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            source: String::new(),
            target: String::new(),
            n: 0,
            n_eval: 0,
            bridge: BridgeConfig::default(),
            backend: BackendKind::Learned,
            method: Method::Lsb,
            ablation: Ablation::NONE,
            save_trajectory: false,
            sinkhorn_reg: None,
            sinkhorn_tol: 0.0,
            sinkhorn_max_iter: 0,
            train: TrainConfig::default(),
            sweep: SweepConfig {
                nfe_list: vec![],
                methods: vec![],
                seeds: vec![],
                omega_grid: vec![],
                ablations: vec![],
            },
            sigma_fault: 0.0,
            seed: 0,
            out: PathBuf::new(),
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("default table is valid");
        }
        cfg
    }
}

impl ExperimentConfig {
    /// Defaults, then `path` if given, then the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = path {
            cfg.apply_text(&lsb_core::io::read_text(p)?)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn env_name(key: &str) -> String {
        format!("LSB_{}", key.to_uppercase().replace('.', "_"))
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for (k, _, _) in KEYS {
            if let Some(v) = lookup(&Self::env_name(k)) {
                self.set(k, &v)?;
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.source" => self.source = v.trim().to_string(),
            "data.target" => self.target = v.trim().to_string(),
            "data.n" => self.n = parse(key, v)?,
            "data.n_eval" => self.n_eval = parse(key, v)?,
            "sb.sqrt_tau" => {
                let s: f64 = parse(key, v)?;
                self.bridge.sb.tau = s * s;
            }
            "sb.tau" => self.bridge.sb.tau = parse(key, v)?,
            "sb.t0" => self.bridge.sb.t0 = parse(key, v)?,
            "sb.t_clamp" => self.bridge.sb.t_clamp = parse(key, v)?,
            "bridge.nfe" => self.bridge.nfe = parse(key, v)?,
            "bridge.omega" => self.bridge.omega = parse(key, v)?,
            "bridge.final_denoise" => self.bridge.final_denoise = parse_bool(key, v)?,
            "backend" => self.backend = parse(key, v)?,
            "method" => self.method = parse(key, v)?,
            "ablate" => self.ablation = parse(key, v)?,
            "save_trajectory" => self.save_trajectory = parse_bool(key, v)?,
            "sinkhorn.reg" => {
                self.sinkhorn_reg = match v.trim() {
                    "auto" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "sinkhorn.tol" => self.sinkhorn_tol = parse(key, v)?,
            "sinkhorn.max_iter" => self.sinkhorn_max_iter = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.cond_dropout" => self.train.cond_dropout = parse(key, v)?,
            "train.hidden" => self.train.arch_hidden = parse_list(key, v)?,
            "sweep.nfe_list" => self.sweep.nfe_list = parse_list(key, v)?,
            "sweep.methods" => self.sweep.methods = parse_list(key, v)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(key, v)?,
            "sweep.omega_grid" => self.sweep.omega_grid = parse_list(key, v)?,
            "sweep.ablations" => self.sweep.ablations = parse_ablations(v)?,
            "check.sigma_fault" => self.sigma_fault = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v.trim()),
            _ => return Err(CliError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Resolved configuration as config-file text. `sb.sqrt_tau` is omitted
    /// since `sb.tau` carries the same value.
    pub fn to_text(&self) -> String {
        let reg = self.sinkhorn_reg.map_or("auto".to_string(), |r| r.to_string());
        let lines = [
            ("data.source", self.source.clone()),
            ("data.target", self.target.clone()),
            ("data.n", self.n.to_string()),
            ("data.n_eval", self.n_eval.to_string()),
            ("sb.tau", self.bridge.sb.tau.to_string()),
            ("sb.t0", self.bridge.sb.t0.to_string()),
            ("sb.t_clamp", self.bridge.sb.t_clamp.to_string()),
            ("bridge.nfe", self.bridge.nfe.to_string()),
            ("bridge.omega", self.bridge.omega.to_string()),
            ("bridge.final_denoise", self.bridge.final_denoise.to_string()),
            ("backend", self.backend.to_string()),
            ("method", self.method.to_string()),
            ("ablate", self.ablation.to_string()),
            ("save_trajectory", self.save_trajectory.to_string()),
            ("sinkhorn.reg", reg),
            ("sinkhorn.tol", self.sinkhorn_tol.to_string()),
            ("sinkhorn.max_iter", self.sinkhorn_max_iter.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.cond_dropout", self.train.cond_dropout.to_string()),
            ("train.hidden", join(&self.train.arch_hidden)),
            ("sweep.nfe_list", join(&self.sweep.nfe_list)),
            ("sweep.methods", join(&self.sweep.methods)),
            ("sweep.seeds", join(&self.sweep.seeds)),
            ("sweep.omega_grid", join(&self.sweep.omega_grid)),
            ("sweep.ablations", join(&self.sweep.ablations)),
            ("check.sigma_fault", self.sigma_fault.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn source_spec(&self) -> Result<DatasetSpec> {
        Ok(self.source.parse()?)
    }

    pub fn target_spec(&self) -> Result<DatasetSpec> {
        Ok(self.target.parse()?)
    }

    pub fn sb(&self) -> SbParams {
        self.bridge.sb
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            reg: self.sinkhorn_reg.unwrap_or(2.0 * self.bridge.sb.tau),
            tol: self.sinkhorn_tol,
            max_iter: self.sinkhorn_max_iter,
            ..Default::default()
        }
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let (s, t) = (self.source_spec()?, self.target_spec()?);
        if s.dim() != t.dim() {
            return Err(CliError::config(format!(
                "source has dimension {} but target has {}",
                s.dim(),
                t.dim()
            )));
        }
        if self.n == 0 || self.n_eval == 0 {
            return Err(CliError::usage("data.n and data.n_eval must be at least 1"));
        }
        self.bridge.validate()?;
        self.train.validate()?;
        if self.train.arch_hidden.is_empty() {
            return Err(CliError::config("train.hidden needs at least one layer"));
        }
        if self.sinkhorn().reg.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(CliError::config("sinkhorn.reg must be positive"));
        }
        if !self.sigma_fault.is_finite() {
            return Err(CliError::config("check.sigma_fault must be finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.bridge.nfe, 8);
        assert_eq!(c.bridge.sb.t0, 0.2);
        assert_eq!(c.bridge.sb.tau, 6.25);
        assert_eq!(c.bridge.omega, 11.0);
        assert_eq!(c.sweep.nfe_list, vec![2, 4, 8, 16, 32]);
        assert_eq!(c.sweep.methods, vec![Method::Lsb, Method::Sdedit, Method::DualBridge]);
        assert_eq!(c.sweep.ablations, vec![Ablation::NONE]);
        assert!(c.sweep.omega_grid.is_empty());
        assert_eq!(c.sinkhorn().reg, 12.5);
        c.validate().unwrap();
    }

    #[test]
    fn text_overrides_and_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\n\nsb.sqrt_tau = 1\nbridge.nfe=16\nablate=snr+cfg\nsinkhorn.reg=0.5\n")
            .unwrap();
        assert_eq!(c.bridge.sb.tau, 1.0);
        assert_eq!(c.bridge.nfe, 16);
        assert!(c.ablation.snr && c.ablation.cfg && !c.ablation.denoise);
        let mut d = ExperimentConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply_text("sb.taus=1").is_err());
        assert!(c.apply_text("bridge.nfe=eight").is_err());
        assert!(c.apply_text("just a line").is_err());
        assert!(c.set("ablate", "snr+everything").is_err());
        assert!(c.set("backend", "magic").is_err());
    }

    #[test]
    fn environment_overrides() {
        assert_eq!(ExperimentConfig::env_name("sb.sqrt_tau"), "LSB_SB_SQRT_TAU");
        let mut c = ExperimentConfig::default();
        c.apply_env(|k| (k == "LSB_BRIDGE_OMEGA").then(|| "2.5".to_string())).unwrap();
        assert_eq!(c.bridge.omega, 2.5);
    }

    #[test]
    fn ablation_names() {
        for s in ["none", "snr", "time-eps", "cfg", "denoise", "snr+time-eps+cfg+denoise"] {
            assert_eq!(s.parse::<Ablation>().unwrap().to_string(), s);
        }
        assert_eq!("all".parse::<Ablation>().unwrap(), Ablation::ALL);
        assert_eq!("cfg,snr".parse::<Ablation>().unwrap().to_string(), "snr+cfg");
    }

    #[test]
    fn zero_points_is_a_usage_error() {
        let c = ExperimentConfig {
            n: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }
}
