//! File-backed commands. Each writes only under `cfg.out`; everything except
//! the `.meta` sidecars is a pure function of the configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lsb_core::denoiser::Mlp;
use lsb_core::io::{read_bytes, read_points, write_bytes, write_points, write_text};
use lsb_core::metrics::{evaluate, EvalReport, RunId};
use lsb_core::SampleBatch;
use rayon::prelude::*;

use crate::config::{Ablation, BackendKind, ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::experiment::{derive_seed, run, train_model, Datasets, Model, RunSpec, DATA_FILES};

/// Metric minimised when picking the guidance weight.
pub const SELECTION_METRIC: &str = "frechet";

fn path(cfg: &ExperimentConfig, file: &str) -> PathBuf {
    cfg.out.join(file)
}

fn require(p: &Path, hint: &'static str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: p.to_path_buf(),
            hint,
        })
    }
}

fn write_meta(cfg: &ExperimentConfig, file: &str, started: (SystemTime, Instant), extra: &[(&str, String)]) -> Result<()> {
    let unix = started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut text = format!(
        "started_unix={unix}\nruntime_ms={}\n",
        started.1.elapsed().as_millis()
    );
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_text(&path(cfg, file), &text)?;
    Ok(())
}

fn now() -> (SystemTime, Instant) {
    (SystemTime::now(), Instant::now())
}

/// Writes the four point files.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Datasets> {
    cfg.validate()?;
    let data = Datasets::generate(cfg, cfg.seed)?;
    for (name, batch) in DATA_FILES.iter().zip(data.batches()) {
        write_points(&path(cfg, name), batch)?;
    }
    log::info!("wrote {} + {} training and {} + {} held-out points to {}", cfg.n, cfg.n, cfg.n_eval, cfg.n_eval, cfg.out.display());
    Ok(data)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Datasets> {
    let mut b = Vec::with_capacity(4);
    for name in DATA_FILES {
        let p = path(cfg, name);
        require(&p, "gen-data")?;
        b.push(read_points(&p)?);
    }
    let mut it = b.into_iter();
    let mut next = || it.next().expect("four files");
    Ok(Datasets {
        source: next(),
        target: next(),
        source_eval: next(),
        target_eval: next(),
    })
}

/// Trains on `source.csv` / `target.csv`; writes `model.ckpt` and
/// `train_loss.csv`.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let outcome = train_model(cfg, &data, cfg.seed)?;
    write_bytes(&path(cfg, "model.ckpt"), &outcome.model.to_bytes())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&path(cfg, "train_loss.csv"), &csv)?;
    Ok(outcome.losses)
}

fn load_model(cfg: &ExperimentConfig, data: &Datasets) -> Result<Model> {
    match cfg.backend {
        BackendKind::Learned => {
            let p = path(cfg, "model.ckpt");
            require(&p, "train")?;
            Ok(Model::Learned(Mlp::from_bytes(&read_bytes(&p)?)?))
        }
        BackendKind::Oracle => {
            let model = Model::oracle(cfg, data)?;
            if let Model::Oracle(eb) = &model {
                write_bytes(&path(cfg, "plan.bin"), &eb.plan().to_bytes())?;
            }
            Ok(model)
        }
        BackendKind::Analytic => Model::analytic(cfg),
    }
}

/// Translates `source_eval.csv` with the configured method and scores it
/// against `target_eval.csv`.
pub fn translate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let started = now();
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let spec = RunSpec {
        method: cfg.method,
        nfe: cfg.bridge.nfe,
        omega: cfg.bridge.omega,
        ablation: cfg.ablation,
        seed: derive_seed(cfg.seed, "bridge"),
    };
    let trace = cfg.save_trajectory && cfg.method == Method::Lsb;
    let out = run(cfg, &model, &spec, &data.source_eval, trace)?;
    write_points(&path(cfg, "translated.csv"), &out.translated)?;
    if let Some(traj) = &out.trajectory {
        write_text(&path(cfg, "trajectory.csv"), &traj.to_csv())?;
    }
    let id = RunId::new(&cfg.method.to_string(), cfg.bridge.nfe, out.omega, cfg.seed, &cfg.ablation.to_string());
    let report = evaluate(id, &data.source_eval, &out.translated, &data.target_eval)?;
    write_text(
        &path(cfg, "report.csv"),
        &format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
    )?;
    write_meta(
        cfg,
        "report.meta",
        started,
        &[
            ("backend", cfg.backend.to_string()),
            ("nfe_budget", cfg.bridge.nfe.to_string()),
            ("euler_steps", out.euler_steps.to_string()),
            ("final_denoise", (cfg.bridge.final_denoise && !cfg.ablation.denoise).to_string()),
        ],
    )?;
    Ok(report)
}

/// One sweep row before it runs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Job {
    method: Method,
    nfe: usize,
    ablation: Ablation,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &method in &cfg.sweep.methods {
        for &nfe in &cfg.sweep.nfe_list {
            if method == Method::Lsb {
                out.extend(cfg.sweep.ablations.iter().map(|&ablation| Job { method, nfe, ablation }));
            } else {
                out.push(Job {
                    method,
                    nfe,
                    ablation: Ablation::NONE,
                });
            }
        }
    }
    out
}

/// Guidance candidate scored on the validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaScore {
    pub seed: u64,
    pub method: Method,
    pub nfe: usize,
    pub omega: f64,
    /// `None` when the validation run failed.
    pub score: Option<f64>,
}

/// Every run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<EvalReport>,
    pub selection: Vec<OmegaScore>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = EvalReport::csv_header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Keys of jobs whose guidance weight is picked on validation data: the full
/// method at each budget, and each baseline. Ablated rows reuse the weight of
/// the full method at the same budget.
fn selection_key(job: &Job) -> Option<(Method, usize)> {
    match job.method {
        Method::Lsb if job.ablation.cfg => None,
        m => Some((m, job.nfe)),
    }
}

type OmegaChoice = HashMap<(Method, usize), f64>;

fn select_omegas(cfg: &ExperimentConfig, model: &Model, seed: u64, jobs: &[Job]) -> Result<(OmegaChoice, Vec<OmegaScore>)> {
    let grid = &cfg.sweep.omega_grid;
    let mut keys: Vec<(Method, usize)> = jobs.iter().filter_map(selection_key).collect();
    keys.sort();
    keys.dedup();
    let needs_choice = grid.len() > 1;
    if !needs_choice {
        let w = grid.first().copied().unwrap_or(cfg.bridge.omega);
        return Ok((keys.into_iter().map(|k| (k, w)).collect(), Vec::new()));
    }
    let (vs, vt) = Datasets::validation(cfg, seed)?;
    let bridge_seed = derive_seed(seed, "bridge-val");
    let candidates: Vec<((Method, usize), f64)> =
        keys.iter().flat_map(|&k| grid.iter().map(move |&w| (k, w))).collect();
    let scores: Vec<OmegaScore> = candidates
        .par_iter()
        .map(|&((method, nfe), omega)| {
            let spec = RunSpec {
                method,
                nfe,
                omega,
                ablation: Ablation::NONE,
                seed: bridge_seed,
            };
            let score = run(cfg, model, &spec, &vs, false)
                .ok()
                .and_then(|o| evaluate(RunId::new("val", nfe, omega, seed, "none"), &vs, &o.translated, &vt).ok())
                .and_then(|r| r.metric(SELECTION_METRIC))
                .filter(|v| v.is_finite());
            OmegaScore {
                seed,
                method,
                nfe,
                omega,
                score,
            }
        })
        .collect();
    let mut chosen = HashMap::new();
    for k in keys {
        let best = scores
            .iter()
            .filter(|s| (s.method, s.nfe) == k)
            .filter_map(|s| s.score.map(|v| (v, s.omega)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map_or(grid[0], |(_, w)| w);
        chosen.insert(k, best);
    }
    Ok((chosen, scores))
}

fn sweep_seed(cfg: &ExperimentConfig, seed: u64, result: &mut SweepResult) {
    let jobs = jobs(cfg);
    let fail_all = |result: &mut SweepResult, err: &CliError| {
        let e = lsb_core::Error::InvalidParameter(err.to_string());
        for j in &jobs {
            let id = RunId::new(&j.method.to_string(), j.nfe, f64::NAN, seed, &j.ablation.to_string());
            result.rows.push(EvalReport::failed(id, &e));
        }
    };
    let prepared = Datasets::generate(cfg, seed).and_then(|data| {
        let model = match cfg.backend {
            BackendKind::Learned => Model::Learned(train_model(cfg, &data, seed)?.model),
            BackendKind::Oracle => Model::oracle(cfg, &data)?,
            BackendKind::Analytic => Model::analytic(cfg)?,
        };
        let (omegas, scores) = select_omegas(cfg, &model, seed, &jobs)?;
        Ok((data, model, omegas, scores))
    });
    let (data, model, omegas, scores) = match prepared {
        Ok(p) => p,
        Err(e) => {
            log::warn!("seed {seed}: {e}");
            return fail_all(result, &e);
        }
    };
    result.selection.extend(scores);
    let bridge_seed = derive_seed(seed, "bridge");
    let rows: Vec<EvalReport> = jobs
        .par_iter()
        .map(|job| {
            let omega = omegas
                .get(&(job.method, job.nfe))
                .copied()
                .unwrap_or(cfg.bridge.omega);
            let spec = RunSpec {
                method: job.method,
                nfe: job.nfe,
                omega,
                ablation: job.ablation,
                seed: bridge_seed,
            };
            let id = |w: f64| RunId::new(&job.method.to_string(), job.nfe, w, seed, &job.ablation.to_string());
            let w = spec.effective_omega(model.kind());
            match run(cfg, &model, &spec, &data.source_eval, false) {
                Ok(out) => evaluate(id(w), &data.source_eval, &out.translated, &data.target_eval)
                    .unwrap_or_else(|e| EvalReport::failed(id(w), &e)),
                Err(CliError::Core(e)) => EvalReport::failed(id(w), &e),
                Err(e) => EvalReport::failed(id(w), &lsb_core::Error::InvalidParameter(e.to_string())),
            }
        })
        .collect();
    for r in &rows {
        if let Some(e) = r.status.strip_prefix("error: ") {
            log::warn!("{} nfe={} seed={} ablation={}: {e}", r.run.method, r.run.nfe, seed, r.run.ablation);
        }
    }
    result.rows.extend(rows);
}

/// Runs the method x budget x ablation grid for every sweep seed and writes
/// `sweep.csv`. Failed runs become rows with status `error: ...`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let started = now();
    cfg.validate()?;
    if cfg.sweep.methods.is_empty() || cfg.sweep.nfe_list.is_empty() || cfg.sweep.seeds.is_empty() {
        return Err(CliError::usage("sweep needs at least one method, budget and seed"));
    }
    if cfg.sweep.ablations.is_empty() && cfg.sweep.methods.contains(&Method::Lsb) {
        return Err(CliError::usage("sweep.ablations is empty; use `none` for the full method"));
    }
    let mut result = SweepResult {
        rows: Vec::new(),
        selection: Vec::new(),
    };
    for &seed in &cfg.sweep.seeds {
        log::info!("sweep seed {seed}");
        sweep_seed(cfg, seed, &mut result);
    }
    write_text(&path(cfg, "sweep.csv"), &result.to_csv())?;
    if !result.selection.is_empty() {
        let mut csv = format!("seed,method,nfe,omega,{SELECTION_METRIC}\n");
        for s in &result.selection {
            let v = s.score.map_or("NaN".to_string(), |v| v.to_string());
            csv.push_str(&format!("{},{},{},{},{v}\n", s.seed, s.method, s.nfe, s.omega));
        }
        write_text(&path(cfg, "omega_selection.csv"), &csv)?;
    }
    write_meta(
        cfg,
        "sweep.meta",
        started,
        &[("rows", result.rows.len().to_string()), ("failures", result.failures().to_string())],
    )?;
    Ok(result)
}

/// Rows of a sweep result matching `method`, `nfe` and `ablation`, in seed order.
pub fn select_rows<'a>(rows: &'a [EvalReport], method: &str, nfe: usize, ablation: &str) -> Vec<&'a EvalReport> {
    rows.iter()
        .filter(|r| r.run.method == method && r.run.nfe == nfe && r.run.ablation == ablation)
        .collect()
}

/// Reads a point file from the output directory.
pub fn read_output(cfg: &ExperimentConfig, file: &str) -> Result<SampleBatch> {
    Ok(read_points(&path(cfg, file))?)
}
