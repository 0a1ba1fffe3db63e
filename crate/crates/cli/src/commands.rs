//! Subcommand implementations. Each writes its outputs under the run
//! directory and returns what it wrote for callers that want the numbers.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use convcnp::diff::{grad_check, Checkpoint, DiffError, ParameterStore};
use convcnp::gp_oracle::gp_oracle_ll;
use convcnp::metrics::mean_stderr;
use convcnp::models::{nll_loss, Model, ModelError};
use convcnp::rng::derive_seed;
use convcnp::synth::{sample_lv_task, Observation, Process, Task, TaskSampling};
use convcnp::training::{evaluate, task_scores, train, TaskSource, STREAM_EVAL, STREAM_INIT};

use crate::audit;
use crate::config::ExperimentConfig;
use crate::output::{
    read_json, read_tasks_jsonl, write_csv, write_file, write_json, write_tasks_jsonl, AuditRow, DumpRow, EvalRow,
    ExtrapolationRow, Manifest, Provenance, RejectionStats, DATA_FORMAT_VERSION,
};

pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_CHECKPOINT: &str = "last.json";
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// A loaded configuration together with its hash and run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

pub fn range_tag(shift: f64) -> String {
    if shift == 0.0 {
        "in_range".into()
    } else {
        format!("shifted_{shift}")
    }
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: Option<&Path>) -> Self {
        let hash = cfg.hash();
        let out = cfg.output_dir(out);
        Self { cfg, hash, out }
    }

    pub fn load(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(config)?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        Ok(Self::new(cfg, out))
    }

    fn prov(&self, command: &str) -> Provenance {
        Provenance::new(command, &self.hash, self.cfg.seed)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    /// Evaluation tasks: the given JSON-lines file, or `eval.n_tasks` tasks
    /// from the evaluation seed stream.
    pub fn eval_tasks(&self, tasks: Option<&Path>) -> Result<(Vec<Task>, String)> {
        match tasks {
            Some(path) => {
                let manifest = path.with_file_name("manifest.json");
                let tag = if manifest.exists() {
                    read_json::<Manifest>(&manifest)?.range_tag
                } else {
                    "external".into()
                };
                Ok((read_tasks_jsonl(path)?, tag))
            }
            None => Ok((
                self.cfg.source().tasks(self.cfg.seed, STREAM_EVAL, self.cfg.eval.n_tasks)?,
                range_tag(0.0),
            )),
        }
    }

    pub fn initial_params(&self, model: &dyn Model) -> Result<ParameterStore> {
        Ok(model.init_params(derive_seed(self.cfg.seed, STREAM_INIT, 0))?)
    }

    /// Parameters from `checkpoint`, defaulting to the run's best checkpoint.
    pub fn load_params(&self, model: &dyn Model, checkpoint: Option<&Path>) -> Result<ParameterStore> {
        let path = checkpoint.map_or_else(|| self.path(BEST_CHECKPOINT), Path::to_path_buf);
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let ckpt: Checkpoint = read_json(&path)?;
        if let Some(name) = ckpt.meta.as_ref().and_then(|m| m.get("model")).and_then(|v| v.as_str()) {
            ensure!(
                name == model.name(),
                "checkpoint {} holds a {name} model, config describes {}",
                path.display(),
                model.name()
            );
        }
        let mut store = self.initial_params(model)?;
        store
            .load_checkpoint(&ckpt)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(store)
    }

    fn params_or_init(&self, model: &dyn Model, checkpoint: Option<&Path>) -> Result<ParameterStore> {
        match checkpoint {
            Some(_) => self.load_params(model, checkpoint),
            None => self.initial_params(model),
        }
    }

    fn write_checkpoint(&self, file: &str, store: &ParameterStore, model: &str, epoch: Option<usize>) -> Result<PathBuf> {
        let mut ckpt = store.to_checkpoint();
        ckpt.meta = Some(json!({
            "model": model,
            "epoch": epoch,
            "config_hash": self.hash,
            "code_version": crate::output::CODE_VERSION,
            "seed": self.cfg.seed,
        }));
        let path = self.path(file);
        write_json(&path, &ckpt)?;
        Ok(path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateReport {
    pub manifest: Manifest,
    pub tasks_path: PathBuf,
}

pub fn generate(run: &Run, count: Option<usize>, shift: f64) -> Result<GenerateReport> {
    let n = count.unwrap_or(run.cfg.eval.n_tasks);
    ensure!(n > 0, "task count must be positive");
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(run.cfg.seed, STREAM_EVAL, i)).collect();
    let (tasks, rejection) = match &run.cfg.process {
        Process::LotkaVolterra { lv } => {
            let mut tasks = Vec::with_capacity(n);
            let mut attempts = 0;
            for &s in &seeds {
                let sample = sample_lv_task(lv, s).ok_or_else(|| anyhow!("no acceptable trajectory for task seed {s}"))?;
                attempts += sample.attempts;
                tasks.push(sample.task);
            }
            let stats = RejectionStats {
                attempts,
                accepted: n,
                rejection_rate: 1.0 - n as f64 / attempts as f64,
            };
            (tasks, Some(stats))
        }
        _ => (run.cfg.source().tasks(run.cfg.seed, STREAM_EVAL, n)?, None),
    };
    let tasks: Vec<Task> = tasks.iter().map(|t| t.translated(shift)).collect();
    let tasks_path = run.path("tasks.jsonl");
    write_tasks_jsonl(&tasks_path, &tasks)?;
    let manifest = Manifest {
        format_version: DATA_FORMAT_VERSION,
        provenance: run.prov("generate-data"),
        process: run.cfg.process.name(),
        range_tag: range_tag(shift),
        shift,
        n_tasks: n,
        task_seeds: seeds,
        rejection,
    };
    write_json(&run.path("manifest.json"), &manifest)?;
    Ok(GenerateReport { manifest, tasks_path })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: convcnp::training::TrainLog,
    pub best: PathBuf,
    pub last: PathBuf,
}

pub fn train_cmd(run: &Run) -> Result<TrainReport> {
    let model = run.cfg.build_model()?;
    let outcome = train(model.as_ref(), &run.cfg.source(), &run.cfg.train())?;
    let name = model.name();
    let best = run.write_checkpoint(BEST_CHECKPOINT, &outcome.best, &name, outcome.log.best_epoch)?;
    let last = run.write_checkpoint(LAST_CHECKPOINT, &outcome.last, &name, outcome.log.epochs.last().map(|e| e.epoch))?;
    let prov = run.prov("train");
    write_file(
        &run.path("train_log.csv"),
        &format!(
            "# command={}\n# config_hash={}\n# code_version={}\n# seed={}\n{}",
            prov.command,
            prov.config_hash,
            prov.code_version,
            prov.seed,
            outcome.log.to_csv()
        ),
    )?;
    write_json(&run.path("train_log.json"), &json!({ "provenance": prov, "log": outcome.log }))?;
    Ok(TrainReport {
        log: outcome.log,
        best,
        last,
    })
}

pub fn evaluate_cmd(run: &Run, checkpoint: Option<&Path>, tasks: Option<&Path>, shift: f64, untrained: bool) -> Result<EvalRow> {
    let model = run.cfg.build_model()?;
    let params = if untrained {
        run.initial_params(model.as_ref())?
    } else {
        run.load_params(model.as_ref(), checkpoint)?
    };
    let (tasks, tag) = run.eval_tasks(tasks)?;
    let tasks: Vec<Task> = tasks.iter().map(|t| t.translated(shift)).collect();
    let tag = if shift == 0.0 { tag } else { format!("{tag}+{shift}") };
    let summary = evaluate(model.as_ref(), &params, &tasks)?;
    let row = EvalRow::new(&model.name(), &run.cfg.process.name(), &summary, &tag);
    let file = if untrained { "evaluate_untrained.csv" } else { "evaluate.csv" };
    write_csv(&run.path(file), &run.prov("evaluate"), std::slice::from_ref(&row))?;
    Ok(row)
}

pub fn oracle_cmd(run: &Run, tasks: Option<&Path>, shift: f64) -> Result<EvalRow> {
    let Process::Gp { kernel } = &run.cfg.process else {
        bail!("the GP oracle needs a GP process, config has {}", run.cfg.process.name());
    };
    let (tasks, tag) = run.eval_tasks(tasks)?;
    let tasks: Vec<Task> = tasks.iter().map(|t| t.translated(shift)).collect();
    let tag = if shift == 0.0 { tag } else { format!("{tag}+{shift}") };
    let summary = gp_oracle_ll(kernel, &tasks)?;
    let row = EvalRow::new("gp_oracle", &run.cfg.process.name(), &summary, &tag);
    write_csv(&run.path("oracle.csv"), &run.prov("oracle"), std::slice::from_ref(&row))?;
    Ok(row)
}

/// Paired comparison of the same tasks in range and translated by `shift`.
pub fn extrapolate_from(model: &dyn Model, params: &ParameterStore, tasks: &[Task], shift: f64) -> Result<ExtrapolationRow> {
    ensure!(!tasks.is_empty(), "no tasks");
    let shifted: Vec<Task> = tasks.iter().map(|t| t.translated(shift)).collect();
    let a = task_scores(model, params, tasks)?;
    let b = if shift == 0.0 { a.clone() } else { task_scores(model, params, &shifted)? };
    let lls_a: Vec<f64> = a.iter().map(|s| s.0).collect();
    let lls_b: Vec<f64> = b.iter().map(|s| s.0).collect();
    let deltas: Vec<f64> = lls_b.iter().zip(&lls_a).map(|(y, x)| y - x).collect();
    let (delta_ll, stderr_delta) = mean_stderr(&deltas);
    Ok(ExtrapolationRow {
        model: model.name(),
        process: tasks[0].meta.process.clone(),
        n_tasks: tasks.len(),
        shift,
        ll_in_range: mean_stderr(&lls_a).0,
        ll_shifted: mean_stderr(&lls_b).0,
        delta_ll,
        stderr_delta,
    })
}

pub fn extrapolate_cmd(run: &Run, checkpoint: Option<&Path>, tasks: Option<&Path>, shift: Option<f64>) -> Result<ExtrapolationRow> {
    let model = run.cfg.build_model()?;
    let params = run.load_params(model.as_ref(), checkpoint)?;
    let (tasks, _) = run.eval_tasks(tasks)?;
    let row = extrapolate_from(model.as_ref(), &params, &tasks, shift.unwrap_or(run.cfg.eval.shift))?;
    write_csv(&run.path("extrapolate.csv"), &run.prov("extrapolate"), std::slice::from_ref(&row))?;
    Ok(row)
}

/// Dense prediction curve for one task plus its context points.
pub fn dump_cmd(run: &Run, checkpoint: Option<&Path>, tasks: Option<&Path>, index: usize) -> Result<Vec<DumpRow>> {
    let model = run.cfg.build_model()?;
    let params = run.load_params(model.as_ref(), checkpoint)?;
    let task = match tasks {
        Some(path) => read_tasks_jsonl(path)?
            .into_iter()
            .nth(index)
            .ok_or_else(|| anyhow!("task index {index} out of range"))?,
        None => run.cfg.source().task(derive_seed(run.cfg.seed, STREAM_EVAL, index as u64))?,
    };
    let sampling = run.cfg.sampling();
    let (lo, hi) = run.cfg.eval.dump_range.unwrap_or(sampling.x_range);
    ensure!(lo < hi, "dump range must be increasing");
    let xs: Vec<f64> = match run.cfg.model.lattice() {
        Some(d) => ((lo * d).ceil() as i64..=(hi * d).floor() as i64).map(|j| j as f64 / d).collect(),
        None => {
            let n = run.cfg.eval.dump_points.max(2);
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let dim_y = task.dim_y();
    let query = Task {
        context: task.context.clone(),
        target: xs.iter().map(|&x| Observation { x, y: vec![0.0; dim_y] }).collect(),
        meta: task.meta.clone(),
    };
    let pred = model.predict(&params, &query)?;
    let mut rows = Vec::new();
    for o in &task.context {
        for (d, &y) in o.y.iter().enumerate() {
            rows.push(DumpRow {
                kind: "context".into(),
                x: o.x,
                dim: d,
                mean: y,
                std: None,
            });
        }
    }
    for d in 0..dim_y {
        for (m, &x) in xs.iter().enumerate() {
            let i = d * xs.len() + m;
            rows.push(DumpRow {
                kind: "prediction".into(),
                x,
                dim: d,
                mean: pred.mean[i],
                std: Some(pred.std[i]),
            });
        }
    }
    write_csv(&run.path("dump.csv"), &run.prov("dump"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub model: String,
    pub step: f64,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub passed: bool,
}

/// A task with 3 context and 2 target points from the evaluation stream.
pub fn tiny_task(run: &Run) -> Result<Task> {
    let mut source: TaskSource = run.cfg.source();
    source.sampling = TaskSampling {
        n_context: (3, 3),
        n_target: (2, 2),
        ..source.sampling
    };
    let mut task = source.task(derive_seed(run.cfg.seed, STREAM_EVAL, 0))?;
    // Generators with their own protocol (LV) ignore the set sizes.
    task.context.truncate(3);
    task.target.truncate(2);
    Ok(task)
}

pub fn model_grad_check(model: &dyn Model, params: &ParameterStore, task: &Task, step: f64) -> Result<GradCheckSummary> {
    let report = grad_check(
        |g, store| {
            let pred = model.forward(g, store, task).map_err(into_diff)?;
            nll_loss(g, &pred, task).map_err(into_diff)
        },
        params,
        step,
    )?;
    Ok(GradCheckSummary {
        model: model.name(),
        step,
        threshold: GRADCHECK_THRESHOLD,
        max_rel_error: report.max_rel_error,
        per_param: report.per_param,
        passed: report.max_rel_error < GRADCHECK_THRESHOLD,
    })
}

fn into_diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => DiffError::InvalidArgument(other.to_string()),
    }
}

pub fn gradcheck_cmd(run: &Run, checkpoint: Option<&Path>) -> Result<GradCheckSummary> {
    let model = run.cfg.build_model()?;
    let params = run.params_or_init(model.as_ref(), checkpoint)?;
    let summary = model_grad_check(model.as_ref(), &params, &tiny_task(run)?, GRADCHECK_STEP)?;
    write_json(
        &run.path("gradcheck.json"),
        &json!({ "provenance": run.prov("gradcheck"), "result": summary }),
    )?;
    ensure!(
        summary.passed,
        "gradient check failed: max relative error {:e} >= {:e}",
        summary.max_rel_error,
        GRADCHECK_THRESHOLD
    );
    Ok(summary)
}

/// Translation shifts checked for exact equivariance at grid density `density`.
pub fn lattice_shifts(density: f64) -> Vec<f64> {
    let mut taus = vec![1.0, 2.0, 4.0];
    taus.extend([1.0, 2.0, 4.0].map(|k| k / density));
    taus
}

pub fn equivariance_audit_cmd(run: &Run, checkpoint: Option<&Path>, tasks: Option<&Path>) -> Result<Vec<AuditRow>> {
    let model = run.cfg.build_model()?;
    let params = run.params_or_init(model.as_ref(), checkpoint)?;
    let (tasks, _) = run.eval_tasks(tasks)?;
    let tasks = &tasks[..tasks.len().min(50)];
    let mut rows = vec![AuditRow {
        check: "permutation".into(),
        parameter: 0.0,
        max_abs_diff: audit::permutation_deviation(model.as_ref(), &params, tasks, run.cfg.seed)?,
    }];
    let density = match run.cfg.model {
        crate::config::ModelConfig::Convcnp { density, .. } | crate::config::ModelConfig::ConvcnpOngrid { density, .. } => Some(density),
        crate::config::ModelConfig::Cnp { .. } => None,
    };
    for tau in lattice_shifts(density.unwrap_or(1.0)) {
        rows.push(AuditRow {
            check: "translation_grid_multiple".into(),
            parameter: tau,
            max_abs_diff: audit::translation_deviation(model.as_ref(), &params, tasks, tau)?,
        });
    }
    if matches!(run.cfg.model, crate::config::ModelConfig::Convcnp { .. }) && tasks.iter().all(|t| t.dim_y() == 1) {
        let sweep = audit::quantization_sweep(
            &audit::SWEEP_DENSITIES,
            &audit::SWEEP_SHIFTS,
            tasks,
            run.cfg.seed,
            audit::SWEEP_LENGTH_SCALE,
            audit::SWEEP_MARGIN,
        )?;
        for point in sweep {
            rows.push(AuditRow {
                check: "translation_arbitrary_by_density".into(),
                parameter: point.density,
                max_abs_diff: point.max_deviation,
            });
            rows.push(AuditRow {
                check: "translation_arbitrary_by_density_relative".into(),
                parameter: point.density,
                max_abs_diff: point.max_deviation / point.output_scale,
            });
        }
    }
    write_csv(&run.path("equivariance.csv"), &run.prov("equivariance-audit"), &rows)?;
    Ok(rows)
}
