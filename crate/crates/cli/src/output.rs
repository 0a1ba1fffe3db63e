//! Output files. Every CSV starts with `# key=value` provenance lines
//! followed by a header row.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use convcnp::metrics::EvalSummary;
use convcnp::synth::Task;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DATA_FORMAT_VERSION: u32 = 1;

/// Stamped into every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.into(),
            seed,
        }
    }

    fn comment_lines(&self) -> String {
        format!(
            "# command={}\n# config_hash={}\n# code_version={}\n# seed={}\n",
            self.command, self.config_hash, self.code_version, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub process: String,
    pub n_tasks: usize,
    pub mean_ll: f64,
    pub stderr_ll: f64,
    pub mse: f64,
    pub stderr_mse: f64,
    pub range_tag: String,
}

impl EvalRow {
    pub fn new(model: &str, process: &str, summary: &EvalSummary, range_tag: &str) -> Self {
        Self {
            model: model.into(),
            process: process.into(),
            n_tasks: summary.n_tasks,
            mean_ll: summary.mean_ll,
            stderr_ll: summary.stderr_ll,
            mse: summary.mse,
            stderr_mse: summary.stderr_mse,
            range_tag: range_tag.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub model: String,
    pub process: String,
    pub n_tasks: usize,
    pub shift: f64,
    pub ll_in_range: f64,
    pub ll_shifted: f64,
    pub delta_ll: f64,
    /// Standard error of the per-task paired differences.
    pub stderr_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    /// `context` or `prediction`.
    pub kind: String,
    pub x: f64,
    pub dim: usize,
    /// Observed value for context rows, predictive mean otherwise.
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub check: String,
    pub parameter: f64,
    pub max_abs_diff: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner()?)?;
    write_file(path, &format!("{}{body}", prov.comment_lines()))
}

/// Rows plus the `# key=value` metadata of a CSV written by [`write_csv`].
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<(BTreeMap<String, String>, Vec<T>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok((meta, rows))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Statistics of the Lotka-Volterra rejection sampler over a generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub attempts: usize,
    pub accepted: usize,
    pub rejection_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub process: String,
    pub range_tag: String,
    pub shift: f64,
    pub n_tasks: usize,
    pub task_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<RejectionStats>,
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[Task]) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<Task>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        task.validate()
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        tasks.push(task);
    }
    Ok(tasks)
}
