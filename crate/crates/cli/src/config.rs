//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use convcnp::diff::Padding;
use convcnp::models::{Cnp, CnnVariant, ConvCnp, Model, OnGridConvCnp};
use convcnp::synth::{Process, TaskSampling};
use convcnp::training::{TaskSource, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

fn yes() -> bool {
    true
}

fn default_density() -> f64 {
    32.0
}

fn one() -> usize {
    1
}

fn default_hidden() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Off-grid ConvCNP.
    Convcnp {
        #[serde(default)]
        variant: CnnVariant,
        #[serde(default = "default_density")]
        density: f64,
        #[serde(default = "yes")]
        sigma_floor: bool,
        #[serde(default)]
        depthwise_separable: bool,
        #[serde(default = "one")]
        multiplicity: usize,
        /// Defaults to the CNN receptive-field half width.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        margin: Option<f64>,
        /// Replaces the backbone with a plain chain of these widths.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden_widths: Option<Vec<usize>>,
    },
    Cnp {
        #[serde(default = "yes")]
        sigma_floor: bool,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    /// On-grid ConvCNP over the lattice `j / density`.
    ConvcnpOngrid {
        #[serde(default = "default_density")]
        density: f64,
        #[serde(default = "yes")]
        sigma_floor: bool,
        #[serde(default)]
        padding: Padding,
    },
}

impl ModelConfig {
    pub fn build(&self, dim_y: usize) -> Result<Box<dyn Model>> {
        Ok(match *self {
            ModelConfig::Convcnp {
                variant,
                density,
                sigma_floor,
                depthwise_separable,
                multiplicity,
                margin,
                ref hidden_widths,
            } => {
                if !(density.is_finite() && density > 0.0) {
                    bail!("model.density must be positive");
                }
                if multiplicity == 0 {
                    bail!("model.multiplicity must be at least 1");
                }
                let mut m = ConvCnp::new(variant, density, dim_y)
                    .with_sigma_floor(sigma_floor)
                    .with_depthwise_separable(depthwise_separable)
                    .with_multiplicity(multiplicity);
                if let Some(widths) = hidden_widths {
                    if widths.contains(&0) {
                        bail!("model.hidden_widths must be positive");
                    }
                    m = m.with_hidden_widths(widths);
                }
                if let Some(margin) = margin {
                    if !(margin.is_finite() && margin >= 0.0) {
                        bail!("model.margin must be non-negative");
                    }
                    m = m.with_margin(margin);
                }
                Box::new(m)
            }
            ModelConfig::Cnp { sigma_floor, hidden } => {
                if hidden == 0 {
                    bail!("model.hidden must be positive");
                }
                let mut m = Cnp::new(dim_y);
                m.sigma_floor = sigma_floor;
                m.hidden = hidden;
                Box::new(m)
            }
            ModelConfig::ConvcnpOngrid {
                density,
                sigma_floor,
                padding,
            } => {
                if !(density.is_finite() && density > 0.0) {
                    bail!("model.density must be positive");
                }
                Box::new(
                    OnGridConvCnp::new(dim_y, 1)
                        .with_density(density)
                        .with_sigma_floor(sigma_floor)
                        .with_padding(padding),
                )
            }
        })
    }

    /// Lattice the task inputs must lie on, if any.
    pub fn lattice(&self) -> Option<f64> {
        match self {
            ModelConfig::ConvcnpOngrid { density, .. } => Some(*density),
            _ => None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Convcnp {
            variant: CnnVariant::Small,
            density: default_density(),
            sigma_floor: true,
            depthwise_separable: false,
            multiplicity: 1,
            margin: None,
            hidden_widths: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_tasks: usize,
    /// Translation applied by `extrapolate`.
    pub shift: f64,
    /// Points in the dense curve written by `dump`.
    pub dump_points: usize,
    /// Range of the dense curve; the sampling range when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_range: Option<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 1000,
            shift: 4.0,
            dump_points: 200,
            dump_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub process: Process,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<TaskSampling>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        if let Process::Gp { kernel } = &self.process {
            kernel.validate().map_err(anyhow::Error::msg)?;
        }
        self.sampling().validate()?;
        self.train().validate()?;
        if self.eval.n_tasks == 0 {
            bail!("eval.n_tasks must be positive");
        }
        if !self.eval.shift.is_finite() {
            bail!("eval.shift must be finite");
        }
        self.model.build(self.process.dim_y())?;
        Ok(())
    }

    /// Task sampling protocol, with the model's lattice applied.
    pub fn sampling(&self) -> TaskSampling {
        let s = self.sampling.unwrap_or_else(|| self.process.default_sampling());
        match (s.lattice, self.model.lattice()) {
            (None, Some(d)) => s.with_lattice(d),
            _ => s,
        }
    }

    pub fn source(&self) -> TaskSource {
        TaskSource {
            process: self.process.clone(),
            sampling: self.sampling(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn Model>> {
        self.model.build(self.process.dim_y())
    }

    /// SHA-256 of the canonical JSON form of the parsed configuration, so
    /// formatting and comments in the file do not change it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| {
                let name = if self.name.is_empty() { "experiment" } else { &self.name };
                PathBuf::from("runs").join(name)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[process]
kind = "gp"
kernel = { kind = "eq", length_scale = 0.25, amplitude = 1.0 }
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train().epochs, 200);
        assert_eq!(cfg.eval.n_tasks, 1000);
        assert_eq!(cfg.sampling().x_range, (-2.0, 2.0));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}\n[train]\nepochz = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = MINIMAL.replace("version = 1", "version = 1\nbogus = true");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        assert!(ExperimentConfig::parse(&MINIMAL.replace("version = 1", "version = 7")).is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_tracks_values() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig::parse(&format!("# comment\n{MINIMAL}\n\n")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn ongrid_model_gets_lattice_sampling() {
        let text = format!("{MINIMAL}\n[model]\nkind = \"convcnp_ongrid\"\ndensity = 32.0\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.sampling().lattice, Some(32.0));
    }

    #[test]
    fn model_kinds_build() {
        for (kind, name) in [
            ("kind = \"convcnp\"", "convcnp"),
            ("kind = \"convcnp\"\nvariant = \"xl\"", "convcnp_xl"),
            ("kind = \"cnp\"", "cnp"),
            ("kind = \"convcnp_ongrid\"", "convcnp_ongrid"),
        ] {
            let cfg = ExperimentConfig::parse(&format!("{MINIMAL}\n[model]\n{kind}\n")).unwrap();
            assert_eq!(cfg.build_model().unwrap().name(), name);
        }
    }

    #[test]
    fn lotka_volterra_config() {
        let text = "version = 1\n[process]\nkind = \"lotka_volterra\"\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.process.dim_y(), 2);
    }
}
