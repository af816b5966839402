//! Experiment configuration files (TOML). Parsing is strict: unknown keys,
//! wrong types and a schema version other than [`SCHEMA_VERSION`] are errors.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::microrender::SceneDesc;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub image: Option<ImageConfig>,
    pub target: TargetConfig,
    #[serde(default, rename = "method")]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub bias: Option<BiasConfig>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<String>,
    /// Total sample budget for `render`.
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Linear scale applied before gamma in PNG output.
    #[serde(default = "default_exposure")]
    pub exposure: f64,
    /// Uniform draws used to estimate `∫ p` when the target has no closed form.
    #[serde(default = "default_normalization_samples")]
    pub normalization_samples: usize,
}

fn default_budget() -> u64 {
    1_000_000
}

fn default_exposure() -> f64 {
    1.0
}

fn default_normalization_samples() -> usize {
    1 << 20
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out: None,
            budget: default_budget(),
            exposure: default_exposure(),
            normalization_samples: default_normalization_samples(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

/// What to sample. Synthetic targets take their image size from `[image]`
/// (default 32 x 32); scenes carry their own, which `[image]` overrides.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Uniform {
        #[serde(default = "two")]
        dim: usize,
    },
    Gaussian {
        #[serde(default = "two")]
        dim: usize,
        mean: Vec<f64>,
        stddev: f64,
    },
    Mixture {
        #[serde(default = "two")]
        dim: usize,
        components: Vec<ComponentConfig>,
        #[serde(default = "default_images")]
        images: i32,
    },
    /// The built-in three-mode mixture in `d = 2`.
    ThreeMode,
    /// The built-in Cornell-style box.
    Cornell,
    /// Closed constant-albedo box.
    Furnace {
        albedo: f64,
        emission: f64,
        max_depth: usize,
    },
    Scene {
        scene: SceneDesc,
    },
}

fn two() -> usize {
    2
}

fn default_images() -> i32 {
    crate::target::DEFAULT_IMAGES
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Pt,
    Metropolis,
    Mala,
    MetropolisRestore,
    MalaRestore,
    DiffusionRestore,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Pt => "pt",
            MethodKind::Metropolis => "metropolis",
            MethodKind::Mala => "mala",
            MethodKind::MetropolisRestore => "metropolis-restore",
            MethodKind::MalaRestore => "mala-restore",
            MethodKind::DiffusionRestore => "diffusion-restore",
        }
    }

    pub fn is_restore(self) -> bool {
        matches!(
            self,
            MethodKind::MetropolisRestore | MethodKind::MalaRestore | MethodKind::DiffusionRestore
        )
    }
}

/// One `[[method]]` entry. Parameters that do not apply to the chosen method
/// are rejected by [`MethodConfig::validate`].
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodKind,
    #[serde(default)]
    pub stddev: Option<f64>,
    #[serde(default)]
    pub c_tilde: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default)]
    pub large_step_prob: Option<f64>,
    #[serde(default)]
    pub chains: Option<usize>,
}

impl MethodConfig {
    pub fn new(name: MethodKind) -> Self {
        Self { name, stddev: None, c_tilde: None, dt: None, m: None, large_step_prob: None, chains: None }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.name.as_str();
        let reject = |field: &str, present: bool| {
            if present {
                Err(Error::Config(format!("method `{name}` does not take `{field}`")))
            } else {
                Ok(())
            }
        };
        match self.name {
            MethodKind::Pt => {
                reject("stddev", self.stddev.is_some())?;
                reject("large_step_prob", self.large_step_prob.is_some())?;
                reject("chains", self.chains.is_some())?;
            }
            MethodKind::DiffusionRestore => {
                reject("large_step_prob", self.large_step_prob.is_some())?;
            }
            _ => {}
        }
        if self.name != MethodKind::DiffusionRestore {
            reject("c_tilde", self.c_tilde.is_some())?;
            reject("dt", self.dt.is_some())?;
        }
        if !self.name.is_restore() {
            reject("m", self.m.is_some())?;
        }
        let positive = |field: &str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => {
                Err(Error::Config(format!("`{field}` must be positive and finite, got {v}")))
            }
            _ => Ok(()),
        };
        positive("stddev", self.stddev)?;
        positive("dt", self.dt)?;
        if let Some(c) = self.c_tilde {
            if !c.is_finite() {
                return Err(Error::Config(format!("`c_tilde` must be finite, got {c}")));
            }
        }
        if let Some(m) = self.m {
            if !(m >= 1.0 && m.is_finite()) {
                return Err(Error::Config(format!("`m` must be at least 1, got {m}")));
            }
        }
        if let Some(p) = self.large_step_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("`large_step_prob` must lie in [0, 1], got {p}")));
            }
        }
        if self.chains == Some(0) {
            return Err(Error::Config("`chains` must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub budgets: Vec<u64>,
    pub seeds: Vec<u64>,
    /// Midpoint resolution for analytic `d = 2` references.
    #[serde(default = "default_quadrature")]
    pub quadrature_n: usize,
    /// Samples per pixel for path-traced references.
    #[serde(default = "default_reference_spp")]
    pub reference_spp: u64,
}

fn default_quadrature() -> usize {
    256
}

fn default_reference_spp() -> u64 {
    1 << 14
}

/// Bias-field sweep. The diffusion is fixed by `sigma` and `rotation`
/// (`c`), and only `dt` varies.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    pub dt_sweep: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub rotation: Option<f64>,
    #[serde(default = "default_grid")]
    pub grid_n: usize,
    #[serde(default = "default_bias_quadrature")]
    pub quadrature_n: usize,
}

fn default_sigma() -> f64 {
    0.05
}

fn default_grid() -> usize {
    128
}

fn default_bias_quadrature() -> usize {
    64
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if let Some(img) = self.image {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Config("`image.width` and `image.height` must be positive".into()));
            }
        }
        if !(self.run.exposure > 0.0 && self.run.exposure.is_finite()) {
            return Err(Error::Config("`run.exposure` must be positive".into()));
        }
        if self.run.threads == Some(0) {
            return Err(Error::Config("`run.threads` must be positive".into()));
        }
        if self.run.budget == 0 {
            return Err(Error::Config("`run.budget` must be positive".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        if let Some(b) = &self.bench {
            if b.budgets.is_empty() || b.seeds.is_empty() {
                return Err(Error::Config("`bench.budgets` and `bench.seeds` must be non-empty".into()));
            }
            if b.budgets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("`bench.budgets` must be strictly ascending".into()));
            }
        }
        if let Some(b) = &self.bias {
            if b.dt_sweep.is_empty() || b.dt_sweep.iter().any(|dt| !(*dt > 0.0)) {
                return Err(Error::Config("`bias.dt_sweep` must list positive step sizes".into()));
            }
            if !(b.sigma > 0.0) || b.grid_n == 0 {
                return Err(Error::Config("`bias.sigma` and `bias.grid_n` must be positive".into()));
            }
        }
        Ok(())
    }
}
