//! Run configuration: a TOML document with a strict schema.

use std::path::{Path, PathBuf};

use polymer_core::annealed::TableMethod;
use polymer_core::lattice::ConeAperture;
use polymer_core::pathsum::{EnsembleKind, EnumOptions, LengthBudget, ModelParams};
use polymer_core::environment::PotentialSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub potential: PotentialSpec,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub experiment: Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_aperture")]
    pub aperture: [u32; 2],
}

fn default_aperture() -> [u32; 2] {
    [2, 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableChoice {
    Auto,
    Markov,
    Enumerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub max_len: usize,
    pub max_excess: usize,
    pub node_budget: u64,
    /// Initial slab half-width; 0 picks it from the height.
    pub box_halfwidth: i32,
    pub m_max: i32,
    pub n_max: i32,
    pub replicas: usize,
    /// Slab tolerance relative to the free partition function.
    pub rel_tol: f64,
    pub table: TableChoice,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            max_len: 16,
            max_excess: 4,
            node_budget: 2_000_000_000,
            box_halfwidth: 0,
            m_max: 8,
            n_max: 40,
            replicas: 20,
            rel_tol: 1e-8,
            table: TableChoice::Auto,
        }
    }
}

/// Knobs read by individual subcommands; each ignores the ones it does not use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub ensemble: EnsembleKind,
    pub heights: Vec<u32>,
    /// Sinai targets as `[perp..., par]`; empty means every cone point at
    /// the largest height.
    pub targets: Vec<Vec<i32>>,
    /// Replace the annealed table by the two-atom toy table with this weight.
    pub toy: Option<f64>,
    pub z_grid: Vec<Vec<f64>>,
    pub fd_step: f64,
    pub richardson: bool,
    pub probe_radius: u32,
    pub box_sides: Vec<i32>,
    pub s_height: u32,
    pub attract_pairs: usize,
    pub attract_max_len: usize,
    pub pairs: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub spans: Vec<u32>,
    pub offsets: Vec<i32>,
    pub samples: usize,
    pub eta: f64,
    pub eta_grid: Vec<f64>,
    pub horizon: u32,
    pub separations: Vec<i32>,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            ensemble: EnsembleKind::T,
            heights: vec![1, 2, 3, 4],
            targets: Vec::new(),
            toy: None,
            z_grid: vec![vec![0.0]],
            fd_step: 1e-3,
            richardson: true,
            probe_radius: 6,
            box_sides: vec![2, 4],
            s_height: 2,
            attract_pairs: 0,
            attract_max_len: 8,
            pairs: 0,
            l_min: 2,
            l_max: 12,
            spans: Vec::new(),
            offsets: vec![0],
            samples: 0,
            eta: 0.1,
            eta_grid: vec![0.0, 0.1],
            horizon: 64,
            separations: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        self.params()?;
        self.potential.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let b = &self.budgets;
        if b.max_len == 0 || b.node_budget == 0 || b.m_max < 1 || b.n_max < 1 || b.replicas == 0 {
            return bad("budgets must be positive".into());
        }
        if b.box_halfwidth < 0 {
            return bad("box_halfwidth must be nonnegative".into());
        }
        if !(b.rel_tol > 0.0) {
            return bad("rel_tol must be positive".into());
        }
        let e = &self.experiment;
        if e.heights.is_empty() || e.heights.contains(&0) {
            return bad("experiment heights must be positive".into());
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams, HarnessError> {
        let m = &self.model;
        let ap = ConeAperture::new(m.aperture[0], m.aperture[1]).map_err(|e| HarnessError::Config(e.to_string()))?;
        ModelParams::new(m.d, m.lambda, m.beta, ap).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn budget(&self) -> LengthBudget {
        LengthBudget::new(self.budgets.max_len, self.budgets.max_excess)
    }

    pub fn table_method(&self) -> TableMethod {
        let budget = self.budget();
        match self.budgets.table {
            TableChoice::Auto => TableMethod::Auto { budget },
            TableChoice::Markov => TableMethod::Markov,
            TableChoice::Enumerate => TableMethod::Enumerate { budget },
        }
    }

    pub fn enum_options(&self, parallel: bool) -> EnumOptions {
        EnumOptions { parallel, node_budget: self.budgets.node_budget }
    }

    /// Canonical JSON: sorted keys, no output directory.
    pub fn canonical(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        v.to_string()
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
