//! Run configuration for the staged pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ecg::TimeGrid;
use crate::eikonal::{ApTemplate, VelocityModel};
use crate::error::{Error, Result};
use crate::fem::{Conductivities, SolverSettings};
use crate::sdf::{InferConfig, SdfConfig};
use crate::surrogate::{SamplingPolicy, SurrogateConfig};

/// Leaf keys whose defaults are the published values.
const PAPER_KEYS: &[&str] = &[
    "conductivities.sigma_it",
    "conductivities.sigma_if",
    "conductivities.sigma_et",
    "conductivities.sigma_ef",
    "conductivities.sigma_0",
    "sampling.near_fraction",
    "sampling.band_mm",
    "sdf.code_dim",
    "sdf.width",
    "sdf.depth",
    "sdf.lr",
    "sdf.geometries_per_batch",
    "surrogate.width",
    "surrogate.depth",
    "surrogate.lr",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Uniform anterior electrodes added after the nine standard ones.
    pub n_uniform_electrodes: usize,
    pub containment_samples: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { n_train: 20, n_test: 5, n_uniform_electrodes: 7, containment_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Grid spacing (mm).
    pub h: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { h: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Points per geometry for each error region.
    pub points_per_region: usize,
    /// Reconstruction grid resolution per axis.
    pub grid_n: usize,
    pub cdf_rows: usize,
    /// Observations per test geometry for latent inference.
    pub inference_samples: usize,
    pub max_heart_angular_deg: f64,
    pub max_ecg_rel_l2: f64,
    pub min_ecg_wins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            points_per_region: 2048,
            grid_n: 64,
            cdf_rows: 1000,
            inference_samples: 8000,
            max_heart_angular_deg: 15.0,
            max_ecg_rel_l2: 0.10,
            min_ecg_wins: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub out: PathBuf,
    /// Write the packed surrogate training records.
    pub keep_datasets: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default"), keep_datasets: false }
    }
}

/// Component seeds in `sdf`, `surrogate` are offsets added to `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometries: GeometryConfig,
    pub mesh: MeshConfig,
    pub conductivities: Conductivities,
    pub velocities: VelocityModel,
    pub action_potential: ApTemplate,
    pub solver: SolverSettings,
    pub time: TimeGrid,
    pub sampling: SamplingPolicy,
    pub sdf: SdfConfig,
    pub infer: InferConfig,
    pub surrogate: SurrogateConfig,
    pub evaluation: EvalConfig,
    pub paths: PathConfig,
    /// Leaf keys set explicitly, with where they came from.
    #[serde(skip)]
    pub explicit: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometries: GeometryConfig::default(),
            mesh: MeshConfig::default(),
            conductivities: Conductivities::default(),
            velocities: VelocityModel::default(),
            action_potential: ApTemplate::default(),
            solver: SolverSettings::default(),
            time: TimeGrid::default(),
            sampling: SamplingPolicy::default(),
            sdf: SdfConfig::default(),
            infer: InferConfig::default(),
            surrogate: SurrogateConfig::default(),
            evaluation: EvalConfig::default(),
            paths: PathConfig::default(),
            explicit: BTreeMap::new(),
        }
    }
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

impl RunConfig {
    pub fn from_value(raw: Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let mut l = Vec::new();
        leaves("", &raw, &mut l);
        cfg.explicit = l.into_iter().map(|(k, _)| (k, "config file".to_string())).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(raw)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.explicit.insert("seed".into(), "command line".into());
    }

    pub fn set_out(&mut self, out: PathBuf) {
        self.paths.out = out;
        self.explicit.insert("paths.out".into(), "command line".into());
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometries;
        if g.n_train < 2 || g.n_test == 0 {
            return Err(Error::Config("need at least 2 training and 1 test geometry".into()));
        }
        if g.containment_samples == 0 {
            return Err(Error::Config("geometries.containment_samples must be positive".into()));
        }
        if !(self.mesh.h > 0.0 && self.mesh.h.is_finite()) {
            return Err(Error::Config("mesh.h must be positive".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config("solver tolerance and iteration cap must be positive".into()));
        }
        let e = &self.evaluation;
        if e.points_per_region == 0 || e.grid_n < 2 || e.inference_samples < 1000 {
            return Err(Error::Config(
                "evaluation needs points_per_region > 0, grid_n >= 2, inference_samples >= 1000".into(),
            ));
        }
        if self.sdf.samples_per_geometry < 1000 {
            return Err(Error::Config("sdf.samples_per_geometry must be at least 1000".into()));
        }
        self.conductivities.validate()?;
        self.velocities.validate()?;
        self.action_potential.validate()?;
        self.time.validate()?;
        self.sampling.validate()?;
        self.sdf.validate()?;
        self.surrogate.validate()?;
        if !(self.infer.lr > 0.0) || self.infer.iterations == 0 || self.infer.lambda_maha < 0.0 {
            return Err(Error::Config("infer: lr and iterations must be positive, lambda_maha >= 0".into()));
        }
        Ok(())
    }

    /// Training settings with the component seed offset by the run seed.
    pub fn sdf_settings(&self) -> SdfConfig {
        SdfConfig { seed: self.seed.wrapping_add(self.sdf.seed), ..self.sdf.clone() }
    }

    pub fn surrogate_settings(&self) -> SurrogateConfig {
        SurrogateConfig { seed: self.seed.wrapping_add(self.surrogate.seed), ..self.surrogate.clone() }
    }

    /// Origin of every leaf value: `paper`, `non-paper default`, or where it was set.
    pub fn provenance(&self) -> BTreeMap<String, String> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut l = Vec::new();
        leaves("", &v, &mut l);
        l.into_iter()
            .map(|(k, _)| {
                let src = if let Some(s) = self.explicit.get(&k) {
                    s.clone()
                } else if PAPER_KEYS.contains(&k.as_str()) {
                    "paper".to_string()
                } else {
                    "non-paper default".to_string()
                };
                (k, src)
            })
            .collect()
    }

    /// Resolved configuration with its provenance map.
    pub fn resolved(&self) -> Value {
        json!({ "config": self, "provenance": self.provenance() })
    }
}
