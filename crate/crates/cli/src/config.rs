//! TOML run configuration shared by all subcommands.
//!
//! One file describes the model family (and its fixed constants), where the
//! trajectory data lives, the integration refinement, and the calibration
//! knobs. Sections a given subcommand does not need may be omitted; unknown
//! keys are rejected everywhere.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use forcefit::dynamics::{Diagnostics, ModelFamily};
use forcefit::forces::{LwrVariant, SocialFixed, WallGeometry};
use forcefit::nn::NetSpec;
use forcefit::optim::CalibrationConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// The four calibratable model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    TrafficLwr,
    TrafficNet,
    CrowdSocial,
    CrowdNet,
}

impl FamilyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::TrafficLwr => "traffic_lwr",
            FamilyKind::TrafficNet => "traffic_net",
            FamilyKind::CrowdSocial => "crowd_social",
            FamilyKind::CrowdNet => "crowd_net",
        }
    }

    pub fn is_crowd(&self) -> bool {
        matches!(self, FamilyKind::CrowdSocial | FamilyKind::CrowdNet)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    #[serde(default)]
    pub walls: Option<WallsSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub calibrate: CalibrationConfig,
    #[serde(default)]
    pub init: Option<InitSection>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyKind,
    /// Optimal-velocity variant (`traffic_lwr` only).
    #[serde(default)]
    pub lwr_variant: Option<LwrVariant>,
    /// Speed-law layer widths (`traffic_net` only), e.g. `[1, 10, 1]`.
    #[serde(default)]
    pub net_layers: Option<Vec<usize>>,
    /// Pair-force layer widths (`crowd_net` only), e.g. `[4, 4, 2]`.
    #[serde(default)]
    pub interaction_layers: Option<Vec<usize>>,
    /// Wall-force layer widths (`crowd_net` only).
    #[serde(default)]
    pub wall_layers: Option<Vec<usize>>,
    /// Relaxation time in seconds (`crowd_net` only; defaults to 0.5).
    #[serde(default)]
    pub tau: Option<f64>,
    /// Agent mass in kilograms (`crowd_net` only; defaults to 1).
    #[serde(default)]
    pub mass: Option<f64>,
    /// Fixed social-force constants (`crowd_social` only; all default).
    #[serde(default)]
    pub social: Option<SocialFixed>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallsSection {
    /// Wall sample CSV (`x,y,tangent_x,tangent_y`).
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Built-in two-wall corridor.
    #[serde(default)]
    pub corridor: Option<CorridorSpec>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    pub length: f64,
    pub width: f64,
    pub spacing: f64,
}

fn default_min_agents() -> usize {
    2
}

fn default_window_steps() -> usize {
    25
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Trajectory CSV files; each file is gridded independently.
    pub paths: Vec<PathBuf>,
    /// Data grid step (s).
    pub dt: f64,
    #[serde(default = "default_min_agents")]
    pub min_agents: usize,
    /// Crowd window length in data steps.
    #[serde(default = "default_window_steps")]
    pub window_steps: usize,
    /// Keep only this lane (traffic files with a `lane` column).
    #[serde(default)]
    pub lane: Option<i64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Euler substeps per data step.
    pub substeps: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { substeps: 1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Explicit initial iterate (also the fallback parameter vector for
    /// `simulate`, `cost`, `force-grid` and `pair-study`).
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_agents: usize,
    pub n_sequences: usize,
    pub dt: f64,
    pub steps: usize,
    pub substeps: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Generating parameters.
    pub truth: Vec<f64>,
    /// Placement box length for crowd generation.
    #[serde(default)]
    pub corridor_length: Option<f64>,
    /// Placement box width for crowd generation.
    #[serde(default)]
    pub corridor_width: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "config {} has schema_version {}, this build reads {}",
                path.display(),
                config.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(config)
    }

    pub fn family_kind(&self) -> FamilyKind {
        self.model.family
    }

    /// Builds the model family, validating that exactly the fields the
    /// family needs are present.
    pub fn build_family(&self) -> Result<ModelFamily> {
        let m = &self.model;
        let forbid = |cond: bool, key: &str| -> Result<()> {
            if cond {
                bail!("[model] key {key:?} does not apply to family {}", m.family.as_str());
            }
            Ok(())
        };
        if !m.family.is_crowd() && self.walls.is_some() {
            bail!("[walls] does not apply to traffic families");
        }
        match m.family {
            FamilyKind::TrafficLwr => {
                forbid(m.net_layers.is_some(), "net_layers")?;
                forbid(m.interaction_layers.is_some(), "interaction_layers")?;
                forbid(m.wall_layers.is_some(), "wall_layers")?;
                forbid(m.tau.is_some(), "tau")?;
                forbid(m.mass.is_some(), "mass")?;
                forbid(m.social.is_some(), "social")?;
                Ok(ModelFamily::TrafficLwr {
                    variant: m.lwr_variant.context("[model] lwr_variant is required")?,
                    diagnostics: Arc::new(Diagnostics::default()),
                })
            }
            FamilyKind::TrafficNet => {
                forbid(m.lwr_variant.is_some(), "lwr_variant")?;
                forbid(m.interaction_layers.is_some(), "interaction_layers")?;
                forbid(m.wall_layers.is_some(), "wall_layers")?;
                forbid(m.tau.is_some(), "tau")?;
                forbid(m.mass.is_some(), "mass")?;
                forbid(m.social.is_some(), "social")?;
                let layers = m.net_layers.clone().context("[model] net_layers is required")?;
                let spec = NetSpec::new(layers)?;
                if spec.input_dim() != 1 || spec.output_dim() != 1 {
                    bail!("net_layers must map one gap to one speed (first and last width 1)");
                }
                Ok(ModelFamily::TrafficNet {
                    spec,
                    diagnostics: Arc::new(Diagnostics::default()),
                })
            }
            FamilyKind::CrowdSocial => {
                forbid(m.lwr_variant.is_some(), "lwr_variant")?;
                forbid(m.net_layers.is_some(), "net_layers")?;
                forbid(m.interaction_layers.is_some(), "interaction_layers")?;
                forbid(m.wall_layers.is_some(), "wall_layers")?;
                forbid(m.tau.is_some(), "tau")?;
                forbid(m.mass.is_some(), "mass")?;
                Ok(ModelFamily::CrowdSocial {
                    fixed: m.social.unwrap_or_default(),
                    walls: Arc::new(self.build_walls()?),
                })
            }
            FamilyKind::CrowdNet => {
                forbid(m.lwr_variant.is_some(), "lwr_variant")?;
                forbid(m.net_layers.is_some(), "net_layers")?;
                forbid(m.social.is_some(), "social")?;
                let shape = |layers: &Option<Vec<usize>>, key: &str| -> Result<NetSpec> {
                    let layers = layers
                        .clone()
                        .with_context(|| format!("[model] {key} is required"))?;
                    let spec = NetSpec::new(layers)?;
                    if spec.input_dim() != 4 || spec.output_dim() != 2 {
                        bail!("{key} must map 4 inputs to 2 outputs");
                    }
                    Ok(spec)
                };
                Ok(ModelFamily::CrowdNet {
                    interaction: shape(&m.interaction_layers, "interaction_layers")?,
                    wall: shape(&m.wall_layers, "wall_layers")?,
                    walls: Arc::new(self.build_walls()?),
                    tau: m.tau.unwrap_or(0.5),
                    mass: m.mass.unwrap_or(1.0),
                })
            }
        }
    }

    fn build_walls(&self) -> Result<WallGeometry> {
        let Some(walls) = &self.walls else {
            return Ok(WallGeometry::default());
        };
        match (&walls.csv, &walls.corridor) {
            (Some(path), None) => WallGeometry::from_path(path)
                .with_context(|| format!("cannot load walls from {}", path.display())),
            (None, Some(c)) => Ok(WallGeometry::corridor(c.length, c.width, c.spacing)?),
            (None, None) => bail!("[walls] needs either csv or corridor"),
            (Some(_), Some(_)) => bail!("[walls] csv and corridor are mutually exclusive"),
        }
    }
}

/// Calibrated (or hand-written) parameters on disk, the interchange format
/// between `calibrate` and the evaluation subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub schema_version: u32,
    pub family: FamilyKind,
    pub params: Vec<f64>,
}

impl ParamsFile {
    pub fn load(path: &Path) -> Result<ParamsFile> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read parameters {}", path.display()))?;
        let file: ParamsFile = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse parameters {}", path.display()))?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "parameter file {} has schema_version {}, this build reads {}",
                path.display(),
                file.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)
            .with_context(|| format!("cannot write parameters {}", path.display()))
    }
}
