//! Pipeline configuration file.
//!
//! One JSON document drives every stage. Missing keys take their defaults,
//! so `{}` plus an input path is a valid config. Angles are in degrees.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::Intrinsics;
use crate::lift::{StitchOptions, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::oracle::directory::DirectoryOracle;
use crate::oracle::http::HttpOracle;
use crate::oracle::mock::MockOracle;
use crate::oracle::{Oracle, OracleClient, OracleError, OracleKind, OracleRequest, OracleResponse};
use crate::pano::{HeuristicKind, OutpaintConfig, PlanConfig, PromptSet, RefineConfig};

/// Trainer settings handed to the splatting trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GsSettings {
    pub iterations: u32,
    pub opacity_reset: bool,
    /// First and last iteration of adaptive density control.
    pub adc: [u32; 2],
    pub sh_degree: u32,
    pub batch: u32,
}

impl Default for GsSettings {
    fn default() -> Self {
        Self {
            iterations: 5000,
            opacity_reset: false,
            adc: [500, 2500],
            sh_degree: 1,
            batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock(MockOracle),
    Directory { root: PathBuf, timeout_secs: f64 },
    Http {
        url: String,
        timeout_secs: f64,
        #[serde(default = "default_attempts")]
        attempts: u32,
    },
}

fn default_attempts() -> u32 {
    3
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock(MockOracle::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Arc<dyn Oracle>, PipelineError> {
        let secs = |s: f64| {
            Duration::try_from_secs_f64(s).map_err(|e| PipelineError::Config(format!("timeout: {e}")))
        };
        Ok(match self {
            BackendConfig::Mock(m) => Arc::new(m.clone()),
            BackendConfig::Directory { root, timeout_secs } => {
                Arc::new(DirectoryOracle::new(root).with_timeout(secs(*timeout_secs)?))
            }
            BackendConfig::Http {
                url,
                timeout_secs,
                attempts,
            } => Arc::new(
                HttpOracle::with_settings(url.clone(), secs(*timeout_secs)?, *attempts, Duration::from_millis(200))
                    .map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleBackends {
    pub inpaint: BackendConfig,
    pub refine: BackendConfig,
    pub depth: BackendConfig,
}

/// Routes each request to the backend configured for its kind.
pub struct OracleRouter {
    inpaint: OracleClient,
    refine: OracleClient,
    depth: OracleClient,
}

impl OracleRouter {
    pub fn new(backends: &OracleBackends, max_in_flight: usize) -> Result<Self, PipelineError> {
        Ok(Self {
            inpaint: OracleClient::with_limit(backends.inpaint.build()?, max_in_flight),
            refine: OracleClient::with_limit(backends.refine.build()?, max_in_flight),
            depth: OracleClient::with_limit(backends.depth.build()?, max_in_flight),
        })
    }
}

impl Oracle for OracleRouter {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        match req.kind {
            OracleKind::Inpaint => self.inpaint.call(req),
            OracleKind::Refine => self.refine.call(req),
            OracleKind::DepthRel | OracleKind::DepthMetric => self.depth.call(req),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftSettings {
    /// Quantile pair of the metric scale estimate.
    pub quantiles: [f64; 2],
    pub conf_threshold: f32,
    /// Minimum mean ground distance in meters.
    pub ground_clearance: f64,
    pub fit_shift: bool,
    pub min_overlap: f64,
}

impl Default for LiftSettings {
    fn default() -> Self {
        Self {
            quantiles: [0.2, 0.8],
            conf_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            ground_clearance: 1.5,
            fit_shift: false,
            min_overlap: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    /// Edge length of the camera cube in meters.
    pub cube_side: f64,
    pub fov_deg: f64,
    /// Use this many evenly spaced grid poses instead of all 196.
    pub subset: Option<usize>,
    pub splat_radius: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            cube_side: 2.0,
            fov_deg: 85.0,
            subset: None,
            splat_radius: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input photograph.
    pub input: PathBuf,
    pub input_fov_deg: f64,
    /// Working directory for checkpoints and the export.
    pub output: PathBuf,
    pub heuristic: HeuristicKind,
    pub prompts: PromptSet,
    pub pano_width: usize,
    pub view_size: usize,
    pub mid_fov_deg: f64,
    pub pole_fov_deg: f64,
    pub pole_pitch_deg: f64,
    pub feather_radius: f64,
    pub refine: RefineConfig,
    pub lift: LiftSettings,
    pub grid: GridSettings,
    pub gs: GsSettings,
    pub oracles: OracleBackends,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("input.png"),
            input_fov_deg: 60.0,
            output: PathBuf::from("out"),
            heuristic: HeuristicKind::Anchored,
            prompts: PromptSet::new("a scene", "the sky", "the ground"),
            pano_width: 2048,
            view_size: 1024,
            mid_fov_deg: 85.0,
            pole_fov_deg: 120.0,
            pole_pitch_deg: 60.0,
            feather_radius: 5.0,
            refine: RefineConfig::default(),
            lift: LiftSettings::default(),
            grid: GridSettings::default(),
            gs: GsSettings::default(),
            oracles: OracleBackends::default(),
            max_in_flight: OracleClient::DEFAULT_MAX_IN_FLIGHT,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.pano_width < 4 || self.pano_width % 2 != 0 {
            return bad(format!("pano_width {} must be even and at least 4", self.pano_width));
        }
        if self.view_size == 0 {
            return bad("view_size must be positive".into());
        }
        let q = self.lift.quantiles;
        if !(0.0 <= q[0] && q[0] < q[1] && q[1] <= 1.0) {
            return bad(format!("quantiles {q:?} must satisfy 0 <= low < high <= 1"));
        }
        if !(self.grid.cube_side > 0.0) {
            return bad("grid.cube_side must be positive".into());
        }
        if self.grid.subset == Some(0) {
            return bad("grid.subset must be positive".into());
        }
        if !(self.refine.strength > 0.0 && self.refine.strength <= 1.0) {
            return bad("refine.strength must lie in (0, 1]".into());
        }
        self.prompts
            .validate(self.heuristic)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.plan_config(1, 1).map(|_| ())
    }

    /// Panorama plan for an input of the given size.
    pub fn plan_config(&self, input_width: usize, input_height: usize) -> Result<PlanConfig, PipelineError> {
        let cfg = PlanConfig {
            input_fov_x: self.input_fov_deg.to_radians(),
            input_width,
            input_height,
            view_size: self.view_size,
            mid_fov: self.mid_fov_deg.to_radians(),
            pole_fov: self.pole_fov_deg.to_radians(),
            pole_pitch: self.pole_pitch_deg.to_radians(),
            ..PlanConfig::default()
        };
        crate::pano::plan_views(self.heuristic, &cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn outpaint_config(&self, input_width: usize, input_height: usize) -> Result<OutpaintConfig, PipelineError> {
        Ok(OutpaintConfig {
            plan: self.plan_config(input_width, input_height)?,
            pano_width: self.pano_width,
            feather_radius: self.feather_radius,
            refine: self.refine.clone(),
            seed: self.seed,
            ..OutpaintConfig::default()
        })
    }

    pub fn stitch_options(&self) -> StitchOptions {
        StitchOptions {
            pano_width: self.pano_width,
            conf_threshold: self.lift.conf_threshold,
            min_overlap: self.lift.min_overlap,
            fit_shift: self.lift.fit_shift,
        }
    }

    pub fn grid_intrinsics(&self) -> Result<Intrinsics, PipelineError> {
        Intrinsics::square(self.grid.fov_deg.to_radians(), self.view_size)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
