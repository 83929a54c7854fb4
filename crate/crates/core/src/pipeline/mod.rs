//! Orchestration of the full pipeline: panorama, lifting, grid inpainting
//! and export.
//!
//! Each stage writes into its own directory below the configured output and
//! drops a `done.json` marker when complete. Re-running skips finished stages
//! and resumes unfinished ones: the panorama from its step checkpoints, the
//! grid from the views already on disk.
//!
//! ```text
//! <output>/pano/    outpainting checkpoints, done.json
//! <output>/lift/    view_XX.png, depth_XX.pfm, views.json, points.ply, lift.json
//! <output>/grid/    render_/mask_/raw_/view_XXX.png, views.json
//! <output>/export/  see [`export`]
//! ```

pub mod config;
pub mod export;
pub mod metrics;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::ImageFormat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{decode_ply, encode_ply, read_pfm, write_pfm};
use crate::geometry::{render_view_from_pano, CameraView, EquirectPanorama};
use crate::lift::{
    align_scale_quantile, enforce_ground_clearance, stitch_depth_views, ClearanceReport, DepthMap, PointCloud,
    ScaleClass, StitchView,
};
use crate::oracle::{enforce_preservation, Oracle, OracleError, OracleKind, OracleRequest};
use crate::pano::{anchor_view, panorama_views, HeuristicKind, OutpaintSession, OutpaintStats, PanoError};
use crate::raster::{Grid, Mask, RgbImage};
use crate::warp::{camera_grid, grid_translations, make_warp_pair, render_pointcloud, write_warp_pair, WarpPairMeta};

pub use config::{GsSettings, PipelineConfig};
use export::{panorama_usage_mask, ExportView, ViewSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pano,
    Lift,
    Grid,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pano, Stage::Lift, Stage::Grid, Stage::Export];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Pano => "pano",
            Stage::Lift => "lift",
            Stage::Grid => "grid",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.dir_name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage, step {step}: oracle failed: {source}")]
    Oracle {
        stage: Stage,
        step: usize,
        source: OracleError,
    },
    #[error("{stage} stage{}: {message}", step.map(|s| format!(", step {s}")).unwrap_or_default())]
    Stage {
        stage: Stage,
        step: Option<usize>,
        message: String,
    },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 oracle, 4 any other stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Oracle { .. } => 3,
            PipelineError::Stage { .. } => 4,
        }
    }

    fn stage(stage: Stage, step: Option<usize>, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            step,
            message: message.to_string(),
        }
    }
}

fn io_err(stage: Stage) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::stage(stage, None, e)
}

fn img_err(stage: Stage) -> impl Fn(image::ImageError) -> PipelineError {
    move |e| PipelineError::stage(stage, None, e)
}

fn pano_err(e: PanoError) -> PipelineError {
    match e {
        PanoError::Oracle { step, source } => PipelineError::Oracle {
            stage: Stage::Pano,
            step,
            source,
        },
        PanoError::Config(m) => PipelineError::Config(m),
        other => PipelineError::stage(Stage::Pano, None, other),
    }
}

fn step_seed(seed: u64, stage: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage << 56) ^ step as u64
}

/// Evenly spaced indices into `n` grid poses; all of them without a subset.
pub fn grid_subset(n: usize, subset: Option<usize>) -> Vec<usize> {
    match subset {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanoSummary {
    pub stats: OutpaintStats,
    pub coverage: f64,
    pub solid_angle_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftSummary {
    pub s_metric: f64,
    pub alignment: Vec<(f64, f64)>,
    pub ground_height: Option<f64>,
    pub clearance_scale: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub index: usize,
    pub camera: CameraView,
    pub hole_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<Stage>,
    pub pano: Option<PanoSummary>,
    pub lift: Option<LiftSummary>,
    pub grid_views: Option<usize>,
    pub export_views: Option<usize>,
}

/// A configured pipeline bound to its oracles and output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    oracle: Arc<dyn Oracle>,
}

impl Pipeline {
    /// Builds the oracle backends named in the config.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let oracle = Arc::new(config::OracleRouter::new(&config.oracles, config.max_in_flight)?);
        Ok(Self { config, oracle })
    }

    /// Uses `oracle` for every request instead of the configured backends.
    pub fn with_oracle(config: PipelineConfig, oracle: Arc<dyn Oracle>) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self { config, oracle })
    }

    pub fn root(&self) -> &Path {
        &self.config.output
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.output.join(stage.dir_name())
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join("done.json").exists()
    }

    fn mark_done<T: Serialize>(&self, stage: Stage, summary: &T) -> Result<(), PipelineError> {
        let json = serde_json::to_vec_pretty(summary).expect("summary serializes");
        std::fs::write(self.stage_dir(stage).join("done.json"), json).map_err(io_err(stage))
    }

    fn read_done<T: for<'de> Deserialize<'de>>(&self, stage: Stage) -> Result<T, PipelineError> {
        let bytes = std::fs::read(self.stage_dir(stage).join("done.json")).map_err(io_err(stage))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::stage(stage, None, format!("done.json: {e}")))
    }

    fn input(&self) -> Result<RgbImage, PipelineError> {
        let img = image::open(&self.config.input)
            .map_err(|e| PipelineError::Config(format!("input {}: {e}", self.config.input.display())))?;
        Ok(RgbImage::from_rgb8(&img.to_rgb8()))
    }

    fn input_size(&self) -> Result<(usize, usize), PipelineError> {
        let (w, h) = image::image_dimensions(&self.config.input)
            .map_err(|e| PipelineError::Config(format!("input {}: {e}", self.config.input.display())))?;
        Ok((w as usize, h as usize))
    }

    /// Runs every stage up to and including `stop_after`.
    pub fn run(&self, stop_after: Stage) -> Result<RunSummary, PipelineError> {
        let mut summary = RunSummary {
            stages: Vec::new(),
            pano: None,
            lift: None,
            grid_views: None,
            export_views: None,
        };
        for stage in Stage::ALL.into_iter().filter(|s| *s <= stop_after) {
            match stage {
                Stage::Pano => summary.pano = Some(self.run_pano()?.1),
                Stage::Lift => summary.lift = Some(self.run_lift()?),
                Stage::Grid => summary.grid_views = Some(self.run_grid()?.len()),
                Stage::Export => summary.export_views = Some(self.run_export()?),
            }
            summary.stages.push(stage);
        }
        Ok(summary)
    }

    /// Outpaints the panorama, resuming from checkpoints when present.
    pub fn run_pano(&self) -> Result<(EquirectPanorama, PanoSummary), PipelineError> {
        let dir = self.stage_dir(Stage::Pano);
        if self.is_done(Stage::Pano) {
            return Ok((self.load_pano()?, self.read_done(Stage::Pano)?));
        }
        std::fs::create_dir_all(&dir).map_err(io_err(Stage::Pano))?;
        let mut session = if dir.join("state.json").exists() {
            log::info!("resuming panorama from {}", dir.display());
            OutpaintSession::resume(&dir).map_err(pano_err)?
        } else {
            let input = self.input()?;
            let cfg = self.config.outpaint_config(input.width(), input.height())?;
            OutpaintSession::new(
                &input,
                self.config.input_fov_deg.to_radians(),
                self.config.prompts.clone(),
                self.config.heuristic,
                cfg,
            )
            .map_err(pano_err)?
            .with_checkpoints(&dir)
            .map_err(pano_err)?
        };
        session.run(&*self.oracle).map_err(pano_err)?;
        let summary = PanoSummary {
            stats: session.stats(),
            coverage: session.pano.coverage(),
            solid_angle_coverage: session.pano.solid_angle_coverage(),
        };
        self.mark_done(Stage::Pano, &summary)?;
        Ok((session.into_panorama(), summary))
    }

    pub fn load_pano(&self) -> Result<EquirectPanorama, PipelineError> {
        let dir = self.stage_dir(Stage::Pano);
        let e = img_err(Stage::Pano);
        let rgb = RgbImage::from_rgb8(&image::open(dir.join("pano.png")).map_err(&e)?.to_rgb8());
        let mask = Mask::from_gray(&image::open(dir.join("pano_mask.png")).map_err(&e)?.to_luma8());
        EquirectPanorama::from_parts(rgb, mask).map_err(|e| PipelineError::stage(Stage::Pano, None, e))
    }

    fn lift_views(&self) -> Result<Vec<CameraView>, PipelineError> {
        let (w, h) = self.input_size()?;
        panorama_views(&self.config.plan_config(w, h)?).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Renders the panorama views, predicts and aligns their depth, and
    /// merges them into one metric point cloud.
    pub fn run_lift(&self) -> Result<LiftSummary, PipelineError> {
        const STAGE: Stage = Stage::Lift;
        if self.is_done(STAGE) {
            return self.read_done(STAGE);
        }
        let (pano, _) = self.run_pano()?;
        let dir = self.stage_dir(STAGE);
        std::fs::create_dir_all(&dir).map_err(io_err(STAGE))?;
        let cameras = self.lift_views()?;
        let seed = self.config.seed;
        let oracle = &self.oracle;
        let rendered: Vec<(RgbImage, DepthMap)> = cameras
            .par_iter()
            .enumerate()
            .map(|(k, cam)| {
                let (mut rgb, _) = render_view_from_pano(&pano, &cam.pose, &cam.intrinsics)
                    .map_err(|e| PipelineError::stage(STAGE, Some(k), e))?;
                rgb.quantize_in_place();
                let req = OracleRequest::depth(OracleKind::DepthRel, rgb.to_rgb8(), step_seed(seed, 2, k))
                    .with_camera(*cam);
                let resp = oracle.call(&req).map_err(|source| PipelineError::Oracle {
                    stage: STAGE,
                    step: k,
                    source,
                })?;
                let depth = resp.depth.ok_or_else(|| PipelineError::stage(STAGE, Some(k), "no depth in response"))?;
                Ok((rgb, depth))
            })
            .collect::<Result<_, _>>()?;
        let metric_req = OracleRequest::depth(OracleKind::DepthMetric, rendered[0].0.to_rgb8(), step_seed(seed, 3, 0))
            .with_camera(cameras[0]);
        let metric = oracle
            .call(&metric_req)
            .map_err(|source| PipelineError::Oracle {
                stage: STAGE,
                step: 0,
                source,
            })?
            .depth
            .ok_or_else(|| PipelineError::stage(STAGE, Some(0), "no depth in response"))?;
        let [q_lo, q_hi] = self.config.lift.quantiles;
        let s_metric = align_scale_quantile(&rendered[0].1, &metric, q_lo, q_hi, self.config.lift.conf_threshold)
            .map_err(|e| PipelineError::stage(STAGE, Some(0), e))?;
        let views: Vec<StitchView> = rendered
            .into_iter()
            .zip(&cameras)
            .map(|((rgb, depth), cam)| StitchView {
                rgb,
                depth,
                pose: cam.pose,
                intrinsics: cam.intrinsics,
            })
            .collect();
        let stitched = stitch_depth_views(&views, s_metric, &self.config.stitch_options()).map_err(|e| {
            let step = match &e {
                crate::lift::LiftError::InsufficientOverlap { view, .. } => Some(*view),
                _ => None,
            };
            PipelineError::stage(STAGE, step, e)
        })?;
        let mut cloud = stitched.cloud;
        let clearance: ClearanceReport = enforce_ground_clearance(&mut cloud, self.config.lift.ground_clearance);
        if cloud.is_empty() {
            return Err(PipelineError::stage(STAGE, None, "lifted point cloud is empty"));
        }

        for (k, (view, depth)) in views.iter().zip(&stitched.depths).enumerate() {
            view.rgb
                .to_rgb8()
                .save_with_format(dir.join(format!("view_{k:02}.png")), ImageFormat::Png)
                .map_err(img_err(STAGE))?;
            // metric depth after clearance scaling, 0 where invalid
            let values = Grid::from_fn(depth.values.width(), depth.values.height(), |x, y| {
                let i = depth.values.index(x, y);
                if depth.is_valid(i, self.config.lift.conf_threshold) {
                    depth.values.data()[i] * clearance.applied_scale
                } else {
                    0.0
                }
            });
            write_pfm(&dir.join(format!("depth_{k:02}.pfm")), &values).map_err(|e| PipelineError::stage(STAGE, Some(k), e))?;
        }
        write_json(&dir.join("views.json"), &cameras, STAGE)?;
        std::fs::write(dir.join("points.ply"), encode_ply(&cloud)).map_err(io_err(STAGE))?;
        let summary = LiftSummary {
            s_metric,
            alignment: stitched.alignment,
            ground_height: clearance.ground_height,
            clearance_scale: clearance.applied_scale,
            points: cloud.len(),
        };
        self.mark_done(STAGE, &summary)?;
        Ok(summary)
    }

    pub fn load_cloud(&self) -> Result<PointCloud, PipelineError> {
        let bytes = std::fs::read(self.stage_dir(Stage::Lift).join("points.ply")).map_err(io_err(Stage::Lift))?;
        decode_ply(&bytes).map_err(|e| PipelineError::stage(Stage::Lift, None, e))
    }

    /// The lifted views with their metric depth.
    pub fn load_lift_views(&self) -> Result<Vec<(RgbImage, DepthMap, CameraView)>, PipelineError> {
        let dir = self.stage_dir(Stage::Lift);
        let cameras: Vec<CameraView> = read_json(&dir.join("views.json"), Stage::Lift)?;
        cameras
            .into_iter()
            .enumerate()
            .map(|(k, cam)| {
                let rgb = image::open(dir.join(format!("view_{k:02}.png"))).map_err(img_err(Stage::Lift))?;
                let values =
                    read_pfm(&dir.join(format!("depth_{k:02}.pfm"))).map_err(|e| PipelineError::stage(Stage::Lift, Some(k), e))?;
                Ok((RgbImage::from_rgb8(&rgb.to_rgb8()), DepthMap::from_values(values, ScaleClass::Metric), cam))
            })
            .collect()
    }

    /// Renders the point cloud at the grid poses and inpaints the holes.
    pub fn run_grid(&self) -> Result<Vec<GridEntry>, PipelineError> {
        const STAGE: Stage = Stage::Grid;
        if self.is_done(STAGE) {
            return read_json(&self.stage_dir(STAGE).join("views.json"), STAGE);
        }
        self.run_lift()?;
        let cloud = self.load_cloud()?;
        let dir = self.stage_dir(STAGE);
        std::fs::create_dir_all(&dir).map_err(io_err(STAGE))?;
        let intr = self.config.grid_intrinsics()?;
        let grid = camera_grid(self.config.grid.cube_side, &intr);
        let selected = grid_subset(grid.len(), self.config.grid.subset);
        let prompt = self.config.prompts.scene.clone();
        let entries: Vec<GridEntry> = selected
            .par_iter()
            .map(|&idx| {
                let cam = grid[idx];
                let hole = self.grid_view(&cloud, &cam, idx, &prompt, &dir)?;
                Ok(GridEntry {
                    index: idx,
                    camera: cam,
                    hole_fraction: hole,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        write_json(&dir.join("views.json"), &entries, STAGE)?;
        self.mark_done(STAGE, &entries.len())?;
        Ok(entries)
    }

    fn grid_view(
        &self,
        cloud: &PointCloud,
        cam: &CameraView,
        idx: usize,
        prompt: &str,
        dir: &Path,
    ) -> Result<f64, PipelineError> {
        const STAGE: Stage = Stage::Grid;
        let view_path = dir.join(format!("view_{idx:03}.png"));
        let mask_path = dir.join(format!("mask_{idx:03}.png"));
        if view_path.exists() && mask_path.exists() {
            let mask = Mask::from_gray(&image::open(&mask_path).map_err(img_err(STAGE))?.to_luma8());
            return Ok(mask.fraction());
        }
        let rendered = render_pointcloud(cloud, &cam.pose, &cam.intrinsics, self.config.grid.splat_radius);
        let render8 = rendered.rgb.to_rgb8();
        let hole = rendered.valid.not();
        let hole8 = hole.to_gray();
        let req = OracleRequest::inpaint(render8.clone(), hole8.clone(), prompt, step_seed(self.config.seed, 4, idx));
        let raw = self
            .oracle
            .call(&req)
            .map_err(|source| PipelineError::Oracle {
                stage: STAGE,
                step: idx,
                source,
            })?
            .rgb
            .ok_or_else(|| PipelineError::stage(STAGE, Some(idx), "no image in response"))?;
        let out = enforce_preservation(&render8, &raw, &hole8);
        let save = |img: image::DynamicImage, name: String| -> Result<(), PipelineError> {
            // write-then-rename so an interrupted run never leaves a partial view
            let tmp = dir.join(format!(".{name}.tmp"));
            img.save_with_format(&tmp, ImageFormat::Png).map_err(img_err(STAGE))?;
            std::fs::rename(&tmp, dir.join(name)).map_err(io_err(STAGE))
        };
        save(render8.into(), format!("render_{idx:03}.png"))?;
        save(raw.into(), format!("raw_{idx:03}.png"))?;
        save(hole8.into(), format!("mask_{idx:03}.png"))?;
        save(out.into(), format!("view_{idx:03}.png"))?;
        Ok(hole.fraction())
    }

    /// Assembles the export directory; returns the number of views.
    pub fn run_export(&self) -> Result<usize, PipelineError> {
        const STAGE: Stage = Stage::Export;
        let entries = self.run_grid()?;
        let dir = self.stage_dir(STAGE);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(STAGE))?;
        }
        let (w, h) = self.input_size()?;
        let anchor = match self.config.heuristic {
            HeuristicKind::Anchored => Some(
                anchor_view(&self.config.plan_config(w, h)?).map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
            _ => None,
        };
        let mut views = Vec::new();
        for (k, (rgb, _, cam)) in self.load_lift_views()?.into_iter().enumerate() {
            views.push(ExportView {
                name: format!("pano_{k:02}"),
                source: ViewSource::Panorama,
                usable: panorama_usage_mask(&cam, anchor.as_ref()),
                rgb,
                camera: cam,
            });
        }
        let grid_dir = self.stage_dir(Stage::Grid);
        for e in &entries {
            let open = |name: String| image::open(grid_dir.join(name)).map_err(img_err(STAGE));
            let rgb = RgbImage::from_rgb8(&open(format!("view_{:03}.png", e.index))?.to_rgb8());
            // grid views only supervise the inpainted holes
            let usable = Mask::from_gray(&open(format!("mask_{:03}.png", e.index))?.to_luma8());
            views.push(ExportView {
                name: format!("grid_{:03}", e.index),
                source: ViewSource::Grid,
                rgb,
                usable,
                camera: e.camera,
            });
        }
        let ply = std::fs::read(self.stage_dir(Stage::Lift).join("points.ply")).map_err(io_err(STAGE))?;
        let mut cfg = self.config.clone();
        cfg.output = PathBuf::from(".");
        export::write_export(&dir, &views, &ply, &self.config.gs, &cfg.to_json()).map_err(io_err(STAGE))?;
        Ok(views.len())
    }

    /// Forward-backward warp pairs from every lifted view to the grid
    /// translations; returns the number of pairs written.
    pub fn build_pair_dataset(&self, out: &Path, limit: Option<usize>) -> Result<usize, PipelineError> {
        const STAGE: Stage = Stage::Lift;
        self.run_lift()?;
        let views = self.load_lift_views()?;
        let translations = grid_translations(self.config.grid.cube_side);
        let jobs: Vec<(usize, usize)> = (0..views.len())
            .flat_map(|v| (0..translations.len()).map(move |t| (v, t)))
            .take(limit.unwrap_or(usize::MAX))
            .collect();
        jobs.par_iter()
            .map(|&(v, t)| {
                let (rgb, depth, cam) = &views[v];
                let dst = cam.pose.with_translation(translations[t]);
                let pair = make_warp_pair(rgb, depth, &cam.pose, &dst, &cam.intrinsics);
                let meta = WarpPairMeta {
                    pose_src: cam.pose,
                    pose_dst: dst,
                    intrinsics: cam.intrinsics,
                };
                write_warp_pair(out, &format!("pair_{v:02}_{t:02}"), &pair, &meta).map_err(io_err(STAGE))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(jobs.len())
    }
}

/// Metrics over the finished stages of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pano_coverage: Option<f64>,
    pub pano_solid_angle_coverage: Option<f64>,
    pub lifted_points: Option<usize>,
    pub grid_views: usize,
    pub mean_hole_fraction: Option<f64>,
    /// Worst PSNR between a raw oracle output and its point-cloud render
    /// outside the holes; `inf` when every output kept the render exactly.
    pub min_adherence_psnr_db: Option<String>,
}

impl Pipeline {
    /// Evaluates whatever stages have finished; never calls an oracle.
    pub fn evaluate(&self) -> Result<EvalReport, PipelineError> {
        let mut report = EvalReport {
            pano_coverage: None,
            pano_solid_angle_coverage: None,
            lifted_points: None,
            grid_views: 0,
            mean_hole_fraction: None,
            min_adherence_psnr_db: None,
        };
        if self.is_done(Stage::Pano) {
            let pano = self.load_pano()?;
            report.pano_coverage = Some(metrics::coverage(&pano));
            report.pano_solid_angle_coverage = Some(pano.solid_angle_coverage());
        }
        if self.is_done(Stage::Lift) {
            report.lifted_points = Some(self.read_done::<LiftSummary>(Stage::Lift)?.points);
        }
        if self.is_done(Stage::Grid) {
            let dir = self.stage_dir(Stage::Grid);
            let entries: Vec<GridEntry> = read_json(&dir.join("views.json"), Stage::Grid)?;
            let mut worst = f64::INFINITY;
            for e in &entries {
                let open = |name: &str| image::open(dir.join(format!("{name}_{:03}.png", e.index))).map_err(img_err(Stage::Grid));
                let render = RgbImage::from_rgb8(&open("render")?.to_rgb8());
                let raw = RgbImage::from_rgb8(&open("raw")?.to_rgb8());
                let kept = Mask::from_gray(&open("mask")?.to_luma8()).not();
                if kept.count() > 0 {
                    let db = metrics::psnr(&raw, &render, Some(&kept)).map_err(|err| PipelineError::stage(Stage::Grid, Some(e.index), err))?;
                    worst = worst.min(db);
                }
            }
            report.grid_views = entries.len();
            if !entries.is_empty() {
                report.mean_hole_fraction =
                    Some(entries.iter().map(|e| e.hole_fraction).sum::<f64>() / entries.len() as f64);
                report.min_adherence_psnr_db = Some(metrics::format_psnr(worst));
            }
        }
        Ok(report)
    }
}

/// Builds the configured pipeline and runs it through `stop_after`.
pub fn run_pipeline(config: &PipelineConfig, stop_after: Stage) -> Result<RunSummary, PipelineError> {
    Pipeline::new(config.clone())?.run(stop_after)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T, stage: Stage) -> Result<(), PipelineError> {
    let json = serde_json::to_vec_pretty(value).expect("value serializes");
    std::fs::write(path, json).map_err(io_err(stage))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(stage))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::stage(stage, None, format!("{}: {e}", path.display())))
}
