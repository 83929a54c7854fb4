//! Progressive panorama synthesis.
//!
//! A [`ViewPlan`] lists rotation-only perspective views. Each step renders the
//! current panorama at the planned pose, asks the inpainting oracle to fill
//! the unknown pixels and projects the result back. The anchored heuristic
//! additionally copies the input image to the backside while the sky and
//! ground are synthesized, then removes it before the mid band is completed.
//!
//! [`OutpaintSession`] carries the evolving state. A failed oracle call leaves
//! it untouched so the run can continue, and with a checkpoint directory the
//! state survives process restarts.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::ImageFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project_view_into_pano, render_view_from_pano, CameraPose, CameraView, EquirectPanorama,
    GeometryError, Intrinsics,
};
use crate::oracle::{Oracle, OracleError, OracleRequest, DEFAULT_REFINE_STRENGTH};
use crate::raster::{feather_mask, gaussian_blur, Mask, RgbImage, ScalarMap};

/// Suffix appended to the scene prompt for the single-shot heuristic.
pub const PANORAMA_PROMPT_SUFFIX: &str = ", equirectangular image, panorama";

/// Minimum known fraction of a view before it is sent for inpainting.
pub const DEFAULT_MIN_OVERLAP: f64 = 0.25;

const PROBE_SIZE: usize = 48;
const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PanoError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("oracle failed at plan step {step}: {source}")]
    Oracle { step: usize, source: OracleError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl From<std::io::Error> for PanoError {
    fn from(e: std::io::Error) -> Self {
        PanoError::Checkpoint(e.to_string())
    }
}

impl From<image::ImageError> for PanoError {
    fn from(e: image::ImageError) -> Self {
        PanoError::Checkpoint(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    AdHoc,
    Sequential,
    Anchored,
}

impl FromStr for HeuristicKind {
    type Err = PanoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "adhoc" => Ok(HeuristicKind::AdHoc),
            "sequential" => Ok(HeuristicKind::Sequential),
            "anchored" => Ok(HeuristicKind::Anchored),
            _ => Err(PanoError::Config(format!("unknown heuristic {s:?}"))),
        }
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeuristicKind::AdHoc => "ad_hoc",
            HeuristicKind::Sequential => "sequential",
            HeuristicKind::Anchored => "anchored",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    /// Coarse description of the whole scene, used for mid-band views.
    pub scene: String,
    pub sky_or_ceiling: String,
    pub ground_or_floor: String,
}

impl PromptSet {
    pub fn new(scene: &str, sky: &str, ground: &str) -> Self {
        Self {
            scene: scene.into(),
            sky_or_ceiling: sky.into(),
            ground_or_floor: ground.into(),
        }
    }

    pub fn validate(&self, kind: HeuristicKind) -> Result<(), PanoError> {
        if self.scene.trim().is_empty() {
            return Err(PanoError::Config("scene prompt is empty".into()));
        }
        if kind != HeuristicKind::AdHoc
            && (self.sky_or_ceiling.trim().is_empty() || self.ground_or_floor.trim().is_empty())
        {
            return Err(PanoError::Config(format!(
                "{kind} heuristic needs sky and ground prompts"
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, slot: &PromptSlot) -> String {
        match slot {
            PromptSlot::Scene => self.scene.clone(),
            PromptSlot::Sky => self.sky_or_ceiling.clone(),
            PromptSlot::Ground => self.ground_or_floor.clone(),
            PromptSlot::Panorama => format!("{}{PANORAMA_PROMPT_SUFFIX}", self.scene),
            PromptSlot::Verbatim(t) => t.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSlot {
    Scene,
    Sky,
    Ground,
    /// Scene prompt plus [`PANORAMA_PROMPT_SUFFIX`].
    Panorama,
    Verbatim(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    /// Render, inpaint and project back one perspective view.
    Inpaint,
    /// Inpaint the whole equirectangular canvas in one call.
    InpaintPanorama,
    /// Copy the input image to yaw = pi.
    PlaceBackside,
    /// Clear the backside copy again.
    RemoveBackside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: StepAction,
    pub pose: CameraPose,
    pub intr: Intrinsics,
    pub prompt_slot: Option<PromptSlot>,
    /// Steps may be reordered only within the same phase.
    pub phase: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub kind: HeuristicKind,
    pub input_pose: CameraPose,
    pub input_intr: Intrinsics,
    pub steps: Vec<PlanStep>,
}

impl ViewPlan {
    pub fn inpaint_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.action, StepAction::Inpaint | StepAction::InpaintPanorama))
            .count()
    }

    pub fn anchor_actions(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.action, StepAction::PlaceBackside | StepAction::RemoveBackside))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Horizontal field of view of the input photograph (radians).
    pub input_fov_x: f64,
    pub input_width: usize,
    pub input_height: usize,
    /// Side length of the square inpainting views.
    pub view_size: usize,
    pub mid_fov: f64,
    pub mid_count: usize,
    pub pole_fov: f64,
    pub pole_count: usize,
    /// Elevation of the top views; bottom views mirror it.
    pub pole_pitch: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            input_fov_x: 60f64.to_radians(),
            input_width: 1024,
            input_height: 1024,
            view_size: 1024,
            mid_fov: 85f64.to_radians(),
            mid_count: 8,
            pole_fov: 120f64.to_radians(),
            pole_count: 4,
            pole_pitch: 60f64.to_radians(),
        }
    }
}

/// Mid-band yaw indices spreading alternately right and left from the input.
fn alternating_order(n: usize) -> Vec<usize> {
    let mut order = vec![0];
    for k in 1..=n / 2 {
        order.push(k);
        if n - k != k {
            order.push(n - k);
        }
    }
    order
}

/// Right half first, then the left half, as a camera rotating 180 degrees each way.
fn sweep_order(n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..=n / 2).collect();
    order.extend((n / 2 + 1..n).rev());
    order
}

pub fn plan_views(kind: HeuristicKind, cfg: &PlanConfig) -> Result<ViewPlan, PanoError> {
    let bad = |m: &str| Err(PanoError::Config(m.to_string()));
    if cfg.mid_count == 0 || cfg.pole_count == 0 || cfg.view_size == 0 {
        return bad("view counts and size must be positive");
    }
    for fov in [cfg.mid_fov, cfg.pole_fov, cfg.input_fov_x] {
        if !(fov > 0.0 && fov < PI) {
            return bad("fields of view must lie in (0, pi)");
        }
    }
    let input_intr = Intrinsics::from_fov_x(cfg.input_fov_x, cfg.input_width, cfg.input_height)?;
    let input_pose = CameraPose::look(0.0, 0.0, 0.0);
    let mid_intr = Intrinsics::square(cfg.mid_fov, cfg.view_size)?;
    let pole_intr = Intrinsics::square(cfg.pole_fov, cfg.view_size)?;

    let mid = |k: usize, phase: u32| PlanStep {
        action: StepAction::Inpaint,
        pose: CameraPose::look(TAU * k as f64 / cfg.mid_count as f64, 0.0, 0.0),
        intr: mid_intr,
        prompt_slot: Some(PromptSlot::Scene),
        phase,
    };
    let pole = |k: usize, up: bool, phase: u32| PlanStep {
        action: StepAction::Inpaint,
        pose: CameraPose::look(
            TAU * k as f64 / cfg.pole_count as f64,
            if up { cfg.pole_pitch } else { -cfg.pole_pitch },
            0.0,
        ),
        intr: pole_intr,
        prompt_slot: Some(if up { PromptSlot::Sky } else { PromptSlot::Ground }),
        phase,
    };
    let anchor = |action: StepAction, phase: u32| PlanStep {
        action,
        pose: CameraPose::look(PI, 0.0, 0.0),
        intr: input_intr,
        prompt_slot: None,
        phase,
    };

    let steps = match kind {
        HeuristicKind::AdHoc => vec![PlanStep {
            action: StepAction::InpaintPanorama,
            pose: input_pose,
            intr: input_intr,
            prompt_slot: Some(PromptSlot::Panorama),
            phase: 0,
        }],
        HeuristicKind::Sequential => {
            let mut s: Vec<_> = sweep_order(cfg.mid_count).into_iter().map(|k| mid(k, 0)).collect();
            s.extend((0..cfg.pole_count).map(|k| pole(k, true, 1)));
            s.extend((0..cfg.pole_count).map(|k| pole(k, false, 1)));
            s
        }
        HeuristicKind::Anchored => {
            let mut s = vec![anchor(StepAction::PlaceBackside, 0)];
            s.extend((0..cfg.pole_count).map(|k| pole(k, true, 1)));
            s.extend((0..cfg.pole_count).map(|k| pole(k, false, 1)));
            s.push(anchor(StepAction::RemoveBackside, 2));
            s.extend(alternating_order(cfg.mid_count).into_iter().map(|k| mid(k, 3)));
            s
        }
    };
    Ok(ViewPlan {
        kind,
        input_pose,
        input_intr,
        steps,
    })
}

/// The 16 anchored-layout views of a finished panorama in stitching order:
/// the mid band by increasing yaw, then the top and bottom rings. Every view
/// overlaps the ones before it.
pub fn panorama_views(cfg: &PlanConfig) -> Result<Vec<CameraView>, PanoError> {
    let plan = plan_views(HeuristicKind::Anchored, cfg)?;
    let inpaint = plan.steps.iter().filter(|s| s.action == StepAction::Inpaint);
    let view = |s: &PlanStep| CameraView {
        pose: s.pose,
        intrinsics: s.intr,
    };
    let mut mid: Vec<(usize, CameraView)> = Vec::new();
    let mut poles = Vec::new();
    for s in inpaint {
        if s.prompt_slot == Some(PromptSlot::Scene) {
            // yaw turns right, toward -y
            let f = s.pose.forward();
            let yaw = (-f.y).atan2(f.x).rem_euclid(TAU);
            let k = (yaw / TAU * cfg.mid_count as f64).round() as usize % cfg.mid_count;
            mid.push((k, view(s)));
        } else {
            poles.push(view(s));
        }
    }
    mid.sort_by_key(|(k, _)| *k);
    Ok(mid.into_iter().map(|(_, v)| v).chain(poles).collect())
}

/// Where the anchored heuristic temporarily places the input photograph.
pub fn anchor_view(cfg: &PlanConfig) -> Result<CameraView, PanoError> {
    let plan = plan_views(HeuristicKind::Anchored, cfg)?;
    let s = plan
        .steps
        .iter()
        .find(|s| s.action == StepAction::PlaceBackside)
        .expect("anchored plan places the backside");
    Ok(CameraView {
        pose: s.pose,
        intrinsics: s.intr,
    })
}

/// Blends a refined image over `base` through a blurred copy of `mask`.
///
/// The soft weight is `gaussian_blur(mask, blur_sigma)`; weights within 1e-6
/// of 0 or 1 are snapped so untouched and fully refined regions are exact.
pub fn refine_blend(
    base: &RgbImage,
    refined: &RgbImage,
    mask: &Mask,
    blur_sigma: f64,
) -> Result<RgbImage, PanoError> {
    if !base.same_dims(refined) || !base.same_dims(mask) {
        return Err(PanoError::Config(format!(
            "refine_blend size mismatch: base {:?}, refined {:?}, mask {:?}",
            base.dims(),
            refined.dims(),
            mask.dims()
        )));
    }
    let soft = gaussian_blur(&mask.to_scalar(), blur_sigma);
    let mut out = base.clone();
    for ((o, r), &s) in out.data_mut().iter_mut().zip(refined.data()).zip(soft.data()) {
        if s >= 1.0 - 1e-6 {
            *o = *r;
        } else if s > 1e-6 {
            for c in 0..3 {
                o[c] = s * r[c] + (1.0 - s) * o[c];
            }
        }
    }
    Ok(out)
}

/// Hard mask combined with its feathered fringe, as sent to the inpainter.
pub fn soft_inpaint_mask(hard: &Mask, feather_radius: f64) -> ScalarMap {
    let f = feather_mask(hard, feather_radius);
    f.zip_map(hard, |&v, &m| if m { 1.0 } else { v })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub per_view: bool,
    pub final_pano: bool,
    pub strength: f32,
    /// Gaussian sigma (pixels) used to soften the refinement mask.
    pub blur_sigma: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            per_view: true,
            final_pano: true,
            strength: DEFAULT_REFINE_STRENGTH,
            blur_sigma: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutpaintConfig {
    pub plan: PlanConfig,
    pub pano_width: usize,
    /// Half-width in pixels of the mask feathering.
    pub feather_radius: f64,
    pub min_overlap: f64,
    pub refine: RefineConfig,
    pub seed: u64,
}

impl Default for OutpaintConfig {
    fn default() -> Self {
        Self {
            plan: PlanConfig::default(),
            pano_width: 2048,
            feather_radius: 5.0,
            min_overlap: DEFAULT_MIN_OVERLAP,
            refine: RefineConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutpaintStats {
    pub inpaint_calls: usize,
    pub refine_calls: usize,
    pub anchor_actions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SessionState {
    version: u32,
    config: OutpaintConfig,
    prompts: PromptSet,
    plan: ViewPlan,
    done: Vec<bool>,
    order: Vec<usize>,
    coverage_log: Vec<f64>,
    stats: OutpaintStats,
    final_refined: bool,
}

/// Files produced by one inpainting step, kept for checkpoints.
struct StepArtifacts {
    view: RgbImage,
    mask: Mask,
    result: RgbImage,
}

pub struct OutpaintSession {
    state: SessionState,
    input: RgbImage,
    pub pano: EquirectPanorama,
    /// Panorama pixels covered by the input photograph.
    pub input_mask: Mask,
    input_proj: RgbImage,
    /// Pixels filled by the backside copy, set between place and remove.
    anchor_mask: Option<Mask>,
    checkpoint_dir: Option<PathBuf>,
}

fn step_seed(seed: u64, step: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((step as u64) << 8)
        .wrapping_add(salt)
}

fn oracle_err(step: usize) -> impl FnOnce(OracleError) -> PanoError {
    move |source| PanoError::Oracle { step, source }
}

impl OutpaintSession {
    /// Embeds `input` (horizontal fov `fov_x`) at yaw 0 and prepares the plan.
    pub fn new(
        input: &RgbImage,
        fov_x: f64,
        prompts: PromptSet,
        kind: HeuristicKind,
        mut config: OutpaintConfig,
    ) -> Result<Self, PanoError> {
        prompts.validate(kind)?;
        config.plan.input_fov_x = fov_x;
        config.plan.input_width = input.width();
        config.plan.input_height = input.height();
        let plan = plan_views(kind, &config.plan)?;
        let mut pano = EquirectPanorama::new(config.pano_width, config.pano_width / 2)?;
        let all = Mask::new(input.width(), input.height(), true);
        project_view_into_pano(input, &all, &plan.input_pose, &plan.input_intr, &mut pano, 0.0)?;
        pano.rgb.quantize_in_place();
        let state = SessionState {
            version: STATE_VERSION,
            done: vec![false; plan.steps.len()],
            order: Vec::new(),
            coverage_log: vec![pano.coverage()],
            config,
            prompts,
            plan,
            stats: OutpaintStats::default(),
            final_refined: false,
        };
        Ok(Self {
            input_mask: pano.fill_mask.clone(),
            input_proj: pano.rgb.clone(),
            input: input.clone(),
            pano,
            anchor_mask: None,
            state,
            checkpoint_dir: None,
        })
    }

    /// Writes the initial state and every later step below `dir`.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Result<Self, PanoError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        self.checkpoint_dir = Some(dir);
        self.save_state()?;
        Ok(self)
    }

    pub fn plan(&self) -> &ViewPlan {
        &self.state.plan
    }

    pub fn stats(&self) -> OutpaintStats {
        self.state.stats
    }

    /// Plan indices in execution order.
    pub fn executed_order(&self) -> &[usize] {
        &self.state.order
    }

    /// Fill coverage after initialization and after every executed step.
    pub fn coverage_log(&self) -> &[f64] {
        &self.state.coverage_log
    }

    pub fn is_finished(&self) -> bool {
        self.state.done.iter().all(|&d| d)
            && (self.state.final_refined || !self.state.config.refine.final_pano)
    }

    /// Known fraction of a planned view, estimated on a small probe render.
    pub fn known_fraction(&self, step: usize) -> Result<f64, PanoError> {
        let s = &self.state.plan.steps[step];
        let probe = Intrinsics::new(s.intr.fov_x, s.intr.fov_y, PROBE_SIZE, PROBE_SIZE)?;
        let (_, known) = render_view_from_pano(&self.pano, &s.pose, &probe)?;
        Ok(known.fraction())
    }

    /// Next plan index: the first pending step, unless it is an inpainting
    /// view without enough known context, in which case the earliest step of
    /// the same phase that has enough (or else the best one) is chosen.
    pub fn next_step(&self) -> Result<Option<usize>, PanoError> {
        let Some(first) = self.state.done.iter().position(|&d| !d) else {
            return Ok(None);
        };
        let steps = &self.state.plan.steps;
        if steps[first].action != StepAction::Inpaint {
            return Ok(Some(first));
        }
        let phase = steps[first].phase;
        let candidates: Vec<usize> = (first..steps.len())
            .filter(|&i| !self.state.done[i] && steps[i].phase == phase && steps[i].action == StepAction::Inpaint)
            .collect();
        let mut best = (first, -1.0);
        for &i in &candidates {
            let f = self.known_fraction(i)?;
            if f >= self.state.config.min_overlap {
                return Ok(Some(i));
            }
            if f > best.1 {
                best = (i, f);
            }
        }
        log::warn!(
            "no pending view reaches {:.0}% known context; continuing with step {} ({:.1}%)",
            self.state.config.min_overlap * 100.0,
            best.0,
            best.1 * 100.0
        );
        Ok(Some(best.0))
    }

    /// Runs one plan step (or the final refinement). Returns `false` once
    /// nothing is left. On error the session is unchanged.
    pub fn step(&mut self, oracle: &dyn Oracle) -> Result<bool, PanoError> {
        let Some(idx) = self.next_step()? else {
            if self.is_finished() {
                return Ok(false);
            }
            self.final_refine(oracle)?;
            self.state.final_refined = true;
            self.save_state()?;
            return Ok(true);
        };
        let action = self.state.plan.steps[idx].action;
        let artifacts = match action {
            StepAction::PlaceBackside => {
                self.place_backside(idx)?;
                None
            }
            StepAction::RemoveBackside => {
                self.remove_backside()?;
                None
            }
            StepAction::Inpaint => Some(self.inpaint_view(idx, oracle)?),
            StepAction::InpaintPanorama => Some(self.inpaint_panorama(idx, oracle)?),
        };
        self.state.done[idx] = true;
        self.state.order.push(idx);
        self.state.coverage_log.push(self.pano.coverage());
        self.write_step(artifacts.as_ref())?;
        Ok(true)
    }

    pub fn run(&mut self, oracle: &dyn Oracle) -> Result<(), PanoError> {
        while self.step(oracle)? {}
        Ok(())
    }

    pub fn into_panorama(self) -> EquirectPanorama {
        self.pano
    }

    fn restore_input(&mut self) {
        self.pano.rgb.copy_masked(&self.input_proj, &self.input_mask);
        for (f, &m) in self.pano.fill_mask.data_mut().iter_mut().zip(self.input_mask.data()) {
            *f |= m;
        }
        self.pano.rgb.quantize_in_place();
    }

    fn place_backside(&mut self, idx: usize) -> Result<(), PanoError> {
        let step = &self.state.plan.steps[idx];
        let before = self.pano.fill_mask.clone();
        let all = Mask::new(self.input.width(), self.input.height(), true);
        project_view_into_pano(&self.input, &all, &step.pose, &step.intr, &mut self.pano, 0.0)?;
        self.restore_input();
        self.anchor_mask = Some(self.pano.fill_mask.zip_map(&before, |&now, &was| now && !was));
        self.state.stats.anchor_actions += 1;
        Ok(())
    }

    fn remove_backside(&mut self) -> Result<(), PanoError> {
        let anchor = self
            .anchor_mask
            .take()
            .ok_or_else(|| PanoError::Config("remove_backside without a placed backside".into()))?;
        let clear = anchor.zip_map(&self.input_mask, |&a, &i| a && !i);
        self.pano.clear(&clear);
        self.state.stats.anchor_actions += 1;
        Ok(())
    }

    fn refine(
        &self,
        image: &RgbImage,
        mask: &Mask,
        seed: u64,
        step: usize,
        oracle: &dyn Oracle,
    ) -> Result<RgbImage, PanoError> {
        let cfg = &self.state.config.refine;
        let req = OracleRequest::refine(image.to_rgb8(), mask.to_gray(), cfg.strength, seed);
        let resp = oracle.call(&req).map_err(oracle_err(step))?;
        let refined = RgbImage::from_rgb8(resp.rgb.as_ref().expect("image response"));
        let mut out = refine_blend(image, &refined, mask, cfg.blur_sigma)?;
        out.quantize_in_place();
        Ok(out)
    }

    fn inpaint_view(&mut self, idx: usize, oracle: &dyn Oracle) -> Result<StepArtifacts, PanoError> {
        let step = self.state.plan.steps[idx].clone();
        let cfg = self.state.config.clone();
        let (mut view, known) = render_view_from_pano(&self.pano, &step.pose, &step.intr)?;
        view.quantize_in_place();
        let hard = known.not();
        let soft = soft_inpaint_mask(&hard, cfg.feather_radius);
        let prompt = self.state.prompts.resolve(step.prompt_slot.as_ref().unwrap_or(&PromptSlot::Scene));
        let req = OracleRequest::inpaint(view.to_rgb8(), soft.to_gray(), prompt, step_seed(cfg.seed, idx, 1));
        let resp = oracle.call(&req).map_err(oracle_err(idx))?;
        let mut result = RgbImage::from_rgb8(resp.rgb.as_ref().expect("image response"));
        result.copy_masked(&view, &known);
        let mut refine_calls = 0;
        if cfg.refine.per_view {
            result = self.refine(&result, &hard, step_seed(cfg.seed, idx, 2), idx, oracle)?;
            result.copy_masked(&view, &known);
            refine_calls += 1;
        }
        // every oracle call succeeded; commit
        project_view_into_pano(&result, &hard, &step.pose, &step.intr, &mut self.pano, cfg.feather_radius)?;
        self.restore_input();
        self.state.stats.inpaint_calls += 1;
        self.state.stats.refine_calls += refine_calls;
        Ok(StepArtifacts {
            view,
            mask: hard,
            result,
        })
    }

    fn inpaint_panorama(&mut self, idx: usize, oracle: &dyn Oracle) -> Result<StepArtifacts, PanoError> {
        let cfg = self.state.config.clone();
        let view = self.pano.rgb.clone();
        let hard = self.pano.fill_mask.not();
        let soft = soft_inpaint_mask(&hard, cfg.feather_radius);
        let prompt = self.state.prompts.resolve(&PromptSlot::Panorama);
        let req = OracleRequest::inpaint(view.to_rgb8(), soft.to_gray(), prompt, step_seed(cfg.seed, idx, 1));
        let resp = oracle.call(&req).map_err(oracle_err(idx))?;
        let mut result = RgbImage::from_rgb8(resp.rgb.as_ref().expect("image response"));
        result.copy_masked(&view, &self.pano.fill_mask);
        self.pano.rgb = result.clone();
        self.pano.fill_mask = Mask::new(self.pano.width(), self.pano.height(), true);
        self.restore_input();
        self.state.stats.inpaint_calls += 1;
        Ok(StepArtifacts {
            view,
            mask: hard,
            result,
        })
    }

    fn final_refine(&mut self, oracle: &dyn Oracle) -> Result<(), PanoError> {
        let mask = self.input_mask.not();
        let refined = self.refine(&self.pano.rgb, &mask, step_seed(self.state.config.seed, usize::MAX, 3), self.state.plan.steps.len(), oracle)?;
        self.pano.rgb = refined;
        self.restore_input();
        self.state.stats.refine_calls += 1;
        Ok(())
    }

    fn write_step(&self, artifacts: Option<&StepArtifacts>) -> Result<(), PanoError> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        let k = self.state.order.len() - 1;
        let step_dir = dir.join(format!("step_{k:03}"));
        std::fs::create_dir_all(&step_dir)?;
        if let Some(a) = artifacts {
            a.view.to_rgb8().save_with_format(step_dir.join("view.png"), ImageFormat::Png)?;
            a.mask.to_gray().save_with_format(step_dir.join("mask.png"), ImageFormat::Png)?;
            a.result.to_rgb8().save_with_format(step_dir.join("result.png"), ImageFormat::Png)?;
        }
        self.pano.rgb.to_rgb8().save_with_format(step_dir.join("pano.png"), ImageFormat::Png)?;
        self.pano.fill_mask.to_gray().save_with_format(step_dir.join("pano_mask.png"), ImageFormat::Png)?;
        self.save_state()
    }

    fn save_state(&self) -> Result<(), PanoError> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        let png = |name: &str, img: &image::DynamicImage| -> Result<(), PanoError> {
            img.save_with_format(dir.join(name), ImageFormat::Png)?;
            Ok(())
        };
        png("pano.png", &self.pano.rgb.to_rgb8().into())?;
        png("pano_mask.png", &self.pano.fill_mask.to_gray().into())?;
        png("input.png", &self.input.to_rgb8().into())?;
        png("input_proj.png", &self.input_proj.to_rgb8().into())?;
        png("input_mask.png", &self.input_mask.to_gray().into())?;
        let anchor_path = dir.join("anchor_mask.png");
        match &self.anchor_mask {
            Some(m) => m.to_gray().save_with_format(&anchor_path, ImageFormat::Png)?,
            None if anchor_path.exists() => std::fs::remove_file(&anchor_path)?,
            None => {}
        }
        let plan = serde_json::to_vec_pretty(&self.state.plan).expect("plan serializes");
        std::fs::write(dir.join("plan.json"), plan)?;
        // state.json goes last so a complete checkpoint is always consistent
        let state = serde_json::to_vec_pretty(&self.state).expect("state serializes");
        let tmp = dir.join(".state.json.tmp");
        std::fs::write(&tmp, state)?;
        std::fs::rename(tmp, dir.join("state.json"))?;
        Ok(())
    }

    /// Restores a session from a checkpoint directory.
    pub fn resume(dir: &Path) -> Result<Self, PanoError> {
        let state: SessionState = serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)
            .map_err(|e| PanoError::Checkpoint(format!("bad state.json: {e}")))?;
        if state.version != STATE_VERSION {
            return Err(PanoError::Checkpoint(format!("unsupported state version {}", state.version)));
        }
        let rgb = |name: &str| -> Result<RgbImage, PanoError> {
            Ok(RgbImage::from_rgb8(&image::open(dir.join(name))?.to_rgb8()))
        };
        let gray = |name: &str| -> Result<Mask, PanoError> {
            Ok(Mask::from_gray(&image::open(dir.join(name))?.to_luma8()))
        };
        let pano = EquirectPanorama::from_parts(rgb("pano.png")?, gray("pano_mask.png")?)?;
        let anchor_path = dir.join("anchor_mask.png");
        let anchor_mask = if anchor_path.exists() { Some(gray("anchor_mask.png")?) } else { None };
        Ok(Self {
            input: rgb("input.png")?,
            input_proj: rgb("input_proj.png")?,
            input_mask: gray("input_mask.png")?,
            pano,
            anchor_mask,
            state,
            checkpoint_dir: Some(dir.to_path_buf()),
        })
    }
}

pub struct OutpaintOutput {
    pub pano: EquirectPanorama,
    pub input_mask: Mask,
    pub stats: OutpaintStats,
    pub coverage_log: Vec<f64>,
}

/// Runs a full outpainting pass without checkpoints.
pub fn run_progressive_outpaint(
    input: &RgbImage,
    fov_x: f64,
    prompts: &PromptSet,
    kind: HeuristicKind,
    oracle: &dyn Oracle,
    config: &OutpaintConfig,
) -> Result<OutpaintOutput, PanoError> {
    let mut session = OutpaintSession::new(input, fov_x, prompts.clone(), kind, config.clone())?;
    session.run(oracle)?;
    Ok(OutpaintOutput {
        stats: session.stats(),
        coverage_log: session.coverage_log().to_vec(),
        input_mask: session.input_mask.clone(),
        pano: session.pano,
    })
}
