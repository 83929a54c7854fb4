use std::f64::consts::PI;

use nalgebra::Vector3;
use panoworld::geometry::{render_view_from_pano, view_contains, Intrinsics};
use panoworld::oracle::mock::{FailingOracle, InpaintMode, MockOracle, RefineMode};
use panoworld::oracle::OracleClient;
use panoworld::pano::*;
use panoworld::raster::{Mask, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn textured_input(side: usize) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        let (fx, fy) = (x as f32 / side as f32, y as f32 / side as f32);
        [
            (128.0 + 100.0 * (fx * 9.0).sin()).round(),
            (128.0 + 90.0 * (fy * 7.0 + fx * 3.0).cos()).round(),
            (60.0 + 150.0 * fx * fy).round(),
        ]
    })
}

fn small_config() -> OutpaintConfig {
    OutpaintConfig {
        plan: PlanConfig {
            view_size: 192,
            ..PlanConfig::default()
        },
        pano_width: 512,
        feather_radius: 3.0,
        ..OutpaintConfig::default()
    }
}

fn prompts() -> PromptSet {
    PromptSet::new("a sunlit courtyard", "clear sky", "stone pavement")
}

fn uniform_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..1.0);
    let a: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * a.cos(), r * a.sin(), z)
}

#[test]
fn planned_frustums_cover_the_sphere() {
    for kind in [HeuristicKind::Anchored, HeuristicKind::Sequential] {
        let plan = plan_views(kind, &PlanConfig::default()).unwrap();
        let views: Vec<_> = plan
            .steps
            .iter()
            .filter(|s| s.action == StepAction::Inpaint)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100_000 {
            let d = uniform_direction(&mut rng);
            let hit = views
                .iter()
                .any(|s| view_contains(&s.intr, &(s.pose.rotation.transpose() * d)));
            assert!(hit, "{kind}: direction {d:?} not covered");
        }
    }
}

#[test]
fn pole_views_overlap_the_mid_band() {
    // lowest elevation reached by the top views along every azimuth
    let plan = plan_views(HeuristicKind::Anchored, &PlanConfig::default()).unwrap();
    let tops: Vec<_> = plan
        .steps
        .iter()
        .filter(|s| s.prompt_slot == Some(PromptSlot::Sky))
        .collect();
    let mid_half = 85f64.to_radians() / 2.0;
    for k in 0..360 {
        let az = (k as f64).to_radians();
        let covered = |elev: f64| {
            let d = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            tops.iter()
                .any(|s| view_contains(&s.intr, &(s.pose.rotation.transpose() * d)))
        };
        assert!(covered(PI / 2.0 - 1e-9));
        assert!(covered(mid_half - 0.05), "gap at azimuth {k}");
    }
}

#[test]
fn sequential_first_view_overlaps_input() {
    let plan = plan_views(HeuristicKind::Sequential, &PlanConfig::default()).unwrap();
    let first = &plan.steps[0];
    let probe = Intrinsics::square(first.intr.fov_x, 200).unwrap();
    let mut inside = 0;
    for y in 0..200 {
        for x in 0..200 {
            let d = first.pose.rotation * probe.pixel_ray(x, y);
            if view_contains(&plan.input_intr, &(plan.input_pose.rotation.transpose() * d)) {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 / 40_000.0 >= 0.25);
    // the second mid-band step too, since it only sees the input and step one
    let second = &plan.steps[1];
    assert!((second.pose.forward() - first.pose.forward()).norm() < 1.0);
}

#[test]
fn constant_input_and_constant_fill_give_constant_pano() {
    let input = RgbImage::new(128, 128, [40.0, 80.0, 120.0]);
    let oracle = MockOracle {
        inpaint: InpaintMode::ConstantFill { color: [40, 80, 120] },
        refine: RefineMode::Identity,
        ..MockOracle::default()
    };
    let out = run_progressive_outpaint(
        &input,
        60f64.to_radians(),
        &prompts(),
        HeuristicKind::Anchored,
        &oracle,
        &small_config(),
    )
    .unwrap();
    assert_eq!(out.pano.coverage(), 1.0);
    assert!(out.pano.rgb.data().iter().all(|p| *p == [40.0, 80.0, 120.0]));
}

fn run_mirror(kind: HeuristicKind, seed: u64) -> OutpaintOutput {
    let oracle = OracleClient::new(Arc::new(MockOracle::default()));
    let cfg = OutpaintConfig {
        seed,
        ..small_config()
    };
    run_progressive_outpaint(&textured_input(160), 60f64.to_radians(), &prompts(), kind, &oracle, &cfg).unwrap()
}

#[test]
fn mirror_fill_reaches_full_coverage_and_preserves_input() {
    let reference = {
        let input = textured_input(160);
        let plan = plan_views(HeuristicKind::Anchored, &PlanConfig {
            input_width: 160,
            input_height: 160,
            ..PlanConfig::default()
        })
        .unwrap();
        let mut pano = panoworld::geometry::EquirectPanorama::new(512, 256).unwrap();
        let all = Mask::new(160, 160, true);
        panoworld::geometry::project_view_into_pano(&input, &all, &plan.input_pose, &plan.input_intr, &mut pano, 0.0).unwrap();
        pano.rgb.quantize_in_place();
        pano
    };
    for kind in [HeuristicKind::Anchored, HeuristicKind::Sequential, HeuristicKind::AdHoc] {
        let out = run_mirror(kind, 3);
        assert_eq!(out.pano.coverage(), 1.0, "{kind}");
        assert_eq!(out.input_mask, reference.fill_mask);
        for (i, &m) in out.input_mask.data().iter().enumerate() {
            if m {
                assert_eq!(out.pano.rgb.data()[i], reference.rgb.data()[i]);
            }
        }
        let expected_calls = if kind == HeuristicKind::AdHoc { 1 } else { 16 };
        assert_eq!(out.stats.inpaint_calls, expected_calls);
    }
}

#[test]
fn coverage_is_monotone_except_at_backside_removal() {
    let out = run_mirror(HeuristicKind::Anchored, 1);
    let plan = plan_views(HeuristicKind::Anchored, &PlanConfig::default()).unwrap();
    let remove_pos = plan
        .steps
        .iter()
        .position(|s| s.action == StepAction::RemoveBackside)
        .unwrap();
    let mut drops = Vec::new();
    for (k, w) in out.coverage_log.windows(2).enumerate() {
        if w[1] < w[0] {
            drops.push(k);
        }
    }
    // the anchored plan keeps phase order, so the removal runs at its plan position
    assert_eq!(drops, vec![remove_pos]);
}

#[test]
fn anchored_backside_is_resynthesized() {
    let input = textured_input(160);
    let out = run_mirror(HeuristicKind::Anchored, 5);
    let intr = Intrinsics::from_fov_x(60f64.to_radians(), 160, 160).unwrap();
    let back = panoworld::geometry::CameraPose::look(PI, 0.0, 0.0);
    let (view, _) = render_view_from_pano(&out.pano, &back, &intr).unwrap();
    let diff: f64 = view
        .data()
        .iter()
        .zip(input.data())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum::<f64>())
        .sum::<f64>()
        / (160.0 * 160.0 * 3.0);
    assert!(diff > 5.0, "backside still looks like the input (mean abs diff {diff})");
}

#[test]
fn runs_are_deterministic() {
    let a = run_mirror(HeuristicKind::Anchored, 9);
    let b = run_mirror(HeuristicKind::Anchored, 9);
    assert_eq!(a.pano, b.pano);
}

#[test]
fn oracle_failure_preserves_state_and_resume_matches() {
    let reference = run_mirror(HeuristicKind::Sequential, 2);

    let dir = tempfile::tempdir().unwrap();
    let failing = FailingOracle::new(MockOracle::default(), vec![5]);
    let mut session = OutpaintSession::new(
        &textured_input(160),
        60f64.to_radians(),
        prompts(),
        HeuristicKind::Sequential,
        OutpaintConfig {
            seed: 2,
            ..small_config()
        },
    )
    .unwrap()
    .with_checkpoints(dir.path())
    .unwrap();
    let err = session.run(&failing).unwrap_err();
    assert!(matches!(err, PanoError::Oracle { .. }));
    let before = session.pano.clone();
    drop(session);

    // restart from disk with a healthy oracle
    let mut resumed = OutpaintSession::resume(dir.path()).unwrap();
    assert_eq!(resumed.pano, before);
    resumed.run(&MockOracle::default()).unwrap();
    assert!(resumed.is_finished());
    assert_eq!(resumed.pano, reference.pano);
    assert!(dir.path().join("step_000/pano.png").exists());
    assert!(dir.path().join("step_000/view.png").exists());
    assert!(dir.path().join("plan.json").exists());
}

#[test]
fn refine_blend_transition_band() {
    let (w, h) = (80, 4);
    let base = RgbImage::new(w, h, [0.0; 3]);
    let refined = RgbImage::new(w, h, [100.0; 3]);
    let mask = Mask::from_fn(w, h, |x, _| x >= w / 2);
    let out = refine_blend(&base, &refined, &mask, 4.0).unwrap();
    let row: Vec<f32> = (0..w).map(|x| out.get(x, 1)[0]).collect();
    assert!(row.windows(2).all(|p| p[1] >= p[0]));
    // step function blurred by a Gaussian: value at the edge is one half
    assert!((row[w / 2 - 1] + row[w / 2] - 100.0).abs() < 1.0);
    let band = row.iter().filter(|&&v| v > 0.0 && v < 100.0).count();
    // the truncated kernel spans ceil(3 sigma) on each side
    assert!((band as f64 - 24.0).abs() <= 2.0, "band {band}");
}
