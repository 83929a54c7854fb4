use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use panoworld::geometry::{render_view_from_pano, CameraPose, EquirectPanorama, Intrinsics};
use panoworld::lift::*;
use panoworld::oracle::mock::MockOracle;
use panoworld::oracle::{Oracle, OracleKind, OracleRequest};
use panoworld::pano::{panorama_views, PlanConfig};
use panoworld::raster::Grid;
use panoworld::scene::{Primitive, SceneObject, SyntheticScene, Texture};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere(radius: f64) -> SyntheticScene {
    SyntheticScene::new(vec![SceneObject {
        shape: Primitive::Sphere {
            center: [0.0; 3],
            radius,
        },
        texture: Texture::flat([100.0; 3]),
    }])
}

fn metric_view(scene: &SyntheticScene, pose: CameraPose, intr: Intrinsics) -> StitchView {
    let (rgb, z) = scene.render(&pose, &intr);
    StitchView {
        rgb,
        depth: DepthMap::from_values(z, ScaleClass::Metric),
        pose,
        intrinsics: intr,
    }
}

/// Bins no finer than the view pixels, so overlapping views share bins.
fn coarse() -> StitchOptions {
    StitchOptions {
        pano_width: 512,
        ..StitchOptions::default()
    }
}

/// Distance from each point to the scene surface along the ray from the origin.
fn range_errors(scene: &SyntheticScene, pc: &PointCloud) -> Vec<f64> {
    pc.positions
        .iter()
        .map(|p| {
            let r = p.norm();
            let hit = scene.intersect(&Vector3::zeros(), &(p / r)).unwrap();
            (r - hit.t) / hit.t
        })
        .collect()
}

#[test]
fn hidden_scale_is_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let d = Grid::from_fn(40, 30, |_, _| rng.random_range(0.5..20.0));
        let a = rng.random_range(0.5..2.0);
        let metric = DepthMap::from_values(d.clone(), ScaleClass::Metric);
        let rel = metric.scaled(a, ScaleClass::Relative);
        let s = align_scale_quantile(&rel, &metric, 0.2, 0.8, 0.3).unwrap();
        assert!((s * a - 1.0).abs() < 1e-9, "{s} * {a}");
    }
}

proptest! {
    #[test]
    fn scale_is_equivariant(seed in any::<u64>(), k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rel = DepthMap::from_values(Grid::from_fn(16, 16, |_, _| rng.random_range(0.1..10.0)), ScaleClass::Relative);
        let met = DepthMap::from_values(Grid::from_fn(16, 16, |_, _| rng.random_range(0.1..10.0)), ScaleClass::Metric);
        let s = align_scale_quantile(&rel, &met, 0.2, 0.8, 0.3).unwrap();
        let sk = align_scale_quantile(&rel.scaled(k, ScaleClass::Relative), &met, 0.2, 0.8, 0.3).unwrap();
        prop_assert!((sk * k - s).abs() <= 1e-12 * s);
    }

    #[test]
    fn clearance_is_a_similarity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pc = PointCloud::default();
        for _ in 0..rng.random_range(2..60) {
            pc.push(
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..2.0)),
                [0.0; 3], 0, 1.0,
            );
        }
        pc.push(Vector3::new(0.3, 0.1, -0.2), [0.0; 3], 0, 1.0);
        let before = pc.clone();
        let report = enforce_ground_clearance(&mut pc, 1.5);
        let ground: Vec<f64> = pc.positions.iter().filter(|p| p.z < 0.0).map(|p| -p.z).collect();
        prop_assert!(ground.iter().sum::<f64>() / ground.len() as f64 >= 1.5 - 1e-12);
        let d0 = (before.positions[0] - before.positions[1]).norm();
        let d1 = (pc.positions[0] - pc.positions[1]).norm();
        for i in 0..pc.len() {
            for j in (i + 1)..pc.len() {
                let r0 = (before.positions[i] - before.positions[j]).norm() / d0;
                let r1 = (pc.positions[i] - pc.positions[j]).norm() / d1;
                prop_assert!((r0 - r1).abs() <= 1e-12 * r0.max(1.0));
            }
        }
        prop_assert!(report.applied_scale >= 1.0);
    }
}

#[test]
fn rolled_view_points_coincide() {
    // a quarter roll maps the square pixel grid onto itself
    let scene = SyntheticScene::default_room();
    let intr = Intrinsics::square(70f64.to_radians(), 64).unwrap();
    let a = CameraPose::look(0.6, 0.1, 0.0);
    let b = CameraPose::look(0.6, 0.1, FRAC_PI_2);
    let va = metric_view(&scene, a, intr);
    let vb = metric_view(&scene, b, intr);
    let pa = unproject_view(&va.rgb, &va.depth, &a, &intr, 0.3, 0);
    let pb = unproject_view(&vb.rgb, &vb.depth, &b, &intr, 0.3, 1);
    assert_eq!(pa.len(), 64 * 64);
    let mut matched = 0;
    for p in &pb.positions {
        let (px, py) = intr.project(&a.world_to_camera(p)).unwrap();
        let (x, y) = ((px - 0.5).round(), (py - 0.5).round());
        assert!((px - 0.5 - x).abs() < 1e-6 && (py - 0.5 - y).abs() < 1e-6);
        let q = pa.positions[y as usize * 64 + x as usize];
        assert!((p - q).norm() < 1e-3, "{p:?} vs {q:?}");
        matched += 1;
    }
    assert_eq!(matched, 64 * 64);
}

#[test]
fn stitching_recovers_per_view_scale() {
    let scene = sphere(3.0);
    let intr = Intrinsics::square(60f64.to_radians(), 96).unwrap();
    let first = metric_view(&scene, CameraPose::look(0.0, 0.0, 0.0), intr);
    let mut second = metric_view(&scene, CameraPose::look(40f64.to_radians(), 0.0, 0.0), intr);
    second.depth = second.depth.scaled(0.5, ScaleClass::Relative);
    let out = stitch_depth_views(&[first, second], 1.0, &coarse()).unwrap();
    assert!((out.alignment[1].0 - 2.0).abs() < 1e-6, "{:?}", out.alignment);
    assert!(range_errors(&scene, &out.cloud).iter().all(|e| e.abs() < 1e-9));
}

#[test]
fn single_view_stitch_is_unprojection() {
    let scene = SyntheticScene::default_room();
    let intr = Intrinsics::square(60f64.to_radians(), 96).unwrap();
    let v = metric_view(&scene, CameraPose::look(1.0, -0.2, 0.0), intr);
    let direct = unproject_view(&v.rgb, &v.depth, &v.pose, &intr, 0.3, 0);
    let out = stitch_depth_views(std::slice::from_ref(&v), 1.0, &StitchOptions::default()).unwrap();
    assert_eq!(out.cloud, direct);
}

#[test]
fn eight_view_room_matches_ground_truth() {
    let scene = SyntheticScene::default_room();
    let intr = Intrinsics::square(85f64.to_radians(), 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut views = Vec::new();
    for k in 0..8 {
        let mut v = metric_view(&scene, CameraPose::look(k as f64 * 45f64.to_radians(), 0.0, 0.0), intr);
        if k > 0 {
            v.depth = v.depth.scaled(rng.random_range(0.5..2.0), ScaleClass::Relative);
        }
        views.push(v);
    }
    let out = stitch_depth_views(&views, 1.0, &coarse()).unwrap();
    let mut sq = 0.0;
    for p in &out.cloud.positions {
        let hit = scene.intersect(&Vector3::zeros(), &p.normalize()).unwrap();
        sq += (p.norm() - hit.t).powi(2);
    }
    let rms = (sq / out.cloud.len() as f64).sqrt();
    assert!(rms < 0.01 * 8.0, "rms {rms}");
}

/// Lifts the mock oracle's depth for the panorama views of a rendered room.
fn lift_room(noise: f64) -> (SyntheticScene, StitchResult) {
    let scene = SyntheticScene::default_room();
    let pano: EquirectPanorama = scene.render_equirect(1024, &Vector3::zeros());
    let oracle = MockOracle {
        scene: Some(scene.clone()),
        depth_noise: noise,
        ..MockOracle::default()
    };
    let cams = panorama_views(&PlanConfig {
        view_size: 256,
        ..PlanConfig::default()
    })
    .unwrap();
    let ask = |kind, k: usize, rgb: &panoworld::raster::RgbImage| {
        oracle
            .call(&OracleRequest::depth(kind, rgb.to_rgb8(), 100 + k as u64).with_camera(cams[k]))
            .unwrap()
            .depth
            .unwrap()
    };
    let mut views = Vec::new();
    let mut anchor = 1.0;
    for (k, cam) in cams.iter().enumerate() {
        let (rgb, _) = render_view_from_pano(&pano, &cam.pose, &cam.intrinsics).unwrap();
        let rel = ask(OracleKind::DepthRel, k, &rgb);
        if k == 0 {
            let metric = ask(OracleKind::DepthMetric, k, &rgb);
            anchor = align_scale_quantile(&rel, &metric, 0.2, 0.8, 0.3).unwrap();
        }
        views.push(StitchView {
            rgb,
            depth: rel,
            pose: cam.pose,
            intrinsics: cam.intrinsics,
        });
    }
    (scene.clone(), stitch_depth_views(&views, anchor, &coarse()).unwrap())
}

#[test]
fn lifted_room_reproduces_geometry() {
    let (scene, out) = lift_room(0.0);
    let errs = range_errors(&scene, &out.cloud);
    let good = errs.iter().filter(|e| e.abs() < 0.02).count();
    assert!(good as f64 >= 0.95 * errs.len() as f64, "{good}/{}", errs.len());
}

#[test]
fn stitch_seams_are_within_the_noise_floor() {
    let (scene, out) = lift_room(0.01);
    let errs = range_errors(&scene, &out.cloud);
    // relative error per panorama bin, tagged with its source view
    let bins = EquirectPanorama::new(512, 256).unwrap();
    let mut grid: HashMap<usize, (f64, u16)> = HashMap::new();
    for (i, p) in out.cloud.positions.iter().enumerate() {
        grid.insert(bins.direction_to_index(p), (errs[i], out.cloud.source_view[i]));
    }
    let (mut seam, mut intra) = (Vec::new(), Vec::new());
    for (&i, &(e, v)) in &grid {
        if i % 512 == 511 {
            continue;
        }
        if let Some(&(e2, v2)) = grid.get(&(i + 1)) {
            let d = (e - e2).abs();
            if v == v2 { intra.push(d) } else { seam.push(d) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!seam.is_empty() && !intra.is_empty());
    assert!(mean(&seam) < 2.0 * mean(&intra), "seam {} intra {}", mean(&seam), mean(&intra));
}
