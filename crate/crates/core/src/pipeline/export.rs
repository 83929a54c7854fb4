//! Reconstruction export: images, usage masks, poses, initial points and
//! trainer settings.
//!
//! Layout of an export directory:
//!
//! ```text
//! images/pano_00.png ... images/grid_195.png
//! masks/<same names>      255 = pixel may supervise the trainer
//! transforms.json         intrinsics and camera-to-world matrices
//! points.ply              lifted point cloud
//! gs_settings.json        trainer settings plus the paths above
//! config.json             pipeline config that produced the export
//! ```
//!
//! `transform_matrix` follows the OpenGL camera convention (x right, y up,
//! z backward) used by common splatting trainers; intrinsics are in pixels
//! with the principal point at the image center.

use std::path::Path;

use image::ImageFormat;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::config::GsSettings;
use crate::geometry::{view_contains, CameraView};
use crate::raster::{Mask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    /// Rendered from the finished panorama.
    Panorama,
    /// Point-cloud render inpainted at a grid pose.
    Grid,
}

/// One exported training view.
#[derive(Clone, Debug)]
pub struct ExportView {
    pub name: String,
    pub source: ViewSource,
    pub rgb: RgbImage,
    pub usable: Mask,
    pub camera: CameraView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    pub mask_path: String,
    pub source: ViewSource,
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub camera_model: String,
    pub ply_file_path: String,
    pub frames: Vec<Frame>,
}

/// `gs_settings.json`: the trainer settings plus where to find the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsExport {
    #[serde(flatten)]
    pub settings: GsSettings,
    pub images: String,
    pub masks: String,
    pub poses: String,
    pub points: String,
}

pub fn export_gs_config(settings: &GsSettings) -> GsExport {
    GsExport {
        settings: settings.clone(),
        images: "images".into(),
        masks: "masks".into(),
        poses: "transforms.json".into(),
        points: "points.ply".into(),
    }
}

/// Camera-to-world matrix with OpenGL camera axes.
pub fn opengl_transform(view: &CameraView) -> [[f64; 4]; 4] {
    let r = view.pose.rotation * Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let t = view.pose.translation;
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn frame_for(view: &ExportView) -> Frame {
    let intr = &view.camera.intrinsics;
    Frame {
        file_path: format!("images/{}.png", view.name),
        mask_path: format!("masks/{}.png", view.name),
        source: view.source,
        fl_x: intr.focal_x(),
        fl_y: intr.focal_y(),
        cx: intr.width as f64 / 2.0,
        cy: intr.height as f64 / 2.0,
        w: intr.width,
        h: intr.height,
        transform_matrix: opengl_transform(&view.camera),
    }
}

/// Usage mask of a panorama view: everything except the rays covered by the
/// temporary backside anchor, if one was used.
pub fn panorama_usage_mask(view: &CameraView, anchor: Option<&CameraView>) -> Mask {
    let intr = &view.intrinsics;
    Mask::from_fn(intr.width, intr.height, |x, y| match anchor {
        None => true,
        Some(a) => {
            let d = view.pose.rotation * intr.pixel_ray(x, y);
            !view_contains(&a.intrinsics, &(a.pose.rotation.transpose() * d))
        }
    })
}

/// Writes the whole export into `dir`.
pub fn write_export(
    dir: &Path,
    views: &[ExportView],
    ply: &[u8],
    gs: &GsSettings,
    config_json: &str,
) -> std::io::Result<()> {
    let io = |e: image::ImageError| std::io::Error::other(e.to_string());
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut frames = Vec::with_capacity(views.len());
    for v in views {
        assert!(v.rgb.same_dims(&v.usable), "{}: mask size differs", v.name);
        v.rgb
            .to_rgb8()
            .save_with_format(dir.join("images").join(format!("{}.png", v.name)), ImageFormat::Png)
            .map_err(io)?;
        v.usable
            .to_gray()
            .save_with_format(dir.join("masks").join(format!("{}.png", v.name)), ImageFormat::Png)
            .map_err(io)?;
        frames.push(frame_for(v));
    }
    let transforms = Transforms {
        camera_model: "OPENCV".into(),
        ply_file_path: "points.ply".into(),
        frames,
    };
    std::fs::write(dir.join("transforms.json"), serde_json::to_vec_pretty(&transforms)?)?;
    std::fs::write(dir.join("points.ply"), ply)?;
    std::fs::write(dir.join("gs_settings.json"), serde_json::to_vec_pretty(&export_gs_config(gs))?)?;
    std::fs::write(dir.join("config.json"), config_json)?;
    Ok(())
}
