//! Byte-level encoding shared by the directory and HTTP transports.
//!
//! A request is three named parts: `manifest` (JSON, [`RequestManifest`]),
//! `rgb` (PNG, 8-bit RGB) and, for inpaint/refine, `mask` (PNG, 8-bit gray,
//! 255 = generate). A response is `manifest` ([`ResponseManifest`]) plus
//! either `rgb` (PNG) or `depth` (PFM) with `confidence` (PNG, value x 255).
//! Error responses carry only the manifest.

use std::io::Cursor;

use bytes::Bytes;
use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{OracleError, OracleKind, OracleRequest, OracleResponse};
use crate::formats::{decode_pfm, encode_pfm};
use crate::geometry::CameraView;
use crate::lift::{DepthMap, ScaleClass};
use crate::raster::ScalarMap;

pub const WIRE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestManifest {
    pub version: u32,
    pub job_id: String,
    pub kind: OracleKind,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub strength: Option<f32>,
    pub seed: u64,
    #[serde(default)]
    pub camera: Option<CameraView>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseManifest {
    pub version: u32,
    pub job_id: String,
    pub status: Status,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
}

/// One named payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub name: String,
    pub content_type: String,
    pub data: Bytes,
}

impl Part {
    pub fn new(name: &str, content_type: &str, data: impl Into<Bytes>) -> Self {
        Self {
            name: name.to_string(),
            content_type: content_type.to_string(),
            data: data.into(),
        }
    }

    /// File name used by the directory protocol and multipart disposition.
    pub fn file_name(&self) -> String {
        file_name_for(&self.name)
    }
}

pub fn file_name_for(part: &str) -> String {
    match part {
        "manifest" => "manifest.json".into(),
        "rgb" => "rgb.png".into(),
        "mask" => "mask.png".into(),
        "depth" => "out.pfm".into(),
        "confidence" => "confidence.png".into(),
        other => other.into(),
    }
}

fn find<'a>(parts: &'a [Part], name: &str) -> Option<&'a Part> {
    parts.iter().find(|p| p.name == name)
}

fn malformed(m: impl Into<String>) -> OracleError {
    OracleError::Malformed(m.into())
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encode to memory");
    out.into_inner()
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encode to memory");
    out.into_inner()
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage, OracleError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| malformed(format!("bad png: {e}")))
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage, OracleError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|i| i.to_luma8())
        .map_err(|e| malformed(format!("bad png: {e}")))
}

pub fn encode_request(req: &OracleRequest, job_id: &str) -> Vec<Part> {
    let manifest = RequestManifest {
        version: WIRE_VERSION,
        job_id: job_id.to_string(),
        kind: req.kind,
        width: req.rgb.width(),
        height: req.rgb.height(),
        prompt: req.prompt.clone(),
        strength: req.strength,
        seed: req.seed,
        camera: req.camera,
    };
    let mut parts = vec![
        Part::new(
            "manifest",
            "application/json",
            serde_json::to_vec(&manifest).expect("manifest serializes"),
        ),
        Part::new("rgb", "image/png", encode_png_rgb(&req.rgb)),
    ];
    if let Some(mask) = &req.mask {
        parts.push(Part::new("mask", "image/png", encode_png_gray(mask)));
    }
    parts
}

/// Returns the job id and the request.
pub fn decode_request(parts: &[Part]) -> Result<(String, OracleRequest), OracleError> {
    let manifest: RequestManifest = serde_json::from_slice(
        &find(parts, "manifest").ok_or_else(|| malformed("missing manifest"))?.data,
    )
    .map_err(|e| malformed(format!("bad request manifest: {e}")))?;
    if manifest.version != WIRE_VERSION {
        return Err(malformed(format!("unsupported version {}", manifest.version)));
    }
    let rgb = decode_png_rgb(&find(parts, "rgb").ok_or_else(|| malformed("missing rgb"))?.data)?;
    if rgb.dimensions() != (manifest.width, manifest.height) {
        return Err(OracleError::SizeMismatch {
            expected: (manifest.width, manifest.height),
            got: rgb.dimensions(),
        });
    }
    let mask = find(parts, "mask")
        .map(|p| decode_png_gray(&p.data))
        .transpose()?;
    let req = OracleRequest {
        kind: manifest.kind,
        rgb,
        mask,
        prompt: manifest.prompt,
        strength: manifest.strength,
        seed: manifest.seed,
        camera: manifest.camera,
    };
    Ok((manifest.job_id, req))
}

pub fn encode_response(job_id: &str, result: &Result<OracleResponse, OracleError>) -> Vec<Part> {
    let (status, message, dims) = match result {
        Ok(r) => {
            let dims = match (&r.rgb, &r.depth) {
                (Some(img), _) => Some(img.dimensions()),
                (None, Some(d)) => Some((d.dims().0 as u32, d.dims().1 as u32)),
                _ => None,
            };
            (Status::Ok, None, dims)
        }
        Err(e) => (Status::Error, Some(e.to_string()), None),
    };
    let manifest = ResponseManifest {
        version: WIRE_VERSION,
        job_id: job_id.to_string(),
        status,
        message,
        width: dims.map(|d| d.0),
        height: dims.map(|d| d.1),
    };
    let mut parts = vec![Part::new(
        "manifest",
        "application/json",
        serde_json::to_vec(&manifest).expect("manifest serializes"),
    )];
    if let Ok(r) = result {
        if let Some(img) = &r.rgb {
            parts.push(Part::new("rgb", "image/png", encode_png_rgb(img)));
        }
        if let Some(d) = &r.depth {
            parts.push(Part::new("depth", "image/x-portable-floatmap", encode_pfm(&d.values)));
            parts.push(Part::new("confidence", "image/png", encode_png_gray(&d.confidence.to_gray())));
        }
    }
    parts
}

/// Decodes a response; the request supplies the expected kind and job id.
pub fn decode_response(
    parts: &[Part],
    job_id: &str,
    kind: OracleKind,
) -> Result<OracleResponse, OracleError> {
    let manifest: ResponseManifest = serde_json::from_slice(
        &find(parts, "manifest").ok_or_else(|| malformed("missing manifest"))?.data,
    )
    .map_err(|e| malformed(format!("bad response manifest: {e}")))?;
    if manifest.job_id != job_id {
        return Err(malformed(format!(
            "response for job {} delivered to job {job_id}",
            manifest.job_id
        )));
    }
    if manifest.status == Status::Error {
        return Err(OracleError::Remote(
            manifest.message.unwrap_or_else(|| "unspecified".into()),
        ));
    }
    if kind.is_depth() {
        let depth = find(parts, "depth").ok_or_else(|| malformed("missing depth part"))?;
        let values = decode_pfm(&depth.data).map_err(|e| malformed(e.to_string()))?;
        let confidence = match find(parts, "confidence") {
            Some(p) => ScalarMap::from_gray(&decode_png_gray(&p.data)?),
            None => DepthMap::from_values(values.clone(), ScaleClass::Relative).confidence,
        };
        if confidence.dims() != values.dims() {
            return Err(malformed("confidence and depth sizes differ"));
        }
        let scale_class = if kind == OracleKind::DepthMetric {
            ScaleClass::Metric
        } else {
            ScaleClass::Relative
        };
        Ok(OracleResponse::depth(DepthMap {
            values,
            confidence,
            scale_class,
        }))
    } else {
        let rgb = find(parts, "rgb").ok_or_else(|| malformed("missing rgb part"))?;
        Ok(OracleResponse::image(decode_png_rgb(&rgb.data)?))
    }
}

/// Rounds a response to exactly what survives the wire: depth as `f32`,
/// confidence as `k / 255`.
pub fn canonicalize(mut resp: OracleResponse) -> OracleResponse {
    if let Some(d) = &mut resp.depth {
        for v in d.values.data_mut() {
            *v = *v as f32 as f64;
        }
        d.confidence = ScalarMap::from_gray(&d.confidence.to_gray());
    }
    resp
}

/// Serializes parts as a `multipart/form-data` body.
pub fn encode_multipart(parts: &[Part], boundary: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        out.extend_from_slice(
            format!(
                "Content-Disposition: form-data; name=\"{}\"; filename=\"{}\"\r\nContent-Type: {}\r\n\r\n",
                p.name,
                p.file_name(),
                p.content_type
            )
            .as_bytes(),
        );
        out.extend_from_slice(&p.data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

/// Parses a `multipart/form-data` body given its `Content-Type` header.
pub fn decode_multipart(content_type: &str, body: Bytes) -> Result<Vec<Part>, OracleError> {
    let boundary = multer::parse_boundary(content_type)
        .map_err(|e| malformed(format!("bad multipart content type: {e}")))?;
    let stream = futures::stream::once(async move { Ok::<Bytes, std::convert::Infallible>(body) });
    let mut multipart = multer::Multipart::new(stream, boundary);
    futures::executor::block_on(async move {
        let mut parts = Vec::new();
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| malformed(format!("bad multipart body: {e}")))?
        {
            let name = field.name().unwrap_or_default().to_string();
            let content_type = field
                .content_type()
                .map(|m| m.to_string())
                .unwrap_or_else(|| "application/octet-stream".into());
            let data = field
                .bytes()
                .await
                .map_err(|e| malformed(format!("bad multipart field: {e}")))?;
            parts.push(Part {
                name,
                content_type,
                data,
            });
        }
        Ok(parts)
    })
}
