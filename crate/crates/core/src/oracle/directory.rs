//! Job-folder exchange with an external oracle process.
//!
//! The client creates `<root>/<job_id>/` containing `request.json`,
//! `rgb.png` and optionally `mask.png`. The folder appears atomically: it is
//! assembled under a dot-prefixed name and renamed into place. The oracle
//! answers by writing `out.png` (or `out.pfm` plus `confidence.png`) and
//! finally `response.json`, whose presence marks the reply complete. The
//! client polls for it, reads the reply and removes the folder.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;

use super::wire::{self, file_name_for, Part};
use super::{Oracle, OracleError, OracleRequest, OracleResponse};

const REQUEST_MANIFEST: &str = "request.json";
const RESPONSE_MANIFEST: &str = "response.json";
const IMAGE_OUT: &str = "out.png";

fn io_err(e: std::io::Error) -> OracleError {
    OracleError::Transport(e.to_string())
}

fn request_file(part: &str) -> String {
    if part == "manifest" {
        REQUEST_MANIFEST.into()
    } else {
        file_name_for(part)
    }
}

fn response_file(part: &str) -> String {
    match part {
        "manifest" => RESPONSE_MANIFEST.into(),
        "rgb" => IMAGE_OUT.into(),
        other => file_name_for(other),
    }
}

fn write_atomic(dir: &Path, name: &str, data: &[u8]) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, data)?;
    fs::rename(tmp, dir.join(name))
}

fn read_parts(dir: &Path, names: &[&str], file: fn(&str) -> String) -> Result<Vec<Part>, OracleError> {
    let mut parts = Vec::new();
    for name in names {
        let path = dir.join(file(name));
        if path.exists() {
            let data = fs::read(&path).map_err(io_err)?;
            parts.push(Part::new(name, "application/octet-stream", Bytes::from(data)));
        }
    }
    Ok(parts)
}

#[derive(Clone, Debug)]
pub struct DirectoryOracle {
    pub root: PathBuf,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl DirectoryOracle {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            timeout: Duration::from_secs(600),
            poll_interval: Duration::from_millis(20),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Oracle for DirectoryOracle {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        let job_id = uuid::Uuid::new_v4().to_string();
        fs::create_dir_all(&self.root).map_err(io_err)?;
        let staging = self.root.join(format!(".{job_id}"));
        let job_dir = self.root.join(&job_id);
        fs::create_dir(&staging).map_err(io_err)?;
        for part in wire::encode_request(req, &job_id) {
            fs::write(staging.join(request_file(&part.name)), &part.data).map_err(io_err)?;
        }
        fs::rename(&staging, &job_dir).map_err(io_err)?;

        let start = Instant::now();
        let manifest = job_dir.join(RESPONSE_MANIFEST);
        while !manifest.exists() {
            if start.elapsed() >= self.timeout {
                let _ = fs::remove_dir_all(&job_dir);
                return Err(OracleError::Timeout(self.timeout));
            }
            std::thread::sleep(self.poll_interval);
        }
        let parts = read_parts(&job_dir, &["manifest", "rgb", "depth", "confidence"], response_file);
        let _ = fs::remove_dir_all(&job_dir);
        wire::decode_response(&parts?, &job_id, req.kind)
    }
}

/// Answers every pending job under `root` once; returns how many were handled.
pub fn process_pending(root: &Path, oracle: &dyn Oracle) -> Result<usize, OracleError> {
    let mut jobs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
                && p.join(REQUEST_MANIFEST).exists()
                && !p.join(RESPONSE_MANIFEST).exists()
        })
        .collect();
    jobs.sort();
    for dir in &jobs {
        let parts = read_parts(dir, &["manifest", "rgb", "mask"], request_file)?;
        let (job_id, result) = match wire::decode_request(&parts) {
            Ok((id, req)) => {
                let r = req.validate().and_then(|_| oracle.call(&req));
                (id, r)
            }
            Err(e) => {
                let id = dir.file_name().unwrap().to_string_lossy().into_owned();
                (id, Err(e))
            }
        };
        let reply = wire::encode_response(&job_id, &result);
        // payload first, manifest last: its presence signals completion
        for part in reply.iter().filter(|p| p.name != "manifest") {
            write_atomic(dir, &response_file(&part.name), &part.data).map_err(io_err)?;
        }
        let manifest = reply.iter().find(|p| p.name == "manifest").expect("manifest part");
        write_atomic(dir, RESPONSE_MANIFEST, &manifest.data).map_err(io_err)?;
    }
    Ok(jobs.len())
}

/// Serves jobs under `root` until `stop` is set.
pub fn serve_directory(
    root: &Path,
    oracle: &dyn Oracle,
    stop: &AtomicBool,
    poll_interval: Duration,
) -> Result<(), OracleError> {
    fs::create_dir_all(root).map_err(io_err)?;
    while !stop.load(Ordering::SeqCst) {
        if process_pending(root, oracle)? == 0 {
            std::thread::sleep(poll_interval);
        }
    }
    Ok(())
}
