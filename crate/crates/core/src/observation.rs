//! On-disk scene observation container.
//!
//! An observation is a JSON manifest next to its payload files:
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "width": 640, "height": 480,
//!   "camera": { "fx", "fy", "cx", "cy", "rotation": [[..];3], "translation": [..] },
//!   "depth": "depth.f32",
//!   "masks": ["mask_000.pgm", "mask_001.png"]
//! }
//! ```
//!
//! * `depth` is a headerless raster of `width * height` IEEE-754 `f32`
//!   values, little-endian, row-major (row 0 first). Invalid pixels are `0`.
//! * each mask is a binary PGM (`P5`, maxval 255) or an 8-bit PNG of the
//!   same size; any non-zero sample is foreground. Writers emit 0/255 PGM.
//!
//! Paths are resolved relative to the manifest's directory.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, CameraModel, DepthImage, GeometryError};
use crate::mask::MaskSet;

pub const OBSERVATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationManifest {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub depth: String,
    pub masks: Vec<String>,
}

/// Masks, depth and camera for one RGB-D frame.
#[derive(Debug, Clone)]
pub struct Observation {
    pub masks: MaskSet,
    pub depth: DepthImage,
    pub camera: CameraModel,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ObservationError + '_ {
    move |source| ObservationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> ObservationError {
    ObservationError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Observation {
    pub fn load(manifest_path: &Path) -> Result<Self, ObservationError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: ObservationManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != OBSERVATION_SCHEMA_VERSION {
            return Err(ObservationError::SchemaVersion(manifest.schema_version));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let depth_path = base.join(&manifest.depth);
        let depth = read_depth(&depth_path, manifest.width, manifest.height)?;
        let masks = manifest
            .masks
            .iter()
            .map(|m| {
                let p = base.join(m);
                let mask = read_mask(&p)?;
                if mask.width() != manifest.width || mask.height() != manifest.height {
                    return Err(format_err(&p, "mask size differs from manifest"));
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            masks: MaskSet::with_size(manifest.width, manifest.height, masks)
                .map_err(|e| format_err(manifest_path, e.to_string()))?,
            depth,
            camera: manifest.camera,
        })
    }

    /// Writes `<stem>.json`, `<stem>_depth.f32` and `<stem>_mask_NNN.pgm` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, ObservationError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let depth_name = format!("{stem}_depth.f32");
        write_depth(&dir.join(&depth_name), &self.depth)?;
        let mut mask_names = Vec::with_capacity(self.masks.len());
        for (i, m) in self.masks.masks().iter().enumerate() {
            let name = format!("{stem}_mask_{i:03}.pgm");
            write_pgm(&dir.join(&name), m)?;
            mask_names.push(name);
        }
        let manifest = ObservationManifest {
            schema_version: OBSERVATION_SCHEMA_VERSION,
            width: self.depth.width(),
            height: self.depth.height(),
            camera: self.camera,
            depth: depth_name,
            masks: mask_names,
        };
        let path = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, body + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}

pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<DepthImage, ObservationError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != width * height * 4 {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", width * height * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthImage::new(width, height, values)?)
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<(), ObservationError> {
    let mut bytes = Vec::with_capacity(depth.raw().len() * 4);
    for v in depth.raw() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a PGM (`P5`) or PNG mask, chosen by magic bytes.
pub fn read_mask(path: &Path) -> Result<BinaryMask, ObservationError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes).map_err(|r| format_err(path, r))
    } else {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| format_err(path, e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(BinaryMask::new(w as usize, h as usize, img.into_raw())?)
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<BinaryMask, String> {
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional '#' comments, followed by exactly one whitespace byte.
    let mut fields = Vec::with_capacity(3);
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err("truncated PGM header".into());
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(|e| e.to_string())?;
        fields.push(text.parse::<usize>().map_err(|e| e.to_string())?);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    i += 1;
    let data = bytes.get(i..i + w * h).ok_or("truncated PGM raster")?;
    BinaryMask::new(w, h, data.to_vec()).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<(), ObservationError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let header = format!("P5\n{} {}\n255\n", mask.width(), mask.height());
    let body: Vec<u8> = mask.bits().iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(&body))
        .map_err(io_err(path))
}

/// Writes an 8-bit grayscale image as PGM.
pub fn write_gray_pgm(
    path: &Path,
    width: usize,
    height: usize,
    pixels: &[u8],
) -> Result<(), ObservationError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let header = format!("P5\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(pixels))
        .map_err(io_err(path))
}
