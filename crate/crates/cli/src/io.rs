//! Image emission (16-bit PNG plus an exact tensor sidecar), run manifests
//! and checksums.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use pcrnn::archive::Archive;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SIDECAR_EXT: &str = "pcrn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub slice_id: String,
    pub volume_id: String,
    pub slice_index: usize,
    /// `ground_truth`, `zero_filled`, `cs`, `pcrnn`, or a PC-RNN stage
    /// (`pcrnn_x1`, ...).
    pub label: String,
    pub acceleration: u32,
    /// Value mapped to white in the PNG.
    pub png_scale: f64,
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_png16(path: &Path, pixels: &Array2<u16>) -> CliResult<()> {
    let png_err = |e: png::EncodingError| CliError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let (h, w) = pixels.dim();
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_png16(path: &Path) -> CliResult<Array2<u16>> {
    let png_err = |message: String| CliError::Png {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(png_err("expected 16-bit grayscale".into()));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let values: Vec<u16> = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| png_err(e.to_string()))
}

/// Maps `[0, scale]` linearly onto the 16-bit range, clamping outside it.
pub fn quantize(image: &Array2<f64>, scale: f64) -> Array2<u16> {
    let s = if scale > 0.0 { scale } else { 1.0 };
    image.mapv(|v| ((v / s).clamp(0.0, 1.0) * 65535.0).round() as u16)
}

/// Writes `<dir>/<slice_id>.png` and the exact `<dir>/<slice_id>.pcrn`.
pub fn save_image(dir: &Path, image: &Array2<f64>, meta: &ImageMeta) -> CliResult<PathBuf> {
    create_dir(dir)?;
    let png_path = dir.join(format!("{}.png", meta.slice_id));
    write_png16(&png_path, &quantize(image, meta.png_scale))?;
    let mut archive = Archive::new("image", serde_json::to_value(meta)?);
    archive.push_array("image", image)?;
    let sidecar = dir.join(format!("{}.{SIDECAR_EXT}", meta.slice_id));
    archive.save(&sidecar)?;
    Ok(sidecar)
}

pub fn load_image(path: &Path) -> CliResult<(Array2<f64>, ImageMeta)> {
    let archive = Archive::load(path)?;
    if archive.kind != "image" {
        return Err(CliError::Config(format!("{} is not an image sidecar", path.display())));
    }
    let meta: ImageMeta = serde_json::from_value(archive.metadata.clone())?;
    let image = archive
        .array("image")?
        .into_dimensionality()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((image, meta))
}

/// Every sidecar in `dir`, keyed by slice id.
pub fn load_image_dir(dir: &Path) -> CliResult<BTreeMap<String, (Array2<f64>, ImageMeta)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == SIDECAR_EXT) {
            let (image, meta) = load_image(&path)?;
            out.insert(meta.slice_id.clone(), (image, meta));
        }
    }
    if out.is_empty() {
        return Err(CliError::MissingImages(dir.display().to_string()));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub git_revision: Option<String>,
    /// File name (relative to the manifest) to SHA-256.
    pub files: BTreeMap<String, String>,
    pub summary: Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            git_revision: git_revision(),
            files: BTreeMap::new(),
            summary: Value::Null,
        }
    }

    pub fn record(&mut self, root: &Path, path: &Path) -> CliResult<()> {
        let name = path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned();
        self.files.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        write_file(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}
