//! Image, mask and manifest files.
//!
//! Intensities are stored as 8-bit samples and mapped to `[0, 1]` on load.
//! Masks are 8-bit grayscale with foreground 255; on load any sample of 128
//! or more counts as foreground.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use segplay_core::synth::Sample;
use segplay_core::{Image, Mask};

use crate::error::{Error, Result};

const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Pnm,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(Format::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(Format::Pnm),
        _ => Err(Error::Decode {
            path: path.to_path_buf(),
            message: "unsupported extension (expected .png, .pgm or .ppm)".into(),
        }),
    }
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_raw(path: &Path, bytes: &[u8], width: usize, height: usize, channels: usize) -> Result<()> {
    let format = format_of(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let color = if channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let (wu, hu) = (width as u32, height as u32);
    match format {
        Format::Png => PngEncoder::new(w).write_image(bytes, wu, hu, color),
        Format::Pnm => {
            let subtype = if channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(w)
                .with_subtype(subtype)
                .write_image(bytes, wu, hu, color)
        }
    }
    .map_err(|e| decode_err(path, e))
}

/// Reads an 8-bit grayscale or RGB image. Alpha is dropped; 16-bit inputs are
/// reduced to 8 bits.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image::new(w, h, channels, data)?)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    write_raw(path, &bytes, image.width(), image.height(), image.channels())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .to_luma8()
        .into_raw()
        .into_iter()
        .map(|b| b >= MASK_THRESHOLD)
        .collect();
    Ok(Mask::new(w, h, data)?)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_raw(path, &bytes, mask.width(), mask.height(), 1)
}

/// One line of a dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if entry.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", entry.label)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new(".")).join(p)
}

/// Whether ground-truth masks are read along with the images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Masks {
    /// Every entry must name a mask of the image's size.
    Require,
    /// Masks are never opened; samples carry empty placeholders.
    Ignore,
}

/// Loads every manifest entry as a [`Sample`].
pub fn load_dataset(manifest: &Path, masks: Masks) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let image = load_image(&resolve(manifest, &e.image_path))?;
        let mask = match masks {
            Masks::Ignore => Mask::empty(image.width(), image.height()),
            Masks::Require => {
                let rel = e.mask_path.as_deref().ok_or_else(|| Error::Manifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    message: "entry has no mask_path".into(),
                })?;
                let path = resolve(manifest, rel);
                let m = load_mask(&path)?;
                if m.dims() != image.dims() {
                    return Err(Error::Core(segplay_core::Error::DimensionMismatch {
                        expected: image.dims(),
                        actual: m.dims(),
                    }));
                }
                m
            }
        };
        out.push(Sample {
            image,
            mask,
            label: e.label,
        });
    }
    Ok(out)
}

/// Writes `samples` as `images/NNNNN.<ext>`, `masks/NNNNN.<ext>` and
/// `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample], ext: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/{i:05}.{ext}");
        let mask_path = format!("masks/{i:05}.{}", if ext == "ppm" { "pgm" } else { ext });
        save_image(&dir.join(&image_path), &s.image)?;
        save_mask(&dir.join(&mask_path), &s.mask)?;
        entries.push(ManifestEntry {
            image_path,
            label: s.label,
            mask_path: Some(mask_path),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
