//! Volume files and stimulus manifests.
//!
//! A volume is stored as `<stem>.raw` (little-endian `f32`, x fastest) next
//! to `<stem>.json` holding its geometry and provenance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stimulus::{NoiseSpec, SignalKind, NORMALIZATION_FLAG};
use crate::volume::{Kernel, Volume, VolumeGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub pitch_dva: f64,
    pub dtype: String,
    pub order: String,
    /// What the voxels hold, e.g. `stimulus` or `template:io`.
    pub content: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalization: Option<String>,
    /// Offset of the kernel origin, for templates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub center: Option<[usize; 3]>,
}

impl VolumeMeta {
    pub fn stimulus(geometry: &VolumeGeometry, noise: &NoiseSpec) -> Self {
        VolumeMeta {
            dims: geometry.dims,
            pitch_dva: geometry.pitch_dva,
            dtype: "f32le".into(),
            order: "x-fastest".into(),
            content: "stimulus".into(),
            noise: Some(*noise),
            seed: Some(noise.seed),
            normalization: Some(NORMALIZATION_FLAG.into()),
            center: None,
        }
    }

    pub fn template(pitch_dva: f64, kernel: &Kernel, label: &str) -> Self {
        VolumeMeta {
            dims: kernel.dims(),
            pitch_dva,
            dtype: "f32le".into(),
            order: "x-fastest".into(),
            content: format!("template:{label}"),
            noise: None,
            seed: None,
            normalization: None,
            center: Some(kernel.center()),
        }
    }
}

pub fn raw_path(stem: &Path) -> PathBuf {
    stem.with_extension("raw")
}

pub fn meta_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn write_raw(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_meta(path: &Path, meta: &VolumeMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.raw` and `<stem>.json`; returns both paths.
pub fn write_volume(stem: &Path, volume: &Volume, meta: &VolumeMeta) -> Result<[PathBuf; 2]> {
    if meta.dims != volume.dims() {
        return Err(Error::Shape(format!("metadata dims {:?} vs volume {:?}", meta.dims, volume.dims())));
    }
    let (raw, json) = (raw_path(stem), meta_path(stem));
    write_raw(&raw, volume.data())?;
    write_meta(&json, meta)?;
    Ok([raw, json])
}

pub fn write_kernel(stem: &Path, kernel: &Kernel, meta: &VolumeMeta) -> Result<[PathBuf; 2]> {
    if meta.dims != kernel.dims() {
        return Err(Error::Shape(format!("metadata dims {:?} vs kernel {:?}", meta.dims, kernel.dims())));
    }
    let (raw, json) = (raw_path(stem), meta_path(stem));
    write_raw(&raw, kernel.data())?;
    write_meta(&json, meta)?;
    Ok([raw, json])
}

/// Reads a volume written by [`write_volume`]. Values come back at `f32` precision.
pub fn read_volume(stem: &Path) -> Result<(Volume, VolumeMeta)> {
    let meta: VolumeMeta = serde_json::from_reader(BufReader::new(File::open(meta_path(stem))?))?;
    let mut bytes = Vec::new();
    File::open(raw_path(stem))?.read_to_end(&mut bytes)?;
    let n = meta.dims.iter().product::<usize>();
    if bytes.len() != 4 * n {
        return Err(Error::Shape(format!("{} bytes for {} voxels", bytes.len(), n)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let geom = VolumeGeometry::new(meta.dims, meta.pitch_dva)?;
    Ok((Volume::from_data(geom, data)?, meta))
}

/// One line of a stimulus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub trial: usize,
    pub noise_seed: u64,
    pub signal: SignalKind,
    pub contrast: f64,
    pub present: bool,
    pub location: [usize; 3],
    pub three_d: bool,
    pub file: String,
}

/// Writes any serializable records as JSON lines.
pub fn write_json_lines<T: Serialize, W: Write>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}", i + 1), e.to_string()))?);
    }
    Ok(out)
}
