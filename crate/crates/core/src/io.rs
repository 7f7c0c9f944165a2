//! On-disk containers and frame export.
//!
//! A container is one line of JSON (the header) followed by a raw `f32`
//! payload. The header names the kind, the payload shape and axis order,
//! the byte order, a SHA-256 of the payload, the frame times and either the
//! sensor geometry (sinograms) or the image grid (image sequences).
//!
//! Payload order is frame-major: sinograms are `[frame][sensor][sample]`,
//! image sequences are `[frame][row][column]`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::Sinogram;
use crate::geometry::{ImageGrid, ImageSequence, SensorGeometry};
use crate::inr::hex_string;

pub const CONTAINER_FORMAT: &str = "dynpact-container";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Sinogram,
    ImageSequence,
}

impl ContainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContainerKind::Sinogram => "sinogram",
            ContainerKind::ImageSequence => "image_sequence",
        }
    }

    fn axes(self) -> Vec<String> {
        let names: &[&str] = match self {
            ContainerKind::Sinogram => &["frame", "sensor", "sample"],
            ContainerKind::ImageSequence => &["frame", "row", "column"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format: String,
    pub version: u32,
    pub kind: ContainerKind,
    /// Payload shape, outermost axis first.
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub dtype: String,
    pub endianness: Endianness,
    pub payload_bytes: u64,
    /// Hex SHA-256 of the payload bytes as stored.
    pub sha256: String,
    pub frame_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<SensorGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ImageGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Sinogram(Sinogram),
    ImageSequence(ImageSequence),
}

impl Container {
    pub fn kind(&self) -> ContainerKind {
        match self {
            Container::Sinogram(_) => ContainerKind::Sinogram,
            Container::ImageSequence(_) => ContainerKind::ImageSequence,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn encode_payload(values: impl Iterator<Item = f64>, capacity: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(capacity * 4);
    for v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidParameter(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn write_raw(path: &Path, header: &ContainerHeader, payload: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<ContainerHeader> {
    let (s, f, t) = sino.data.dim();
    let permuted = sino.data.view().permuted_axes([2, 0, 1]);
    let payload = encode_payload(permuted.iter().copied(), s * f * t)?;
    let header = ContainerHeader {
        format: CONTAINER_FORMAT.into(),
        version: CONTAINER_VERSION,
        kind: ContainerKind::Sinogram,
        shape: vec![t, s, f],
        axes: ContainerKind::Sinogram.axes(),
        dtype: "f32".into(),
        endianness: Endianness::Little,
        payload_bytes: payload.len() as u64,
        sha256: sha256_hex(&payload),
        frame_times: sino.frame_times.clone(),
        geometry: Some(sino.geometry.clone()),
        grid: None,
    };
    write_raw(path, &header, &payload)?;
    Ok(header)
}

pub fn write_images(path: &Path, seq: &ImageSequence) -> Result<ContainerHeader> {
    let (n, _, t) = seq.data.dim();
    let permuted = seq.data.view().permuted_axes([2, 0, 1]);
    let payload = encode_payload(permuted.iter().copied(), n * n * t)?;
    let header = ContainerHeader {
        format: CONTAINER_FORMAT.into(),
        version: CONTAINER_VERSION,
        kind: ContainerKind::ImageSequence,
        shape: vec![t, n, n],
        axes: ContainerKind::ImageSequence.axes(),
        dtype: "f32".into(),
        endianness: Endianness::Little,
        payload_bytes: payload.len() as u64,
        sha256: sha256_hex(&payload),
        frame_times: seq.frame_times.clone(),
        geometry: None,
        grid: Some(seq.grid.clone()),
    };
    write_raw(path, &header, &payload)?;
    Ok(header)
}

pub fn write_container(path: &Path, container: &Container) -> Result<ContainerHeader> {
    match container {
        Container::Sinogram(s) => write_sinogram(path, s),
        Container::ImageSequence(s) => write_images(path, s),
    }
}

/// Reads and validates the header and payload without interpreting the
/// values. Returns the header and the decoded `f32` values in stored order.
pub fn read_raw(path: &Path) -> Result<(ContainerHeader, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[..split])?;
    if header.format != CONTAINER_FORMAT || header.version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    if header.shape.len() != 3 || (count * 4) as u64 != header.payload_bytes {
        return Err(Error::DimensionMismatch(format!(
            "shape {:?} does not match {} payload bytes",
            header.shape, header.payload_bytes
        )));
    }
    let payload = &bytes[split + 1..];
    let expected = header.payload_bytes as usize;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} bytes after the {expected}-byte payload",
            payload.len() - expected
        )));
    }
    let actual = sha256_hex(payload);
    if actual != header.sha256 {
        return Err(Error::Checksum { expected: header.sha256.clone(), actual });
    }
    let decode: fn([u8; 4]) -> f32 = match header.endianness {
        Endianness::Little => f32::from_le_bytes,
        Endianness::Big => f32::from_be_bytes,
    };
    let values = payload
        .chunks_exact(4)
        .map(|c| decode([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

fn stored_array(header: &ContainerHeader, values: Vec<f32>) -> Array3<f64> {
    let shape = (header.shape[0], header.shape[1], header.shape[2]);
    Array3::from_shape_vec(shape, values.into_iter().map(f64::from).collect()).expect("shape checked")
}

pub fn read_container(path: &Path) -> Result<Container> {
    let (header, values) = read_raw(path)?;
    let t = header.shape[0];
    if header.frame_times.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "{t} frames but {} frame times",
            header.frame_times.len()
        )));
    }
    let stored = stored_array(&header, values);
    match header.kind {
        ContainerKind::Sinogram => {
            let geometry = header
                .geometry
                .ok_or_else(|| Error::Format("sinogram without geometry".into()))?;
            geometry.validate()?;
            let data = stored.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
            Ok(Container::Sinogram(Sinogram::new(data, geometry, header.frame_times)?))
        }
        ContainerKind::ImageSequence => {
            let grid = header
                .grid
                .ok_or_else(|| Error::Format("image sequence without grid".into()))?;
            if header.shape[1] != grid.n || header.shape[2] != grid.n {
                return Err(Error::DimensionMismatch(format!(
                    "payload {:?} for a {}x{} grid",
                    header.shape, grid.n, grid.n
                )));
            }
            let data = stored.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
            Ok(Container::ImageSequence(ImageSequence::new(data, grid, header.frame_times)?))
        }
    }
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    match read_container(path)? {
        Container::Sinogram(s) => Ok(s),
        other => Err(kind_error(ContainerKind::Sinogram, other.kind())),
    }
}

pub fn read_images(path: &Path) -> Result<ImageSequence> {
    match read_container(path)? {
        Container::ImageSequence(s) => Ok(s),
        other => Err(kind_error(ContainerKind::ImageSequence, other.kind())),
    }
}

fn kind_error(expected: ContainerKind, found: ContainerKind) -> Error {
    Error::KindMismatch { expected: expected.as_str().into(), found: found.as_str().into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Pgm,
    Png,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Pgm => "pgm",
            FrameFormat::Png => "png",
        }
    }
}

/// `round(255 * v)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes one 8-bit grayscale image per frame as `frame_000.<ext>`, ...
/// Row 0 of the grid is the first image row. Values must already lie in
/// `[0, 1]`.
pub fn export_frames(seq: &ImageSequence, dir: &Path, format: FrameFormat) -> Result<Vec<PathBuf>> {
    if let Some(bad) = seq.data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::Unnormalized(*bad));
    }
    fs::create_dir_all(dir)?;
    let n = seq.grid.n;
    let frames = seq.num_frames();
    let width = frames.saturating_sub(1).to_string().len().max(3);
    let mut written = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = seq.frame(t);
        let pixels: Vec<u8> = frame.iter().map(|&v| quantize(v)).collect();
        let path = dir.join(format!("frame_{t:0width$}.{}", format.extension()));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        match format {
            FrameFormat::Pgm => {
                write!(w, "P5\n{n} {n}\n255\n")?;
                w.write_all(&pixels)?;
            }
            FrameFormat::Png => {
                let mut enc = png::Encoder::new(&mut w, n as u32, n as u32);
                enc.set_color(png::ColorType::Grayscale);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc.write_header()?;
                writer.write_image_data(&pixels)?;
                writer.finish()?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
