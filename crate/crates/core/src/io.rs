//! On-disk formats.
//!
//! Every array is stored as a raw little-endian `f32` payload next to a JSON
//! sidecar named `<payload>.json` describing its shape. Values are kept in
//! `f64` in memory, so a save after a load reproduces the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::delayrf::DelayedTensor;
use crate::domain::{ArrayGeometry, PixelGrid, PlaneWaveTx};
use crate::error::{Error, Result};
use crate::neural::{UNetArch, UNetParams};
use crate::pipeline::{BModeImage, Method};
use crate::simulator::RfFrame;

const RF_FORMAT: &str = "beamlab-rf/1";
const DELAYED_FORMAT: &str = "beamlab-delayed/1";
const CHECKPOINT_FORMAT: &str = "beamlab-checkpoint/1";
const BMODE_FORMAT: &str = "beamlab-bmode/1";

/// Path of the JSON header that accompanies `payload`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_f32<I: IntoIterator<Item = f64>>(values: I) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn write_pair<H: Serialize>(payload_path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = payload_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(sidecar_path(payload_path), text)?;
    fs::write(payload_path, payload)?;
    Ok(())
}

fn read_pair<H: DeserializeOwned>(payload_path: &Path) -> Result<(H, Vec<f64>)> {
    let text = fs::read_to_string(sidecar_path(payload_path))?;
    let header = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let payload = decode_f32(&fs::read(payload_path)?)?;
    Ok((header, payload))
}

fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("expected format `{expected}`, found `{found}`")));
    }
    Ok(())
}

fn check_len(found: usize, expected: usize, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("{what}: payload has {found} values, header implies {expected}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfHeader {
    pub format: String,
    pub n_elements: usize,
    pub n_time: usize,
    pub fs: f64,
    pub t0: f64,
    pub angle: f64,
    pub geometry_hash: String,
    pub geometry: ArrayGeometry,
}

/// Element-major samples.
pub fn write_rf_frame(frame: &RfFrame, path: &Path) -> Result<()> {
    let header = RfHeader {
        format: RF_FORMAT.into(),
        n_elements: frame.n_elements(),
        n_time: frame.n_time(),
        fs: frame.fs,
        t0: frame.t0,
        angle: frame.tx.steering_angle,
        geometry_hash: frame.geometry.hash(),
        geometry: frame.geometry.clone(),
    };
    write_pair(path, &header, &encode_f32(frame.samples.iter().copied()))
}

pub fn read_rf_frame(path: &Path) -> Result<RfFrame> {
    let (h, values): (RfHeader, _) = read_pair(path)?;
    check_format(&h.format, RF_FORMAT)?;
    if h.geometry.hash() != h.geometry_hash || h.geometry.n_elements != h.n_elements {
        return Err(Error::Format("geometry does not match its recorded hash".into()));
    }
    check_len(values.len(), h.n_elements * h.n_time, "rf frame")?;
    let samples = Array2::from_shape_vec((h.n_elements, h.n_time), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(RfFrame { samples, t0: h.t0, fs: h.fs, geometry: h.geometry, tx: PlaneWaveTx::new(h.angle)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayedHeader {
    pub format: String,
    pub n_elements: usize,
    pub n_z: usize,
    pub n_x: usize,
    /// Payload order: samples, then the validity mask as 0/1.
    pub blocks: Vec<String>,
    pub grid: PixelGrid,
}

pub fn write_delayed(tensor: &DelayedTensor, path: &Path) -> Result<()> {
    let (m, n_z, n_x) = tensor.data.dim();
    let header = DelayedHeader {
        format: DELAYED_FORMAT.into(),
        n_elements: m,
        n_z,
        n_x,
        blocks: vec!["samples".into(), "valid".into()],
        grid: tensor.grid.clone(),
    };
    let values = tensor.data.iter().copied().chain(tensor.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    write_pair(path, &header, &encode_f32(values))
}

pub fn read_delayed(path: &Path) -> Result<DelayedTensor> {
    let (h, mut values): (DelayedHeader, _) = read_pair(path)?;
    check_format(&h.format, DELAYED_FORMAT)?;
    let n = h.n_elements * h.n_z * h.n_x;
    check_len(values.len(), 2 * n, "delayed tensor")?;
    let mask: Vec<bool> = values.split_off(n).into_iter().map(|v| v != 0.0).collect();
    let shape = (h.n_elements, h.n_z, h.n_x);
    Ok(DelayedTensor {
        data: Array3::from_shape_vec(shape, values).map_err(|e| Error::Format(e.to_string()))?,
        grid: h.grid,
        valid: Array3::from_shape_vec(shape, mask).map_err(|e| Error::Format(e.to_string()))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: UNetArch,
    pub seed: u64,
    pub step: u64,
    pub n_params: usize,
    pub blocks: Vec<ParamBlock>,
}

/// Kernel and bias of every convolution, in declaration order.
pub fn write_checkpoint(params: &UNetParams, seed: u64, step: u64, path: &Path) -> Result<()> {
    let blocks = params
        .slots
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            [
                ParamBlock { name: format!("conv{i}.kernel"), shape: vec![s.out_ch, s.in_ch, 3, 3] },
                ParamBlock { name: format!("conv{i}.bias"), shape: vec![s.out_ch] },
            ]
        })
        .collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        arch: params.arch,
        seed,
        step,
        n_params: params.values.len(),
        blocks,
    };
    write_pair(path, &header, &encode_f32(params.values.iter().copied()))
}

pub fn read_checkpoint(path: &Path) -> Result<(UNetParams, CheckpointHeader)> {
    let (h, values): (CheckpointHeader, _) = read_pair(path)?;
    check_format(&h.format, CHECKPOINT_FORMAT)?;
    check_len(values.len(), h.n_params, "checkpoint")?;
    Ok((UNetParams::from_values(h.arch, values)?, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BModeHeader {
    pub format: String,
    pub method: Method,
    pub n_z: usize,
    pub n_x: usize,
    pub dynamic_range_db: f64,
    pub grid: PixelGrid,
}

pub fn write_bmode(image: &BModeImage, path: &Path) -> Result<()> {
    let (n_z, n_x) = image.values.dim();
    let header = BModeHeader {
        format: BMODE_FORMAT.into(),
        method: image.method,
        n_z,
        n_x,
        dynamic_range_db: image.dynamic_range_db,
        grid: image.grid.clone(),
    };
    write_pair(path, &header, &encode_f32(image.values.iter().copied()))
}

pub fn read_bmode(path: &Path) -> Result<BModeImage> {
    let (h, values): (BModeHeader, _) = read_pair(path)?;
    check_format(&h.format, BMODE_FORMAT)?;
    check_len(values.len(), h.n_z * h.n_x, "b-mode image")?;
    Ok(BModeImage {
        values: Array2::from_shape_vec((h.n_z, h.n_x), values).map_err(|e| Error::Format(e.to_string()))?,
        grid: h.grid,
        method: h.method,
        dynamic_range_db: h.dynamic_range_db,
    })
}

/// 8-bit binary PGM with gray level `round(255 v)`.
pub fn write_pgm(values: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let bytes: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_linear_array, make_pixel_grid, Scatterer};
    use crate::neural::UNetArch;
    use crate::simulator::{synthesize_rf, SimConfig};

    fn frame() -> RfFrame {
        let a = make_linear_array(4, 3e-4, 5e6, 2e7, 1540.0).unwrap();
        let g = make_pixel_grid((-1e-3, 1e-3), (5e-3, 6e-3), 8, 8, 8).unwrap();
        let tx = PlaneWaveTx::new(0.1).unwrap();
        synthesize_rf(&[Scatterer { x: 0.0, z: 5.5e-3, amplitude: 1.0 }], &a, &tx, &SimConfig::covering(&g, &a, &tx)).unwrap()
    }

    #[test]
    fn f32_codec_is_little_endian() {
        assert_eq!(encode_f32([1.0]), vec![0, 0, 0x80, 0x3f]);
        assert_eq!(decode_f32(&[0, 0, 0x80, 0x3f]).unwrap(), vec![1.0]);
        assert!(decode_f32(&[0, 0, 0]).is_err());
    }

    #[test]
    fn rf_frame_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.rf"), dir.path().join("b.rf"));
        let f = frame();
        write_rf_frame(&f, &p1).unwrap();
        let back = read_rf_frame(&p1).unwrap();
        assert_eq!(back.geometry, f.geometry);
        assert_eq!(back.tx, f.tx);
        write_rf_frame(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read(sidecar_path(&p1)).unwrap(), fs::read(sidecar_path(&p2)).unwrap());
    }

    #[test]
    fn tampered_geometry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rf");
        write_rf_frame(&frame(), &p).unwrap();
        let side = sidecar_path(&p);
        let text = fs::read_to_string(&side).unwrap().replacen("\"pitch\": 0.0003", "\"pitch\": 0.0004", 1);
        fs::write(&side, text).unwrap();
        assert!(read_rf_frame(&p).unwrap_err().is_io());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rf");
        write_rf_frame(&frame(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_rf_frame(&p), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let arch = UNetArch::for_elements(4);
        let params = UNetParams::init(arch, 3).unwrap();
        write_checkpoint(&params, 3, 120, &p1).unwrap();
        let (back, h) = read_checkpoint(&p1).unwrap();
        assert_eq!((h.seed, h.step, h.arch), (3, 120, arch));
        assert_eq!(h.blocks.len(), 2 * params.slots.len());
        write_checkpoint(&back, h.seed, h.step, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_header_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 1.0]).unwrap(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
