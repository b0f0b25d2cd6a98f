//! Dynamic receive focusing and patch tiling.

use ndarray::{s, Array3, ArrayView1};
use rayon::prelude::*;

use crate::domain::{PixelGrid, PlaneWaveTx};
use crate::error::{Error, Result};
use crate::simulator::RfFrame;

/// Plane-wave transmit delay to `pixel = (x, z)`.
pub fn tx_delay(pixel: (f64, f64), tx: &PlaneWaveTx, c: f64) -> f64 {
    let (x, z) = pixel;
    let (sin, cos) = tx.steering_angle.sin_cos();
    (z * cos + x * sin) / c
}

/// Receive delay from `pixel = (x, z)` back to the element at lateral `element_x`.
pub fn rx_delay(pixel: (f64, f64), element_x: f64, c: f64) -> f64 {
    let (x, z) = pixel;
    (x - element_x).hypot(z) / c
}

/// Time-aligned channel data on the pixel grid: the network input before tiling.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedTensor {
    /// `[n_elements, n_z, n_x]`
    pub data: Array3<f64>,
    pub grid: PixelGrid,
    /// `true` where the read fell inside the recorded trace.
    pub valid: Array3<bool>,
}

impl DelayedTensor {
    pub fn n_elements(&self) -> usize {
        self.data.dim().0
    }
}

/// One `[n_elements, side, side]` tile of a delayed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RfPatch {
    pub data: Array3<f64>,
    /// (iz, ix) of the top-left pixel.
    pub origin: (usize, usize),
}

impl RfPatch {
    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_elements(&self) -> usize {
        self.data.dim().0
    }
}

/// Fractional sample index read by element `element_x` for pixel `(x, z)`.
pub(crate) fn sample_position(frame: &RfFrame, pixel: (f64, f64), element_x: f64) -> f64 {
    let c = frame.geometry.sound_speed;
    let t = tx_delay(pixel, &frame.tx, c) + rx_delay(pixel, element_x, c) - frame.t0;
    t * frame.fs
}

/// Two-point linear interpolation; `None` outside `[0, n - 1]`.
pub(crate) fn interpolate(trace: ArrayView1<'_, f64>, pos: f64) -> Option<f64> {
    let n = trace.len();
    if n == 0 || !(pos >= 0.0) || pos > (n - 1) as f64 {
        return None;
    }
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return Some(trace[n - 1]);
    }
    let frac = pos - i as f64;
    Some((1.0 - frac) * trace[i] + frac * trace[i + 1])
}

pub fn delay_compensate(frame: &RfFrame, grid: &PixelGrid) -> Result<DelayedTensor> {
    let m_count = frame.n_elements();
    let (n_z, n_x) = (grid.n_z, grid.n_x);
    let planes: Vec<(Vec<f64>, Vec<bool>)> = (0..m_count)
        .into_par_iter()
        .map(|m| {
            let ex = frame.geometry.element_x[m];
            let trace = frame.samples.row(m);
            let mut vals = vec![0.0; n_z * n_x];
            let mut ok = vec![false; n_z * n_x];
            for iz in 0..n_z {
                let z = grid.z(iz);
                for ix in 0..n_x {
                    let pos = sample_position(frame, (grid.x(ix), z), ex);
                    if let Some(v) = interpolate(trace, pos) {
                        vals[iz * n_x + ix] = v;
                        ok[iz * n_x + ix] = true;
                    }
                }
            }
            (vals, ok)
        })
        .collect();

    let mut data = Array3::zeros((m_count, n_z, n_x));
    let mut valid = Array3::from_elem((m_count, n_z, n_x), false);
    for (m, (vals, ok)) in planes.into_iter().enumerate() {
        for (dst, src) in data.slice_mut(s![m, .., ..]).iter_mut().zip(vals) {
            *dst = src;
        }
        for (dst, src) in valid.slice_mut(s![m, .., ..]).iter_mut().zip(ok) {
            *dst = src;
        }
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyOverlap);
    }
    Ok(DelayedTensor { data, grid: grid.clone(), valid })
}

/// Non-overlapping `side x side` tiles in row-major patch order.
pub fn extract_patches(data: &Array3<f64>, side: usize) -> Vec<RfPatch> {
    let (_, n_z, n_x) = data.dim();
    let mut out = Vec::with_capacity((n_z / side) * (n_x / side));
    for pz in 0..n_z / side {
        for px in 0..n_x / side {
            let (iz, ix) = (pz * side, px * side);
            out.push(RfPatch {
                data: data.slice(s![.., iz..iz + side, ix..ix + side]).to_owned(),
                origin: (iz, ix),
            });
        }
    }
    out
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &[RfPatch], n_z: usize, n_x: usize) -> Result<Array3<f64>> {
    let first = patches.first().ok_or_else(|| Error::DimensionMismatch("no patches".into()))?;
    let m = first.n_elements();
    let mut out = Array3::zeros((m, n_z, n_x));
    for p in patches {
        let side = p.side();
        let (iz, ix) = p.origin;
        if p.n_elements() != m || iz + side > n_z || ix + side > n_x {
            return Err(Error::DimensionMismatch(format!("patch at {:?} does not fit", p.origin)));
        }
        out.slice_mut(s![.., iz..iz + side, ix..ix + side]).assign(&p.data);
    }
    Ok(out)
}
