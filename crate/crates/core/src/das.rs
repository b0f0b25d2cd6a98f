//! Delay-and-sum apodization, envelope detection and log compression.
//!
//! Together these form the beamforming operator applied to both the raw and
//! the network-transformed delayed data. Envelope and compression run per
//! patch; the `*_smooth` variants and their backward passes are the
//! differentiable forms used during training.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::domain::{ArrayGeometry, PixelGrid};
use crate::error::{Error, Result};

/// Smoothing constant for the magnitude and logarithm in differentiable paths.
pub const SMOOTH_EPS: f64 = 1e-12;

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Boxcar,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DasConfig {
    pub f_number: f64,
    pub window: Window,
    pub dynamic_range_db: f64,
}

impl Default for DasConfig {
    fn default() -> Self {
        Self {
            f_number: 1.5,
            window: Window::Hann,
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
        }
    }
}

/// Per-pixel receive weights over the elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ApodizationProfile {
    pub f_number: f64,
    pub window: Window,
    /// `[n_z, n_x, n_elements]`
    pub weights: Array3<f64>,
}

impl ApodizationProfile {
    pub fn n_elements(&self) -> usize {
        self.weights.dim().2
    }

    /// Number of elements with non-zero weight at a pixel.
    pub fn active_count(&self, iz: usize, ix: usize) -> usize {
        self.weights
            .slice(ndarray::s![iz, ix, ..])
            .iter()
            .filter(|&&w| w > 0.0)
            .count()
    }
}

/// Dynamic receive aperture with half-width `z / (2 f_number)`.
///
/// Hann weights are `0.5 (1 + cos(pi d / a))` for lateral offset `d` and
/// half-width `a`, which is zero at the aperture edge. If no element gets a
/// positive weight the nearest element is switched on with weight 1.
pub fn das_weights(
    grid: &PixelGrid,
    array: &ArrayGeometry,
    f_number: f64,
    window: Window,
) -> Result<ApodizationProfile> {
    if !(f_number > 0.0) || !f_number.is_finite() {
        return Err(Error::invalid("f_number", format!("must be positive, got {f_number}")));
    }
    let m = array.n_elements;
    let mut weights = Array3::zeros((grid.n_z, grid.n_x, m));
    for iz in 0..grid.n_z {
        let z = grid.z(iz);
        let half = z / (2.0 * f_number);
        for ix in 0..grid.n_x {
            let x = grid.x(ix);
            let mut total = 0.0;
            let mut nearest = (f64::INFINITY, 0);
            for (e, &ex) in array.element_x.iter().enumerate() {
                let d = (ex - x).abs();
                if d < nearest.0 {
                    nearest = (d, e);
                }
                if d <= half {
                    let w = match window {
                        Window::Boxcar => 1.0,
                        Window::Hann => 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos()),
                    };
                    weights[[iz, ix, e]] = w;
                    total += w;
                }
            }
            if total <= 0.0 {
                weights[[iz, ix, nearest.1]] = 1.0;
            }
        }
    }
    Ok(ApodizationProfile { f_number, window, weights })
}

/// Weighted sum over elements for a `[M, rows, cols]` block whose top-left
/// pixel is `origin` in the apodization grid.
pub fn das_sum(
    data: ArrayView3<'_, f64>,
    apod: &ApodizationProfile,
    origin: (usize, usize),
) -> Result<Array2<f64>> {
    let (m, rows, cols) = data.dim();
    let (az, ax, am) = apod.weights.dim();
    if m != am || origin.0 + rows > az || origin.1 + cols > ax {
        return Err(Error::DimensionMismatch(format!(
            "data [{m}, {rows}, {cols}] at {origin:?} vs apodization [{az}, {ax}, {am}]"
        )));
    }
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let w = apod.weights.slice(ndarray::s![origin.0 + r, origin.1 + c, ..]);
            let mut acc = 0.0;
            for e in 0..m {
                acc += w[e] * data[[e, r, c]];
            }
            out[[r, c]] = acc;
        }
    }
    Ok(out)
}

/// Gradient of [`das_sum`] with respect to its data block.
pub fn das_sum_backward(
    grad_out: &Array2<f64>,
    apod: &ApodizationProfile,
    origin: (usize, usize),
) -> Array3<f64> {
    let (rows, cols) = grad_out.dim();
    let m = apod.n_elements();
    let mut g = Array3::zeros((m, rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let go = grad_out[[r, c]];
            for e in 0..m {
                g[[e, r, c]] = apod.weights[[origin.0 + r, origin.1 + c, e]] * go;
            }
        }
    }
    g
}

/// Hilbert transform along depth lines of fixed length, via a zero-padded FFT.
#[derive(Clone)]
pub struct HilbertPlan {
    len: usize,
    n_fft: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HilbertPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HilbertPlan").field("len", &self.len).field("n_fft", &self.n_fft).finish()
    }
}

impl HilbertPlan {
    pub fn new(len: usize) -> Self {
        let n_fft = (2 * len).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            len,
            n_fft,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Imaginary part of the analytic signal of `x` (length `len`).
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.len);
        let n = self.n_fft;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(if i < x.len() { x[i] } else { 0.0 }, 0.0))
            .collect();
        self.forward.process(&mut buf);
        // analytic-signal multiplier: 1 at DC and Nyquist, 2 on positive, 0 on negative bins
        for (k, v) in buf.iter_mut().enumerate() {
            if k == 0 || k == n / 2 {
                continue;
            } else if k < n / 2 {
                *v *= 2.0;
            } else {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf[..self.len].iter().map(|v| v.im * scale).collect()
    }

    /// Applies the transform to every column of `m` (depth runs down the rows).
    pub fn transform_columns(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.dim());
        for (c, col) in m.axis_iter(Axis(1)).enumerate() {
            let h = self.transform(&col.to_vec());
            out.column_mut(c).assign(&ndarray::Array1::from(h));
        }
        out
    }
}

/// Magnitude of the per-column analytic signal.
pub fn envelope(beamformed: &Array2<f64>) -> Array2<f64> {
    envelope_with(&HilbertPlan::new(beamformed.nrows()), beamformed)
}

pub fn envelope_with(plan: &HilbertPlan, beamformed: &Array2<f64>) -> Array2<f64> {
    let h = plan.transform_columns(beamformed);
    let mut out = beamformed.clone();
    out.zip_mut_with(&h, |x, &y| *x = x.hypot(y));
    out
}

/// Smoothed envelope `sqrt(x^2 + H(x)^2 + eps)`. Returns `(envelope, H(x))`.
pub fn envelope_smooth(plan: &HilbertPlan, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let h = plan.transform_columns(x);
    let mut env = x.clone();
    env.zip_mut_with(&h, |a, &b| *a = (*a * *a + b * b + SMOOTH_EPS).sqrt());
    (env, h)
}

/// Backward pass of [`envelope_smooth`]. The zero-padded Hilbert operator is
/// antisymmetric, so its adjoint is its negation.
pub fn envelope_smooth_backward(
    plan: &HilbertPlan,
    x: &Array2<f64>,
    hx: &Array2<f64>,
    env: &Array2<f64>,
    grad_env: &Array2<f64>,
) -> Array2<f64> {
    let mut direct = Array2::zeros(x.dim());
    let mut through_h = Array2::zeros(x.dim());
    ndarray::Zip::from(&mut direct)
        .and(&mut through_h)
        .and(x)
        .and(hx)
        .and(env)
        .and(grad_env)
        .for_each(|d, t, &xv, &hv, &e, &g| {
            *d = g * xv / e;
            *t = g * hv / e;
        });
    let adj = plan.transform_columns(&through_h);
    direct - adj
}

/// Maps `reference` to 1 and anything at or below `-dynamic_range_db` to 0.
pub fn log_compress(env: &Array2<f64>, dynamic_range_db: f64, reference: Option<f64>) -> Array2<f64> {
    let reference = reference.unwrap_or_else(|| env.iter().cloned().fold(0.0, f64::max));
    if !(reference > 0.0) {
        return Array2::zeros(env.dim());
    }
    env.mapv(|e| (20.0 * (e / reference).log10()).clamp(-dynamic_range_db, 0.0) / dynamic_range_db + 1.0)
}

/// Log compression with `log(e + eps)`; differentiable almost everywhere.
pub fn log_compress_smooth(env: &Array2<f64>, dynamic_range_db: f64, reference: f64) -> Array2<f64> {
    env.mapv(|e| (20.0 * ((e + SMOOTH_EPS) / reference).log10()).clamp(-dynamic_range_db, 0.0) / dynamic_range_db + 1.0)
}

pub fn log_compress_smooth_backward(
    env: &Array2<f64>,
    dynamic_range_db: f64,
    reference: f64,
    grad_out: &Array2<f64>,
) -> Array2<f64> {
    let mut g = Array2::zeros(env.dim());
    ndarray::Zip::from(&mut g).and(env).and(grad_out).for_each(|gi, &e, &go| {
        let db = 20.0 * ((e + SMOOTH_EPS) / reference).log10();
        if db > -dynamic_range_db && db < 0.0 {
            *gi = go * 20.0 / (std::f64::consts::LN_10 * dynamic_range_db * (e + SMOOTH_EPS));
        }
    });
    g
}

/// A log-compressed tile of a B-mode image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BModePatch {
    pub values: Array2<f64>,
    pub origin: (usize, usize),
}
