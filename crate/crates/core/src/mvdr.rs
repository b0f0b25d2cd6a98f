//! Minimum-variance distortionless-response (Capon) beamformer on real RF data,
//! with subaperture spatial smoothing, temporal averaging and diagonal loading.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvdrConfig {
    /// Subaperture length `L`.
    pub subaperture_len: usize,
    /// Depth samples averaged into the covariance (odd).
    pub temporal_window: usize,
    /// Loading factor relative to `trace(R) / L`.
    pub diagonal_loading: f64,
}

impl MvdrConfig {
    /// `L = M / 2`, `K = 9`, `delta = 1 / (100 L)`.
    pub fn default_for(n_elements: usize) -> Self {
        let l = (n_elements / 2).max(1);
        Self {
            subaperture_len: l,
            temporal_window: 9,
            diagonal_loading: 1.0 / (100.0 * l as f64),
        }
    }

    pub fn validate(&self, n_elements: usize) -> Result<()> {
        if self.subaperture_len == 0 || self.subaperture_len > n_elements {
            return Err(Error::invalid(
                "subaperture_len",
                format!("must lie in 1..={n_elements}, got {}", self.subaperture_len),
            ));
        }
        if self.temporal_window.is_multiple_of(2) {
            return Err(Error::invalid("temporal_window", "must be odd and >= 1"));
        }
        if !(self.diagonal_loading >= 0.0) || !self.diagonal_loading.is_finite() {
            return Err(Error::invalid("diagonal_loading", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Spatially smoothed, temporally averaged sample covariance at `(iz, ix)`.
///
/// Depth indices outside the tensor are clamped to its edge.
pub fn spatial_covariance(
    data: ArrayView3<'_, f64>,
    pixel: (usize, usize),
    cfg: &MvdrConfig,
) -> DMatrix<f64> {
    let (m, n_z, _) = data.dim();
    let l = cfg.subaperture_len;
    let half = (cfg.temporal_window / 2) as isize;
    let (iz, ix) = pixel;
    let mut acc = vec![0.0; l * l];
    let mut snapshot = vec![0.0; m];
    for k in -half..=half {
        let z = (iz as isize + k).clamp(0, n_z as isize - 1) as usize;
        for (e, s) in snapshot.iter_mut().enumerate() {
            *s = data[[e, z, ix]];
        }
        for p in 0..=(m - l) {
            let x = &snapshot[p..p + l];
            for i in 0..l {
                let xi = x[i];
                let row = &mut acc[i * l..(i + 1) * l];
                for (r, &xj) in row.iter_mut().zip(x) {
                    *r += xi * xj;
                }
            }
        }
    }
    let norm = 1.0 / (((m - l + 1) * cfg.temporal_window) as f64);
    DMatrix::from_row_slice(l, l, &acc) * norm
}

/// `R + (delta * trace(R) / L) I`, or `R + delta * eps I` when the trace vanishes.
pub fn diagonal_load(r: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let l = r.nrows();
    let trace = r.trace();
    let load = if trace == 0.0 {
        delta * f64::EPSILON
    } else {
        delta * trace / l as f64
    };
    let mut out = r.clone();
    for i in 0..l {
        out[(i, i)] += load;
    }
    out
}

/// `w = R^-1 a / (a^T R^-1 a)` through a Cholesky solve.
pub fn mvdr_weights(r_loaded: &DMatrix<f64>, steering: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = r_loaded.clone().cholesky()?;
    let ria = chol.solve(steering);
    let denom = steering.dot(&ria);
    if !(denom.is_finite() && denom > 0.0) {
        return None;
    }
    Some(ria / denom)
}

/// Subaperture-averaged snapshot at `(iz, ix)`.
pub fn averaged_snapshot(data: ArrayView3<'_, f64>, pixel: (usize, usize), l: usize) -> DVector<f64> {
    let m = data.dim().0;
    let mut xbar = DVector::zeros(l);
    for p in 0..=(m - l) {
        for i in 0..l {
            xbar[i] += data[[p + i, pixel.0, pixel.1]];
        }
    }
    xbar / ((m - l + 1) as f64)
}

/// Adaptive beamformed RF over the whole tensor, `[n_z, n_x]`.
pub fn mvdr_beamform(data: ArrayView3<'_, f64>, cfg: &MvdrConfig) -> Result<Array2<f64>> {
    let (m, n_z, n_x) = data.dim();
    cfg.validate(m)?;
    let l = cfg.subaperture_len;
    let steering = DVector::from_element(l, 1.0);
    let rows: Vec<Result<Vec<f64>>> = (0..n_z)
        .into_par_iter()
        .map(|iz| {
            (0..n_x)
                .map(|ix| {
                    let r = spatial_covariance(data, (iz, ix), cfg);
                    let loaded = diagonal_load(&r, cfg.diagonal_loading);
                    let w = mvdr_weights(&loaded, &steering)
                        .ok_or(Error::SingularCovariance { iz, ix })?;
                    Ok(w.dot(&averaged_snapshot(data, (iz, ix), l)))
                })
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((n_z, n_x));
    for (iz, row) in rows.into_iter().enumerate() {
        for (ix, v) in row?.into_iter().enumerate() {
            out[[iz, ix]] = v;
        }
    }
    Ok(out)
}

/// Per-pixel distortionless residual `|a^T w - 1|`, for diagnostics.
pub fn distortionless_residuals(data: ArrayView3<'_, f64>, cfg: &MvdrConfig) -> Result<Array2<f64>> {
    let (m, n_z, n_x) = data.dim();
    cfg.validate(m)?;
    let steering = DVector::from_element(cfg.subaperture_len, 1.0);
    let mut out = Array2::zeros((n_z, n_x));
    for iz in 0..n_z {
        for ix in 0..n_x {
            let r = diagonal_load(&spatial_covariance(data, (iz, ix), cfg), cfg.diagonal_loading);
            let w = mvdr_weights(&r, &steering).ok_or(Error::SingularCovariance { iz, ix })?;
            out[[iz, ix]] = (w.sum() - 1.0).abs();
        }
    }
    Ok(out)
}
