//! Patch rescaling onto the DAS range and the MAE/SSIM hybrid loss, with gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// MAE weight.
    pub alpha: f64,
    /// SSIM weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
            return Err(Error::invalid("loss weights", "need alpha >= 0, beta >= 0, alpha + beta > 0"));
        }
        Ok(Self { alpha, beta })
    }
}

fn min_max(m: &Array2<f64>) -> ((f64, usize), (f64, usize)) {
    let mut lo = (f64::INFINITY, 0);
    let mut hi = (f64::NEG_INFINITY, 0);
    for (i, &v) in m.iter().enumerate() {
        if v < lo.0 {
            lo = (v, i);
        }
        if v > hi.0 {
            hi = (v, i);
        }
    }
    (lo, hi)
}

/// Affine min-max map of `h` onto the value range of `reference`.
///
/// A constant `h` maps to the midpoint of the reference range; a constant
/// reference maps everything to its value.
pub fn scale(h: &Array2<f64>, reference: &Array2<f64>) -> Array2<f64> {
    let ((h_lo, _), (h_hi, _)) = min_max(h);
    let ((r_lo, _), (r_hi, _)) = min_max(reference);
    if r_hi == r_lo {
        return Array2::from_elem(h.dim(), r_lo);
    }
    if h_hi == h_lo {
        return Array2::from_elem(h.dim(), 0.5 * (r_lo + r_hi));
    }
    let slope = (r_hi - r_lo) / (h_hi - h_lo);
    if slope == 1.0 && h_lo == r_lo {
        // the map is the identity; skip the rounding of (h - lo) + lo
        return h.clone();
    }
    h.mapv(|v| (v - h_lo) * slope + r_lo)
}

/// Gradient of [`scale`] with respect to `h` (the reference is a constant).
pub fn scale_backward(h: &Array2<f64>, reference: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let ((h_lo, i_lo), (h_hi, i_hi)) = min_max(h);
    let ((r_lo, _), (r_hi, _)) = min_max(reference);
    let mut g = Array2::zeros(h.dim());
    if r_hi == r_lo || h_hi == h_lo {
        return g;
    }
    let span = h_hi - h_lo;
    let slope = (r_hi - r_lo) / span;
    let mut sum_g = 0.0;
    let mut sum_gh = 0.0;
    for ((gi, &go), &hv) in g.iter_mut().zip(grad_out.iter()).zip(h.iter()) {
        *gi = slope * go;
        sum_g += go;
        sum_gh += go * (hv - h_lo);
    }
    let flat = g.as_slice_mut().expect("standard layout");
    flat[i_lo] += -slope * sum_g + slope / span * sum_gh;
    flat[i_hi] -= slope / span * sum_gh;
    g
}

fn check_dims(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Gradient of [`mae`] with respect to `a`; zero where `a == b`.
pub fn mae_grad(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.len() as f64;
    let mut g = a - b;
    g.mapv_inplace(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
    g
}

/// Mean SSIM over all valid 7x7 uniform windows, with optional gradient w.r.t. `a`.
fn ssim_impl(a: &Array2<f64>, b: &Array2<f64>, want_grad: bool) -> Result<(f64, Option<Array2<f64>>)> {
    check_dims(a, b)?;
    let (rows, cols) = a.dim();
    let k = SSIM_WINDOW;
    if rows < k || cols < k {
        return Err(Error::DimensionMismatch(format!("{rows} x {cols} is smaller than the {k} x {k} SSIM window")));
    }
    let n = (k * k) as f64;
    let n_windows = ((rows - k + 1) * (cols - k + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array2::zeros(a.dim()));
    for r0 in 0..=rows - k {
        for c0 in 0..=cols - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let (x, y) = (a[[r, c]], b[[r, c]]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mu_a, mu_b) = (sa / n, sb / n);
            let var_a = (saa / n - mu_a * mu_a).max(0.0);
            let var_b = (sbb / n - mu_b * mu_b).max(0.0);
            let cov = sab / n - mu_a * mu_b;
            let num_l = 2.0 * mu_a * mu_b + SSIM_C1;
            let num_c = 2.0 * cov + SSIM_C2;
            let den_l = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
            let den_c = var_a + var_b + SSIM_C2;
            let s = num_l * num_c / (den_l * den_c);
            total += s;
            if let Some(g) = grad.as_mut() {
                let den = den_l * den_c;
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        let (x, y) = (a[[r, c]], b[[r, c]]);
                        let d_num_l = 2.0 * mu_b / n;
                        let d_num_c = 2.0 * (y - mu_b) / n;
                        let d_den_l = 2.0 * mu_a / n;
                        let d_den_c = 2.0 * (x - mu_a) / n;
                        let d_num = d_num_l * num_c + num_l * d_num_c;
                        let d_den = d_den_l * den_c + den_l * d_den_c;
                        g[[r, c]] += (d_num - s * d_den) / den / n_windows;
                    }
                }
            }
        }
    }
    Ok((total / n_windows, grad))
}

/// Structural similarity for images with dynamic range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `alpha * MAE - beta * SSIM`.
pub fn hybrid_loss(pred: &Array2<f64>, target: &Array2<f64>, w: &LossWeights) -> Result<f64> {
    let m = mae(pred, target)?;
    let s = if w.beta != 0.0 { ssim(pred, target)? } else { 0.0 };
    Ok(w.alpha * m - w.beta * s)
}

/// Loss value with its MAE and SSIM parts and the gradient w.r.t. `pred`.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub mae: f64,
    pub ssim: f64,
    pub grad: Array2<f64>,
}

pub fn hybrid_loss_grad(pred: &Array2<f64>, target: &Array2<f64>, w: &LossWeights) -> Result<LossEval> {
    let m = mae(pred, target)?;
    let (s, gs) = ssim_grad(pred, target)?;
    let grad = mae_grad(pred, target) * w.alpha - gs * w.beta;
    Ok(LossEval { loss: w.alpha * m - w.beta * s, mae: m, ssim: s, grad })
}
