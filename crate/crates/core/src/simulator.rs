//! Single-scattering plane-wave RF channel data simulator.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delayrf::{rx_delay, tx_delay};
use crate::domain::{ArrayGeometry, PhantomSpec, PixelGrid, PlaneWaveTx, Scatterer};
use crate::error::{Error, Result};

/// Spreading distances are clamped below this to avoid the near-field singularity.
pub const MIN_SPREADING: f64 = 1e-3;

/// Pulse support, in units of the Gaussian envelope sigma, on each side of the peak.
pub const PULSE_HALF_WIDTH_SIGMAS: f64 = 5.0;

/// Envelope standard deviation such that the two-sided -6 dB bandwidth of the
/// pulse spectrum equals `fractional_bandwidth * f0`.
pub fn pulse_sigma(f0: f64, fractional_bandwidth: f64) -> f64 {
    let half_bw = fractional_bandwidth * f0 / 2.0;
    // |S(f0 + df)| / |S(f0)| = exp(-2 pi^2 sigma^2 df^2) = 10^(-6/20)
    let neg_ln_ratio = 0.3 * std::f64::consts::LN_10;
    (neg_ln_ratio / (2.0 * std::f64::consts::PI.powi(2))).sqrt() / half_bw
}

/// Gaussian-modulated cosine transmit pulse, unit amplitude at `t = 0`.
pub fn pulse(t: f64, f0: f64, fractional_bandwidth: f64) -> f64 {
    let sigma = pulse_sigma(f0, fractional_bandwidth);
    gaussian_pulse(t, f0, sigma)
}

#[inline]
fn gaussian_pulse(t: f64, f0: f64, sigma: f64) -> f64 {
    (2.0 * std::f64::consts::PI * f0 * t).cos() * (-t * t / (2.0 * sigma * sigma)).exp()
}

/// Raw per-element samples of one plane-wave transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    /// `[n_elements, n_time]`
    pub samples: Array2<f64>,
    pub t0: f64,
    pub fs: f64,
    pub geometry: ArrayGeometry,
    pub tx: PlaneWaveTx,
}

impl RfFrame {
    pub fn n_elements(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Recorded trace length in seconds.
    pub duration: f64,
    /// Time of the first sample.
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_bandwidth")]
    pub fractional_bandwidth: f64,
}

fn default_bandwidth() -> f64 {
    0.6
}

impl SimConfig {
    /// Shortest duration covering two-way travel to every grid pixel plus the pulse tail.
    pub fn covering(grid: &PixelGrid, array: &ArrayGeometry, tx: &PlaneWaveTx) -> Self {
        let bw = default_bandwidth();
        let sigma = pulse_sigma(array.center_frequency, bw);
        let c = array.sound_speed;
        let corners = [
            (grid.x_min, grid.z_max),
            (grid.x_max, grid.z_max),
            (grid.x_min, grid.z_min),
            (grid.x_max, grid.z_min),
        ];
        let mut latest: f64 = 0.0;
        for (x, z) in corners {
            let t_tx = tx_delay((x, z), tx, c);
            for &ex in [array.element_x[0], array.element_x[array.n_elements - 1]].iter() {
                latest = latest.max(t_tx + rx_delay((x, z), ex, c));
            }
        }
        let needed = latest + PULSE_HALF_WIDTH_SIGMAS * sigma + 2.0 / array.sampling_frequency;
        Self { duration: needed, t0: 0.0, fractional_bandwidth: bw }
    }
}

/// Draws the background speckle for `spec` over `fov`, adds the explicit
/// scatterers, and applies cyst echogenicity. Zero-amplitude scatterers are dropped.
pub fn realize_phantom(spec: &PhantomSpec, fov: &PixelGrid) -> Vec<Scatterer> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let area = (fov.x_max - fov.x_min) * (fov.z_max - fov.z_min);
    let n_background = (spec.background_scatterer_density * area).round() as usize;

    let mut out = spec.scatterers.clone();
    out.reserve(n_background);
    for _ in 0..n_background {
        let x = rng.random_range(fov.x_min..=fov.x_max);
        let z = rng.random_range(fov.z_min..=fov.z_max);
        let amp: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        out.push(Scatterer { x, z, amplitude: amp });
    }

    for s in &mut out {
        for cyst in &spec.cysts {
            if cyst.contains(s.x, s.z) {
                s.amplitude *= cyst.echogenicity;
            }
        }
    }
    out.retain(|s| s.amplitude != 0.0);
    out
}

/// Random cysts added to each frame of a simulated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomCysts {
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Echogenicity drawn uniformly from this list.
    pub echogenicity: Vec<f64>,
}

/// Phantom for frame `index` of a series: the template with its own speckle
/// seed and, optionally, freshly drawn cysts that fit inside `fov`.
pub fn series_phantom(
    template: &PhantomSpec,
    fov: &PixelGrid,
    index: usize,
    random: Option<&RandomCysts>,
) -> PhantomSpec {
    let mut spec = template.clone();
    spec.rng_seed = template.rng_seed.wrapping_add(index as u64);
    if let Some(rc) = random {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
        for _ in 0..rc.count {
            let r = if rc.radius_max > rc.radius_min {
                rng.random_range(rc.radius_min..rc.radius_max)
            } else {
                rc.radius_min
            };
            let cx = rng.random_range(fov.x_min + r..=fov.x_max - r);
            let cz = rng.random_range(fov.z_min + r..=fov.z_max - r);
            let echogenicity = if rc.echogenicity.is_empty() {
                0.0
            } else {
                rc.echogenicity[rng.random_range(0..rc.echogenicity.len())]
            };
            spec.cysts.push(crate::domain::Cyst { center_x: cx, center_z: cz, radius: r, echogenicity });
        }
    }
    spec
}

/// Superposes one delayed, spread pulse per (scatterer, element) pair.
pub fn synthesize_rf(
    scatterers: &[Scatterer],
    array: &ArrayGeometry,
    tx: &PlaneWaveTx,
    sim: &SimConfig,
) -> Result<RfFrame> {
    if !(sim.duration > 0.0) || !sim.duration.is_finite() {
        return Err(Error::invalid("duration", "must be positive"));
    }
    if !(sim.fractional_bandwidth > 0.0 && sim.fractional_bandwidth < 2.0) {
        return Err(Error::invalid("fractional_bandwidth", "must lie in (0, 2)"));
    }
    let fs = array.sampling_frequency;
    let f0 = array.center_frequency;
    let c = array.sound_speed;
    let sigma = pulse_sigma(f0, sim.fractional_bandwidth);
    let half_width = PULSE_HALF_WIDTH_SIGMAS * sigma;
    let n_time = (sim.duration * fs).ceil() as usize;

    let latest = scatterers
        .iter()
        .map(|s| {
            let t_tx = tx_delay((s.x, s.z), tx, c);
            array
                .element_x
                .iter()
                .map(|&ex| t_tx + rx_delay((s.x, s.z), ex, c))
                .fold(f64::MIN, f64::max)
        })
        .fold(0.0f64, f64::max);
    let needed = latest + half_width - sim.t0;
    if !scatterers.is_empty() && (n_time as f64) / fs < needed {
        return Err(Error::DurationTooShort { needed, got: n_time as f64 / fs });
    }

    let rows: Vec<Vec<f64>> = array
        .element_x
        .par_iter()
        .map(|&ex| {
            let mut trace = vec![0.0; n_time];
            for s in scatterers {
                let dist = (s.x - ex).hypot(s.z);
                let tau = tx_delay((s.x, s.z), tx, c) + dist / c;
                let gain = s.amplitude / dist.max(MIN_SPREADING);
                let k_lo = (((tau - half_width - sim.t0) * fs).ceil()).max(0.0) as usize;
                let k_hi = (((tau + half_width - sim.t0) * fs).floor()).min(n_time as f64 - 1.0);
                if k_hi < 0.0 {
                    continue;
                }
                for (k, v) in trace.iter_mut().enumerate().take(k_hi as usize + 1).skip(k_lo) {
                    let t = k as f64 / fs + sim.t0 - tau;
                    *v += gain * gaussian_pulse(t, f0, sigma);
                }
            }
            trace
        })
        .collect();

    let mut samples = Array2::zeros((array.n_elements, n_time));
    for (m, row) in rows.into_iter().enumerate() {
        samples.row_mut(m).assign(&ndarray::Array1::from(row));
    }
    Ok(RfFrame {
        samples,
        t0: sim.t0,
        fs,
        geometry: array.clone(),
        tx: *tx,
    })
}
