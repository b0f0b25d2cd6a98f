//! Acquisition geometry, image grid, transmit and phantom descriptions.
//!
//! All quantities are SI: meters, seconds, hertz. Depth `z` is positive
//! downward with the transducer face at `z = 0`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Uniform linear array centered on `x = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_elements: usize,
    pub pitch: f64,
    pub element_x: Vec<f64>,
    pub center_frequency: f64,
    pub sampling_frequency: f64,
    pub sound_speed: f64,
}

fn require_positive(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive and finite, got {value}")))
    }
}

/// Builds a centered uniform linear array.
pub fn make_linear_array(
    n_elements: usize,
    pitch: f64,
    f0: f64,
    fs: f64,
    c: f64,
) -> Result<ArrayGeometry> {
    if n_elements < 2 {
        return Err(Error::invalid("n_elements", format!("need at least 2, got {n_elements}")));
    }
    require_positive("pitch", pitch)?;
    require_positive("center_frequency", f0)?;
    require_positive("sampling_frequency", fs)?;
    require_positive("sound_speed", c)?;
    if fs < 4.0 * f0 {
        return Err(Error::UndersampledPulse { fs, f0 });
    }
    let half = (n_elements as f64 - 1.0) / 2.0;
    let element_x = (0..n_elements).map(|i| (i as f64 - half) * pitch).collect();
    Ok(ArrayGeometry {
        n_elements,
        pitch,
        element_x,
        center_frequency: f0,
        sampling_frequency: fs,
        sound_speed: c,
    })
}

impl ArrayGeometry {
    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_frequency
    }

    /// Short content hash used to tie data files to the geometry that produced them.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n_elements as u64).to_le_bytes());
        for v in [self.pitch, self.center_frequency, self.sampling_frequency, self.sound_speed] {
            hasher.update(v.to_le_bytes());
        }
        for x in &self.element_x {
            hasher.update(x.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Uniform rectangular pixel grid, tileable by `patch_side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub n_x: usize,
    pub n_z: usize,
    pub patch_side: usize,
}

pub fn make_pixel_grid(
    x_span: (f64, f64),
    z_span: (f64, f64),
    n_x: usize,
    n_z: usize,
    patch_side: usize,
) -> Result<PixelGrid> {
    let finite = [x_span.0, x_span.1, z_span.0, z_span.1].iter().all(|v| v.is_finite());
    if !finite || x_span.1 <= x_span.0 {
        return Err(Error::invalid("x_span", format!("degenerate span {x_span:?}")));
    }
    if z_span.1 <= z_span.0 {
        return Err(Error::invalid("z_span", format!("degenerate span {z_span:?}")));
    }
    if z_span.0 <= 0.0 {
        return Err(Error::invalid("z_span", "z_min must be below the transducer face (> 0)"));
    }
    if patch_side == 0 {
        return Err(Error::invalid("patch_side", "must be positive"));
    }
    if n_x < 2 || n_z < 2 {
        return Err(Error::invalid("n_x/n_z", "need at least two pixels per axis"));
    }
    if !n_x.is_multiple_of(patch_side) || !n_z.is_multiple_of(patch_side) {
        return Err(Error::GridNotTileable { n_x, n_z, patch_side });
    }
    Ok(PixelGrid {
        x_min: x_span.0,
        x_max: x_span.1,
        z_min: z_span.0,
        z_max: z_span.1,
        n_x,
        n_z,
        patch_side,
    })
}

impl PixelGrid {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / (self.n_z - 1) as f64
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.x_min + ix as f64 * self.dx()
    }

    pub fn z(&self, iz: usize) -> f64 {
        self.z_min + iz as f64 * self.dz()
    }

    /// Nearest column index, clamped to the grid.
    pub fn nearest_ix(&self, x: f64) -> usize {
        let f = ((x - self.x_min) / self.dx()).round();
        f.clamp(0.0, (self.n_x - 1) as f64) as usize
    }

    pub fn nearest_iz(&self, z: f64) -> usize {
        let f = ((z - self.z_min) / self.dz()).round();
        f.clamp(0.0, (self.n_z - 1) as f64) as usize
    }

    pub fn n_pixels(&self) -> usize {
        self.n_x * self.n_z
    }

    /// Patch counts along (depth, lateral).
    pub fn patch_counts(&self) -> (usize, usize) {
        (self.n_z / self.patch_side, self.n_x / self.patch_side)
    }

    pub fn n_patches(&self) -> usize {
        let (pz, px) = self.patch_counts();
        pz * px
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x_min && x <= self.x_max && z >= self.z_min && z <= self.z_max
    }

    /// Same extent with a different patch side (used when re-tiling for tests).
    pub fn with_patch_side(&self, patch_side: usize) -> Result<PixelGrid> {
        make_pixel_grid(
            (self.x_min, self.x_max),
            (self.z_min, self.z_max),
            self.n_x,
            self.n_z,
            patch_side,
        )
    }
}

/// Single unfocused plane-wave transmit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveTx {
    pub steering_angle: f64,
}

impl PlaneWaveTx {
    pub fn new(steering_angle: f64) -> Result<Self> {
        if !steering_angle.is_finite() || steering_angle.abs() >= std::f64::consts::FRAC_PI_4 {
            return Err(Error::invalid(
                "steering_angle",
                format!("|angle| must be below pi/4, got {steering_angle}"),
            ));
        }
        Ok(Self { steering_angle })
    }

    pub fn broadside() -> Self {
        Self { steering_angle: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cyst {
    pub center_x: f64,
    pub center_z: f64,
    pub radius: f64,
    /// 0 = anechoic, 1 = same as background.
    pub echogenicity: f64,
}

impl Cyst {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        (x - self.center_x).hypot(z - self.center_z) < self.radius
    }
}

/// Explicit scatterers, cysts and a random speckle background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default)]
    pub scatterers: Vec<Scatterer>,
    #[serde(default)]
    pub cysts: Vec<Cyst>,
    /// Background scatterers per square meter.
    #[serde(default)]
    pub background_scatterer_density: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn empty() -> Self {
        Self {
            scatterers: Vec::new(),
            cysts: Vec::new(),
            background_scatterer_density: 0.0,
            rng_seed: 0,
        }
    }

    /// Checks that every scatterer and cyst circle lies in the field of view.
    pub fn validate(&self, fov: &PixelGrid) -> Result<()> {
        if !(self.background_scatterer_density >= 0.0 && self.background_scatterer_density.is_finite()) {
            return Err(Error::invalid("background_scatterer_density", "must be finite and >= 0"));
        }
        for s in &self.scatterers {
            if !fov.contains(s.x, s.z) || !s.amplitude.is_finite() {
                return Err(Error::invalid(
                    "scatterers",
                    format!("scatterer at ({}, {}) outside the field of view", s.x, s.z),
                ));
            }
        }
        for c in &self.cysts {
            if !(c.radius > 0.0) || !(0.0..=1.0).contains(&c.echogenicity) {
                return Err(Error::invalid("cysts", "radius must be > 0 and echogenicity in [0, 1]"));
            }
            let inside = fov.contains(c.center_x - c.radius, c.center_z - c.radius)
                && fov.contains(c.center_x + c.radius, c.center_z + c.radius);
            if !inside {
                return Err(Error::invalid(
                    "cysts",
                    format!("cyst at ({}, {}) extends outside the field of view", c.center_x, c.center_z),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_element_array_is_centered() {
        let a = make_linear_array(2, 3e-4, 5e6, 2e7, 1540.0).unwrap();
        assert_abs_diff_eq!(a.element_x[0], -1.5e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(a.element_x[1], 1.5e-4, epsilon = 1e-15);
    }

    #[test]
    fn sixty_four_element_first_position() {
        let a = make_linear_array(64, 3e-4, 5e6, 2e7, 1540.0).unwrap();
        assert_abs_diff_eq!(a.element_x[0], -9.45e-3, epsilon = 1e-12);
        let sum: f64 = a.element_x.iter().sum();
        assert!(sum.abs() < 1e-12);
        for w in a.element_x.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 3e-4, epsilon = 1e-12);
        }
        for i in 0..64 {
            assert_abs_diff_eq!(a.element_x[i], -a.element_x[63 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn undersampled_pulse_rejected() {
        let err = make_linear_array(64, 3e-4, 5e6, 1e7, 1540.0).unwrap_err();
        assert!(matches!(err, Error::UndersampledPulse { .. }));
        assert!(err.to_string().contains("undersampled pulse"));
    }

    #[test]
    fn non_positive_parameters_rejected() {
        assert!(make_linear_array(1, 3e-4, 5e6, 2e7, 1540.0).is_err());
        assert!(make_linear_array(4, 0.0, 5e6, 2e7, 1540.0).is_err());
        assert!(make_linear_array(4, 3e-4, -5e6, 2e7, 1540.0).is_err());
        assert!(make_linear_array(4, 3e-4, 5e6, 2e7, 0.0).is_err());
    }

    #[test]
    fn grid_counts_and_spacing() {
        let g = make_pixel_grid((-0.01, 0.01), (0.01, 0.05), 64, 128, 32).unwrap();
        assert_eq!(g.n_pixels(), 8192);
        assert_eq!(g.n_patches(), 8);
        assert_eq!(g.patch_counts(), (4, 2));
        assert_abs_diff_eq!(g.dx(), 20e-3 / 63.0, epsilon = 1e-15);
    }

    #[test]
    fn untileable_grid_rejected() {
        let err = make_pixel_grid((-0.01, 0.01), (0.01, 0.05), 60, 128, 32).unwrap_err();
        assert!(err.to_string().contains("grid not tileable"));
    }

    #[test]
    fn grid_rejects_pixels_above_transducer() {
        assert!(make_pixel_grid((-0.01, 0.01), (0.0, 0.05), 64, 128, 32).is_err());
    }

    #[test]
    fn coordinate_round_trip() {
        let g = make_pixel_grid((-0.013, 0.007), (0.004, 0.031), 96, 64, 32).unwrap();
        for ix in 0..g.n_x {
            assert_eq!(g.nearest_ix(g.x(ix)), ix);
        }
        for iz in 0..g.n_z {
            assert_eq!(g.nearest_iz(g.z(iz)), iz);
        }
    }

    #[test]
    fn steering_limit() {
        assert!(PlaneWaveTx::new(0.7).is_ok());
        assert!(PlaneWaveTx::new(std::f64::consts::FRAC_PI_4).is_err());
    }
}
