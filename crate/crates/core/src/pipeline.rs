//! Per-patch inference and stitching into full B-mode images.
//!
//! Every image, whatever the method, is formed patch by patch: beamformed RF
//! is cut into tiles, each tile is envelope-detected on its own, and all
//! tiles of one image share a single log-compression reference (the image's
//! largest envelope value).

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::das::{das_sum, das_weights, envelope_with, log_compress, ApodizationProfile, BModePatch, DasConfig, HilbertPlan};
use crate::delayrf::{delay_compensate, extract_patches, DelayedTensor, RfPatch};
use crate::domain::{ArrayGeometry, PixelGrid};
use crate::error::{Error, Result};
use crate::mvdr::{mvdr_beamform, MvdrConfig};
use crate::neural::{transform_patch, UNetParams};
use crate::objective::scale;
use crate::simulator::RfFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Das,
    Mvdr,
    Learned,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::Mvdr => "mvdr",
            Method::Learned => "learned",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "das" => Ok(Method::Das),
            "mvdr" => Ok(Method::Mvdr),
            "learned" => Ok(Method::Learned),
            other => Err(Error::invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Log-compressed image in `[0, 1]` on a pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BModeImage {
    /// `[n_z, n_x]`
    pub values: Array2<f64>,
    pub grid: PixelGrid,
    pub method: Method,
    pub dynamic_range_db: f64,
}

/// Maps a delayed-data patch to a same-shape transformed patch.
pub trait PatchTransform: Sync {
    fn transform(&self, z: &Array3<f64>) -> Result<Array3<f64>>;
}

impl PatchTransform for UNetParams {
    fn transform(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(transform_patch(self, z)?.0)
    }
}

/// Passes delayed data through untouched; reduces learned inference to DAS.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bypass;

impl PatchTransform for Bypass {
    fn transform(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(z.clone())
    }
}

/// Places patches at their origins; fails unless every pixel is written exactly once.
pub fn stitch(patches: &[BModePatch], n_z: usize, n_x: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((n_z, n_x));
    let mut hits = Array2::<u8>::zeros((n_z, n_x));
    for p in patches {
        let (rows, cols) = p.values.dim();
        let (iz, ix) = p.origin;
        if iz + rows > n_z || ix + cols > n_x {
            return Err(Error::DimensionMismatch(format!("patch at {:?} exceeds the grid", p.origin)));
        }
        out.slice_mut(s![iz..iz + rows, ix..ix + cols]).assign(&p.values);
        hits.slice_mut(s![iz..iz + rows, ix..ix + cols]).mapv_inplace(|h| h.saturating_add(1));
    }
    if hits.iter().any(|&h| h != 1) {
        return Err(Error::DimensionMismatch("patches do not partition the grid".into()));
    }
    Ok(out)
}

/// Cuts an RF image into tiles and envelope-detects each one.
fn tile_envelopes(rf: &Array2<f64>, side: usize, plan: &HilbertPlan) -> Vec<(Array2<f64>, (usize, usize))> {
    let (n_z, n_x) = rf.dim();
    let mut origins = Vec::new();
    for pz in 0..n_z / side {
        for px in 0..n_x / side {
            origins.push((pz * side, px * side));
        }
    }
    origins
        .into_par_iter()
        .map(|(iz, ix)| {
            let tile = rf.slice(s![iz..iz + side, ix..ix + side]).to_owned();
            (envelope_with(plan, &tile), (iz, ix))
        })
        .collect()
}

/// Compressed patches plus the shared reference used to compress them.
#[derive(Debug, Clone)]
pub struct CompressedTiles {
    pub patches: Vec<BModePatch>,
    pub reference: f64,
}

/// Per-patch envelope, then log compression against the image-wide envelope maximum.
pub fn bmode_tiles(rf: &Array2<f64>, side: usize, dynamic_range_db: f64, plan: &HilbertPlan) -> CompressedTiles {
    let envs = tile_envelopes(rf, side, plan);
    let reference = envs.iter().flat_map(|(e, _)| e.iter()).fold(0.0f64, |m, &v| m.max(v));
    let patches = envs
        .into_iter()
        .map(|(env, origin)| BModePatch { values: log_compress(&env, dynamic_range_db, Some(reference)), origin })
        .collect();
    CompressedTiles { patches, reference }
}

/// Everything fixed for one array/grid/DAS configuration.
#[derive(Debug, Clone)]
pub struct ImagingContext {
    pub grid: PixelGrid,
    pub array: ArrayGeometry,
    pub das: DasConfig,
    pub apod: ApodizationProfile,
    pub plan: HilbertPlan,
}

impl ImagingContext {
    pub fn new(grid: &PixelGrid, array: &ArrayGeometry, das: &DasConfig) -> Result<Self> {
        if grid.patch_side < 4 {
            return Err(Error::invalid("patch_side", "envelope detection needs at least 4 depth samples"));
        }
        Ok(Self {
            grid: grid.clone(),
            array: array.clone(),
            das: *das,
            apod: das_weights(grid, array, das.f_number, das.window)?,
            plan: HilbertPlan::new(grid.patch_side),
        })
    }

    pub fn side(&self) -> usize {
        self.grid.patch_side
    }

    pub fn delay(&self, frame: &RfFrame) -> Result<DelayedTensor> {
        if frame.n_elements() != self.array.n_elements {
            return Err(Error::DimensionMismatch(format!(
                "frame has {} elements, context expects {}",
                frame.n_elements(),
                self.array.n_elements
            )));
        }
        delay_compensate(frame, &self.grid)
    }

    pub fn assemble(&self, tiles: &CompressedTiles, method: Method) -> Result<BModeImage> {
        Ok(BModeImage {
            values: stitch(&tiles.patches, self.grid.n_z, self.grid.n_x)?,
            grid: self.grid.clone(),
            method,
            dynamic_range_db: self.das.dynamic_range_db,
        })
    }

    /// DAS-beamformed RF of the whole tensor.
    pub fn das_rf(&self, delayed: &DelayedTensor) -> Result<Array2<f64>> {
        das_sum(delayed.data.view(), &self.apod, (0, 0))
    }

    pub fn das_tiles(&self, delayed: &DelayedTensor) -> Result<CompressedTiles> {
        Ok(bmode_tiles(&self.das_rf(delayed)?, self.side(), self.das.dynamic_range_db, &self.plan))
    }

    pub fn das_image(&self, delayed: &DelayedTensor) -> Result<BModeImage> {
        self.assemble(&self.das_tiles(delayed)?, Method::Das)
    }

    pub fn mvdr_tiles(&self, delayed: &DelayedTensor, cfg: &MvdrConfig) -> Result<CompressedTiles> {
        let rf = mvdr_beamform(delayed.data.view(), cfg)?;
        Ok(bmode_tiles(&rf, self.side(), self.das.dynamic_range_db, &self.plan))
    }

    pub fn mvdr_image(&self, delayed: &DelayedTensor, cfg: &MvdrConfig) -> Result<BModeImage> {
        self.assemble(&self.mvdr_tiles(delayed, cfg)?, Method::Mvdr)
    }

    /// `Scale(B(transform(z)), B(z))` for one patch, where `B` is DAS, per-patch
    /// envelope and log compression against `reference`.
    pub fn infer_patch<T: PatchTransform + ?Sized>(
        &self,
        z: &RfPatch,
        transform: &T,
        das_patch: &BModePatch,
        reference: f64,
    ) -> Result<BModePatch> {
        let bf = self.transformed_rf(z, transform)?;
        Ok(self.finish_patch(&bf, das_patch, reference))
    }

    /// Network transform followed by DAS summation, before envelope detection.
    pub fn transformed_rf<T: PatchTransform + ?Sized>(&self, z: &RfPatch, transform: &T) -> Result<Array2<f64>> {
        let transformed = transform.transform(&z.data)?;
        if transformed.dim() != z.data.dim() {
            return Err(Error::DimensionMismatch("transform changed the patch shape".into()));
        }
        das_sum(transformed.view(), &self.apod, z.origin)
    }

    /// Envelope, log compression and Scale for one beamformed patch.
    pub fn finish_patch(&self, bf: &Array2<f64>, das_patch: &BModePatch, reference: f64) -> BModePatch {
        let env = envelope_with(&self.plan, bf);
        let h = log_compress(&env, self.das.dynamic_range_db, Some(reference));
        BModePatch { values: scale(&h, &das_patch.values), origin: das_patch.origin }
    }

    /// Learned image from an already delayed tensor.
    pub fn infer_delayed<T: PatchTransform + ?Sized>(&self, delayed: &DelayedTensor, transform: &T) -> Result<BModeImage> {
        let das = self.das_tiles(delayed)?;
        let patches = extract_patches(&delayed.data, self.side());
        let out: Vec<BModePatch> = patches
            .par_iter()
            .zip(das.patches.par_iter())
            .map(|(z, d)| self.infer_patch(z, transform, d, das.reference))
            .collect::<Result<_>>()?;
        self.assemble(&CompressedTiles { patches: out, reference: das.reference }, Method::Learned)
    }

    pub fn infer_image<T: PatchTransform + ?Sized>(&self, frame: &RfFrame, transform: &T) -> Result<BModeImage> {
        self.infer_delayed(&self.delay(frame)?, transform)
    }
}
