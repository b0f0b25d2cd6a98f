//! Image quality metrics and wall-clock benchmarking.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::das::BModePatch;
use crate::delayrf::extract_patches;
use crate::error::{Error, Result};
use crate::mvdr::{mvdr_beamform, MvdrConfig};
use crate::objective::{mae, ssim};
use crate::pipeline::{bmode_tiles, BModeImage, CompressedTiles, ImagingContext, Method, PatchTransform};
use crate::simulator::RfFrame;

/// Which pixels form the background region of a contrast measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    /// Everything inside the outer circle, cyst included.
    #[default]
    Inclusive,
    /// Only the ring between the two circles.
    Annulus,
}

type Pixel = (usize, usize);

/// Concentric circles around a cyst.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CystRoi {
    pub center_x: f64,
    pub center_z: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl CystRoi {
    pub fn validate(&self, image: &BModeImage) -> Result<()> {
        if !(self.inner_radius > 0.0 && self.outer_radius > self.inner_radius) {
            return Err(Error::invalid("roi", "need 0 < inner_radius < outer_radius"));
        }
        let g = &image.grid;
        let r = self.outer_radius;
        if self.center_x - r < g.x_min || self.center_x + r > g.x_max || self.center_z - r < g.z_min || self.center_z + r > g.z_max {
            return Err(Error::invalid("roi", "outer circle leaves the grid"));
        }
        Ok(())
    }

    fn regions(&self, image: &BModeImage, mode: RoiMode) -> (Vec<Pixel>, Vec<Pixel>) {
        let g = &image.grid;
        let (mut inner, mut outer) = (Vec::new(), Vec::new());
        for iz in 0..g.n_z {
            for ix in 0..g.n_x {
                let d = (g.x(ix) - self.center_x).hypot(g.z(iz) - self.center_z);
                let is_inner = d <= self.inner_radius;
                if is_inner {
                    inner.push((iz, ix));
                }
                if d <= self.outer_radius && (mode == RoiMode::Inclusive || !is_inner) {
                    outer.push((iz, ix));
                }
            }
        }
        (inner, outer)
    }
}

/// Undo log compression: display value in `[0, 1]` back to envelope relative to the reference.
pub fn linear_envelope(image: &BModeImage) -> Array2<f64> {
    let dr = image.dynamic_range_db;
    image.values.mapv(|v| 10f64.powf((v - 1.0) * dr / 20.0))
}

/// `20 log10(mu_inner / mu_outer)` over linear envelope values.
pub fn contrast_ratio_envelope(env: &Array2<f64>, image: &BModeImage, roi: &CystRoi, mode: RoiMode) -> Result<f64> {
    roi.validate(image)?;
    let (inner, outer) = roi.regions(image, mode);
    if inner.is_empty() {
        return Err(Error::EmptyRoi("inner"));
    }
    if outer.is_empty() {
        return Err(Error::EmptyRoi("outer"));
    }
    // offsets from the first sample keep constant regions exact
    let mean = |px: &[(usize, usize)]| {
        let base = env[px[0]];
        base + px.iter().map(|&p| env[p] - base).sum::<f64>() / px.len() as f64
    };
    let (mu1, mu2) = (mean(&inner), mean(&outer));
    if mu2 <= 0.0 {
        return Err(Error::ZeroBackground);
    }
    Ok(20.0 * (mu1 / mu2).log10())
}

/// Contrast ratio in dB, computed after inverting the image's log compression.
pub fn contrast_ratio(image: &BModeImage, roi: &CystRoi, mode: RoiMode) -> Result<f64> {
    contrast_ratio_envelope(&linear_envelope(image), image, roi, mode)
}

/// Full width at half maximum of `profile` around its local peak at `peak`, in samples.
pub fn fwhm_profile(profile: &[f64], peak: usize) -> Result<f64> {
    let half = profile[peak] / 2.0;
    let mut left = None;
    for i in (0..peak).rev() {
        if profile[i] <= half {
            let t = (profile[i + 1] - half) / (profile[i + 1] - profile[i]);
            left = Some(i as f64 + 1.0 - t);
            break;
        }
    }
    let mut right = None;
    for i in peak + 1..profile.len() {
        if profile[i] <= half {
            let t = (profile[i - 1] - half) / (profile[i - 1] - profile[i]);
            right = Some(i as f64 - 1.0 + t);
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok(r - l),
        _ => Err(Error::NoHalfCrossing("lateral profile")),
    }
}

/// `20 log10(mu_inner / mu_outer)` taken directly on display values in `[0, 1]`.
/// Depends on the dynamic range; kept for comparison with reports that use it.
pub fn contrast_ratio_display(image: &BModeImage, roi: &CystRoi, mode: RoiMode) -> Result<Option<f64>> {
    match contrast_ratio_envelope(&image.values, image, roi, mode) {
        Err(Error::ZeroBackground) => Ok(None),
        other => other.map(Some),
    }
}

/// Lateral FWHM in meters of the point target nearest `point`.
///
/// The brightest pixel within three pixels of `point` is taken as the peak.
pub fn fwhm_lateral(image: &BModeImage, point: (f64, f64)) -> Result<f64> {
    let g = &image.grid;
    let env = linear_envelope(image);
    let (cz, cx) = (g.nearest_iz(point.1), g.nearest_ix(point.0));
    let mut peak = (cz, cx);
    for iz in cz.saturating_sub(3)..(cz + 4).min(g.n_z) {
        for ix in cx.saturating_sub(3)..(cx + 4).min(g.n_x) {
            if env[(iz, ix)] > env[peak] {
                peak = (iz, ix);
            }
        }
    }
    let row: Vec<f64> = env.row(peak.0).to_vec();
    Ok(fwhm_profile(&row, peak.1)? * g.dx())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastEntry {
    pub roi: usize,
    pub depth: f64,
    pub method: Method,
    pub cr_db: f64,
    /// Same ratio over the log-compressed display values; `None` if the outer mean is 0.
    pub cr_display_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwhmEntry {
    pub x: f64,
    pub z: f64,
    pub method: Method,
    pub fwhm: f64,
}

/// Similarity of an image to the MVDR reference image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub method: Method,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub contrast: Vec<ContrastEntry>,
    pub fwhm: Vec<FwhmEntry>,
    pub similarity: Vec<SimilarityEntry>,
    pub timings: Vec<BenchResult>,
}

/// One row of the contrast table: depth and CR per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub depth_mm: f64,
    pub learned: Option<f64>,
    pub mvdr: Option<f64>,
    pub das: Option<f64>,
}

impl MetricsReport {
    /// Measure every image against every ROI and point target.
    ///
    /// `images` may hold any subset of methods; similarity is reported only when
    /// an MVDR image is present.
    pub fn evaluate(images: &[BModeImage], rois: &[CystRoi], mode: RoiMode, points: &[(f64, f64)]) -> Result<Self> {
        let mut report = MetricsReport::default();
        for (k, roi) in rois.iter().enumerate() {
            for img in images {
                report.contrast.push(ContrastEntry {
                    roi: k,
                    depth: roi.center_z,
                    method: img.method,
                    cr_db: contrast_ratio(img, roi, mode)?,
                    cr_display_db: contrast_ratio_display(img, roi, mode)?,
                });
            }
        }
        for &(x, z) in points {
            for img in images {
                report.fwhm.push(FwhmEntry { x, z, method: img.method, fwhm: fwhm_lateral(img, (x, z))? });
            }
        }
        if let Some(reference) = images.iter().find(|i| i.method == Method::Mvdr) {
            for img in images.iter().filter(|i| i.method != Method::Mvdr) {
                report.similarity.push(SimilarityEntry {
                    method: img.method,
                    ssim: ssim(&img.values, &reference.values)?,
                    mae: mae(&img.values, &reference.values)?,
                });
            }
        }
        Ok(report)
    }

    pub fn contrast_table(&self) -> Vec<ContrastRow> {
        let n = self.contrast.iter().map(|c| c.roi + 1).max().unwrap_or(0);
        (0..n)
            .map(|k| {
                let get = |m: Method| self.contrast.iter().find(|c| c.roi == k && c.method == m).map(|c| c.cr_db);
                let depth = self.contrast.iter().find(|c| c.roi == k).map_or(0.0, |c| c.depth);
                ContrastRow { depth_mm: depth * 1e3, learned: get(Method::Learned), mvdr: get(Method::Mvdr), das: get(Method::Das) }
            })
            .collect()
    }
}

/// What to time.
#[derive(Clone, Copy)]
pub enum BenchTarget<'a> {
    Das,
    Mvdr(&'a MvdrConfig),
    Learned(&'a dyn PatchTransform),
}

impl BenchTarget<'_> {
    pub fn method(&self) -> Method {
        match self {
            BenchTarget::Das => Method::Das,
            BenchTarget::Mvdr(_) => Method::Mvdr,
            BenchTarget::Learned(_) => Method::Learned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub median_ms: f64,
    pub min_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: Method,
    pub repetitions: usize,
    pub threads: usize,
    /// delay, beamform, envelope, total
    pub stages: Vec<StageTiming>,
}

impl BenchResult {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn total(&self) -> &StageTiming {
        self.stage("total").expect("total is always recorded")
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn summarize(stage: &str, mut xs: Vec<f64>) -> StageTiming {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let median = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
    StageTiming { stage: stage.into(), median_ms: median, min_ms: xs[0] }
}

fn run_once(ctx: &ImagingContext, target: BenchTarget<'_>, frame: &RfFrame) -> Result<[f64; 3]> {
    let t = Instant::now();
    let delayed = ctx.delay(frame)?;
    let t_delay = ms(t);
    let method = target.method();
    let (t_bf, t_env) = match target {
        BenchTarget::Das | BenchTarget::Mvdr(_) => {
            let t = Instant::now();
            let rf = match target {
                BenchTarget::Mvdr(cfg) => mvdr_beamform(delayed.data.view(), cfg)?,
                _ => ctx.das_rf(&delayed)?,
            };
            let t_bf = ms(t);
            let t = Instant::now();
            let tiles = bmode_tiles(&rf, ctx.side(), ctx.das.dynamic_range_db, &ctx.plan);
            std::hint::black_box(ctx.assemble(&tiles, method)?);
            (t_bf, ms(t))
        }
        BenchTarget::Learned(transform) => {
            let t = Instant::now();
            let patches = extract_patches(&delayed.data, ctx.side());
            let rf: Vec<Array2<f64>> = patches.par_iter().map(|z| ctx.transformed_rf(z, transform)).collect::<Result<_>>()?;
            let t_bf = ms(t);
            let t = Instant::now();
            let das = ctx.das_tiles(&delayed)?;
            let out: Vec<BModePatch> =
                rf.par_iter().zip(das.patches.par_iter()).map(|(bf, d)| ctx.finish_patch(bf, d, das.reference)).collect();
            std::hint::black_box(ctx.assemble(&CompressedTiles { patches: out, reference: das.reference }, method)?);
            (t_bf, ms(t))
        }
    };
    Ok([t_delay, t_bf, t_env])
}

/// Median and minimum wall-clock per stage over `repetitions` runs after one warmup.
///
/// With `threads == 1` everything runs on a dedicated single-thread pool.
pub fn benchmark(
    ctx: &ImagingContext,
    target: BenchTarget<'_>,
    frame: &RfFrame,
    repetitions: usize,
    threads: usize,
) -> Result<BenchResult> {
    if repetitions == 0 {
        return Err(Error::invalid("repetitions", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    pool.install(|| {
        run_once(ctx, target, frame)?;
        let mut runs = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            runs.push(run_once(ctx, target, frame)?);
        }
        let col = |k: usize| runs.iter().map(|r| r[k]).collect::<Vec<_>>();
        Ok(BenchResult {
            method: target.method(),
            repetitions,
            threads: pool.current_num_threads(),
            stages: vec![
                summarize("delay", col(0)),
                summarize("beamform", col(1)),
                summarize("envelope", col(2)),
                summarize("total", runs.iter().map(|r| r.iter().sum()).collect()),
            ],
        })
    })
}
