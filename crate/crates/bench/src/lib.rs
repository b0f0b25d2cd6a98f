//! Fixtures shared by the criterion benches.

use beamlab::delayrf::DelayedTensor;
use beamlab::simulator::{realize_phantom, synthesize_rf};
use beamlab::{
    make_linear_array, make_pixel_grid, Cyst, DasConfig, ImagingContext, MvdrConfig, PhantomSpec, PlaneWaveTx,
    RfFrame, SimConfig, UNetArch, UNetParams,
};

/// One speckle frame with a cyst, already delay-compensated.
pub struct Fixture {
    pub ctx: ImagingContext,
    pub frame: RfFrame,
    pub delayed: DelayedTensor,
    pub mvdr: MvdrConfig,
    pub params: UNetParams,
}

#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub n_elements: usize,
    pub pitch: f64,
    pub f0: f64,
    pub n_x: usize,
    pub n_z: usize,
    pub patch_side: usize,
}

impl Scale {
    /// 64 elements on a 64 x 128 grid with 32 x 32 patches.
    pub const DEFAULT: Scale = Scale { n_elements: 64, pitch: 3e-4, f0: 5e6, n_x: 64, n_z: 128, patch_side: 32 };
    /// Four elements on a 32 x 64 grid with 8 x 8 patches.
    pub const TOY: Scale = Scale { n_elements: 4, pitch: 1e-3, f0: 2.5e6, n_x: 32, n_z: 64, patch_side: 8 };
}

pub fn fixture(scale: Scale) -> Fixture {
    let fs = 2e7;
    let c = 1540.0;
    let array = make_linear_array(scale.n_elements, scale.pitch, scale.f0, fs, c).expect("array");
    let half_x = 0.5 * scale.pitch * (scale.n_elements - 1) as f64;
    let dz = c / (2.0 * fs);
    let z0 = 10e-3;
    let grid = make_pixel_grid((-half_x, half_x), (z0, z0 + dz * (scale.n_z - 1) as f64), scale.n_x, scale.n_z, scale.patch_side)
        .expect("grid");
    let tx = PlaneWaveTx::broadside();
    let cyst = Cyst { center_x: 0.0, center_z: 0.5 * (grid.z_min + grid.z_max), radius: 0.25 * half_x, echogenicity: 0.0 };
    let spec = PhantomSpec { cysts: vec![cyst], background_scatterer_density: 1e8, rng_seed: 1, ..PhantomSpec::empty() };
    let frame = synthesize_rf(&realize_phantom(&spec, &grid), &array, &tx, &SimConfig::covering(&grid, &array, &tx))
        .expect("frame");
    let ctx = ImagingContext::new(&grid, &array, &DasConfig::default()).expect("context");
    let delayed = ctx.delay(&frame).expect("delay");
    let params = UNetParams::init(UNetArch::for_elements(scale.n_elements), 0).expect("params");
    Fixture { ctx, frame, delayed, mvdr: MvdrConfig::default_for(scale.n_elements), params }
}
