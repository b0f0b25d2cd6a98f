//! Independent reference checks shared by the core integration tests and the
//! acceptance target: central finite differences and a loop-based MVDR.
#![allow(dead_code)]

use beamlab::das::{
    envelope_smooth, envelope_smooth_backward, log_compress_smooth, log_compress_smooth_backward, HilbertPlan,
};
use beamlab::delayrf::extract_patches;
use beamlab::mvdr::{mvdr_beamform, MvdrConfig};
use beamlab::neural::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, maxpool2,
    maxpool2_backward, upsample2, upsample2_backward, Tensor4, DEFAULT_LEAKY_SLOPE,
};
use beamlab::objective::{mae, mae_grad, scale, scale_backward, ssim, ssim_grad};
use beamlab::simulator::{synthesize_rf, SimConfig};
use beamlab::training::{patch_objective, PatchExample};
use beamlab::{
    make_linear_array, make_pixel_grid, DasConfig, ImagingContext, LossWeights, PhantomSpec, PlaneWaveTx, UNetArch,
    UNetParams,
};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Worst error seen by one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub draws: usize,
    pub redraws: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + t * b).collect()
}

/// One random directional derivative compared with the analytic gradient.
///
/// Returns `None` when the step seems to cross a kink: the central estimates
/// at `h` and `h / 2` disagree by more than the tolerance allows.
fn directional(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    v: &[f64],
    h: f64,
    tol: f64,
) -> Option<f64> {
    let fd = |h: f64| (f(&axpy(x, h, v)) - f(&axpy(x, -h, v))) / (2.0 * h);
    let (d1, d2) = (fd(h), fd(h / 2.0));
    let an = dot(grad, v);
    let scale = an.abs().max(d1.abs()).max(1e-6);
    if (d1 - d2).abs() / scale > 0.25 * tol {
        return None;
    }
    Some((d2 - an).abs() / scale)
}

/// Runs `draws` successful directional checks. `sample` produces a point, the
/// scalar function, and its gradient at that point.
pub fn check<S>(name: &'static str, draws: usize, h: f64, tol: f64, seed: u64, mut sample: S) -> GradReport
where
    S: FnMut(&mut ChaCha8Rng) -> (Vec<f64>, Box<dyn Fn(&[f64]) -> f64>, Vec<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { name, draws: 0, redraws: 0, max_rel_err: 0.0, tol };
    while report.draws < draws {
        let (x, f, g) = sample(&mut rng);
        let v = normal_vec(&mut rng, x.len());
        match directional(f.as_ref(), &x, &g, &v, h, tol) {
            Some(e) => {
                report.draws += 1;
                report.max_rel_err = report.max_rel_err.max(e);
            }
            None => {
                report.redraws += 1;
                assert!(report.redraws < 10 * draws, "{name}: too many kinks");
            }
        }
    }
    report
}

fn tensor(dims: [usize; 4], data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(dims, data.to_vec()).unwrap()
}

fn arr2(dim: (usize, usize), data: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(dim, data.to_vec()).unwrap()
}

type Sample = (Vec<f64>, Box<dyn Fn(&[f64]) -> f64>, Vec<f64>);

/// Wraps a map `x -> y` with a fixed random readout `<r, y>`, whose gradient is the backward of `r`.
fn readout<F, B>(rng: &mut ChaCha8Rng, x: Vec<f64>, n_out: usize, forward: F, backward: B) -> Sample
where
    F: Fn(&[f64]) -> Vec<f64> + 'static,
    B: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let r = normal_vec(rng, n_out);
    let g = backward(&x, &r);
    let f = move |p: &[f64]| dot(&r, &forward(p));
    (x, Box::new(f), g)
}

pub fn conv_report(draws: usize) -> GradReport {
    check("conv", draws, 1e-4, 1e-6, 1, |rng| {
        let (cin, cout, hw) = (3, 2, 5);
        let dims = [2, cin, hw, hw];
        let (nx, nk) = (2 * cin * hw * hw, cout * cin * 9);
        let x = normal_vec(rng, nx + nk + cout);
        let split = move |p: &[f64]| (tensor(dims, &p[..nx]), p[nx..nx + nk].to_vec(), p[nx + nk..].to_vec());
        readout(
            rng,
            x,
            2 * cout * hw * hw,
            move |p| {
                let (t, k, b) = split(p);
                conv2d(&t, &k, &b).unwrap().data
            },
            move |p, r| {
                let (t, k, _) = split(p);
                let (gx, gk, gb) = conv2d_backward(&t, &k, &tensor([2, cout, hw, hw], r));
                [gx.data, gk, gb].concat()
            },
        )
    })
}

pub fn leaky_relu_report(draws: usize) -> GradReport {
    let dims = [1, 2, 4, 4];
    check("leaky_relu", draws, 1e-6, 1e-6, 2, move |rng| {
        let x = normal_vec(rng, 32);
        readout(
            rng,
            x,
            32,
            move |p| leaky_relu(&tensor(dims, p), DEFAULT_LEAKY_SLOPE).data,
            move |p, r| leaky_relu_backward(&tensor(dims, p), &tensor(dims, r), DEFAULT_LEAKY_SLOPE).data,
        )
    })
}

pub fn maxpool_report(draws: usize) -> GradReport {
    let dims = [2, 2, 4, 6];
    check("maxpool", draws, 1e-6, 1e-6, 3, move |rng| {
        let x = normal_vec(rng, 96);
        readout(
            rng,
            x,
            24,
            move |p| maxpool2(&tensor(dims, p)).unwrap().0.data,
            move |p, r| {
                let (_, arg) = maxpool2(&tensor(dims, p)).unwrap();
                maxpool2_backward(dims, &arg, &tensor([2, 2, 2, 3], r)).data
            },
        )
    })
}

pub fn upsample_report(draws: usize) -> GradReport {
    let dims = [1, 3, 2, 3];
    check("upsample", draws, 1e-4, 1e-6, 4, move |rng| {
        let x = normal_vec(rng, 18);
        readout(
            rng,
            x,
            72,
            move |p| upsample2(&tensor(dims, p)).data,
            move |_, r| upsample2_backward(&tensor([1, 3, 4, 6], r)).data,
        )
    })
}

pub fn concat_report(draws: usize) -> GradReport {
    check("concat", draws, 1e-4, 1e-6, 5, |rng| {
        let x = normal_vec(rng, 2 * 5 * 9);
        readout(
            rng,
            x,
            2 * 5 * 9,
            |p| concat_channels(&tensor([2, 2, 3, 3], &p[..36]), &tensor([2, 3, 3, 3], &p[36..])).unwrap().data,
            |_, r| {
                let (ga, gb) = concat_channels_backward(&tensor([2, 5, 3, 3], r), 2);
                [ga.data, gb.data].concat()
            },
        )
    })
}

pub fn mae_report(draws: usize) -> GradReport {
    check("mae", draws, 1e-4, 1e-6, 6, |rng| {
        let a = normal_vec(rng, 64);
        let b = arr2((8, 8), &normal_vec(rng, 64));
        let g = mae_grad(&arr2((8, 8), &a), &b).into_raw_vec_and_offset().0;
        (a, Box::new(move |p: &[f64]| mae(&arr2((8, 8), p), &b).unwrap()), g)
    })
}

/// Images in `[0, 1]`, the range the objective sees.
pub fn ssim_report(draws: usize) -> GradReport {
    check("ssim", draws, 1e-5, 1e-5, 7, |rng| {
        let a: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let b = Array2::from_shape_fn((10, 10), |_| rng.random_range(0.0..1.0));
        let g = ssim_grad(&arr2((10, 10), &a), &b).unwrap().1.into_raw_vec_and_offset().0;
        (a, Box::new(move |p: &[f64]| ssim(&arr2((10, 10), p), &b).unwrap()), g)
    })
}

pub fn scale_report(draws: usize) -> GradReport {
    check("scale", draws, 1e-6, 1e-6, 8, |rng| {
        let x = normal_vec(rng, 64);
        let reference = arr2((8, 8), &normal_vec(rng, 64));
        let rb = reference.clone();
        readout(
            rng,
            x,
            64,
            move |p| scale(&arr2((8, 8), p), &reference).into_raw_vec_and_offset().0,
            move |p, r| scale_backward(&arr2((8, 8), p), &rb, &arr2((8, 8), r)).into_raw_vec_and_offset().0,
        )
    })
}

pub fn envelope_report(draws: usize) -> GradReport {
    check("envelope_smooth", draws, 1e-5, 1e-6, 9, |rng| {
        let x = normal_vec(rng, 64);
        readout(
            rng,
            x,
            64,
            |p| envelope_smooth(&HilbertPlan::new(8), &arr2((8, 8), p)).0.into_raw_vec_and_offset().0,
            |p, r| {
                let plan = HilbertPlan::new(8);
                let x = arr2((8, 8), p);
                let (env, hx) = envelope_smooth(&plan, &x);
                envelope_smooth_backward(&plan, &x, &hx, &env, &arr2((8, 8), r)).into_raw_vec_and_offset().0
            },
        )
    })
}

/// Envelopes drawn inside the dynamic range, away from both clamps.
pub fn log_compress_report(draws: usize) -> GradReport {
    let (dr, reference) = (60.0, 2.0);
    check("log_compress_smooth", draws, 1e-6, 1e-6, 10, move |rng| {
        let x: Vec<f64> = (0..64).map(|_| reference * 10f64.powf(rng.random_range(-2.5..-0.1))).collect();
        readout(
            rng,
            x,
            64,
            move |p| log_compress_smooth(&arr2((8, 8), p), dr, reference).into_raw_vec_and_offset().0,
            move |p, r| {
                log_compress_smooth_backward(&arr2((8, 8), p), dr, reference, &arr2((8, 8), r))
                    .into_raw_vec_and_offset()
                    .0
            },
        )
    })
}

/// Four-element array on an 8x8 grid with one speckle frame and its MVDR targets.
pub fn toy_examples() -> (ImagingContext, Vec<PatchExample>) {
    let array = make_linear_array(4, 1e-3, 2.5e6, 2e7, 1540.0).unwrap();
    let grid = make_pixel_grid((-1.6e-3, 1.6e-3), (8e-3, 8.6e-3), 8, 8, 8).unwrap();
    let tx = PlaneWaveTx::broadside();
    let spec = PhantomSpec { background_scatterer_density: 5e8, rng_seed: 3, ..PhantomSpec::empty() };
    let scat = beamlab::simulator::realize_phantom(&spec, &grid);
    let frame = synthesize_rf(&scat, &array, &tx, &SimConfig::covering(&grid, &array, &tx)).unwrap();
    let ctx = ImagingContext::new(&grid, &array, &DasConfig::default()).unwrap();
    let delayed = ctx.delay(&frame).unwrap();
    let das = ctx.das_tiles(&delayed).unwrap();
    let mvdr = MvdrConfig::default_for(4);
    let target = ctx.mvdr_tiles(&delayed, &mvdr).unwrap();
    let examples = extract_patches(&delayed.data, 8)
        .into_iter()
        .zip(das.patches)
        .zip(target.patches)
        .map(|((z, d), t)| PatchExample { z, target: t, das_patch: d, das_reference: das.reference, frame_id: 0 })
        .collect();
    (ctx, examples)
}

/// Full chain: network, DAS, envelope, compression, rescaling, hybrid loss.
pub fn end_to_end_report(draws: usize) -> GradReport {
    let (ctx, examples) = toy_examples();
    let ex = examples[0].clone();
    let arch = UNetArch { in_channels: 4, depth_levels: 2, base_channels: 2, channel_cap: 8, convs_per_level: 1 };
    let weights = LossWeights::new(0.9, 0.1).unwrap();
    let ctx = std::sync::Arc::new(ctx);
    let mut seed = 0;
    check("end_to_end", draws, 1e-5, 1e-4, 11, move |_| {
        seed += 1;
        let p = UNetParams::init(arch, seed).unwrap();
        let (_, g) = patch_objective(&p, &ex, &ctx, &weights, true).unwrap();
        let (ctx, ex) = (ctx.clone(), ex.clone());
        let f = move |v: &[f64]| {
            let q = UNetParams::from_values(arch, v.to_vec()).unwrap();
            patch_objective(&q, &ex, &ctx, &weights, false).unwrap().0.loss
        };
        (p.values, Box::new(f), g.unwrap())
    })
}

pub fn all_gradient_reports(draws: usize) -> Vec<GradReport> {
    vec![
        conv_report(draws),
        leaky_relu_report(draws),
        maxpool_report(draws),
        upsample_report(draws),
        concat_report(draws),
        mae_report(draws),
        ssim_report(draws),
        scale_report(draws),
        envelope_report(draws),
        log_compress_report(draws),
        end_to_end_report(draws),
    ]
}

/// Loop-based MVDR: explicit outer products, a general inverse, no smoothing shortcuts.
pub fn brute_force_mvdr(data: &Array3<f64>, cfg: &MvdrConfig) -> Array2<f64> {
    let (m, n_z, n_x) = data.dim();
    let l = cfg.subaperture_len;
    let k = cfg.temporal_window as isize;
    let a = DVector::from_element(l, 1.0);
    Array2::from_shape_fn((n_z, n_x), |(iz, ix)| {
        let mut r = DMatrix::zeros(l, l);
        let mut count = 0.0;
        for dk in -(k / 2)..=(k / 2) {
            let z = (iz as isize + dk).clamp(0, n_z as isize - 1) as usize;
            for p in 0..=(m - l) {
                let x = DVector::from_fn(l, |i, _| data[[p + i, z, ix]]);
                r += &x * x.transpose();
                count += 1.0;
            }
        }
        r /= count;
        let trace = r.trace();
        let load = if trace == 0.0 { cfg.diagonal_loading * f64::EPSILON } else { cfg.diagonal_loading * trace / l as f64 };
        r += DMatrix::identity(l, l) * load;
        let ri = r.try_inverse().expect("loaded covariance is invertible");
        let ria = &ri * &a;
        let w = &ria / a.dot(&ria);
        let mut xbar = DVector::zeros(l);
        for p in 0..=(m - l) {
            for i in 0..l {
                xbar[i] += data[[p + i, iz, ix]];
            }
        }
        xbar /= (m - l + 1) as f64;
        w.dot(&xbar)
    })
}

/// Largest `|fast - brute| / max(1, |brute|)` over random small instances.
pub fn mvdr_oracle_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.random_range(2..=4);
        let l = rng.random_range(1..=2.min(m));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (nz, nx) = (rng.random_range(3..8), rng.random_range(1..4));
        let data = Array3::from_shape_vec((m, nz, nx), normal_vec(&mut rng, m * nz * nx)).unwrap();
        let cfg = MvdrConfig { subaperture_len: l, temporal_window: k, diagonal_loading: rng.random_range(1e-3..0.5) };
        let fast = mvdr_beamform(data.view(), &cfg).unwrap();
        let slow = brute_force_mvdr(&data, &cfg);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}

/// With overwhelming loading the weights become uniform and MVDR reduces to the
/// mean of the subaperture-averaged snapshot. Returns the largest deviation.
pub fn heavy_loading_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = Array3::from_shape_vec((4, 6, 3), normal_vec(&mut rng, 72)).unwrap();
    let cfg = MvdrConfig { subaperture_len: 2, temporal_window: 3, diagonal_loading: 1e6 };
    let out = mvdr_beamform(data.view(), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for iz in 0..6 {
        for ix in 0..3 {
            let mut mean = 0.0;
            for p in 0..3 {
                mean += data[[p, iz, ix]] + data[[p + 1, iz, ix]];
            }
            mean /= 6.0;
            worst = worst.max((out[[iz, ix]] - mean).abs());
        }
    }
    worst
}
