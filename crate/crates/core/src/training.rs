//! Patch dataset assembly, Adam, and the training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::das::{
    das_sum, das_sum_backward, envelope_smooth, envelope_smooth_backward, log_compress_smooth,
    log_compress_smooth_backward, BModePatch,
};
use crate::delayrf::{extract_patches, RfPatch};
use crate::error::{Error, Result};
use crate::mvdr::MvdrConfig;
use crate::neural::{transform_patch, transform_patch_backward, UNetArch, UNetParams};
use crate::objective::{hybrid_loss, hybrid_loss_grad, mae, scale, scale_backward, ssim, LossEval, LossWeights};
use crate::pipeline::ImagingContext;
use crate::simulator::RfFrame;

/// One training pair plus what the forward pipeline needs to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExample {
    /// Delayed channel data, the network input.
    pub z: RfPatch,
    /// MVDR B-mode patch.
    pub target: BModePatch,
    /// DAS B-mode patch of the same region; the range reference for rescaling.
    pub das_patch: BModePatch,
    /// Log-compression reference shared by every DAS patch of the source frame.
    pub das_reference: f64,
    pub frame_id: usize,
}

#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub examples: Vec<PatchExample>,
    /// Indices into `examples`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub train_frames: Vec<usize>,
    pub val_frames: Vec<usize>,
    pub mvdr: MvdrConfig,
    pub train_fraction: f64,
}

/// Frames `0..n_train` train, the rest validate, with `n_train = floor(fraction * n)`
/// kept within `1..n`.
pub fn split_frames(n_frames: usize, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_frames < 2 {
        return Err(Error::EmptySplit("need at least two frames for a train/validation split"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", "must lie strictly between 0 and 1"));
    }
    let n_train = ((train_fraction * n_frames as f64).floor() as usize).clamp(1, n_frames - 1);
    Ok(((0..n_train).collect(), (n_train..n_frames).collect()))
}

/// Delays every frame, beamforms it with DAS and MVDR, and pairs up the patches.
pub fn build_dataset(
    frames: &[RfFrame],
    ctx: &ImagingContext,
    mvdr: &MvdrConfig,
    train_fraction: f64,
) -> Result<PatchDataset> {
    let (train_frames, val_frames) = split_frames(frames.len(), train_fraction)?;
    let mut examples = Vec::new();
    for (frame_id, frame) in frames.iter().enumerate() {
        let delayed = ctx.delay(frame)?;
        let das = ctx.das_tiles(&delayed)?;
        let target = ctx.mvdr_tiles(&delayed, mvdr)?;
        let inputs = extract_patches(&delayed.data, ctx.side());
        for ((z, d), t) in inputs.into_iter().zip(das.patches).zip(target.patches) {
            debug_assert_eq!(z.origin, d.origin);
            examples.push(PatchExample { z, target: t, das_patch: d, das_reference: das.reference, frame_id });
        }
    }
    let in_split = |ids: &[usize]| -> Vec<usize> {
        examples.iter().enumerate().filter(|(_, e)| ids.contains(&e.frame_id)).map(|(i, _)| i).collect()
    };
    let train = in_split(&train_frames);
    let val = in_split(&val_frames);
    Ok(PatchDataset { examples, train, val, train_frames, val_frames, mvdr: *mvdr, train_fraction })
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Content hash over every example and the MVDR configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mvdr = &self.mvdr;
        h.update((mvdr.subaperture_len as u64).to_le_bytes());
        h.update((mvdr.temporal_window as u64).to_le_bytes());
        h.update(mvdr.diagonal_loading.to_le_bytes());
        h.update(self.train_fraction.to_le_bytes());
        for e in &self.examples {
            h.update((e.frame_id as u64).to_le_bytes());
            h.update((e.z.origin.0 as u64).to_le_bytes());
            h.update((e.z.origin.1 as u64).to_le_bytes());
            h.update(e.das_reference.to_le_bytes());
            for v in e.z.data.iter().chain(e.target.values.iter()).chain(e.das_patch.values.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Uniform sampling with replacement from the training split.
pub fn sample_batch(ds: &PatchDataset, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ds.train.is_empty() {
        return Err(Error::EmptySplit("training split has no patches"));
    }
    Ok((0..batch).map(|_| ds.train[rng.random_range(0..ds.train.len())]).collect())
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params], lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", step: state.step });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Differentiable forward of one example: network, DAS, smoothed envelope and
/// compression, rescaling onto the DAS patch range, hybrid loss. With
/// `want_grad` also returns the parameter gradient.
pub fn patch_objective(
    params: &UNetParams,
    ex: &PatchExample,
    ctx: &ImagingContext,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossEval, Option<Vec<f64>>)> {
    let dr = ctx.das.dynamic_range_db;
    let (zp, cache, s) = transform_patch(params, &ex.z.data)?;
    let bf = das_sum(zp.view(), &ctx.apod, ex.z.origin)?;
    let (env, hx) = envelope_smooth(&ctx.plan, &bf);
    let h = log_compress_smooth(&env, dr, ex.das_reference);
    let pred = scale(&h, &ex.das_patch.values);
    let eval = hybrid_loss_grad(&pred, &ex.target.values, weights)?;
    if !want_grad {
        return Ok((eval, None));
    }
    let g_h = scale_backward(&h, &ex.das_patch.values, &eval.grad);
    let g_env = log_compress_smooth_backward(&env, dr, ex.das_reference, &g_h);
    let g_bf = envelope_smooth_backward(&ctx.plan, &bf, &hx, &env, &g_env);
    let g_zp = das_sum_backward(&g_bf, &ctx.apod, ex.z.origin);
    let grads = transform_patch_backward(params, &cache, s, &g_zp);
    Ok((eval, Some(grads)))
}

/// Mean loss, MAE and SSIM over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub mae: f64,
    pub ssim: f64,
}

pub fn evaluate(
    params: &UNetParams,
    ds: &PatchDataset,
    indices: &[usize],
    ctx: &ImagingContext,
    weights: &LossWeights,
) -> Result<EvalSummary> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("no examples to evaluate"));
    }
    let evals: Vec<LossEval> = indices
        .par_iter()
        .map(|&i| Ok(patch_objective(params, &ds.examples[i], ctx, weights, false)?.0))
        .collect::<Result<_>>()?;
    let n = evals.len() as f64;
    Ok(EvalSummary {
        loss: evals.iter().map(|e| e.loss).sum::<f64>() / n,
        mae: evals.iter().map(|e| e.mae).sum::<f64>() / n,
        ssim: evals.iter().map(|e| e.ssim).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub val_every: u64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 14_000, batch: 64, weights: LossWeights::default(), seed: 0, val_every: 100, lr: 1e-3 }
    }
}

/// One row of the loss curve, written at every validation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub mae: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen (the initial ones count).
    pub best: UNetParams,
    pub best_step: u64,
    pub best_val: EvalSummary,
    pub initial_val: EvalSummary,
    pub curve: Vec<CurveRow>,
    pub steps_run: u64,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

pub fn train(ds: &PatchDataset, ctx: &ImagingContext, arch: UNetArch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch", "must be positive"));
    }
    if cfg.val_every == 0 {
        return Err(Error::invalid("val_every", "must be positive"));
    }
    let mut params = UNetParams::init(arch, cfg.seed)?;
    let initial_val = evaluate(&params, ds, &ds.val, ctx, &cfg.weights)?;
    let mut outcome = TrainOutcome {
        best: params.clone(),
        best_step: 0,
        best_val: initial_val,
        initial_val,
        curve: Vec::new(),
        steps_run: 0,
        aborted: None,
    };
    let mut adam = AdamState::new(params.len());
    adam.lr = cfg.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut interval_loss, mut interval_n) = (0.0, 0u64);

    for step in 1..=cfg.steps {
        let batch = sample_batch(ds, cfg.batch, &mut rng)?;
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| {
                let (eval, g) = patch_objective(&params, &ds.examples[i], ctx, &cfg.weights, true)?;
                Ok((eval.loss, g.expect("gradient requested")))
            })
            .collect::<Result<_>>()?;
        // fixed-order reduction keeps runs reproducible
        let mut grads = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        grads.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            outcome.aborted = Some(format!("non-finite training loss at step {step}"));
            break;
        }
        if let Err(e) = adam_step(&mut params.values, &grads, &mut adam) {
            outcome.aborted = Some(e.to_string());
            break;
        }
        outcome.steps_run = step;
        interval_loss += loss;
        interval_n += 1;

        if step % cfg.val_every == 0 || step == cfg.steps {
            let val = evaluate(&params, ds, &ds.val, ctx, &cfg.weights)?;
            if !val.loss.is_finite() {
                outcome.aborted = Some(format!("non-finite validation loss at step {step}"));
                break;
            }
            outcome.curve.push(CurveRow {
                step,
                train_loss: interval_loss / interval_n as f64,
                val_loss: val.loss,
                mae: val.mae,
                ssim: val.ssim,
            });
            interval_loss = 0.0;
            interval_n = 0;
            if val.loss < outcome.best_val.loss {
                outcome.best = params.clone();
                outcome.best_step = step;
                outcome.best_val = val;
            }
        }
    }
    Ok(outcome)
}

/// Validation summary of the network whose output layer is zero, which makes
/// every prediction the midpoint of its DAS patch range.
pub fn zero_network_baseline(
    ds: &PatchDataset,
    ctx: &ImagingContext,
    arch: UNetArch,
    weights: &LossWeights,
) -> Result<EvalSummary> {
    let mut p = UNetParams::init(arch, 0)?;
    p.zero_output_layer();
    evaluate(&p, ds, &ds.val, ctx, weights)
}

/// Summary obtained by using each stored DAS patch itself as the prediction.
pub fn das_summary(ds: &PatchDataset, indices: &[usize], weights: &LossWeights) -> Result<EvalSummary> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("no examples to evaluate"));
    }
    let (mut loss, mut mae_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    for &i in indices {
        let e = &ds.examples[i];
        let (pred, target) = (&e.das_patch.values, &e.target.values);
        loss += hybrid_loss(pred, target, weights)?;
        mae_sum += mae(pred, target)?;
        ssim_sum += ssim(pred, target)?;
    }
    let n = indices.len() as f64;
    Ok(EvalSummary { loss: loss / n, mae: mae_sum / n, ssim: ssim_sum / n })
}

/// Mean per-patch SSIM of a set of predicted patches against targets.
pub fn mean_patch_ssim(pred: &[Array2<f64>], target: &[Array2<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch("patch lists differ in length or are empty".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        total += ssim(p, t)?;
    }
    Ok(total / pred.len() as f64)
}
