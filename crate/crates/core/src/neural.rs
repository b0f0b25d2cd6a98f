//! Reverse-mode differentiable convolution primitives and the patch U-Net.
//!
//! Every op has an explicit forward and backward function; the U-Net keeps the
//! intermediate activations it needs in a [`UNetCache`] and replays the graph
//! in reverse. Parameters live in one flat buffer in declaration order, which
//! is also the checkpoint order.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// Dense `[batch, channels, height, width]` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::DimensionMismatch(format!("{dims:?} vs {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Single-item batch from a `[channels, height, width]` cube.
    pub fn from_cube(cube: &Array3<f64>) -> Self {
        let (c, h, w) = cube.dim();
        Self { dims: [1, c, h, w], data: cube.iter().copied().collect() }
    }

    pub fn to_cube(&self) -> Array3<f64> {
        let [n, c, h, w] = self.dims;
        assert_eq!(n, 1, "to_cube needs a single-item batch");
        Array3::from_shape_vec((c, h, w), self.data.clone()).expect("dims match data")
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    fn item(&self, n: usize) -> &[f64] {
        let len = self.dims[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.dims[1] * self.plane_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

fn debug_check(t: &Tensor4) {
    debug_assert!(t.is_finite(), "non-finite tensor value");
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // a is m x k (or k x m when a_t), b is k x n (or n x k when b_t), c is m x n
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `[c * 9, h * w]` patch matrix for a 3x3 kernel with zero padding 1.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
///
/// `kernel` is `[out_ch, in_ch, 3, 3]` flattened, `bias` is `[out_ch]`.
pub fn conv2d(input: &Tensor4, kernel: &[f64], bias: &[f64]) -> Result<Tensor4> {
    let [n, c_in, h, w] = input.dims;
    let c_out = bias.len();
    if kernel.len() != c_out * c_in * 9 {
        return Err(Error::DimensionMismatch(format!(
            "kernel of {} values for {c_in} -> {c_out} channels",
            kernel.len()
        )));
    }
    let hw = h * w;
    let mut out = Tensor4::zeros([n, c_out, h, w]);
    for b in 0..n {
        let cols = im2col(input.item(b), c_in, h, w);
        let o = out.item_mut(b);
        for (co, &bv) in bias.iter().enumerate() {
            o[co * hw..(co + 1) * hw].fill(bv);
        }
        gemm(c_out, c_in * 9, hw, kernel, false, &cols, false, 1.0, o);
    }
    debug_check(&out);
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d input, d kernel, d bias)`.
pub fn conv2d_backward(input: &Tensor4, kernel: &[f64], grad_out: &Tensor4) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let [n, c_in, h, w] = input.dims;
    let c_out = grad_out.channels();
    let hw = h * w;
    let mut g_in = Tensor4::zeros(input.dims);
    let mut g_k = vec![0.0; kernel.len()];
    let mut g_b = vec![0.0; c_out];
    let mut g_cols = vec![0.0; c_in * 9 * hw];
    for b in 0..n {
        let go = grad_out.item(b);
        for (co, gb) in g_b.iter_mut().enumerate() {
            *gb += go[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        let cols = im2col(input.item(b), c_in, h, w);
        // dK += dO * cols^T
        gemm(c_out, hw, c_in * 9, go, false, &cols, true, 1.0, &mut g_k);
        // dcols = K^T * dO
        gemm(c_in * 9, c_out, hw, kernel, true, go, false, 0.0, &mut g_cols);
        col2im(&g_cols, c_in, h, w, g_in.item_mut(b));
    }
    (g_in, g_k, g_b)
}

pub fn leaky_relu(input: &Tensor4, slope: f64) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input.data.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect(),
    }
}

pub fn leaky_relu_backward(input: &Tensor4, grad_out: &Tensor4, slope: f64) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
            .collect(),
    }
}

/// 2x2 max pooling. Returns the output and, per output element, the flat
/// input index it was taken from (first maximum in row-major order).
pub fn maxpool2(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [n, c, h, w] = input.dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::DimensionMismatch(format!("maxpool2 needs even dims, got {h} x {w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0; out.data.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input.data[idx] > input.data[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + y * ow + x;
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(input_dims: [usize; 4], argmax: &[usize], grad_out: &Tensor4) -> Tensor4 {
    let mut g = Tensor4::zeros(input_dims);
    for (&i, &go) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += go;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input.dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[plane * oh * ow + y * ow + x] = input.data[plane * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor4) -> Tensor4 {
    let [n, c, oh, ow] = grad_out.dims;
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor4::zeros([n, c, h, w]);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                g.data[plane * h * w + (y / 2) * w + x / 2] += grad_out.data[plane * oh * ow + y * ow + x];
            }
        }
    }
    g
}

/// Channel-wise stacking `[a; b]`.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [n, ca, h, w] = a.dims;
    let [nb, cb, hb, wb] = b.dims;
    if n != nb || h != hb || w != wb {
        return Err(Error::DimensionMismatch(format!("concat {:?} with {:?}", a.dims, b.dims)));
    }
    let mut out = Tensor4::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let o = out.item_mut(i);
        let split = ca * h * w;
        o[..split].copy_from_slice(a.item(i));
        o[split..].copy_from_slice(b.item(i));
    }
    Ok(out)
}

/// Splits a concatenated gradient back into the parts for `a` (first `ca` channels) and `b`.
pub fn concat_channels_backward(grad_out: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let [n, c, h, w] = grad_out.dims;
    let cb = c - ca;
    let mut ga = Tensor4::zeros([n, ca, h, w]);
    let mut gb = Tensor4::zeros([n, cb, h, w]);
    for i in 0..n {
        let g = grad_out.item(i);
        let split = ca * h * w;
        ga.item_mut(i).copy_from_slice(&g[..split]);
        gb.item_mut(i).copy_from_slice(&g[split..]);
    }
    (ga, gb)
}

/// Shape of the U-Net family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    /// Input and output channel count (the number of array elements).
    pub in_channels: usize,
    /// Spatial resolutions visited, including the bottleneck.
    pub depth_levels: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub convs_per_level: usize,
}

impl UNetArch {
    pub fn for_elements(n_elements: usize) -> Self {
        Self {
            in_channels: n_elements,
            depth_levels: 3,
            base_channels: n_elements,
            channel_cap: 128,
            convs_per_level: 2,
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::invalid("network", "channel counts must be positive"));
        }
        if self.depth_levels == 0 || self.convs_per_level == 0 {
            return Err(Error::invalid("network", "depth_levels and convs_per_level must be positive"));
        }
        Ok(())
    }

    /// `(in, out)` channels of every convolution in declaration order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let d = self.depth_levels;
        let mut shapes = Vec::new();
        let mut prev = self.in_channels;
        for level in 0..d {
            let c = self.level_channels(level);
            for j in 0..self.convs_per_level {
                shapes.push((if j == 0 { prev } else { c }, c));
            }
            prev = c;
        }
        for level in (0..d - 1).rev() {
            let c = self.level_channels(level);
            let below = self.level_channels(level + 1);
            for j in 0..self.convs_per_level {
                shapes.push((if j == 0 { below + c } else { c }, c));
            }
        }
        shapes.push((self.level_channels(0), self.in_channels));
        shapes
    }
}

/// Offsets of one convolution's kernel and bias inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSlot {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub bias: usize,
}

impl ConvSlot {
    pub fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }
}

/// All trainable values of the U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub arch: UNetArch,
    pub slots: Vec<ConvSlot>,
    pub values: Vec<f64>,
}

fn layout(arch: &UNetArch) -> (Vec<ConvSlot>, usize) {
    let mut offset = 0;
    let slots = arch
        .conv_shapes()
        .into_iter()
        .map(|(in_ch, out_ch)| {
            let kernel = offset;
            let bias = kernel + out_ch * in_ch * 9;
            offset = bias + out_ch;
            ConvSlot { in_ch, out_ch, kernel, bias }
        })
        .collect();
    (slots, offset)
}

impl UNetParams {
    pub fn zeros(arch: UNetArch) -> Result<Self> {
        arch.validate()?;
        let (slots, len) = layout(&arch);
        Ok(Self { arch, slots, values: vec![0.0; len] })
    }

    /// He-style fan-in uniform kernels, zero biases.
    pub fn init(arch: UNetArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in p.slots.clone() {
            let bound = (6.0 / (slot.in_ch * 9) as f64).sqrt();
            for v in &mut p.values[slot.kernel..slot.kernel + slot.kernel_len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: UNetArch, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kernel(&self, layer: usize) -> &[f64] {
        let s = self.slots[layer];
        &self.values[s.kernel..s.kernel + s.kernel_len()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.slots[layer];
        &self.values[s.bias..s.bias + s.out_ch]
    }

    /// Zeroes the output convolution so the network maps everything to zero.
    pub fn zero_output_layer(&mut self) {
        let s = *self.slots.last().expect("at least one layer");
        self.values[s.kernel..s.bias + s.out_ch].fill(0.0);
    }

    fn conv(&self, layer: usize, x: &Tensor4) -> Result<Tensor4> {
        conv2d(x, self.kernel(layer), self.bias(layer))
    }
}

/// Activations kept by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct UNetCache {
    conv_inputs: Vec<Tensor4>,
    pre_activations: Vec<Option<Tensor4>>,
    pool_args: Vec<(Vec<usize>, [usize; 4])>,
    upsampled_channels: Vec<usize>,
}

/// Forward pass; output has the input's dimensions.
pub fn unet_forward(params: &UNetParams, input: &Tensor4) -> Result<(Tensor4, UNetCache)> {
    let arch = &params.arch;
    let d = arch.depth_levels;
    let [_, c, h, w] = input.dims;
    if c != arch.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "input has {c} channels, network expects {}",
            arch.in_channels
        )));
    }
    let factor = 1 << (d - 1);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::DimensionMismatch(format!(
            "spatial dims {h} x {w} not divisible by {factor} for {d} levels"
        )));
    }
    let slope = DEFAULT_LEAKY_SLOPE;
    let n_layers = params.slots.len();
    let mut cache = UNetCache {
        conv_inputs: Vec::with_capacity(n_layers),
        pre_activations: Vec::with_capacity(n_layers),
        pool_args: Vec::new(),
        upsampled_channels: Vec::new(),
    };
    let mut layer = 0;
    let conv_act = |x: Tensor4, layer: &mut usize, cache: &mut UNetCache| -> Result<Tensor4> {
        let pre = params.conv(*layer, &x)?;
        let out = leaky_relu(&pre, slope);
        cache.conv_inputs.push(x);
        cache.pre_activations.push(Some(pre));
        *layer += 1;
        Ok(out)
    };

    let mut x = input.clone();
    let mut skips = Vec::with_capacity(d - 1);
    for level in 0..d {
        for _ in 0..arch.convs_per_level {
            x = conv_act(x, &mut layer, &mut cache)?;
        }
        if level + 1 < d {
            let (pooled, arg) = maxpool2(&x)?;
            cache.pool_args.push((arg, x.dims));
            skips.push(x);
            x = pooled;
        }
    }
    for level in (0..d - 1).rev() {
        let up = upsample2(&x);
        cache.upsampled_channels.push(up.channels());
        x = concat_channels(&up, &skips[level])?;
        for _ in 0..arch.convs_per_level {
            x = conv_act(x, &mut layer, &mut cache)?;
        }
    }
    let out = params.conv(layer, &x)?;
    cache.conv_inputs.push(x);
    cache.pre_activations.push(None);
    Ok((out, cache))
}

/// Backward pass: returns `(d input, d params)` with `d params` laid out like `params.values`.
pub fn unet_backward(params: &UNetParams, cache: &UNetCache, grad_out: &Tensor4) -> (Tensor4, Vec<f64>) {
    let arch = &params.arch;
    let d = arch.depth_levels;
    let slope = DEFAULT_LEAKY_SLOPE;
    let mut grads = vec![0.0; params.len()];
    let mut layer = params.slots.len();

    let conv_back = |g: Tensor4, layer: &mut usize, grads: &mut Vec<f64>| -> Tensor4 {
        *layer -= 1;
        let g = match &cache.pre_activations[*layer] {
            Some(pre) => leaky_relu_backward(pre, &g, slope),
            None => g,
        };
        let (gi, gk, gb) = conv2d_backward(&cache.conv_inputs[*layer], params.kernel(*layer), &g);
        let s = params.slots[*layer];
        for (dst, src) in grads[s.kernel..s.kernel + s.kernel_len()].iter_mut().zip(gk) {
            *dst += src;
        }
        for (dst, src) in grads[s.bias..s.bias + s.out_ch].iter_mut().zip(gb) {
            *dst += src;
        }
        gi
    };

    let mut g = conv_back(grad_out.clone(), &mut layer, &mut grads);
    let mut skip_grads: Vec<Option<Tensor4>> = vec![None; d.saturating_sub(1)];
    // decoder levels were visited from the bottom up; unwind from level 0 upward
    for (k, level) in (0..d - 1).enumerate() {
        for _ in 0..arch.convs_per_level {
            g = conv_back(g, &mut layer, &mut grads);
        }
        let up_ch = cache.upsampled_channels[d - 2 - k];
        let (g_up, g_skip) = concat_channels_backward(&g, up_ch);
        skip_grads[level] = Some(g_skip);
        g = upsample2_backward(&g_up);
    }
    for level in (0..d).rev() {
        if level + 1 < d {
            let (arg, dims) = &cache.pool_args[level];
            g = maxpool2_backward(*dims, arg, &g);
            g.add_assign(skip_grads[level].as_ref().expect("skip gradient recorded"));
        }
        for _ in 0..arch.convs_per_level {
            g = conv_back(g, &mut layer, &mut grads);
        }
    }
    debug_assert_eq!(layer, 0);
    (g, grads)
}

/// Scale used to normalise a patch before the network: its largest magnitude, or 1 if all zero.
pub fn input_scale(patch: &Array3<f64>) -> f64 {
    let s = patch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// `s * U(z / s)` with `s` from [`input_scale`]; keeps the network input at unit scale.
pub fn transform_patch(params: &UNetParams, patch: &Array3<f64>) -> Result<(Array3<f64>, UNetCache, f64)> {
    let s = input_scale(patch);
    let input = Tensor4::from_cube(&patch.mapv(|v| v / s));
    let (mut out, cache) = unet_forward(params, &input)?;
    out.scale(s);
    Ok((out.to_cube(), cache, s))
}

/// Parameter gradient of [`transform_patch`] given the gradient at its output.
pub fn transform_patch_backward(
    params: &UNetParams,
    cache: &UNetCache,
    scale: f64,
    grad_out: &Array3<f64>,
) -> Vec<f64> {
    let mut g = Tensor4::from_cube(grad_out);
    g.scale(scale);
    unet_backward(params, cache, &g).1
}
