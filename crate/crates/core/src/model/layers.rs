//! Network building blocks with explicit forward and backward passes.
//!
//! Feature maps are `Array5<f32>` in `[batch, channel, depth, height, width]`
//! layout. Convolutions run as im2col + GEMM, chunked over depth slabs so
//! the column buffer stays bounded at clinical volume sizes. All loops are
//! sequential and deterministic: identical inputs produce bit-identical
//! outputs and gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array5, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

/// A learnable tensor with its gradient and first/second moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ndarray::ArrayD<f32>,
    pub grad: ndarray::ArrayD<f32>,
    pub moment1: ndarray::ArrayD<f32>,
    pub moment2: ndarray::ArrayD<f32>,
}

impl Param {
    fn new(name: impl Into<String>, value: ndarray::ArrayD<f32>) -> Self {
        let zeros = ndarray::ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad: zeros.clone(),
            moment1: zeros.clone(),
            moment2: zeros,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Fan-in-scaled uniform initialization, U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ndarray::ArrayD<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-bound..=bound))
}

fn param_view2(a: &ndarray::ArrayD<f32>) -> ArrayView2<'_, f32> {
    a.view().into_dimensionality().expect("2-D parameter")
}

fn param_view2_mut(a: &mut ndarray::ArrayD<f32>) -> ArrayViewMut2<'_, f32> {
    a.view_mut().into_dimensionality().expect("2-D parameter")
}

/// Depth-slab size keeping the im2col buffer under ~64 MB.
fn conv_slab_depth(in_c: usize, d: usize, h: usize, w: usize) -> usize {
    let per_slice = in_c * 27 * h * w * 4;
    (64 * 1024 * 1024 / per_slice.max(1)).clamp(1, d)
}

/// Gather 3x3x3 patches (zero padding) of depth slab [z0, z1) into a
/// column buffer laid out as `[in_c*27, vslab]` row-major.
fn im2col(xs: &[f32], dims: (usize, usize, usize, usize), z0: usize, z1: usize, cs: &mut [f32]) {
    let (c_in, d, h, w) = dims;
    let vslab = (z1 - z0) * h * w;
    cs[..c_in * 27 * vslab].fill(0.0);
    for c in 0..c_in {
        let xbase = c * d * h * w;
        for t in 0..27usize {
            let dz = (t / 9) as isize - 1;
            let dy = ((t / 3) % 3) as isize - 1;
            let dx = (t % 3) as isize - 1;
            let rbase = (c * 27 + t) * vslab;
            for z in z0..z1 {
                let sz = z as isize + dz;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                let sz = sz as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let dst = rbase + (z - z0) * h * w + y * w;
                    let src = xbase + sz * h * w + sy * w;
                    let (x_lo, x_hi) = match dx.cmp(&0) {
                        std::cmp::Ordering::Less => (1usize, w),
                        std::cmp::Ordering::Greater => (0usize, w - 1),
                        std::cmp::Ordering::Equal => (0usize, w),
                    };
                    let src_off = (x_lo as isize + dx) as usize;
                    cs[dst + x_lo..dst + x_hi]
                        .copy_from_slice(&xs[src + src_off..src + src_off + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add the column buffer back onto the
/// input gradient.
fn col2im(cs: &[f32], dims: (usize, usize, usize, usize), z0: usize, z1: usize, gs: &mut [f32]) {
    let (c_in, d, h, w) = dims;
    let vslab = (z1 - z0) * h * w;
    for c in 0..c_in {
        let xbase = c * d * h * w;
        for t in 0..27usize {
            let dz = (t / 9) as isize - 1;
            let dy = ((t / 3) % 3) as isize - 1;
            let dx = (t % 3) as isize - 1;
            let rbase = (c * 27 + t) * vslab;
            for z in z0..z1 {
                let sz = z as isize + dz;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                let sz = sz as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = rbase + (z - z0) * h * w + y * w;
                    let dst = xbase + sz * h * w + sy * w;
                    let (x_lo, x_hi) = match dx.cmp(&0) {
                        std::cmp::Ordering::Less => (1usize, w),
                        std::cmp::Ordering::Greater => (0usize, w - 1),
                        std::cmp::Ordering::Equal => (0usize, w),
                    };
                    let dst_off = (x_lo as isize + dx) as usize;
                    for i in 0..(x_hi - x_lo) {
                        gs[dst + dst_off + i] += cs[src + x_lo + i];
                    }
                }
            }
        }
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub weight: Param, // [out_c, in_c * 27]
    pub bias: Param,   // [out_c]
    pub in_c: usize,
    pub out_c: usize,
}

impl Conv3 {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * 27;
        Conv3 {
            weight: Param::new(
                format!("{name}.weight"),
                init_uniform(&[out_c, fan_in], fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), init_uniform(&[out_c], fan_in, rng)),
            in_c,
            out_c,
        }
    }

    pub fn forward(&self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        debug_assert_eq!(c_in, self.in_c);
        let mut out = Array5::zeros((n, self.out_c, d, h, w));
        let slab = conv_slab_depth(self.in_c, d, h, w);
        let mut col = vec![0f32; self.in_c * 27 * slab * h * w];
        let wview = param_view2(&self.weight.value);
        let bias = self.bias.value.as_slice().expect("bias contiguous");
        for i in 0..n {
            let xs = x.index_axis(Axis(0), i);
            let xs = xs.as_slice().expect("standard layout");
            let os = out.index_axis_mut(Axis(0), i);
            let os = os.into_slice().expect("standard layout");
            let mut z0 = 0usize;
            while z0 < d {
                let z1 = (z0 + slab).min(d);
                let v = (z1 - z0) * h * w;
                im2col(xs, (c_in, d, h, w), z0, z1, &mut col);
                let col_m = ArrayView2::from_shape((self.in_c * 27, v), &col[..self.in_c * 27 * v])
                    .expect("col shape");
                // per-channel output rows for this slab are strided in os;
                // gemm into a dense buffer then copy
                let mut dense = Array2::zeros((self.out_c, v));
                general_mat_mul(1.0, &wview, &col_m, 0.0, &mut dense);
                let ds = dense.as_slice().expect("dense contiguous");
                for o in 0..self.out_c {
                    let dst = o * d * h * w + z0 * h * w;
                    let src = o * v;
                    for q in 0..v {
                        os[dst + q] = ds[src + q] + bias[o];
                    }
                }
                z0 = z1;
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array5<f32>, grad_out: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        let mut grad_in = Array5::zeros((n, c_in, d, h, w));
        let slab = conv_slab_depth(self.in_c, d, h, w);
        let mut col = vec![0f32; self.in_c * 27 * slab * h * w];
        let mut col_grad = vec![0f32; self.in_c * 27 * slab * h * w];
        let wview = param_view2(&self.weight.value).to_owned();
        for i in 0..n {
            let xs = x.index_axis(Axis(0), i);
            let xs = xs.as_slice().expect("standard layout");
            let gos = grad_out.index_axis(Axis(0), i);
            let gos = gos.as_slice().expect("standard layout");
            let gis = grad_in.index_axis_mut(Axis(0), i);
            let gis = gis.into_slice().expect("standard layout");
            let mut z0 = 0usize;
            while z0 < d {
                let z1 = (z0 + slab).min(d);
                let v = (z1 - z0) * h * w;
                // dense view of grad_out over this slab
                let mut go_dense = Array2::zeros((self.out_c, v));
                {
                    let gd = go_dense.as_slice_mut().unwrap();
                    for o in 0..self.out_c {
                        let src = o * d * h * w + z0 * h * w;
                        gd[o * v..(o + 1) * v].copy_from_slice(&gos[src..src + v]);
                    }
                }
                // bias gradient: row sums
                {
                    let gb = self.bias.grad.as_slice_mut().unwrap();
                    let gd = go_dense.as_slice().unwrap();
                    for o in 0..self.out_c {
                        let mut s = 0f32;
                        for q in 0..v {
                            s += gd[o * v + q];
                        }
                        gb[o] += s;
                    }
                }
                // weight gradient: grad_out x col^T
                im2col(xs, (c_in, d, h, w), z0, z1, &mut col);
                let col_m = ArrayView2::from_shape((self.in_c * 27, v), &col[..self.in_c * 27 * v])
                    .expect("col shape");
                {
                    let mut gw = param_view2_mut(&mut self.weight.grad);
                    general_mat_mul(1.0, &go_dense.view(), &col_m.t(), 1.0, &mut gw);
                }
                // input gradient: W^T x grad_out, scattered by col2im
                {
                    let mut cg = ArrayViewMut2::from_shape(
                        (self.in_c * 27, v),
                        &mut col_grad[..self.in_c * 27 * v],
                    )
                    .expect("col grad shape");
                    general_mat_mul(1.0, &wview.t(), &go_dense.view(), 0.0, &mut cg);
                }
                col2im(&col_grad, (c_in, d, h, w), z0, z1, gis);
                z0 = z1;
            }
        }
        grad_in
    }
}

/// 1x1x1 convolution (channel projection).
#[derive(Debug, Clone)]
pub struct Conv1 {
    pub weight: Param, // [out_c, in_c]
    pub bias: Param,   // [out_c]
    pub out_c: usize,
}

impl Conv1 {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Conv1 {
            weight: Param::new(
                format!("{name}.weight"),
                init_uniform(&[out_c, in_c], in_c, rng),
            ),
            bias: Param::new(format!("{name}.bias"), init_uniform(&[out_c], in_c, rng)),
            out_c,
        }
    }

    pub fn forward(&self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        let v = d * h * w;
        let mut out = Array5::zeros((n, self.out_c, d, h, w));
        let wview = param_view2(&self.weight.value);
        let bias = self.bias.value.as_slice().unwrap();
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xm = ArrayView2::from_shape((c_in, v), xi.as_slice().unwrap()).unwrap();
            let mut oi = out.index_axis_mut(Axis(0), i);
            let os = oi.as_slice_mut().unwrap();
            let mut om = ArrayViewMut2::from_shape((self.out_c, v), os).unwrap();
            general_mat_mul(1.0, &wview, &xm, 0.0, &mut om);
            for o in 0..self.out_c {
                for q in 0..v {
                    os[o * v + q] += bias[o];
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array5<f32>, grad_out: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        let v = d * h * w;
        let mut grad_in = Array5::zeros((n, c_in, d, h, w));
        let wview = param_view2(&self.weight.value).to_owned();
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xm = ArrayView2::from_shape((c_in, v), xi.as_slice().unwrap()).unwrap();
            let gi = grad_out.index_axis(Axis(0), i);
            let gs = gi.as_slice().unwrap();
            let gm = ArrayView2::from_shape((self.out_c, v), gs).unwrap();
            {
                let mut gw = param_view2_mut(&mut self.weight.grad);
                general_mat_mul(1.0, &gm, &xm.t(), 1.0, &mut gw);
            }
            {
                let gb = self.bias.grad.as_slice_mut().unwrap();
                for o in 0..self.out_c {
                    let mut s = 0f32;
                    for q in 0..v {
                        s += gs[o * v + q];
                    }
                    gb[o] += s;
                }
            }
            let mut gin = grad_in.index_axis_mut(Axis(0), i);
            let mut gim =
                ArrayViewMut2::from_shape((c_in, v), gin.as_slice_mut().unwrap()).unwrap();
            general_mat_mul(1.0, &wview.t(), &gm, 0.0, &mut gim);
        }
        grad_in
    }
}

/// Per-channel batch normalization over batch and spatial dimensions.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

/// Cache of the normalized activations for the backward pass.
pub struct BnCache {
    pub xhat: Array5<f32>,
    pub inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize, momentum: f32, eps: f32) -> Self {
        BatchNorm {
            gamma: Param::new(
                format!("{name}.gamma"),
                ndarray::ArrayD::ones(ndarray::IxDyn(&[channels])),
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])),
            ),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn forward_train(&mut self, x: &Array5<f32>) -> (Array5<f32>, BnCache) {
        let (n, c, d, h, w) = x.dim();
        let m = (n * d * h * w) as f64;
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut xhat = Array5::zeros((n, c, d, h, w));
        let mut out = Array5::zeros((n, c, d, h, w));
        let mut inv_std = vec![0f32; c];
        for ch in 0..c {
            let mut sum = 0f64;
            let mut sumsq = 0f64;
            for i in 0..n {
                for v in x.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter() {
                    let vd = *v as f64;
                    sum += vd;
                    sumsq += vd * vd;
                }
            }
            let mean = sum / m;
            let var = (sumsq / m - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = istd as f32;
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean as f32;
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var as f32;
            let (g, b) = (gamma[ch], beta[ch]);
            for i in 0..n {
                let xs = x.index_axis(Axis(0), i);
                let xs = xs.index_axis(Axis(0), ch);
                let xs = xs.as_slice().unwrap();
                let mut xh = xhat.index_axis_mut(Axis(0), i);
                let mut xh = xh.index_axis_mut(Axis(0), ch);
                let xh = xh.as_slice_mut().unwrap();
                let mut oo = out.index_axis_mut(Axis(0), i);
                let mut oo = oo.index_axis_mut(Axis(0), ch);
                let oo = oo.as_slice_mut().unwrap();
                for q in 0..xs.len() {
                    let z = ((xs[q] as f64 - mean) * istd) as f32;
                    xh[q] = z;
                    oo[q] = g * z + b;
                }
            }
        }
        (out, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c, d, h, w) = x.dim();
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut out = Array5::zeros((n, c, d, h, w));
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let mean = self.running_mean[ch];
            let (g, b) = (gamma[ch], beta[ch]);
            for i in 0..n {
                let xs = x.index_axis(Axis(0), i);
                let xs = xs.index_axis(Axis(0), ch);
                let xs = xs.as_slice().unwrap();
                let mut oo = out.index_axis_mut(Axis(0), i);
                let mut oo = oo.index_axis_mut(Axis(0), ch);
                let oo = oo.as_slice_mut().unwrap();
                for q in 0..xs.len() {
                    oo[q] = g * (xs[q] - mean) * istd + b;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Array5<f32>) -> Array5<f32> {
        let (n, c, d, h, w) = grad_out.dim();
        let m = (n * d * h * w) as f64;
        let gamma = self.gamma.value.as_slice().unwrap();
        let mut grad_in = Array5::zeros((n, c, d, h, w));
        for ch in 0..c {
            // channel reductions
            let mut sum_dy = 0f64;
            let mut sum_dy_xhat = 0f64;
            for i in 0..n {
                let gy = grad_out.index_axis(Axis(0), i);
                let gy = gy.index_axis(Axis(0), ch);
                let gy = gy.as_slice().unwrap();
                let xh = cache.xhat.index_axis(Axis(0), i);
                let xh = xh.index_axis(Axis(0), ch);
                let xh = xh.as_slice().unwrap();
                for q in 0..gy.len() {
                    sum_dy += gy[q] as f64;
                    sum_dy_xhat += gy[q] as f64 * xh[q] as f64;
                }
            }
            {
                let gg = self.gamma.grad.as_slice_mut().unwrap();
                let gb = self.beta.grad.as_slice_mut().unwrap();
                gg[ch] += sum_dy_xhat as f32;
                gb[ch] += sum_dy as f32;
            }
            let g = gamma[ch] as f64;
            let istd = cache.inv_std[ch] as f64;
            let k = g * istd / m;
            for i in 0..n {
                let gy = grad_out.index_axis(Axis(0), i);
                let gy = gy.index_axis(Axis(0), ch);
                let gy = gy.as_slice().unwrap();
                let xh = cache.xhat.index_axis(Axis(0), i);
                let xh = xh.index_axis(Axis(0), ch);
                let xh = xh.as_slice().unwrap();
                let mut gi = grad_in.index_axis_mut(Axis(0), i);
                let mut gi = gi.index_axis_mut(Axis(0), ch);
                let gi = gi.as_slice_mut().unwrap();
                for q in 0..gy.len() {
                    gi[q] = (k
                        * (m * gy[q] as f64 - sum_dy - xh[q] as f64 * sum_dy_xhat))
                        as f32;
                }
            }
        }
        grad_in
    }
}

/// ReLU; the backward mask comes from the cached output.
pub fn relu_forward(x: &Array5<f32>) -> Array5<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(out: &Array5<f32>, grad_out: &Array5<f32>) -> Array5<f32> {
    let mut g = grad_out.clone();
    g.zip_mut_with(out, |gv, ov| {
        if *ov <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// 2x2x2 max pooling, stride 2. The cache stores the argmax offset within
/// each pooling block.
pub struct PoolCache {
    pub argmax: Array5<u8>,
}

pub fn maxpool_forward(x: &Array5<f32>) -> (Array5<f32>, PoolCache) {
    let (n, c, d, h, w) = x.dim();
    debug_assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "dims divisible by 2");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Array5::zeros((n, c, od, oh, ow));
    let mut argmax = Array5::zeros((n, c, od, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            let xs = x.index_axis(Axis(0), i);
            let xs = xs.index_axis(Axis(0), ch);
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_o = 0u8;
                        for o in 0..8u8 {
                            let (bz, by, bx) =
                                ((o >> 2) & 1, (o >> 1) & 1, o & 1);
                            let v = xs[[
                                2 * z + bz as usize,
                                2 * y + by as usize,
                                2 * xx + bx as usize,
                            ]];
                            if v > best {
                                best = v;
                                best_o = o;
                            }
                        }
                        out[[i, ch, z, y, xx]] = best;
                        argmax[[i, ch, z, y, xx]] = best_o;
                    }
                }
            }
        }
    }
    (out, PoolCache { argmax })
}

pub fn maxpool_backward(
    cache: &PoolCache,
    grad_out: &Array5<f32>,
    input_dims: (usize, usize, usize, usize, usize),
) -> Array5<f32> {
    let (n, c, od, oh, ow) = grad_out.dim();
    let mut grad_in = Array5::zeros(input_dims);
    for i in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let o = cache.argmax[[i, ch, z, y, xx]];
                        let (bz, by, bx) = ((o >> 2) & 1, (o >> 1) & 1, o & 1);
                        grad_in[[
                            i,
                            ch,
                            2 * z + bz as usize,
                            2 * y + by as usize,
                            2 * xx + bx as usize,
                        ]] += grad_out[[i, ch, z, y, xx]];
                    }
                }
            }
        }
    }
    grad_in
}

/// Transposed convolution with kernel 2, stride 2 (2x upsampling).
#[derive(Debug, Clone)]
pub struct UpConv2 {
    pub weight: Param, // [8, in_c, out_c], one [in_c, out_c] block per offset
    pub bias: Param,   // [out_c]
    pub out_c: usize,
}

impl UpConv2 {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c; // each output voxel receives exactly one tap
        UpConv2 {
            weight: Param::new(
                format!("{name}.weight"),
                init_uniform(&[8, in_c, out_c], fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), init_uniform(&[out_c], fan_in, rng)),
            out_c,
        }
    }

    fn weight_block(&self, o: usize) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .index_axis_move(Axis(0), o)
    }

    pub fn forward(&self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        let v = d * h * w;
        let mut out = Array5::zeros((n, self.out_c, 2 * d, 2 * h, 2 * w));
        let bias = self.bias.value.as_slice().unwrap();
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xm = ArrayView2::from_shape((c_in, v), xi.as_slice().unwrap()).unwrap();
            for o in 0..8usize {
                let (bz, by, bx) = ((o >> 2) & 1, (o >> 1) & 1, o & 1);
                let wb = self.weight_block(o);
                let mut dense = Array2::zeros((self.out_c, v));
                general_mat_mul(1.0, &wb.t(), &xm, 0.0, &mut dense);
                for ch in 0..self.out_c {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                out[[i, ch, 2 * z + bz, 2 * y + by, 2 * xx + bx]] =
                                    dense[[ch, (z * h + y) * w + xx]] + bias[ch];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array5<f32>, grad_out: &Array5<f32>) -> Array5<f32> {
        let (n, c_in, d, h, w) = x.dim();
        let v = d * h * w;
        let mut grad_in = Array5::zeros((n, c_in, d, h, w));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xm = ArrayView2::from_shape((c_in, v), xi.as_slice().unwrap()).unwrap();
            for o in 0..8usize {
                let (bz, by, bx) = ((o >> 2) & 1, (o >> 1) & 1, o & 1);
                // gather the strided grad_out block into a dense [out_c, v]
                let mut go_dense = Array2::zeros((self.out_c, v));
                for ch in 0..self.out_c {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                go_dense[[ch, (z * h + y) * w + xx]] =
                                    grad_out[[i, ch, 2 * z + bz, 2 * y + by, 2 * xx + bx]];
                            }
                        }
                    }
                }
                // weight gradient: x . go^T -> [in_c, out_c]
                {
                    let mut gw = self
                        .weight
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap();
                    let mut gw = gw.index_axis_mut(Axis(0), o);
                    general_mat_mul(1.0, &xm, &go_dense.t(), 1.0, &mut gw);
                }
                // bias gradient
                {
                    let gb = self.bias.grad.as_slice_mut().unwrap();
                    for ch in 0..self.out_c {
                        let mut s = 0f32;
                        for q in 0..v {
                            s += go_dense[[ch, q]];
                        }
                        gb[ch] += s;
                    }
                }
                // input gradient: W . go -> [in_c, v]
                let wb = self.weight_block(o).to_owned();
                let mut gi = grad_in.index_axis_mut(Axis(0), i);
                let mut gim =
                    ArrayViewMut2::from_shape((c_in, v), gi.as_slice_mut().unwrap()).unwrap();
                general_mat_mul(1.0, &wb.view(), &go_dense.view(), 1.0, &mut gim);
            }
        }
        grad_in
    }
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels(a: &Array5<f32>, b: &Array5<f32>) -> Array5<f32> {
    // concatenate() does not yield standard layout; force it so downstream
    // flattening stays valid
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching spatial dims")
        .as_standard_layout()
        .into_owned()
}

/// Split a channel-gradient back into the two concatenated parts.
pub fn split_channels(g: &Array5<f32>, c_first: usize) -> (Array5<f32>, Array5<f32>) {
    let a = g.slice(ndarray::s![.., ..c_first, .., .., ..]).to_owned();
    let b = g.slice(ndarray::s![.., c_first.., .., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::Rng;

    fn rand_tensor(dims: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f32> {
        let mut rng = crate::rng::stream(seed, "layer-test", &[]);
        Array5::from_shape_fn(dims, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Central finite differences on a scalar head `sum(out * probe)`.
    fn check_input_gradient(
        forward: impl Fn(&Array5<f32>) -> Array5<f32>,
        backward: impl Fn(&Array5<f32>, &Array5<f32>) -> Array5<f32>,
        x: &Array5<f32>,
        tol: f64,
    ) {
        let probe = rand_tensor(forward(x).dim(), 999);
        let analytic = backward(x, &probe);
        let h = 1e-2f32;
        let mut max_err = 0f64;
        let mut checked = 0;
        // probe a subset of coordinates
        let len = x.len();
        let step = (len / 40).max(1);
        for flat in (0..len).step_by(step) {
            let mut plus = x.clone();
            let mut minus = x.clone();
            {
                let s = plus.as_slice_mut().unwrap();
                s[flat] += h;
            }
            {
                let s = minus.as_slice_mut().unwrap();
                s[flat] -= h;
            }
            let fp: f64 = forward(&plus)
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let fm: f64 = forward(&minus)
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = analytic.as_slice().unwrap()[flat] as f64;
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            max_err = max_err.max(err);
            checked += 1;
        }
        assert!(checked > 10);
        assert!(max_err < tol, "max relative input-gradient error {max_err}");
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let mut rng = crate::rng::stream(60, "layer-test", &[]);
        let conv = Conv3::new("c", 2, 3, &mut rng);
        let x = rand_tensor((1, 2, 4, 5, 6), 61);
        let out = conv.forward(&x);
        assert_eq!(out.dim(), (1, 3, 4, 5, 6));
        // direct triple-loop convolution oracle at a few voxels
        let w = param_view2(&conv.weight.value);
        for (o, z, y, xx) in [(0usize, 0usize, 0usize, 0usize), (2, 3, 4, 5), (1, 2, 2, 3)] {
            let mut acc = conv.bias.value.as_slice().unwrap()[o];
            for c in 0..2usize {
                for t in 0..27usize {
                    let dz = (t / 9) as isize - 1;
                    let dy = ((t / 3) % 3) as isize - 1;
                    let dx = (t % 3) as isize - 1;
                    let (sz, sy, sx) = (z as isize + dz, y as isize + dy, xx as isize + dx);
                    if sz < 0 || sy < 0 || sx < 0 || sz >= 4 || sy >= 5 || sx >= 6 {
                        continue;
                    }
                    acc += w[[o, c * 27 + t]]
                        * x[[0, c, sz as usize, sy as usize, sx as usize]];
                }
            }
            let got = out[[0, o, z, y, xx]];
            assert!((got - acc).abs() < 1e-4, "at {o},{z},{y},{xx}: {got} vs {acc}");
        }
    }

    #[test]
    fn conv3_input_gradient() {
        let mut rng = crate::rng::stream(62, "layer-test", &[]);
        let conv = Conv3::new("c", 2, 2, &mut rng);
        let x = rand_tensor((2, 2, 4, 4, 4), 63);
        check_input_gradient(
            |x| conv.forward(x),
            |x, g| conv.clone().backward(x, g),
            &x,
            2e-2,
        );
    }

    #[test]
    fn conv3_weight_gradient() {
        let mut rng = crate::rng::stream(64, "layer-test", &[]);
        let conv = Conv3::new("c", 1, 2, &mut rng);
        let x = rand_tensor((1, 1, 4, 4, 4), 65);
        let probe = rand_tensor((1, 2, 4, 4, 4), 66);
        let mut c2 = conv.clone();
        c2.backward(&x, &probe);
        let analytic = c2.weight.grad.clone();
        let h = 1e-2f32;
        let mut max_err = 0f64;
        for flat in 0..conv.weight.value.len() {
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += h;
            let fp: f64 = cp
                .forward(&x)
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let fm: f64 = cm
                .forward(&x)
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = analytic.as_slice().unwrap()[flat] as f64;
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            max_err = max_err.max(err);
        }
        assert!(max_err < 2e-2, "max weight-gradient error {max_err}");
    }

    #[test]
    fn batchnorm_normalizes_and_gradients_flow() {
        let mut bn = BatchNorm::new("bn", 3, 0.1, 1e-5);
        let x = rand_tensor((2, 3, 4, 4, 4), 67);
        let (out, cache) = bn.forward_train(&x);
        // per-channel mean ~0, var ~1 (gamma=1, beta=0 initially)
        for ch in 0..3usize {
            let vals: Vec<f64> = (0..2)
                .flat_map(|i| {
                    out.index_axis(Axis(0), i)
                        .index_axis(Axis(0), ch)
                        .iter()
                        .map(|v| *v as f64)
                        .collect::<Vec<_>>()
                })
                .collect();
            let mean = crate::stats::mean(&vals);
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        }
        // input gradient via finite differences
        let x2 = rand_tensor((1, 2, 4, 4, 2), 68);
        let bn2 = BatchNorm::new("bn2", 2, 0.1, 1e-5);
        check_input_gradient(
            |x| bn2.clone().forward_train(x).0,
            |x, g| {
                let mut b = bn2.clone();
                let (_, cache) = b.forward_train(x);
                b.backward(&cache, g)
            },
            &x2,
            2e-2,
        );
        let _ = cache;
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm::new("bn", 1, 0.5, 1e-5);
        let x = rand_tensor((2, 1, 2, 2, 2), 69).mapv(|v| v * 3.0 + 1.0);
        let _ = bn.forward_train(&x);
        let y1 = bn.forward_eval(&x);
        let y2 = bn.forward_eval(&x);
        assert_eq!(y1, y2);
        // running stats moved toward batch stats
        assert!(bn.running_mean[0] != 0.0);
    }

    #[test]
    fn relu_masks_gradient() {
        let x = rand_tensor((1, 1, 2, 2, 2), 70);
        let out = relu_forward(&x);
        assert!(out.iter().all(|v| *v >= 0.0));
        let g = rand_tensor((1, 1, 2, 2, 2), 71);
        let gi = relu_backward(&out, &g);
        for ((o, gv), gi) in out.iter().zip(g.iter()).zip(gi.iter()) {
            if *o > 0.0 {
                assert_eq!(gv, gi);
            } else {
                assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn maxpool_round_trip() {
        let x = rand_tensor((1, 2, 4, 4, 4), 72);
        let (out, cache) = maxpool_forward(&x);
        assert_eq!(out.dim(), (1, 2, 2, 2, 2));
        // every output is the max of its block
        for z in 0..2usize {
            let v = out[[0, 0, z, 0, 0]];
            let mut found = false;
            for bz in 0..2usize {
                for by in 0..2usize {
                    for bx in 0..2usize {
                        if x[[0, 0, 2 * z + bz, by, bx]] == v {
                            found = true;
                        }
                        assert!(x[[0, 0, 2 * z + bz, by, bx]] <= v);
                    }
                }
            }
            assert!(found);
        }
        let g = rand_tensor((1, 2, 2, 2, 2), 73);
        let gi = maxpool_backward(&cache, &g, (1, 2, 4, 4, 4));
        // gradient mass is conserved
        let sum_g: f32 = g.iter().sum();
        let sum_gi: f32 = gi.iter().sum();
        assert!((sum_g - sum_gi).abs() < 1e-4);
    }

    #[test]
    fn upconv_shapes_and_gradient() {
        let mut rng = crate::rng::stream(74, "layer-test", &[]);
        let up = UpConv2::new("up", 3, 2, &mut rng);
        let x = rand_tensor((1, 3, 2, 2, 2), 75);
        let out = up.forward(&x);
        assert_eq!(out.dim(), (1, 2, 4, 4, 4));
        check_input_gradient(
            |x| up.forward(x),
            |x, g| up.clone().backward(x, g),
            &x,
            2e-2,
        );
    }

    #[test]
    fn concat_split_inverse() {
        let a = rand_tensor((1, 2, 2, 2, 2), 76);
        let b = rand_tensor((1, 3, 2, 2, 2), 77);
        let c = concat_channels(&a, &b);
        assert_eq!(c.dim(), (1, 5, 2, 2, 2));
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
