//! Primitive layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs only when run in
//! [`Mode::Train`]. Gradients accumulate into [`Param`] buffers; callers zero
//! them between optimizer steps.

use rand::Rng;

use super::param::{join, Param, TensorKind, Visit};
use super::tensor::{Matrix, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches, no state mutation.
    Eval,
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with arbitrary strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the assertions above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2-D convolution without bias (every conv here feeds a
/// batch norm). Implemented as im2col + GEMM per sample.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-uniform initialization: U(-√(6/fan_in), √(6/fan_in)).
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let limit = (6.0 / fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(out_channels * fan_in, limit, rng),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let l = oh * ow;
        for ci in 0..self.in_channels {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let l = oh * ow;
        for ci in 0..self.in_channels {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        if x.c != self.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.c
            )));
        }
        let (oh, ow) = self.output_size(x.h, x.w).ok_or_else(|| {
            NnError::ShapeMismatch(format!("{}×{} input is smaller than a {}-kernel", x.h, x.w, self.kernel))
        })?;
        let kk = self.in_channels * self.kernel * self.kernel;
        let l = oh * ow;
        let mut out = Tensor::zeros(x.n, self.out_channels, oh, ow);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * l] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let b: &[f64] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut cols);
                &cols
            };
            gemm(self.out_channels, kk, l, &self.weight.value, (kk, 1), b, (l, 1), 0.0, out.sample_mut(i));
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without a training forward");
        let (oh, ow) = (dy.h, dy.w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let l = oh * ow;
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * l] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; kk * l] };
        for i in 0..x.n {
            let dys = dy.sample(i);
            let xs = x.sample(i);
            let b: &[f64] = if pointwise {
                xs
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut cols);
                &cols
            };
            // dW[out×kk] += dY[out×l] · colsᵀ[l×kk]
            let (w, gw) = self.weight.split_mut();
            gemm(self.out_channels, l, kk, dys, (l, 1), b, (1, l), 1.0, gw);
            // dcols[kk×l] = Wᵀ[kk×out] · dY[out×l]
            if pointwise {
                gemm(kk, self.out_channels, l, w, (1, kk), dys, (l, 1), 0.0, dx.sample_mut(i));
            } else {
                gemm(kk, self.out_channels, l, w, (1, kk), dys, (l, 1), 0.0, &mut dcols);
                self.col2im(&dcols, x.h, x.w, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl Visit for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.value);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
    fn visit_buffers_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Vec<f64>)) {}
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channel mismatch");
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut out = x.clone();
        match mode {
            Mode::Eval => {
                for i in 0..x.n {
                    let s = out.sample_mut(i);
                    for c in 0..self.channels {
                        let scale = self.gamma.value[c] / (self.running_var[c] + self.eps).sqrt();
                        let shift = self.beta.value[c] - self.running_mean[c] * scale;
                        for v in &mut s[c * plane..(c + 1) * plane] {
                            *v = *v * scale + shift;
                        }
                    }
                }
            }
            Mode::Train => {
                let mut mean = vec![0.0; self.channels];
                let mut var = vec![0.0; self.channels];
                for i in 0..x.n {
                    let s = x.sample(i);
                    for c in 0..self.channels {
                        mean[c] += s[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..x.n {
                    let s = x.sample(i);
                    for c in 0..self.channels {
                        var[c] += s[c * plane..(c + 1) * plane].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let mut x_hat = vec![0.0; x.data.len()];
                for i in 0..x.n {
                    let base = i * x.sample_len();
                    for c in 0..self.channels {
                        let range = base + c * plane..base + (c + 1) * plane;
                        for j in range {
                            let xh = (x.data[j] - mean[c]) * inv_std[c];
                            x_hat[j] = xh;
                            out.data[j] = self.gamma.value[c] * xh + self.beta.value[c];
                        }
                    }
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..self.channels {
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                    self.running_var[c] =
                        (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
                }
                self.cache = Some(BnCache { x_hat, inv_std });
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { x_hat, inv_std } = self.cache.take().expect("batch norm backward without a training forward");
        let plane = dy.plane();
        let count = (dy.n * plane) as f64;
        let mut sum_dy = vec![0.0; self.channels];
        let mut sum_dy_xhat = vec![0.0; self.channels];
        for i in 0..dy.n {
            let base = i * dy.sample_len();
            for c in 0..self.channels {
                for j in base + c * plane..base + (c + 1) * plane {
                    sum_dy[c] += dy.data[j];
                    sum_dy_xhat[c] += dy.data[j] * x_hat[j];
                }
            }
        }
        {
            let g = self.gamma.grad_mut();
            for c in 0..self.channels {
                g[c] += sum_dy_xhat[c];
            }
        }
        {
            let g = self.beta.grad_mut();
            for c in 0..self.channels {
                g[c] += sum_dy[c];
            }
        }
        let mut dx = dy.clone();
        for i in 0..dy.n {
            let base = i * dy.sample_len();
            for c in 0..self.channels {
                let k = self.gamma.value[c] * inv_std[c] / count;
                for j in base + c * plane..base + (c + 1) * plane {
                    dx.data[j] = k * (count * dy.data[j] - sum_dy[c] - x_hat[j] * sum_dy_xhat[c]);
                }
            }
        }
        dx
    }
}

impl Visit for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.gamma.value);
        f(&join(prefix, "bias"), TensorKind::Param, &self.beta.value);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &self.running_var);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        if mode == Mode::Train {
            self.mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without a training forward");
        let mut dx = dy.clone();
        for (d, keep) in dx.data.iter_mut().zip(mask) {
            if !keep {
                *d = 0.0;
            }
        }
        dx
    }
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, argmax: None }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let (oh, ow) = self
            .output_size(x.h, x.w)
            .ok_or_else(|| NnError::ShapeMismatch(format!("{}×{} input too small for max pool", x.h, x.w)))?;
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = vec![0usize; out.data.len()];
        let p = self.padding as isize;
        let mut o = 0;
        for i in 0..x.n {
            for c in 0..x.c {
                let base = (i * x.c + c) * x.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - p;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * x.w + ix as usize;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.data[o] = best;
                        arg[o] = best_idx;
                        o += 1;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some((arg, x.shape()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, [n, c, h, w]) = self.argmax.take().expect("max pool backward without a training forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        for (g, &idx) in dy.data.iter().zip(&arg) {
            dx.data[idx] += g;
        }
        dx
    }
}

/// Non-overlapping average pooling (kernel = stride), floor on odd sizes.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
    shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize) -> Self {
        Self { kernel, shape: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let k = self.kernel;
        let (oh, ow) = (x.h / k, x.w / k);
        if oh == 0 || ow == 0 {
            return Err(NnError::ShapeMismatch(format!("{}×{} input too small for avg pool", x.h, x.w)));
        }
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let norm = 1.0 / (k * k) as f64;
        for nc in 0..x.n * x.c {
            let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
            let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += src[(oy * k + ky) * x.w + ox * k + kx];
                        }
                    }
                    dst[oy * ow + ox] = s * norm;
                }
            }
        }
        if mode == Mode::Train {
            self.shape = Some(x.shape());
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = self.shape.take().expect("avg pool backward without a training forward");
        let k = self.kernel;
        let norm = 1.0 / (k * k) as f64;
        let mut dx = Tensor::zeros(n, c, h, w);
        let (oh, ow) = (dy.h, dy.w);
        for nc in 0..n * c {
            let src = &dy.data[nc * oh * ow..(nc + 1) * oh * ow];
            let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = src[oy * ow + ox] * norm;
                    for ky in 0..k {
                        for kx in 0..k {
                            dst[(oy * k + ky) * w + ox * k + kx] += g;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Spatial mean per channel: N×C×H×W → N×C.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Matrix {
        let plane = x.plane();
        let data = x.data.chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        if mode == Mode::Train {
            self.shape = Some(x.shape());
        }
        Matrix::from_vec(x.n, x.c, data)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Tensor {
        let [n, c, h, w] = self.shape.take().expect("pool backward without a training forward");
        let plane = h * w;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (chunk, g) in dx.data.chunks_exact_mut(plane).zip(&dy.data) {
            chunk.fill(g / plane as f64);
        }
        dx
    }
}

/// Affine map `y = x·Wᵀ + b`, W stored out×in.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Matrix>,
}

impl Linear {
    /// Weights U(-1/√in, 1/√in), zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::uniform(in_features * out_features, limit, rng),
            bias: Param::zeros(out_features),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Matrix {
        assert_eq!(x.cols, self.in_features, "linear input width mismatch");
        let mut out = Matrix::zeros(x.rows, self.out_features);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            x.rows,
            self.in_features,
            self.out_features,
            &x.data,
            (self.in_features, 1),
            &self.weight.value,
            (1, self.in_features),
            1.0,
            &mut out.data,
        );
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let x = self.input.take().expect("linear backward without a training forward");
        {
            let gb = self.bias.grad_mut();
            for row in dy.iter_rows() {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let (w, gw) = self.weight.split_mut();
        // dW[out×in] += dYᵀ[out×B] · X[B×in]
        gemm(self.out_features, dy.rows, self.in_features, &dy.data, (1, self.out_features), &x.data, (self.in_features, 1), 1.0, gw);
        let mut dx = Matrix::zeros(x.rows, self.in_features);
        gemm(dy.rows, self.out_features, self.in_features, &dy.data, (self.out_features, 1), w, (self.in_features, 1), 0.0, &mut dx.data);
        dx
    }
}

impl Visit for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.value);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias.value);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
    fn visit_buffers_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Vec<f64>)) {}
}
