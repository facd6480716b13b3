//! Convolution, transposed convolution and batch normalization with
//! hand-written backward passes.
//!
//! Convolutions are lowered to GEMM through `im2col`/`col2im`, processed in
//! tiles of output rows so the column buffer stays cache-sized. Padding is
//! "same"-style: `ceil(n / stride)` outputs for a convolution, `n·stride` for
//! a transposed convolution, with the odd padding pixel placed after.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Elements of `im2col` buffer per tile.
const TILE_BUDGET: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub norm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(stride: usize, out_channels: usize) -> Self {
        LayerSpec {
            op: LayerOp::Conv,
            kernel: 4,
            stride,
            out_channels,
            norm: true,
            activation: Activation::LeakyRelu,
        }
    }

    pub fn deconv(out_channels: usize) -> Self {
        LayerSpec {
            op: LayerOp::Deconv,
            ..Self::conv(2, out_channels)
        }
    }

    pub fn head(out_channels: usize, activation: Activation) -> Self {
        LayerSpec {
            norm: false,
            activation,
            ..Self::conv(1, out_channels)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kernel != 4 {
            return Err(format!("kernel must be 4, got {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.op == LayerOp::Deconv && self.stride != 2 {
            return Err("transposed convolutions use stride 2".into());
        }
        if self.out_channels == 0 {
            return Err("out_channels must be positive".into());
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.op {
            LayerOp::Conv => (h.div_ceil(self.stride), w.div_ceil(self.stride)),
            LayerOp::Deconv => (h * self.stride, w * self.stride),
        }
    }
}

/// Sliding-window geometry between an "image" and the grid of kernel
/// positions over it. For a convolution the image is the input; for a
/// transposed convolution it is the output.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    grid_h: usize,
    grid_w: usize,
    k: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

impl Window {
    fn new(channels: usize, (h, w): (usize, usize), (grid_h, grid_w): (usize, usize), k: usize, stride: usize) -> Self {
        let pad = |n: usize, g: usize| ((g - 1) * stride + k).saturating_sub(n) / 2;
        Window {
            channels,
            h,
            w,
            grid_h,
            grid_w,
            k,
            stride,
            pad_y: pad(h, grid_h),
            pad_x: pad(w, grid_w),
        }
    }

    fn rows(&self) -> usize {
        self.k * self.k * self.channels
    }

    fn tile_rows(&self) -> usize {
        (TILE_BUDGET / (self.rows() * self.grid_w)).clamp(1, self.grid_h)
    }

    /// Range of grid columns whose tap `kw` lands inside the image.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let lo = (self.pad_x.saturating_sub(kw)).div_ceil(self.stride);
        let hi = if self.w + self.pad_x < kw + 1 {
            0
        } else {
            ((self.w - 1 + self.pad_x - kw) / self.stride + 1).min(self.grid_w)
        };
        (lo.min(hi), hi)
    }

    fn src_row(&self, gy: usize, kh: usize) -> Option<usize> {
        let iy = (gy * self.stride + kh) as isize - self.pad_y as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Unfolds `img` (`channels × h × w`) into `cols` (`rows × np`), row index
    /// `(kh·k + kw)·channels + c`.
    fn im2col<T: Real>(&self, img: &[T], grid_rows: Range<usize>, cols: &mut [T]) {
        let np = grid_rows.len() * self.grid_w;
        let plane = self.h * self.w;
        for kh in 0..self.k {
            for kw in 0..self.k {
                let (lo, hi) = self.valid_cols(kw);
                for c in 0..self.channels {
                    let r = (kh * self.k + kw) * self.channels + c;
                    let dst_row = &mut cols[r * np..(r + 1) * np];
                    let src_plane = &img[c * plane..(c + 1) * plane];
                    for (t, gy) in grid_rows.clone().enumerate() {
                        let dst = &mut dst_row[t * self.grid_w..(t + 1) * self.grid_w];
                        let Some(iy) = self.src_row(gy, kh) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src = &src_plane[iy * self.w..(iy + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let x0 = lo * self.stride + kw - self.pad_x;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[x0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `cols` back into `img`.
    fn col2im<T: Real>(&self, cols: &[T], grid_rows: Range<usize>, img: &mut [T]) {
        let np = grid_rows.len() * self.grid_w;
        let plane = self.h * self.w;
        for kh in 0..self.k {
            for kw in 0..self.k {
                let (lo, hi) = self.valid_cols(kw);
                if lo >= hi {
                    continue;
                }
                for c in 0..self.channels {
                    let r = (kh * self.k + kw) * self.channels + c;
                    let src_row = &cols[r * np..(r + 1) * np];
                    let dst_plane = &mut img[c * plane..(c + 1) * plane];
                    for (t, gy) in grid_rows.clone().enumerate() {
                        let Some(iy) = self.src_row(gy, kh) else {
                            continue;
                        };
                        let src = &src_row[t * self.grid_w..(t + 1) * self.grid_w];
                        let dst = &mut dst_plane[iy * self.w..(iy + 1) * self.w];
                        let x0 = lo * self.stride + kw - self.pad_x;
                        for (j, &v) in src[lo..hi].iter().enumerate() {
                            let d = &mut dst[x0 + j * self.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Learned affine parameters and running statistics of a batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// One convolution or transposed convolution with optional batch norm and
/// activation.
///
/// Dot product with eight independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Weight layouts: convolution `[kh, kw, in, out]`, transposed convolution
/// `[kh, kw, out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<BatchNorm<T>>,
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    input: Tensor<T>,
    xhat: Option<Tensor<T>>,
    inv_std: Vec<T>,
    output: Tensor<T>,
    pub(crate) batch_mean: Vec<T>,
    pub(crate) batch_var: Vec<T>,
}

impl<T: Real> LayerCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

/// Gradients of one layer's trainable arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerGrads<T> {
    pub fn arrays(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.weight, &self.bias];
        if !self.gamma.is_empty() {
            v.push(&self.gamma);
            v.push(&self.beta);
        }
        v
    }
}

impl<T: Real> Layer<T> {
    pub fn new(spec: LayerSpec, in_channels: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let k = spec.kernel;
        let weight = (0..k * k * in_channels * spec.out_channels)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Layer {
            spec,
            in_channels,
            weight,
            bias: vec![T::zero(); spec.out_channels],
            norm: spec.norm.then(|| BatchNorm::new(spec.out_channels)),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.spec.kernel;
        match self.spec.op {
            LayerOp::Conv => [k, k, self.in_channels, self.spec.out_channels],
            LayerOp::Deconv => [k, k, self.spec.out_channels, self.in_channels],
        }
    }

    /// Named arrays in a fixed order: trainable ones first, then running
    /// statistics.
    pub fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        let c = vec![self.spec.out_channels];
        let mut v = vec![
            ("weight", self.weight_shape().to_vec(), self.weight.as_slice()),
            ("bias", c.clone(), self.bias.as_slice()),
        ];
        if let Some(bn) = &self.norm {
            v.push(("gamma", c.clone(), &bn.gamma));
            v.push(("beta", c.clone(), &bn.beta));
            v.push(("running_mean", c.clone(), &bn.running_mean));
            v.push(("running_var", c, &bn.running_var));
        }
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        let mut v = vec![("weight", &mut self.weight), ("bias", &mut self.bias)];
        if let Some(bn) = &mut self.norm {
            v.push(("gamma", &mut bn.gamma));
            v.push(("beta", &mut bn.beta));
            v.push(("running_mean", &mut bn.running_mean));
            v.push(("running_var", &mut bn.running_var));
        }
        v
    }

    /// Trainable arrays, in the same order as [`LayerGrads::arrays`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.norm {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn zero_grads(&self) -> LayerGrads<T> {
        let norm_len = if self.norm.is_some() {
            self.spec.out_channels
        } else {
            0
        };
        LayerGrads {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            gamma: vec![T::zero(); norm_len],
            beta: vec![T::zero(); norm_len],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.norm.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
    }

    fn window(&self, input_hw: (usize, usize)) -> Window {
        let out_hw = self.spec.output_size(input_hw.0, input_hw.1);
        match self.spec.op {
            LayerOp::Conv => Window::new(self.in_channels, input_hw, out_hw, self.spec.kernel, self.spec.stride),
            LayerOp::Deconv => Window::new(self.spec.out_channels, out_hw, input_hw, self.spec.kernel, self.spec.stride),
        }
    }

    fn check_input(&self, x: &Tensor<T>) {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "layer expects {} input channels",
            self.in_channels
        );
    }

    /// Stride-1 convolutions with few outputs skip the im2col lowering.
    fn shifted(&self) -> bool {
        self.spec.op == LayerOp::Conv && self.spec.stride == 1 && self.spec.out_channels <= 4
    }

    /// Calls `f(co, weight index, input channel, output row, input row,
    /// grid column range, input column offset)` for every valid tap.
    fn for_each_tap(&self, win: &Window, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), usize)) {
        let (k, cin, cout) = (self.spec.kernel, self.in_channels, self.spec.out_channels);
        for gy in 0..win.grid_h {
            for kh in 0..k {
                let Some(iy) = win.src_row(gy, kh) else { continue };
                for kw in 0..k {
                    let cols = win.valid_cols(kw);
                    if cols.0 >= cols.1 {
                        continue;
                    }
                    let off = cols.0 + kw - win.pad_x;
                    for c in 0..cin {
                        for co in 0..cout {
                            f(co, ((kh * k + kw) * cin + c) * cout + co, c, gy, iy, cols, off);
                        }
                    }
                }
            }
        }
    }

    /// Linear part: convolution plus bias.
    fn linear(&self, x: &Tensor<T>) -> Tensor<T> {
        self.check_input(x);
        let [n, cin, h, w] = x.shape();
        let cout = self.spec.out_channels;
        let (ho, wo) = self.spec.output_size(h, w);
        let win = self.window((h, w));
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        if self.shifted() {
            for i in 0..n {
                let img = x.image(i);
                let dst = out.image_mut(i);
                self.for_each_tap(&win, |co, wi, c, gy, iy, (lo, hi), off| {
                    let wv = self.weight[wi];
                    let d = &mut dst[co * ho * wo + gy * wo + lo..co * ho * wo + gy * wo + hi];
                    let s = &img[c * h * w + iy * w + off..][..hi - lo];
                    d.iter_mut().zip(s).for_each(|(d, s)| *d = *d + wv * *s);
                });
            }
            self.add_bias(&mut out);
            return out;
        }
        let rows = win.rows();
        let tile = win.tile_rows();
        let mut cols = vec![T::zero(); rows * tile * win.grid_w];
        for i in 0..n {
            let img = x.image(i);
            let dst = out.image_mut(i);
            for r0 in (0..win.grid_h).step_by(tile) {
                let r1 = (r0 + tile).min(win.grid_h);
                let np = (r1 - r0) * win.grid_w;
                match self.spec.op {
                    LayerOp::Conv => {
                        win.im2col(img, r0..r1, &mut cols[..rows * np]);
                        // out[co, p] = Σ_k W[k, co] · cols[k, p]
                        unsafe {
                            T::gemm(
                                cout, rows, np, T::one(),
                                self.weight.as_ptr(), 1, cout as isize,
                                cols.as_ptr(), np as isize, 1,
                                T::zero(),
                                dst[r0 * wo..].as_mut_ptr(), (ho * wo) as isize, 1,
                            );
                        }
                    }
                    LayerOp::Deconv => {
                        // cols[k, p] = Σ_ci W[k, ci] · x[ci, p]
                        unsafe {
                            T::gemm(
                                rows, cin, np, T::one(),
                                self.weight.as_ptr(), cin as isize, 1,
                                img[r0 * w..].as_ptr(), (h * w) as isize, 1,
                                T::zero(),
                                cols.as_mut_ptr(), np as isize, 1,
                            );
                        }
                        win.col2im(&cols[..rows * np], r0..r1, dst);
                    }
                }
            }
        }
        self.add_bias(&mut out);
        out
    }

    fn add_bias(&self, out: &mut Tensor<T>) {
        let [n, _, ho, wo] = out.shape();
        for i in 0..n {
            for (c, chunk) in out.image_mut(i).chunks_mut(ho * wo).enumerate() {
                let b = self.bias[c];
                chunk.iter_mut().for_each(|v| *v = *v + b);
            }
        }
    }

    /// Gradient of the linear part. Accumulates into `grads` and returns the
    /// input gradient when asked for.
    fn linear_backward(&self, x: &Tensor<T>, dz: &Tensor<T>, grads: &mut LayerGrads<T>, want_input: bool) -> Option<Tensor<T>> {
        let [n, cin, h, w] = x.shape();
        let cout = self.spec.out_channels;
        let [_, _, ho, wo] = dz.shape();
        let plane = ho * wo;
        for i in 0..n {
            for (c, chunk) in dz.image(i).chunks(plane).enumerate() {
                grads.bias[c] = grads.bias[c] + chunk.iter().copied().sum::<T>();
            }
        }

        let win = self.window((h, w));
        if self.shifted() {
            let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
            for i in 0..n {
                let img = x.image(i);
                let g = dz.image(i);
                let mut dxi = dx.as_mut().map(|t| t.image_mut(i));
                self.for_each_tap(&win, |co, wi, c, gy, iy, (lo, hi), off| {
                    let gr = &g[co * plane + gy * wo + lo..co * plane + gy * wo + hi];
                    let src = c * h * w + iy * w + off;
                    grads.weight[wi] = grads.weight[wi] + dot(gr, &img[src..src + hi - lo]);
                    if let Some(dxi) = dxi.as_mut() {
                        let wv = self.weight[wi];
                        dxi[src..src + hi - lo]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d = *d + wv * *g);
                    }
                });
            }
            return dx;
        }
        let rows = win.rows();
        let tile = win.tile_rows();
        let mut cols = vec![T::zero(); rows * tile * win.grid_w];
        let mut dcols = vec![T::zero(); if self.spec.op == LayerOp::Conv && want_input { rows * tile * win.grid_w } else { 0 }];
        let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let img = x.image(i);
            let g = dz.image(i);
            for r0 in (0..win.grid_h).step_by(tile) {
                let r1 = (r0 + tile).min(win.grid_h);
                let np = (r1 - r0) * win.grid_w;
                match self.spec.op {
                    LayerOp::Conv => {
                        win.im2col(img, r0..r1, &mut cols[..rows * np]);
                        // dW[k, co] += Σ_p cols[k, p] · dz[co, p]
                        unsafe {
                            T::gemm(
                                rows, np, cout, T::one(),
                                cols.as_ptr(), np as isize, 1,
                                g[r0 * wo..].as_ptr(), 1, plane as isize,
                                T::one(),
                                grads.weight.as_mut_ptr(), cout as isize, 1,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            // dcols[k, p] = Σ_co W[k, co] · dz[co, p]
                            unsafe {
                                T::gemm(
                                    rows, cout, np, T::one(),
                                    self.weight.as_ptr(), cout as isize, 1,
                                    g[r0 * wo..].as_ptr(), plane as isize, 1,
                                    T::zero(),
                                    dcols.as_mut_ptr(), np as isize, 1,
                                );
                            }
                            win.col2im(&dcols[..rows * np], r0..r1, dx.image_mut(i));
                        }
                    }
                    LayerOp::Deconv => {
                        win.im2col(g, r0..r1, &mut cols[..rows * np]);
                        // dW[k, ci] += Σ_p dcols[k, p] · x[ci, p]
                        unsafe {
                            T::gemm(
                                rows, np, cin, T::one(),
                                cols.as_ptr(), np as isize, 1,
                                img[r0 * w..].as_ptr(), 1, (h * w) as isize,
                                T::one(),
                                grads.weight.as_mut_ptr(), cin as isize, 1,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            // dx[ci, p] = Σ_k W[k, ci] · dcols[k, p]
                            unsafe {
                                T::gemm(
                                    cin, rows, np, T::one(),
                                    self.weight.as_ptr(), 1, cin as isize,
                                    cols.as_ptr(), np as isize, 1,
                                    T::zero(),
                                    dx.image_mut(i)[r0 * w..].as_mut_ptr(), (h * w) as isize, 1,
                                );
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn activate(&self, t: &mut Tensor<T>) {
        match self.spec.activation {
            Activation::LeakyRelu => {
                let slope = T::lit(LEAKY_SLOPE);
                t.data_mut().iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = *v * slope
                    }
                });
            }
            Activation::Tanh => t.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::None => {}
        }
    }

    /// Inference forward pass using running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut z = self.linear(x);
        if let Some(bn) = &self.norm {
            let plane = z.plane_len();
            let eps = T::lit(BN_EPS);
            for i in 0..z.batch() {
                for (c, chunk) in z.image_mut(i).chunks_mut(plane).enumerate() {
                    let scale = bn.gamma[c] / (bn.running_var[c] + eps).sqrt();
                    let shift = bn.beta[c] - bn.running_mean[c] * scale;
                    chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
        }
        self.activate(&mut z);
        z
    }

    /// Training forward pass: batch statistics, cache kept for backward.
    pub fn forward_train(&self, x: Tensor<T>) -> (Tensor<T>, LayerCache<T>) {
        let mut z = self.linear(&x);
        let mut xhat = None;
        let (mut inv_std, mut batch_mean, mut batch_var) = (Vec::new(), Vec::new(), Vec::new());
        if let Some(bn) = &self.norm {
            let [n, c, _, _] = z.shape();
            let plane = z.plane_len();
            let count = (n * plane) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..n {
                    for v in &z.image(i)[ch * plane..(ch + 1) * plane] {
                        sum += v.to_f64().unwrap();
                    }
                }
                let mean = sum / count;
                let mut var = 0.0;
                for i in 0..n {
                    for v in &z.image(i)[ch * plane..(ch + 1) * plane] {
                        let d = v.to_f64().unwrap() - mean;
                        var += d * d;
                    }
                }
                var /= count;
                batch_mean.push(T::lit(mean));
                batch_var.push(T::lit(var));
                inv_std.push(T::lit(1.0 / (var + BN_EPS).sqrt()));
            }
            for i in 0..n {
                for (ch, chunk) in z.image_mut(i).chunks_mut(plane).enumerate() {
                    let (m, s) = (batch_mean[ch], inv_std[ch]);
                    chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
                }
            }
            let normalized = z.clone();
            for i in 0..n {
                for (ch, chunk) in z.image_mut(i).chunks_mut(plane).enumerate() {
                    let (g, b) = (bn.gamma[ch], bn.beta[ch]);
                    chunk.iter_mut().for_each(|v| *v = *v * g + b);
                }
            }
            xhat = Some(normalized);
        }
        self.activate(&mut z);
        let cache = LayerCache {
            input: x,
            xhat,
            inv_std,
            output: z.clone(),
            batch_mean,
            batch_var,
        };
        (z, cache)
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &LayerCache<T>) {
        let Some(bn) = &mut self.norm else { return };
        let count = cache.input.batch() * cache.output.plane_len();
        let correction = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for c in 0..bn.gamma.len() {
            bn.running_mean[c] = keep * bn.running_mean[c] + m * cache.batch_mean[c];
            bn.running_var[c] = keep * bn.running_var[c] + m * cache.batch_var[c] * correction;
        }
    }

    pub fn backward(&self, cache: &LayerCache<T>, mut grad: Tensor<T>, grads: &mut LayerGrads<T>, want_input: bool) -> Option<Tensor<T>> {
        match self.spec.activation {
            Activation::LeakyRelu => {
                let slope = T::lit(LEAKY_SLOPE);
                for (g, &y) in grad.data_mut().iter_mut().zip(cache.output.data()) {
                    if y < T::zero() {
                        *g = *g * slope;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &y) in grad.data_mut().iter_mut().zip(cache.output.data()) {
                    *g = *g * (T::one() - y * y);
                }
            }
            Activation::None => {}
        }

        if let (Some(bn), Some(xhat)) = (&self.norm, &cache.xhat) {
            let [n, c, _, _] = grad.shape();
            let plane = grad.plane_len();
            let count = T::lit((n * plane) as f64);
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for i in 0..n {
                    let g = &grad.image(i)[ch * plane..(ch + 1) * plane];
                    let xh = &xhat.image(i)[ch * plane..(ch + 1) * plane];
                    for (&gv, &xv) in g.iter().zip(xh) {
                        let gv = gv.to_f64().unwrap();
                        sum_g += gv;
                        sum_gx += gv * xv.to_f64().unwrap();
                    }
                }
                grads.gamma[ch] = grads.gamma[ch] + T::lit(sum_gx);
                grads.beta[ch] = grads.beta[ch] + T::lit(sum_g);
                let scale = bn.gamma[ch] * cache.inv_std[ch] / count;
                let (sg, sgx) = (T::lit(sum_g), T::lit(sum_gx));
                for i in 0..n {
                    let range = ch * plane..(ch + 1) * plane;
                    let xh = &xhat.image(i)[range.clone()];
                    let g = &mut grad.image_mut(i)[range];
                    for (gv, &xv) in g.iter_mut().zip(xh) {
                        *gv = scale * (count * *gv - sg - xv * sgx);
                    }
                }
            }
        }

        self.linear_backward(&cache.input, &grad, grads, want_input)
    }
}
