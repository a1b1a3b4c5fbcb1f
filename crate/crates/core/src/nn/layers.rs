use rand::Rng;

use super::gemm::{gemm, View};
use super::{Buffer, Mode, Param, Parameterized, Tensor, BN_EPS, BN_MOMENTUM, CHUNK};
use crate::exec;

/// Fully-connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    inputs: usize,
    outputs: usize,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                vec![outputs, inputs],
                inputs,
                rng,
            ),
            bias: Param::fan_in_uniform(format!("{name}.bias"), vec![outputs], inputs, rng),
            inputs,
            outputs,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.inputs, "linear input width");
        let n = x.n;
        let mut y = vec![0.0; n * self.outputs];
        for row in y.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            View::rm(&x.data, n, self.inputs),
            View::rm_t(&self.weight.value, self.outputs, self.inputs),
            1.0,
            &mut y,
        );
        self.cache = Some(x.clone());
        Tensor::matrix(n, self.outputs, y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("linear backward before forward");
        let n = x.n;
        assert_eq!(dy.n, n);
        assert_eq!(dy.sample_len(), self.outputs);
        gemm(
            View::rm_t(&dy.data, n, self.outputs),
            View::rm(&x.data, n, self.inputs),
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.data.chunks(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            View::rm(&dy.data, n, self.outputs),
            View::rm(&self.weight.value, self.outputs, self.inputs),
            0.0,
            &mut dx,
        );
        Tensor::matrix(n, self.inputs, dx)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stride-1 "same" convolution. A 1-D convolution is the `kh = 1` case on
/// inputs with `h = 1`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    n: usize,
    h: usize,
    w: usize,
    cols: Vec<Vec<f32>>,
}

impl Conv {
    pub fn new_1d<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::build(name, cin, cout, 1, k, vec![cout, cin, k], rng)
    }

    pub fn new_2d<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::build(name, cin, cout, k, k, vec![cout, cin, k, k], rng)
    }

    fn build<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        shape: Vec<usize>,
        rng: &mut R,
    ) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "odd kernels only");
        let fan_in = cin * kh * kw;
        Conv {
            weight: Param::fan_in_uniform(format!("{name}.weight"), shape, fan_in, rng),
            bias: Param::fan_in_uniform(format!("{name}.bias"), vec![cout], fan_in, rng),
            cin,
            cout,
            kh,
            kw,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col(&self, x: &Tensor, start: usize, m: usize) -> Vec<f32> {
        let (h, w) = (x.h, x.w);
        let s = h * w;
        let ms = m * s;
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let mut col = vec![0.0; self.k() * ms];
        for j in 0..m {
            let xs = x.sample(start + j);
            for ci in 0..self.cin {
                let plane = &xs[ci * s..(ci + 1) * s];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let base = row * ms + j * s;
                        let ox_lo = pw.saturating_sub(kx);
                        let ox_hi = (w + pw).saturating_sub(kx).min(w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let ix_lo = ox_lo + kx - pw;
                            let len = ox_hi - ox_lo;
                            col[base + oy * w + ox_lo..base + oy * w + ox_hi]
                                .copy_from_slice(&plane[iy * w + ix_lo..iy * w + ix_lo + len]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], m: usize, h: usize, w: usize) -> Vec<f32> {
        let s = h * w;
        let ms = m * s;
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let mut dx = vec![0.0; m * self.cin * s];
        for j in 0..m {
            let dxs = &mut dx[j * self.cin * s..(j + 1) * self.cin * s];
            for ci in 0..self.cin {
                let plane = &mut dxs[ci * s..(ci + 1) * s];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let base = row * ms + j * s;
                        let ox_lo = pw.saturating_sub(kx);
                        let ox_hi = (w + pw).saturating_sub(kx).min(w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let ix_lo = ox_lo + kx - pw;
                            let src = &col[base + oy * w + ox_lo..base + oy * w + ox_hi];
                            for (d, v) in plane[iy * w + ix_lo..].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (n, h, w) = (x.n, x.h, x.w);
        let s = h * w;
        let k = self.k();
        let chunks = n.div_ceil(CHUNK);
        let parts = exec::map_range(chunks, |ci| {
            let start = ci * CHUNK;
            let m = CHUNK.min(n - start);
            let ms = m * s;
            let col = self.im2col(x, start, m);
            let mut tmp = vec![0.0; self.cout * ms];
            gemm(
                View::rm(&self.weight.value, self.cout, k),
                View::rm(&col, k, ms),
                0.0,
                &mut tmp,
            );
            let mut y = vec![0.0; m * self.cout * s];
            for j in 0..m {
                for co in 0..self.cout {
                    let b = self.bias.value[co];
                    let src = &tmp[co * ms + j * s..co * ms + (j + 1) * s];
                    let dst = &mut y[(j * self.cout + co) * s..(j * self.cout + co + 1) * s];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
            (y, col)
        });
        let mut data = Vec::with_capacity(n * self.cout * s);
        let mut cols = Vec::with_capacity(chunks);
        for (y, col) in parts {
            data.extend_from_slice(&y);
            cols.push(col);
        }
        self.cache = Some(ConvCache { n, h, w, cols });
        Tensor::from_vec(n, self.cout, h, w, data)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (n, h, w) = (cache.n, cache.h, cache.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (n, self.cout, h, w));
        let s = h * w;
        let k = self.k();
        let parts = exec::map_range(cache.cols.len(), |ci| {
            let start = ci * CHUNK;
            let m = CHUNK.min(n - start);
            let ms = m * s;
            let mut dyc = vec![0.0; self.cout * ms];
            let mut db = vec![0.0; self.cout];
            for j in 0..m {
                let ds = dy.sample(start + j);
                for co in 0..self.cout {
                    let src = &ds[co * s..(co + 1) * s];
                    dyc[co * ms + j * s..co * ms + (j + 1) * s].copy_from_slice(src);
                    db[co] += src.iter().sum::<f32>();
                }
            }
            let col = &cache.cols[ci];
            let mut dw = vec![0.0; self.cout * k];
            gemm(
                View::rm(&dyc, self.cout, ms),
                View::rm_t(col, k, ms),
                0.0,
                &mut dw,
            );
            let mut dcol = vec![0.0; k * ms];
            gemm(
                View::rm_t(&self.weight.value, self.cout, k),
                View::rm(&dyc, self.cout, ms),
                0.0,
                &mut dcol,
            );
            (dw, db, self.col2im(&dcol, m, h, w))
        });
        let mut dx = Vec::with_capacity(n * self.cin * s);
        for (dw, db, dxc) in parts {
            for (g, v) in self.weight.grad.iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in self.bias.grad.iter_mut().zip(&db) {
                *g += v;
            }
            dx.extend_from_slice(&dxc);
        }
        Tensor::from_vec(n, self.cin, h, w, dx)
    }
}

impl Parameterized for Conv {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Non-overlapping max pooling with floor on odd extents.
#[derive(Debug, Clone)]
pub struct MaxPool {
    ph: usize,
    pw: usize,
    cache: Option<(Tensor, Vec<u32>)>,
}

impl MaxPool {
    pub fn new(ph: usize, pw: usize) -> Self {
        MaxPool {
            ph,
            pw,
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.ph, w / self.pw)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (oh, ow) = self.out_dims(x.h, x.w);
        assert!(oh > 0 && ow > 0, "pooling window larger than input");
        let planes = x.n * x.c;
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let mut idx = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..self.ph {
                        for dx in 0..self.pw {
                            let i = (oy * self.ph + dy) * x.w + ox * self.pw + dx;
                            if src[i] > best {
                                best = src[i];
                                at = i;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    y.data[o] = best;
                    idx[o] = at as u32;
                }
            }
        }
        self.cache = Some((Tensor::zeros(x.n, x.c, x.h, x.w), idx));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (shape, idx) = self.cache.as_ref().expect("pool backward before forward");
        let mut dx = shape.clone();
        let (h, w) = (dx.h, dx.w);
        let per = dy.h * dy.w;
        for (o, (&g, &i)) in dy.data.iter().zip(idx).enumerate() {
            let p = o / per;
            dx.data[p * h * w + i as usize] += g;
        }
        dx
    }
}

/// Batch normalization over the channel axis of `[n, c, h, w]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                shape: vec![channels],
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                shape: vec![channels],
                value: vec![1.0; channels],
            },
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c, c, "batch-norm channels");
        let s = x.h * x.w;
        let m = x.n * s;
        let batch_stats = mode != Mode::Inference;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0f64; c];
            let mut sq = vec![0f64; c];
            for i in 0..x.n {
                let xs = x.sample(i);
                for ch in 0..c {
                    for &v in &xs[ch * s..(ch + 1) * s] {
                        mean[ch] += v as f64;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for i in 0..x.n {
                let xs = x.sample(i);
                for ch in 0..c {
                    for &v in &xs[ch * s..(ch + 1) * s] {
                        let d = v as f64 - mean[ch];
                        sq[ch] += d * d;
                    }
                }
            }
            let var: Vec<f64> = sq.iter().map(|v| v / m as f64).collect();
            if mode == Mode::Train {
                let unbias = if m > 1 {
                    m as f64 / (m - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch] as f32;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * (var[ch] * unbias) as f32;
                }
            }
            (
                mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            )
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut y = vec![0.0; x.data.len()];
        for i in 0..x.n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for t in off..off + s {
                    let xh = (x.data[t] - mean[ch]) * inv_std[ch];
                    xhat[t] = xh;
                    y[t] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        Tensor::from_vec(x.n, c, x.h, x.w, y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self
            .cache
            .as_ref()
            .expect("batch-norm backward before forward");
        let c = self.channels();
        let s = dy.h * dy.w;
        let m = (dy.n * s) as f32;
        let mut sum_dy = vec![0f64; c];
        let mut sum_dy_xhat = vec![0f64; c];
        for i in 0..dy.n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for t in off..off + s {
                    sum_dy[ch] += dy.data[t] as f64;
                    sum_dy_xhat[ch] += (dy.data[t] * cache.xhat[t]) as f64;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch] as f32;
            self.beta.grad[ch] += sum_dy[ch] as f32;
        }
        let mut dx = vec![0.0; dy.data.len()];
        for i in 0..dy.n {
            for ch in 0..c {
                let g = self.gamma.value[ch] * cache.inv_std[ch];
                let off = (i * c + ch) * s;
                if cache.batch_stats {
                    let sdy = sum_dy[ch] as f32;
                    let sdx = sum_dy_xhat[ch] as f32;
                    for ((d, &y), &xh) in dx[off..off + s]
                        .iter_mut()
                        .zip(&dy.data[off..off + s])
                        .zip(&cache.xhat[off..off + s])
                    {
                        *d = g / m * (m * y - sdy - xh * sdx);
                    }
                } else {
                    for (d, &y) in dx[off..off + s].iter_mut().zip(&dy.data[off..off + s]) {
                        *d = g * y;
                    }
                }
            }
        }
        Tensor::from_vec(dy.n, dy.c, dy.h, dy.w, dx)
    }
}

impl Parameterized for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let mut x = x;
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        for v in x.data.iter_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        x
    }

    pub fn backward(&self, dy: Tensor) -> Tensor {
        let mut dy = dy;
        for (d, &keep) in dy.data.iter_mut().zip(&self.mask) {
            if !keep {
                *d = 0.0;
            }
        }
        dy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * c * h * w)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum()
    }

    /// Directional finite-difference check of d<r, f(x)>/dx against the
    /// backward pass, in f64 over an f32 kernel (loose tolerance).
    fn check_input_grad(
        f: &mut dyn FnMut(&Tensor) -> Tensor,
        b: &mut dyn FnMut(&Tensor) -> Tensor,
        x: &Tensor,
        r: &mut ChaCha8Rng,
    ) {
        let y = f(x);
        let probe = random_tensor(y.n, y.c, y.h, y.w, r);
        let dx = b(&probe);
        let dir = random_tensor(x.n, x.c, x.h, x.w, r);
        let eps = 1e-2f32;
        let shift = |s: f32| {
            let mut t = x.clone();
            for (v, d) in t.data.iter_mut().zip(&dir.data) {
                *v += s * d;
            }
            t
        };
        let fp = dot(&f(&shift(eps)).data, &probe.data);
        let fm = dot(&f(&shift(-eps)).data, &probe.data);
        let numeric = (fp - fm) / (2.0 * eps as f64);
        let analytic = dot(&dx.data, &dir.data);
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-3);
        assert!(rel < 2e-2, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut r = rng();
        let mut conv = Conv::new_2d("c", 2, 3, 3, &mut r);
        let x = random_tensor(10, 2, 5, 4, &mut r);
        let y = conv.forward(&x);
        for n in 0..10 {
            for co in 0..3 {
                for oy in 0..5 {
                    for ox in 0..4 {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    let xv =
                                        x.data[((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        let got = y.data[((n * 3 + co) * 5 + oy) * 4 + ox];
                        assert!((got as f64 - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_matches_direct_convolution() {
        let mut r = rng();
        let mut conv = Conv::new_1d("c", 3, 2, 3, &mut r);
        let x = random_tensor(3, 3, 1, 7, &mut r);
        let y = conv.forward(&x);
        for n in 0..3 {
            for co in 0..2 {
                for t in 0..7 {
                    let mut acc = conv.bias.value[co];
                    for ci in 0..3 {
                        for k in 0..3 {
                            let it = t as isize + k as isize - 1;
                            if (0..7).contains(&it) {
                                acc += conv.weight.value[(co * 3 + ci) * 3 + k]
                                    * x.data[(n * 3 + ci) * 7 + it as usize];
                            }
                        }
                    }
                    assert!((y.data[(n * 2 + co) * 7 + t] - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut r = rng();
        let conv = std::cell::RefCell::new(Conv::new_2d("c", 2, 4, 3, &mut r));
        let x = random_tensor(9, 2, 6, 6, &mut r);
        check_input_grad(
            &mut |t| conv.borrow_mut().forward(t),
            &mut |d| conv.borrow_mut().backward(d),
            &x,
            &mut r,
        );
    }

    #[test]
    fn conv_weight_gradient_matches_finite_difference() {
        let mut r = rng();
        let mut conv = Conv::new_1d("c", 2, 3, 3, &mut r);
        let x = random_tensor(11, 2, 1, 6, &mut r);
        let y = conv.forward(&x);
        let probe = random_tensor(y.n, y.c, y.h, y.w, &mut r);
        conv.zero_grad();
        conv.backward(&probe);
        let analytic = conv.weight.grad[7] as f64;
        let eps = 1e-2;
        let eval = |delta: f32| {
            let mut c2 = conv.clone();
            c2.weight.value[7] += delta;
            dot(&c2.forward(&x).data, &probe.data)
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
        assert!((numeric - analytic).abs() / analytic.abs().max(1e-3) < 1e-2);
    }

    #[test]
    fn linear_input_and_weight_gradients() {
        let mut r = rng();
        let lin = std::cell::RefCell::new(Linear::new("l", 5, 3, &mut r));
        let x = random_tensor(4, 5, 1, 1, &mut r);
        check_input_grad(
            &mut |t| lin.borrow_mut().forward(t),
            &mut |d| lin.borrow_mut().backward(d),
            &x,
            &mut r,
        );
        let mut lin = lin.into_inner();
        let dy = Tensor::matrix(4, 3, vec![1.0; 12]);
        lin.zero_grad();
        lin.forward(&x);
        lin.backward(&dy);
        let col_sum: f32 = (0..4).map(|n| x.data[n * 5 + 2]).sum();
        assert!((lin.weight.grad[5 + 2] - col_sum).abs() < 1e-5);
        assert_eq!(lin.bias.grad, vec![4.0; 3]);
    }

    #[test]
    fn batchnorm_train_gradient() {
        let mut r = rng();
        let bn = std::cell::RefCell::new(BatchNorm::new("b", 3));
        bn.borrow_mut().gamma.value = vec![0.5, 1.5, -1.0];
        let x = random_tensor(6, 3, 2, 2, &mut r);
        check_input_grad(
            &mut |t| bn.borrow_mut().forward(t, Mode::Frozen),
            &mut |d| bn.borrow_mut().backward(d),
            &x,
            &mut r,
        );
    }

    #[test]
    fn batchnorm_normalizes_and_tracks_running_stats() {
        let mut bn = BatchNorm::new("b", 1);
        let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, Mode::Train);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // unbiased variance 5/3
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let before = bn.running_mean.value.clone();
        bn.forward(&x, Mode::Frozen);
        assert_eq!(bn.running_mean.value, before);
        let inf = bn.forward(&Tensor::matrix(1, 1, vec![0.25]), Mode::Inference);
        assert!(inf.data[0].abs() < 1e-6);
    }

    #[test]
    fn maxpool_floor_and_routing() {
        let mut pool = MaxPool::new(1, 2);
        let x = Tensor::from_vec(1, 1, 1, 5, vec![1.0, 3.0, 2.0, 0.0, 9.0]);
        let y = pool.forward(&x);
        assert_eq!(y.data, vec![3.0, 2.0]);
        let dx = pool.backward(&Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 2.0, 0.0, 0.0]);
        let mut pool2 = MaxPool::new(2, 2);
        assert_eq!(pool2.out_dims(32, 32), (16, 16));
        let x2 = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 5.0, 1.0, 2.0]);
        assert_eq!(pool2.forward(&x2).data, vec![5.0]);
    }

    #[test]
    fn chunked_conv_is_mode_independent() {
        let mut r = rng();
        let mut conv = Conv::new_2d("c", 1, 4, 3, &mut r);
        let x = random_tensor(19, 1, 8, 8, &mut r);
        let dy = random_tensor(19, 4, 8, 8, &mut r);
        exec::set_mode(exec::ExecMode::Sequential);
        let mut a = conv.clone();
        let ya = a.forward(&x);
        let dxa = a.backward(&dy);
        exec::set_mode(exec::ExecMode::Parallel);
        let mut b = conv.clone();
        let yb = b.forward(&x);
        let dxb = b.backward(&dy);
        assert_eq!(ya, yb);
        assert_eq!(dxa, dxb);
        assert_eq!(a.weight.grad, b.weight.grad);
        conv.zero_grad();
    }
}
