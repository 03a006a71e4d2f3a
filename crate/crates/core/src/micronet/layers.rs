//! Dense NCHW tensors and the handful of layers the network needs, each with
//! an explicit backward pass. Everything is f64 so finite-difference checks
//! are meaningful.
//!
//! Parallel loops split work by output channel (or input channel for input
//! gradients) and reduce in a fixed order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(shape(format!(
                "tensor data has {} values, expected {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let off = (n * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane_len();
        let off = (n * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel-major planes of sample `n`, one per channel.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let len = self.c * self.plane_len();
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(samples: &[Tensor4]) -> Result<Tensor4> {
        let first = samples.first().ok_or_else(|| shape("cannot stack an empty batch"))?;
        let mut data = Vec::with_capacity(samples.len() * first.data.len());
        for s in samples {
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(shape("batch samples differ in shape"));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor4 {
            n: data.len() / (first.c * first.plane_len()),
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Same-padded 2D convolution with odd square kernel `k`.
/// Weight layout is `[out][in][ky][kx]`.
pub fn conv_forward(x: &Tensor4, weight: &[f64], bias: Option<&[f64]>, out_c: usize, k: usize) -> Tensor4 {
    let (n, in_c, h, w) = (x.n, x.c, x.h, x.w);
    let p = h * w;
    let r = (k / 2) as isize;
    let mut out = Tensor4::zeros(n, out_c, h, w);
    // Parallel over (sample, output channel) planes.
    out.data.par_chunks_mut(p).enumerate().for_each(|(idx, dst)| {
        let (s, o) = (idx / out_c, idx % out_c);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..in_c {
            let src = x.plane(s, i);
            let wk = &weight[(o * in_c + i) * k * k..(o * in_c + i + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = col_range(w, dx);
                    for y in row_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let s_row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(s_row) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output rows `y` whose source row `y + dy` is inside the image.
fn row_range(h: usize, dy: isize) -> std::ops::Range<usize> {
    let lo = (-dy).max(0) as usize;
    let hi = (h as isize - dy.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

fn col_range(w: usize, dx: isize) -> (usize, usize) {
    let r = row_range(w, dx);
    (r.start, r.end)
}

pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv_backward(x: &Tensor4, weight: &[f64], grad_out: &Tensor4, has_bias: bool, k: usize) -> ConvGrads {
    let (n, in_c, h, w) = (x.n, x.c, x.h, x.w);
    let out_c = grad_out.c;
    let r = (k / 2) as isize;
    let kk = k * k;

    let mut gw = vec![0.0; out_c * in_c * kk];
    gw.par_chunks_mut(in_c * kk).enumerate().for_each(|(o, gwo)| {
        for s in 0..n {
            let g = grad_out.plane(s, o);
            for i in 0..in_c {
                let src = x.plane(s, i);
                for ky in 0..k {
                    let dy = ky as isize - r;
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let (x0, x1) = col_range(w, dx);
                        let sx0 = (x0 as isize + dx) as usize;
                        let mut acc = 0.0;
                        for y in row_range(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let gr = &g[y * w + x0..y * w + x1];
                            let sr = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gwo[i * kk + ky * k + kx] += acc;
                    }
                }
            }
        }
    });

    let gb = has_bias.then(|| (0..out_c).map(|o| (0..n).map(|s| grad_out.plane(s, o).iter().sum::<f64>()).sum()).collect());

    let mut gi = Tensor4::zeros(n, in_c, h, w);
    let p = h * w;
    gi.data.par_chunks_mut(p).enumerate().for_each(|(idx, dst)| {
        let (s, i) = (idx / in_c, idx % in_c);
        for o in 0..out_c {
            let g = grad_out.plane(s, o);
            let wk = &weight[(o * in_c + i) * kk..(o * in_c + i + 1) * kk];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wv = wk[ky * k + kx];
                    // out[y] += w * in[y + dy]  =>  gin[y + dy] += w * gout[y]
                    let (x0, x1) = col_range(w, dx);
                    let sx0 = (x0 as isize + dx) as usize;
                    for y in row_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        let gr = &g[y * w + x0..y * w + x1];
                        for (a, b) in d.iter_mut().zip(gr) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    });

    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
}

/// Normalizes with `stats` when given, otherwise with the batch's own
/// statistics (returned alongside).
pub fn bn_forward(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    stats: Option<&BnStats>,
) -> (Tensor4, BnCache, BnStats) {
    let m = (x.n * x.plane_len()) as f64;
    let batch = match stats {
        Some(s) => s.clone(),
        None => {
            let mut mean = vec![0.0; x.c];
            let mut var = vec![0.0; x.c];
            for c in 0..x.c {
                let mu = (0..x.n).map(|s| x.plane(s, c).iter().sum::<f64>()).sum::<f64>() / m;
                let v = (0..x.n)
                    .map(|s| x.plane(s, c).iter().map(|v| (v - mu).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / m;
                mean[c] = mu;
                var[c] = v;
            }
            BnStats { mean, var }
        }
    };
    let inv_std: Vec<f64> = batch.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for s in 0..x.n {
        for c in 0..x.c {
            let (mu, is, g, b) = (batch.mean[c], inv_std[c], gamma[c], beta[c]);
            for (xh, yv) in xhat.plane_mut(s, c).iter_mut().zip(y.plane_mut(s, c).iter_mut()) {
                *xh = (*xh - mu) * is;
                *yv = g * *xh + b;
            }
        }
    }
    (y, BnCache { xhat, inv_std }, batch)
}

/// Backward pass of batch-statistics normalization:
/// returns (grad_input, grad_gamma, grad_beta).
pub fn bn_backward(grad_out: &Tensor4, cache: &BnCache, gamma: &[f64]) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let c_n = grad_out.c;
    let m = (grad_out.n * grad_out.plane_len()) as f64;
    let mut gg = vec![0.0; c_n];
    let mut gb = vec![0.0; c_n];
    for c in 0..c_n {
        for s in 0..grad_out.n {
            for (g, xh) in grad_out.plane(s, c).iter().zip(cache.xhat.plane(s, c)) {
                gg[c] += g * xh;
                gb[c] += g;
            }
        }
    }
    let mut gi = grad_out.clone();
    for c in 0..c_n {
        let k = gamma[c] * cache.inv_std[c] / m;
        let (sum_g, sum_gx) = (gb[c], gg[c]);
        for s in 0..grad_out.n {
            let xh = cache.xhat.plane(s, c);
            for (g, x) in gi.plane_mut(s, c).iter_mut().zip(xh) {
                *g = k * (m * *g - sum_g - x * sum_gx);
            }
        }
    }
    (gi, gg, gb)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(grad_out: &Tensor4, out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (a, &o) in g.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *a = 0.0;
        }
    }
    g
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor4) -> Tensor4 {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    for s in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(s, c);
            let dst = out.plane_mut(s, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * x.w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor4) -> Tensor4 {
    upsample2(grad_out).map(|v| 0.25 * v)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    for s in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(s, c);
            let dst = out.plane_mut(s, c);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor4) -> Tensor4 {
    avg_pool2(grad_out).map(|v| 4.0 * v)
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for s in 0..a.n {
        for c in 0..a.c {
            out.plane_mut(s, c).copy_from_slice(a.plane(s, c));
        }
        for c in 0..b.c {
            out.plane_mut(s, a.c + c).copy_from_slice(b.plane(s, c));
        }
    }
    out
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split(g: &Tensor4, a_channels: usize) -> (Tensor4, Tensor4) {
    let mut a = Tensor4::zeros(g.n, a_channels, g.h, g.w);
    let mut b = Tensor4::zeros(g.n, g.c - a_channels, g.h, g.w);
    for s in 0..g.n {
        for c in 0..g.c {
            if c < a_channels {
                a.plane_mut(s, c).copy_from_slice(g.plane(s, c));
            } else {
                b.plane_mut(s, c - a_channels).copy_from_slice(g.plane(s, c));
            }
        }
    }
    (a, b)
}

/// Multiplies each channel plane by its per-sample factor (`scale[n][c]`).
pub fn scale_channels(x: &Tensor4, scale: &[Vec<f64>]) -> Tensor4 {
    let mut out = x.clone();
    for s in 0..x.n {
        for c in 0..x.c {
            let f = scale[s][c];
            out.plane_mut(s, c).iter_mut().for_each(|v| *v *= f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_t(n: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor4 {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.normal()).collect()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = Rng::new(1);
        let x = rand_t(1, 1, 5, 6, &mut rng);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv_forward(&x, &w, None, 1, 3), x);
    }

    #[test]
    fn shifted_kernel_zero_pads() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Reads the right-hand neighbour.
        let mut w = vec![0.0; 9];
        w[5] = 1.0;
        let y = conv_forward(&x, &w, None, 1, 3);
        assert_eq!(y.data, vec![2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = Rng::new(2);
        let x = rand_t(2, 3, 7, 5, &mut rng);
        let w: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.normal()).collect();
        let gy = rand_t(2, 4, 7, 5, &mut rng);
        let y = conv_forward(&x, &w, None, 4, 3);
        let g = conv_backward(&x, &w, &gy, true, 3);
        // <conv(x), gy> is linear in x and in w.
        let lhs = dot(&y.data, &gy.data);
        assert!((lhs - dot(&x.data, &g.input.data)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &g.weight)).abs() < 1e-9 * lhs.abs().max(1.0));
        let gb = g.bias.unwrap();
        let direct: f64 = (0..2).map(|s| gy.plane(s, 1).iter().sum::<f64>()).sum();
        assert!((gb[1] - direct).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = Rng::new(3);
        let x = rand_t(2, 2, 6, 4, &mut rng);
        let g = rand_t(2, 2, 3, 2, &mut rng);
        let lhs = dot(&avg_pool2(&x).data, &g.data);
        assert!((lhs - dot(&x.data, &avg_pool2_backward(&g).data)).abs() < 1e-12);
        let lhs = dot(&upsample2(&g).data, &x.data);
        assert!((lhs - dot(&g.data, &upsample2_backward(&x).data)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_and_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = rand_t(2, 3, 4, 4, &mut rng);
        let gamma = vec![1.5, 0.7, -0.3];
        let beta = vec![0.1, -0.2, 0.0];
        let (_, cache, _) = bn_forward(&x, &[1.0; 3], &[0.0; 3], 1e-5, None);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|s| cache.xhat.plane(s, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
        let gy = rand_t(2, 3, 4, 4, &mut rng);
        let f = |x: &Tensor4| dot(&bn_forward(x, &gamma, &beta, 1e-5, None).0.data, &gy.data);
        let (_, cache, _) = bn_forward(&x, &gamma, &beta, 1e-5, None);
        let (gi, _, _) = bn_backward(&gy, &cache, &gamma);
        let h = 1e-5;
        for idx in [0, 7, 20, 45, 95] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - gi.data[idx]).abs() < 1e-6, "{fd} vs {}", gi.data[idx]);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = Rng::new(5);
        let a = rand_t(2, 2, 3, 3, &mut rng);
        let b = rand_t(2, 3, 3, 3, &mut rng);
        let (a2, b2) = split(&concat(&a, &b), 2);
        assert_eq!((a2, b2), (a, b));
    }
}
