use rand::Rng;

use super::{gemm, FeatureMap, Real};
use crate::rng::stream_rng;

/// Location of one tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn get<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a, F>(&self, params: &'a mut [F]) -> &'a mut [F] {
        &mut params[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    Uniform(f64),
}

/// Allocates parameter slots and records how each is initialized.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    len: usize,
    inits: Vec<(ParamSlot, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&mut self, len: usize, init: Init) -> ParamSlot {
        let slot = ParamSlot { offset: self.len, len };
        self.len += len;
        self.inits.push((slot, init));
        slot
    }

    /// He-uniform weights for `fan_in` inputs.
    pub fn weights(&mut self, len: usize, fan_in: usize) -> ParamSlot {
        self.alloc(len, Init::Uniform((6.0 / fan_in as f64).sqrt()))
    }

    /// Glorot-uniform weights, for layers feeding a saturating output.
    pub fn weights_glorot(&mut self, len: usize, fan_in: usize, fan_out: usize) -> ParamSlot {
        self.alloc(len, Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt()))
    }

    pub fn zeros(&mut self, len: usize) -> ParamSlot {
        self.alloc(len, Init::Zero)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Materialize the parameter vector. Each slot draws from its own stream,
    /// so adding a layer does not perturb the others.
    pub fn build<F: Real>(&self, seed: u64) -> Vec<F> {
        let mut params = vec![F::zero(); self.len];
        for (i, (slot, init)) in self.inits.iter().enumerate() {
            if let Init::Uniform(bound) = *init {
                let mut rng = stream_rng(seed, i as u64);
                for p in slot.get_mut(&mut params) {
                    *p = F::of(rng.random_range(-bound..bound));
                }
            }
        }
        params
    }
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

/// Saved `im2col` matrix and input geometry for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: Vec<F>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, stride: usize) -> Self {
        let k = cin * 9;
        Conv2d {
            cin,
            cout,
            stride,
            weight: pb.weights(cout * k, k),
            bias: pb.zeros(cout),
        }
    }

    /// All-zero weights and bias: the layer initially outputs zeros.
    pub fn new_zeroed(pb: &mut ParamBuilder, cin: usize, cout: usize, stride: usize) -> Self {
        Conv2d {
            cin,
            cout,
            stride,
            weight: pb.zeros(cout * cin * 9),
            bias: pb.zeros(cout),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col<F: Real>(&self, input: &FeatureMap<F>, oh: usize, ow: usize) -> Vec<F> {
        let (h, w) = (input.height, input.width);
        let p = oh * ow;
        let s = self.stride;
        let mut cols = vec![F::zero(); self.cin * 9 * p];
        for ci in 0..self.cin {
            let plane = input.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<F> {
        let p = oh * ow;
        let s = self.stride;
        let mut out = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<F: Real>(&self, params: &[F], input: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(input.channels, self.cin, "conv input channels");
        let (oh, ow) = self.out_size(input.height, input.width);
        let p = oh * ow;
        let cols = self.im2col(input, oh, ow);
        let mut out = FeatureMap::zeros(self.cout, oh, ow);
        gemm(self.cout, self.cin * 9, p, self.weight.get(params), false, &cols, false, &mut out.data, false);
        let bias = self.bias.get(params);
        for (co, &b) in bias.iter().enumerate() {
            out.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b);
        }
        let cache = ConvCache { cols, in_h: input.height, in_w: input.width };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        cache: &ConvCache<F>,
        dout: &FeatureMap<F>,
        grads: &mut [F],
        need_input: bool,
    ) -> Option<FeatureMap<F>> {
        let (oh, ow) = (dout.height, dout.width);
        let p = oh * ow;
        let k = self.cin * 9;
        gemm(self.cout, p, k, &dout.data, false, &cache.cols, true, self.weight.get_mut(grads), true);
        let db = self.bias.get_mut(grads);
        for (co, g) in db.iter_mut().enumerate() {
            *g += dout.data[co * p..(co + 1) * p].iter().copied().sum::<F>();
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![F::zero(); k * p];
        gemm(k, self.cout, p, self.weight.get(params), true, &dout.data, false, &mut dcols, false);
        Some(self.col2im(&dcols, cache.in_h, cache.in_w, oh, ow))
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvT2x2 {
    pub cin: usize,
    pub cout: usize,
    /// Stored `cin x (cout * 4)`.
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl ConvT2x2 {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        ConvT2x2 {
            cin,
            cout,
            weight: pb.weights(cin * cout * 4, cin),
            bias: pb.zeros(cout),
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], input: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(input.channels, self.cin, "upsample input channels");
        let (h, w) = (input.height, input.width);
        let p = h * w;
        let rows = self.cout * 4;
        let mut y = vec![F::zero(); rows * p];
        gemm(rows, self.cin, p, self.weight.get(params), true, &input.data, false, &mut y, false);
        let bias = self.bias.get(params);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = FeatureMap::zeros(self.cout, oh, ow);
        for co in 0..self.cout {
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &y[(co * 4 + d) * p..][..p];
                let dst = &mut out.data[co * oh * ow..][..oh * ow];
                for iy in 0..h {
                    for ix in 0..w {
                        dst[(2 * iy + dy) * ow + 2 * ix + dx] = src[iy * w + ix] + bias[co];
                    }
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(
        &self,
        params: &[F],
        input: &FeatureMap<F>,
        dout: &FeatureMap<F>,
        grads: &mut [F],
    ) -> FeatureMap<F> {
        let (h, w) = (input.height, input.width);
        let p = h * w;
        let rows = self.cout * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dy_mat = vec![F::zero(); rows * p];
        let db = self.bias.get_mut(grads);
        for co in 0..self.cout {
            let src = &dout.data[co * oh * ow..][..oh * ow];
            db[co] += src.iter().copied().sum::<F>();
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let dst = &mut dy_mat[(co * 4 + d) * p..][..p];
                for iy in 0..h {
                    for ix in 0..w {
                        dst[iy * w + ix] = src[(2 * iy + dy) * ow + 2 * ix + dx];
                    }
                }
            }
        }
        gemm(self.cin, p, rows, &input.data, false, &dy_mat, true, self.weight.get_mut(grads), true);
        let mut din = FeatureMap::zeros(self.cin, h, w);
        gemm(self.cin, rows, p, self.weight.get(params), false, &dy_mat, false, &mut din.data, false);
        din
    }
}

/// Fully connected layer on a single vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    /// Stored `dout x din`.
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, din: usize, dout: usize) -> Self {
        Linear { din, dout, weight: pb.weights(din * dout, din), bias: pb.zeros(dout) }
    }

    pub fn new_glorot(pb: &mut ParamBuilder, din: usize, dout: usize) -> Self {
        Linear {
            din,
            dout,
            weight: pb.weights_glorot(din * dout, din, dout),
            bias: pb.zeros(dout),
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.din, "linear input size");
        let mut y = self.bias.get(params).to_vec();
        gemm(self.dout, self.din, 1, self.weight.get(params), false, x, false, &mut y, true);
        y
    }

    pub fn backward<F: Real>(&self, params: &[F], x: &[F], dy: &[F], grads: &mut [F]) -> Vec<F> {
        gemm(self.dout, 1, self.din, dy, false, x, false, self.weight.get_mut(grads), true);
        for (g, &d) in self.bias.get_mut(grads).iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![F::zero(); self.din];
        gemm(self.din, self.dout, 1, self.weight.get(params), true, dy, false, &mut dx, false);
        dx
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu_scalar<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn silu_vec<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

pub fn silu_vec_backward<F: Real>(pre: &[F], dy: &[F]) -> Vec<F> {
    pre.iter().zip(dy).map(|(&x, &d)| d * silu_grad(x)).collect()
}

pub fn silu<F: Real>(pre: &FeatureMap<F>) -> FeatureMap<F> {
    FeatureMap::from_vec(pre.channels, pre.height, pre.width, silu_vec(&pre.data))
}

pub fn silu_backward<F: Real>(pre: &FeatureMap<F>, dy: &FeatureMap<F>) -> FeatureMap<F> {
    FeatureMap::from_vec(pre.channels, pre.height, pre.width, silu_vec_backward(&pre.data, &dy.data))
}

/// Add `bias[c]` to every pixel of channel `c`.
pub fn channel_bias<F: Real>(fm: &mut FeatureMap<F>, bias: &[F]) {
    assert_eq!(bias.len(), fm.channels);
    let p = fm.plane();
    for (c, &b) in bias.iter().enumerate() {
        fm.data[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += b);
    }
}

pub fn channel_bias_backward<F: Real>(dy: &FeatureMap<F>) -> Vec<F> {
    (0..dy.channels).map(|c| dy.channel(c).iter().copied().sum()).collect()
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel normalization without affine parameters. Returns the output
/// and each channel's inverse standard deviation.
pub fn instance_norm<F: Real>(x: &FeatureMap<F>) -> (FeatureMap<F>, Vec<F>) {
    let p = x.plane();
    let n = F::of(p as f64);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let ch = &mut out.data[c * p..(c + 1) * p];
        let mean = ch.iter().copied().sum::<F>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + F::of(INSTANCE_NORM_EPS)).sqrt();
        ch.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

pub fn instance_norm_backward<F: Real>(normed: &FeatureMap<F>, inv_std: &[F], dy: &FeatureMap<F>) -> FeatureMap<F> {
    let p = normed.plane();
    let n = F::of(p as f64);
    let mut dx = FeatureMap::zeros(normed.channels, normed.height, normed.width);
    for c in 0..normed.channels {
        let xh = normed.channel(c);
        let g = dy.channel(c);
        let sum_g = g.iter().copied().sum::<F>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>();
        for ((d, &gi), &xi) in dx.data[c * p..(c + 1) * p].iter_mut().zip(g).zip(xh) {
            *d = inv_std[c] * (n * gi - sum_g - xi * sum_gx) / n;
        }
    }
    dx
}

/// 2x2 average pooling, stride 2.
pub fn avg_pool2<F: Real>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let quarter = F::of(0.25);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * x.width + 2 * xx;
                out.data[c * oh * ow + y * ow + xx] =
                    quarter * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(dy: &FeatureMap<F>, h: usize, w: usize) -> FeatureMap<F> {
    let quarter = F::of(0.25);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for xx in 0..dy.width {
                let g = quarter * dy.data[c * dy.plane() + y * dy.width + xx];
                let i = c * h * w + 2 * y * w + 2 * xx;
                dx.data[i] += g;
                dx.data[i + 1] += g;
                dx.data[i + w] += g;
                dx.data[i + w + 1] += g;
            }
        }
    }
    dx
}

pub fn global_avg_pool<F: Real>(x: &FeatureMap<F>) -> Vec<F> {
    let n = F::of(x.plane() as f64);
    (0..x.channels).map(|c| x.channel(c).iter().copied().sum::<F>() / n).collect()
}

pub fn global_avg_pool_backward<F: Real>(dy: &[F], channels: usize, h: usize, w: usize) -> FeatureMap<F> {
    let n = F::of((h * w) as f64);
    let mut dx = FeatureMap::zeros(channels, h, w);
    for c in 0..channels {
        let g = dy[c] / n;
        dx.data[c * h * w..(c + 1) * h * w].iter_mut().for_each(|v| *v = g);
    }
    dx
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise `1 / (1 - p)`.
pub fn dropout_mask<F: Real>(n: usize, p: f64, rng: &mut impl Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random_bool(p) { F::zero() } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3x3 convolution with explicit padding checks.
    fn naive_conv(
        input: &FeatureMap<f64>,
        w: &[f64],
        b: &[f64],
        cout: usize,
        stride: usize,
    ) -> FeatureMap<f64> {
        let (cin, h, wd) = input.shape();
        let oh = (h - 1) / stride + 1;
        let ow = (wd - 1) / stride + 1;
        let mut out = FeatureMap::zeros(cout, oh, ow);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * input.data[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize, k: f64) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|i| ((i as f64) * k).sin()).collect())
    }

    #[test]
    fn conv_matches_naive_both_strides() {
        for stride in [1, 2] {
            let mut pb = ParamBuilder::new();
            let conv = Conv2d::new(&mut pb, 3, 4, stride);
            let mut params: Vec<f64> = pb.build(5);
            conv.bias.get_mut(&mut params).iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
            let x = ramp(3, 6, 8, 0.3);
            let (y, _) = conv.forward(&params, &x);
            let want = naive_conv(&x, conv.weight.get(&params), conv.bias.get(&params), 4, stride);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Scalar loss `sum(y * probe)` for finite-difference checks.
    fn probe_loss(y: &[f64], probe: &[f64]) -> f64 {
        y.iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1, 2] {
            let mut pb = ParamBuilder::new();
            let conv = Conv2d::new(&mut pb, 2, 3, stride);
            let params: Vec<f64> = pb.build(9);
            let x = ramp(2, 6, 6, 0.7);
            let (y, cache) = conv.forward(&params, &x);
            let probe: Vec<f64> = (0..y.data.len()).map(|i| (i as f64 * 1.3).cos()).collect();
            let dy = FeatureMap::from_vec(y.channels, y.height, y.width, probe.clone());
            let mut grads = vec![0.0; params.len()];
            let dx = conv.backward(&params, &cache, &dy, &mut grads, true).unwrap();
            let eps = 1e-6;
            for i in (0..params.len()).step_by(5) {
                let mut p = params.clone();
                p[i] += eps;
                let up = probe_loss(&conv.forward(&p, &x).0.data, &probe);
                p[i] -= 2.0 * eps;
                let dn = probe_loss(&conv.forward(&p, &x).0.data, &probe);
                assert!(((up - dn) / (2.0 * eps) - grads[i]).abs() < 1e-6);
            }
            for i in (0..x.data.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let up = probe_loss(&conv.forward(&params, &xp).0.data, &probe);
                xp.data[i] -= 2.0 * eps;
                let dn = probe_loss(&conv.forward(&params, &xp).0.data, &probe);
                assert!(((up - dn) / (2.0 * eps) - dx.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_backward_matches_finite_differences() {
        let mut pb = ParamBuilder::new();
        let up = ConvT2x2::new(&mut pb, 3, 2);
        let params: Vec<f64> = pb.build(3);
        let x = ramp(3, 3, 4, 0.4);
        let y = up.forward(&params, &x);
        assert_eq!(y.shape(), (2, 6, 8));
        let probe: Vec<f64> = (0..y.data.len()).map(|i| (i as f64 * 0.77).sin()).collect();
        let dy = FeatureMap::from_vec(2, 6, 8, probe.clone());
        let mut grads = vec![0.0; params.len()];
        let dx = up.backward(&params, &x, &dy, &mut grads);
        let eps = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += eps;
            let a = probe_loss(&up.forward(&p, &x).data, &probe);
            p[i] -= 2.0 * eps;
            let b = probe_loss(&up.forward(&p, &x).data, &probe);
            assert!(((a - b) / (2.0 * eps) - grads[i]).abs() < 1e-6);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let a = probe_loss(&up.forward(&params, &xp).data, &probe);
            xp.data[i] -= 2.0 * eps;
            let b = probe_loss(&up.forward(&params, &xp).data, &probe);
            assert!(((a - b) / (2.0 * eps) - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_and_pointwise_backward() {
        let mut pb = ParamBuilder::new();
        let lin = Linear::new(&mut pb, 5, 3);
        let params: Vec<f64> = pb.build(1);
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.6).collect();
        let probe = [0.3, -1.2, 0.7];
        let f = |p: &[f64], x: &[f64]| probe_loss(&silu_vec(&lin.forward(p, x)), &probe);
        let pre = lin.forward(&params, &x);
        let dpre = silu_vec_backward(&pre, &probe);
        let mut grads = vec![0.0; params.len()];
        let dx = lin.backward(&params, &x, &dpre, &mut grads);
        let eps = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += eps;
            let a = f(&p, &x);
            p[i] -= 2.0 * eps;
            let b = f(&p, &x);
            assert!(((a - b) / (2.0 * eps) - grads[i]).abs() < 1e-7);
        }
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let a = f(&params, &xp);
            xp[i] -= 2.0 * eps;
            let b = f(&params, &xp);
            assert!(((a - b) / (2.0 * eps) - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn instance_norm_and_pools_backward() {
        let x = ramp(2, 4, 4, 0.9);
        let probe: Vec<f64> = (0..2 * 2 * 2).map(|i| (i as f64 * 0.5).cos()).collect();
        let f = |x: &FeatureMap<f64>| {
            let (n, _) = instance_norm(x);
            probe_loss(&silu(&avg_pool2(&n)).data, &probe)
        };
        let (n, inv) = instance_norm(&x);
        let pooled = avg_pool2(&n);
        let dpool = silu_backward(&pooled, &FeatureMap::from_vec(2, 2, 2, probe.clone()));
        let dn = avg_pool2_backward(&dpool, 4, 4);
        let dx = instance_norm_backward(&n, &inv, &dn);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let a = f(&xp);
            xp.data[i] -= 2.0 * eps;
            let b = f(&xp);
            assert!(((a - b) / (2.0 * eps) - dx.data[i]).abs() < 1e-6);
        }
        let g = global_avg_pool(&x);
        let dg = global_avg_pool_backward(&[1.0, 2.0], 2, 4, 4);
        assert_eq!(g.len(), 2);
        assert!((dg.data[0] - 1.0f64 / 16.0).abs() < 1e-15 && (dg.data[20] - 2.0f64 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = stream_rng(1, 0);
        let m: Vec<f64> = dropout_mask(10_000, 0.1, &mut rng);
        let dropped = m.iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&dropped));
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }
}
