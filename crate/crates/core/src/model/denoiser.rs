//! Encoder–decoder denoiser.
//!
//! Two input channels `(x_t, x)`, a stem convolution, `depth` encoder stages
//! (3x3 conv + timestep bias + SiLU, then a stride-2 3x3 conv + SiLU that
//! doubles the channels), a bottleneck stage, and `depth` decoder stages
//! (2x2 stride-2 transposed conv, additive skip, 3x3 conv + timestep bias +
//! SiLU). A zero-initialized 3x3 conv maps back to one channel, so the
//! untrained network outputs exactly zero.
//!
//! The timestep enters as a 128-wide sine–cosine encoding, projected by one
//! linear layer and a SiLU, then projected once more per stage to a
//! per-channel bias.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::embedding::{embed_timestep, EMBED_DIM};
use super::{Bottleneck, Denoiser};
use crate::error::{invalid_config, invalid_input, Result};
use crate::nn::{
    channel_bias, channel_bias_backward, silu, silu_backward, silu_vec, silu_vec_backward, Conv2d, ConvCache,
    ConvT2x2, FeatureMap, Linear, ParamBuilder, Real,
};
use crate::pattern::{zscore_normalize, Pattern};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Side length of the (square) input patterns.
    pub size: usize,
    /// Channels of the first stage; doubled at every downsampling.
    pub width: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// Width of the projected timestep embedding.
    pub time_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { size: 64, width: 16, depth: 3, time_hidden: 64 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.time_hidden == 0 {
            return Err(invalid_config("width, depth and time_hidden must be positive"));
        }
        let side = self.size >> self.depth;
        if side << self.depth != self.size || side < 4 || !side.is_multiple_of(4) {
            return Err(invalid_config(format!(
                "size {} must be divisible by 2^depth and leave a bottleneck side that is a multiple of 4",
                self.size
            )));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width << self.depth
    }

    pub fn bottleneck_side(&self) -> usize {
        self.size >> self.depth
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.width << i
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    time: Linear,
    stem: Conv2d,
    enc: Vec<Conv2d>,
    enc_t: Vec<Linear>,
    down: Vec<Conv2d>,
    mid: Conv2d,
    mid_t: Linear,
    up: Vec<ConvT2x2>,
    dec: Vec<Conv2d>,
    dec_t: Vec<Linear>,
    out: Conv2d,
}

impl Layout {
    fn build(cfg: &DenoiserConfig, pb: &mut ParamBuilder) -> Self {
        let th = cfg.time_hidden;
        let time = Linear::new(pb, EMBED_DIM, th);
        let stem = Conv2d::new(pb, 2, cfg.width, 1);
        let mut enc = Vec::new();
        let mut enc_t = Vec::new();
        let mut down = Vec::new();
        for i in 0..cfg.depth {
            let c = cfg.stage_channels(i);
            enc.push(Conv2d::new(pb, c, c, 1));
            enc_t.push(Linear::new(pb, th, c));
            down.push(Conv2d::new(pb, c, 2 * c, 2));
        }
        let cm = cfg.bottleneck_channels();
        let mid = Conv2d::new(pb, cm, cm, 1);
        let mid_t = Linear::new(pb, th, cm);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        let mut dec_t = Vec::new();
        for i in 0..cfg.depth {
            let c = cfg.stage_channels(i);
            up.push(ConvT2x2::new(pb, 2 * c, c));
            dec.push(Conv2d::new(pb, c, c, 1));
            dec_t.push(Linear::new(pb, th, c));
        }
        let out = Conv2d::new_zeroed(pb, cfg.width, 1, 1);
        Layout { time, stem, enc, enc_t, down, mid, mid_t, up, dec, dec_t, out }
    }
}

/// Activations kept for the backward pass.
struct Cache<F> {
    sin: Vec<F>,
    t_pre: Vec<F>,
    t_act: Vec<F>,
    stem: ConvCache<F>,
    enc: Vec<ConvCache<F>>,
    enc_pre: Vec<FeatureMap<F>>,
    down: Vec<ConvCache<F>>,
    down_pre: Vec<FeatureMap<F>>,
    mid: Option<ConvCache<F>>,
    mid_pre: Option<FeatureMap<F>>,
    up_in: Vec<FeatureMap<F>>,
    dec: Vec<ConvCache<F>>,
    dec_pre: Vec<FeatureMap<F>>,
    out: Option<ConvCache<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<F> {
    config: DenoiserConfig,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Real> DenoiserModel<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let layout = Layout::build(&config, &mut pb);
        let params = pb.build(seed);
        Ok(DenoiserModel { config, layout, params })
    }

    /// Rebuild from a stored parameter vector.
    pub fn from_params(config: DenoiserConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let layout = Layout::build(&config, &mut pb);
        if pb.len() != params.len() {
            return Err(invalid_config(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                pb.len()
            )));
        }
        Ok(DenoiserModel { config, layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 of the parameter bytes.
    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    fn input(&self, x_t: &Pattern, x: &Pattern) -> Result<FeatureMap<F>> {
        let s = self.config.size;
        for (name, p) in [("x_t", x_t), ("x", x)] {
            if p.shape() != (s, s) {
                return Err(invalid_input(format!(
                    "{name} is {:?}, model expects {s}x{s}",
                    p.shape()
                )));
            }
        }
        // The state channel is standardised here, so a z-scored and a
        // [0, 1]-rescaled x_t look the same to the network.
        let x_t = zscore_normalize(x_t)?;
        let data = x_t.pixels().iter().chain(x.pixels()).map(|&v| F::of(v)).collect();
        Ok(FeatureMap::from_vec(2, s, s, data))
    }

    fn run(&self, input: &FeatureMap<F>, t: usize, full: bool) -> (Option<FeatureMap<F>>, FeatureMap<F>, Cache<F>) {
        let p = &self.params;
        let l = &self.layout;
        let sin: Vec<F> = embed_timestep(t).iter().map(|&v| F::of(v)).collect();
        let t_pre = l.time.forward(p, &sin);
        let t_act = silu_vec(&t_pre);

        let (mut h, stem) = l.stem.forward(p, input);
        let mut cache = Cache {
            sin,
            t_pre,
            t_act,
            stem,
            enc: Vec::new(),
            enc_pre: Vec::new(),
            down: Vec::new(),
            down_pre: Vec::new(),
            mid: None,
            mid_pre: None,
            up_in: Vec::new(),
            dec: Vec::new(),
            dec_pre: Vec::new(),
            out: None,
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let (mut pre, c) = l.enc[i].forward(p, &h);
            channel_bias(&mut pre, &l.enc_t[i].forward(p, &cache.t_act));
            let act = silu(&pre);
            let (dpre, dc) = l.down[i].forward(p, &act);
            h = silu(&dpre);
            skips.push(act);
            cache.enc.push(c);
            cache.enc_pre.push(pre);
            cache.down.push(dc);
            cache.down_pre.push(dpre);
        }
        let (mut pre, c) = l.mid.forward(p, &h);
        channel_bias(&mut pre, &l.mid_t.forward(p, &cache.t_act));
        let bottleneck = silu(&pre);
        cache.mid = Some(c);
        cache.mid_pre = Some(pre);
        if !full {
            return (None, bottleneck, cache);
        }

        let mut h = bottleneck.clone();
        cache.up_in = vec![FeatureMap::zeros(0, 0, 0); self.config.depth];
        cache.dec = Vec::with_capacity(self.config.depth);
        let mut dec = Vec::with_capacity(self.config.depth);
        let mut dec_pre = Vec::with_capacity(self.config.depth);
        for i in (0..self.config.depth).rev() {
            let mut u = l.up[i].forward(p, &h);
            u.add_assign(&skips[i]);
            let (mut pre, c) = l.dec[i].forward(p, &u);
            channel_bias(&mut pre, &l.dec_t[i].forward(p, &cache.t_act));
            cache.up_in[i] = std::mem::replace(&mut h, silu(&pre));
            dec.push((i, c));
            dec_pre.push((i, pre));
        }
        // Store decoder caches indexed by stage.
        dec.sort_by_key(|(i, _)| *i);
        dec_pre.sort_by_key(|(i, _)| *i);
        cache.dec = dec.into_iter().map(|(_, c)| c).collect();
        cache.dec_pre = dec_pre.into_iter().map(|(_, c)| c).collect();
        let (out, oc) = l.out.forward(p, &h);
        cache.out = Some(oc);
        (Some(out), bottleneck, cache)
    }

    /// Accumulate parameter gradients for output gradient `dout`.
    fn backward(&self, cache: &Cache<F>, dout: &FeatureMap<F>, grads: &mut [F]) {
        let p = &self.params;
        let l = &self.layout;
        let depth = self.config.depth;
        let mut d_t_act = vec![F::zero(); self.config.time_hidden];
        let add_time = |acc: &mut Vec<F>, g: Vec<F>| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);

        let mut d = l
            .out
            .backward(p, cache.out.as_ref().expect("full forward"), dout, grads, true)
            .expect("input grad");
        let mut dskips = Vec::with_capacity(depth);
        for i in 0..depth {
            let dpre = silu_backward(&cache.dec_pre[i], &d);
            let dt = l.dec_t[i].backward(p, &cache.t_act, &channel_bias_backward(&dpre), grads);
            add_time(&mut d_t_act, dt);
            let du = l.dec[i].backward(p, &cache.dec[i], &dpre, grads, true).expect("input grad");
            d = l.up[i].backward(p, &cache.up_in[i], &du, grads);
            dskips.push(du);
        }
        let mid_pre = cache.mid_pre.as_ref().expect("mid");
        let dpre = silu_backward(mid_pre, &d);
        let dt = l.mid_t.backward(p, &cache.t_act, &channel_bias_backward(&dpre), grads);
        add_time(&mut d_t_act, dt);
        d = l.mid.backward(p, cache.mid.as_ref().expect("mid"), &dpre, grads, true).expect("input grad");
        for i in (0..depth).rev() {
            let dpre = silu_backward(&cache.down_pre[i], &d);
            let mut da = l.down[i].backward(p, &cache.down[i], &dpre, grads, true).expect("input grad");
            da.add_assign(&dskips[i]);
            let dpre = silu_backward(&cache.enc_pre[i], &da);
            let dt = l.enc_t[i].backward(p, &cache.t_act, &channel_bias_backward(&dpre), grads);
            add_time(&mut d_t_act, dt);
            d = l.enc[i].backward(p, &cache.enc[i], &dpre, grads, true).expect("input grad");
        }
        l.stem.backward(p, &cache.stem, &d, grads, false);
        let dt_pre = silu_vec_backward(&cache.t_pre, &d_t_act);
        l.time.backward(p, &cache.sin, &dt_pre, grads);
    }

    fn to_pattern(&self, fm: &FeatureMap<F>) -> Result<Pattern> {
        Pattern::new(fm.height, fm.width, fm.data.iter().map(|v| v.f64()).collect())
    }

    /// Eval-mode prediction and bottleneck features in the network's own precision.
    pub fn predict(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<(Pattern, FeatureMap<F>)> {
        let input = self.input(x_t, x)?;
        let (out, bottleneck, _) = self.run(&input, t, true);
        Ok((self.to_pattern(&out.expect("full forward"))?, bottleneck))
    }

    /// Encoder only.
    pub fn bottleneck(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<FeatureMap<F>> {
        let input = self.input(x_t, x)?;
        Ok(self.run(&input, t, false).1)
    }

    /// Mean absolute error of the prediction against `target`.
    pub fn loss(&self, x_t: &Pattern, x: &Pattern, t: usize, target: &Pattern) -> Result<f64> {
        let (pred, _) = self.predict(x_t, x, t)?;
        pred.ensure_same_shape(target)?;
        Ok(pred.pixels().iter().zip(target.pixels()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
    }

    /// L1 loss and its parameter gradient for a single example.
    pub fn loss_and_grad(&self, x_t: &Pattern, x: &Pattern, t: usize, target: &Pattern) -> Result<(f64, Vec<F>)> {
        let input = self.input(x_t, x)?;
        target.ensure_same_shape(x)?;
        let (out, _, cache) = self.run(&input, t, true);
        let out = out.expect("full forward");
        let n = out.data.len() as f64;
        let mut loss = 0.0;
        let inv_n = F::of(1.0 / n);
        let mut dout = FeatureMap::zeros(1, out.height, out.width);
        for ((d, &o), &y) in dout.data.iter_mut().zip(&out.data).zip(target.pixels()) {
            let r = o.f64() - y;
            loss += r.abs();
            *d = if r > 0.0 {
                inv_n
            } else if r < 0.0 {
                -inv_n
            } else {
                F::zero()
            };
        }
        let mut grads = vec![F::zero(); self.params.len()];
        self.backward(&cache, &dout, &mut grads);
        Ok((loss / n, grads))
    }
}

pub(crate) fn param_checksum<F: Real>(params: &[F]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::with_capacity(params.len() * F::BYTES);
    for &p in params {
        p.write_le(&mut buf);
    }
    h.update(&buf);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn to_f64_map<F: Real>(fm: &FeatureMap<F>) -> Bottleneck {
    FeatureMap::from_vec(fm.channels, fm.height, fm.width, fm.data.iter().map(|v| v.f64()).collect())
}

impl<F: Real> Denoiser for DenoiserModel<F> {
    fn denoise(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<(Pattern, Bottleneck)> {
        let (p, b) = self.predict(x_t, x, t)?;
        Ok((p, to_f64_map(&b)))
    }

    fn encode(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<Bottleneck> {
        Ok(to_f64_map(&self.bottleneck(x_t, x, t)?))
    }
}
