//! Auxiliary regression head: bottleneck features -> `(q̂, r̂)`.
//!
//! Instance norm, two stride-2 conv blocks with average-pooled skips, global
//! average pooling, then a 256-128-2 MLP with SiLU and dropout, and a sigmoid
//! on both outputs.

use serde::{Deserialize, Serialize};

use super::denoiser::param_checksum;
use super::{Bottleneck, QualityAssessor};
use crate::error::{invalid_config, invalid_input, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, dropout_mask, global_avg_pool, global_avg_pool_backward, instance_norm,
    sigmoid, silu, silu_backward, silu_vec, silu_vec_backward, Conv2d, ConvCache, FeatureMap,
    Linear, ParamBuilder, Real,
};
use crate::pattern::Pattern;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub channels: usize,
    /// Side length of the square bottleneck.
    pub side: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
}

impl HeadConfig {
    pub fn for_bottleneck(channels: usize, side: usize) -> Self {
        HeadConfig { channels, side, hidden1: 256, hidden2: 128, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(invalid_config("head sizes must be positive"));
        }
        if self.side < 4 || !self.side.is_multiple_of(4) {
            return Err(invalid_config("bottleneck side must be a positive multiple of 4"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid_config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    block1: Conv2d,
    block2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

struct Cache<F> {
    b1: ConvCache<F>,
    b1_pre: FeatureMap<F>,
    x1: FeatureMap<F>,
    b2: ConvCache<F>,
    b2_pre: FeatureMap<F>,
    pooled: Vec<F>,
    z1: Vec<F>,
    m1: Option<Vec<F>>,
    h1: Vec<F>,
    z2: Vec<F>,
    m2: Option<Vec<F>>,
    h2: Vec<F>,
    out: [F; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityHead<F> {
    config: HeadConfig,
    layout: Layout,
    params: Vec<F>,
}

fn apply_mask<F: Real>(v: &[F], mask: &Option<Vec<F>>) -> Vec<F> {
    match mask {
        Some(m) => v.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => v.to_vec(),
    }
}

impl<F: Real> QualityHead<F> {
    fn layout(cfg: &HeadConfig, pb: &mut ParamBuilder) -> Layout {
        let c = cfg.channels;
        Layout {
            block1: Conv2d::new(pb, c, c, 2),
            block2: Conv2d::new(pb, c, c, 2),
            fc1: Linear::new(pb, c, cfg.hidden1),
            fc2: Linear::new(pb, cfg.hidden1, cfg.hidden2),
            fc3: Linear::new_glorot(pb, cfg.hidden2, 2),
        }
    }

    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let layout = Self::layout(&config, &mut pb);
        let params = pb.build(seed);
        Ok(QualityHead { config, layout, params })
    }

    pub fn from_params(config: HeadConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let layout = Self::layout(&config, &mut pb);
        if pb.len() != params.len() {
            return Err(invalid_config(format!(
                "parameter count {} does not match head architecture ({})",
                params.len(),
                pb.len()
            )));
        }
        Ok(QualityHead { config, layout, params })
    }

    pub fn config(&self) -> &HeadConfig {
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

    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    /// Zero the output layer so both logits are exactly 0.
    pub fn zero_output_layer(&mut self) {
        let l = self.layout.fc3.clone();
        l.weight.get_mut(&mut self.params).iter_mut().for_each(|v| *v = F::zero());
        l.bias.get_mut(&mut self.params).iter_mut().for_each(|v| *v = F::zero());
    }

    fn check(&self, b: &FeatureMap<F>) -> Result<()> {
        let want = (self.config.channels, self.config.side, self.config.side);
        if b.shape() != want {
            return Err(invalid_input(format!("bottleneck is {:?}, head expects {want:?}", b.shape())));
        }
        Ok(())
    }

    /// `dropout_seed = None` is eval mode.
    fn run(&self, b: &FeatureMap<F>, dropout_seed: Option<u64>) -> Cache<F> {
        let p = &self.params;
        let l = &self.layout;
        let (normed, _) = instance_norm(b);
        let (b1_pre, b1) = l.block1.forward(p, &normed);
        let mut x1 = silu(&b1_pre);
        x1.add_assign(&avg_pool2(&normed));
        let (b2_pre, b2) = l.block2.forward(p, &x1);
        let mut x2 = silu(&b2_pre);
        x2.add_assign(&avg_pool2(&x1));
        let pooled = global_avg_pool(&x2);
        let mut rng = dropout_seed.map(|s| stream_rng(s, 7));
        let z1 = l.fc1.forward(p, &pooled);
        let m1 = rng.as_mut().map(|r| dropout_mask(self.config.hidden1, self.config.dropout, r));
        let h1 = apply_mask(&silu_vec(&z1), &m1);
        let z2 = l.fc2.forward(p, &h1);
        let m2 = rng.as_mut().map(|r| dropout_mask(self.config.hidden2, self.config.dropout, r));
        let h2 = apply_mask(&silu_vec(&z2), &m2);
        let logits = l.fc3.forward(p, &h2);
        let out = [sigmoid(logits[0]), sigmoid(logits[1])];
        Cache { b1, b1_pre, x1, b2, b2_pre, pooled, z1, m1, h1, z2, m2, h2, out }
    }

    /// Eval-mode `(q̂, r̂)`.
    pub fn predict(&self, bottleneck: &FeatureMap<F>) -> Result<(f64, f64)> {
        self.check(bottleneck)?;
        let c = self.run(bottleneck, None);
        Ok((c.out[0].f64(), c.out[1].f64()))
    }

    /// Mean L1 loss over `(q̂, r̂)` vs `targets` and its gradient, with
    /// dropout active (drawn from `dropout_seed`).
    pub fn loss_and_grad(
        &self,
        bottleneck: &FeatureMap<F>,
        targets: (f64, f64),
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<F>)> {
        self.check(bottleneck)?;
        let p = &self.params;
        let l = &self.layout;
        let c = self.run(bottleneck, dropout_seed);
        let t = [targets.0, targets.1];
        let mut loss = 0.0;
        let mut dlogit = vec![F::zero(); 2];
        for k in 0..2 {
            let o = c.out[k].f64();
            let r = o - t[k];
            loss += r.abs() / 2.0;
            let sign = if r > 0.0 {
                0.5
            } else if r < 0.0 {
                -0.5
            } else {
                0.0
            };
            dlogit[k] = F::of(sign * o * (1.0 - o));
        }
        let mut grads = vec![F::zero(); p.len()];
        let dh2 = l.fc3.backward(p, &c.h2, &dlogit, &mut grads);
        let dz2 = silu_vec_backward(&c.z2, &apply_mask(&dh2, &c.m2));
        let dh1 = l.fc2.backward(p, &c.h1, &dz2, &mut grads);
        let dz1 = silu_vec_backward(&c.z1, &apply_mask(&dh1, &c.m1));
        let dpool = l.fc1.backward(p, &c.pooled, &dz1, &mut grads);
        let s2 = self.config.side / 4;
        let dx2 = global_avg_pool_backward(&dpool, self.config.channels, s2, s2);
        let dpre2 = silu_backward(&c.b2_pre, &dx2);
        let mut dx1 = l.block2.backward(p, &c.b2, &dpre2, &mut grads, true).expect("input grad");
        dx1.add_assign(&avg_pool2_backward(&dx2, c.x1.height, c.x1.width));
        let dpre1 = silu_backward(&c.b1_pre, &dx1);
        // The encoder is frozen, so the gradient stops at the head input.
        l.block1.backward(p, &c.b1, &dpre1, &mut grads, false);
        Ok((loss, grads))
    }

    pub(crate) fn cast_bottleneck(b: &Bottleneck) -> FeatureMap<F> {
        FeatureMap::from_vec(b.channels, b.height, b.width, b.data.iter().map(|&v| F::of(v)).collect())
    }
}

impl<F: Real> QualityAssessor for QualityHead<F> {
    fn assess(&self, bottleneck: &Bottleneck, _x: &Pattern, _t: usize) -> Result<(f64, f64)> {
        self.predict(&Self::cast_bottleneck(bottleneck))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(seed: u64, c: usize, s: usize) -> FeatureMap<f64> {
        let mut rng = stream_rng(seed, 0);
        FeatureMap::from_vec(c, s, s, (0..c * s * s).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let head = QualityHead::<f32>::new(HeadConfig::for_bottleneck(8, 4), 3).unwrap();
        for s in 0..50 {
            let b = HeadConfig::for_bottleneck(8, 4);
            let fm: FeatureMap<f32> = QualityHead::<f32>::cast_bottleneck(&random_map(s, b.channels, b.side).clone());
            let (q, r) = head.predict(&fm).unwrap();
            assert!(q > 0.0 && q < 1.0 && r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn eval_is_deterministic_and_zero_logit_is_half() {
        let mut head = QualityHead::<f64>::new(HeadConfig::for_bottleneck(8, 4), 3).unwrap();
        let b = random_map(1, 8, 4);
        assert_eq!(head.predict(&b).unwrap(), head.predict(&b).unwrap());
        head.zero_output_layer();
        assert_eq!(head.predict(&b).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn rejects_mismatched_bottleneck() {
        let head = QualityHead::<f64>::new(HeadConfig::for_bottleneck(8, 4), 3).unwrap();
        assert!(matches!(head.predict(&random_map(1, 8, 8)), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = HeadConfig { hidden1: 16, hidden2: 8, ..HeadConfig::for_bottleneck(6, 8) };
        let head = QualityHead::<f64>::new(cfg, 5).unwrap();
        let b = random_map(2, 6, 8);
        let targets = (0.9, 0.05);
        let dropout = Some(17);
        let (_, grads) = head.loss_and_grad(&b, targets, dropout).unwrap();
        let mut rng = stream_rng(4, 0);
        let eps = 1e-6;
        for _ in 0..30 {
            let i = rng.random_range(0..head.num_params());
            let mut h = head.clone();
            h.params_mut()[i] += eps;
            let up = h.loss_and_grad(&b, targets, dropout).unwrap().0;
            h.params_mut()[i] -= 2.0 * eps;
            let dn = h.loss_and_grad(&b, targets, dropout).unwrap().0;
            let fd = (up - dn) / (2.0 * eps);
            let rel = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: fd {fd} analytic {}", grads[i]);
        }
    }
}
