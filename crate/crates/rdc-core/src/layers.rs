//! Network building blocks: convolutions, transposed convolutions, and the
//! spatial feature transform used by every conditional module.

use crate::arr::Arr;
use crate::ctx::Ctx;
use crate::error::Result;
use crate::mask::ComplexityLevel;
use rand::Rng;

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Arr {
    let lim = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Arr {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-lim..lim)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub w: Arr,
    pub b: Arr,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::with_gain(name, cin, cout, k, stride, 1.0, rng)
    }

    pub fn with_gain(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            name: name.to_string(),
            w: glorot(&[cout, cin, k, k], cin * k * k, cout * k * k, gain, rng),
            b: Arr::zeros(&[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fwd<C: Ctx>(&self, c: &mut C, x: &C::T) -> Result<C::T> {
        let w = c.param(&format!("{}.w", self.name), &self.w);
        let b = c.param(&format!("{}.b", self.name), &self.b);
        c.conv2d(x, &w, &b, self.stride, self.pad)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Arr)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arr)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct Deconv {
    pub name: String,
    /// Weight layout [Cin, Cout, k, k].
    pub w: Arr,
    pub b: Arr,
    pub stride: usize,
    pub pad: usize,
    pub outpad: usize,
}

impl Deconv {
    /// Stride-2 upsampling deconv with output dims exactly 2x input.
    pub fn up2(name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        debug_assert!(k % 2 == 1);
        Deconv {
            name: name.to_string(),
            w: glorot(&[cin, cout, k, k], cin * k * k, cout * k * k, 1.0, rng),
            b: Arr::zeros(&[cout]),
            stride: 2,
            pad: (k - 1) / 2,
            outpad: 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[1]
    }

    pub fn fwd<C: Ctx>(&self, c: &mut C, x: &C::T) -> Result<C::T> {
        let w = c.param(&format!("{}.w", self.name), &self.w);
        let b = c.param(&format!("{}.b", self.name), &self.b);
        c.conv_t2d(x, &w, &b, self.stride, self.pad, self.outpad)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Arr)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arr)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Spatial feature transform: a shared 3x3 stem over the condition feature
/// and separate 3x3 heads emitting per-element (gamma, beta); the modulated
/// feature becomes gamma * f + beta. Initialized near the identity
/// (gamma ~ 1, beta ~ 0).
#[derive(Debug, Clone)]
pub struct SftBlock {
    pub stem: Conv,
    pub gamma_head: Conv,
    pub beta_head: Conv,
}

impl SftBlock {
    pub fn new(name: &str, cond_ch: usize, out_ch: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let stem = Conv::new(&format!("{name}.stem"), cond_ch, hidden, 3, 1, rng);
        let mut gamma_head = Conv::with_gain(&format!("{name}.gamma"), hidden, out_ch, 3, 1, 0.1, rng);
        for v in &mut gamma_head.b.data {
            *v = 1.0;
        }
        let beta_head = Conv::with_gain(&format!("{name}.beta"), hidden, out_ch, 3, 1, 0.1, rng);
        SftBlock {
            stem,
            gamma_head,
            beta_head,
        }
    }

    /// Affine parameter maps generated from the condition feature.
    pub fn params<C: Ctx>(&self, c: &mut C, cond: &C::T) -> Result<(C::T, C::T)> {
        let s = self.stem.fwd(c, cond)?;
        let s = c.lrelu(&s);
        let gamma = self.gamma_head.fwd(c, &s)?;
        let beta = self.beta_head.fwd(c, &s)?;
        Ok((gamma, beta))
    }

    pub fn apply<C: Ctx>(&self, c: &mut C, f: &C::T, cond: &C::T) -> Result<C::T> {
        let (gamma, beta) = self.params(c, cond)?;
        sft_apply(c, f, &gamma, &beta)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Arr)) {
        self.stem.visit(f);
        self.gamma_head.visit(f);
        self.beta_head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arr)) {
        self.stem.visit_mut(f);
        self.gamma_head.visit_mut(f);
        self.beta_head.visit_mut(f);
    }
}

/// Elementwise affine transform gamma * f + beta.
pub fn sft_apply<C: Ctx>(c: &mut C, f: &C::T, gamma: &C::T, beta: &C::T) -> Result<C::T> {
    let scaled = c.mul(f, gamma)?;
    c.add(&scaled, beta)
}

/// Constant [1,h,w] plane holding the complexity level.
pub fn broadcast_level(l: ComplexityLevel, h: usize, w: usize) -> Arr {
    Arr::full(&[1, h, w], l.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctx::PureCtx;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> Arr {
        let n: usize = shape.iter().product();
        Arr::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sft_apply_identity_and_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut c = PureCtx;
        let f = randn(&[2, 3, 3], &mut rng);
        let ones = Arr::full(&[2, 3, 3], 1.0);
        let zeros = Arr::zeros(&[2, 3, 3]);
        let out = sft_apply(&mut c, &f, &ones, &zeros).unwrap();
        assert_eq!(out.data, f.data);
        let beta = randn(&[2, 3, 3], &mut rng);
        let out = sft_apply(&mut c, &f, &zeros, &beta).unwrap();
        assert_eq!(out.data, beta.data);
        // Random case against the elementwise oracle.
        let g = randn(&[2, 3, 3], &mut rng);
        let b = randn(&[2, 3, 3], &mut rng);
        let out = sft_apply(&mut c, &f, &g, &b).unwrap();
        for i in 0..out.len() {
            assert!((out.data[i] - (g.data[i] * f.data[i] + b.data[i])).abs() < 1e-12);
        }
        assert!(sft_apply(&mut c, &f, &Arr::zeros(&[1, 3, 3]), &zeros).is_err());
    }

    #[test]
    fn sft_block_zero_weights_zero_output() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut sft = SftBlock::new("t", 1, 2, 4, &mut rng);
        sft.visit_mut(&mut |_, a| *a = Arr::zeros(&a.shape));
        let mut c = PureCtx;
        let f = randn(&[2, 4, 4], &mut rng);
        let cond = randn(&[1, 4, 4], &mut rng);
        let (gamma, beta) = sft.params(&mut c, &cond).unwrap();
        assert_eq!(gamma.shape, f.shape);
        assert_eq!(beta.shape, f.shape);
        assert!(gamma.data.iter().all(|&v| v == 0.0));
        let out = sft.apply(&mut c, &f, &cond).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sft_block_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let sft = SftBlock::new("t", 1, 2, 3, &mut rng);
        let f0 = randn(&[2, 3, 3], &mut rng);
        let cond0 = randn(&[1, 3, 3], &mut rng);
        let rep = grad_check(
            |t, xs| {
                let mut c = crate::ctx::TapeCtx::new(t);
                // Inputs arrive as tape vars; route them through the block.
                let (gamma, beta) = sft.params(&mut c, &xs[1])?;
                let out = sft_apply(&mut c, &xs[0], &gamma, &beta)?;
                Ok(c.tape.sum(out))
            },
            &[f0, cond0],
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "sft grad: {}", rep.max_rel_err);
    }

    #[test]
    fn broadcast_level_planes() {
        let z = broadcast_level(ComplexityLevel::new(0.0).unwrap(), 3, 5);
        assert_eq!(z.shape, vec![1, 3, 5]);
        assert!(z.data.iter().all(|&v| v == 0.0));
        let half = broadcast_level(ComplexityLevel::new(0.5).unwrap(), 4, 4);
        assert_eq!(half.data, vec![0.5; 16]);
    }

    #[test]
    fn deconv_up2_doubles_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let d = Deconv::up2("d", 3, 2, 5, &mut rng);
        let mut c = PureCtx;
        let x = randn(&[3, 4, 6], &mut rng);
        let out = d.fwd(&mut c, &x).unwrap();
        assert_eq!(out.shape, vec![2, 8, 12]);
    }

    #[test]
    fn conv_stride2_halves_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(45);
        let cv = Conv::new("c", 3, 4, 5, 2, &mut rng);
        let mut c = PureCtx;
        let x = randn(&[3, 8, 8], &mut rng);
        let out = cv.fwd(&mut c, &x).unwrap();
        assert_eq!(out.shape, vec![4, 4, 4]);
        assert_eq!(cv.out_channels(), 4);
    }
}
