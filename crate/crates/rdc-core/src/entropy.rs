//! Probability models for the latents: conditional Gaussians for the main
//! latent, per-channel factorized priors for the hyper latent (one prior per
//! complexity-level segment), quantization relaxation, and quantized CDF
//! tables for the range coder.

use crate::arr::Arr;
use crate::error::{RdcError, Result};
use crate::ops;
use rand::Rng;

pub const SIGMA_MIN: f64 = 0.04;

/// Symbol range for main-latent residuals; out-of-range values escape-code.
pub const Y_SYMBOL_MIN: i32 = -64;
pub const Y_SYMBOL_MAX: i32 = 63;
/// Symbol range for the hyper latent.
pub const Z_SYMBOL_MIN: i32 = -32;
pub const Z_SYMBOL_MAX: i32 = 31;
/// Escape raw coding covers magnitudes up to this bound.
pub const ESCAPE_MAG_MAX: i32 = 255;

pub const NUM_SEGMENTS: usize = 12;

/// Per-position (mu, sigma) maps of the conditional Gaussian. `sigma` is
/// clamped to [`SIGMA_MIN`] on construction.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Arr,
    pub sigma: Arr,
}

impl GaussianParams {
    pub fn new(mu: Arr, sigma: Arr) -> Result<Self> {
        if !mu.same_shape(&sigma) {
            return Err(RdcError::ShapeMismatch {
                context: "GaussianParams".into(),
                lhs: mu.shape.clone(),
                rhs: sigma.shape.clone(),
            });
        }
        let sigma = sigma.map(|s| s.max(SIGMA_MIN));
        Ok(GaussianParams { mu, sigma })
    }
}

/// Per-element bits of `y_hat` under the conditional Gaussian.
pub fn gaussian_rate(y_hat: &Arr, params: &GaussianParams) -> Result<Arr> {
    ops::gaussian_rate_fwd(y_hat, &params.mu, &params.sigma)
}

/// Index of the half-open complexity-level segment containing `l`:
/// [0,0.01), [0.01,0.1), [0.1,0.2), ..., [0.9,0.99), [0.99,1].
pub fn segment_index(l: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&l) {
        return Err(RdcError::InvalidArgument(format!(
            "complexity level {l} outside [0,1]"
        )));
    }
    let idx = if l < 0.01 {
        0
    } else if l < 0.1 {
        1
    } else if l < 0.9 {
        // [0.1,0.2) -> 2 ... [0.8,0.9) -> 9
        (l * 10.0).floor() as usize + 1
    } else if l < 0.99 {
        10
    } else {
        11
    };
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Noise,
    Round,
}

/// Training/inference quantization. Noise mode adds U(-0.5, 0.5); round
/// mode does mean-centered rounding `round(y - mu) + mu` with the residual
/// clamped to the escape-codable range.
pub fn relax_quantize(y: &Arr, mode: QuantMode, mu: Option<&Arr>, rng: &mut impl Rng) -> Result<Arr> {
    match mode {
        QuantMode::Noise => Ok(Arr {
            shape: y.shape.clone(),
            data: y
                .data
                .iter()
                .map(|&v| v + rng.gen_range(-0.5..0.5))
                .collect(),
        }),
        QuantMode::Round => {
            let zero = Arr::zeros(&y.shape);
            let mu = match mu {
                Some(m) => {
                    if !m.same_shape(y) {
                        return Err(RdcError::ShapeMismatch {
                            context: "relax_quantize round".into(),
                            lhs: y.shape.clone(),
                            rhs: m.shape.clone(),
                        });
                    }
                    m
                }
                None => &zero,
            };
            let mut out = Arr::zeros(&y.shape);
            for i in 0..y.len() {
                let r = quantize_residual(y.data[i], mu.data[i]);
                out.data[i] = r as f64 + mu.data[i];
            }
            Ok(out)
        }
    }
}

/// Mean-centered residual symbol, clamped to the codable magnitude range.
#[inline]
pub fn quantize_residual(y: f64, mu: f64) -> i32 {
    let r = (y - mu).round() as i64;
    r.clamp(-(ESCAPE_MAG_MAX as i64), ESCAPE_MAG_MAX as i64) as i32
}

// ---------------------------------------------------------------------------
// Factorized prior
// ---------------------------------------------------------------------------

/// Width of the hidden layers in the per-channel monotone CDF model.
pub const FACTORIZED_WIDTH: usize = 3;

/// Per-channel monotone CDF model: a 3-layer stack of monotone scalar maps
/// (widths 1 -> 3 -> 3 -> 1), CDF(x) = sigmoid(logit(x)). One instance per
/// complexity-level segment.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    pub segment_index: usize,
    pub channels: usize,
    /// Parameter tensors in the order expected by the tape op:
    /// w0 [C,3], b0 [C,3], a0 [C,3], w1 [C,3,3], b1 [C,3], a1 [C,3],
    /// w2 [C,3], b2 [C,1].
    pub params: [Arr; 8],
}

pub const FACTORIZED_PARAM_NAMES: [&str; 8] = ["w0", "b0", "a0", "w1", "b1", "a1", "w2", "b2"];

impl FactorizedPrior {
    pub fn init(channels: usize, segment_index: usize, rng: &mut impl Rng) -> Self {
        let w = FACTORIZED_WIDTH;
        // softplus(w0) = 1, softplus(w1) = softplus(w2) = 1/3: identity-slope
        // chain so the initial CDF is close to sigmoid(x).
        let unit = (std::f64::consts::E - 1.0f64).ln();
        let third = ((1.0f64 / 3.0).exp_m1()).ln();
        let jitter = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect()
        };
        let mk = |shape: &[usize], base: f64, rng: &mut dyn rand::RngCore| {
            let n: usize = shape.iter().product();
            let mut a = Arr::from_vec(shape, jitter(rng, n)).unwrap();
            for v in &mut a.data {
                *v += base;
            }
            a
        };
        let params = [
            mk(&[channels, w], unit, rng),
            mk(&[channels, w], 0.0, rng),
            mk(&[channels, w], 0.0, rng),
            mk(&[channels, w, w], third, rng),
            mk(&[channels, w], 0.0, rng),
            mk(&[channels, w], 0.0, rng),
            mk(&[channels, w], third, rng),
            mk(&[channels, 1], 0.0, rng),
        ];
        FactorizedPrior {
            segment_index,
            channels,
            params,
        }
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        let p: Vec<&Arr> = self.params.iter().collect();
        ops::sigmoid(factorized::logit(channel, x, &p).0)
    }

    /// Per-element bits for a [C,H,W] hyper latent.
    pub fn bits(&self, z_hat: &Arr) -> Result<Arr> {
        let p: Vec<&Arr> = self.params.iter().collect();
        factorized::bits_fwd(z_hat, &p)
    }

    /// Quantized CDF table for one channel over the coder symbol range.
    pub fn cdf_table(&self, channel: usize, precision: u32) -> Result<QuantizedCdfTable> {
        build_cdf_table(
            |x| self.cdf(channel, x),
            precision,
            Z_SYMBOL_MIN,
            Z_SYMBOL_MAX,
            true,
        )
    }
}

/// Pure math of the factorized prior, shared between the struct API and the
/// tape op. Parameter slices follow [`FactorizedPrior::params`] order.
pub mod factorized {
    use super::*;

    pub struct Intermediates {
        pub u1: [f64; FACTORIZED_WIDTH],
        pub x1: [f64; FACTORIZED_WIDTH],
        pub u2: [f64; FACTORIZED_WIDTH],
        pub x2: [f64; FACTORIZED_WIDTH],
    }

    /// Monotone logit for one channel at scalar input x.
    pub fn logit(c: usize, x: f64, p: &[&Arr]) -> (f64, Intermediates) {
        let w = FACTORIZED_WIDTH;
        let (w0, b0, a0, w1, b1, a1, w2, b2) =
            (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
        let mut u1 = [0.0; FACTORIZED_WIDTH];
        let mut x1 = [0.0; FACTORIZED_WIDTH];
        for j in 0..w {
            u1[j] = ops::softplus(w0.data[c * w + j]) * x + b0.data[c * w + j];
            x1[j] = u1[j] + a0.data[c * w + j].tanh() * u1[j].tanh();
        }
        let mut u2 = [0.0; FACTORIZED_WIDTH];
        let mut x2 = [0.0; FACTORIZED_WIDTH];
        for j in 0..w {
            let mut acc = b1.data[c * w + j];
            for k in 0..w {
                acc += ops::softplus(w1.data[(c * w + j) * w + k]) * x1[k];
            }
            u2[j] = acc;
            x2[j] = u2[j] + a1.data[c * w + j].tanh() * u2[j].tanh();
        }
        let mut out = b2.data[c];
        for j in 0..w {
            out += ops::softplus(w2.data[c * w + j]) * x2[j];
        }
        (out, Intermediates { u1, x1, u2, x2 })
    }

    /// Reverse pass of [`logit`]: accumulates parameter gradients and returns
    /// the gradient w.r.t. the scalar input.
    #[allow(clippy::too_many_arguments)]
    fn logit_backward(
        c: usize,
        x: f64,
        im: &Intermediates,
        p: &[&Arr],
        gl: f64,
        gp: &mut [Arr],
    ) -> f64 {
        let w = FACTORIZED_WIDTH;
        let (w0, a0, w1, a1, w2) = (p[0], p[2], p[3], p[5], p[6]);
        let mut gx2 = [0.0; FACTORIZED_WIDTH];
        for j in 0..w {
            gp[6].data[c * w + j] += gl * ops::softplus_deriv(w2.data[c * w + j]) * im.x2[j];
            gx2[j] = gl * ops::softplus(w2.data[c * w + j]);
        }
        gp[7].data[c] += gl;
        let mut gx1 = [0.0; FACTORIZED_WIDTH];
        for j in 0..w {
            let ta = a1.data[c * w + j].tanh();
            let tu = im.u2[j].tanh();
            let gu2 = gx2[j] * (1.0 + ta * (1.0 - tu * tu));
            gp[5].data[c * w + j] += gx2[j] * (1.0 - ta * ta) * tu;
            gp[4].data[c * w + j] += gu2;
            for k in 0..w {
                let wi = (c * w + j) * w + k;
                gp[3].data[wi] += gu2 * ops::softplus_deriv(w1.data[wi]) * im.x1[k];
                gx1[k] += gu2 * ops::softplus(w1.data[wi]);
            }
        }
        let mut gx = 0.0;
        for j in 0..w {
            let ta = a0.data[c * w + j].tanh();
            let tu = im.u1[j].tanh();
            let gu1 = gx1[j] * (1.0 + ta * (1.0 - tu * tu));
            gp[2].data[c * w + j] += gx1[j] * (1.0 - ta * ta) * tu;
            gp[1].data[c * w + j] += gu1;
            gp[0].data[c * w + j] += gu1 * ops::softplus_deriv(w0.data[c * w + j]) * x;
            gx += gu1 * ops::softplus(w0.data[c * w + j]);
        }
        gx
    }

    /// Per-element bits: -log2(CDF(z+0.5) - CDF(z-0.5)).
    pub fn bits_fwd(z: &Arr, p: &[&Arr]) -> Result<Arr> {
        if z.shape.len() != 3 {
            return Err(RdcError::InvalidArgument(format!(
                "factorized bits expects [C,H,W], got {:?}",
                z.shape
            )));
        }
        let channels = z.shape[0];
        if p[0].shape[0] != channels {
            return Err(RdcError::ShapeMismatch {
                context: "factorized bits: prior channels vs input channels".into(),
                lhs: p[0].shape.clone(),
                rhs: z.shape.clone(),
            });
        }
        let hw = z.shape[1] * z.shape[2];
        let mut out = Arr::zeros(&z.shape);
        for c in 0..channels {
            for i in 0..hw {
                let v = z.data[c * hw + i];
                let hi = ops::sigmoid(logit(c, v + 0.5, p).0);
                let lo = ops::sigmoid(logit(c, v - 0.5, p).0);
                out.data[c * hw + i] = -((hi - lo).max(ops::RATE_MASS_FLOOR)).log2();
            }
        }
        Ok(out)
    }

    /// Gradients of [`bits_fwd`] w.r.t. z and all eight parameter tensors.
    pub fn bits_backward(z: &Arr, p: &[&Arr], g: &[f64]) -> (Arr, Vec<Arr>) {
        let ln2 = std::f64::consts::LN_2;
        let channels = z.shape[0];
        let hw = z.shape[1] * z.shape[2];
        let mut gz = Arr::zeros(&z.shape);
        let mut gp: Vec<Arr> = p.iter().map(|a| Arr::zeros(&a.shape)).collect();
        for c in 0..channels {
            for i in 0..hw {
                let gi = g[c * hw + i];
                if gi == 0.0 {
                    continue;
                }
                let v = z.data[c * hw + i];
                let (lh, imh) = logit(c, v + 0.5, p);
                let (ll, iml) = logit(c, v - 0.5, p);
                let (sh, sl) = (ops::sigmoid(lh), ops::sigmoid(ll));
                let mass = sh - sl;
                if mass <= ops::RATE_MASS_FLOOR {
                    continue; // clamped: zero local gradient
                }
                let dm = -gi / (mass * ln2);
                let glh = dm * sh * (1.0 - sh);
                let gll = -dm * sl * (1.0 - sl);
                let gxh = logit_backward(c, v + 0.5, &imh, p, glh, &mut gp);
                let gxl = logit_backward(c, v - 0.5, &iml, p, gll, &mut gp);
                gz.data[c * hw + i] = gxh + gxl;
            }
        }
        (gz, gp)
    }
}

// ---------------------------------------------------------------------------
// Quantized CDF tables
// ---------------------------------------------------------------------------

/// Cumulative-count table at `precision` bits for symbols `min..=max`,
/// optionally followed by an escape symbol holding the tail mass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdfTable {
    /// cum[0] = 0, cum[num_symbols] = 1 << precision, strictly increasing.
    pub cum: Vec<u32>,
    pub precision: u32,
    pub min: i32,
    pub max: i32,
    pub escape: bool,
}

impl QuantizedCdfTable {
    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn total(&self) -> u32 {
        1u32 << self.precision
    }

    pub fn escape_index(&self) -> Option<usize> {
        self.escape.then(|| self.num_symbols() - 1)
    }

    /// Table index for a symbol value; out-of-range maps to the escape slot.
    pub fn symbol_index(&self, value: i32) -> usize {
        if value >= self.min && value <= self.max {
            (value - self.min) as usize
        } else {
            self.escape_index()
                .expect("out-of-range symbol with no escape slot")
        }
    }

    pub fn value_of(&self, index: usize) -> i32 {
        self.min + index as i32
    }

    pub fn count(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Symbol index whose interval `[cum[i], cum[i+1])` contains the target.
    pub fn lookup(&self, target: u32) -> usize {
        debug_assert!(target < self.total());
        match self.cum.binary_search(&target) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(12..=16).contains(&self.precision) {
            return Err(RdcError::InvalidArgument(format!(
                "cdf precision {} outside [12,16]",
                self.precision
            )));
        }
        if self.cum.first() != Some(&0) || self.cum.last() != Some(&self.total()) {
            return Err(RdcError::Data("cdf table endpoints invalid".into()));
        }
        for w in self.cum.windows(2) {
            if w[1] <= w[0] {
                return Err(RdcError::Data("cdf table not strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// Builds a quantized table from a continuous CDF over symbol boundaries
/// `min-0.5 .. max+0.5`. The CDF is quantized directly (so large interval
/// masses stay within one count of their ideal value) and then repaired to
/// give every symbol, including the escape slot, at least one count.
pub fn build_cdf_table(
    cdf: impl Fn(f64) -> f64,
    precision: u32,
    min: i32,
    max: i32,
    escape: bool,
) -> Result<QuantizedCdfTable> {
    if !(12..=16).contains(&precision) {
        return Err(RdcError::InvalidArgument(format!(
            "cdf precision {precision} outside [12,16]"
        )));
    }
    if max < min {
        return Err(RdcError::InvalidArgument("empty symbol range".into()));
    }
    let total = 1u64 << precision;
    let nsym = (max - min + 1) as usize + usize::from(escape);
    if (nsym as u64) >= total {
        return Err(RdcError::InvalidArgument(
            "symbol count exceeds table precision".into(),
        ));
    }
    let base = cdf(min as f64 - 0.5);
    let mut cum: Vec<u32> = Vec::with_capacity(nsym + 1);
    cum.push(0);
    for s in min..=max {
        let c = cdf(s as f64 + 0.5) - base;
        let q = (c * total as f64).round().clamp(0.0, total as f64) as u32;
        cum.push(q);
    }
    if escape {
        cum.push(total as u32);
    } else {
        *cum.last_mut().unwrap() = total as u32;
    }
    // Repair passes: strictly increasing with total preserved.
    for i in 1..cum.len() {
        if cum[i] <= cum[i - 1] {
            cum[i] = cum[i - 1] + 1;
        }
    }
    let last = cum.len() - 1;
    cum[last] = total as u32;
    for i in (1..cum.len()).rev() {
        if cum[i - 1] >= cum[i] {
            cum[i - 1] = cum[i] - 1;
        }
    }
    let table = QuantizedCdfTable {
        cum,
        precision,
        min,
        max,
        escape,
    };
    table.validate()?;
    Ok(table)
}

/// Table for mean-centered Gaussian residuals: intervals of N(0, sigma).
pub fn gaussian_cdf_table(
    sigma: f64,
    precision: u32,
    min: i32,
    max: i32,
    escape: bool,
) -> Result<QuantizedCdfTable> {
    let s = sigma.max(SIGMA_MIN);
    build_cdf_table(|x| ops::std_normal_cdf(x / s), precision, min, max, escape)
}
