//! Spatial complexity masks: C_e accounting, the two-phase decode schedule,
//! and the three mask sources (random, Gumbel-softmax learned, handcrafted
//! entropy-ranked).

use crate::arr::Arr;
use crate::error::{RdcError, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Binary H x W grid; a one marks a position entropy-coded with
/// autoregressive context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    pub h: usize,
    pub w: usize,
    pub grid: Vec<u8>,
}

impl SpatialMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        SpatialMask {
            h,
            w,
            grid: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        SpatialMask {
            h,
            w,
            grid: vec![1; h * w],
        }
    }

    pub fn from_grid(h: usize, w: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != h * w {
            return Err(RdcError::InvalidArgument("mask grid size mismatch".into()));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(RdcError::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(SpatialMask { h, w, grid })
    }

    /// Binarize a real-valued plane at 0.5.
    pub fn from_plane(plane: &Arr) -> Result<Self> {
        let (h, w) = match plane.shape.as_slice() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            other => {
                return Err(RdcError::InvalidArgument(format!(
                    "mask plane must be [H,W], got {other:?}"
                )))
            }
        };
        Ok(SpatialMask {
            h,
            w,
            grid: plane.data.iter().map(|&v| u8::from(v > 0.5)).collect(),
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn to_plane(&self) -> Arr {
        Arr {
            shape: vec![self.h, self.w],
            data: self.grid.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Fraction of positions using autoregressive context: sum(M) / (H*W).
pub fn compute_ce(mask: &SpatialMask) -> f64 {
    mask.count_ones() as f64 / (mask.h * mask.w) as f64
}

/// Differentiable C_e on soft mask probabilities: the plain mean. Equals
/// [`compute_ce`] when the probabilities are binary.
pub fn soft_ce(probs: &Arr) -> f64 {
    probs.data.iter().sum::<f64>() / probs.len() as f64
}

/// Two-phase decode order: all mask-0 positions in one parallel set, then
/// mask-1 positions serially in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    /// Raster-sorted (y, x) positions decoded in the parallel phase.
    pub parallel_set: Vec<(usize, usize)>,
    /// Raster-sorted (y, x) positions decoded serially.
    pub serial_list: Vec<(usize, usize)>,
}

pub fn build_schedule(mask: &SpatialMask) -> DecodeSchedule {
    let mut parallel_set = Vec::new();
    let mut serial_list = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) == 1 {
                serial_list.push((y, x));
            } else {
                parallel_set.push((y, x));
            }
        }
    }
    DecodeSchedule {
        parallel_set,
        serial_list,
    }
}

/// Complexity level l in [0,1], carried on the wire as 8-bit fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityLevel(f64);

impl ComplexityLevel {
    pub fn new(l: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&l) || !l.is_finite() {
            return Err(RdcError::InvalidArgument(format!(
                "complexity level {l} outside [0,1]"
            )));
        }
        Ok(ComplexityLevel(l))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_byte(self) -> u8 {
        (self.0 * 255.0).round() as u8
    }

    pub fn from_byte(b: u8) -> Self {
        ComplexityLevel(f64::from(b) / 255.0)
    }
}

/// Exactly round(ratio * h * w) ones placed uniformly at random.
pub fn random_mask(h: usize, w: usize, ratio: f64, rng: &mut impl Rng) -> Result<SpatialMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(RdcError::InvalidArgument(format!(
            "mask ratio {ratio} outside [0,1]"
        )));
    }
    let n = h * w;
    let ones = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut grid = vec![0u8; n];
    for &i in idx.iter().take(ones) {
        grid[i] = 1;
    }
    Ok(SpatialMask { h, w, grid })
}

/// Standard Gumbel(0,1) noise plane.
pub fn sample_gumbel(shape: &[usize], rng: &mut impl Rng) -> Arr {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Arr {
        shape: shape.to_vec(),
        data,
    }
}

/// Gumbel-softmax relaxation of a binary mask from [2,H,W] class logits
/// (class 1 = use context). Returns the class-1 soft probabilities and the
/// argmax sample; with `hard`, the forward value is the binary mask while
/// gradients (in the taped training path) flow through the soft value.
pub fn gumbel_binary(
    logits: &Arr,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(Arr, SpatialMask)> {
    if logits.shape.len() != 3 || logits.shape[0] != 2 {
        return Err(RdcError::InvalidArgument(format!(
            "gumbel_binary expects [2,H,W] logits, got {:?}",
            logits.shape
        )));
    }
    if temperature <= 0.0 {
        return Err(RdcError::InvalidArgument(
            "gumbel temperature must be positive".into(),
        ));
    }
    let (h, w) = (logits.shape[1], logits.shape[2]);
    let hw = h * w;
    let noise = sample_gumbel(&[2, h, w], rng);
    let mut soft = Arr::zeros(&[h, w]);
    let mut grid = vec![0u8; hw];
    for i in 0..hw {
        let p0 = (logits.data[i] + noise.data[i]) / temperature;
        let p1 = (logits.data[hw + i] + noise.data[hw + i]) / temperature;
        let m = p0.max(p1);
        let (e0, e1) = ((p0 - m).exp(), (p1 - m).exp());
        soft.data[i] = e1 / (e0 + e1);
        grid[i] = u8::from(p1 > p0);
    }
    Ok((soft, SpatialMask { h, w, grid }))
}

/// Ones at the ceil(ce_target * H * W) highest-entropy positions, ties
/// broken toward earlier raster positions. Rank-based, so invariant under
/// strictly monotone transforms of the rates.
pub fn handcrafted_mask(hyper_rates: &Arr, ce_target: f64) -> Result<SpatialMask> {
    let (h, w) = match hyper_rates.shape.as_slice() {
        [h, w] => (*h, *w),
        other => {
            return Err(RdcError::InvalidArgument(format!(
                "hyper_rates must be [H,W], got {other:?}"
            )))
        }
    };
    if !(0.0..=1.0).contains(&ce_target) {
        return Err(RdcError::InvalidArgument(format!(
            "ce_target {ce_target} outside [0,1]"
        )));
    }
    let n = h * w;
    let ones = ((ce_target * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        hyper_rates.data[b]
            .partial_cmp(&hyper_rates.data[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut grid = vec![0u8; n];
    for &i in order.iter().take(ones) {
        grid[i] = 1;
    }
    Ok(SpatialMask { h, w, grid })
}
