//! Two-stage training: a hyperprior-only warm start, random-mask
//! pretraining with the pixel-wise lambda map, then mask-head learning under
//! the rate–distortion–complexity loss with frozen main transforms.

use crate::arr::Arr;
use crate::codec::{forward_train, TrainForward, TrainMaskSource};
use crate::corpus::LabeledImage;
use crate::ctx::{Ctx, TapeCtx};
use crate::error::{RdcError, Result};
use crate::mask::{ComplexityLevel, SpatialMask};
use crate::model::{stage2_frozen, ArchConfig, CodecModel};
use crate::tape::{Id, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Appendix coefficient rows of F(l) = (a + b·l + c·l² + d·l³ + e·l⁴)/256.
pub const LAMBDA_C_COEFFS: [(u32, [f64; 5]); 6] = [
    (192, [15.0, 68.4, 126.6, 100.4, 27.3]),
    (512, [20.0, 109.0, 250.5, 249.0, 87.5]),
    (768, [24.9, 145.8, 343.3, 336.4, 113.5]),
    (1024, [25.0, 140.8, 336.0, 344.6, 124.2]),
    (2048, [35.0, 181.0, 400.2, 388.4, 133.9]),
    (4096, [39.8, 242.2, 625.9, 684.2, 260.5]),
];

/// F(l) for the given distortion multiplier.
pub fn lambda_c(l: f64, lambda_d: u32) -> Result<f64> {
    let row = LAMBDA_C_COEFFS
        .iter()
        .find(|(ld, _)| *ld == lambda_d)
        .map(|(_, c)| c)
        .ok_or_else(|| {
            RdcError::InvalidArgument(format!("no F(l) coefficients for lambda_d {lambda_d}"))
        })?;
    let [a, b, c, d, e] = *row;
    Ok((a + b * l + c * l * l + d * l * l * l + e * l * l * l * l) / 256.0)
}

/// Pixel-wise distortion multiplier: nearest-neighbor upscale of the mask by
/// `factor`, then lambda_d at mask-0 pixels and lambda_d·s at mask-1 pixels.
pub fn lambda_map(mask: &SpatialMask, lambda_d: f64, s: f64, factor: usize) -> Arr {
    let (h, w) = (mask.h * factor, mask.w * factor);
    let mut out = Arr::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let m = mask.get(y / factor, x / factor);
            out.data[y * w + x] = if m == 1 { lambda_d * s } else { lambda_d };
        }
    }
    out
}

/// Loss terms of one step, as tape handles plus their values.
pub struct StageLoss {
    pub total: Id,
    pub terms: RdcLossTerms,
}

#[derive(Debug, Clone, Copy)]
pub struct RdcLossTerms {
    pub rate_bpp: f64,
    pub weighted_distortion: f64,
    pub complexity: f64,
    pub total: f64,
}

/// Rate (bits/pixel) + pixel-wise weighted distortion [+ lambda_c · soft C_e].
///
/// Distortion is mean squared error in 255-scale divided by 255², i.e. the
/// [0,1]-domain squared error, weighted per pixel by lambda_d at mask-0
/// blocks and lambda_d·s at mask-1 blocks (the per-pixel weight map that
/// [`lambda_map`] describes). The weighting is assembled on the tape through
/// `fwd.gate` rather than baked in as a constant: the straight-through
/// estimator must see the distortion-weight dependence on the mask, otherwise
/// the only consistent gradient on the mask head is the complexity penalty
/// and the head collapses to all-zero at every level.
pub fn stage_loss(
    c: &mut TapeCtx,
    fwd: &TrainForward,
    lambda_d: f64,
    s: f64,
    lambda_c_value: f64,
) -> Result<StageLoss> {
    let sq_shape = c.shape(&fwd.sq_err).to_vec();
    let (ch, h, w) = (sq_shape[0], sq_shape[1], sq_shape[2]);
    let gate_shape = c.shape(&fwd.gate).to_vec();
    let (mh, mw) = (gate_shape[1], gate_shape[2]);
    if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 || h / mh != w / mw {
        return Err(RdcError::ShapeMismatch {
            context: "stage_loss mask vs distortion grid".into(),
            lhs: gate_shape,
            rhs: sq_shape,
        });
    }
    let factor = h / mh;
    let n_pix = (h * w) as f64;
    let rate_y = c.tape.sum(fwd.rate_y_map);
    let rate_z = c.tape.sum(fwd.rate_z_map);
    let rate_bits = c.add(&rate_y, &rate_z)?;
    let rate_bpp = c.scale(&rate_bits, 1.0 / n_pix);

    // Squared error summed over channels and over each factor×factor block,
    // down to the mask grid; the per-block weight is then
    // lambda_d + (s-1)·lambda_d·mask.
    let ch_ones = c.constant(Arr::from_vec(&[1, ch, 1, 1], vec![1.0; ch])?);
    let blk_ones = c.constant(Arr::from_vec(
        &[1, 1, factor, factor],
        vec![1.0; factor * factor],
    )?);
    let zero_bias = c.constant(Arr::zeros(&[1]));
    let per_pix = c.tape.conv2d(fwd.sq_err, ch_ones, zero_bias, 1, 0)?;
    let per_blk = c.tape.conv2d(per_pix, blk_ones, zero_bias, factor, 0)?;
    let base = c.tape.sum(per_blk);
    let gated = c.mul(&per_blk, &fwd.gate)?;
    let reduction = c.tape.sum(gated);
    let base_w = c.scale(&base, lambda_d);
    let red_w = c.scale(&reduction, (s - 1.0) * lambda_d);
    let wsum = c.add(&base_w, &red_w)?;
    let wd = c.scale(&wsum, 1.0 / (ch as f64 * n_pix));

    let comp = c.scale(&fwd.soft_ce, lambda_c_value);
    let rd = c.add(&rate_bpp, &wd)?;
    let total = c.add(&rd, &comp)?;

    let terms = RdcLossTerms {
        rate_bpp: c.tape.value(rate_bpp).data[0],
        weighted_distortion: c.tape.value(wd).data[0],
        complexity: c.tape.value(comp).data[0],
        total: c.tape.value(total).data[0],
    };
    Ok(StageLoss { total, terms })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the named gradients; parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, model: &mut CodecModel, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        model.visit_mut(&mut |name, arr| {
            let Some(g) = grads.get(name) else { return };
            debug_assert_eq!(g.len(), arr.len());
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                arr.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        });
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.lr.to_le_bytes());
        b.extend_from_slice(&self.t.to_le_bytes());
        b.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (k, m) in &self.m {
            let v = &self.v[k];
            b.extend_from_slice(&(k.len() as u16).to_le_bytes());
            b.extend_from_slice(k.as_bytes());
            b.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for &x in m {
                b.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    fn from_bytes(r: &mut ByteReader) -> Result<Self> {
        let lr = r.f64()?;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        let mut adam = Adam::new(lr);
        adam.t = t;
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = String::from_utf8(r.bytes(klen)?.to_vec())
                .map_err(|_| RdcError::Data("bad optimizer key".into()))?;
            let n = r.u32()? as usize;
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(r.f64()?);
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.f64()?);
            }
            adam.m.insert(key.clone(), m);
            adam.v.insert(key, v);
        }
        Ok(adam)
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_d: u32,
    /// Distortion discount on mask-1 pixels (Eq. 10 scale factor).
    pub s: f64,
    pub arch: ArchConfig,
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    /// Learning rate after 2/3 of each stage.
    pub lr_late: f64,
    pub batch: usize,
    pub crop: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale default schedule.
    pub fn desk(lambda_d: u32) -> Self {
        TrainConfig {
            lambda_d,
            s: 0.9,
            arch: ArchConfig::desk(),
            stage0_steps: 5000,
            stage1_steps: 15000,
            stage2_steps: 6000,
            lr: 5e-5,
            lr_late: 1e-5,
            batch: 4,
            crop: 128,
            tau_start: 1.0,
            tau_end: 0.5,
            seed: 0,
        }
    }

    /// Short schedule for tests and the acceptance runs.
    pub fn toy(lambda_d: u32) -> Self {
        TrainConfig {
            lambda_d,
            s: 0.9,
            arch: ArchConfig::toy(),
            stage0_steps: 200,
            stage1_steps: 400,
            stage2_steps: 300,
            lr: 1e-3,
            lr_late: 3e-4,
            batch: 1,
            crop: 64,
            tau_start: 1.0,
            tau_end: 0.5,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage0_steps + self.stage1_steps + self.stage2_steps
    }

    fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(RdcError::InvalidArgument("s must be positive".into()));
        }
        lambda_c(0.0, self.lambda_d)?;
        if self.crop % self.arch.total_downsample() != 0 {
            return Err(RdcError::InvalidArgument(format!(
                "crop {} not divisible by {}",
                self.crop,
                self.arch.total_downsample()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub terms: RdcLossTerms,
    pub hard_ce: f64,
    pub level: f64,
    pub lambda_c: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: CodecModel,
    pub opt: Adam,
    pub rng: ChaCha12Rng,
    pub step: usize,
}

const CKPT_MAGIC: &[u8; 4] = b"RDCK";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CodecModel::init(config.arch, config.lambda_d, config.seed);
        let opt = Adam::new(config.lr);
        let rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
        Ok(Trainer {
            config,
            model,
            opt,
            rng,
            step: 0,
        })
    }

    fn stage_of(&self, step: usize) -> (u8, usize, usize) {
        let c = &self.config;
        if step < c.stage0_steps {
            (0, step, c.stage0_steps)
        } else if step < c.stage0_steps + c.stage1_steps {
            (1, step - c.stage0_steps, c.stage1_steps)
        } else {
            (2, step - c.stage0_steps - c.stage1_steps, c.stage2_steps)
        }
    }

    fn crop_image(&mut self, corpus: &[LabeledImage]) -> Arr {
        let idx = self.rng.gen_range(0..corpus.len());
        let img = &corpus[idx].image;
        let (h, w) = (img.shape[1], img.shape[2]);
        let cs = self.config.crop;
        let y0 = if h > cs { self.rng.gen_range(0..=h - cs) } else { 0 };
        let x0 = if w > cs { self.rng.gen_range(0..=w - cs) } else { 0 };
        let mut out = Arr::zeros(&[3, cs, cs]);
        for c in 0..3 {
            for y in 0..cs {
                for x in 0..cs {
                    out.data[(c * cs + y) * cs + x] = img.data[(c * h + y0 + y) * w + x0 + x];
                }
            }
        }
        out
    }

    /// One optimizer step. On a non-finite loss the model is left at its
    /// last good state and an error is returned.
    pub fn step_once(&mut self, corpus: &[LabeledImage]) -> Result<LogRow> {
        if corpus.is_empty() {
            return Err(RdcError::Data("empty training corpus".into()));
        }
        let (stage, in_stage, stage_len) = self.stage_of(self.step);
        let lr = if in_stage * 3 < stage_len * 2 {
            self.config.lr
        } else {
            self.config.lr_late
        };
        self.opt.lr = lr;

        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut terms_acc = RdcLossTerms {
            rate_bpp: 0.0,
            weighted_distortion: 0.0,
            complexity: 0.0,
            total: 0.0,
        };
        let mut hard_ce = 0.0;
        let mut level_acc = 0.0;
        let mut lc_acc = 0.0;
        let batch = self.config.batch.max(1);
        for _ in 0..batch {
            let crop = self.crop_image(corpus);
            // Per-stage sampling.
            let (level, source, lc_value) = match stage {
                0 => (ComplexityLevel::new(0.0)?, TrainMaskSource::Random { ratio: 0.0 }, 0.0),
                1 => {
                    let ratio: f64 = self.rng.gen_range(0.0..=1.0);
                    (
                        ComplexityLevel::new(ratio)?,
                        TrainMaskSource::Random { ratio },
                        0.0,
                    )
                }
                _ => {
                    let l: f64 = self.rng.gen_range(0.0..=1.0);
                    let frac = in_stage as f64 / stage_len.max(1) as f64;
                    let tau = self.config.tau_start
                        + (self.config.tau_end - self.config.tau_start) * frac;
                    // The requested level l asks for MORE context as it
                    // grows, so the complexity penalty applied at l is the
                    // appendix curve evaluated at 1-l: level 1 is nearly
                    // unpenalized (full context), level 0 pays the maximum
                    // penalty and drives C_e toward zero.
                    let lc = lambda_c(1.0 - l, self.config.lambda_d)?;
                    (
                        ComplexityLevel::new(l)?,
                        TrainMaskSource::Learned { temperature: tau },
                        lc,
                    )
                }
            };

            let mut tape = Tape::new();
            let mut c = if stage == 2 {
                TapeCtx::with_freeze(&mut tape, stage2_frozen)
            } else {
                TapeCtx::new(&mut tape)
            };
            let fwd = forward_train(&self.model, &mut c, &crop, level, source, &mut self.rng)?;
            let loss = stage_loss(
                &mut c,
                &fwd,
                self.config.lambda_d as f64,
                self.config.s,
                lc_value,
            )?;
            if !loss.terms.total.is_finite() {
                return Err(RdcError::NonFinite(format!(
                    "training loss non-finite at step {} (model left at last good state)",
                    self.step
                )));
            }
            c.tape.backward(loss.total)?;
            for (key, &id) in &c.params {
                if let Some(g) = c.tape.grad(id) {
                    if stage == 2 {
                        assert!(
                            !stage2_frozen(key),
                            "gradient reached frozen parameter {key}"
                        );
                    }
                    let entry = grads
                        .entry(key.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (e, &gv) in entry.iter_mut().zip(g) {
                        *e += gv / batch as f64;
                    }
                }
            }
            terms_acc.rate_bpp += loss.terms.rate_bpp / batch as f64;
            terms_acc.weighted_distortion += loss.terms.weighted_distortion / batch as f64;
            terms_acc.complexity += loss.terms.complexity / batch as f64;
            terms_acc.total += loss.terms.total / batch as f64;
            hard_ce += crate::mask::compute_ce(&fwd.mask) / batch as f64;
            level_acc += level.value() / batch as f64;
            lc_acc += lc_value / batch as f64;
        }

        self.opt.step(&mut self.model, &grads);
        let row = LogRow {
            step: self.step,
            stage,
            terms: terms_acc,
            hard_ce,
            level: level_acc,
            lambda_c: lc_acc,
            lr,
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs all remaining steps, appending to `log`.
    pub fn run(&mut self, corpus: &[LabeledImage], log: &mut Vec<LogRow>) -> Result<()> {
        while self.step < self.config.total_steps() {
            log.push(self.step_once(corpus)?);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let model_bytes = self.model.to_bytes();
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&self.rng.get_seed());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let opt_bytes = self.opt.to_bytes();
        b.extend_from_slice(&(opt_bytes.len() as u64).to_le_bytes());
        b.extend_from_slice(&opt_bytes);
        b.extend_from_slice(&(model_bytes.len() as u64).to_le_bytes());
        b.extend_from_slice(&model_bytes);
        std::fs::File::create(path)?.write_all(&b)?;
        Ok(())
    }

    pub fn load_checkpoint(config: TrainConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes);
        if r.bytes(4)? != CKPT_MAGIC {
            return Err(RdcError::Data("bad checkpoint magic".into()));
        }
        let step = r.u64()? as usize;
        let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.bytes(16)?.try_into().unwrap());
        let opt_len = r.u64()? as usize;
        let mut opt_reader = ByteReader::new(r.bytes(opt_len)?);
        let opt = Adam::from_bytes(&mut opt_reader)?;
        let model_len = r.u64()? as usize;
        let model = CodecModel::from_bytes(r.bytes(model_len)?)?;
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        Ok(Trainer {
            config,
            model,
            opt,
            rng,
            step,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RdcError::Data("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}
