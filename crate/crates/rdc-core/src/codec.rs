//! Encode/decode pipelines over real bitstreams, and the differentiable
//! training-time forward pass. Decode runs in two phases: all mask-0
//! positions in one parallel pass under hyperprior-only parameters, then
//! mask-1 positions serially in raster order with the masked-conv context.

use crate::arr::Arr;
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::ctx::{Ctx, PureCtx, TapeCtx};
use crate::entropy::{
    gaussian_cdf_table, quantize_residual, segment_index, QuantizedCdfTable, Y_SYMBOL_MAX,
    Y_SYMBOL_MIN, Z_SYMBOL_MAX, Z_SYMBOL_MIN,
};
use crate::error::{RdcError, Result};
use crate::mask::{
    build_schedule, compute_ce, handcrafted_mask, random_mask, sample_gumbel, ComplexityLevel,
    SpatialMask,
};
use crate::model::CodecModel;
use crate::ops;
use crate::tape::Id;
use rand::Rng;
use std::time::{Duration, Instant};

pub const STREAM_MAGIC: &[u8; 4] = b"RDC1";
pub const CDF_PRECISION: u32 = 16;

/// The distortion-multiplier models the coefficient table covers; the
/// stream header carries an index into this table.
pub const LAMBDA_TABLE: [u32; 6] = [192, 512, 768, 1024, 2048, 4096];

pub fn lambda_id(lambda_d: u32) -> Result<u8> {
    LAMBDA_TABLE
        .iter()
        .position(|&v| v == lambda_d)
        .map(|i| i as u8)
        .ok_or_else(|| {
            RdcError::InvalidArgument(format!(
                "lambda_d {lambda_d} is not one of {LAMBDA_TABLE:?}"
            ))
        })
}

pub fn lambda_from_id(id: u8) -> Result<u32> {
    LAMBDA_TABLE
        .get(id as usize)
        .copied()
        .ok_or_else(|| RdcError::Decode(format!("unknown lambda_d id {id}")))
}

/// How the decode-side mask is derived. Everything is recomputable from the
/// shared hyper latent, so no mask bits are ever transmitted; one mode byte
/// selects the rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Learned head f_m, deterministic argmax over (z_hat, l).
    Learned,
    /// Hyperprior-only pipeline: empty mask regardless of level.
    AllZero,
    /// Full autoregressive pipeline: complete mask regardless of level.
    AllOne,
    /// Entropy-ranked baseline at ce_target = l, from the expected
    /// hyperprior-only codelength map (a pure function of z_hat).
    Handcrafted,
}

impl MaskMode {
    pub fn to_byte(self) -> u8 {
        match self {
            MaskMode::Learned => 0,
            MaskMode::AllZero => 1,
            MaskMode::AllOne => 2,
            MaskMode::Handcrafted => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => MaskMode::Learned,
            1 => MaskMode::AllZero,
            2 => MaskMode::AllOne,
            3 => MaskMode::Handcrafted,
            other => return Err(RdcError::Decode(format!("unknown mask mode {other}"))),
        })
    }
}

/// Fixed-size bitstream header; see FORMAT.md for the byte layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub height: u16,
    pub width: u16,
    pub lambda_id: u8,
    pub level_byte: u8,
    pub mask_mode: u8,
    pub z_len: u32,
    pub y_len: u32,
}

pub const HEADER_LEN: usize = 19;

impl StreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(STREAM_MAGIC);
        b[4..6].copy_from_slice(&self.height.to_le_bytes());
        b[6..8].copy_from_slice(&self.width.to_le_bytes());
        b[8] = self.lambda_id;
        b[9] = self.level_byte;
        b[10] = self.mask_mode;
        b[11..15].copy_from_slice(&self.z_len.to_le_bytes());
        b[15..19].copy_from_slice(&self.y_len.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(RdcError::Decode("stream shorter than header".into()));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(RdcError::Decode("bad stream magic".into()));
        }
        let height = u16::from_le_bytes([bytes[4], bytes[5]]);
        let width = u16::from_le_bytes([bytes[6], bytes[7]]);
        if height == 0 || width == 0 {
            return Err(RdcError::Decode("zero image dimension".into()));
        }
        let z_len = u32::from_le_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]);
        let y_len = u32::from_le_bytes([bytes[15], bytes[16], bytes[17], bytes[18]]);
        Ok((
            StreamHeader {
                height,
                width,
                lambda_id: bytes[8],
                level_byte: bytes[9],
                mask_mode: bytes[10],
                z_len,
                y_len,
            },
            HEADER_LEN,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct DecodeStats {
    pub achieved_ce: f64,
    pub serial_steps: usize,
    pub t_total: Duration,
    pub t_entropy: Duration,
    pub t_network: Duration,
    pub bits_z: usize,
    pub bits_y: usize,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub mask: SpatialMask,
    pub y_hat: Arr,
    pub z_hat: Arr,
    pub bits_z: usize,
    pub bits_y: usize,
}

impl Encoded {
    /// Bits per source pixel (against the unpadded image dimensions).
    pub fn bpp(&self, height: usize, width: usize) -> f64 {
        (self.bytes.len() * 8) as f64 / (height * width) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: Arr,
    pub mask: SpatialMask,
    pub y_hat: Arr,
    pub z_hat: Arr,
    pub stats: DecodeStats,
}

/// Replicate-pad a [C,H,W] image on the bottom/right to multiples of `mult`.
pub fn pad_replicate(img: &Arr, mult: usize) -> Arr {
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let ph = h.div_ceil(mult) * mult;
    let pw = w.div_ceil(mult) * mult;
    if ph == h && pw == w {
        return img.clone();
    }
    let mut out = Arr::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let (sy, sx) = (y.min(h - 1), x.min(w - 1));
                out.data[(ch * ph + y) * pw + x] = img.data[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn crop(img: &Arr, h: usize, w: usize) -> Arr {
    let (c, ph, pw) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut out = Arr::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data[(ch * h + y) * w + x] = img.data[(ch * ph + y) * pw + x];
            }
        }
    }
    out
}

/// Realized bits per latent position when coding the encoder's residuals
/// under hyperprior-only parameters. This depends on the latent values
/// themselves, so only the encoder can compute it; streams whose mask is
/// ranked by this map must carry the mask explicitly.
pub fn hyperprior_rate_map(y_f: &Arr, mu0: &Arr, sigma0: &Arr) -> Arr {
    let (c, h, w) = (sigma0.shape[0], sigma0.shape[1], sigma0.shape[2]);
    let mut out = Arr::zeros(&[h, w]);
    for ch in 0..c {
        for i in 0..h * w {
            let idx = ch * h * w + i;
            let s = sigma0.data[idx];
            let r = quantize_residual(y_f.data[idx], mu0.data[idx]) as f64;
            let mass = ops::std_normal_cdf((r + 0.5) / s) - ops::std_normal_cdf((r - 0.5) / s);
            out.data[i] += -mass.max(1e-12).log2();
        }
    }
    out
}

/// z coding tables for the segment matching the wire-quantized level.
fn z_tables(model: &CodecModel, level: ComplexityLevel) -> Result<Vec<QuantizedCdfTable>> {
    let seg = segment_index(level.value())?;
    (0..model.arch.hyper)
        .map(|ch| model.priors[seg].cdf_table(ch, CDF_PRECISION))
        .collect()
}

fn derive_mask(
    model: &CodecModel,
    hyper_feat: &Arr,
    sigma0: &Arr,
    level: ComplexityLevel,
    mode: MaskMode,
) -> Result<SpatialMask> {
    match mode {
        MaskMode::Learned => {
            let mut c = PureCtx;
            let logits = model.mask_logits(&mut c, hyper_feat, level)?;
            let hw = logits.shape[1] * logits.shape[2];
            let grid = (0..hw)
                .map(|i| u8::from(logits.data[hw + i] > logits.data[i]))
                .collect();
            SpatialMask::from_grid(logits.shape[1], logits.shape[2], grid)
        }
        MaskMode::AllZero => Ok(SpatialMask::zeros(sigma0.shape[1], sigma0.shape[2])),
        MaskMode::AllOne => Ok(SpatialMask::ones(sigma0.shape[1], sigma0.shape[2])),
        // Ranked from the encoder's realized rates and carried in the
        // stream; built by the encoder, read back by the decoder.
        MaskMode::Handcrafted => Err(RdcError::InvalidArgument(
            "handcrafted masks are not derivable from shared state".into(),
        )),
    }
}

pub fn encode_image(
    model: &CodecModel,
    image: &Arr,
    level: ComplexityLevel,
    mode: MaskMode,
) -> Result<Encoded> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(RdcError::InvalidArgument(format!(
            "encode expects a [3,H,W] image, got {:?}",
            image.shape
        )));
    }
    let (orig_h, orig_w) = (image.shape[1], image.shape[2]);
    if orig_h > u16::MAX as usize || orig_w > u16::MAX as usize {
        return Err(RdcError::InvalidArgument("image dimension exceeds 65535".into()));
    }
    // The level is quantized to its wire form up front so the encoder
    // conditions on exactly what the decoder will read back.
    let level = ComplexityLevel::from_byte(level.to_byte());
    let x = pad_replicate(image, model.arch.total_downsample());

    let mut c = PureCtx;
    let y_f = model.analysis(&mut c, &x, level)?;
    let z_f = model.hyper_analysis(&mut c, &y_f, level)?;
    // `+ 0.0` canonicalizes round(-0.3) = -0.0 to the +0.0 the decoder
    // reconstructs from the integer symbol, keeping both sides bit-identical.
    let z_hat = z_f.map(|v| v.round().clamp(Z_SYMBOL_MIN as f64, Z_SYMBOL_MAX as f64) + 0.0);
    let hyper_feat = model.hyper_synthesis(&mut c, &z_hat)?;
    let zero_phi = Arr::zeros(&[2 * model.arch.latent, y_f.shape[1], y_f.shape[2]]);
    let (mu0, sigma0) = model.entropy_params(&mut c, &hyper_feat, &zero_phi)?;
    let mask = match mode {
        MaskMode::Handcrafted => {
            handcrafted_mask(&hyperprior_rate_map(&y_f, &mu0, &sigma0), level.value())?
        }
        _ => derive_mask(model, &hyper_feat, &sigma0, level, mode)?,
    };
    let schedule = build_schedule(&mask);

    // Hyper payload.
    let tables = z_tables(model, level)?;
    let (zc, zh, zw) = (z_hat.shape[0], z_hat.shape[1], z_hat.shape[2]);
    let mut enc_z = RangeEncoder::new();
    for ch in 0..zc {
        for i in 0..zh * zw {
            enc_z.encode(z_hat.data[ch * zh * zw + i] as i32, &tables[ch]);
        }
    }
    let z_bytes = enc_z.finish();

    // Main payload, in schedule order.
    let lat = model.arch.latent;
    let (lh, lw) = (y_f.shape[1], y_f.shape[2]);
    let mut y_hat = Arr::zeros(&y_f.shape);
    let mut enc_y = RangeEncoder::new();
    if mode == MaskMode::Handcrafted {
        // The handcrafted mask is a function of the encoder's latents, so
        // the decoder cannot reconstruct it; it rides at the head of the
        // main payload as one raw bit per latent cell.
        for &bit in &mask.grid {
            enc_y.encode_raw_bits(bit as u32, 1);
        }
    }
    let encode_pos = |enc: &mut RangeEncoder,
                          y_hat: &mut Arr,
                          py: usize,
                          px: usize,
                          mu: &[f64],
                          sigma: &[f64]|
     -> Result<()> {
        for ch in 0..lat {
            let idx = (ch * lh + py) * lw + px;
            let r = quantize_residual(y_f.data[idx], mu[ch]);
            let table =
                gaussian_cdf_table(sigma[ch], CDF_PRECISION, Y_SYMBOL_MIN, Y_SYMBOL_MAX, true)?;
            enc.encode(r, &table);
            y_hat.data[idx] = r as f64 + mu[ch];
        }
        Ok(())
    };

    let mut mu_col = vec![0.0; lat];
    let mut sg_col = vec![0.0; lat];
    for &(py, px) in &schedule.parallel_set {
        for ch in 0..lat {
            mu_col[ch] = mu0.data[(ch * lh + py) * lw + px];
            sg_col[ch] = sigma0.data[(ch * lh + py) * lw + px];
        }
        encode_pos(&mut enc_y, &mut y_hat, py, px, &mu_col, &sg_col)?;
    }
    let mut hyper_col = vec![0.0; 2 * lat];
    let mut phi_col = vec![0.0; 2 * lat];
    for &(py, px) in &schedule.serial_list {
        model.context_at(&y_hat, py, px, &mut phi_col);
        CodecModel::column(&hyper_feat, py, px, &mut hyper_col);
        model.entropy_params_at(&hyper_col, &phi_col, &mut mu_col, &mut sg_col);
        encode_pos(&mut enc_y, &mut y_hat, py, px, &mu_col, &sg_col)?;
    }
    let y_bytes = enc_y.finish();

    let header = StreamHeader {
        height: orig_h as u16,
        width: orig_w as u16,
        lambda_id: lambda_id(model.lambda_d)?,
        level_byte: level.to_byte(),
        mask_mode: mode.to_byte(),
        z_len: z_bytes.len() as u32,
        y_len: y_bytes.len() as u32,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + z_bytes.len() + y_bytes.len());
    bytes.extend_from_slice(&header.to_bytes());
    bytes.extend_from_slice(&z_bytes);
    bytes.extend_from_slice(&y_bytes);
    Ok(Encoded {
        bits_z: z_bytes.len() * 8,
        bits_y: y_bytes.len() * 8,
        bytes,
        mask,
        y_hat,
        z_hat,
    })
}

pub fn decode_image(model: &CodecModel, bytes: &[u8]) -> Result<Decoded> {
    let t_start = Instant::now();
    let mut t_entropy = Duration::ZERO;
    let mut t_network = Duration::ZERO;

    let (header, body_at) = StreamHeader::parse(bytes)?;
    if lambda_from_id(header.lambda_id)? != model.lambda_d {
        return Err(RdcError::ModelMismatch(format!(
            "stream lambda_d {} vs model {}",
            lambda_from_id(header.lambda_id)?,
            model.lambda_d
        )));
    }
    let level = ComplexityLevel::from_byte(header.level_byte);
    let mode = MaskMode::from_byte(header.mask_mode)?;
    let (z_len, y_len) = (header.z_len as usize, header.y_len as usize);
    if bytes.len() != body_at + z_len + y_len {
        return Err(RdcError::Decode(format!(
            "payload length mismatch: header says {} bytes, stream has {}",
            body_at + z_len + y_len,
            bytes.len()
        )));
    }
    let z_bytes = &bytes[body_at..body_at + z_len];
    let y_bytes = &bytes[body_at + z_len..];

    let td = model.arch.total_downsample();
    let ph = (header.height as usize).div_ceil(td) * td;
    let pw = (header.width as usize).div_ceil(td) * td;
    let hd = 1 << model.arch.hyper_layers;
    let (lh, lw) = (ph >> model.arch.main_layers, pw >> model.arch.main_layers);
    let (zh, zw) = (lh / hd, lw / hd);
    let lat = model.arch.latent;

    // Hyper payload.
    let te = Instant::now();
    let tables = z_tables(model, level)?;
    let mut dec_z = RangeDecoder::new(z_bytes)?;
    let mut z_hat = Arr::zeros(&[model.arch.hyper, zh, zw]);
    for ch in 0..model.arch.hyper {
        for i in 0..zh * zw {
            z_hat.data[ch * zh * zw + i] = dec_z.decode(&tables[ch])? as f64;
        }
    }
    dec_z.finish()?;
    t_entropy += te.elapsed();

    // Shared network passes.
    let tn = Instant::now();
    let mut c = PureCtx;
    let hyper_feat = model.hyper_synthesis(&mut c, &z_hat)?;
    let zero_phi = Arr::zeros(&[2 * lat, lh, lw]);
    let (mu0, sigma0) = model.entropy_params(&mut c, &hyper_feat, &zero_phi)?;
    let derived = match mode {
        MaskMode::Handcrafted => None,
        _ => Some(derive_mask(model, &hyper_feat, &sigma0, level, mode)?),
    };
    t_network += tn.elapsed();

    // Phase 1: parallel set under hyperprior-only parameters.
    let te = Instant::now();
    let mut dec_y = RangeDecoder::new(y_bytes)?;
    let mask = match derived {
        Some(m) => m,
        // Handcrafted masks are carried explicitly: one raw bit per
        // latent cell at the head of the main payload.
        None => {
            let mut grid = vec![0u8; lh * lw];
            for g in &mut grid {
                *g = dec_y.decode_raw_bits(1)? as u8;
            }
            SpatialMask::from_grid(lh, lw, grid)?
        }
    };
    let schedule = build_schedule(&mask);
    let mut y_hat = Arr::zeros(&[lat, lh, lw]);
    let decode_pos = |dec: &mut RangeDecoder,
                          y_hat: &mut Arr,
                          py: usize,
                          px: usize,
                          mu: &[f64],
                          sigma: &[f64]|
     -> Result<()> {
        for ch in 0..lat {
            let table =
                gaussian_cdf_table(sigma[ch], CDF_PRECISION, Y_SYMBOL_MIN, Y_SYMBOL_MAX, true)?;
            let r = dec.decode(&table)?;
            y_hat.data[(ch * lh + py) * lw + px] = r as f64 + mu[ch];
        }
        Ok(())
    };
    let mut mu_col = vec![0.0; lat];
    let mut sg_col = vec![0.0; lat];
    for &(py, px) in &schedule.parallel_set {
        for ch in 0..lat {
            mu_col[ch] = mu0.data[(ch * lh + py) * lw + px];
            sg_col[ch] = sigma0.data[(ch * lh + py) * lw + px];
        }
        decode_pos(&mut dec_y, &mut y_hat, py, px, &mu_col, &sg_col)?;
    }
    // Phase 2: serial raster walk with masked-conv context.
    let mut hyper_col = vec![0.0; 2 * lat];
    let mut phi_col = vec![0.0; 2 * lat];
    for &(py, px) in &schedule.serial_list {
        model.context_at(&y_hat, py, px, &mut phi_col);
        CodecModel::column(&hyper_feat, py, px, &mut hyper_col);
        model.entropy_params_at(&hyper_col, &phi_col, &mut mu_col, &mut sg_col);
        decode_pos(&mut dec_y, &mut y_hat, py, px, &mu_col, &sg_col)?;
    }
    dec_y.finish()?;
    t_entropy += te.elapsed();

    // Synthesis.
    let tn = Instant::now();
    let w_hat = model.condition_from_zhat(&mut c, &z_hat)?;
    let recon = model.synthesis(&mut c, &y_hat, &w_hat)?;
    let image = crop(&recon, header.height as usize, header.width as usize)
        .map(|v| v.clamp(0.0, 1.0));
    t_network += tn.elapsed();

    let stats = DecodeStats {
        achieved_ce: compute_ce(&mask),
        serial_steps: schedule.serial_list.len(),
        t_total: t_start.elapsed(),
        t_entropy,
        t_network,
        bits_z: z_len * 8,
        bits_y: y_len * 8,
    };
    Ok(Decoded {
        image,
        mask,
        y_hat,
        z_hat,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Training forward
// ---------------------------------------------------------------------------

/// Mask source for the training forward pass.
#[derive(Debug, Clone, Copy)]
pub enum TrainMaskSource {
    /// Stage 1: exact-count random mask at the given ratio.
    Random { ratio: f64 },
    /// Stage 2: learned head with Gumbel-softmax at the given temperature.
    Learned { temperature: f64 },
}

/// Tape handles produced by [`forward_train`]; the caller assembles the
/// stage loss from these.
pub struct TrainForward {
    /// Per-element bits of the noisy main latent, [latent,h,w].
    pub rate_y_map: Id,
    /// Per-element bits of the noisy hyper latent, [hyper,zh,zw].
    pub rate_z_map: Id,
    /// Per-pixel squared error in the [0,1] domain, [3,H,W].
    pub sq_err: Id,
    /// Scalar differentiable C_e (constant for random masks).
    pub soft_ce: Id,
    /// Applied mask as a [1,h,w] tape handle: a constant for random masks,
    /// the straight-through hard sample for learned masks. Loss terms that
    /// depend on the mask must be built through this handle so the estimator
    /// sees every use of it.
    pub gate: Id,
    /// Hard mask actually applied in the forward pass.
    pub mask: SpatialMask,
}

pub fn forward_train(
    model: &CodecModel,
    c: &mut TapeCtx,
    image: &Arr,
    level: ComplexityLevel,
    source: TrainMaskSource,
    rng: &mut impl Rng,
) -> Result<TrainForward> {
    let td = model.arch.total_downsample();
    if image.shape.len() != 3
        || image.shape[0] != 3
        || image.shape[1] % td != 0
        || image.shape[2] % td != 0
    {
        return Err(RdcError::InvalidArgument(format!(
            "training crops must be [3,H,W] with H,W divisible by {td}, got {:?}",
            image.shape
        )));
    }
    let lat = model.arch.latent;
    let x = c.constant(image.clone());
    let y_f = model.analysis(c, &x, level)?;
    let z_f = model.hyper_analysis(c, &y_f, level)?;

    // Additive-noise quantization relaxation.
    let z_shape = c.shape(&z_f);
    let z_noise = c.constant(uniform_noise(&z_shape, rng));
    let z_t = c.add(&z_f, &z_noise)?;
    let y_shape = c.shape(&y_f);
    let y_noise = c.constant(uniform_noise(&y_shape, rng));
    let y_t = c.add(&y_f, &y_noise)?;

    let seg = segment_index(level.value())?;
    let prior = &model.priors[seg];
    let mut param_ids = [0usize; 8];
    for (i, (name, arr)) in crate::entropy::FACTORIZED_PARAM_NAMES
        .iter()
        .zip(&prior.params)
        .enumerate()
    {
        param_ids[i] = c.param(&format!("prior.{seg}.{name}"), arr);
    }
    let rate_z_map = c.tape.factorized_bits(z_t, param_ids)?;

    let hyper_feat = model.hyper_synthesis(c, &z_t)?;
    let (lh, lw) = (y_shape[1], y_shape[2]);

    let (gate, soft_ce, mask) = match source {
        TrainMaskSource::Random { ratio } => {
            let mask = random_mask(lh, lw, ratio, rng)?;
            let mut plane = mask.to_plane();
            plane.shape = vec![1, lh, lw];
            let gate = c.constant(plane);
            let ce = c.constant(Arr::scalar(compute_ce(&mask)));
            (gate, ce, mask)
        }
        TrainMaskSource::Learned { temperature } => {
            if temperature <= 0.0 {
                return Err(RdcError::InvalidArgument(
                    "gumbel temperature must be positive".into(),
                ));
            }
            let logits = model.mask_logits(c, &hyper_feat, level)?;
            let noise = c.constant(sample_gumbel(&[2, lh, lw], rng));
            let shifted = c.add(&logits, &noise)?;
            let scaled = c.scale(&shifted, 1.0 / temperature);
            let probs = c.tape.softmax2(scaled)?;
            let soft1 = c.slice_ch(&probs, 1, 2)?;
            let hard = c.tape.st_hard(soft1);
            let ce = c.tape.mean(soft1);
            let mask = SpatialMask::from_plane(c.tape.value(hard))?;
            (hard, ce, mask)
        }
    };

    // Context gated to zero at mask-0 positions, then entropy parameters.
    let phi = model.context_full(c, &y_t)?;
    let gate_b = c.broadcast_ch(&gate, 2 * lat)?;
    let phi_g = c.mul(&phi, &gate_b)?;
    let (mu, sigma) = model.entropy_params(c, &hyper_feat, &phi_g)?;
    let rate_y_map = c.tape.gaussian_rate(y_t, mu, sigma)?;

    // Reconstruction.
    let w_hat = model.condition_from_zhat(c, &z_t)?;
    let x_hat = model.synthesis(c, &y_t, &w_hat)?;
    let diff = c.sub(&x_hat, &x)?;
    let sq_err = c.mul(&diff, &diff)?;

    Ok(TrainForward {
        rate_y_map,
        rate_z_map,
        sq_err,
        soft_ce,
        gate,
        mask,
    })
}

fn uniform_noise(shape: &[usize], rng: &mut impl Rng) -> Arr {
    let n: usize = shape.iter().product();
    Arr {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    }
}
