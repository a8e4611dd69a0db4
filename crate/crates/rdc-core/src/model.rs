//! Codec model: transforms, hyper path, context model, entropy parameter
//! network, mask head, condition generator, and the per-segment factorized
//! priors, together with the model-file serialization.

use crate::arr::Arr;
use crate::ctx::{Ctx, PureCtx};
use crate::entropy::{FactorizedPrior, FACTORIZED_PARAM_NAMES, NUM_SEGMENTS, SIGMA_MIN};
use crate::error::{RdcError, Result};
use crate::layers::{broadcast_level, Conv, Deconv, SftBlock};
use crate::mask::ComplexityLevel;
use crate::ops;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CONTEXT_KERNEL: usize = 5;
const MODEL_MAGIC: &[u8; 4] = b"RDCM";
const MODEL_VERSION: u32 = 1;

/// Mask-head initialization: the class-1 logit starts at
/// `LEVEL_GAIN * l + LEVEL_BIAS`, so the untrained head already follows the
/// requested complexity budget.
pub const LEVEL_GAIN: f64 = 12.0;
pub const LEVEL_BIAS: f64 = -6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Width of the intermediate main-transform features.
    pub width: usize,
    /// Main latent channels.
    pub latent: usize,
    /// Hyper latent channels.
    pub hyper: usize,
    /// Mask-head width.
    pub mask_width: usize,
    /// Stride-2 conv count in the main transform (downsample 2^n).
    pub main_layers: usize,
    /// Stride-2 conv count in the hyper transform.
    pub hyper_layers: usize,
}

impl ArchConfig {
    /// Desk-scale default: a uniform shrink of the full-scale topology.
    pub fn desk() -> Self {
        ArchConfig {
            width: 32,
            latent: 48,
            hyper: 32,
            mask_width: 32,
            main_layers: 4,
            hyper_layers: 2,
        }
    }

    /// Small config for fast training experiments and the acceptance runs.
    pub fn toy() -> Self {
        ArchConfig {
            width: 16,
            latent: 24,
            hyper: 16,
            mask_width: 16,
            main_layers: 4,
            hyper_layers: 2,
        }
    }

    /// Minimal config for gradient checks on small crops.
    pub fn tiny() -> Self {
        ArchConfig {
            width: 4,
            latent: 6,
            hyper: 4,
            mask_width: 4,
            main_layers: 2,
            hyper_layers: 2,
        }
    }

    /// Image-to-latent downsample factor.
    pub fn downsample(&self) -> usize {
        1 << self.main_layers
    }

    /// Image-to-hyper-latent downsample factor; images are padded to a
    /// multiple of this.
    pub fn total_downsample(&self) -> usize {
        1 << (self.main_layers + self.hyper_layers)
    }
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub arch: ArchConfig,
    /// Distortion multiplier this model was trained for.
    pub lambda_d: u32,
    pub enc: Vec<Conv>,
    pub ga_sft: SftBlock,
    pub ha_sft: SftBlock,
    pub h_enc: Vec<Conv>,
    pub h_dec: Vec<Deconv>,
    pub ctx_conv: Conv,
    /// Type-A kernel mask for the context conv; fixed, not a parameter.
    pub ctx_kernel_mask: Arr,
    pub ep1: Conv,
    pub ep2: Conv,
    pub fm1: Conv,
    pub fm2: Conv,
    pub fm_head: Conv,
    pub fc: Vec<Deconv>,
    pub gs_sft: SftBlock,
    pub dec: Vec<Deconv>,
    pub priors: Vec<FactorizedPrior>,
}

impl CodecModel {
    pub fn init(arch: ArchConfig, lambda_d: u32, seed: u64) -> Self {
        let rng = &mut ChaCha12Rng::seed_from_u64(seed);
        let (w, lat, hy, mw) = (arch.width, arch.latent, arch.hyper, arch.mask_width);
        let l = arch.main_layers;

        let mut enc = Vec::new();
        for i in 0..l {
            let cin = if i == 0 { 3 } else { w };
            let cout = if i == l - 1 { lat } else { w };
            enc.push(Conv::new(&format!("enc.{i}"), cin, cout, 5, 2, rng));
        }
        let ga_sft = SftBlock::new("ga_sft", 1, w, mw, rng);
        let ha_sft = SftBlock::new("ha_sft", 1, lat, mw, rng);

        let mut h_enc = Vec::new();
        for i in 0..arch.hyper_layers {
            let cin = if i == 0 { lat } else { hy };
            let k = if i == 0 { 5 } else { 3 };
            h_enc.push(Conv::new(&format!("h_enc.{i}"), cin, hy, k, 2, rng));
        }
        let mut h_dec = Vec::new();
        for i in 0..arch.hyper_layers {
            let cin = if i == 0 { hy } else { lat };
            let cout = if i == arch.hyper_layers - 1 { 2 * lat } else { lat };
            h_dec.push(Deconv::up2(&format!("h_dec.{i}"), cin, cout, 5, rng));
        }

        let ctx_conv = Conv::new("ctx", lat, 2 * lat, CONTEXT_KERNEL, 1, rng);
        let ctx_kernel_mask = ops::type_a_kernel_mask(2 * lat, lat, CONTEXT_KERNEL).unwrap();

        let ep1 = Conv::new("ep.0", 4 * lat, 3 * lat, 1, 1, rng);
        let ep2 = Conv::new("ep.1", 3 * lat, 2 * lat, 1, 1, rng);

        let fm1 = Conv::new("fm.0", 2 * lat + 1, mw, 3, 1, rng);
        let fm2 = Conv::new("fm.1", mw, mw, 3, 1, rng);
        let mut fm_head = Conv::with_gain("fm.head", mw + 1, 2, 1, 1, 0.1, rng);
        // Level-plane warm start: class-1 logit tracks the requested budget.
        fm_head.w.data[(mw + 1) + mw] = LEVEL_GAIN;
        fm_head.w.data[mw] = 0.0;
        fm_head.b.data[0] = 0.0;
        fm_head.b.data[1] = LEVEL_BIAS;

        let mut fc = Vec::new();
        for i in 0..arch.hyper_layers {
            let cin = if i == 0 { hy } else { w };
            fc.push(Deconv::up2(&format!("fc.{i}"), cin, w, 5, rng));
        }
        let gs_sft = SftBlock::new("gs_sft", w, lat, mw, rng);

        let mut dec = Vec::new();
        for i in 0..l {
            let cin = if i == 0 { lat } else { w };
            let cout = if i == l - 1 { 3 } else { w };
            dec.push(Deconv::up2(&format!("dec.{i}"), cin, cout, 5, rng));
        }

        let priors = (0..NUM_SEGMENTS)
            .map(|seg| FactorizedPrior::init(hy, seg, rng))
            .collect();

        CodecModel {
            arch,
            lambda_d,
            enc,
            ga_sft,
            ha_sft,
            h_enc,
            h_dec,
            ctx_conv,
            ctx_kernel_mask,
            ep1,
            ep2,
            fm1,
            fm2,
            fm_head,
            fc,
            gs_sft,
            dec,
            priors,
        }
    }

    // -- generic forwards ---------------------------------------------------

    /// Main analysis transform: image -> latent, with the conditional SFT on
    /// the penultimate feature.
    pub fn analysis<C: Ctx>(&self, c: &mut C, x: &C::T, l: ComplexityLevel) -> Result<C::T> {
        let mut t = x.clone();
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            if i == last {
                let sh = c.shape(&t);
                let plane = c.constant(broadcast_level(l, sh[1], sh[2]));
                t = self.ga_sft.apply(c, &t, &plane)?;
            }
            t = conv.fwd(c, &t)?;
            if i < last {
                t = c.lrelu(&t);
            }
        }
        Ok(t)
    }

    /// Hyper analysis: latent -> hyper latent, modulated by the level.
    pub fn hyper_analysis<C: Ctx>(&self, c: &mut C, y_f: &C::T, l: ComplexityLevel) -> Result<C::T> {
        let sh = c.shape(y_f);
        let plane = c.constant(broadcast_level(l, sh[1], sh[2]));
        let mut t = self.ha_sft.apply(c, y_f, &plane)?;
        let last = self.h_enc.len() - 1;
        for (i, conv) in self.h_enc.iter().enumerate() {
            t = conv.fwd(c, &t)?;
            if i < last {
                t = c.lrelu(&t);
            }
        }
        Ok(t)
    }

    /// Hyper synthesis: hyper latent -> per-position features (2x latent ch).
    pub fn hyper_synthesis<C: Ctx>(&self, c: &mut C, z_hat: &C::T) -> Result<C::T> {
        let mut t = z_hat.clone();
        let last = self.h_dec.len() - 1;
        for (i, deconv) in self.h_dec.iter().enumerate() {
            t = deconv.fwd(c, &t)?;
            if i < last {
                t = c.lrelu(&t);
            }
        }
        Ok(t)
    }

    /// Condition generator f_c: hyper latent -> transform condition feature.
    pub fn condition_from_zhat<C: Ctx>(&self, c: &mut C, z_hat: &C::T) -> Result<C::T> {
        let mut t = z_hat.clone();
        let last = self.fc.len() - 1;
        for (i, deconv) in self.fc.iter().enumerate() {
            t = deconv.fwd(c, &t)?;
            if i < last {
                t = c.lrelu(&t);
            }
        }
        Ok(t)
    }

    /// Mask head f_m: hyper features + broadcast level -> [2,H,W] logits.
    pub fn mask_logits<C: Ctx>(
        &self,
        c: &mut C,
        hyper_feat: &C::T,
        l: ComplexityLevel,
    ) -> Result<C::T> {
        let sh = c.shape(hyper_feat);
        let plane = c.constant(broadcast_level(l, sh[1], sh[2]));
        let inp = c.concat_ch(hyper_feat, &plane)?;
        let t = self.fm1.fwd(c, &inp)?;
        let t = c.lrelu(&t);
        let t = self.fm2.fwd(c, &t)?;
        let t = c.lrelu(&t);
        let head_in = c.concat_ch(&t, &plane)?;
        self.fm_head.fwd(c, &head_in)
    }

    /// Full-map context features via the type-A masked conv.
    pub fn context_full<C: Ctx>(&self, c: &mut C, y_hat: &C::T) -> Result<C::T> {
        let w = c.param("ctx.w", &self.ctx_conv.w);
        let b = c.param("ctx.b", &self.ctx_conv.b);
        let km = c.constant(self.ctx_kernel_mask.clone());
        let wm = c.mul(&w, &km)?;
        c.conv2d(y_hat, &wm, &b, 1, self.ctx_conv.pad)
    }

    /// Entropy parameter network over [hyper features, gated context
    /// features]; sigma comes out softplus-activated above the clamp floor.
    pub fn entropy_params<C: Ctx>(
        &self,
        c: &mut C,
        hyper_feat: &C::T,
        phi_gated: &C::T,
    ) -> Result<(C::T, C::T)> {
        let lat = self.arch.latent;
        let cat = c.concat_ch(hyper_feat, phi_gated)?;
        let t = self.ep1.fwd(c, &cat)?;
        let t = c.lrelu(&t);
        let raw = self.ep2.fwd(c, &t)?;
        let mu = c.slice_ch(&raw, 0, lat)?;
        let sraw = c.slice_ch(&raw, lat, 2 * lat)?;
        let sp = c.softplus(&sraw);
        let sigma = c.add_scalar(&sp, SIGMA_MIN);
        Ok((mu, sigma))
    }

    /// Synthesis transform: latent (SFT-modulated by the condition feature)
    /// -> image.
    pub fn synthesis<C: Ctx>(&self, c: &mut C, y_hat: &C::T, w_hat: &C::T) -> Result<C::T> {
        let mut t = self.gs_sft.apply(c, y_hat, w_hat)?;
        let last = self.dec.len() - 1;
        for (i, deconv) in self.dec.iter().enumerate() {
            t = deconv.fwd(c, &t)?;
            if i < last {
                t = c.lrelu(&t);
            }
        }
        Ok(t)
    }

    // -- serial per-position evaluation -------------------------------------

    /// Context features at a single position: the masked 5x5 conv reads only
    /// raster-earlier positions of `y`.
    pub fn context_at(&self, y: &Arr, py: usize, px: usize, out: &mut [f64]) {
        let lat = self.arch.latent;
        let k = CONTEXT_KERNEL;
        let center = k / 2;
        let (h, w) = (y.shape[1], y.shape[2]);
        let cw = &self.ctx_conv.w;
        for oc in 0..2 * lat {
            let mut acc = self.ctx_conv.b.data[oc];
            for ky in 0..k {
                let iy = py as isize + ky as isize - center as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                if ky > center {
                    break;
                }
                let kx_end = if ky == center { center } else { k };
                for kx in 0..kx_end {
                    let ix = px as isize + kx as isize - center as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for ic in 0..lat {
                        acc += y.data[(ic * h + iy as usize) * w + ix as usize]
                            * cw.data[(((oc * lat) + ic) * k + ky) * k + kx];
                    }
                }
            }
            out[oc] = acc;
        }
    }

    /// Entropy parameters at a single position given that position's hyper
    /// feature column and context feature column.
    pub fn entropy_params_at(
        &self,
        hyper_col: &[f64],
        phi_col: &[f64],
        mu_out: &mut [f64],
        sigma_out: &mut [f64],
    ) {
        let lat = self.arch.latent;
        let (n_in, n_mid) = (4 * lat, 3 * lat);
        let mut mid = vec![0.0; n_mid];
        for j in 0..n_mid {
            let mut acc = self.ep1.b.data[j];
            let wrow = j * n_in;
            for i in 0..2 * lat {
                acc += self.ep1.w.data[wrow + i] * hyper_col[i];
            }
            for i in 0..2 * lat {
                acc += self.ep1.w.data[wrow + 2 * lat + i] * phi_col[i];
            }
            mid[j] = if acc > 0.0 { acc } else { crate::ctx::LRELU_SLOPE * acc };
        }
        for j in 0..lat {
            let mut mu = self.ep2.b.data[j];
            let mut sr = self.ep2.b.data[lat + j];
            let (wm, ws) = (j * n_mid, (lat + j) * n_mid);
            for i in 0..n_mid {
                mu += self.ep2.w.data[wm + i] * mid[i];
                sr += self.ep2.w.data[ws + i] * mid[i];
            }
            mu_out[j] = mu;
            sigma_out[j] = ops::softplus(sr) + SIGMA_MIN;
        }
    }

    /// Column of a [C,H,W] map at one spatial position.
    pub fn column(feat: &Arr, py: usize, px: usize, out: &mut [f64]) {
        let (ch, h, w) = (feat.shape[0], feat.shape[1], feat.shape[2]);
        for c in 0..ch {
            out[c] = feat.data[(c * h + py) * w + px];
        }
    }

    /// Convenience: pure inference of the mask for (z_hat, l); deterministic
    /// argmax, shared by encoder and decoder.
    pub fn infer_mask(&self, z_hat: &Arr, l: ComplexityLevel) -> Result<crate::mask::SpatialMask> {
        let mut c = PureCtx;
        let hyper_feat = self.hyper_synthesis(&mut c, z_hat)?;
        let logits = self.mask_logits(&mut c, &hyper_feat, l)?;
        let hw = logits.shape[1] * logits.shape[2];
        let grid = (0..hw)
            .map(|i| u8::from(logits.data[hw + i] > logits.data[i]))
            .collect();
        crate::mask::SpatialMask::from_grid(logits.shape[1], logits.shape[2], grid)
    }

    // -- parameter visitation ----------------------------------------------

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Arr)) {
        for c in &self.enc {
            c.visit(f);
        }
        self.ga_sft.visit(f);
        self.ha_sft.visit(f);
        for c in &self.h_enc {
            c.visit(f);
        }
        for d in &self.h_dec {
            d.visit(f);
        }
        self.ctx_conv.visit(f);
        self.ep1.visit(f);
        self.ep2.visit(f);
        self.fm1.visit(f);
        self.fm2.visit(f);
        self.fm_head.visit(f);
        for d in &self.fc {
            d.visit(f);
        }
        self.gs_sft.visit(f);
        for d in &self.dec {
            d.visit(f);
        }
        for p in &self.priors {
            for (name, arr) in FACTORIZED_PARAM_NAMES.iter().zip(&p.params) {
                f(&format!("prior.{}.{name}", p.segment_index), arr);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arr)) {
        for c in &mut self.enc {
            c.visit_mut(f);
        }
        self.ga_sft.visit_mut(f);
        self.ha_sft.visit_mut(f);
        for c in &mut self.h_enc {
            c.visit_mut(f);
        }
        for d in &mut self.h_dec {
            d.visit_mut(f);
        }
        self.ctx_conv.visit_mut(f);
        self.ep1.visit_mut(f);
        self.ep2.visit_mut(f);
        self.fm1.visit_mut(f);
        self.fm2.visit_mut(f);
        self.fm_head.visit_mut(f);
        for d in &mut self.fc {
            d.visit_mut(f);
        }
        self.gs_sft.visit_mut(f);
        for d in &mut self.dec {
            d.visit_mut(f);
        }
        for p in &mut self.priors {
            let seg = p.segment_index;
            for (name, arr) in FACTORIZED_PARAM_NAMES.iter().zip(&mut p.params) {
                f(&format!("prior.{seg}.{name}"), arr);
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Arr)> {
        let mut out = Vec::new();
        self.visit(&mut |name, arr| out.push((name.to_string(), arr.clone())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, arr| n += arr.len());
        n
    }

    // -- serialization -------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.lambda_d.to_le_bytes());
        for v in [
            self.arch.width,
            self.arch.latent,
            self.arch.hyper,
            self.arch.mask_width,
            self.arch.main_layers,
            self.arch.hyper_layers,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let params = self.named_params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, arr) in &params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &arr.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take_bytes(4)? != MODEL_MAGIC {
            return Err(RdcError::Data("bad model magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(RdcError::Data(format!("unsupported model version {version}")));
        }
        let lambda_d = r.u32()?;
        let arch = ArchConfig {
            width: r.u32()? as usize,
            latent: r.u32()? as usize,
            hyper: r.u32()? as usize,
            mask_width: r.u32()? as usize,
            main_layers: r.u32()? as usize,
            hyper_layers: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let mut table: BTreeMap<String, Arr> = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take_bytes(nlen)?.to_vec())
                .map_err(|_| RdcError::Data("bad parameter name".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take_bytes(8)?.try_into().unwrap()));
            }
            table.insert(name, Arr::from_vec(&shape, data)?);
        }
        let mut model = CodecModel::init(arch, lambda_d, 0);
        let mut missing = Vec::new();
        model.visit_mut(&mut |name, arr| match table.remove(name) {
            Some(loaded) if loaded.shape == arr.shape => *arr = loaded,
            Some(loaded) => missing.push(format!("{name}: shape {:?} vs {:?}", loaded.shape, arr.shape)),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(RdcError::Data(format!(
                "model file mismatch: {}",
                missing.join(", ")
            )));
        }
        if !table.is_empty() {
            return Err(RdcError::Data(format!(
                "model file has {} unknown parameters",
                table.len()
            )));
        }
        Ok(model)
    }
}

/// Parameters frozen during the second training stage: the main encoder and
/// main decoder transforms.
pub fn stage2_frozen(key: &str) -> bool {
    key.starts_with("enc.") || key.starts_with("dec.")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RdcError::Data("model file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take_bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take_bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> Arr {
        let n: usize = shape.iter().product();
        Arr::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn arch_downsample_factors() {
        let a = ArchConfig::desk();
        assert_eq!(a.downsample(), 16);
        assert_eq!(a.total_downsample(), 64);
        assert_eq!(ArchConfig::tiny().downsample(), 4);
    }

    #[test]
    fn init_has_twelve_priors_and_stable_param_count() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 7);
        assert_eq!(m.priors.len(), 12);
        let a = CodecModel::init(ArchConfig::tiny(), 512, 7);
        let b = CodecModel::init(ArchConfig::tiny(), 512, 7);
        assert_eq!(a.num_params(), b.num_params());
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data, pb.data, "param {na} differs across same-seed inits");
        }
        let c = CodecModel::init(ArchConfig::tiny(), 512, 8);
        let same = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .all(|((_, pa), (_, pc))| pa.data == pc.data);
        assert!(!same, "different seeds produced identical weights");
    }

    #[test]
    fn serialization_round_trip_is_bit_identical() {
        let m = CodecModel::init(ArchConfig::tiny(), 2048, 11);
        let bytes = m.to_bytes();
        let back = CodecModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.lambda_d, 2048);
        assert_eq!(bytes, back.to_bytes());
        for ((na, pa), (nb, pb)) in m.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            for (x, y) in pa.data.iter().zip(&pb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_model_files_are_rejected() {
        let m = CodecModel::init(ArchConfig::tiny(), 192, 3);
        let bytes = m.to_bytes();
        assert!(CodecModel::from_bytes(&bytes[..10]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(CodecModel::from_bytes(&bad_magic).is_err());
        let truncated = &bytes[..bytes.len() - 8];
        assert!(CodecModel::from_bytes(truncated).is_err());
    }

    #[test]
    fn condition_from_zhat_upsamples_4x() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let z = randn(&[m.arch.hyper, 2, 3], &mut rng);
        let mut c = PureCtx;
        let w1 = m.condition_from_zhat(&mut c, &z).unwrap();
        assert_eq!(w1.shape, vec![m.arch.width, 8, 12]);
        // Deterministic.
        let w2 = m.condition_from_zhat(&mut c, &z).unwrap();
        assert_eq!(w1.data, w2.data);
        // Zero input and zero bias give a zero condition feature.
        let mut mz = m.clone();
        mz.visit_mut(&mut |name, a| {
            if name.starts_with("fc.") && name.ends_with(".b") {
                *a = Arr::zeros(&a.shape);
            }
        });
        let w0 = mz
            .condition_from_zhat(&mut c, &Arr::zeros(&[mz.arch.hyper, 2, 3]))
            .unwrap();
        assert!(w0.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_at_matches_full_conv() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let y = randn(&[m.arch.latent, 5, 6], &mut rng);
        let mut c = PureCtx;
        let full = m.context_full(&mut c, &y).unwrap();
        let mut col = vec![0.0; 2 * m.arch.latent];
        for py in 0..5 {
            for px in 0..6 {
                m.context_at(&y, py, px, &mut col);
                for ch in 0..2 * m.arch.latent {
                    let want = full.data[(ch * 5 + py) * 6 + px];
                    assert!(
                        (col[ch] - want).abs() < 1e-12,
                        "mismatch at ({py},{px}) ch {ch}"
                    );
                }
            }
        }
    }

    #[test]
    fn context_at_ignores_noncausal_positions() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let y = randn(&[m.arch.latent, 4, 4], &mut rng);
        let (py, px) = (1, 2);
        let mut base = vec![0.0; 2 * m.arch.latent];
        m.context_at(&y, py, px, &mut base);
        // Perturb every raster-later-or-equal position; output must not move.
        for qy in 0..4 {
            for qx in 0..4 {
                if (qy, qx) < (py, px) {
                    continue;
                }
                let mut yp = y.clone();
                for ch in 0..m.arch.latent {
                    yp.data[(ch * 4 + qy) * 4 + qx] += 10.0;
                }
                let mut col = vec![0.0; 2 * m.arch.latent];
                m.context_at(&yp, py, px, &mut col);
                assert_eq!(col, base, "noncausal ({qy},{qx}) leaked");
            }
        }
    }

    #[test]
    fn entropy_params_at_matches_full_network() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 13);
        let mut rng = ChaCha12Rng::seed_from_u64(54);
        let lat = m.arch.latent;
        let hyper = randn(&[2 * lat, 3, 3], &mut rng);
        let phi = randn(&[2 * lat, 3, 3], &mut rng);
        let mut c = PureCtx;
        let (mu, sigma) = m.entropy_params(&mut c, &hyper, &phi).unwrap();
        let mut hcol = vec![0.0; 2 * lat];
        let mut pcol = vec![0.0; 2 * lat];
        let mut mcol = vec![0.0; lat];
        let mut scol = vec![0.0; lat];
        for py in 0..3 {
            for px in 0..3 {
                CodecModel::column(&hyper, py, px, &mut hcol);
                CodecModel::column(&phi, py, px, &mut pcol);
                m.entropy_params_at(&hcol, &pcol, &mut mcol, &mut scol);
                for ch in 0..lat {
                    assert!((mcol[ch] - mu.data[(ch * 3 + py) * 3 + px]).abs() < 1e-12);
                    assert!((scol[ch] - sigma.data[(ch * 3 + py) * 3 + px]).abs() < 1e-12);
                }
            }
        }
        assert!(sigma.data.iter().all(|&s| s >= SIGMA_MIN));
    }

    #[test]
    fn zero_gated_context_makes_params_ignore_latents() {
        // With the context branch zeroed (all-zero mask gating), entropy
        // parameters cannot depend on y_hat.
        let m = CodecModel::init(ArchConfig::tiny(), 512, 15);
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let lat = m.arch.latent;
        let hyper = randn(&[2 * lat, 3, 3], &mut rng);
        let zero_phi = Arr::zeros(&[2 * lat, 3, 3]);
        let mut c = PureCtx;
        let (mu1, s1) = m.entropy_params(&mut c, &hyper, &zero_phi).unwrap();
        let (mu2, s2) = m.entropy_params(&mut c, &hyper, &zero_phi).unwrap();
        assert_eq!(mu1.data, mu2.data);
        assert_eq!(s1.data, s2.data);
    }

    #[test]
    fn sft_identity_surgery_is_a_noop() {
        // Forcing every SFT head to emit (gamma, beta) = (1, 0) must make the
        // conditioned transforms match an unconditioned forward bit-exactly.
        let mut m = CodecModel::init(ArchConfig::tiny(), 512, 17);
        let mut rng = ChaCha12Rng::seed_from_u64(56);
        let x = randn(&[3, 16, 16], &mut rng);
        let l0 = ComplexityLevel::new(0.0).unwrap();
        let l1 = ComplexityLevel::new(1.0).unwrap();
        let mut c = PureCtx;
        let before0 = m.analysis(&mut c, &x, l0).unwrap();
        let before1 = m.analysis(&mut c, &x, l1).unwrap();
        assert_ne!(before0.data, before1.data, "conditioning has no effect");
        m.visit_mut(&mut |name, a| {
            let is_sft = name.contains("sft");
            if !is_sft {
                return;
            }
            if name.contains("gamma") && name.ends_with(".b") {
                *a = Arr::full(&a.shape, 1.0);
            } else if name.ends_with(".w") || name.ends_with(".b") {
                *a = Arr::zeros(&a.shape);
            }
        });
        let after0 = m.analysis(&mut c, &x, l0).unwrap();
        let after1 = m.analysis(&mut c, &x, l1).unwrap();
        for (a, b) in after0.data.iter().zip(&after1.data) {
            assert_eq!(a.to_bits(), b.to_bits(), "surgery left level dependence");
        }
    }

    #[test]
    fn infer_mask_shape_and_determinism() {
        let m = CodecModel::init(ArchConfig::tiny(), 512, 19);
        let mut rng = ChaCha12Rng::seed_from_u64(57);
        let z = randn(&[m.arch.hyper, 3, 4], &mut rng);
        let l = ComplexityLevel::new(0.7).unwrap();
        let a = m.infer_mask(&z, l).unwrap();
        let b = m.infer_mask(&z, l).unwrap();
        // Mask lives at y-hat resolution: 2^hyper_layers above the z grid.
        assert_eq!(a.h, 12);
        assert_eq!(a.w, 16);
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn fresh_model_mask_tracks_level() {
        // The warm-started mask head makes the fresh model approximate
        // C_e(l) = l before any training.
        let m = CodecModel::init(ArchConfig::tiny(), 512, 21);
        let mut rng = ChaCha12Rng::seed_from_u64(58);
        let z = randn(&[m.arch.hyper, 4, 4], &mut rng);
        let ce_at = |l: f64| {
            let mask = m.infer_mask(&z, ComplexityLevel::new(l).unwrap()).unwrap();
            crate::mask::compute_ce(&mask)
        };
        assert!(ce_at(0.0) < 0.3, "C_e at l=0 is {}", ce_at(0.0));
        assert!(ce_at(1.0) > 0.7, "C_e at l=1 is {}", ce_at(1.0));
        assert!(ce_at(0.0) <= ce_at(1.0));
    }

    #[test]
    fn stage2_freeze_covers_transforms_only() {
        assert!(stage2_frozen("enc.0.w"));
        assert!(stage2_frozen("dec.2.b"));
        assert!(!stage2_frozen("fm1.w"));
        assert!(!stage2_frozen("ctx.w"));
        assert!(!stage2_frozen("prior.0.w0"));
        assert!(!stage2_frozen("hdec.0.w"));
    }
}
