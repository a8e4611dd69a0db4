//! Quality metrics: RGB PSNR and the Bjontegaard delta-rate between two
//! rate–distortion curves.

use crate::arr::Arr;
use crate::error::{RdcError, Result};

/// One point on a rate–distortion curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// RGB PSNR in dB between two [C,H,W] images in [0,1]; MSE is computed in
/// 255 scale and the result is capped at 100 dB for near-identical inputs.
pub fn psnr(a: &Arr, b: &Arr) -> Result<f64> {
    if a.shape != b.shape {
        return Err(RdcError::ShapeMismatch {
            context: "psnr".to_string(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut mse = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = (x - y) * 255.0;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse < 255.0 * 255.0 * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes)
/// with closed-form segment integrals.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut d = vec![0.0; n - 1];
        for i in 0..n - 1 {
            d[i] = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
        }
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        Pchip { x, y, m }
    }

    /// Integral of the interpolant over [a, b] (both inside the domain).
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if lo >= hi {
                continue;
            }
            let h = x1 - x0;
            // Hermite basis integrals over normalized t in [t0, t1].
            let (t0, t1) = ((lo - x0) / h, (hi - x0) / h);
            let ih00 = |t: f64| t - t * t * t + t * t * t * t / 2.0;
            let ih10 = |t: f64| t * t / 2.0 - 2.0 * t * t * t / 3.0 + t * t * t * t / 4.0;
            let ih01 = |t: f64| t * t * t - t * t * t * t / 2.0;
            let ih11 = |t: f64| t * t * t * t / 4.0 - t * t * t / 3.0;
            total += h
                * ((ih00(t1) - ih00(t0)) * self.y[i]
                    + (ih10(t1) - ih10(t0)) * h * self.m[i]
                    + (ih01(t1) - ih01(t0)) * self.y[i + 1]
                    + (ih11(t1) - ih11(t0)) * h * self.m[i + 1]);
        }
        total
    }
}

fn curve(points: &[RdPoint], label: &str) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(RdcError::InvalidArgument(format!(
            "{label} curve needs >= 4 points, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<RdPoint> = points.to_vec();
    pts.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
    for w in pts.windows(2) {
        if w[1].psnr - w[0].psnr <= 0.0 {
            return Err(RdcError::InvalidArgument(format!(
                "{label} curve has duplicate PSNR values"
            )));
        }
    }
    for p in &pts {
        if !(p.bpp > 0.0) {
            return Err(RdcError::InvalidArgument(format!(
                "{label} curve has non-positive bpp"
            )));
        }
    }
    let x: Vec<f64> = pts.iter().map(|p| p.psnr).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.bpp.ln()).collect();
    Ok(Pchip::new(x, y))
}

/// Bjontegaard delta-rate in percent: average log-rate difference of `test`
/// versus `anchor` over the common PSNR interval, mapped back through exp.
/// Negative values mean the test curve needs fewer bits at equal quality.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let ca = curve(anchor, "anchor")?;
    let ct = curve(test, "test")?;
    let lo = ca.x[0].max(ct.x[0]);
    let hi = ca.x[ca.x.len() - 1].min(ct.x[ct.x.len() - 1]);
    if hi <= lo {
        return Err(RdcError::InvalidArgument(
            "rate-distortion curves have no overlapping PSNR range".into(),
        ));
    }
    let avg = (ct.integrate(lo, hi) - ca.integrate(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}
