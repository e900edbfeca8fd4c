//! Spectrum and single-antenna losses with analytic gradients, plus
//! evaluation metrics.

use std::f64::consts::LN_10;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SpectrumFrame;
use crate::Complex;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Received powers below this are reported at this level, in dBm.
pub const DBM_FLOOR: f64 = -200.0;

/// Weights of the three spectrum terms:
/// `(1 - l1 - l2) L1 + l1 SSIM + l2 Fourier`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let sum = self.lambda1 + self.lambda2;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && sum < 1.0) {
            return Err(Error::Config(format!(
                "loss weights {} and {} must be non-negative with sum below 1",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub fourier: f64,
    /// Gradient of `total` with respect to the predicted power.
    pub grad: SpectrumFrame,
}

fn check(pred: &SpectrumFrame, gt: &SpectrumFrame) -> Result<()> {
    pred.same_shape(gt)?;
    if pred.data.len() != pred.n_az * pred.n_el || gt.data.len() != gt.n_az * gt.n_el {
        return Err(Error::shape(pred.n_az * pred.n_el, pred.data.len()));
    }
    Ok(())
}

fn like(frame: &SpectrumFrame, data: Vec<f64>) -> SpectrumFrame {
    SpectrumFrame {
        n_az: frame.n_az,
        n_el: frame.n_el,
        data,
    }
}

pub fn l1_loss(pred: &SpectrumFrame, gt: &SpectrumFrame) -> Result<(f64, SpectrumFrame)> {
    check(pred, gt)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| {
            let d = p - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, like(pred, grad)))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - half;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable window filter with zero padding and same-size output.
/// The kernel is symmetric, so this is also its own adjoint.
fn filter(data: &[f64], n_az: usize, n_el: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for u in 0..n_az {
        for v in 0..n_el {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let vv = v as isize + k as isize - half;
                if vv >= 0 && (vv as usize) < n_el {
                    acc += t * data[u * n_el + vv as usize];
                }
            }
            tmp[u * n_el + v] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for u in 0..n_az {
        for v in 0..n_el {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let uu = u as isize + k as isize - half;
                if uu >= 0 && (uu as usize) < n_az {
                    acc += t * tmp[uu as usize * n_el + v];
                }
            }
            out[u * n_el + v] = acc;
        }
    }
    out
}

/// Dynamic range of a frame, floored at `1e-6`.
pub fn dynamic_range(frame: &SpectrumFrame) -> f64 {
    let (lo, hi) = frame
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    (hi - lo).max(1e-6)
}

/// Mean local SSIM map value and `1 - SSIM` gradient.
pub fn ssim(pred: &SpectrumFrame, gt: &SpectrumFrame) -> Result<(f64, SpectrumFrame)> {
    check(pred, gt)?;
    let (na, ne) = (pred.n_az, pred.n_el);
    let n = (na * ne) as f64;
    let taps = gaussian_taps();
    let d = dynamic_range(gt);
    let c1 = (SSIM_K1 * d).powi(2);
    let c2 = (SSIM_K2 * d).powi(2);
    let x = &pred.data;
    let y = &gt.data;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter(x, na, ne, &taps);
    let my = filter(y, na, ne, &taps);
    let ex = filter(&xx, na, ne, &taps);
    let ey = filter(&yy, na, ne, &taps);
    let fxy = filter(&xy, na, ne, &taps);
    let len = x.len();
    let mut total = 0.0;
    let mut dm = vec![0.0; len];
    let mut de = vec![0.0; len];
    let mut df = vec![0.0; len];
    for i in 0..len {
        let (m, u) = (mx[i], my[i]);
        let sx = ex[i] - m * m;
        let sy = ey[i] - u * u;
        let sxy = fxy[i] - m * u;
        let a1 = 2.0 * m * u + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = m * m + u * u + c1;
        let b2 = sx + sy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        let bb = b1 * b2;
        let da1 = 2.0 * u;
        let da2 = -2.0 * u;
        let db1 = 2.0 * m;
        let db2 = -2.0 * m;
        dm[i] = (da1 * a2 + a1 * da2) / bb - s * (db1 * b2 + b1 * db2) / bb;
        de[i] = -s / b2;
        df[i] = 2.0 * a1 / bb;
    }
    let gm = filter(&dm, na, ne, &taps);
    let ge = filter(&de, na, ne, &taps);
    let gf = filter(&df, na, ne, &taps);
    let grad = (0..len)
        .map(|i| -(gm[i] + 2.0 * x[i] * ge[i] + y[i] * gf[i]) / n)
        .collect();
    Ok((total / n, like(pred, grad)))
}

/// `1 - mean SSIM` with an 11x11 Gaussian window.
pub fn ssim_loss(pred: &SpectrumFrame, gt: &SpectrumFrame) -> Result<(f64, SpectrumFrame)> {
    let (s, grad) = ssim(pred, gt)?;
    Ok((1.0 - s, grad))
}

/// Unnormalized 2D DFT of an azimuth-major real frame.
pub fn dft2(data: &[f64], n_az: usize, n_el: usize, inverse: bool) -> Vec<Complex64> {
    let buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2_complex(buf, n_az, n_el, inverse)
}

fn dft2_complex(mut buf: Vec<Complex64>, n_az: usize, n_el: usize, inverse: bool) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(n_el), planner.plan_fft_inverse(n_az))
    } else {
        (planner.plan_fft_forward(n_el), planner.plan_fft_forward(n_az))
    };
    row.process(&mut buf);
    let mut column = vec![Complex64::new(0.0, 0.0); n_az];
    for v in 0..n_el {
        for u in 0..n_az {
            column[u] = buf[u * n_el + v];
        }
        col.process(&mut column);
        for u in 0..n_az {
            buf[u * n_el + v] = column[u];
        }
    }
    buf
}

/// `(1/N) sum |F(pred) - F(gt)|^2` with the unnormalized forward DFT.
pub fn fourier_loss(pred: &SpectrumFrame, gt: &SpectrumFrame) -> Result<(f64, SpectrumFrame)> {
    check(pred, gt)?;
    let (na, ne) = (pred.n_az, pred.n_el);
    let n = (na * ne) as f64;
    let delta: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(p, g)| p - g).collect();
    let spec = dft2(&delta, na, ne, false);
    let value = spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let back = dft2_complex(spec, na, ne, true);
    let grad: Vec<f64> = back.iter().map(|z| 2.0 * z.re / n).collect();
    debug_assert!({
        let direct: f64 = delta.iter().map(|d| d * d).sum();
        (value - direct).abs() <= 1e-9 * direct.max(1e-300)
    });
    Ok((value, like(pred, grad)))
}

/// Weighted three-term spectrum loss.
pub fn spectrum_loss(pred: &SpectrumFrame, gt: &SpectrumFrame, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let (l1, g1) = l1_loss(pred, gt)?;
    let (ssim, gs) = ssim_loss(pred, gt)?;
    let (fourier, gf) = fourier_loss(pred, gt)?;
    let a = 1.0 - w.lambda1 - w.lambda2;
    let total = a * l1 + w.lambda1 * ssim + w.lambda2 * fourier;
    let grad = (0..pred.len())
        .map(|i| a * g1.data[i] + w.lambda1 * gs.data[i] + w.lambda2 * gf.data[i])
        .collect();
    Ok(LossReport {
        total,
        l1,
        ssim,
        fourier,
        grad: like(pred, grad),
    })
}

/// `10 log10 |s|^2`, floored.
pub fn power_dbm(s: Complex) -> f64 {
    let p = s.norm_sqr();
    if p > 0.0 {
        (10.0 * p.log10()).max(DBM_FLOOR)
    } else {
        DBM_FLOOR
    }
}

/// Absolute RSSI error in dB and its gradient as `dL/dRe + i dL/dIm`.
pub fn rssi_loss(pred: Complex, gt_dbm: f64) -> (f64, Complex) {
    let dbm = power_dbm(pred);
    let d = dbm - gt_dbm;
    let value = d.abs();
    let p = pred.norm_sqr();
    if dbm <= DBM_FLOOR || p == 0.0 || d == 0.0 {
        return (value, Complex::new(0.0, 0.0));
    }
    (value, pred * (d.signum() * 20.0 / LN_10 / p))
}

/// `|pred - gt|^2` summed over channels, with gradient `2 (pred - gt)`.
pub fn complex_loss(pred: &[Complex], gt: &[Complex]) -> Result<(f64, Vec<Complex>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            value += d.norm_sqr();
            d * 2.0
        })
        .collect();
    Ok((value, grad))
}

/// Target of a single-antenna sample.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarTarget {
    /// Received power in dBm.
    RealPower(f64),
    /// Complex channel values.
    Complex(Vec<Complex>),
}

/// Single-antenna loss: absolute dB error for power targets, squared
/// complex error otherwise. Returns one gradient per channel.
pub fn scalar_loss(pred: &[Complex], target: &ScalarTarget) -> Result<(f64, Vec<Complex>)> {
    match target {
        ScalarTarget::RealPower(gt) => {
            if pred.len() != 1 {
                return Err(Error::shape(1, pred.len()));
            }
            let (v, g) = rssi_loss(pred[0], *gt);
            Ok((v, vec![g]))
        }
        ScalarTarget::Complex(gt) => complex_loss(pred, gt),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    pub snr: f64,
}

/// Largest finite value written for infinite PSNR or SNR.
pub const METRIC_CAP: f64 = 300.0;

impl Metrics {
    /// Infinite values replaced by the cap.
    pub fn capped(&self) -> Self {
        let cap = |v: f64| {
            if v.is_infinite() && v > 0.0 {
                METRIC_CAP
            } else {
                v.min(METRIC_CAP)
            }
        };
        Self {
            mse: self.mse,
            psnr: cap(self.psnr),
            snr: cap(self.snr),
        }
    }
}

fn snr(err: f64, norm: f64) -> f64 {
    if err == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (err / norm).log10()
    }
}

/// MSE, PSNR against the ground-truth dynamic range (its magnitude for a
/// single value), and SNR.
pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let err: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum();
    let norm: f64 = gt.iter().map(|g| g * g).sum();
    let mse = err / pred.len() as f64;
    let (lo, hi) = gt.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = if pred.len() == 1 { hi.abs() } else { hi - lo };
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(Metrics {
        mse,
        psnr,
        snr: snr(err, norm),
    })
}

/// Metrics of complex vectors; PSNR uses the range of `|gt|`.
pub fn complex_metrics(pred: &[Complex], gt: &[Complex]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let err: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_sqr()).sum();
    let norm: f64 = gt.iter().map(|g| g.norm_sqr()).sum();
    let mse = err / pred.len() as f64;
    let (lo, hi) = gt
        .iter()
        .map(|g| g.norm())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let range = if pred.len() == 1 { hi } else { hi - lo };
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(Metrics {
        mse,
        psnr,
        snr: snr(err, norm),
    })
}
