//! Reconstruction quality metrics.

use crate::error::{ensure_len, QcsError, Result};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

pub fn mse(x_hat: &[f64], x_true: &[f64]) -> Result<f64> {
    ensure_len("mse inputs", x_true.len(), x_hat.len())?;
    if x_true.is_empty() {
        return Err(QcsError::invalid("mse of empty vectors"));
    }
    Ok(x_hat.iter().zip(x_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x_true.len() as f64)
}

/// `10 log10(range^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(x_hat: &[f64], x_true: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(QcsError::invalid(format!("data range must be positive, got {data_range}")));
    }
    let e = mse(x_hat, x_true)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / e).log10())
}

/// Channel-first image shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable weighted mean over every full 11x11 window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let span = k.len();
    let (oh, ow) = (h + 1 - span, w + 1 - span);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..span).map(|j| k[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..span).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sd 1.5), population
/// covariances and `C1 = (0.01 R)^2`, `C2 = (0.03 R)^2`, averaged over the
/// windows that fit inside the image and then over channels.
pub fn ssim(x_hat: &[f64], x_true: &[f64], dims: ImageDims, data_range: f64) -> Result<f64> {
    ensure_len("ssim x_hat", dims.len(), x_hat.len())?;
    ensure_len("ssim x_true", dims.len(), x_true.len())?;
    let span = 2 * SSIM_RADIUS + 1;
    if dims.height < span || dims.width < span {
        return Err(QcsError::invalid(format!(
            "ssim needs images of at least {span}x{span}, got {}x{}",
            dims.height, dims.width
        )));
    }
    if !(data_range > 0.0) {
        return Err(QcsError::invalid(format!("data range must be positive, got {data_range}")));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = gaussian_window();
    let plane = dims.height * dims.width;
    let mut total = 0.0;
    for ch in 0..dims.channels {
        let a = &x_hat[ch * plane..(ch + 1) * plane];
        let b = &x_true[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(p, q)| f(*p, *q)).collect::<Vec<_>>();
        let mu_a = filter_valid(a, dims.height, dims.width, &k);
        let mu_b = filter_valid(b, dims.height, dims.width, &k);
        let aa = filter_valid(&prod(&|p, _| p * p), dims.height, dims.width, &k);
        let bb = filter_valid(&prod(&|_, q| q * q), dims.height, dims.width, &k);
        let ab = filter_valid(&prod(&|p, q| p * q), dims.height, dims.width, &k);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / dims.channels as f64)
}
