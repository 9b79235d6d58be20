//! PSNR and SSIM, computed in 64-bit.

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(peak²/MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!("psnr inputs differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let n = a.numel().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let mid = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = g.iter().enumerate().map(|(t, gv)| gv * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = g.iter().enumerate().map(|(t, gv)| gv * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM of two `h×w` planes.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig, g: &[f64]) -> f64 {
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, mu_b) = (filter(a, h, w, g), filter(b, h, w, g));
    let (aa, bb, ab) = (filter(&prod(a, a), h, w, g), filter(&prod(b, b), h, w, g), filter(&prod(a, b), h, w, g));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over the trailing `H×W` planes of `a` and `b`, with a
/// Gaussian window; every leading index is a separate plane.
pub fn ssim_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!("ssim inputs differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let &[.., h, w] = a.shape() else {
        return Err(dim_err!("ssim needs at least two axes, got {:?}", a.shape()));
    };
    if h < cfg.window || w < cfg.window {
        return Err(dim_err!("ssim window {} exceeds the {}x{} image", cfg.window, h, w));
    }
    let g = gaussian(cfg.window, cfg.sigma);
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let planes = av.len() / (h * w);
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * h * w..(p + 1) * h * w;
            ssim_plane(&av[r.clone()], &bv[r], h, w, cfg, &g)
        })
        .sum();
    Ok(total / planes as f64)
}

pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}
