//! Image fidelity metrics and the photometric training loss.

use crate::error::{Error, Result};
use crate::raster::RenderedImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &RenderedImage, b: &RenderedImage) -> Result<()> {
    if !a.same_shape(b) || a.pixels.len() != b.pixels.len() {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels; identical images give `+∞`.
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode correlation of one `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|t| k[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a window map back onto the plane.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for t in 0..SSIM_WINDOW {
                rows[(y + t) * ow + x] += k[t] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for t in 0..SSIM_WINDOW {
                out[y * w + x + t] += k[t] * v;
            }
        }
    }
    out
}

fn channel(img: &RenderedImage, c: usize) -> Vec<f64> {
    img.pixels.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, optionally, its gradient w.r.t. `a`.
fn ssim_impl(a: &RenderedImage, b: &RenderedImage, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let windows = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (3 * windows) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let pa = channel(a, c);
        let pb = channel(b, c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa = filter_valid(&sq(&pa, &pa), w, h, &k);
        let bb = filter_valid(&sq(&pb, &pb), w, h, &k);
        let ab = filter_valid(&sq(&pa, &pb), w, h, &k);
        let mut d_mu = vec![0.0; windows];
        let mut d_var = vec![0.0; windows];
        let mut d_cov = vec![0.0; windows];
        for i in 0..windows {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = var_a + var_b + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * mb * n2 / (d1 * d2) - s * 2.0 * ma / d1;
                let ds_dvar = -s / d2;
                let ds_dcov = 2.0 * n1 / (d1 * d2);
                d_mu[i] = norm * (ds_dmu - 2.0 * ma * ds_dvar - mb * ds_dcov);
                d_var[i] = norm * ds_dvar;
                d_cov[i] = norm * ds_dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
            let g_var = filter_valid_adjoint(&d_var, w, h, &k);
            let g_cov = filter_valid_adjoint(&d_cov, w, h, &k);
            for p in 0..w * h {
                g[p * 3 + c] = g_mu[p] + 2.0 * pa[p] * g_var[p] + pb[p] * g_cov[p];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows,
/// averaged over channels.
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `(1 - λ) L1 + λ (1 - SSIM)` and its gradient w.r.t. `rendered`.
pub fn image_loss(rendered: &RenderedImage, target: &RenderedImage, lambda_dssim: f64) -> Result<(f64, RenderedImage)> {
    check_shapes(rendered, target)?;
    let n = rendered.pixels.len().max(1) as f64;
    let mut grad = RenderedImage::filled(rendered.width, rendered.height, [0.0; 3]);
    let mut l1 = 0.0;
    for ((g, x), y) in grad.pixels.iter_mut().zip(&rendered.pixels).zip(&target.pixels) {
        let d = x - y;
        l1 += d.abs();
        if d != 0.0 {
            *g = (1.0 - lambda_dssim) * d.signum() / n;
        }
    }
    let mut loss = (1.0 - lambda_dssim) * l1 / n;
    if lambda_dssim != 0.0 {
        let (s, g) = ssim_impl(rendered, target, true)?;
        loss += lambda_dssim * (1.0 - s);
        for (dst, v) in grad.pixels.iter_mut().zip(g.unwrap()) {
            *dst -= lambda_dssim * v;
        }
    }
    Ok((loss, grad))
}
