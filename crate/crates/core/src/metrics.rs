//! Held-out image metrics and the evaluation report.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::rays::{kept_fraction, Vec3};
use crate::render::{eval_rays, RayEval};
use crate::scenes::{Camera, GtImages};

pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB for colors in `[0, 1]`, capped for exact reconstructions.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn psnr(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let n = pred.len().max(1) as f64;
    let mse: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm_squared()).sum::<f64>() / (3.0 * n);
    psnr_from_mse(mse)
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable filtering with the 11-tap window.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; 11]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w - 10, h - 10);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..11).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM on channel-averaged grayscale, 11x11 Gaussian window with
/// standard deviation 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(pred: &[Vec3], gt: &[Vec3], width: usize, height: usize) -> Result<f64> {
    if width < 11 || height < 11 || pred.len() != width * height || gt.len() != pred.len() {
        return Err(Error::Contract(format!(
            "ssim needs matching images of at least 11x11, got {width}x{height}"
        )));
    }
    let gray = |v: &[Vec3]| -> Vec<f64> { v.iter().map(|c| c.mean()).collect() };
    let (a, b) = (gray(pred), gray(gt));
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ..) = filter(&a, width, height, &k);
    let (mu_b, ..) = filter(&b, width, height, &k);
    let (aa, ..) = filter(&prod(&a, &a), width, height, &k);
    let (bb, ..) = filter(&prod(&b, &b), width, height, &k);
    let (ab, ow, oh) = filter(&prod(&a, &b), width, height, &k);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// Mean angular error in degrees between normalised predictions and ground
/// truth over pixels where `mask` holds. A zero prediction counts as 90.
pub fn mae_degrees(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        let norm = p.norm();
        let angle = if norm > 0.0 {
            (p.dot(g) / (norm * g.norm())).clamp(-1.0, 1.0).acos().to_degrees()
        } else {
            90.0
        };
        sum += angle;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-channel Gaussian NLL of `gt` with variance `max(spread^2, 1e-6)`,
/// averaged over pixels and channels.
pub fn eval_nll(pred: &[Vec3], gt: &[Vec3], spread: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .zip(spread)
        .map(|((p, g), u)| {
            let v = (u * u).max(1e-6);
            (0..3)
                .map(|c| 0.5 * (2.0 * PI * v).ln() + (p[c] - g[c]).powi(2) / (2.0 * v))
                .sum::<f64>()
                / 3.0
        })
        .sum();
    total / n
}

/// Median of `v`, mean of the middle pair for even lengths; NaN when empty.
pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Renders `camera` with the frozen network.
pub fn render_view(
    params: &FieldParams,
    camera: &Camera,
    near: f64,
    far: f64,
    samples: usize,
    with_normals: bool,
) -> Result<Vec<RayEval>> {
    let rays: Vec<_> = (0..camera.pixels())
        .map(|p| camera.pixel_ray(p % camera.width, p / camera.width))
        .collect();
    eval_rays(params, &rays, near, far, samples, with_normals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub nll: f64,
    /// `(tau, kept fraction)` over all held-out rays.
    pub tau_sweep: Vec<(f64, f64)>,
}

pub const SWEEP_TAUS: [f64; 4] = [30.0, 60.0, 90.0, 180.0];

/// Scores the network on held-out views. Image metrics are averaged over
/// views.
pub fn evaluate(
    params: &FieldParams,
    heldout: &[(Camera, GtImages)],
    near: f64,
    far: f64,
    samples: usize,
) -> Result<EvalReport> {
    let mut views = Vec::new();
    let (mut d_hat, mut n_hat, mut peak) = (Vec::new(), Vec::new(), Vec::new());
    for (k, (cam, gt)) in heldout.iter().enumerate() {
        let out = render_view(params, cam, near, far, samples, true)?;
        let rgb: Vec<Vec3> = out.iter().map(|e| e.c_hat).collect();
        let normals: Vec<Vec3> = out.iter().map(|e| e.n_hat).collect();
        let spread: Vec<f64> = out.iter().map(|e| e.spread).collect();
        views.push(ViewMetrics {
            view: k,
            psnr: psnr(&rgb, &gt.rgb),
            ssim: ssim(&rgb, &gt.rgb, cam.width, cam.height)?,
            mae: mae_degrees(&normals, &gt.normal, &gt.mask),
            nll: eval_nll(&rgb, &gt.rgb, &spread),
        });
        for (p, e) in out.iter().enumerate() {
            d_hat.push(cam.pixel_ray(p % cam.width, p / cam.width).d_hat);
            n_hat.push(e.n_hat);
            peak.push(e.has_peak);
        }
    }
    let n = views.len().max(1) as f64;
    let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
    let tau_sweep = SWEEP_TAUS
        .iter()
        .map(|&tau| (tau, kept_fraction(&d_hat, &n_hat, &peak, tau)))
        .collect();
    Ok(EvalReport {
        psnr: mean(|v| v.psnr),
        ssim: mean(|v| v.ssim),
        mae: mean(|v| v.mae),
        nll: mean(|v| v.nll),
        views,
        tau_sweep,
    })
}

impl EvalReport {
    /// Per-view rows, a `mean` row, then one row per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,psnr,ssim,mae_deg,nll,tau_deg,kept_fraction\n");
        for v in &self.views {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},,\n",
                v.view, v.psnr, v.ssim, v.mae, v.nll
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},,\n",
            self.psnr, self.ssim, self.mae, self.nll
        ));
        for (tau, f) in &self.tau_sweep {
            out.push_str(&format!("sweep,,,,,{tau:.0},{f:.6}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "held-out views: {}\nPSNR  {:8.3} dB\nSSIM  {:8.4}\nMAE   {:8.3} deg\nNLL   {:8.4}\n",
            self.views.len(),
            self.psnr,
            self.ssim,
            self.mae,
            self.nll
        );
        out.push_str("kept fraction by threshold:\n");
        for (tau, f) in &self.tau_sweep {
            out.push_str(&format!("  tau {tau:5.0} deg  {f:.4}\n"));
        }
        out
    }
}
