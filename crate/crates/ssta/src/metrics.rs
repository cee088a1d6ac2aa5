//! Image-quality metrics: MSE, PSNR, and single-scale SSIM.
//!
//! SSIM uses the standard 11×11 Gaussian window with σ = 1.5,
//! C1 = (0.01·L)², C2 = (0.03·L)², dynamic range L = 1 (frames live in
//! [0,1]), and averages over valid window positions only.

use thiserror::Error;

use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric inputs have different shapes: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("frame {h}x{w} is smaller than the {min}x{min} SSIM window")]
    TooSmall { h: usize, w: usize, min: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared difference over all pixels.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; identical frames report +∞.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / err).log10())
}

/// Single-scale SSIM over a 2-D frame. Requires both extents ≥ 11.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    assert_eq!(a.shape().len(), 2, "ssim expects 2-D frames");
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w, min: SSIM_WINDOW });
    }
    let kernel = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = kernel[ky * SSIM_WINDOW + kx];
                    let px = a.data()[(cy + ky - r) * w + (cx + kx - r)] as f64;
                    let py = b.data()[(cy + ky - r) * w + (cx + kx - r)] as f64;
                    mu_x += wgt * px;
                    mu_y += wgt * py;
                    xx += wgt * (px * px);
                    yy += wgt * (py * py);
                    // px·py first: the product is symmetric under swap,
                    // keeping ssim(a,b) bit-identical to ssim(b,a).
                    xy += wgt * (px * py);
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            total += ((2.0 * mu_x * mu_y + C1) * (2.0 * cov + C2))
                / ((mu_x * mu_x + mu_y * mu_y + C1) * (var_x + var_y + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let one_d: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i * i) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = one_d.iter().sum();
    let one_d: Vec<f64> = one_d.into_iter().map(|v| v / norm).collect();
    let mut kernel = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in &one_d {
        for x in &one_d {
            kernel.push(y * x);
        }
    }
    kernel
}

/// Per-view metric rows plus the network mean, each averaged over the
/// prediction steps of an evaluation run. The LPIPS column is reserved so
/// log schemas stay stable; it is never populated here.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_view: Vec<MetricRow>,
    pub mean: MetricRow,
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    /// 0 marks the network-mean row.
    pub view: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

impl MetricReport {
    pub fn from_rows(per_view: Vec<MetricRow>) -> Self {
        let n = per_view.len().max(1) as f64;
        let mean = MetricRow {
            view: 0,
            mse: per_view.iter().map(|r| r.mse).sum::<f64>() / n,
            psnr: per_view.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: per_view.iter().map(|r| r.ssim).sum::<f64>() / n,
            lpips: None,
        };
        MetricReport { per_view, mean }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("view,mse,psnr,ssim,lpips\n");
        for row in self.per_view.iter().chain(std::iter::once(&self.mean)) {
            let view = if row.view == 0 { "mean".to_string() } else { row.view.to_string() };
            let lpips = row.lpips.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{view},{},{},{},{lpips}\n", row.mse, row.psnr, row.ssim));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>6} {:>12} {:>10} {:>10}\n", "view", "mse", "psnr", "ssim"));
        for row in self.per_view.iter().chain(std::iter::once(&self.mean)) {
            let view = if row.view == 0 { "mean".to_string() } else { row.view.to_string() };
            out.push_str(&format!(
                "{view:>6} {:>12.6e} {:>10.4} {:>10.6}\n",
                row.mse, row.psnr, row.ssim
            ));
        }
        out
    }
}
