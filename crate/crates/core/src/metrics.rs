//! Image and geometry metrics.

use crate::error::{Error, Result};
use crate::render::Raster;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(x: &Raster, y: &Raster) -> Result<f64> {
    x.same_dims(y)?;
    let s: f64 = x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.data.len() as f64)
}

/// Peak signal is 1.0; identical images report [`PSNR_CAP`].
pub fn psnr(x: &Raster, y: &Raster) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Rec. 601 luma.
pub fn luma(x: &Raster) -> Vec<f64> {
    x.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Box sums over every valid `k × k` window, computed separably.
fn box_sums(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = img[r * w + c..r * w + c + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (r..r + k).map(|rr| rows[rr * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with a uniform 7×7 window, averaged over all
/// fully contained windows.
pub fn ssim(x: &Raster, y: &Raster) -> Result<f64> {
    x.same_dims(y)?;
    let (h, w, k) = (x.height, x.width, SSIM_WINDOW);
    if h < k || w < k {
        return Err(Error::Dim {
            what: "ssim image extent",
            expected: k,
            actual: h.min(w),
        });
    }
    let lx = luma(x);
    let ly = luma(y);
    let xx: Vec<f64> = lx.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ly.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = lx.iter().zip(&ly).map(|(a, b)| a * b).collect();
    let [sx, sy, sxx, syy, sxy] = [&lx, &ly, &xx, &yy, &xy].map(|img| box_sums(img, h, w, k));
    let n = (k * k) as f64;
    let mut total = 0.0;
    for i in 0..sx.len() {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / sx.len() as f64)
}

fn same(op: &'static str, a: &Tensor, b: &Tensor, cols: Option<usize>) -> Result<()> {
    if a.shape() != b.shape() || !a.is_matrix() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if let Some(c) = cols {
        if a.cols() != c {
            return Err(Error::Dim {
                what: "metric columns",
                expected: c,
                actual: a.cols(),
            });
        }
    }
    Ok(())
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.rows() as f64
}

/// Frame-mean L2 distance between expression coefficient rows, divided by E.
pub fn aed(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same("aed", pred, gt, None)?;
    Ok(mean_row_distance(pred, gt) / pred.cols() as f64)
}

/// Frame-mean L2 distance between jaw axis-angle rows.
pub fn apd(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same("apd", pred, gt, Some(3))?;
    Ok(mean_row_distance(pred, gt))
}

/// Root mean square of per-vertex Euclidean distances.
pub fn vertex_rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same("vertex_rmse", a, b, Some(3))?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.rows() as f64).sqrt())
}
