//! Image quality metrics: SSIM (11x11 Gaussian window, sigma 1.5,
//! K1 = 0.01, K2 = 0.03, dynamic range matching the [-1, 1] encoding),
//! PSNR and mask IoU.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Images are encoded in [-1, 1].
pub const DYNAMIC_RANGE: f64 = 2.0;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Weighted local sums of one plane with the separable Gaussian, `valid`
/// region only.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let oh = h - k + 1;
    let ow = w - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (j, wv) in win.iter().enumerate() {
                acc += wv * plane[r * w + c + j];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (j, wv) in win.iter().enumerate() {
                acc += wv * tmp[(r + j) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let prod_ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let sq_a: Vec<f64> = a.iter().map(|&x| x * x).collect();
    let sq_b: Vec<f64> = b.iter().map(|&y| y * y).collect();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &win);
    let (mu_b, _, _) = filter_valid(b, h, w, &win);
    let (e_ab, _, _) = filter_valid(&prod_ab, h, w, &win);
    let (e_aa, _, _) = filter_valid(&sq_a, h, w, &win);
    let (e_bb, _, _) = filter_valid(&sq_b, h, w, &win);

    let c1 = (SSIM_K1 * DYNAMIC_RANGE) * (SSIM_K1 * DYNAMIC_RANGE);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE) * (SSIM_K2 * DYNAMIC_RANGE);
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += val;
    }
    acc / (oh * ow) as f64
}

/// Mean SSIM over channels. Inputs must share extents and be at least the
/// window size.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::shape("[C, H, W] or [H, W]", format!("{:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0;
    for ch in 0..c {
        let plane_a: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let plane_b: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        total += ssim_plane(&plane_a, &plane_b, h, w);
    }
    Ok(total / c as f64)
}

/// Peak signal-to-noise ratio in dB over the [-1, 1] range.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

/// Intersection-over-union of masks binarized at 0.5. Two empty masks count
/// as IoU 1.
pub fn mask_iou<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let half = S::from_f64_c(0.5);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = (x >= half, y >= half);
        if p && q {
            inter += 1;
        }
        if p || q {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
