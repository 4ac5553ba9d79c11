//! Image quality metrics: PSNR, SSIM and the combined two-term summary.
//!
//! The summary is a geometric mean of `MSE = 10^(-PSNR/10)` and
//! `sqrt(1 - SSIM)`. The perceptual third term used elsewhere needs a
//! pretrained network and is deliberately omitted, so the summary is labeled
//! `avg2` in every output to prevent cross-comparison with three-term
//! numbers.

use crate::dataset::ImageF32;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("images must be at least 11x11 for SSIM, got {0}x{1}")]
    TooSmall(u32, u32),
    #[error("ssim {0} exceeds 1")]
    SsimAboveOne(f64),
}

/// Peak signal-to-noise ratio in dB over all channels. Identical images
/// report positive infinity.
pub fn psnr(a: &ImageF32, b: &ImageF32) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// evaluated on valid windows only, per channel, then averaged.
pub fn ssim(a: &ImageF32, b: &ImageF32) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.width, a.height));
    }
    let win = gaussian_window();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        // Channel planes in f64.
        let plane = |img: &ImageF32| -> Vec<f64> {
            img.data.iter().skip(ch).step_by(3).map(|v| *v as f64).collect()
        };
        let pa = plane(a);
        let pb = plane(b);
        // Separable weighted pass: horizontal then vertical.
        let hpass = |p: &[f64]| -> Vec<f64> {
            let ow = w - SSIM_WINDOW + 1;
            let mut out = vec![0.0; ow * h];
            for r in 0..h {
                for c in 0..ow {
                    let mut s = 0.0;
                    for (k, wt) in win.iter().enumerate() {
                        s += wt * p[r * w + c + k];
                    }
                    out[r * ow + c] = s;
                }
            }
            out
        };
        let vpass = |p: &[f64], ow: usize| -> Vec<f64> {
            let oh = h - SSIM_WINDOW + 1;
            let mut out = vec![0.0; ow * oh];
            for r in 0..oh {
                for c in 0..ow {
                    let mut s = 0.0;
                    for (k, wt) in win.iter().enumerate() {
                        s += wt * p[(r + k) * ow + c];
                    }
                    out[r * ow + c] = s;
                }
            }
            out
        };
        let ow = w - SSIM_WINDOW + 1;
        let smooth = |p: &[f64]| vpass(&hpass(p), ow);
        let pa2: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pb2: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();
        let mu_a = smooth(&pa);
        let mu_b = smooth(&pb);
        let e_a2 = smooth(&pa2);
        let e_b2 = smooth(&pb2);
        let e_ab = smooth(&pab);
        for i in 0..mu_a.len() {
            let va = e_a2[i] - mu_a[i] * mu_a[i];
            let vb = e_b2[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let s = ((2.0 * mu_a[i] * mu_b[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1) * (va + vb + SSIM_C2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Two-term geometric mean summary: `sqrt(10^(-psnr/10) * sqrt(1 - ssim))`.
/// Lower is better; zero when either metric is perfect.
pub fn average_metric(psnr_db: f64, ssim_val: f64) -> Result<f64, MetricsError> {
    if ssim_val > 1.0 {
        return Err(MetricsError::SsimAboveOne(ssim_val));
    }
    let mse = 10f64.powf(-psnr_db / 10.0);
    Ok((mse * (1.0 - ssim_val).sqrt()).sqrt())
}

/// Metric triple for one (image, reference) pair.
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Two-term summary; see [`average_metric`].
    pub avg2: f64,
}

pub fn report(rendered: &ImageF32, reference: &ImageF32) -> Result<MetricReport, MetricsError> {
    let p = psnr(rendered, reference)?;
    let s = ssim(rendered, reference)?;
    Ok(MetricReport { psnr: p, ssim: s, avg2: average_metric(p, s)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn constant(w: u32, h: u32, v: f32) -> ImageF32 {
        ImageF32 { width: w, height: h, data: vec![v; (w * h * 3) as usize] }
    }

    fn random_image(w: u32, h: u32, tag: u64) -> ImageF32 {
        let mut rng = crate::rng::stream_rng(tag, &[crate::rng::stream::ORACLE, 60]);
        ImageF32 {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f32>()).collect(),
        }
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = random_image(16, 16, 1);
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_unit_error_is_zero_db() {
        let a = constant(8, 8, 0.0);
        let b = constant(8, 8, 1.0);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_tenth_error_is_twenty_db() {
        let a = constant(8, 8, 0.0);
        let b = constant(8, 8, 0.1);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-4);
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = random_image(12, 9, 2);
        let b = random_image(12, 9, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_rejects_dimension_mismatch() {
        let a = constant(8, 8, 0.0);
        let b = constant(8, 9, 0.0);
        assert!(matches!(psnr(&a, &b), Err(MetricsError::DimensionMismatch(..))));
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = random_image(16, 16, 4);
        assert_relative_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        // A binary pattern against its inverse.
        let mut a = constant(16, 16, 0.0);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = if (i / 3) % 2 == 0 { 1.0 } else { 0.0 };
        }
        let b = ImageF32 {
            width: 16,
            height: 16,
            data: a.data.iter().map(|v| 1.0 - v).collect(),
        };
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant(10, 10, 0.5);
        assert!(matches!(ssim(&a, &a), Err(MetricsError::TooSmall(..))));
    }

    /// Straightforward scalar-loop SSIM used as an independent oracle: no
    /// separable passes, everything written out directly.
    fn ssim_naive(a: &ImageF32, b: &ImageF32) -> f64 {
        let win = gaussian_window();
        let (w, h) = (a.width as usize, a.height as usize);
        let mut acc = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for r in 0..=(h - SSIM_WINDOW) {
                for c in 0..=(w - SSIM_WINDOW) {
                    let (mut ma, mut mb, mut ea2, mut eb2, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = win[i] * win[j];
                            let x = a.data[((r + i) * w + c + j) * 3 + ch] as f64;
                            let y = b.data[((r + i) * w + c + j) * 3 + ch] as f64;
                            ma += wt * x;
                            mb += wt * y;
                            ea2 += wt * x * x;
                            eb2 += wt * y * y;
                            eab += wt * x * y;
                        }
                    }
                    let va = ea2 - ma * ma;
                    let vb = eb2 - mb * mb;
                    let cov = eab - ma * mb;
                    acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_independent_scalar_loop() {
        let a = random_image(20, 14, 5);
        // A structured perturbation of a, not just noise.
        let mut b = a.clone();
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = (*v * 0.9 + 0.05 + 0.02 * ((i % 17) as f32 / 17.0)).clamp(0.0, 1.0);
        }
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_naive(&a, &b);
        assert_relative_eq!(fast, slow, epsilon = 1e-3);
        assert!(fast < 1.0);
    }

    #[test]
    fn average_metric_limits_and_value() {
        assert_eq!(average_metric(f64::INFINITY, 0.5).unwrap(), 0.0);
        assert_eq!(average_metric(30.0, 1.0).unwrap(), 0.0);
        // psnr=20, ssim=0.96: sqrt(0.01 * sqrt(0.04)) = sqrt(0.002).
        assert_relative_eq!(
            average_metric(20.0, 0.96).unwrap(),
            (0.01f64 * 0.2).sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(average_metric(20.0, 0.96).unwrap(), 0.04472, max_relative = 1e-3);
    }

    #[test]
    fn average_metric_rejects_ssim_above_one() {
        assert!(matches!(
            average_metric(20.0, 1.0 + 1e-9),
            Err(MetricsError::SsimAboveOne(_))
        ));
    }

    #[test]
    fn average_metric_strictly_monotone() {
        let mut rng = crate::rng::stream_rng(6, &[crate::rng::stream::ORACLE, 61]);
        for _ in 0..200 {
            let p: f64 = rng.random_range(5.0..45.0);
            let s: f64 = rng.random_range(-0.5..0.999);
            let base = average_metric(p, s).unwrap();
            assert!(average_metric(p + 0.5, s).unwrap() < base, "psnr up, metric down");
            assert!(average_metric(p, s + 1e-4).unwrap() < base, "ssim up, metric down");
        }
    }
}
