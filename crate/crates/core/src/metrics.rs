//! Segmentation scores, image fidelity, and match-count threshold sweeps.
//!
//! Masks follow the static-map convention: `true` is static, `false` is
//! transient.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Image};
use crate::sfm::{SfmError, SparseReconstruction};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: u32, height: u32, window: usize },
    #[error("no ground-truth mask for image {0}")]
    UnknownImage(String),
    #[error(transparent)]
    Sfm(#[from] SfmError),
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimensionMismatch(format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    /// Both transient.
    tp: usize,
    /// Predicted transient, actually static.
    fp: usize,
    /// Predicted static, actually transient.
    fn_: usize,
    /// Both static.
    tn: usize,
}

fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion, MetricsError> {
    same_dims(pred.dims(), gt.dims())?;
    let mut c = Confusion::default();
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        match (*p, *g) {
            (false, false) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (true, true) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Intersection-over-union of the transient class alone.
pub fn transient_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    let c = confusion(pred, gt)?;
    Ok(iou(c.tp, c.tp + c.fp + c.fn_))
}

/// Mean of the static-class and transient-class IoU. A class absent from
/// both maps scores 1.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    let c = confusion(pred, gt)?;
    let transient = iou(c.tp, c.tp + c.fp + c.fn_);
    let stat = iou(c.tn, c.tn + c.fp + c.fn_);
    Ok((transient + stat) / 2.0)
}

/// F1 of the transient class; 1 when neither map has transient pixels.
pub fn f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub miou: f64,
    pub f1: f64,
    pub transient_iou: f64,
}

pub fn segmentation_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegmentationScores, MetricsError> {
    Ok(SegmentationScores {
        miou: miou(pred, gt)?,
        f1: f1(pred, gt)?,
        transient_iou: transient_iou(pred, gt)?,
    })
}

/// Mean over images; `None` for an empty list.
pub fn mean_segmentation_scores(scores: &[SegmentationScores]) -> Option<SegmentationScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(SegmentationScores {
        miou: scores.iter().map(|s| s.miou).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        transient_iou: scores.iter().map(|s| s.transient_iou).sum::<f64>() / n,
    })
}

/// Peak signal-to-noise ratio for `[0, 1]` images; `+inf` when identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_dims(a.dims(), b.dims())?;
    let mut sum = 0.0;
    for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            sum += d * d;
        }
    }
    let mse = sum / (3 * a.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn luminance(image: &Image) -> Vec<f64> {
    image
        .pixels()
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance channels, averaged over
/// every position where the 11×11 Gaussian window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_dims(a.dims(), b.dims())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall {
            width: a.width(),
            height: a.height(),
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel();
    let (la, lb) = (luminance(a), luminance(b));
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let aa = filter_valid(&sq(&la, &la), w, h, &k);
    let bb = filter_valid(&sq(&lb, &lb), w, h, &k);
    let ab = filter_valid(&sq(&la, &lb), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub thresholds: Vec<f64>,
    pub static_survival: Vec<f64>,
    pub transient_survival: Vec<f64>,
    pub static_features: usize,
    pub transient_features: usize,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,static_survival,transient_survival\n");
        for i in 0..self.thresholds.len() {
            let _ = writeln!(
                out,
                "{},{},{}",
                self.thresholds[i], self.static_survival[i], self.transient_survival[i]
            );
        }
        out
    }
}

/// For each threshold `t`, the fraction of features with occurrence ratio
/// `n / N_I ≥ t`, separately for features whose pixel is transient and
/// static in `gt_static` (keyed by image name). An empty class survives at
/// rate 1.
pub fn threshold_sweep(
    recon: &SparseReconstruction,
    gt_static: &BTreeMap<String, BinaryMask>,
    thresholds: &[f64],
) -> Result<SweepCurve, MetricsError> {
    let total = recon.image_count() as f64;
    let mut ratios_static = Vec::new();
    let mut ratios_transient = Vec::new();
    for (id, image) in recon.images() {
        let mask = gt_static
            .get(&image.name)
            .ok_or_else(|| MetricsError::UnknownImage(image.name.clone()))?;
        let cam = recon.camera_of(image);
        same_dims(mask.dims(), (cam.width, cam.height))?;
        for (idx, n) in recon.match_counts(*id)? {
            let xy = image.features[idx].xy;
            let ratio = f64::from(n) / total;
            if mask.get(xy.x.floor() as u32, xy.y.floor() as u32) {
                ratios_static.push(ratio);
            } else {
                ratios_transient.push(ratio);
            }
        }
    }
    let survival = |ratios: &[f64], t: f64| {
        if ratios.is_empty() {
            1.0
        } else {
            ratios.iter().filter(|r| **r >= t).count() as f64 / ratios.len() as f64
        }
    };
    Ok(SweepCurve {
        thresholds: thresholds.to_vec(),
        static_survival: thresholds.iter().map(|t| survival(&ratios_static, *t)).collect(),
        transient_survival: thresholds.iter().map(|t| survival(&ratios_transient, *t)).collect(),
        static_features: ratios_static.len(),
        transient_features: ratios_transient.len(),
    })
}

/// Per-image fidelity of a render against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn image_scores(rendered: &Image, reference: &Image) -> Result<ImageScores, MetricsError> {
    Ok(ImageScores {
        psnr: psnr(rendered, reference)?,
        ssim: ssim(rendered, reference)?,
    })
}

pub fn mean_image_scores(scores: &[ImageScores]) -> Option<ImageScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(ImageScores {
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: u32, h: u32, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(w, h, bits.iter().map(|b| *b == 1).collect()).unwrap()
    }

    #[test]
    fn hand_counted_miou() {
        let gt = mask(2, 2, &[0, 1, 1, 1]);
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        assert!((miou(&pred, &gt).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(miou(&gt.complement(), &mask(2, 2, &[1, 0, 0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn half_split_complement_scores_zero() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        assert_eq!(miou(&gt.complement(), &gt).unwrap(), 0.0);
        assert_eq!(f1(&gt.complement(), &gt).unwrap(), 0.0);
    }

    #[test]
    fn f1_cases() {
        let gt = mask(4, 1, &[0, 1, 1, 1]);
        let pred = mask(4, 1, &[0, 0, 1, 1]);
        assert!((f1(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&BinaryMask::ones(3, 3), &BinaryMask::ones(3, 3)).unwrap(), 1.0);
        assert!(f1(&BinaryMask::ones(3, 3), &BinaryMask::ones(2, 3)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.2, 0.3, 0.4]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.7, 0.8, 0.9]);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        let c = Image::filled(4, 4, [0.3, 0.4, 0.5]);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_use_luminance_only() {
        let a = Image::filled(16, 16, [0.2; 3]);
        let b = Image::filled(16, 16, [0.6; 3]);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 8, [0.0; 3])), Err(MetricsError::ImageTooSmall { .. })));
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }
}
