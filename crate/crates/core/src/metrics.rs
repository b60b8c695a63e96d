//! Full-reference image quality: PSNR and SSIM. Inputs are clamped to
//! `[0,1]` before scoring.

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::tensor::{Float, Tensor};

/// Reported PSNR for identical images, and the ceiling used when averaging.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn clamped<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    t.data()
        .iter()
        .map(|v| v.as_f64().clamp(0.0, 1.0))
        .collect()
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr<T: Float>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    max_val: f64,
) -> Result<f64, MetricError> {
    same_shape(pred, target)?;
    let (a, b) = (clamped(pred), clamped(target));
    let mse = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    })
}

/// [`psnr`] limited to [`PSNR_CAP_DB`].
pub fn psnr_capped<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, MetricError> {
    Ok(psnr(pred, target, 1.0)?.min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let e_aa = filter_valid(&prod(a, a), h, w, g);
    let e_bb = filter_valid(&prod(b, b), h, w, g);
    let e_ab = filter_valid(&prod(a, b), h, w, g);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over the
/// valid region, averaged over channels. Accepts `[H,W]` or `[C,H,W]`.
pub fn ssim<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, MetricError> {
    same_shape(pred, target)?;
    let (c, h, w) = match *pred.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(MetricError::Rank(s.to_vec())),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let (a, b) = (clamped(pred), clamped(target));
    let n = h * w;
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(&a[ch * n..(ch + 1) * n], &b[ch * n..(ch + 1) * n], h, w, &g))
        .sum();
    Ok(sum / c as f64)
}

/// Scores of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    /// Capped at [`PSNR_CAP_DB`].
    pub psnr_db: f64,
    pub ssim: f64,
}

impl ImageScore {
    pub fn compute<T: Float>(
        name: impl Into<String>,
        pred: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<Self, MetricError> {
        Ok(ImageScore {
            name: name.into(),
            psnr_db: psnr_capped(pred, target)?,
            ssim: ssim(pred, target)?,
        })
    }
}

/// Mean scores over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn aggregate(scores: &[ImageScore]) -> Result<Self, MetricError> {
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = scores.len() as f64;
        Ok(MetricReport {
            psnr_db: scores.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
            n_images: scores.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use proptest::prelude::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(
            shape,
            Init::Uniform {
                seed,
                low: 0.0,
                high: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn psnr_of_constants() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.25);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * 16f64.log10()).abs() < 1e-12);
        assert!((p - 12.04).abs() < 0.01);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), 100.0);
        assert!(psnr(&a, &Tensor::full(&[3, 8, 7], 0.5), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_naive_mse() {
        let (a, b) = (rand(&[2, 5, 7], 1), rand(&[2, 5, 7], 2));
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 70.0;
        assert!((psnr(&a, &b, 1.0).unwrap() - (-10.0 * mse.log10())).abs() < 1e-10);
    }

    #[test]
    fn psnr_clamps_inputs() {
        let a = Tensor::full(&[4, 4], 1.5);
        let b = Tensor::full(&[4, 4], 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_cases() {
        let a = rand(&[3, 16, 16], 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        // constants: only the luminance term differs from one
        let (x, y) = (0.3, 0.4);
        let c1 = 1e-4;
        let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let s = ssim(&Tensor::full(&[12, 13], x), &Tensor::full(&[12, 13], y)).unwrap();
        assert!((s - want).abs() < 1e-12);
        assert!(matches!(
            ssim(&Tensor::<f64>::zeros(&[10, 20]), &Tensor::zeros(&[10, 20])),
            Err(MetricError::TooSmall { .. })
        ));
    }

    #[test]
    fn window_is_normalised() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn aggregate_is_mean() {
        let s = [
            ImageScore {
                name: "a".into(),
                psnr_db: 30.0,
                ssim: 0.9,
            },
            ImageScore {
                name: "b".into(),
                psnr_db: 100.0,
                ssim: 1.0,
            },
        ];
        let r = MetricReport::aggregate(&s).unwrap();
        assert_eq!((r.psnr_db, r.ssim, r.n_images), (65.0, 0.95, 2));
        assert_eq!(MetricReport::aggregate(&[]), Err(MetricError::Empty));
    }

    proptest! {
        #[test]
        fn symmetric_and_flip_invariant(seed in 0u64..1000, v in any::<bool>(), h in any::<bool>()) {
            let (a, b) = (rand(&[2, 12, 14], seed), rand(&[2, 12, 14], seed + 1));
            let p = psnr(&a, &b, 1.0).unwrap();
            let s = ssim(&a, &b).unwrap();
            prop_assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
            prop_assert_eq!(s, ssim(&b, &a).unwrap());
            let (fa, fb) = (a.flip_hw(v, h), b.flip_hw(v, h));
            prop_assert!((psnr(&fa, &fb, 1.0).unwrap() - p).abs() < 1e-9);
            prop_assert!((ssim(&fa, &fb).unwrap() - s).abs() < 1e-12);
        }
    }
}
