//! Image-level building blocks of the burst simulator. All images are
//! `Tensor<f64>` laid out `[C,H,W]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::nn::bilinear_at;
use crate::tensor::Tensor;

/// Colour correction matrix from camera RGB to linear sRGB. Identity, so the
/// inverse applied during unprocessing is the identity too.
pub const CCM: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Range of the red and blue white-balance gains.
pub const WB_GAIN_RANGE: (f64, f64) = (1.5, 2.5);

fn planes(img: &Tensor<f64>, op: &'static str) -> Result<(usize, usize, usize), SimError> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(SimError::InvalidArgument(format!(
            "{op} expects [C,H,W], got {s:?}"
        ))),
    }
}

/// sRGB electro-optical transfer: encoded value to linear intensity.
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteBalance {
    pub red: f64,
    pub blue: f64,
}

impl WhiteBalance {
    pub const UNIT: WhiteBalance = WhiteBalance {
        red: 1.0,
        blue: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (lo, hi) = WB_GAIN_RANGE;
        WhiteBalance {
            red: rng.random_range(lo..=hi),
            blue: rng.random_range(lo..=hi),
        }
    }
}

/// sRGB `[3,H,W]` in `[0,1]` to linear camera RGB: de-gamma, inverse colour
/// correction, division by the white-balance gains, clamp to `[0,1]`.
pub fn inverse_isp(
    srgb: &Tensor<f64>,
    ccm_inv: &[[f64; 3]; 3],
    wb: WhiteBalance,
) -> Result<Tensor<f64>, SimError> {
    let (c, h, w) = planes(srgb, "inverse_isp")?;
    if c != 3 {
        return Err(SimError::InvalidArgument(format!(
            "inverse_isp needs 3 channels, got {c}"
        )));
    }
    if srgb.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(SimError::OutOfRange("inverse_isp"));
    }
    let n = h * w;
    let lin: Vec<f64> = srgb.data().iter().map(|&v| srgb_to_linear(v)).collect();
    let gains = [1.0 / wb.red, 1.0, 1.0 / wb.blue];
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let px = [lin[i], lin[n + i], lin[2 * n + i]];
        for (o, row) in ccm_inv.iter().enumerate() {
            let v = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
            out[o * n + i] = (v * gains[o]).clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], out)?)
}

/// Rigid motion of one frame relative to the base: rotation by
/// `rotation_deg` about the image centre followed by a shift of `(dx, dy)`
/// pixels. Frame content moves with the transform.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        dx: 0.0,
        dy: 0.0,
        rotation_deg: 0.0,
    };

    pub fn sample(max_translation: f64, max_rotation_deg: f64, rng: &mut impl Rng) -> Self {
        let mut u = |m: f64| {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        };
        let dx = u(max_translation);
        let dy = u(max_translation);
        let rotation_deg = u(max_rotation_deg);
        Transform {
            dx,
            dy,
            rotation_deg,
        }
    }

    /// Largest displacement of any point within `radius` of the centre.
    pub fn max_displacement(max_translation: f64, max_rotation_deg: f64, radius: f64) -> f64 {
        let theta = max_rotation_deg.to_radians();
        max_translation * std::f64::consts::SQRT_2 + 2.0 * radius * (theta / 2.0).sin()
    }
}

/// Resamples `img` under `t` with bilinear interpolation and zero fill.
pub fn warp(img: &Tensor<f64>, t: &Transform) -> Result<Tensor<f64>, SimError> {
    let (_, h, w) = planes(img, "warp")?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = t.rotation_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(img.numel());
    for plane in img.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 - cx - t.dx, y as f64 - cy - t.dy);
                let sx = co * px + s * py + cx;
                let sy = -s * px + co * py + cy;
                out.push(bilinear_at(plane, h, w, sy, sx));
            }
        }
    }
    Ok(Tensor::from_vec(img.shape(), out)?)
}

/// Draws a transform within the bounds and applies it.
pub fn random_warp(
    img: &Tensor<f64>,
    max_translation: f64,
    max_rotation_deg: f64,
    seed: u64,
) -> Result<(Tensor<f64>, Transform), SimError> {
    if !(max_translation >= 0.0 && max_rotation_deg >= 0.0) {
        return Err(SimError::InvalidArgument(
            "warp bounds must be non-negative".into(),
        ));
    }
    let t = Transform::sample(
        max_translation,
        max_rotation_deg,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    Ok((warp(img, &t)?, t))
}

/// Bilinear resize by `1/factor` with half-pixel centres.
pub fn downsample_bilinear(img: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>, SimError> {
    let (c, h, w) = planes(img, "downsample_bilinear")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(SimError::InvalidArgument(format!(
            "{h}x{w} is not divisible by {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = |i: usize| (i as f64 + 0.5) * factor as f64 - 0.5;
    let mut out = Vec::with_capacity(c * ho * wo);
    for plane in img.data().chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                out.push(bilinear_at(plane, h, w, src(y), src(x)));
            }
        }
    }
    Ok(Tensor::from_vec(&[c, ho, wo], out)?)
}

/// RGGB phase of each packed channel: (row, column) inside the 2×2 tile and
/// the RGB plane it samples.
pub const BAYER_SITES: [(usize, usize, usize); 4] = [(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 2)];

fn even_dims(h: usize, w: usize) -> Result<(), SimError> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SimError::InvalidArgument(format!(
            "Bayer mosaics need even extents, got {h}x{w}"
        )));
    }
    Ok(())
}

/// RGGB mosaic of linear RGB `[3,H,W]`, packed as `[R,G1,G2,B]` at half size.
pub fn mosaic_and_pack(rgb: &Tensor<f64>) -> Result<Tensor<f64>, SimError> {
    let (c, h, w) = planes(rgb, "mosaic_and_pack")?;
    if c != 3 {
        return Err(SimError::InvalidArgument(format!(
            "mosaic_and_pack needs 3 channels, got {c}"
        )));
    }
    even_dims(h, w)?;
    let d = rgb.data();
    let (hp, wp) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(4 * hp * wp);
    for &(dy, dx, plane) in &BAYER_SITES {
        for y in 0..hp {
            for x in 0..wp {
                out.push(d[(plane * h + 2 * y + dy) * w + 2 * x + dx]);
            }
        }
    }
    Ok(Tensor::from_vec(&[4, hp, wp], out)?)
}

/// Single-plane RGGB mosaic `[1,H,W]` of linear RGB.
pub fn mosaic(rgb: &Tensor<f64>) -> Result<Tensor<f64>, SimError> {
    unpack(&mosaic_and_pack(rgb)?)
}

/// Inverse of packing: `[4,h,w]` back to the `[1,2h,2w]` mosaic.
pub fn unpack(packed: &Tensor<f64>) -> Result<Tensor<f64>, SimError> {
    let (c, hp, wp) = planes(packed, "unpack")?;
    if c != 4 {
        return Err(SimError::InvalidArgument(format!(
            "unpack needs 4 channels, got {c}"
        )));
    }
    let (h, w) = (2 * hp, 2 * wp);
    let mut out = vec![0.0; h * w];
    for (ch, &(dy, dx, _)) in BAYER_SITES.iter().enumerate() {
        for y in 0..hp {
            for x in 0..wp {
                out[(2 * y + dy) * w + 2 * x + dx] = packed.data()[(ch * hp + y) * wp + x];
            }
        }
    }
    Ok(Tensor::from_vec(&[1, h, w], out)?)
}

/// Gain labels and their `(log10 σ_r, log10 σ_s)` pairs.
pub const GAIN_TABLE: [(u32, f64, f64); 4] = [
    (1, -2.2, -2.6),
    (2, -1.8, -2.2),
    (4, -1.4, -1.8),
    (8, -1.1, -1.5),
];

/// Gain used only at evaluation time.
pub const UNSEEN_GAIN: u32 = 8;

/// Read/shot noise levels. Per-pixel variance at signal `x` is
/// `sigma_read² + sigma_shot·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub sigma_read: f64,
    pub sigma_shot: f64,
    /// Table label these levels came from, if any.
    pub gain: Option<u32>,
}

impl NoiseParams {
    pub fn for_gain(gain: u32) -> Result<Self, SimError> {
        let &(_, r, s) = GAIN_TABLE
            .iter()
            .find(|g| g.0 == gain)
            .ok_or(SimError::InvalidGain(gain))?;
        Ok(NoiseParams {
            sigma_read: 10f64.powf(r),
            sigma_shot: 10f64.powf(s),
            gain: Some(gain),
        })
    }

    pub fn custom(sigma_read: f64, sigma_shot: f64) -> Result<Self, SimError> {
        if !(sigma_read >= 0.0
            && sigma_shot >= 0.0
            && sigma_read.is_finite()
            && sigma_shot.is_finite())
        {
            return Err(SimError::InvalidArgument(format!(
                "noise levels ({sigma_read}, {sigma_shot}) must be finite and >= 0"
            )));
        }
        Ok(NoiseParams {
            sigma_read,
            sigma_shot,
            gain: None,
        })
    }

    pub fn none() -> Self {
        NoiseParams {
            sigma_read: 0.0,
            sigma_shot: 0.0,
            gain: None,
        }
    }

    pub fn variance(&self, x: f64) -> f64 {
        self.sigma_read * self.sigma_read + self.sigma_shot * x
    }

    /// True for the gain held out of training.
    pub fn unseen(&self) -> bool {
        self.gain == Some(UNSEEN_GAIN)
    }
}

/// Adds zero-mean Gaussian noise of variance `p.variance(x)` to every value.
/// The result is not clamped.
pub fn add_noise(x: &Tensor<f64>, p: &NoiseParams, seed: u64) -> Result<Tensor<f64>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let var = p.variance(v);
        if !(var >= 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "negative noise variance {var} at signal {v}"
            )));
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        out.push(v + var.sqrt() * z);
    }
    Ok(Tensor::from_vec(x.shape(), out)?)
}

/// Integer translation with zero fill: `out[y][x] = img[y-dy][x-dx]`.
pub fn shift(img: &Tensor<f64>, dx: i64, dy: i64) -> Result<Tensor<f64>, SimError> {
    let (_, h, w) = planes(img, "shift")?;
    let mut out = Vec::with_capacity(img.numel());
    for plane in img.data().chunks(h * w) {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                out.push(if inside {
                    plane[(sy * w as i64 + sx) as usize]
                } else {
                    0.0
                });
            }
        }
    }
    Ok(Tensor::from_vec(img.shape(), out)?)
}

/// `[C,H,W]` window starting at `(y0, x0)`.
pub fn crop(
    img: &Tensor<f64>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<f64>, SimError> {
    let (_, sh, sw) = planes(img, "crop")?;
    if y0 + h > sh || x0 + w > sw {
        return Err(SimError::SourceTooSmall {
            got_h: sh,
            got_w: sw,
            need_h: y0 + h,
            need_w: x0 + w,
        });
    }
    let mut out = Vec::with_capacity(img.shape()[0] * h * w);
    for plane in img.data().chunks(sh * sw) {
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * sw + x0..y * sw + x0 + w]);
        }
    }
    Ok(Tensor::from_vec(&[img.shape()[0], h, w], out)?)
}

/// BT.601 luma of an sRGB image, `[1,H,W]`.
pub fn to_gray(rgb: &Tensor<f64>) -> Result<Tensor<f64>, SimError> {
    let (c, h, w) = planes(rgb, "to_gray")?;
    if c == 1 {
        return Ok(rgb.clone());
    }
    if c != 3 {
        return Err(SimError::InvalidArgument(format!(
            "to_gray needs 1 or 3 channels, got {c}"
        )));
    }
    let n = h * w;
    let d = rgb.data();
    let out = (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect();
    Ok(Tensor::from_vec(&[1, h, w], out)?)
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
    fn eotf_values() {
        assert_eq!(srgb_to_linear(0.0), 0.0);
        assert_eq!(srgb_to_linear(1.0), 1.0);
        // ((0.5 + 0.055) / 1.055)^2.4
        assert!((srgb_to_linear(0.5) - 0.214_041_140_5).abs() < 1e-9);
        for v in [0.01, 0.3, 0.9] {
            assert!((linear_to_srgb(srgb_to_linear(v)) - v).abs() < 1e-12);
        }
        // the two standard breakpoints disagree in the eighth decimal
        assert!((linear_to_srgb(srgb_to_linear(0.04045)) - 0.04045).abs() < 1e-6);
    }

    #[test]
    fn inverse_isp_endpoints_and_degamma() {
        let x = rand(&[3, 4, 5], 1);
        let unit = inverse_isp(&x, &CCM, WhiteBalance::UNIT).unwrap();
        for (a, b) in unit.data().iter().zip(x.data()) {
            assert_eq!(*a, srgb_to_linear(*b));
        }
        let ones = Tensor::full(&[3, 2, 2], 1.0);
        let wb = WhiteBalance {
            red: 2.0,
            blue: 1.6,
        };
        let y = inverse_isp(&ones, &CCM, wb).unwrap();
        assert_eq!(y.index0(0).data(), &[0.5; 4]);
        assert_eq!(y.index0(1).data(), &[1.0; 4]);
        assert_eq!(y.index0(2).data(), &[0.625; 4]);
        assert_eq!(
            inverse_isp(&Tensor::zeros(&[3, 2, 2]), &CCM, wb)
                .unwrap()
                .sum(),
            0.0
        );
        assert!(matches!(
            inverse_isp(&Tensor::full(&[3, 1, 1], 1.5), &CCM, wb),
            Err(SimError::OutOfRange(_))
        ));
    }

    #[test]
    fn zero_warp_is_identity() {
        let x = rand(&[2, 9, 7], 2);
        let (y, t) = random_warp(&x, 0.0, 0.0, 5).unwrap();
        assert_eq!(t, Transform::IDENTITY);
        assert_eq!(y, x);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let x = rand(&[1, 10, 12], 3);
        let y = warp(
            &x,
            &Transform {
                dx: 2.0,
                dy: 0.0,
                rotation_deg: 0.0,
            },
        )
        .unwrap();
        for r in 0..10 {
            for c in 2..12 {
                assert!((y.data()[r * 12 + c] - x.data()[r * 12 + c - 2]).abs() < 1e-12);
            }
        }
        assert_eq!(y, shift(&x, 2, 0).unwrap());
    }

    #[test]
    fn recorded_transform_reproduces_warp() {
        let x = rand(&[3, 16, 16], 4);
        let (y, t) = random_warp(&x, 3.0, 1.0, 9).unwrap();
        assert_eq!(warp(&x, &t).unwrap(), y);
        assert!(t.dx.abs() <= 3.0 && t.dy.abs() <= 3.0 && t.rotation_deg.abs() <= 1.0);
    }

    #[test]
    fn rotation_about_centre() {
        // a quarter turn maps the top-left corner onto the top-right corner
        let mut x = Tensor::<f64>::zeros(&[1, 5, 5]);
        x.data_mut()[0] = 1.0;
        let y = warp(
            &x,
            &Transform {
                dx: 0.0,
                dy: 0.0,
                rotation_deg: 90.0,
            },
        )
        .unwrap();
        let hot: Vec<usize> = (0..25).filter(|&i| y.data()[i] > 0.5).collect();
        assert_eq!(hot.len(), 1);
        assert!(hot[0] == 4 || hot[0] == 20);
    }

    #[test]
    fn downsample_cases() {
        let c = Tensor::full(&[3, 8, 8], 0.3);
        assert!(downsample_bilinear(&c, 4)
            .unwrap()
            .data()
            .iter()
            .all(|v| (v - 0.3).abs() < 1e-15));
        let x = rand(&[2, 6, 6], 5);
        assert_eq!(downsample_bilinear(&x, 1).unwrap(), x);
        let checker = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect(),
        )
        .unwrap();
        assert_eq!(downsample_bilinear(&checker, 2).unwrap().data(), &[0.5; 4]);
        assert!(downsample_bilinear(&x, 4).is_err());
    }

    #[test]
    fn packing_cases() {
        let gray = Tensor::full(&[3, 4, 6], 0.7);
        let p = mosaic_and_pack(&gray).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 0.7));
        let mut red = Tensor::zeros(&[3, 4, 4]);
        let r = rand(&[1, 4, 4], 6);
        red.data_mut()[..16].copy_from_slice(r.data());
        let p = mosaic_and_pack(&red).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(p.data()[y * 2 + x], r.data()[2 * y * 4 + 2 * x]);
            }
        }
        assert_eq!(p.data()[4..].iter().sum::<f64>(), 0.0);
        assert!(mosaic_and_pack(&Tensor::zeros(&[3, 3, 4])).is_err());
    }

    #[test]
    fn gain_table_values() {
        let p = NoiseParams::for_gain(1).unwrap();
        assert_eq!(
            (p.sigma_read, p.sigma_shot),
            (10f64.powf(-2.2), 10f64.powf(-2.6))
        );
        let p = NoiseParams::for_gain(8).unwrap();
        assert_eq!(
            (p.sigma_read, p.sigma_shot),
            (10f64.powf(-1.1), 10f64.powf(-1.5))
        );
        assert!(p.unseen());
        assert!(!NoiseParams::for_gain(4).unwrap().unseen());
        assert!(matches!(
            NoiseParams::for_gain(3),
            Err(SimError::InvalidGain(3))
        ));
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = rand(&[1, 5, 5], 7);
        assert_eq!(add_noise(&x, &NoiseParams::none(), 1).unwrap(), x);
    }

    #[test]
    fn noise_std_at_gain_four() {
        let p = NoiseParams::for_gain(4).unwrap();
        let n = 1_000_000;
        let x = Tensor::full(&[n], 0.5);
        let y = add_noise(&x, &p, 11).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = (10f64.powf(-2.8) + 10f64.powf(-1.8) * 0.5).sqrt();
        assert!((var.sqrt() / want - 1.0).abs() < 0.02);
        assert!((mean - 0.5).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(seed in 0u64..500, hh in 1usize..5, ww in 1usize..5) {
            let x = rand(&[3, 2 * hh, 2 * ww], seed);
            let m = mosaic(&x).unwrap();
            let p = mosaic_and_pack(&x).unwrap();
            prop_assert_eq!(unpack(&p).unwrap(), m.clone());
            for y in 0..2 * hh {
                for xx in 0..2 * ww {
                    let plane = match (y % 2, xx % 2) { (0, 0) => 0, (1, 1) => 2, _ => 1 };
                    prop_assert_eq!(m.data()[y * 2 * ww + xx], x.data()[(plane * 2 * hh + y) * 2 * ww + xx]);
                }
            }
        }
    }
}
