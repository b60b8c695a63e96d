//! Synthetic burst generation from single sRGB images.
//!
//! Every sample is a pure function of its source image, the [`SimParams`] and
//! a sample seed. Randomness is split per stream: stream 0 of the sample seed
//! drives crop position, flips, white balance and the denoising gain, and
//! stream `k + 1` is frame `k`, whose own streams 0 and 1 drive motion and
//! noise.

mod io;
mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    decode_frame, encode_frame, frame_name, list_corpus, load_dataset, load_sample, read_burst,
    read_encoded, read_png, simulate_dataset, write_png, write_sample, DatasetManifest,
    FrameEncoding, ManifestEntry, PngDepth, SampleMeta, FRAME_ENCODING, TARGET_ENCODING,
};
pub use ops::{
    add_noise, crop, downsample_bilinear, inverse_isp, linear_to_srgb, mosaic, mosaic_and_pack,
    random_warp, shift, srgb_to_linear, to_gray, unpack, warp, NoiseParams, Transform,
    WhiteBalance, BAYER_SITES, CCM, GAIN_TABLE, UNSEEN_GAIN, WB_GAIN_RANGE,
};

use crate::error::SimError;
use crate::model::Task;
use crate::seed::split_seed;
use crate::tensor::Tensor;

/// Gains drawn for denoising samples when no gain is fixed.
pub const TRAINING_GAINS: [u32; 3] = [1, 2, 4];

fn default_translation() -> f64 {
    8.0
}
fn default_rotation() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_exposure() -> f64 {
    8.0
}

/// Simulator settings. `None` fields take task defaults in [`SimParams::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    #[serde(default)]
    pub burst_size: Option<usize>,
    /// Frame extent before packing: the low-resolution mosaic for RAW tasks,
    /// the image itself for denoising.
    #[serde(default)]
    pub crop: Option<usize>,
    /// Translation bound in high-resolution pixels.
    #[serde(default = "default_translation")]
    pub max_translation: f64,
    #[serde(default = "default_rotation")]
    pub max_rotation_deg: f64,
    /// Noise table label. RAW tasks default to 1; denoising draws one of
    /// [`TRAINING_GAINS`] per sample when unset.
    #[serde(default)]
    pub gain: Option<u32>,
    /// `false` produces noise-free bursts.
    #[serde(default = "default_true")]
    pub noise: bool,
    /// Exposure reduction applied before noise for low-light samples.
    #[serde(default = "default_exposure")]
    pub exposure_ratio: f64,
    /// Random horizontal and vertical flips of the source crop.
    #[serde(default)]
    pub flip: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            burst_size: None,
            crop: None,
            max_translation: default_translation(),
            max_rotation_deg: default_rotation(),
            gain: None,
            noise: true,
            exposure_ratio: default_exposure(),
            flip: false,
        }
    }
}

impl SimParams {
    pub fn default_burst_size(task: Task) -> usize {
        match task {
            Task::SrX4 | Task::SrX8 => 14,
            Task::Lowlight | Task::DenoiseGray | Task::DenoiseColor => 8,
        }
    }

    pub fn default_crop(task: Task) -> usize {
        match task {
            Task::SrX4 | Task::SrX8 => 48,
            Task::Lowlight => 64,
            Task::DenoiseGray | Task::DenoiseColor => 128,
        }
    }

    /// Fills task defaults and validates.
    pub fn resolved(&self, task: Task) -> Result<SimParams, SimError> {
        let mut p = self.clone();
        p.burst_size.get_or_insert(Self::default_burst_size(task));
        p.crop.get_or_insert(Self::default_crop(task));
        if task.is_raw() && p.gain.is_none() {
            p.gain = Some(1);
        }
        if let Some(g) = p.gain {
            NoiseParams::for_gain(g)?;
        }
        let (b, c) = (p.burst_size.unwrap_or(0), p.crop.unwrap_or(0));
        if b == 0 {
            return Err(SimError::InvalidArgument(
                "burst_size must be at least 1".into(),
            ));
        }
        // packed frames must stay divisible by 4 for the network
        let unit = if task.is_raw() { 8 } else { 4 };
        if c == 0 || c % unit != 0 {
            return Err(SimError::InvalidArgument(format!(
                "crop {c} must be a positive multiple of {unit} for {task}"
            )));
        }
        let finite_bounds = p.max_translation.is_finite() && p.max_rotation_deg.is_finite();
        if !(finite_bounds && p.max_translation >= 0.0 && p.max_rotation_deg >= 0.0) {
            return Err(SimError::InvalidArgument(
                "motion bounds must be finite and non-negative".into(),
            ));
        }
        if !(p.exposure_ratio >= 1.0 && p.exposure_ratio.is_finite()) {
            return Err(SimError::InvalidArgument(format!(
                "exposure_ratio {} must be >= 1",
                p.exposure_ratio
            )));
        }
        Ok(p)
    }

    /// Smallest source `(h, w)` that fits one sample.
    pub fn source_extent(&self, task: Task) -> Result<usize, SimError> {
        let p = self.resolved(task)?;
        let (gt, margin) = geometry(task, &p);
        Ok(gt + 2 * margin)
    }
}

/// One synthetic training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstSample {
    pub task: Task,
    /// `[B,C,h,w]`: packed RAW for RAW tasks, sRGB otherwise. Noise is not clamped.
    pub burst: Tensor<f64>,
    /// `[C,H,W]` clean sRGB target in `[0,1]`.
    pub ground_truth: Tensor<f64>,
    /// Motion of every frame against the base; entry 0 is the identity.
    pub transforms: Vec<Transform>,
    pub noise: NoiseParams,
    pub white_balance: Option<WhiteBalance>,
    pub seed: u64,
    /// Top-left corner of the region taken from the source.
    pub origin: (usize, usize),
    /// (vertical, horizontal) flips applied to the source region.
    pub flips: (bool, bool),
}

/// Ground-truth extent and warp margin, both in ground-truth pixels.
fn geometry(task: Task, p: &SimParams) -> (usize, usize) {
    let c = p.crop.unwrap_or_else(|| SimParams::default_crop(task));
    let gt = match task {
        Task::SrX4 | Task::SrX8 => c * task.scale() / 2,
        _ => c,
    };
    let margin = if task.is_raw() {
        let radius = gt as f64 / std::f64::consts::SQRT_2;
        Transform::max_displacement(p.max_translation, p.max_rotation_deg, radius).ceil() as usize
            + 1
    } else {
        p.max_translation.round() as usize
    };
    (gt, margin)
}

struct SampleSetup {
    region: Tensor<f64>,
    origin: (usize, usize),
    flips: (bool, bool),
    rng: ChaCha8Rng,
}

fn setup(
    source: &Tensor<f64>,
    extent: usize,
    flip: bool,
    seed: u64,
) -> Result<SampleSetup, SimError> {
    let [c, h, w] = *source.shape() else {
        return Err(SimError::InvalidArgument(format!(
            "source must be [C,H,W], got {:?}",
            source.shape()
        )));
    };
    if c != 3 && c != 1 {
        return Err(SimError::InvalidArgument(format!(
            "source must have 1 or 3 channels, got {c}"
        )));
    }
    if h < extent || w < extent {
        return Err(SimError::SourceTooSmall {
            got_h: h,
            got_w: w,
            need_h: extent,
            need_w: extent,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0));
    let origin = (
        rng.random_range(0..=h - extent),
        rng.random_range(0..=w - extent),
    );
    let flips = if flip {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    };
    let region = crop(source, origin.0, origin.1, extent, extent)?.flip_hw(flips.0, flips.1);
    Ok(SampleSetup {
        region,
        origin,
        flips,
        rng,
    })
}

fn frame_seed(sample_seed: u64, frame: usize, stream: u64) -> u64 {
    split_seed(split_seed(sample_seed, frame as u64 + 1), stream)
}

fn noise_for(p: &SimParams, rng: &mut impl Rng) -> Result<NoiseParams, SimError> {
    let gain = match p.gain {
        Some(g) => g,
        None => TRAINING_GAINS[rng.random_range(0..TRAINING_GAINS.len())],
    };
    let table = NoiseParams::for_gain(gain)?;
    Ok(if p.noise {
        table
    } else {
        NoiseParams {
            sigma_read: 0.0,
            sigma_shot: 0.0,
            gain: table.gain,
        }
    })
}

fn rgb(source: &Tensor<f64>) -> Result<Tensor<f64>, SimError> {
    match *source.shape() {
        [3, _, _] => Ok(source.clone()),
        [1, h, w] => Ok(Tensor::from_vec(&[3, h, w], source.data().repeat(3))?),
        ref s => Err(SimError::InvalidArgument(format!(
            "source must be [1|3,H,W], got {s:?}"
        ))),
    }
}

/// RAW-domain burst for super-resolution and low-light tasks.
fn make_raw_burst(
    task: Task,
    source: &Tensor<f64>,
    params: &SimParams,
    seed: u64,
) -> Result<BurstSample, SimError> {
    let p = params.resolved(task)?;
    let (gt_size, margin) = geometry(task, &p);
    let mut s = setup(&rgb(source)?, gt_size + 2 * margin, p.flip, seed)?;
    let wb = WhiteBalance::sample(&mut s.rng);
    let noise = noise_for(&p, &mut s.rng)?;
    let ground_truth = crop(&s.region, margin, margin, gt_size, gt_size)?;
    let linear = inverse_isp(&s.region, &CCM, wb)?;
    let down = task.scale() / 2;
    let amplify = if task == Task::Lowlight {
        p.exposure_ratio
    } else {
        1.0
    };
    let b = p.burst_size.unwrap_or(1);
    let mut frames = Vec::with_capacity(b);
    let mut transforms = Vec::with_capacity(b);
    for k in 0..b {
        let t = if k == 0 {
            Transform::IDENTITY
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(frame_seed(seed, k, 0));
            Transform::sample(p.max_translation, p.max_rotation_deg, &mut r)
        };
        let moved = crop(&warp(&linear, &t)?, margin, margin, gt_size, gt_size)?;
        let packed = mosaic_and_pack(&downsample_bilinear(&moved, down)?)?;
        let dark = packed.map(|v| v / amplify);
        let noisy = add_noise(&dark, &noise, frame_seed(seed, k, 1))?;
        frames.push(noisy.map(|v| v * amplify));
        transforms.push(t);
    }
    Ok(BurstSample {
        task,
        burst: Tensor::stack(&frames)?,
        ground_truth,
        transforms,
        noise,
        white_balance: Some(wb),
        seed,
        origin: s.origin,
        flips: s.flips,
    })
}

/// Super-resolution burst: the high-resolution crop is unprocessed to RAW,
/// warped per frame, downsampled, mosaicked, packed and made noisy.
pub fn make_sr_burst(
    task: Task,
    source: &Tensor<f64>,
    params: &SimParams,
    seed: u64,
) -> Result<BurstSample, SimError> {
    if !matches!(task, Task::SrX4 | Task::SrX8) {
        return Err(SimError::InvalidArgument(format!(
            "{task} is not a super-resolution task"
        )));
    }
    make_raw_burst(task, source, params, seed)
}

/// Low-light burst: as super-resolution without downsampling, with the RAW
/// signal darkened by `exposure_ratio` before noise and amplified after.
pub fn make_lowlight_burst(
    source: &Tensor<f64>,
    params: &SimParams,
    seed: u64,
) -> Result<BurstSample, SimError> {
    make_raw_burst(Task::Lowlight, source, params, seed)
}

/// Denoising burst in the sRGB domain: whole-pixel translations of the base
/// crop with noise at the chosen gain.
pub fn make_denoise_burst(
    task: Task,
    source: &Tensor<f64>,
    params: &SimParams,
    seed: u64,
) -> Result<BurstSample, SimError> {
    let gray = match task {
        Task::DenoiseGray => true,
        Task::DenoiseColor => false,
        _ => {
            return Err(SimError::InvalidArgument(format!(
                "{task} is not a denoising task"
            )))
        }
    };
    let p = params.resolved(task)?;
    let (size, margin) = geometry(task, &p);
    let src = if gray { to_gray(source)? } else { rgb(source)? };
    let mut s = setup(&src, size + 2 * margin, p.flip, seed)?;
    let noise = noise_for(&p, &mut s.rng)?;
    let ground_truth = crop(&s.region, margin, margin, size, size)?;
    let b = p.burst_size.unwrap_or(1);
    let bound = margin as i64;
    let mut frames = Vec::with_capacity(b);
    let mut transforms = Vec::with_capacity(b);
    for k in 0..b {
        let (dx, dy) = if k == 0 || bound == 0 {
            (0, 0)
        } else {
            let mut r = ChaCha8Rng::seed_from_u64(frame_seed(seed, k, 0));
            (
                r.random_range(-bound..=bound),
                r.random_range(-bound..=bound),
            )
        };
        let moved = crop(&shift(&s.region, dx, dy)?, margin, margin, size, size)?;
        frames.push(add_noise(&moved, &noise, frame_seed(seed, k, 1))?);
        transforms.push(Transform {
            dx: dx as f64,
            dy: dy as f64,
            rotation_deg: 0.0,
        });
    }
    Ok(BurstSample {
        task,
        burst: Tensor::stack(&frames)?,
        ground_truth,
        transforms,
        noise,
        white_balance: None,
        seed,
        origin: s.origin,
        flips: s.flips,
    })
}

/// Dispatches on the task.
pub fn make_sample(
    task: Task,
    source: &Tensor<f64>,
    params: &SimParams,
    seed: u64,
) -> Result<BurstSample, SimError> {
    match task {
        Task::SrX4 | Task::SrX8 => make_sr_burst(task, source, params, seed),
        Task::Lowlight => make_lowlight_burst(source, params, seed),
        Task::DenoiseGray | Task::DenoiseColor => make_denoise_burst(task, source, params, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn source(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::create(
            &[3, h, w],
            Init::Uniform {
                seed,
                low: 0.0,
                high: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn sr_defaults_shapes() {
        let p = SimParams::default();
        let need = p.source_extent(Task::SrX4).unwrap();
        let s = make_sr_burst(Task::SrX4, &source(need, need + 5, 1), &p, 3).unwrap();
        assert_eq!(s.burst.shape(), &[14, 4, 24, 24]);
        assert_eq!(s.ground_truth.shape(), &[3, 192, 192]);
        assert_eq!(s.transforms[0], Transform::IDENTITY);
        assert_eq!(s.noise, NoiseParams::for_gain(1).unwrap());
        assert_eq!(
            s,
            make_sr_burst(Task::SrX4, &source(need, need + 5, 1), &p, 3).unwrap()
        );
        assert_ne!(
            s.burst,
            make_sr_burst(Task::SrX4, &source(need, need + 5, 1), &p, 4)
                .unwrap()
                .burst
        );
        assert!(matches!(
            make_sr_burst(Task::SrX4, &source(need - 1, need, 1), &p, 3),
            Err(SimError::SourceTooSmall { .. })
        ));
    }

    #[test]
    fn base_frame_is_unwarped() {
        let p = SimParams {
            noise: false,
            crop: Some(16),
            burst_size: Some(3),
            ..SimParams::default()
        };
        let need = p.source_extent(Task::SrX4).unwrap();
        let src = source(need, need, 2);
        let s = make_sr_burst(Task::SrX4, &src, &p, 9).unwrap();
        let wb = s.white_balance.unwrap();
        let lin = inverse_isp(&s.ground_truth, &CCM, wb).unwrap();
        let base = mosaic_and_pack(&downsample_bilinear(&lin, 4).unwrap()).unwrap();
        assert!(s.burst.index0(0).max_abs_diff(&base) < 1e-12);
        assert!(s.burst.index0(1).max_abs_diff(&base) > 1e-3);
    }

    #[test]
    fn recorded_transform_reproduces_frames() {
        // re-warp the linear ground truth and compare away from the borders
        let p = SimParams {
            noise: false,
            crop: Some(16),
            burst_size: Some(4),
            ..SimParams::default()
        };
        let need = p.source_extent(Task::SrX4).unwrap();
        let s = make_sr_burst(Task::SrX4, &source(need, need, 5), &p, 1).unwrap();
        let lin = inverse_isp(&s.ground_truth, &CCM, s.white_balance.unwrap()).unwrap();
        for (k, t) in s.transforms.iter().enumerate() {
            let frame =
                mosaic_and_pack(&downsample_bilinear(&warp(&lin, t).unwrap(), 4).unwrap()).unwrap();
            let got = s.burst.index0(k);
            let n = 8;
            for c in 0..4 {
                for y in 3..n - 3 {
                    for x in 3..n - 3 {
                        let i = (c * n + y) * n + x;
                        assert!((got.data()[i] - frame.data()[i]).abs() < 1e-6, "frame {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn denoise_shapes_and_clean_override() {
        let p = SimParams {
            noise: false,
            gain: Some(8),
            ..SimParams::default()
        };
        let need = p.source_extent(Task::DenoiseGray).unwrap();
        let s = make_denoise_burst(Task::DenoiseGray, &source(need, need, 3), &p, 2).unwrap();
        assert_eq!(s.burst.shape(), &[8, 1, 128, 128]);
        assert_eq!(s.ground_truth.shape(), &[1, 128, 128]);
        assert_eq!(s.burst.index0(0), s.ground_truth);
        assert!(s.noise.unseen());
        for (k, t) in s.transforms.iter().enumerate() {
            assert_eq!(t.rotation_deg, 0.0);
            let f = s.burst.index0(k);
            let g = shift(&s.ground_truth, t.dx as i64, t.dy as i64).unwrap();
            for y in 8..120 {
                for x in 8..120 {
                    assert_eq!(f.data()[y * 128 + x], g.data()[y * 128 + x]);
                }
            }
        }
        let noisy = make_denoise_burst(
            Task::DenoiseColor,
            &source(need, need, 3),
            &SimParams::default(),
            2,
        )
        .unwrap();
        assert_eq!(noisy.burst.shape(), &[8, 3, 128, 128]);
        assert!(TRAINING_GAINS.contains(&noisy.noise.gain.unwrap()));
        assert!(matches!(
            make_denoise_burst(
                Task::DenoiseGray,
                &source(need, need, 3),
                &SimParams {
                    gain: Some(3),
                    ..SimParams::default()
                },
                2
            ),
            Err(SimError::InvalidGain(3))
        ));
    }

    #[test]
    fn lowlight_and_flips() {
        let p = SimParams {
            crop: Some(16),
            burst_size: Some(2),
            flip: true,
            ..SimParams::default()
        };
        let need = p.source_extent(Task::Lowlight).unwrap();
        let s = make_lowlight_burst(&source(need, need, 4), &p, 6).unwrap();
        assert_eq!(s.burst.shape(), &[2, 4, 8, 8]);
        assert_eq!(s.ground_truth.shape(), &[3, 16, 16]);
        let seen: std::collections::HashSet<_> = (0..16)
            .map(|seed| {
                make_lowlight_burst(&source(need, need, 4), &p, seed)
                    .unwrap()
                    .flips
            })
            .collect();
        assert!(seen.len() > 1);
    }

    #[test]
    fn params_validation() {
        assert!(SimParams {
            crop: Some(20),
            ..SimParams::default()
        }
        .resolved(Task::SrX4)
        .is_err());
        assert!(SimParams {
            burst_size: Some(0),
            ..SimParams::default()
        }
        .resolved(Task::SrX4)
        .is_err());
        assert!(SimParams {
            max_translation: -1.0,
            ..SimParams::default()
        }
        .resolved(Task::SrX4)
        .is_err());
        let r = SimParams::default().resolved(Task::SrX4).unwrap();
        assert_eq!(
            (r.burst_size, r.crop, r.gain),
            (Some(14), Some(48), Some(1))
        );
        assert_eq!(
            SimParams::default()
                .resolved(Task::DenoiseGray)
                .unwrap()
                .gain,
            None
        );
    }
}
