//! PNG images, per-sample directories and dataset manifests.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{NoiseParams, Transform, WhiteBalance};
use super::{make_sample, BurstSample, SimParams};
use crate::error::SimError;
use crate::model::Task;
use crate::seed::split_seed;
use crate::tensor::Tensor;

/// Affine 16-bit storage: `code = round(value * scale + black_level)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEncoding {
    pub black_level: f64,
    pub scale: f64,
}

/// Burst frames keep headroom on both sides so unclamped noise survives.
pub const FRAME_ENCODING: FrameEncoding = FrameEncoding {
    black_level: 4096.0,
    scale: 49152.0,
};

/// Ground truth spans the full 16-bit range.
pub const TARGET_ENCODING: FrameEncoding = FrameEncoding {
    black_level: 0.0,
    scale: 65535.0,
};

pub fn encode_frame(v: f64, enc: &FrameEncoding) -> u16 {
    (v * enc.scale + enc.black_level)
        .round()
        .clamp(0.0, 65535.0) as u16
}

pub fn decode_frame(code: u16, enc: &FrameEncoding) -> f64 {
    (code as f64 - enc.black_level) / enc.scale
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> SimError {
    SimError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

struct RawPng {
    channels: usize,
    height: usize,
    width: usize,
    sixteen: bool,
    samples: Vec<u16>,
}

fn decode_png(path: &Path) -> Result<RawPng, SimError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let samples = if sixteen {
        buf.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        buf.into_iter().map(u16::from).collect()
    };
    Ok(RawPng {
        channels,
        height: info.height as usize,
        width: info.width as usize,
        sixteen,
        samples,
    })
}

fn planar(raw: &RawPng, keep: usize, value: impl Fn(u16) -> f64) -> Result<Tensor<f64>, SimError> {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    let mut out = Vec::with_capacity(keep * h * w);
    for ch in 0..keep {
        out.extend(raw.samples.iter().skip(ch).step_by(c).map(|&s| value(s)));
    }
    Ok(Tensor::from_vec(&[keep, h, w], out)?)
}

/// Reads an image as `[C,H,W]` in `[0,1]`, dropping any alpha channel.
pub fn read_png(path: &Path) -> Result<Tensor<f64>, SimError> {
    let raw = decode_png(path)?;
    let keep = match raw.channels {
        1 | 2 => 1,
        _ => 3,
    };
    let max = if raw.sixteen { 65535.0 } else { 255.0 };
    planar(&raw, keep, |s| s as f64 / max)
}

/// Reads every channel of a 16-bit image stored with `enc`.
pub fn read_encoded(path: &Path, enc: &FrameEncoding) -> Result<Tensor<f64>, SimError> {
    let raw = decode_png(path)?;
    if !raw.sixteen {
        return Err(format_err(path, "expected a 16-bit image"));
    }
    planar(&raw, raw.channels, |s| decode_frame(s, enc))
}

/// Output precision for [`write_png`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PngDepth {
    /// Values clamped to `[0,1]` and quantised to 8 bits.
    Eight,
    Sixteen(FrameEncoding),
}

/// Writes `[C,H,W]` with 1, 3 or 4 channels (grey, RGB, RGBA).
pub fn write_png(path: &Path, img: &Tensor<f64>, depth: PngDepth) -> Result<(), SimError> {
    let [c, h, w] = *img.shape() else {
        return Err(SimError::InvalidArgument(format!(
            "write_png expects [C,H,W], got {:?}",
            img.shape()
        )));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        _ => {
            return Err(SimError::InvalidArgument(format!(
                "cannot store {c} channels in a PNG"
            )))
        }
    };
    let d = img.data();
    let n = h * w;
    let mut bytes = Vec::with_capacity(n * c * 2);
    for i in 0..n {
        for ch in 0..c {
            let v = d[ch * n + i];
            match depth {
                PngDepth::Eight => bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
                PngDepth::Sixteen(enc) => {
                    bytes.extend_from_slice(&encode_frame(v, &enc).to_be_bytes())
                }
            }
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(match depth {
        PngDepth::Eight => png::BitDepth::Eight,
        PngDepth::Sixteen(_) => png::BitDepth::Sixteen,
    });
    let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| format_err(path, e))?;
    writer.finish().map_err(|e| format_err(path, e))
}

/// Contents of `meta.json` in a sample directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub task: Task,
    pub seed: u64,
    pub source: Option<String>,
    pub burst_shape: [usize; 4],
    pub ground_truth_shape: [usize; 3],
    pub transforms: Vec<Transform>,
    pub noise: NoiseParams,
    pub unseen_gain: bool,
    pub white_balance: Option<WhiteBalance>,
    pub origin: [usize; 2],
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    pub frame_encoding: FrameEncoding,
    pub ground_truth_encoding: FrameEncoding,
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:02}.png")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SimError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// Writes `frame_XX.png`, `gt.png` and `meta.json` into `dir`.
pub fn write_sample(
    dir: &Path,
    sample: &BurstSample,
    source: Option<&str>,
) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let s = sample.burst.shape();
    for k in 0..s[0] {
        write_png(
            &dir.join(frame_name(k)),
            &sample.burst.index0(k),
            PngDepth::Sixteen(FRAME_ENCODING),
        )?;
    }
    write_png(
        &dir.join("gt.png"),
        &sample.ground_truth,
        PngDepth::Sixteen(TARGET_ENCODING),
    )?;
    let g = sample.ground_truth.shape();
    let meta = SampleMeta {
        task: sample.task,
        seed: sample.seed,
        source: source.map(str::to_string),
        burst_shape: [s[0], s[1], s[2], s[3]],
        ground_truth_shape: [g[0], g[1], g[2]],
        transforms: sample.transforms.clone(),
        noise: sample.noise,
        unseen_gain: sample.noise.unseen(),
        white_balance: sample.white_balance,
        origin: [sample.origin.0, sample.origin.1],
        flip_vertical: sample.flips.0,
        flip_horizontal: sample.flips.1,
        frame_encoding: FRAME_ENCODING,
        ground_truth_encoding: TARGET_ENCODING,
    };
    write_json(&dir.join("meta.json"), &meta)
}

/// Reads `frame_00.png .. frame_{frames-1}.png` from `dir` as `[B,C,h,w]`.
/// Every absent frame is named in the error.
pub fn read_burst(dir: &Path, frames: usize, enc: &FrameEncoding) -> Result<Tensor<f64>, SimError> {
    let missing: Vec<String> = (0..frames)
        .map(frame_name)
        .filter(|n| !dir.join(n).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(SimError::MissingFrames {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let items = (0..frames)
        .map(|k| read_encoded(&dir.join(frame_name(k)), enc))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::stack(&items).map_err(|e| format_err(dir, e))
}

/// Loads a directory written by [`write_sample`].
pub fn load_sample(dir: &Path) -> Result<BurstSample, SimError> {
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = read_json(&meta_path)?;
    let burst = read_burst(dir, meta.burst_shape[0], &meta.frame_encoding)?;
    if burst.shape() != meta.burst_shape {
        return Err(format_err(
            &meta_path,
            format!(
                "frames are {:?}, meta says {:?}",
                burst.shape(),
                meta.burst_shape
            ),
        ));
    }
    let gt_path = dir.join("gt.png");
    let ground_truth = read_encoded(&gt_path, &meta.ground_truth_encoding)?;
    if ground_truth.shape() != meta.ground_truth_shape {
        return Err(format_err(
            &gt_path,
            format!(
                "shape {:?}, meta says {:?}",
                ground_truth.shape(),
                meta.ground_truth_shape
            ),
        ));
    }
    Ok(BurstSample {
        task: meta.task,
        burst,
        ground_truth,
        transforms: meta.transforms,
        noise: meta.noise,
        white_balance: meta.white_balance,
        seed: meta.seed,
        origin: (meta.origin[0], meta.origin[1]),
        flips: (meta.flip_vertical, meta.flip_horizontal),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Sample directory relative to the dataset root.
    pub dir: String,
    pub seed: u64,
    pub source: String,
}

/// Contents of `manifest.json` at a dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub count: usize,
    pub params: SimParams,
    /// Set when the fixed gain is the one held out of training.
    pub unseen_gain: bool,
    pub samples: Vec<ManifestEntry>,
}

/// Sorted PNG files directly inside `dir`.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SimError::InvalidArgument(format!(
            "no PNG images in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Synthesises `count` samples into `out`. Sample `i` uses source image
/// `i mod n` (sorted by name) and seed `split_seed(seed, i)`.
pub fn simulate_dataset(
    corpus: &[PathBuf],
    task: Task,
    params: &SimParams,
    seed: u64,
    count: usize,
    out: &Path,
) -> Result<DatasetManifest, SimError> {
    if corpus.is_empty() {
        return Err(SimError::InvalidArgument("empty corpus".into()));
    }
    let params = params.resolved(task)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let sources = corpus
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>, _>>()?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let src = i % corpus.len();
            let sample_seed = split_seed(seed, i as u64);
            let name = corpus[src]
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let sample = make_sample(task, &sources[src], &params, sample_seed)?;
            let dir = format!("sample_{i:04}");
            write_sample(&out.join(&dir), &sample, Some(&name))?;
            Ok(ManifestEntry {
                dir,
                seed: sample_seed,
                source: name,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let manifest = DatasetManifest {
        task,
        seed,
        count,
        unseen_gain: params.gain.is_some_and(|g| g == super::UNSEEN_GAIN),
        params,
        samples: entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset's manifest and every sample it lists.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<BurstSample>), SimError> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| load_sample(&root.join(&e.dir)))
        .collect::<Result<Vec<_>, _>>()?;
    for (e, s) in manifest.samples.iter().zip(&samples) {
        if s.task != manifest.task {
            return Err(format_err(
                &root.join(&e.dir),
                format!("sample task {} in a {} dataset", s.task, manifest.task),
            ));
        }
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn encoding_round_trip() {
        for v in [-0.08, 0.0, 0.1234, 1.0, 1.2] {
            assert!(
                (decode_frame(encode_frame(v, &FRAME_ENCODING), &FRAME_ENCODING) - v).abs()
                    <= 0.5 / 49152.0
            );
        }
        assert_eq!(encode_frame(-1.0, &FRAME_ENCODING), 0);
        assert_eq!(encode_frame(0.0, &FRAME_ENCODING), 4096);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f64>::create(
            &[4, 5, 6],
            Init::Uniform {
                seed: 1,
                low: -0.05,
                high: 1.1,
            },
        )
        .unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img, PngDepth::Sixteen(FRAME_ENCODING)).unwrap();
        let back = read_encoded(&p, &FRAME_ENCODING).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 49152.0 + 1e-12);
        let rgb =
            Tensor::<f64>::from_vec(&[3, 1, 2], vec![0.0, 1.0, 0.5, 0.25, 2.0, -1.0]).unwrap();
        write_png(&p, &rgb, PngDepth::Eight).unwrap();
        let back = read_png(&p).unwrap();
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0, 1.0, 0.0];
        assert!(back
            .data()
            .iter()
            .zip(want)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn sample_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = SimParams {
            crop: Some(16),
            burst_size: Some(3),
            ..SimParams::default()
        };
        let need = params.source_extent(Task::SrX4).unwrap();
        let src = Tensor::create(
            &[3, need, need],
            Init::Uniform {
                seed: 2,
                low: 0.0,
                high: 1.0,
            },
        )
        .unwrap();
        let s = make_sample(Task::SrX4, &src, &params, 4).unwrap();
        write_sample(dir.path(), &s, Some("x.png")).unwrap();
        let back = load_sample(dir.path()).unwrap();
        assert!(back.burst.max_abs_diff(&s.burst) <= 0.5 / 49152.0 + 1e-12);
        assert!(back.ground_truth.max_abs_diff(&s.ground_truth) <= 0.5 / 65535.0 + 1e-12);
        assert_eq!(back.transforms, s.transforms);
        fs::remove_file(dir.path().join("frame_01.png")).unwrap();
        fs::remove_file(dir.path().join("frame_02.png")).unwrap();
        match read_burst(dir.path(), 3, &FRAME_ENCODING) {
            Err(SimError::MissingFrames { missing, .. }) => {
                assert_eq!(missing, ["frame_01.png", "frame_02.png"])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let corpus_dir = tempfile::tempdir().unwrap();
        let params = SimParams {
            gain: Some(8),
            crop: Some(16),
            burst_size: Some(2),
            ..SimParams::default()
        };
        let need = params.source_extent(Task::DenoiseGray).unwrap();
        for i in 0..2 {
            let img = Tensor::create(
                &[3, need + 3, need],
                Init::Uniform {
                    seed: i,
                    low: 0.0,
                    high: 1.0,
                },
            )
            .unwrap();
            write_png(
                &corpus_dir.path().join(format!("img{i}.png")),
                &img,
                PngDepth::Eight,
            )
            .unwrap();
        }
        let corpus = list_corpus(corpus_dir.path()).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = simulate_dataset(&corpus, Task::DenoiseGray, &params, 5, 3, a.path()).unwrap();
        simulate_dataset(&corpus, Task::DenoiseGray, &params, 5, 3, b.path()).unwrap();
        assert!(m.unseen_gain);
        assert_eq!(m.samples.len(), 3);
        for f in [
            "manifest.json",
            "sample_0002/frame_01.png",
            "sample_0000/gt.png",
            "sample_0001/meta.json",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let (lm, samples) = load_dataset(a.path()).unwrap();
        assert_eq!(lm, m);
        assert_eq!(samples[2].burst.shape(), &[2, 1, 16, 16]);
        let empty = tempfile::tempdir().unwrap();
        assert!(list_corpus(empty.path()).is_err());
    }
}
