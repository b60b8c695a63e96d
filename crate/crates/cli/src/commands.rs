use std::fs;
use std::path::{Path, PathBuf};

use burstforge::metrics::{ImageScore, MetricReport};
use burstforge::model::checkpoint::{self, CheckpointHeader};
use burstforge::model::{Model, Task};
use burstforge::seed::split_seed;
use burstforge::selftest::{self, Fault};
use burstforge::sim::{
    list_corpus, load_dataset, make_sample, read_burst, read_png, simulate_dataset, write_png,
    BurstSample, PngDepth, SampleMeta, SimParams, FRAME_ENCODING,
};
use burstforge::train::{TrainPaths, Trainer};
use burstforge::{DType, Float, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

fn log_resolved(what: &str, json: &str) {
    eprintln!("resolved {what}:\n{json}");
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub task: Option<Task>,
    pub corpus: Option<PathBuf>,
    pub count: Option<usize>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub gain: Option<u32>,
    pub burst_size: Option<usize>,
    pub crop: Option<usize>,
    pub no_noise: bool,
}

#[derive(Serialize)]
struct SimulatePlan<'a> {
    task: Task,
    seed: u64,
    count: usize,
    corpus: &'a Path,
    out: &'a Path,
    params: &'a SimParams,
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let task = args
        .task
        .or(cfg.as_ref().map(|c| c.model.task))
        .ok_or_else(|| {
            CliError::Usage("simulate needs --task or a config with a model section".into())
        })?;
    let mut data = cfg.as_ref().map(|c| c.data.clone()).unwrap_or_default();
    if let Some(c) = cfg.as_ref().filter(|c| c.model.task == task) {
        data.sim.burst_size.get_or_insert(c.model.burst_size);
    }
    let corpus = args
        .corpus
        .clone()
        .or(cfg.as_ref().and_then(|c| c.io.corpus.clone()))
        .ok_or_else(|| CliError::Usage("simulate needs --corpus or io.corpus".into()))?;
    let seed = args.seed.unwrap_or(data.seed);
    let count = args.count.unwrap_or(data.count);
    let mut params = data.sim;
    if args.gain.is_some() {
        params.gain = args.gain;
    }
    if args.burst_size.is_some() {
        params.burst_size = args.burst_size;
    }
    if args.crop.is_some() {
        params.crop = args.crop;
    }
    if args.no_noise {
        params.noise = false;
    }
    let params = params.resolved(task)?;
    let plan = SimulatePlan {
        task,
        seed,
        count,
        corpus: &corpus,
        out: &args.out,
        params: &params,
    };
    log_resolved(
        "simulation",
        &serde_json::to_string_pretty(&plan).expect("plan serialises"),
    );
    let files = list_corpus(&corpus)?;
    let manifest = simulate_dataset(&files, task, &params, seed, count, &args.out)?;
    println!(
        "wrote {} {} samples to {}",
        manifest.count,
        task,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Loads a dataset from disk or synthesises one in memory from a corpus.
fn training_data(cfg: &RunConfig) -> Result<Vec<BurstSample>, CliError> {
    if let Some(dir) = &cfg.io.dataset {
        let (manifest, samples) = load_dataset(dir)?;
        if manifest.task != cfg.model.task {
            return Err(CliError::Validation(format!(
                "dataset {} holds {} samples, model.task is {}",
                dir.display(),
                manifest.task,
                cfg.model.task
            )));
        }
        return Ok(samples);
    }
    let Some(corpus) = &cfg.io.corpus else {
        return Err(CliError::Validation(
            "no training data: set io.dataset, io.corpus or --dataset".into(),
        ));
    };
    let files = list_corpus(corpus)?;
    let sources = files
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>, _>>()?;
    (0..cfg.data.count)
        .map(|i| {
            let seed = split_seed(cfg.data.seed, i as u64);
            Ok(make_sample(
                cfg.model.task,
                &sources[i % sources.len()],
                &cfg.data.sim,
                seed,
            )?)
        })
        .collect()
}

/// Compares sample shapes with the model before any network is built.
fn preflight(cfg: &RunConfig, data: &[BurstSample]) -> Result<(), CliError> {
    let m = &cfg.model;
    if data.is_empty() {
        return Err(CliError::Validation("training data is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.task != m.task {
            return Err(CliError::Validation(format!(
                "sample {i} is {} data, model.task is {}",
                s.task, m.task
            )));
        }
        let b = s.burst.shape();
        let want = m.input_shape(b[2], b[3]);
        for (axis, name) in [(0, "burst size"), (1, "channels")] {
            if b[axis] != want[axis] {
                return Err(CliError::Validation(format!(
                    "sample {i}: {name} is {}, model expects {} (burst shape {b:?})",
                    b[axis], want[axis]
                )));
            }
        }
        if b[2] % 4 != 0 || b[3] % 4 != 0 {
            return Err(CliError::Validation(format!(
                "sample {i}: frame size {}x{} is not a multiple of 4",
                b[2], b[3]
            )));
        }
    }
    Ok(())
}

fn train_typed<T: Float>(
    cfg: &RunConfig,
    data: &[BurstSample],
    args: &TrainArgs,
    paths: &TrainPaths,
) -> Result<(), CliError> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load::<T>(path)?;
            if ckpt.model.config != cfg.model {
                return Err(CliError::Validation(format!(
                    "checkpoint {} was built from a different model config",
                    path.display()
                )));
            }
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(Model::<T>::build(&cfg.model)?, cfg.train.clone())?,
    };
    let start = trainer.step;
    let records = trainer.run(data, paths)?;
    match records.last() {
        Some(r) => println!(
            "steps {}..{} done, last loss {:.6}",
            start + 1,
            r.step,
            r.loss
        ),
        None => println!("nothing to do at step {start}"),
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(d) = &args.dataset {
        cfg.io.dataset = Some(d.clone());
    }
    let cfg = cfg.resolved()?;
    let json = cfg.to_json();
    log_resolved("config", &json);
    let data = training_data(&cfg)?;
    preflight(&cfg, &data)?;
    write_text(&args.out.with_extension("config.json"), &(json + "\n"))?;
    let paths = TrainPaths {
        checkpoint: Some(args.out.clone()),
        log: Some(args.out.with_extension("loss.csv")),
    };
    match cfg.model.dtype {
        DType::F32 => train_typed::<f32>(&cfg, &data, args, &paths),
        DType::F64 => train_typed::<f64>(&cfg, &data, args, &paths),
    }
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    fn load(header: &CheckpointHeader, path: &Path) -> Result<Self, CliError> {
        Ok(match header.dtype {
            DType::F32 => AnyModel::F32(checkpoint::load(path)?.model),
            DType::F64 => AnyModel::F64(checkpoint::load(path)?.model),
        })
    }

    fn predict(&self, burst: &Tensor<f64>) -> Result<Tensor<f64>, CliError> {
        fn run<T: Float>(m: &Model<T>, burst: &Tensor<f64>) -> Result<Tensor<f64>, CliError> {
            m.check_input(burst.shape())?;
            Ok(m.infer(&burst.cast())?.cast())
        }
        match self {
            AnyModel::F32(m) => run(m, burst),
            AnyModel::F64(m) => run(m, burst),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub ckpt: PathBuf,
    pub burst: PathBuf,
    pub out: PathBuf,
}

pub fn infer(args: &InferArgs) -> Result<(), CliError> {
    let header = checkpoint::inspect(&args.ckpt)?;
    let cfg = &header.config;
    let meta_path = args.burst.join("meta.json");
    let (frames, enc) = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", meta_path.display())))?;
        let meta: SampleMeta = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", meta_path.display())))?;
        if meta.task != cfg.task {
            return Err(CliError::Validation(format!(
                "burst is {} data, checkpoint model is {}",
                meta.task, cfg.task
            )));
        }
        (meta.burst_shape[0], meta.frame_encoding)
    } else {
        (cfg.burst_size, FRAME_ENCODING)
    };
    let burst = read_burst(&args.burst, frames, &enc)?;
    let out = AnyModel::load(&header, &args.ckpt)?.predict(&burst)?;
    write_png(&args.out, &out, PngDepth::Eight)?;
    let s = out.shape();
    println!(
        "wrote {}x{}x{} image to {}",
        s[0],
        s[1],
        s[2],
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub dataset: PathBuf,
    pub out: Option<PathBuf>,
    /// Scores the ground truth against itself instead of running the model.
    pub ground_truth_as_prediction: bool,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub samples: Vec<ImageScore>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let header = checkpoint::inspect(&args.ckpt)?;
    let (manifest, samples) = load_dataset(&args.dataset)?;
    if manifest.task != header.config.task {
        return Err(CliError::Validation(format!(
            "dataset is {} data, checkpoint model is {}",
            manifest.task, header.config.task
        )));
    }
    if samples.is_empty() {
        return Err(CliError::Validation(format!(
            "dataset {} has no samples",
            args.dataset.display()
        )));
    }
    let model = if args.ground_truth_as_prediction {
        None
    } else {
        Some(AnyModel::load(&header, &args.ckpt)?)
    };
    let scores = manifest
        .samples
        .iter()
        .zip(&samples)
        .map(|(entry, s)| {
            let pred = match &model {
                Some(m) => m.predict(&s.burst)?,
                None => s.ground_truth.clone(),
            };
            Ok(ImageScore::compute(
                entry.dir.clone(),
                &pred,
                &s.ground_truth,
            )?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let agg = MetricReport::aggregate(&scores)?;
    let report = EvalReport {
        psnr_db: agg.psnr_db,
        ssim: agg.ssim,
        n_images: agg.n_images,
        samples: scores,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    match &args.out {
        Some(p) => {
            write_text(p, &json)?;
            println!(
                "psnr {:.3} dB, ssim {:.4} over {} images",
                report.psnr_db, report.ssim, report.n_images
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

/// Prints the check table; fails when any check does.
pub fn selftest(fault: Option<Fault>) -> Result<(), CliError> {
    let checks = selftest::run(fault)?;
    println!(
        "{:<34} {:>12} {:>12}  result",
        "check", "measured", "tolerance"
    );
    for c in &checks {
        let result = if c.passed { "pass" } else { "FAIL" };
        println!(
            "{:<34} {:>12.3e} {:>12.1e}  {result}",
            c.name, c.measured, c.tolerance
        );
    }
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "failed: {}",
            failed.join(", ")
        )))
    }
}
