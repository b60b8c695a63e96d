//! Optimisation: L1 loss, Adam, cosine annealing, flip augmentation and the
//! training loop.

mod adam;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::autodiff::{Tape, Var};
use crate::error::{TensorError, TrainError};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::Model;
use crate::seed::split_seed;
use crate::sim::BurstSample;
use crate::tensor::{Float, Tensor};

/// Header line of the loss log.
pub const LOSS_LOG_HEADER: &str = "step,lr,loss";

/// Mean absolute error between equal-shape tensors.
pub fn l1_loss<T: Float>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    pred.sub(target)?.abs()?.mean_all()
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = horizon`.
pub fn cosine_lr(t: u64, horizon: u64, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if horizon == 0 || t > horizon {
        return Err(TrainError::ScheduleOverrun { t, horizon });
    }
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Flips burst and ground truth together, each axis with probability 1/2.
///
/// On packed RAW a flip moves the colour filter phase, so RAW tasks should
/// flip the source image during simulation instead.
pub fn augment_flips(sample: &BurstSample, seed: u64) -> BurstSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, h) = (rng.random_bool(0.5), rng.random_bool(0.5));
    BurstSample {
        burst: sample.burst.flip_hw(v, h),
        ground_truth: sample.ground_truth.flip_hw(v, h),
        flips: (sample.flips.0 ^ v, sample.flips.1 ^ h),
        ..sample.clone()
    }
}

fn default_batch() -> usize {
    1
}
fn default_lr_max() -> f64 {
    1e-4
}
fn default_lr_min() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Schedule length in optimizer steps.
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Random flips of sRGB-domain samples.
    #[serde(default)]
    pub augment: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    pub fn new(iterations: u64) -> Self {
        TrainConfig {
            iterations,
            batch_size: default_batch(),
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            adam: AdamConfig::default(),
            seed: 0,
            augment: false,
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam coefficients {a:?}"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(1000)
    }
}

/// One logged optimizer step. `loss` is measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Where [`Trainer::run`] writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainPaths {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// A model, its optimizer state and the position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamState<T>,
    /// Optimizer steps completed.
    pub step: u64,
    pub config: TrainConfig,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            step: 0,
            config,
        })
    }

    /// Continues from a checkpoint at its stored step.
    pub fn resume(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if ckpt.step > config.iterations {
            return Err(TrainError::ScheduleOverrun {
                t: ckpt.step,
                horizon: config.iterations,
            });
        }
        let optimizer = match ckpt.optimizer {
            Some(o) if o.matches(&ckpt.model.params) => o,
            Some(_) => {
                return Err(TrainError::InvalidConfig(
                    "checkpoint optimizer state does not match the model".into(),
                ))
            }
            None => AdamState::new(&ckpt.model.params),
        };
        Ok(Trainer {
            model: ckpt.model,
            optimizer,
            step: ckpt.step,
            config,
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> Result<f64, TrainError> {
        cosine_lr(
            self.step,
            self.config.iterations,
            self.config.lr_max,
            self.config.lr_min,
        )
    }

    /// Mean L1 loss of the batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[(Tensor<T>, Tensor<T>)],
    ) -> Result<(f64, Vec<Option<Tensor<T>>>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::InvalidConfig("empty batch".into()));
        }
        let tape = Tape::new();
        let p = self.model.bind_on(&tape);
        let mut total: Option<Var<T>> = None;
        for (burst, target) in batch {
            let pred = self.model.forward(&p, &Var::constant(burst.clone()))?;
            let l = l1_loss(&pred, &Var::constant(target.clone()))?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = total
            .expect("non-empty batch")
            .scale(1.0 / batch.len() as f64)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step + 1,
                loss: value,
            });
        }
        let grads = tape.backward(&loss)?;
        Ok((
            value,
            p.vars().iter().map(|v| grads.get(v).cloned()).collect(),
        ))
    }

    /// One Adam update at an explicit learning rate.
    pub fn step_with_lr(
        &mut self,
        batch: &[(Tensor<T>, Tensor<T>)],
        lr: f64,
    ) -> Result<StepRecord, TrainError> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.optimizer,
            &self.config.adam,
            lr,
        )?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    /// One Adam update on the cosine schedule.
    pub fn step(&mut self, batch: &[(Tensor<T>, Tensor<T>)]) -> Result<StepRecord, TrainError> {
        let lr = self.lr()?;
        self.step_with_lr(batch, lr)
    }

    /// Checks every sample against the model's input and output shapes.
    pub fn check_data(&self, data: &[BurstSample]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::InvalidConfig("no training samples".into()));
        }
        let cfg = &self.model.config;
        for (i, s) in data.iter().enumerate() {
            if s.task != cfg.task {
                return Err(TrainError::InvalidConfig(format!(
                    "sample {i} is {} data, model is {}",
                    s.task, cfg.task
                )));
            }
            self.model.check_input(s.burst.shape())?;
            let (h, w) = (s.burst.shape()[2], s.burst.shape()[3]);
            if s.ground_truth.shape() != cfg.output_shape(h, w) {
                return Err(TrainError::InvalidConfig(format!(
                    "sample {i}: ground truth {:?} but the model produces {:?}",
                    s.ground_truth.shape(),
                    cfg.output_shape(h, w)
                )));
            }
        }
        Ok(())
    }

    /// Samples for the next step. Depends only on the seed and step index,
    /// so resumed runs see the same stream.
    pub fn batch_for_step(&self, data: &[BurstSample]) -> Vec<(Tensor<T>, Tensor<T>)> {
        let step_seed = split_seed(self.config.seed, self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let flip = self.config.augment && !self.model.config.task.is_raw();
        (0..self.config.batch_size)
            .map(|i| {
                let s = &data[rng.random_range(0..data.len())];
                let s = if flip {
                    augment_flips(s, split_seed(step_seed, i as u64 + 1))
                } else {
                    s.clone()
                };
                (s.burst.cast(), s.ground_truth.cast())
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Writes the checkpoint through a temporary file so an interrupted
    /// write never replaces the previous one.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("partial");
        checkpoint::save(&tmp, &self.model, self.step, Some(&self.optimizer))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Trains to the end of the schedule, appending to the loss log and
    /// checkpointing every `checkpoint_interval` steps and at the end. On a
    /// numerical failure the last written checkpoint is left in place.
    pub fn run(
        &mut self,
        data: &[BurstSample],
        paths: &TrainPaths,
    ) -> Result<Vec<StepRecord>, TrainError> {
        self.check_data(data)?;
        let mut log = match &paths.log {
            Some(p) => {
                let fresh = self.step == 0 || !p.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(p)?;
                if fresh {
                    writeln!(f, "{LOSS_LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < self.config.iterations {
            let batch = self.batch_for_step(data);
            let r = self.step(&batch)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{},{},{}", r.step, r.lr, r.loss)?;
            }
            records.push(r);
            let interval = self.config.checkpoint_interval;
            if let Some(p) = &paths.checkpoint {
                if interval > 0 && self.step % interval == 0 && self.step < self.config.iterations {
                    self.save(p)?;
                }
            }
        }
        if let Some(p) = &paths.checkpoint {
            self.save(p)?;
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Task};
    use crate::sim::{make_sample, SimParams};
    use crate::tensor::Init;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(
            shape,
            Init::Uniform {
                seed,
                low: -1.0,
                high: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn l1_cases() {
        let a = rand(&[3, 4, 5], 1);
        let b = rand(&[3, 4, 5], 2);
        let l = l1_loss(&Var::constant(a.clone()), &Var::constant(a.clone())).unwrap();
        assert_eq!(l.value().item(), 0.0);
        let shifted = a.map(|v| v - 0.5);
        let l = l1_loss(&Var::constant(a.clone()), &Var::constant(shifted)).unwrap();
        assert!((l.value().item() - 0.5).abs() < 1e-15);
        let naive = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 60.0;
        let l = l1_loss(&Var::constant(a.clone()), &Var::constant(b)).unwrap();
        assert!((l.value().item() - naive).abs() < 1e-7);
        assert!(l1_loss(&Var::constant(a), &Var::constant(rand(&[3, 4, 4], 1))).is_err());
    }

    #[test]
    fn l1_subgradient_at_ties_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = Var::constant(Tensor::from_vec(&[3], vec![1.0, 0.0, 5.0]).unwrap());
        let g = tape.backward(&l1_loss(&x, &y).unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6).unwrap() - 5.05e-5).abs() < 1e-15);
        assert!(matches!(
            cosine_lr(101, 100, 1e-4, 1e-6),
            Err(TrainError::ScheduleOverrun {
                t: 101,
                horizon: 100
            })
        ));
        let lrs: Vec<f64> = (0..=37)
            .map(|t| cosine_lr(t, 37, 1e-3, 0.0).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn denoise_sample(seed: u64) -> BurstSample {
        let p = SimParams {
            crop: Some(12),
            burst_size: Some(2),
            ..SimParams::default()
        };
        let n = p.source_extent(Task::DenoiseGray).unwrap();
        let src = Tensor::create(
            &[3, n, n],
            Init::Uniform {
                seed,
                low: 0.0,
                high: 1.0,
            },
        )
        .unwrap();
        make_sample(Task::DenoiseGray, &src, &p, seed).unwrap()
    }

    #[test]
    fn flips_are_consistent_and_reproducible() {
        let s = denoise_sample(1);
        let a = augment_flips(&s, 9);
        assert_eq!(a, augment_flips(&s, 9));
        let twice = augment_flips(&a, 9);
        assert_eq!(twice.burst, s.burst);
        assert_eq!(twice.ground_truth, s.ground_truth);
        let (v, h) = (a.flips.0 ^ s.flips.0, a.flips.1 ^ s.flips.1);
        for k in 0..2 {
            assert_eq!(a.burst.index0(k), s.burst.index0(k).flip_hw(v, h));
        }
        assert_eq!(a.ground_truth, s.ground_truth.flip_hw(v, h));
        let outcomes: std::collections::HashSet<_> =
            (0..32).map(|seed| augment_flips(&s, seed).flips).collect();
        assert_eq!(outcomes.len(), 4);
    }

    fn tiny_trainer(iterations: u64) -> Trainer<f64> {
        let model = Model::build(
            &ModelConfig::new(Task::DenoiseGray, 2, 16)
                .with_seed(1)
                .with_dtype(crate::DType::F64),
        )
        .unwrap();
        Trainer::new(
            model,
            TrainConfig {
                lr_max: 1e-3,
                seed: 4,
                ..TrainConfig::new(iterations)
            },
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr_min: 1e-3,
            lr_max: 1e-4,
            ..TrainConfig::new(10)
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::new(10)
        }
        .validate()
        .is_err());
        assert!(TrainConfig::new(10).validate().is_ok());
        let json = r#"{"iterations": 5, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_fixed() {
        let mut t = tiny_trainer(3);
        let batch = t.batch_for_step(&[denoise_sample(2)]);
        let a = t.step_with_lr(&batch, 0.0).unwrap();
        let b = t.step_with_lr(&batch, 0.0).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let paths = TrainPaths {
            checkpoint: Some(dir.path().join("m.ckpt")),
            log: Some(dir.path().join("loss.csv")),
        };
        let mut t = tiny_trainer(0);
        assert!(t.run(&[denoise_sample(3)], &paths).unwrap().is_empty());
        let back = checkpoint::load::<f64>(&dir.path().join("m.ckpt")).unwrap();
        assert_eq!(back.step, 0);
        assert_eq!(
            checkpoint::to_bytes(&back.model, 0, None).unwrap(),
            checkpoint::to_bytes(&t.model, 0, None).unwrap()
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("loss.csv")).unwrap(),
            "step,lr,loss\n"
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = [denoise_sample(5), denoise_sample(6)];
        let dir = tempfile::tempdir().unwrap();
        let mut full = tiny_trainer(4);
        let all = full.run(&data, &TrainPaths::default()).unwrap();
        assert_eq!(all.len(), 4);

        let ck = dir.path().join("half.ckpt");
        let log = dir.path().join("loss.csv");
        let mut first = tiny_trainer(4);
        for _ in 0..2 {
            let b = first.batch_for_step(&data);
            first.step(&b).unwrap();
        }
        first.save(&ck).unwrap();
        let mut resumed =
            Trainer::resume(checkpoint::load(&ck).unwrap(), full.config.clone()).unwrap();
        assert_eq!(resumed.step, 2);
        let rest = resumed
            .run(
                &data,
                &TrainPaths {
                    checkpoint: None,
                    log: Some(log.clone()),
                },
            )
            .unwrap();
        assert_eq!(rest, all[2..]);
        assert_eq!(resumed.lr().unwrap(), full.config.lr_min);
        for id in full.model.params.ids() {
            assert_eq!(full.model.params.get(id), resumed.model.params.get(id));
        }
        let text = fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("step,lr,loss\n3,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn shape_conflicts_fail_before_training() {
        let mut t = tiny_trainer(2);
        let mut s = denoise_sample(7);
        s.ground_truth = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            t.run(&[s], &TrainPaths::default()),
            Err(TrainError::InvalidConfig(_))
        ));
        assert_eq!(t.step, 0);
        assert!(t.run(&[], &TrainPaths::default()).is_err());
    }

    #[test]
    fn nan_input_aborts_and_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("m.ckpt");
        let mut t = tiny_trainer(3);
        t.save(&ck).unwrap();
        let before = fs::read(&ck).unwrap();
        let mut s = denoise_sample(8);
        s.burst.data_mut()[0] = f64::NAN;
        let err = t
            .run(
                &[s],
                &TrainPaths {
                    checkpoint: Some(ck.clone()),
                    log: None,
                },
            )
            .unwrap_err();
        assert!(err.is_numerical(), "{err:?}");
        assert_eq!(t.step, 0);
        assert_eq!(fs::read(&ck).unwrap(), before);
    }
}
