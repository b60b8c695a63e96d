//! The burst restoration network: alignment, pseudo-burst fusion and group
//! upsampling assembled per task.

mod align;
pub mod checkpoint;
mod fuse;
mod layers;
mod params;
mod upsample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use align::{Ebfa, OffsetPredictor, ALIGN_STAGES};
pub use fuse::{unet_widths, MsfUnet, PseudoBurst};
pub use layers::{
    gca_ratio_for, Conv, Fpm, Gca, Rgcab, GCA_RATIO, LEAKY_SLOPE, RESIDUAL_INIT_SCALE,
};
pub use params::{Bound, ParamId, ParamStore, WeightInit};
pub use upsample::{
    plan_levels, Agu, AguLevel, AguTrace, GroupMerge, LevelPlan, MergeMode, GROUP_SIZE,
};

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::{DType, Float, Tensor};

/// Restoration task; fixes input layout and the upsampling topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Packed RAW in, sRGB at 8× the packed resolution out.
    SrX4,
    /// Packed RAW in, sRGB at 16× the packed resolution out.
    SrX8,
    /// Packed RAW in, sRGB at 2× the packed resolution out.
    Lowlight,
    DenoiseGray,
    DenoiseColor,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::SrX4,
        Task::SrX8,
        Task::Lowlight,
        Task::DenoiseGray,
        Task::DenoiseColor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::SrX4 => "sr_x4",
            Task::SrX8 => "sr_x8",
            Task::Lowlight => "lowlight",
            Task::DenoiseGray => "denoise_gray",
            Task::DenoiseColor => "denoise_color",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Task::SrX4 | Task::SrX8 | Task::Lowlight => 4,
            Task::DenoiseGray => 1,
            Task::DenoiseColor => 3,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            Task::DenoiseGray => 1,
            _ => 3,
        }
    }

    /// Number of ×2 stages between the network input and output.
    pub fn upsamplings(self) -> usize {
        match self {
            Task::SrX4 => 3,
            Task::SrX8 => 4,
            Task::Lowlight => 1,
            Task::DenoiseGray | Task::DenoiseColor => 0,
        }
    }

    /// Output extent over input extent.
    pub fn scale(self) -> usize {
        1 << self.upsamplings()
    }

    pub fn is_raw(self) -> bool {
        self.input_channels() == 4
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown task {s:?}")))
    }
}

fn default_dtype() -> DType {
    DType::F32
}

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub burst_size: usize,
    pub features: usize,
    /// Must equal the task's input layout; filled in when omitted.
    #[serde(default)]
    pub input_channels: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl ModelConfig {
    pub fn new(task: Task, burst_size: usize, features: usize) -> Self {
        ModelConfig {
            task,
            burst_size,
            features,
            input_channels: Some(task.input_channels()),
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// Fills defaults and checks consistency.
    pub fn resolved(&self) -> Result<ModelConfig, ModelError> {
        let mut c = self.clone();
        let ch = self.task.input_channels();
        match c.input_channels {
            None => c.input_channels = Some(ch),
            Some(x) if x != ch => {
                return Err(ModelError::InvalidConfig(format!(
                    "task {} takes {ch} input channels, config says {x}",
                    self.task
                )));
            }
            _ => {}
        }
        if c.burst_size == 0 {
            return Err(ModelError::InvalidConfig(
                "burst_size must be at least 1".into(),
            ));
        }
        if c.features == 0 || c.features % 16 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "features {} must be a positive multiple of 16",
                c.features
            )));
        }
        plan_levels(c.features, c.task.upsamplings(), c.task.output_channels())?;
        Ok(c)
    }

    /// Expected `[B, C, H, W]` for a packed input of `h × w`.
    pub fn input_shape(&self, h: usize, w: usize) -> [usize; 4] {
        [self.burst_size, self.task.input_channels(), h, w]
    }

    pub fn output_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let s = self.task.scale();
        [self.task.output_channels(), h * s, w * s]
    }
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    /// Aligned features `[B,f,H,W]`.
    pub aligned: Option<Tensor<T>>,
    /// Pseudo-burst `[f,f,H,W]` before the U-Net.
    pub pseudo_burst: Option<Tensor<T>>,
    pub agu: AguTrace<T>,
}

/// A built network: module tree plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ebfa: Ebfa,
    pub fusion: PseudoBurst,
    pub unet: MsfUnet,
    pub agu: Agu,
}

impl<T: Float> Model<T> {
    /// Builds the network with parameters drawn deterministically from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        let config = config.resolved()?;
        if config.dtype != T::DTYPE {
            return Err(ModelError::InvalidConfig(format!(
                "config dtype {} but model built as {}",
                config.dtype,
                T::DTYPE
            )));
        }
        let f = config.features;
        let mut params = ParamStore::new(config.seed);
        let ebfa = Ebfa::new(&mut params, "ebfa", config.task.input_channels(), f)?;
        let fusion = PseudoBurst::new(&mut params, "fusion", config.burst_size, f)?;
        let unet = MsfUnet::new(&mut params, "unet", f)?;
        let agu = Agu::new(
            &mut params,
            "agu",
            f,
            config.task.upsamplings(),
            config.task.output_channels(),
        )?;
        Ok(Model {
            config,
            params,
            ebfa,
            fusion,
            unet,
            agu,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let c = &self.config;
        let ok = matches!(*shape, [b, ch, h, w] if b == c.burst_size && ch == c.task.input_channels() && h % 4 == 0 && w % 4 == 0);
        if !ok {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                expected: format!(
                    "[{}, {}, H, W] with H, W divisible by 4",
                    c.burst_size,
                    c.task.input_channels()
                ),
            });
        }
        Ok(())
    }

    /// Full network on `burst: [B,C,H,W]` with bound parameters.
    pub fn forward(&self, p: &Bound<T>, burst: &Var<T>) -> Result<Var<T>, ModelError> {
        self.forward_traced(p, burst, None)
    }

    pub fn forward_traced(
        &self,
        p: &Bound<T>,
        burst: &Var<T>,
        mut trace: Option<&mut Trace<T>>,
    ) -> Result<Var<T>, ModelError> {
        self.check_input(burst.shape())?;
        let e = self.ebfa.forward(p, burst)?;
        let s = self.fusion.forward(p, &e)?;
        if let Some(t) = trace.as_deref_mut() {
            t.aligned = Some(e.value().clone());
            t.pseudo_burst = Some(s.value().clone());
        }
        let u = self.unet.forward(p, &s)?;
        Ok(self.agu.forward(p, &u, trace.map(|t| &mut t.agu))?)
    }

    /// Gradient-free forward.
    pub fn infer(&self, burst: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let p = self.params.bind(None);
        let y = self.forward(&p, &Var::constant(burst.clone()))?;
        Ok(y.value().clone())
    }

    /// Binds parameters as leaves of `tape`.
    pub fn bind_on(&self, tape: &Tape<T>) -> Bound<T> {
        self.params.bind(Some(tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(Task::SrX4, 14, 64).resolved().is_ok());
        assert!(ModelConfig::new(Task::SrX4, 0, 64).resolved().is_err());
        assert!(ModelConfig::new(Task::SrX4, 4, 24).resolved().is_err());
        assert!(ModelConfig::new(Task::SrX4, 4, 32).resolved().is_err());
        let mut c = ModelConfig::new(Task::DenoiseGray, 4, 16);
        c.input_channels = Some(3);
        assert!(c.resolved().is_err());
        c.input_channels = None;
        assert_eq!(c.resolved().unwrap().input_channels, Some(1));
        assert_eq!("lowlight".parse::<Task>().unwrap(), Task::Lowlight);
        assert!("sr".parse::<Task>().is_err());
    }

    #[test]
    fn tiny_model_runs_and_is_seeded() {
        let cfg = ModelConfig::new(Task::SrX4, 4, 16).with_seed(7);
        let a = Model::<f32>::build(&cfg).unwrap();
        let b = Model::<f32>::build(&cfg).unwrap();
        for id in a.params.ids() {
            assert_eq!(a.params.get(id), b.params.get(id));
        }
        let x = Tensor::<f32>::create(
            &[4, 4, 8, 8],
            Init::Uniform {
                seed: 1,
                low: 0.0,
                high: 1.0,
            },
        )
        .unwrap();
        let y = a.infer(&x).unwrap();
        assert_eq!(y.shape(), &[3, 64, 64]);
        assert!(y.all_finite());
        assert_eq!(y, b.infer(&x).unwrap());
        assert!(a.infer(&Tensor::zeros(&[3, 4, 8, 8])).is_err());
        assert!(Model::<f64>::build(&cfg).is_err());
    }

    #[test]
    fn task_shapes() {
        for (task, scale) in [
            (Task::SrX4, 8),
            (Task::SrX8, 16),
            (Task::Lowlight, 2),
            (Task::DenoiseColor, 1),
        ] {
            let cfg = ModelConfig::new(task, 2, 16);
            let m = Model::<f32>::build(&cfg).unwrap();
            let x = Tensor::<f32>::full(&cfg.input_shape(4, 4), 0.5);
            let y = m.infer(&x).unwrap();
            assert_eq!(
                y.shape(),
                &[task.output_channels(), 4 * scale, 4 * scale],
                "{task}"
            );
        }
    }
}
