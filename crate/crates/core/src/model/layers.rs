//! Convolution layers and the residual attention blocks built from them.

use super::params::{Bound, ParamId, ParamStore, WeightInit};
use crate::autodiff::{Result, Var};
use crate::error::{ModelError, TensorError};
use crate::nn::{conv2d, conv_transpose2d, ConvSpec};
use crate::tensor::Float;

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Global context attention bottleneck ratio.
pub const GCA_RATIO: usize = 4;

/// Bottleneck ratio used for width `f`: [`GCA_RATIO`] when it divides `f`,
/// otherwise the largest smaller ratio that does (only odd tiny widths hit this).
pub fn gca_ratio_for(f: usize) -> usize {
    (1..=GCA_RATIO).rev().find(|r| f % r == 0).unwrap_or(1)
}

/// Scale applied to the He init of the last conv on each residual branch.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// A parameterised conv or transposed conv.
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    /// `scale = None` zero-initialises the weight; biases always start at zero.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        scale: Option<f64>,
    ) -> std::result::Result<Self, ModelError> {
        spec.validate()?;
        let (shape, fan_in) = if transposed {
            let s2 = spec.stride * spec.stride;
            (
                spec.transposed_weight_shape(),
                (spec.in_channels * spec.kernel * spec.kernel / s2).max(1),
            )
        } else {
            (spec.weight_shape(), spec.fan_in())
        };
        let init = match scale {
            Some(scale) => WeightInit::He { fan_in, scale },
            None => WeightInit::Zeros,
        };
        let weight = store.add(format!("{name}.weight"), &shape, init)?;
        let bias = if spec.bias {
            Some(store.add(
                format!("{name}.bias"),
                &[spec.out_channels],
                WeightInit::Zeros,
            )?)
        } else {
            None
        };
        Ok(Conv {
            spec,
            transposed,
            weight,
            bias,
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let bias = self.bias.map(|b| p.get(b));
        if self.transposed {
            conv_transpose2d(x, &self.spec, p.get(self.weight), bias)
        } else {
            conv2d(x, &self.spec, p.get(self.weight), bias)
        }
    }
}

/// Rank-4 view of a `[C,H,W]` or `[N,C,H,W]` value plus a restore flag.
pub(crate) fn as_batched<T: Float>(x: &Var<T>) -> Result<(Var<T>, bool)> {
    match *x.shape() {
        [c, h, w] => Ok((x.reshape(&[1, c, h, w])?, true)),
        [_, _, _, _] => Ok((x.clone(), false)),
        _ => Err(TensorError::invalid(
            "layer",
            format!("expected [C,H,W] or [N,C,H,W], got {:?}", x.shape()),
        )),
    }
}

pub(crate) fn unbatch<T: Float>(x: Var<T>, squeeze: bool) -> Result<Var<T>> {
    if squeeze {
        let s = x.shape()[1..].to_vec();
        x.reshape(&s)
    } else {
        Ok(x)
    }
}

/// Global context attention:
/// `x + up(γ(down(Σ_p softmax_p(key(x)) · x_p)))`.
#[derive(Debug, Clone)]
pub struct Gca {
    pub key: Conv,
    pub down: Conv,
    pub up: Conv,
}

impl Gca {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
        ratio: usize,
    ) -> std::result::Result<Self, ModelError> {
        if ratio == 0 || f % ratio != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "width {f} not divisible by attention ratio {ratio}"
            )));
        }
        Ok(Gca {
            key: Conv::new(
                store,
                &format!("{name}.key"),
                ConvSpec::new(f, 1, 1),
                false,
                Some(1.0),
            )?,
            down: Conv::new(
                store,
                &format!("{name}.down"),
                ConvSpec::new(f, f / ratio, 1),
                false,
                Some(1.0),
            )?,
            up: Conv::new(
                store,
                &format!("{name}.up"),
                ConvSpec::new(f / ratio, f, 1),
                false,
                Some(RESIDUAL_INIT_SCALE),
            )?,
        })
    }

    /// Spatial softmax weights `[N, H·W, 1]`.
    pub fn weights<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let (x, _) = as_batched(x)?;
        let [n, _, h, w] = *x.shape() else {
            unreachable!()
        };
        self.key.forward(p, &x)?.reshape(&[n, h * w, 1])?.softmax(1)
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let (xb, squeeze) = as_batched(x)?;
        let [n, f, h, w] = *xb.shape() else {
            unreachable!()
        };
        let wts = self.weights(p, &xb)?;
        let ctx = xb
            .reshape(&[n, f, h * w])?
            .bmm(&wts)?
            .reshape(&[n, f, 1, 1])?;
        let t = self
            .up
            .forward(p, &self.down.forward(p, &ctx)?.leaky_relu(LEAKY_SLOPE)?)?;
        unbatch(xb.add(&t)?, squeeze)
    }
}

/// Residual global context attention block:
/// `x + out(gca(c2(γ(c1(x)))))`.
#[derive(Debug, Clone)]
pub struct Rgcab {
    pub c1: Conv,
    pub c2: Conv,
    pub gca: Gca,
    pub out: Conv,
}

impl Rgcab {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
    ) -> std::result::Result<Self, ModelError> {
        Ok(Rgcab {
            c1: Conv::new(
                store,
                &format!("{name}.c1"),
                ConvSpec::new(f, f, 3),
                false,
                Some(1.0),
            )?,
            c2: Conv::new(
                store,
                &format!("{name}.c2"),
                ConvSpec::new(f, f, 3),
                false,
                Some(1.0),
            )?,
            gca: Gca::new(store, &format!("{name}.gca"), f, gca_ratio_for(f))?,
            out: Conv::new(
                store,
                &format!("{name}.out"),
                ConvSpec::new(f, f, 1),
                false,
                Some(RESIDUAL_INIT_SCALE),
            )?,
        })
    }

    /// The residual branch alone.
    pub fn branch<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let xbar = self
            .c2
            .forward(p, &self.c1.forward(p, x)?.leaky_relu(LEAKY_SLOPE)?)?;
        self.out.forward(p, &self.gca.forward(p, &xbar)?)
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.add(&self.branch(p, x)?)
    }
}

/// Residual-in-residual stack of [`Rgcab`] groups.
///
/// Each group is `x + tail(blocks(x))`; the module is `x + tail(groups(x))`.
#[derive(Debug, Clone)]
pub struct Fpm {
    pub groups: Vec<(Vec<Rgcab>, Conv)>,
    pub tail: Conv,
}

impl Fpm {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
        groups: usize,
        blocks: usize,
    ) -> std::result::Result<Self, ModelError> {
        if groups == 0 || blocks == 0 {
            return Err(ModelError::InvalidConfig(
                "feature processing module needs at least one group and block".into(),
            ));
        }
        let mut gs = Vec::with_capacity(groups);
        for g in 0..groups {
            let bs = (0..blocks)
                .map(|b| Rgcab::new(store, &format!("{name}.g{g}.b{b}"), f))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let tail = Conv::new(
                store,
                &format!("{name}.g{g}.tail"),
                ConvSpec::new(f, f, 3),
                false,
                Some(RESIDUAL_INIT_SCALE),
            )?;
            gs.push((bs, tail));
        }
        let tail = Conv::new(
            store,
            &format!("{name}.tail"),
            ConvSpec::new(f, f, 3),
            false,
            Some(RESIDUAL_INIT_SCALE),
        )?;
        Ok(Fpm { groups: gs, tail })
    }

    pub fn block_count(&self) -> usize {
        self.groups.iter().map(|(b, _)| b.len()).sum()
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for (blocks, tail) in &self.groups {
            let mut g = h.clone();
            for b in blocks {
                g = b.forward(p, &g)?;
            }
            h = h.add(&tail.forward(p, &g)?)?;
        }
        x.add(&self.tail.forward(p, &h)?)
    }
}
