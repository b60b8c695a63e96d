//! Convolution and sampling operators on [`Var`]s.
//!
//! Image tensors are `[C, H, W]` or batched `[N, C, H, W]`; every operator
//! accepts either and returns the same rank it was given.

mod conv;
mod deform;
pub(crate) mod kernels;
mod sample;

pub use conv::{conv2d, conv_transpose2d};
#[doc(hidden)]
pub use deform::deform_conv2d_with_layout;
pub use deform::{deform_conv2d, DeformField, OffsetLayout, DEFORM_TAPS};
pub use kernels::bilinear_at;
pub use sample::bilinear_sample;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::tensor::Float;

/// Hyper-parameters of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding `(k-1)/2`, one group, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel.saturating_sub(1) / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::invalid("conv", msg));
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.stride == 0 || self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad(format!("degenerate spec {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    /// Weight shape for [`conv2d`]: `[Cout, Cin/groups, k, k]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Weight shape for [`conv_transpose2d`]: `[Cin, Cout, k, k]`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }
}

/// `(n, c, h, w, batched)` view of a 3-D or 4-D image tensor.
pub(crate) fn image_dims(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
        )),
    }
}

pub(crate) fn image_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

pub(crate) fn expect_shape<T: Float>(
    op: &'static str,
    v: &Var<T>,
    want: &[usize],
) -> Result<(), TensorError> {
    if v.shape() != want {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: want.to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok(())
}
