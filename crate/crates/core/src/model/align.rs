//! Burst feature alignment against the base frame.

use super::layers::{Conv, Fpm};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Result, Var};
use crate::error::{ModelError, TensorError};
use crate::nn::{deform_conv2d_with_layout, ConvSpec, DeformField, OffsetLayout, DEFORM_TAPS};
use crate::tensor::Float;

/// Number of stacked deformable alignment stages.
pub const ALIGN_STAGES: usize = 3;

/// Predicts a [`DeformField`] from a frame's features and the base features.
///
/// One zero-initialised 3×3 conv maps the `2f` concatenated channels to
/// `2K` offsets and `K` mask logits, so a fresh predictor yields zero offsets
/// and masks of exactly 0.5.
#[derive(Debug, Clone)]
pub struct OffsetPredictor {
    pub conv: Conv,
}

impl OffsetPredictor {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
    ) -> std::result::Result<Self, ModelError> {
        let conv = Conv::new(
            store,
            name,
            ConvSpec::new(2 * f, 3 * DEFORM_TAPS, 3),
            false,
            None,
        )?;
        Ok(OffsetPredictor { conv })
    }

    pub fn forward<T: Float>(
        &self,
        p: &Bound<T>,
        y: &Var<T>,
        base: &Var<T>,
    ) -> Result<DeformField<T>> {
        if y.shape() != base.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "predict_offsets",
                lhs: y.shape().to_vec(),
                rhs: base.shape().to_vec(),
            });
        }
        let axis = y.shape().len() - 3;
        let raw = self.conv.forward(p, &Var::concat(&[y, base], axis)?)?;
        let offsets = raw.slice(axis, 0..2 * DEFORM_TAPS)?;
        let masks = raw
            .slice(axis, 2 * DEFORM_TAPS..3 * DEFORM_TAPS)?
            .sigmoid()?;
        Ok(DeformField { offsets, masks })
    }
}

/// Edge-boosting alignment of a whole burst.
///
/// Per frame: `y = fpm_in(conv_in(x))`, then [`ALIGN_STAGES`] deformable
/// convs each steered by its own [`OffsetPredictor`] against the fixed base
/// features `y_0`, then `r = fpm_out(aligned)` and `e = r + edge(r - y_0)`.
/// Frame 0 is the base and goes through the same path aligned to itself.
#[derive(Debug, Clone)]
pub struct Ebfa {
    pub conv_in: Conv,
    pub fpm_in: Fpm,
    pub predictors: Vec<OffsetPredictor>,
    pub deform: Vec<Conv>,
    pub fpm_out: Fpm,
    pub edge: Conv,
    pub layout: OffsetLayout,
}

impl Ebfa {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        f: usize,
    ) -> std::result::Result<Self, ModelError> {
        let conv_in = Conv::new(
            store,
            &format!("{name}.conv_in"),
            ConvSpec::new(in_channels, f, 3).bias(true),
            false,
            Some(1.0),
        )?;
        let fpm_in = Fpm::new(store, &format!("{name}.fpm_in"), f, 3, 3)?;
        let mut predictors = Vec::with_capacity(ALIGN_STAGES);
        let mut deform = Vec::with_capacity(ALIGN_STAGES);
        for s in 0..ALIGN_STAGES {
            predictors.push(OffsetPredictor::new(
                store,
                &format!("{name}.offset{s}"),
                f,
            )?);
            deform.push(Conv::new(
                store,
                &format!("{name}.deform{s}"),
                ConvSpec::new(f, f, 3),
                false,
                Some(1.0),
            )?);
        }
        let fpm_out = Fpm::new(store, &format!("{name}.fpm_out"), f, 3, 3)?;
        let edge = Conv::new(
            store,
            &format!("{name}.edge"),
            ConvSpec::new(f, f, 3),
            false,
            Some(1.0),
        )?;
        Ok(Ebfa {
            conv_in,
            fpm_in,
            predictors,
            deform,
            fpm_out,
            edge,
            layout: OffsetLayout::Interleaved,
        })
    }

    /// Denoised per-frame features `y`, `[B,f,H,W]`.
    pub fn features<T: Float>(&self, p: &Bound<T>, burst: &Var<T>) -> Result<Var<T>> {
        self.fpm_in.forward(p, &self.conv_in.forward(p, burst)?)
    }

    /// Runs the deformable stages on `y` against `base` (both `[B,f,H,W]`).
    pub fn align<T: Float>(&self, p: &Bound<T>, y: &Var<T>, base: &Var<T>) -> Result<Var<T>> {
        let mut cur = y.clone();
        for (pred, conv) in self.predictors.iter().zip(&self.deform) {
            let field = pred.forward(p, &cur, base)?;
            cur = deform_conv2d_with_layout(&cur, &field, p.get(conv.weight), self.layout)?;
        }
        Ok(cur)
    }

    /// `burst: [B,C,H,W]` → aligned, edge-boosted features `[B,f,H,W]`.
    pub fn forward<T: Float>(&self, p: &Bound<T>, burst: &Var<T>) -> Result<Var<T>> {
        let [b, _, _, _] = *burst.shape() else {
            return Err(TensorError::invalid(
                "ebfa",
                format!("burst must be [B,C,H,W], got {:?}", burst.shape()),
            ));
        };
        let y = self.features(p, burst)?;
        let base = y.slice(0, 0..1)?;
        let base = Var::concat(&vec![&base; b], 0)?;
        let aligned = self.align(p, &y, &base)?;
        let r = self.fpm_out.forward(p, &aligned)?;
        r.add(&self.edge.forward(p, &r.sub(&base)?)?)
    }
}
