//! Adaptive group upsampling: attention-weighted merging of pseudo-frames in
//! groups of four, level by level, down to a single output image.

use super::layers::{Conv, LEAKY_SLOPE};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Result, Var};
use crate::error::{ModelError, TensorError};
use crate::nn::ConvSpec;
use crate::tensor::{Float, Tensor};

/// Members merged per group.
pub const GROUP_SIZE: usize = 4;

/// What a level does to spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Transposed conv, ×2 in each dimension.
    Upsample,
    /// Grouped conv at the same resolution.
    Flat,
}

/// Shape of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelPlan {
    /// Merges groups of four frames; otherwise a single-frame ×2 stage.
    pub grouped: bool,
    pub mode: MergeMode,
    pub out_channels: usize,
}

/// Level layout for width `f` (a power of 4, at least 4) with `upsamplings`
/// ×2 stages and `out_channels` in the final image.
///
/// There are `log4(f)` grouping levels; the ×2 stages sit at the last levels
/// and any that do not fit are appended as single-frame levels.
pub fn plan_levels(
    f: usize,
    upsamplings: usize,
    out_channels: usize,
) -> std::result::Result<Vec<LevelPlan>, ModelError> {
    let mut grouping = 0;
    let mut n = f;
    while n > 1 && n % GROUP_SIZE == 0 {
        n /= GROUP_SIZE;
        grouping += 1;
    }
    if n != 1 || grouping == 0 {
        return Err(ModelError::InvalidConfig(format!(
            "feature width {f} must be a power of 4 for group merging"
        )));
    }
    let total = grouping.max(upsamplings);
    Ok((0..total)
        .map(|i| LevelPlan {
            grouped: i < grouping,
            mode: if i >= total - upsamplings {
                MergeMode::Upsample
            } else {
                MergeMode::Flat
            },
            out_channels: if i + 1 == total { out_channels } else { f },
        })
        .collect())
}

/// A level that merges groups of four frames.
#[derive(Debug, Clone)]
pub struct GroupMerge {
    pub att1: Conv,
    pub att2: Conv,
    pub merge: Conv,
    /// Final flat level only: maps `f` merged channels to the output channels.
    pub project: Option<Conv>,
    pub mode: MergeMode,
    pub f: usize,
}

impl GroupMerge {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
        plan: LevelPlan,
    ) -> std::result::Result<Self, ModelError> {
        let g = GROUP_SIZE;
        let att1 = Conv::new(
            store,
            &format!("{name}.att1"),
            ConvSpec::new(f, f, 1),
            false,
            Some(1.0),
        )?;
        let att2 = Conv::new(
            store,
            &format!("{name}.att2"),
            ConvSpec::new(f, g * f, 1),
            false,
            Some(1.0),
        )?;
        let (merge, project) = match plan.mode {
            MergeMode::Upsample => (
                Conv::new(
                    store,
                    &format!("{name}.merge"),
                    ConvSpec::new(g * f, plan.out_channels, 3).stride(2),
                    true,
                    Some(1.0),
                )?,
                None,
            ),
            MergeMode::Flat => {
                let merge = Conv::new(
                    store,
                    &format!("{name}.merge"),
                    ConvSpec::new(g * f, f, 3).groups(g),
                    false,
                    Some(1.0),
                )?;
                let project = (plan.out_channels != f)
                    .then(|| {
                        Conv::new(
                            store,
                            &format!("{name}.project"),
                            ConvSpec::new(f, plan.out_channels, 3),
                            false,
                            Some(1.0),
                        )
                    })
                    .transpose()?;
                (merge, project)
            }
        };
        Ok(GroupMerge {
            att1,
            att2,
            merge,
            project,
            mode: plan.mode,
            f,
        })
    }

    /// Softmax-normalised attention over the group axis for
    /// `members: [G,4,f,H,W]` (or `[4,f,H,W]`), same shape as the input.
    pub fn attention<T: Float>(&self, p: &Bound<T>, members: &Var<T>) -> Result<Var<T>> {
        let (m, squeeze) = group_view(members, self.f)?;
        let [g, k, f, h, w] = *m.shape() else {
            unreachable!()
        };
        let sum = m
            .reshape(&[g, k, f * h * w])?
            .sum_axis(1)?
            .reshape(&[g, f, h, w])?;
        let logits = self
            .att2
            .forward(p, &self.att1.forward(p, &sum)?.leaky_relu(LEAKY_SLOPE)?)?;
        let a = logits.reshape(&[g, k, f, h, w])?.softmax(1)?;
        if squeeze {
            a.reshape(&[k, f, h, w])
        } else {
            Ok(a)
        }
    }

    /// Weights the members by `attention`, concatenates them along channels
    /// and applies the level's merge conv.
    pub fn merge<T: Float>(
        &self,
        p: &Bound<T>,
        members: &Var<T>,
        attention: &Var<T>,
    ) -> Result<Var<T>> {
        let (m, squeeze) = group_view(members, self.f)?;
        let [g, k, f, h, w] = *m.shape() else {
            unreachable!()
        };
        let weighted = m
            .mul(&attention.reshape(&[g, k, f, h, w])?)?
            .reshape(&[g, k * f, h, w])?;
        let mut out = self.merge.forward(p, &weighted)?;
        if let Some(proj) = &self.project {
            out = proj.forward(p, &out)?;
        }
        if squeeze {
            let s = out.shape()[1..].to_vec();
            out.reshape(&s)
        } else {
            Ok(out)
        }
    }
}

fn group_view<T: Float>(members: &Var<T>, f: usize) -> Result<(Var<T>, bool)> {
    match *members.shape() {
        [GROUP_SIZE, c, h, w] if c == f => Ok((members.reshape(&[1, GROUP_SIZE, c, h, w])?, true)),
        [_, GROUP_SIZE, c, _, _] if c == f => Ok((members.clone(), false)),
        _ => Err(TensorError::invalid(
            "group_attention",
            format!(
                "expected groups of {GROUP_SIZE} frames with {f} channels, got {:?}",
                members.shape()
            ),
        )),
    }
}

/// One AGU level.
#[derive(Debug, Clone)]
pub enum AguLevel {
    Group(GroupMerge),
    /// Single-frame ×2 stage used when more upsamplings are needed than
    /// there are grouping levels.
    Single(Conv),
}

/// Attention maps and group counts observed during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct AguTrace<T> {
    pub groups_per_level: Vec<usize>,
    /// `[G,4,f,H,W]` per grouping level.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Agu {
    pub levels: Vec<AguLevel>,
    pub f: usize,
}

impl Agu {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
        upsamplings: usize,
        out_channels: usize,
    ) -> std::result::Result<Self, ModelError> {
        let plans = plan_levels(f, upsamplings, out_channels)?;
        let mut levels = Vec::with_capacity(plans.len());
        for (i, plan) in plans.into_iter().enumerate() {
            let lname = format!("{name}.level{}", i + 1);
            levels.push(if plan.grouped {
                AguLevel::Group(GroupMerge::new(store, &lname, f, plan)?)
            } else {
                AguLevel::Single(Conv::new(
                    store,
                    &lname,
                    ConvSpec::new(f, plan.out_channels, 3).stride(2),
                    true,
                    Some(1.0),
                )?)
            });
        }
        Ok(Agu { levels, f })
    }

    /// `frames: [n,f,H,W]` → final image `[C,H',W']`.
    pub fn forward<T: Float>(
        &self,
        p: &Bound<T>,
        frames: &Var<T>,
        mut trace: Option<&mut AguTrace<T>>,
    ) -> Result<Var<T>> {
        let mut x = frames.clone();
        for level in &self.levels {
            let [n, c, h, w] = *x.shape() else {
                return Err(TensorError::invalid(
                    "agu",
                    format!("expected [n,f,H,W], got {:?}", x.shape()),
                ));
            };
            x = match level {
                AguLevel::Group(gm) => {
                    if n % GROUP_SIZE != 0 {
                        return Err(TensorError::invalid(
                            "agu",
                            format!("{n} frames cannot be split into groups of {GROUP_SIZE}"),
                        ));
                    }
                    let members = x.reshape(&[n / GROUP_SIZE, GROUP_SIZE, c, h, w])?;
                    let a = gm.attention(p, &members)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.groups_per_level.push(n / GROUP_SIZE);
                        t.attention.push(a.value().clone());
                    }
                    gm.merge(p, &members, &a)?
                }
                AguLevel::Single(conv) => {
                    if let Some(t) = trace.as_deref_mut() {
                        t.groups_per_level.push(n);
                    }
                    conv.forward(p, &x)?
                }
            };
        }
        let [1, c, h, w] = *x.shape() else {
            return Err(TensorError::invalid(
                "agu",
                format!("levels left {:?} frames instead of one", x.shape()),
            ));
        };
        x.reshape(&[c, h, w])
    }
}
