//! Built-in invariant checks run by the `selftest` command.

use std::ops::Range;

use crate::autodiff::{grad_check, GradCheckOptions, Result, Var};
use crate::model::{Agu, AguTrace, ParamStore};
use crate::nn::{
    bilinear_sample, conv2d, conv_transpose2d, deform_conv2d_with_layout, ConvSpec, DeformField,
    OffsetLayout,
};
use crate::sim::{add_noise, NoiseParams, GAIN_TABLE};
use crate::tensor::{Init, Tensor};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Check {
            name,
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }
}

/// Deliberate defects for exercising the checks.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Deformable convolution reads offsets with x and y exchanged.
    OffsetLayout,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const REDUCTION_TOLERANCE: f64 = 1e-6;
pub const ADJOINT_TOLERANCE: f64 = 1e-6;
pub const ATTENTION_TOLERANCE: f64 = 1e-6;
pub const NOISE_TOLERANCE: f64 = 0.03;
pub const NOISE_SAMPLES: usize = 1_000_000;
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn rand(shape: &[usize], seed: u64, r: Range<f64>) -> Tensor<f64> {
    Tensor::create(
        shape,
        Init::Uniform {
            seed,
            low: r.start,
            high: r.end,
        },
    )
    .expect("valid shape")
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        max_coords_per_input: Some(40),
        seed,
    }
}

/// Weighted sum so every output element carries a distinct gradient.
fn probe(y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let w = Var::constant(rand(y.shape(), seed, -1.0..1.0));
    y.mul(&w)?.sum_all()
}

fn grad_conv() -> Result<f64> {
    let spec = ConvSpec::new(4, 6, 3).stride(2).groups(2).bias(true);
    let inputs = [
        (rand(&[2, 4, 7, 6], 1, -1.0..1.0), true),
        (rand(&spec.weight_shape(), 2, -1.0..1.0), true),
        (rand(&[6], 3, -1.0..1.0), true),
    ];
    let r = grad_check(
        |v| probe(&conv2d(&v[0], &spec, &v[1], Some(&v[2]))?, 4),
        &inputs,
        &opts(1),
    )?;
    Ok(r.max_rel_error)
}

fn grad_tconv() -> Result<f64> {
    let spec = ConvSpec::new(3, 2, 3).stride(2);
    let inputs = [
        (rand(&[3, 4, 5], 5, -1.0..1.0), true),
        (rand(&spec.transposed_weight_shape(), 6, -1.0..1.0), true),
    ];
    let r = grad_check(
        |v| probe(&conv_transpose2d(&v[0], &spec, &v[1], None)?, 7),
        &inputs,
        &opts(2),
    )?;
    Ok(r.max_rel_error)
}

fn grad_sample() -> Result<f64> {
    let inputs = [
        (rand(&[2, 5, 6], 8, -1.0..1.0), true),
        (rand(&[2, 4, 4], 9, 0.1..4.2), true),
    ];
    let r = grad_check(
        |v| probe(&bilinear_sample(&v[0], &v[1])?, 10),
        &inputs,
        &opts(3),
    )?;
    Ok(r.max_rel_error)
}

fn grad_deform(layout: OffsetLayout) -> Result<f64> {
    let inputs = [
        (rand(&[2, 5, 5], 11, -1.0..1.0), true),
        (rand(&[18, 5, 5], 12, -1.4..1.4), true),
        (rand(&[9, 5, 5], 13, 0.05..0.95), true),
        (rand(&[3, 2, 3, 3], 14, -1.0..1.0), true),
    ];
    let f = |v: &[Var<f64>]| {
        let field = DeformField {
            offsets: v[1].clone(),
            masks: v[2].clone(),
        };
        probe(
            &deform_conv2d_with_layout(&v[0], &field, &v[3], layout)?,
            15,
        )
    };
    Ok(grad_check(f, &inputs, &opts(4))?.max_rel_error)
}

/// Zero offsets with unit masks, then a whole-pixel horizontal offset,
/// against the equivalent plain convolutions.
fn deform_reduction(layout: OffsetLayout) -> Result<f64> {
    let (h, w) = (8, 8);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let x = Var::constant(rand(&[3, h, w], 100 + seed, -1.0..1.0));
        let wt = Var::constant(rand(&[4, 3, 3, 3], 200 + seed, -1.0..1.0));
        let conv = conv2d(&x, &ConvSpec::new(3, 4, 3), &wt, None)?;
        let ones = Var::constant(Tensor::full(&[9, h, w], 1.0));
        let zero = DeformField {
            offsets: Var::constant(Tensor::zeros(&[18, h, w])),
            masks: ones.clone(),
        };
        worst = worst.max(
            deform_conv2d_with_layout(&x, &zero, &wt, layout)?
                .value()
                .max_abs_diff(conv.value()),
        );
        // x offset of +1 at every tap (odd channels in the interleaved layout)
        let mut off = Tensor::zeros(&[18, h, w]);
        for tap in 0..9 {
            off.data_mut()[(2 * tap + 1) * h * w..(2 * tap + 2) * h * w].fill(1.0);
        }
        let shifted = deform_conv2d_with_layout(
            &x,
            &DeformField {
                offsets: Var::constant(off),
                masks: ones,
            },
            &wt,
            layout,
        )?;
        let (a, b) = (shifted.value().data(), conv.value().data());
        for c in 0..4 {
            for y in 0..h {
                for xx in 0..w - 2 {
                    let i = (c * h + y) * w + xx;
                    worst = worst.max((a[i] - b[i + 1]).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn adjoint() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let spec = ConvSpec::new(3, 5, 3).stride(2);
        let w = Var::constant(rand(&spec.weight_shape(), 300 + trial, -1.0..1.0));
        let x = Var::constant(rand(&[3, 10, 12], 400 + trial, -1.0..1.0));
        let y = Var::constant(rand(&[5, 5, 6], 500 + trial, -1.0..1.0));
        let lhs = conv2d(&x, &spec, &w, None)?.value().dot(y.value());
        // the transposed conv with the same weights (Cin and Cout exchanged)
        let tspec = ConvSpec::new(5, 3, 3).stride(2);
        let rhs = x
            .value()
            .dot(conv_transpose2d(&y, &tspec, &w, None)?.value());
        worst = worst.max((lhs - rhs).abs() / lhs.abs());
    }
    Ok(worst)
}

fn attention_normalisation() -> Result<f64> {
    let mut store = ParamStore::<f64>::new(21);
    let agu = Agu::new(&mut store, "agu", 16, 3, 3)
        .map_err(|e| crate::error::TensorError::invalid("selftest", e.to_string()))?;
    let frames = Var::constant(rand(&[16, 16, 4, 4], 22, -1.0..1.0));
    let mut trace = AguTrace::default();
    agu.forward(&store.bind(None), &frames, Some(&mut trace))?;
    let mut worst: f64 = 0.0;
    for a in &trace.attention {
        let (g, k) = (a.shape()[0], a.shape()[1]);
        let inner = a.numel() / (g * k);
        for gi in 0..g {
            for i in 0..inner {
                let s: f64 = (0..k).map(|m| a.data()[(gi * k + m) * inner + i]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest relative gap between empirical and model variance over the gain
/// table and the signal levels.
pub fn noise_variance_error(samples: usize) -> std::result::Result<f64, crate::error::SimError> {
    let mut worst: f64 = 0.0;
    for (gi, &(gain, _, _)) in GAIN_TABLE.iter().enumerate() {
        let p = NoiseParams::for_gain(gain)?;
        for (li, &x) in NOISE_LEVELS.iter().enumerate() {
            let clean = Tensor::full(&[samples], x);
            let noisy = add_noise(&clean, &p, (gi * 16 + li) as u64)?;
            let var = noisy.data().iter().map(|v| (v - x) * (v - x)).sum::<f64>() / samples as f64;
            worst = worst.max((var / p.variance(x) - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Runs every check.
pub fn run(fault: Option<Fault>) -> Result<Vec<Check>> {
    let layout = match fault {
        Some(Fault::OffsetLayout) => OffsetLayout::Swapped,
        None => OffsetLayout::Interleaved,
    };
    let noise = noise_variance_error(NOISE_SAMPLES)
        .map_err(|e| crate::error::TensorError::invalid("selftest", e.to_string()))?;
    Ok(vec![
        Check::below("grad conv2d", grad_conv()?, GRAD_TOLERANCE),
        Check::below("grad conv_transpose2d", grad_tconv()?, GRAD_TOLERANCE),
        Check::below("grad bilinear_sample", grad_sample()?, GRAD_TOLERANCE),
        Check::below("grad deform_conv2d", grad_deform(layout)?, GRAD_TOLERANCE),
        Check::below(
            "deform_conv2d reduces to conv2d",
            deform_reduction(layout)?,
            REDUCTION_TOLERANCE,
        ),
        Check::below("transposed conv adjoint", adjoint()?, ADJOINT_TOLERANCE),
        Check::below(
            "attention sums to one",
            attention_normalisation()?,
            ATTENTION_TOLERANCE,
        ),
        Check::below("noise variance", noise, NOISE_TOLERANCE),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_and_fault_is_caught() {
        let clean = run(None).unwrap();
        assert!(clean.iter().all(|c| c.passed), "{clean:?}");
        let faulty = run(Some(Fault::OffsetLayout)).unwrap();
        let bad: Vec<_> = faulty
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        assert_eq!(bad, ["deform_conv2d reduces to conv2d"]);
    }
}
