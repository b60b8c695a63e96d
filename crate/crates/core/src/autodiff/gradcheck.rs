//! Central-difference verification of backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step; must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Check a seeded random subset of coordinates per input instead of all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    /// The loss did not reach this input (or it was not marked for checking);
    /// its gradient is reported as zero and no coordinates are compared.
    pub skipped: bool,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub inputs: Vec<InputCheck>,
}

/// Compares tape gradients of the scalar program `f` with central
/// differences. Each input is `(value, check)`; unchecked inputs enter as
/// constants. The per-coordinate error is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(
    f: F,
    inputs: &[(Tensor<f64>, bool)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(TensorError::invalid(
            "grad_check",
            format!("eps {} outside [1e-7, 1e-3]", opts.eps),
        ));
    }
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .map(|(t, check)| {
            if *check {
                tape.leaf(t.clone())
            } else {
                Var::constant(t.clone())
            }
        })
        .collect();
    let loss = f(&vars)?;
    if loss.value().numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    let grads = if loss.requires_grad() {
        Some(tape.backward(&loss)?)
    } else {
        None
    };

    let eval = |idx: usize, coord: usize, delta: f64| -> Result<f64> {
        let consts: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(j, (t, _))| {
                if j == idx {
                    let mut p = t.clone();
                    p.data_mut()[coord] += delta;
                    Var::constant(p)
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        let v = f(&consts)?.value().item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        inputs: Vec::with_capacity(inputs.len()),
    };
    for (idx, ((t, check), var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = match (check, &grads) {
            (true, Some(g)) => g.get(var),
            _ => None,
        };
        let Some(analytic) = analytic else {
            report.inputs.push(InputCheck {
                skipped: true,
                coords_checked: 0,
                max_rel_error: 0.0,
            });
            continue;
        };
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let numeric = (eval(idx, c, opts.eps)? - eval(idx, c, -opts.eps)?) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.inputs.push(InputCheck {
            skipped: false,
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn sigmoid_sum() {
        let r = grad_check(
            |v| v[0].sigmoid()?.sum_all(),
            &[(rand(&[5, 3], 1), true)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_sum() {
        let r = grad_check(
            |v| v[0].matmul(&v[1])?.sum_all(),
            &[(rand(&[3, 4], 2), true), (rand(&[4, 2], 3), true)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detached_input_is_skipped() {
        let r = grad_check(
            |v| v[0].detach().mul(&v[1])?.sum_all(),
            &[(rand(&[3], 4), true), (rand(&[3], 5), true)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.inputs[0].skipped);
        assert!(!r.inputs[1].skipped);
    }

    #[test]
    fn eps_range_enforced() {
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(|v| v[0].sum_all(), &[(rand(&[2], 0), true)], &opts).is_err());
    }
}
