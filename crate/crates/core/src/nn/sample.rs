use rayon::prelude::*;

use super::kernels::Stencil;
use crate::autodiff::{Result, Var};
use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

/// Reads `feature: [C,H,W]` at absolute fractional positions
/// `coords: [2,Ho,Wo]` (`coords[0]` = y, `coords[1]` = x), with zero padding
/// outside the image. Returns `[C,Ho,Wo]`; differentiable in both inputs.
pub fn bilinear_sample<T: Float>(feature: &Var<T>, coords: &Var<T>) -> Result<Var<T>> {
    let [c, h, w] = *feature.shape() else {
        return Err(TensorError::invalid(
            "bilinear_sample",
            format!("feature must be [C,H,W], got {:?}", feature.shape()),
        ));
    };
    let [2, ho, wo] = *coords.shape() else {
        return Err(TensorError::invalid(
            "bilinear_sample",
            format!("coords must be [2,H,W], got {:?}", coords.shape()),
        ));
    };
    if !coords.value().all_finite() {
        return Err(TensorError::NonFinite {
            op: "bilinear_sample",
        });
    }
    let p = ho * wo;
    let cd = coords.value().data();
    let stencils: Vec<Stencil<T>> = (0..p)
        .map(|i| Stencil::new(h, w, cd[i], cd[p + i]))
        .collect();
    let fv = feature.value_rc();
    let fd = fv.data();
    let mut out = vec![T::zero(); c * p];
    out.par_chunks_mut(p).enumerate().for_each(|(ch, o)| {
        let plane = &fd[ch * h * w..(ch + 1) * h * w];
        for (v, s) in o.iter_mut().zip(&stencils) {
            *v = s.sample(plane);
        }
    });
    let out = Tensor::from_parts_unchecked(vec![c, ho, wo], out);
    Var::record(
        "bilinear_sample",
        &[feature, coords],
        out,
        move |gout, needs| {
            let fd = fv.data();
            let g = gout.data();
            let gf = needs[0].then(|| {
                let mut df = vec![T::zero(); c * h * w];
                df.par_chunks_mut(h * w)
                    .enumerate()
                    .for_each(|(ch, plane)| {
                        for (s, &gv) in stencils.iter().zip(&g[ch * p..(ch + 1) * p]) {
                            s.scatter(plane, gv);
                        }
                    });
                Tensor::from_parts_unchecked(vec![c, h, w], df)
            });
            let gc = needs[1].then(|| {
                let mut dc = vec![T::zero(); 2 * p];
                for ch in 0..c {
                    let plane = &fd[ch * h * w..(ch + 1) * h * w];
                    for (i, s) in stencils.iter().enumerate() {
                        let (dy, dx) = s.grad(plane);
                        dc[i] += g[ch * p + i] * dy;
                        dc[p + i] += g[ch * p + i] * dx;
                    }
                }
                Tensor::from_parts_unchecked(vec![2, ho, wo], dc)
            });
            vec![gf, gc]
        },
    )
}
