use rayon::prelude::*;

use super::kernels::Stencil;
use super::{expect_shape, image_dims, image_shape};
use crate::autodiff::{Result, Var};
use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

/// Number of taps of the 3×3 sampling grid.
pub const DEFORM_TAPS: usize = 9;

/// Per-pixel sampling displacements and modulation for [`deform_conv2d`].
///
/// `offsets` is `[2K,H,W]` (or `[N,2K,H,W]`) with channel `2i` holding the
/// y displacement and `2i+1` the x displacement of tap `i = ky*3 + kx`, in
/// pixels. `masks` is `[K,H,W]` with values in `[0,1]`.
#[derive(Clone)]
pub struct DeformField<T> {
    pub offsets: Var<T>,
    pub masks: Var<T>,
}

impl<T: Float> std::fmt::Debug for DeformField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeformField")
            .field("offsets", &self.offsets)
            .field("masks", &self.masks)
            .finish()
    }
}

/// How offset channels are read.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetLayout {
    #[default]
    Interleaved,
    /// Reads x from channel `2i` and y from `2i+1`.
    Swapped,
}

/// Modulated deformable 3×3 convolution, stride 1, output the size of the
/// input:
/// `out(p) = Σ_i W_i · x(p + g_i + Δ_i(p)) · m_i(p)` where `g_i` runs over
/// `(-1,-1)..=(1,1)` row-major and samples are bilinear with zero padding.
pub fn deform_conv2d<T: Float>(
    x: &Var<T>,
    field: &DeformField<T>,
    weight: &Var<T>,
) -> Result<Var<T>> {
    deform_conv2d_with_layout(x, field, weight, OffsetLayout::Interleaved)
}

#[doc(hidden)]
pub fn deform_conv2d_with_layout<T: Float>(
    x: &Var<T>,
    field: &DeformField<T>,
    weight: &Var<T>,
    layout: OffsetLayout,
) -> Result<Var<T>> {
    const OP: &str = "deform_conv2d";
    let (n, cin, h, w, batched) = image_dims(OP, x.shape())?;
    let (on, oc, oh, ow, ob) = image_dims(OP, field.offsets.shape())?;
    let (mn, mc, mh, mw, mb) = image_dims(OP, field.masks.shape())?;
    if oc % 2 != 0 || oc / 2 != DEFORM_TAPS || mc != DEFORM_TAPS {
        return Err(TensorError::invalid(
            OP,
            format!("expected K = {DEFORM_TAPS} taps, got {oc} offset and {mc} mask channels"),
        ));
    }
    if (on, oh, ow, ob) != (n, h, w, batched) || (mn, mh, mw, mb) != (n, h, w, batched) {
        return Err(TensorError::invalid(
            OP,
            format!(
                "field {:?}/{:?} does not match input {:?}",
                field.offsets.shape(),
                field.masks.shape(),
                x.shape()
            ),
        ));
    }
    let [cout, wc, 3, 3] = *weight.shape() else {
        return Err(TensorError::invalid(
            OP,
            format!("weight must be [Cout,Cin,3,3], got {:?}", weight.shape()),
        ));
    };
    expect_shape(OP, weight, &[cout, cin, 3, 3])?;
    debug_assert_eq!(wc, cin);
    if !field.offsets.value().all_finite() {
        return Err(TensorError::NonFinite { op: OP });
    }
    if field
        .masks
        .value()
        .data()
        .iter()
        .any(|m| !(T::zero()..=T::one()).contains(m))
    {
        return Err(TensorError::invalid(OP, "mask values must lie in [0,1]"));
    }

    let k = DEFORM_TAPS;
    let p = h * w;
    let rows = cin * k;
    let in_sz = cin * p;
    let out_sz = cout * p;

    let xs = x.value_rc();
    let ws = weight.value_rc();
    let offs = field.offsets.value_rc();
    let masks = field.masks.value_rc();
    let (xd, wd, md) = (xs.data(), ws.data(), masks.data());

    let od_all = offs.data();
    let stencils_for = |s: usize| -> Vec<Stencil<T>> {
        let od = &od_all[s * 2 * k * p..(s + 1) * 2 * k * p];
        let mut st = Vec::with_capacity(k * p);
        for tap in 0..k {
            let (gy, gx) = ((tap / 3) as f64 - 1.0, (tap % 3) as f64 - 1.0);
            let (cy, cx) = match layout {
                OffsetLayout::Interleaved => (2 * tap, 2 * tap + 1),
                OffsetLayout::Swapped => (2 * tap + 1, 2 * tap),
            };
            for i in 0..p {
                let y = T::of((i / w) as f64 + gy) + od[cy * p + i];
                let xx = T::of((i % w) as f64 + gx) + od[cx * p + i];
                st.push(Stencil::new(h, w, y, xx));
            }
        }
        st
    };
    let stencils: Vec<Vec<Stencil<T>>> = (0..n).into_par_iter().map(&stencils_for).collect();
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, o)| {
        let mut col = vec![T::zero(); rows * p];
        build_col(
            cin,
            p,
            &xd[s * in_sz..(s + 1) * in_sz],
            &md[s * k * p..(s + 1) * k * p],
            &stencils[s],
            &mut col,
        );
        T::gemm(
            cout,
            rows,
            p,
            T::one(),
            wd,
            rows as isize,
            1,
            &col,
            p as isize,
            1,
            T::zero(),
            o,
            p as isize,
            1,
        );
    });
    let out = Tensor::from_parts_unchecked(image_shape(n, cout, h, w, batched), out);

    let xshape = x.shape().to_vec();
    let wshape = weight.shape().to_vec();
    let oshape = field.offsets.shape().to_vec();
    let mshape = field.masks.shape().to_vec();
    Var::record(
        OP,
        &[x, &field.offsets, &field.masks, weight],
        out,
        move |gout, needs| {
            let (xd, wd, md) = (xs.data(), ws.data(), masks.data());
            let gd = gout.data();
            let need_x = needs[0];
            let need_field = needs[1] || needs[2];
            // per-sample (dx, doffsets, dmasks)
            let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = if need_x || need_field {
                (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let xsamp = &xd[s * in_sz..(s + 1) * in_sz];
                        let msamp = &md[s * k * p..(s + 1) * k * p];
                        let st = &stencils[s];
                        let mut dcol = vec![T::zero(); rows * p];
                        T::gemm(
                            rows,
                            cout,
                            p,
                            T::one(),
                            wd,
                            1,
                            rows as isize,
                            &gd[s * out_sz..],
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            p as isize,
                            1,
                        );
                        let mut dx = if need_x {
                            vec![T::zero(); in_sz]
                        } else {
                            Vec::new()
                        };
                        let (mut doff, mut dmask) = if need_field {
                            (vec![T::zero(); 2 * k * p], vec![T::zero(); k * p])
                        } else {
                            (Vec::new(), Vec::new())
                        };
                        for c in 0..cin {
                            let plane = &xsamp[c * p..(c + 1) * p];
                            for tap in 0..k {
                                let drow = &dcol[(c * k + tap) * p..(c * k + tap + 1) * p];
                                let (cy, cx) = match layout {
                                    OffsetLayout::Interleaved => (2 * tap, 2 * tap + 1),
                                    OffsetLayout::Swapped => (2 * tap + 1, 2 * tap),
                                };
                                for i in 0..p {
                                    let g = drow[i];
                                    let m = msamp[tap * p + i];
                                    let sti = &st[tap * p + i];
                                    if need_x {
                                        sti.scatter(&mut dx[c * p..(c + 1) * p], g * m);
                                    }
                                    if need_field {
                                        dmask[tap * p + i] += g * sti.sample(plane);
                                        let (gy, gx) = sti.grad(plane);
                                        doff[cy * p + i] += g * m * gy;
                                        doff[cx * p + i] += g * m * gx;
                                    }
                                }
                            }
                        }
                        (dx, doff, dmask)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let gx = need_x.then(|| {
                let dx: Vec<T> = per_sample
                    .iter()
                    .flat_map(|t| t.0.iter().copied())
                    .collect();
                Tensor::from_parts_unchecked(xshape, dx)
            });
            let goff = needs[1].then(|| {
                let d: Vec<T> = per_sample
                    .iter()
                    .flat_map(|t| t.1.iter().copied())
                    .collect();
                Tensor::from_parts_unchecked(oshape, d)
            });
            let gmask = needs[2].then(|| {
                let d: Vec<T> = per_sample
                    .iter()
                    .flat_map(|t| t.2.iter().copied())
                    .collect();
                Tensor::from_parts_unchecked(mshape, d)
            });
            let gw = needs[3].then(|| {
                let mut dw = vec![T::zero(); cout * rows];
                let mut col = vec![T::zero(); rows * p];
                for s in 0..n {
                    build_col(
                        cin,
                        p,
                        &xd[s * in_sz..(s + 1) * in_sz],
                        &md[s * k * p..(s + 1) * k * p],
                        &stencils[s],
                        &mut col,
                    );
                    T::gemm(
                        cout,
                        p,
                        rows,
                        T::one(),
                        &gd[s * out_sz..],
                        p as isize,
                        1,
                        &col,
                        1,
                        p as isize,
                        T::one(),
                        &mut dw,
                        rows as isize,
                        1,
                    );
                }
                Tensor::from_parts_unchecked(wshape, dw)
            });
            vec![gx, goff, gmask, gw]
        },
    )
}

/// `col[(c*K + tap), i] = m_tap(i) · x_c(sample point)`.
fn build_col<T: Float>(
    cin: usize,
    p: usize,
    xsamp: &[T],
    msamp: &[T],
    st: &[Stencil<T>],
    col: &mut [T],
) {
    let k = DEFORM_TAPS;
    for c in 0..cin {
        let plane = &xsamp[c * p..(c + 1) * p];
        for tap in 0..k {
            let row = &mut col[(c * k + tap) * p..(c * k + tap + 1) * p];
            let sts = &st[tap * p..(tap + 1) * p];
            let ms = &msamp[tap * p..(tap + 1) * p];
            for ((r, s), &m) in row.iter_mut().zip(sts).zip(ms) {
                *r = m * s.sample(plane);
            }
        }
    }
}
