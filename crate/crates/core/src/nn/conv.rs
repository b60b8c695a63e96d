use rayon::prelude::*;

use super::kernels::{col2im, im2col, Window};
use super::{expect_shape, image_dims, image_shape, ConvSpec};
use crate::autodiff::{Result, Var};
use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

/// Zero-padded cross-correlation.
///
/// `x: [Cin,H,W]` or `[N,Cin,H,W]`, `weight: [Cout, Cin/groups, k, k]`,
/// optional `bias: [Cout]`. Output extent is `floor((H + 2p - k)/stride) + 1`.
pub fn conv2d<T: Float>(
    x: &Var<T>,
    spec: &ConvSpec,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    spec.validate()?;
    let (n, cin, h, w, batched) = image_dims("conv2d", x.shape())?;
    if cin != spec.in_channels {
        return Err(TensorError::invalid(
            "conv2d",
            format!(
                "input has {cin} channels, spec expects {}",
                spec.in_channels
            ),
        ));
    }
    expect_shape("conv2d weight", weight, &spec.weight_shape())?;
    if spec.bias != bias.is_some() {
        return Err(TensorError::invalid(
            "conv2d",
            "bias presence disagrees with spec",
        ));
    }
    if let Some(b) = bias {
        expect_shape("conv2d bias", b, &[spec.out_channels])?;
    }
    let groups = spec.groups;
    let cin_g = cin / groups;
    let cout = spec.out_channels;
    let cout_g = cout / groups;
    let win =
        Window::new(cin_g, h, w, spec.kernel, spec.stride, spec.padding).ok_or_else(|| {
            TensorError::invalid("conv2d", format!("{h}x{w} input smaller than kernel"))
        })?;
    let (rows, p) = (win.col_rows(), win.col_cols());
    let in_sz = cin * h * w;
    let out_sz = cout * p;

    let xs = x.value_rc();
    let ws = weight.value_rc();
    let (xd, wd) = (xs.data(), ws.data());
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, o)| {
        let xs_s = &xd[s * in_sz..(s + 1) * in_sz];
        let mut col = if win.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for g in 0..groups {
            let xg = &xs_s[g * cin_g * h * w..(g + 1) * cin_g * h * w];
            let colg: &[T] = if win.is_pointwise() {
                xg
            } else {
                im2col(xg, &win, &mut col);
                &col
            };
            T::gemm(
                cout_g,
                rows,
                p,
                T::one(),
                &wd[g * cout_g * rows..],
                rows as isize,
                1,
                colg,
                p as isize,
                1,
                T::zero(),
                &mut o[g * cout_g * p..],
                p as isize,
                1,
            );
        }
    });
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.value().data(), p);
    }
    let out = Tensor::from_parts_unchecked(image_shape(n, cout, win.oh, win.ow, batched), out);

    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let xshape = x.shape().to_vec();
    let wshape = weight.shape().to_vec();
    Var::record("conv2d", &inputs, out, move |gout, needs| {
        let (xd, wd) = (xs.data(), ws.data());
        let gd = gout.data();
        let gx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * in_sz];
            dx.par_chunks_mut(in_sz).enumerate().for_each(|(s, dxs)| {
                let mut dcol = vec![T::zero(); rows * p];
                for g in 0..groups {
                    T::gemm(
                        rows,
                        cout_g,
                        p,
                        T::one(),
                        &wd[g * cout_g * rows..],
                        1,
                        rows as isize,
                        &gd[s * out_sz + g * cout_g * p..],
                        p as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        p as isize,
                        1,
                    );
                    let dxg = &mut dxs[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                    if win.is_pointwise() {
                        for (d, c) in dxg.iter_mut().zip(&dcol) {
                            *d += *c;
                        }
                    } else {
                        col2im(&dcol, &win, dxg);
                    }
                }
            });
            Tensor::from_parts_unchecked(xshape, dx)
        });
        let gw = needs[1].then(|| {
            let mut dw = vec![T::zero(); cout * rows];
            let mut col = vec![T::zero(); rows * p];
            for s in 0..n {
                let xs_s = &xd[s * in_sz..(s + 1) * in_sz];
                for g in 0..groups {
                    let xg = &xs_s[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                    let colg: &[T] = if win.is_pointwise() {
                        xg
                    } else {
                        im2col(xg, &win, &mut col);
                        &col
                    };
                    T::gemm(
                        cout_g,
                        p,
                        rows,
                        T::one(),
                        &gd[s * out_sz + g * cout_g * p..],
                        p as isize,
                        1,
                        colg,
                        1,
                        p as isize,
                        T::one(),
                        &mut dw[g * cout_g * rows..],
                        rows as isize,
                        1,
                    );
                }
            }
            Tensor::from_parts_unchecked(wshape, dw)
        });
        let mut grads = vec![gx, gw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(gd, n, cout, p)));
        }
        grads
    })
}

/// Transposed convolution whose output is exactly `stride` times the input
/// extent; the adjoint of [`conv2d`] with the same kernel, stride and padding.
///
/// `x: [Cin,H,W]` or `[N,Cin,H,W]`, `weight: [Cin, Cout, k, k]`.
pub fn conv_transpose2d<T: Float>(
    x: &Var<T>,
    spec: &ConvSpec,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    spec.validate()?;
    if spec.groups != 1 {
        return Err(TensorError::invalid(
            "conv_transpose2d",
            "grouped transposed conv unsupported",
        ));
    }
    let (n, cin, h, w, batched) = image_dims("conv_transpose2d", x.shape())?;
    if cin != spec.in_channels {
        return Err(TensorError::invalid(
            "conv_transpose2d",
            format!(
                "input has {cin} channels, spec expects {}",
                spec.in_channels
            ),
        ));
    }
    expect_shape(
        "conv_transpose2d weight",
        weight,
        &spec.transposed_weight_shape(),
    )?;
    if spec.bias != bias.is_some() {
        return Err(TensorError::invalid(
            "conv_transpose2d",
            "bias presence disagrees with spec",
        ));
    }
    if let Some(b) = bias {
        expect_shape("conv_transpose2d bias", b, &[spec.out_channels])?;
    }
    let (k, s, pad) = (spec.kernel, spec.stride, spec.padding);
    // output_padding = s + 2p - k must lie in [0, s)
    let op = (s + 2 * pad) as isize - k as isize;
    if op < 0 || op >= s as isize {
        return Err(TensorError::invalid(
            "conv_transpose2d",
            format!("kernel {k}, stride {s}, padding {pad} cannot produce an exact x{s} output"),
        ));
    }
    let cout = spec.out_channels;
    let (oh, ow) = (h * s, w * s);
    let win = Window::new(cout, oh, ow, k, s, pad).expect("geometry checked");
    debug_assert_eq!((win.oh, win.ow), (h, w));
    let (rows, p) = (win.col_rows(), win.col_cols());
    let in_sz = cin * p;
    let out_sz = cout * oh * ow;

    let xs = x.value_rc();
    let ws = weight.value_rc();
    let (xd, wd) = (xs.data(), ws.data());
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(si, o)| {
        let mut dcol = vec![T::zero(); rows * p];
        T::gemm(
            rows,
            cin,
            p,
            T::one(),
            wd,
            1,
            rows as isize,
            &xd[si * in_sz..],
            p as isize,
            1,
            T::zero(),
            &mut dcol,
            p as isize,
            1,
        );
        col2im(&dcol, &win, o);
    });
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.value().data(), oh * ow);
    }
    let out = Tensor::from_parts_unchecked(image_shape(n, cout, oh, ow, batched), out);

    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let xshape = x.shape().to_vec();
    let wshape = weight.shape().to_vec();
    Var::record("conv_transpose2d", &inputs, out, move |gout, needs| {
        let (xd, wd) = (xs.data(), ws.data());
        let gd = gout.data();
        let cols: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|si| {
                let mut col = vec![T::zero(); rows * p];
                im2col(&gd[si * out_sz..(si + 1) * out_sz], &win, &mut col);
                col
            })
            .collect();
        let gx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * in_sz];
            dx.par_chunks_mut(in_sz).zip(&cols).for_each(|(dxs, col)| {
                T::gemm(
                    cin,
                    rows,
                    p,
                    T::one(),
                    wd,
                    rows as isize,
                    1,
                    col,
                    p as isize,
                    1,
                    T::zero(),
                    dxs,
                    p as isize,
                    1,
                );
            });
            Tensor::from_parts_unchecked(xshape, dx)
        });
        let gw = needs[1].then(|| {
            let mut dw = vec![T::zero(); cin * rows];
            for (si, col) in cols.iter().enumerate() {
                T::gemm(
                    cin,
                    p,
                    rows,
                    T::one(),
                    &xd[si * in_sz..],
                    p as isize,
                    1,
                    col,
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
        let mut grads = vec![gx, gw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(gd, n, cout, oh * ow)));
        }
        grads
    })
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Float>(g: &[T], n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *d += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts_unchecked(vec![c], db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
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

    /// Direct sliding-window definition, independent of im2col/gemm.
    pub(crate) fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, s, p, g) = (spec.kernel, spec.stride, spec.padding, spec.groups);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let cin_g = c / g;
        let cout_g = spec.out_channels / g;
        let mut out = vec![0.0; spec.out_channels * oh * ow];
        for co in 0..spec.out_channels {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((grp * cin_g + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::from_vec(&[spec.out_channels, oh, ow], out).unwrap()
    }

    #[test]
    fn all_ones_three_by_three() {
        let spec = ConvSpec::new(1, 1, 3);
        let x = Var::constant(Tensor::<f64>::full(&[1, 3, 3], 1.0));
        let w = Var::constant(Tensor::<f64>::full(&[1, 1, 3, 3], 1.0));
        let y = conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(
            y.value().data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
        assert_eq!(
            y.value().data(),
            naive_conv(x.value(), w.value(), &spec).data()
        );
    }

    #[test]
    fn identity_kernel_and_stride_shape() {
        let spec = ConvSpec::new(2, 2, 1);
        let x = Var::constant(rand(&[2, 4, 4], 1));
        let w = Var::constant(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(
            conv2d(&x, &spec, &w, None).unwrap().value().data(),
            x.value().data()
        );
        let spec = ConvSpec::new(2, 3, 3).stride(2);
        let w = Var::constant(rand(&spec.weight_shape(), 2));
        assert_eq!(conv2d(&x, &spec, &w, None).unwrap().shape(), &[3, 2, 2]);
    }

    #[test]
    fn matches_naive_on_random_instances() {
        for (i, spec) in [
            ConvSpec::new(3, 4, 3),
            ConvSpec::new(4, 8, 3).groups(4),
            ConvSpec::new(3, 5, 3).stride(2),
            ConvSpec::new(6, 2, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let x = rand(&[spec.in_channels, 8, 8], 10 + i as u64);
            let w = rand(&spec.weight_shape(), 20 + i as u64);
            let got = conv2d(
                &Var::constant(x.clone()),
                &spec,
                &Var::constant(w.clone()),
                None,
            )
            .unwrap();
            let want = naive_conv(&x, &w, &spec);
            assert!(got.value().max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn batched_equals_per_sample() {
        let spec = ConvSpec::new(2, 3, 3);
        let x = rand(&[3, 2, 5, 5], 4);
        let w = Var::constant(rand(&spec.weight_shape(), 5));
        let batched = conv2d(&Var::constant(x.clone()), &spec, &w, None).unwrap();
        for s in 0..3 {
            let single = conv2d(&Var::constant(x.index0(s)), &spec, &w, None).unwrap();
            assert_eq!(batched.value().index0(s).data(), single.value().data());
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let spec = ConvSpec::new(3, 4, 3);
        let x = Var::constant(rand(&[2, 4, 4], 1));
        let w = Var::constant(rand(&spec.weight_shape(), 1));
        assert!(conv2d(&x, &spec, &w, None).is_err());
        assert!(ConvSpec::new(3, 4, 3).groups(2).validate().is_err());
        assert!(ConvSpec::new(4, 4, 2).validate().is_err());
    }

    #[test]
    fn transposed_shape_and_zero() {
        let spec = ConvSpec::new(2, 3, 3).stride(2);
        let w = Var::constant(rand(&spec.transposed_weight_shape(), 1));
        let x = Var::constant(Tensor::<f64>::zeros(&[2, 24, 24]));
        let y = conv_transpose2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), &[3, 48, 48]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_is_adjoint() {
        let spec = ConvSpec::new(3, 2, 3).stride(2);
        for trial in 0..20 {
            let wt = rand(&spec.transposed_weight_shape(), 100 + trial);
            let conv = ConvSpec::new(2, 3, 3).stride(2);
            let x = rand(&[2, 12, 10], 200 + trial);
            let y = rand(&[3, 6, 5], 300 + trial);
            let cx = conv2d(
                &Var::constant(x.clone()),
                &conv,
                &Var::constant(wt.clone()),
                None,
            )
            .unwrap();
            let ty = conv_transpose2d(&Var::constant(y.clone()), &spec, &Var::constant(wt), None)
                .unwrap();
            let lhs = cx.value().dot(&y);
            let rhs = x.dot(ty.value());
            assert!((lhs - rhs).abs() / lhs.abs() < 1e-6, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let opts = GradCheckOptions::default();
        let spec = ConvSpec::new(4, 4, 3).groups(2).bias(true);
        let r = grad_check(
            |v| {
                conv2d(&v[0], &spec, &v[1], Some(&v[2]))?
                    .sigmoid()?
                    .sum_all()
            },
            &[
                (rand(&[2, 4, 5, 5], 1), true),
                (rand(&spec.weight_shape(), 2), true),
                (rand(&[4], 3), true),
            ],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");

        let spec = ConvSpec::new(3, 2, 3).stride(2).bias(true);
        let r = grad_check(
            |v| {
                conv_transpose2d(&v[0], &spec, &v[1], Some(&v[2]))?
                    .sigmoid()?
                    .sum_all()
            },
            &[
                (rand(&[3, 4, 3], 4), true),
                (rand(&spec.transposed_weight_shape(), 5), true),
                (rand(&[2], 6), true),
            ],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
