//! Differentiable tensor operations.

use std::ops::Range;

use super::{Result, Var};
use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

/// How a binary op lines its operands up.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    Same,
    /// The named operand has shape `[.., C, 1, 1]` against `[.., C, H, W]`.
    Lhs(usize),
    Rhs(usize),
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() || a.len() < 3 {
        return Err(mismatch());
    }
    let r = a.len();
    let lead_eq = a[..r - 2] == b[..r - 2];
    if lead_eq && b[r - 2] == 1 && b[r - 1] == 1 {
        Ok((a.to_vec(), Bcast::Rhs(a[r - 2] * a[r - 1])))
    } else if lead_eq && a[r - 2] == 1 && a[r - 1] == 1 {
        Ok((b.to_vec(), Bcast::Lhs(b[r - 2] * b[r - 1])))
    } else {
        Err(mismatch())
    }
}

fn zip_with<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    shape: &[usize],
    bc: Bcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let data: Vec<T> = match bc {
        Bcast::Same => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
        Bcast::Rhs(plane) => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i / plane]))
            .collect(),
        Bcast::Lhs(plane) => b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a.data()[i / plane], y))
            .collect(),
    };
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

/// Sums a full-shape gradient down to a broadcast operand's `[.., C, 1, 1]` shape.
fn reduce_plane<T: Float>(g: &Tensor<T>, target: &[usize], plane: usize) -> Tensor<T> {
    let data = g
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum())
        .collect();
    Tensor::from_parts_unchecked(target.to_vec(), data)
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Float> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let (shape, bc) = broadcast_rule("add", self.shape(), other.shape())?;
        let out = zip_with(self.value(), other.value(), &shape, bc, |x, y| x + y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record("add", &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| match bc {
                Bcast::Lhs(p) => reduce_plane(g, &sa, p),
                _ => g.clone(),
            });
            let gb = needs[1].then(|| match bc {
                Bcast::Rhs(p) => reduce_plane(g, &sb, p),
                _ => g.clone(),
            });
            vec![ga, gb]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let (shape, bc) = broadcast_rule("sub", self.shape(), other.shape())?;
        let out = zip_with(self.value(), other.value(), &shape, bc, |x, y| x - y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record("sub", &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| match bc {
                Bcast::Lhs(p) => reduce_plane(g, &sa, p),
                _ => g.clone(),
            });
            let gb = needs[1].then(|| {
                let neg = g.map(|v| -v);
                match bc {
                    Bcast::Rhs(p) => reduce_plane(&neg, &sb, p),
                    _ => neg,
                }
            });
            vec![ga, gb]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (shape, bc) = broadcast_rule("mul", self.shape(), other.shape())?;
        let out = zip_with(self.value(), other.value(), &shape, bc, |x, y| x * y);
        let (a, b) = (self.value_rc(), other.value_rc());
        Var::record("mul", &[self, other], out, move |g, needs| {
            // Operand that may broadcast is always passed second to zip_with.
            let ga = needs[0].then(|| {
                let full = zip_with(
                    g,
                    &b,
                    g.shape(),
                    if let Bcast::Rhs(p) = bc {
                        Bcast::Rhs(p)
                    } else {
                        Bcast::Same
                    },
                    |x, y| x * y,
                );
                match bc {
                    Bcast::Lhs(p) => reduce_plane(&full, a.shape(), p),
                    _ => full,
                }
            });
            let gb = needs[1].then(|| {
                let full = zip_with(
                    g,
                    &a,
                    g.shape(),
                    if let Bcast::Lhs(p) = bc {
                        Bcast::Rhs(p)
                    } else {
                        Bcast::Same
                    },
                    |x, y| x * y,
                );
                match bc {
                    Bcast::Rhs(p) => reduce_plane(&full, b.shape(), p),
                    _ => full,
                }
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::of(c);
        let out = self.value().map(|v| v * c);
        Var::record("scale", &[self], out, move |g, _| {
            vec![Some(g.map(|v| v * c))]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        let c = T::of(c);
        let out = self.value().map(|v| v + c);
        Var::record("add_scalar", &[self], out, move |g, _| {
            vec![Some(g.clone())]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<T>> {
        let s = T::of(slope);
        let out = self.value().map(|v| if v > T::zero() { v } else { v * s });
        let x = self.value_rc();
        Var::record("leaky_relu", &[self], out, move |g, _| {
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                .collect();
            vec![Some(Tensor::from_parts_unchecked(g.shape().to_vec(), data))]
        })
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        Var::record("sigmoid", &[self], out, move |g, _| {
            let data = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gv)| gv * s * (T::one() - s))
                .collect();
            vec![Some(Tensor::from_parts_unchecked(g.shape().to_vec(), data))]
        })
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.abs());
        let x = self.value_rc();
        Var::record("abs", &[self], out, move |g, _| {
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(Tensor::from_parts_unchecked(g.shape().to_vec(), data))]
        })
    }

    /// `[M,K]·[K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let lhs = self.value().reshape(&[1, a[0], a[1]])?;
        let rhs = other.value().reshape(&[1, b[0], b[1]])?;
        let out = bmm_forward(&lhs, &rhs).reshape(&[a[0], b[1]])?;
        let (av, bv) = (self.value_rc(), other.value_rc());
        let (m, k, n) = (a[0], a[1], b[1]);
        Var::record("matmul", &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut out = vec![T::zero(); m * k];
                // grad · bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n as isize,
                    1,
                    bv.data(),
                    1,
                    n as isize,
                    T::zero(),
                    &mut out,
                    k as isize,
                    1,
                );
                Tensor::from_parts_unchecked(vec![m, k], out)
            });
            let gb = needs[1].then(|| {
                let mut out = vec![T::zero(); k * n];
                // aᵀ · grad
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
                Tensor::from_parts_unchecked(vec![k, n], out)
            });
            vec![ga, gb]
        })
    }

    /// Batched product `[B,M,K]·[B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let out = bmm_forward(self.value(), other.value());
        let (av, bv) = (self.value_rc(), other.value_rc());
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        Var::record("bmm", &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut out = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data()[i * m * n..],
                        n as isize,
                        1,
                        &bv.data()[i * k * n..],
                        1,
                        n as isize,
                        T::zero(),
                        &mut out[i * m * k..],
                        k as isize,
                        1,
                    );
                }
                Tensor::from_parts_unchecked(vec![bs, m, k], out)
            });
            let gb = needs[1].then(|| {
                let mut out = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..],
                        1,
                        k as isize,
                        &g.data()[i * m * n..],
                        n as isize,
                        1,
                        T::zero(),
                        &mut out[i * k * n..],
                        n as isize,
                        1,
                    );
                }
                Tensor::from_parts_unchecked(vec![bs, k, n], out)
            });
            vec![ga, gb]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Var::record("reshape", &[self], out, move |g, _| {
            vec![Some(Tensor::from_parts_unchecked(orig, g.data().to_vec()))]
        })
    }

    /// Swaps the first two axes.
    pub fn transpose01(&self) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::AxisOutOfRange {
                axis: 1,
                rank: s.len(),
            });
        }
        let out = swap01(self.value());
        Var::record("transpose01", &[self], out, move |g, _| {
            vec![Some(swap01(g))]
        })
    }

    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Var<T>> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        if range.start >= range.end || range.end > extent {
            return Err(TensorError::SliceOutOfRange {
                start: range.start,
                end: range.end,
                extent,
            });
        }
        let len = range.end - range.start;
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + range.start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let out = Tensor::from_parts_unchecked(shape, data);
        let orig = self.shape().to_vec();
        Var::record("slice", &[self], out, move |g, _| {
            let mut full = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + range.start) * inner;
                full[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts_unchecked(orig, full))]
        })
    }

    pub fn concat(items: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = items.first().ok_or(TensorError::EmptyConcat)?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut extents = Vec::with_capacity(items.len());
        for v in items {
            let s = v.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in items.iter().zip(&extents) {
                data.extend_from_slice(&v.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::from_parts_unchecked(shape, data);
        let shapes: Vec<Vec<usize>> = items.iter().map(|v| v.shape().to_vec()).collect();
        Var::record("concat", items, out, move |g, needs| {
            let mut offsets = Vec::with_capacity(extents.len());
            let mut acc = 0;
            for &e in &extents {
                offsets.push(acc);
                acc += e;
            }
            shapes
                .into_iter()
                .enumerate()
                .map(|(j, shape)| {
                    needs[j].then(|| {
                        let e = extents[j];
                        let mut data = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + offsets[j]) * inner;
                            data.extend_from_slice(&g.data()[base..base + e * inner]);
                        }
                        Tensor::from_parts_unchecked(shape, data)
                    })
                })
                .collect()
        })
    }

    /// Sums over `axis`, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let src = self.value().data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let row = &src[(o * extent + k) * inner..(o * extent + k + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let out = Tensor::from_parts_unchecked(shape, data);
        let orig = self.shape().to_vec();
        Var::record("sum_axis", &[self], out, move |g, _| {
            let mut full = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                for _ in 0..extent {
                    full.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts_unchecked(orig, full))]
        })
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let out = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::record("sum_all", &[self], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let (outer, extent, inner) = split_axis(self.shape(), axis)?;
        let src = self.value().data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let mut m = src[idx(0)];
                for k in 1..extent {
                    m = m.max(src[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..extent {
                    let e = (src[idx(k)] - m).exp();
                    data[idx(k)] = e;
                    z += e;
                }
                for k in 0..extent {
                    data[idx(k)] = data[idx(k)] / z;
                }
            }
        }
        let out = Tensor::from_parts_unchecked(self.shape().to_vec(), data);
        let y = out.clone();
        Var::record("softmax", &[self], out, move |g, _| {
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * extent + k) * inner + i;
                    let dot: T = (0..extent).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                    for k in 0..extent {
                        gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts_unchecked(y.shape().to_vec(), gx))]
        })
    }
}

fn bmm_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..],
            k as isize,
            1,
            &b.data()[i * k * n..],
            n as isize,
            1,
            T::zero(),
            &mut out[i * m * n..],
            n as isize,
            1,
        );
    }
    Tensor::from_parts_unchecked(vec![bs, m, n], out)
}

fn swap01<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (d0, d1) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(t.numel());
    for j in 0..d1 {
        for i in 0..d0 {
            let base = (i * d1 + j) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    Tensor::from_parts_unchecked(shape, data)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn c(shape: &[usize], v: &[f64]) -> Var<f64> {
        Var::constant(t(shape, v))
    }

    #[test]
    fn elementwise_examples() {
        let a = c(&[2], &[1.0, 2.0]);
        let b = c(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(
            c(&[1], &[-1.0]).leaky_relu(0.2).unwrap().value().data(),
            &[-0.2]
        );
        assert_eq!(c(&[1], &[0.0]).sigmoid().unwrap().value().data(), &[0.5]);
        assert!(a.add(&c(&[3], &[0.0; 3])).is_err());
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = c(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = c(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let want = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(want, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap().value().data(), want.as_slice());
        let id = c(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(id.matmul(&b).unwrap().value().data(), b.value().data());
        let z = c(&[2, 2], &[0.0; 4]);
        assert_eq!(z.matmul(&b).unwrap().value().data(), &[0.0; 4]);
        assert!(a.matmul(&c(&[3, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn matmul_rectangular_matches_naive() {
        let a = Tensor::<f64>::create(
            &[3, 5],
            crate::tensor::Init::Uniform {
                seed: 1,
                low: -1.0,
                high: 1.0,
            },
        )
        .unwrap();
        let b = Tensor::<f64>::create(
            &[5, 4],
            crate::tensor::Init::Uniform {
                seed: 2,
                low: -1.0,
                high: 1.0,
            },
        )
        .unwrap();
        let got = Var::constant(a.clone())
            .matmul(&Var::constant(b.clone()))
            .unwrap();
        let want = naive_matmul(a.data(), b.data(), 3, 5, 4);
        for (g, w) in got.value().data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_concat_sum_examples() {
        assert_eq!(
            c(&[2], &[0.0, 0.0]).softmax(0).unwrap().value().data(),
            &[0.5, 0.5]
        );
        let cat = Var::concat(&[&c(&[2], &[1.0, 2.0]), &c(&[1], &[3.0])], 0).unwrap();
        assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0]);
        let s = c(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).sum_axis(0).unwrap();
        assert_eq!(s.value().data(), &[4.0, 6.0]);
        assert_eq!(s.shape(), &[2]);
        assert!(Var::<f64>::concat(&[], 0).is_err());
        assert!(c(&[2], &[0.0, 0.0]).softmax(1).is_err());
    }

    #[test]
    fn broadcast_channel_vector() {
        let a = c(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = c(&[2, 1, 1], &[10.0, 20.0]);
        assert_eq!(a.add(&b).unwrap().value().data(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(b.add(&a).unwrap().value().data(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(a.mul(&b).unwrap().value().data(), &[10.0, 20.0, 60.0, 80.0]);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let b = tape.leaf(t(&[2, 1, 1], &[2.0, 3.0]));
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[10.0, 26.0]);
        assert_eq!(
            g.get(&a).unwrap().data(),
            &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]
        );
    }

    #[test]
    fn transpose_and_slice() {
        let x = c(&[2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.transpose01().unwrap();
        assert_eq!(y.shape(), &[3, 2, 1]);
        assert_eq!(y.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = x.slice(1, 1..3).unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert!(x.slice(1, 2..4).is_err());
    }
}
