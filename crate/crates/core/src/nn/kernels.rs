//! Raw slice kernels shared by the convolution operators.

use crate::tensor::Float;

/// Geometry of one 2-D sliding window pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Window {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x: [C,H,W]` into `col: [C·k·k, OH·OW]`, zero outside the image.
pub(crate) fn im2col<T: Float>(x: &[T], g: &Window, col: &mut [T]) {
    let Window {
        channels,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = *g;
    let p = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
pub(crate) fn col2im<T: Float>(col: &[T], g: &Window, x: &mut [T]) {
    let Window {
        channels,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = *g;
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Four-neighbour bilinear stencil at a fractional `(y, x)` with zero
/// padding. Out-of-image corners carry weight but no index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil<T> {
    pub idx: [Option<usize>; 4],
    pub wts: [T; 4],
    /// d(weight)/dy and d(weight)/dx per corner.
    pub dwy: [T; 4],
    pub dwx: [T; 4],
}

impl<T: Float> Stencil<T> {
    #[inline]
    pub fn new(h: usize, w: usize, y: T, x: T) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let one = T::one();
        let (hy, hx) = (one - ly, one - lx);
        let yi = y0.to_isize().unwrap_or(isize::MIN / 2);
        let xi = x0.to_isize().unwrap_or(isize::MIN / 2);
        let at = |dy: isize, dx: isize| {
            let (yy, xx) = (yi + dy, xi + dx);
            (yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize)
                .then(|| yy as usize * w + xx as usize)
        };
        Stencil {
            idx: [at(0, 0), at(0, 1), at(1, 0), at(1, 1)],
            wts: [hy * hx, hy * lx, ly * hx, ly * lx],
            dwy: [-hx, -lx, hx, lx],
            dwx: [-hy, hy, -ly, ly],
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut v = T::zero();
        for j in 0..4 {
            if let Some(i) = self.idx[j] {
                v += self.wts[j] * plane[i];
            }
        }
        v
    }

    /// `(d value / dy, d value / dx)`.
    #[inline]
    pub fn grad(&self, plane: &[T]) -> (T, T) {
        let (mut gy, mut gx) = (T::zero(), T::zero());
        for j in 0..4 {
            if let Some(i) = self.idx[j] {
                gy += self.dwy[j] * plane[i];
                gx += self.dwx[j] * plane[i];
            }
        }
        (gy, gx)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for j in 0..4 {
            if let Some(i) = self.idx[j] {
                plane[i] += self.wts[j] * g;
            }
        }
    }
}

/// Plain (non-differentiable) bilinear read with zero padding.
pub fn bilinear_at<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Stencil::new(h, w, y, x).sample(plane)
}
