//! 2D convolution via im2col + gemm.

use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Geometry of one convolution call (zero padding on all four sides).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `[0, w)`.
fn valid_cols(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // ox * stride + kx >= pad  and  ox * stride + kx < w + pad
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride) } else { 0 };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

fn im2col<T: Real>(geom: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ConvGeom {
        cin,
        kh,
        kw,
        stride,
        pad,
        h,
        w,
        oh,
        ow,
        ..
    } = *geom;
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(ow, w, stride, kx, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if hi > lo {
                        let first = lo * stride + kx - pad;
                        if stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (d, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(geom: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let ConvGeom {
        cin,
        kh,
        kw,
        stride,
        pad,
        h,
        w,
        oh,
        ow,
        ..
    } = *geom;
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(ow, w, stride, kx, pad);
                if hi <= lo {
                    continue;
                }
                let first = lo * stride + kx - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, v) in dst[first..first + (hi - lo)].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(stride).zip(s) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Convolution of `[n, cin, h, w]` by `[cout, cin, kh, kw]` weights with
    /// zero padding `pad` and an optional `[cout]` bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("conv2d input must be rank 4, got {s:?}"),
        };
        let (cout, wcin, kh, kw) = match *self.shape(weight) {
            [a, b, c, d] => (a, b, c, d),
            ref s => panic!("conv2d weight must be rank 4, got {s:?}"),
        };
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let geom = ConvGeom {
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            h,
            w,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = bias {
            assert_eq!(self.shape(b), [cout], "conv2d bias must be [cout]");
        }
        let (k, p) = (geom.k(), geom.p());
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..n {
            let xb = &xv[b * cin * h * w..(b + 1) * cin * h * w];
            let colv: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(&geom, xb, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::row_major(wv, cout, k),
                MatRef::row_major(colv, k, p),
                T::zero(),
                &mut out[b * cout * p..(b + 1) * cout * p],
            );
        }
        if let Some(bv) = bias {
            let bias_v = self.value(bv).data();
            for (i, plane) in out.chunks_mut(p).enumerate() {
                let v = bias_v[i % cout];
                for o in plane {
                    *o += v;
                }
            }
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out).expect("checked");
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }
}

pub(super) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (k, p) = (geom.k(), geom.p());
    let n = tape.shape(input)[0];
    let in_len = geom.cin * geom.h * geom.w;
    let xv = tape.value(input).data();
    let wv = tape.value(weight).data();

    if let Some(b) = bias {
        tape.acc_with(grads, b, |gb| {
            for (i, plane) in g.chunks(p).enumerate() {
                gb[i % geom.cout] += plane.iter().copied().sum();
            }
        });
    }

    let need_w = tape.node(weight).requires_grad;
    let need_x = tape.node(input).requires_grad;
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = if need_x && !geom.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let gb = &g[b * geom.cout * p..(b + 1) * geom.cout * p];
        if need_w {
            let xb = &xv[b * in_len..(b + 1) * in_len];
            let colv: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(geom, xb, &mut cols);
                &cols
            };
            tape.acc_with(grads, weight, |gw| {
                gemm(
                    T::one(),
                    MatRef::row_major(gb, geom.cout, p),
                    MatRef::row_major(colv, k, p).t(),
                    T::one(),
                    gw,
                );
            });
        }
        if need_x {
            tape.acc_with(grads, input, |gx| {
                let gxb = &mut gx[b * in_len..(b + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(
                        T::one(),
                        MatRef::row_major(wv, geom.cout, k).t(),
                        MatRef::row_major(gb, geom.cout, p),
                        T::one(),
                        gxb,
                    );
                } else {
                    gemm(
                        T::one(),
                        MatRef::row_major(wv, geom.cout, k).t(),
                        MatRef::row_major(gb, geom.cout, p),
                        T::zero(),
                        &mut gcols,
                    );
                    col2im(geom, &gcols, gxb);
                }
            });
        }
    }
}
