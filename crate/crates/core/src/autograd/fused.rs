//! Operations with hand-derived backward passes: instance normalization,
//! matrix products, row normalization and softmax cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Real;
use crate::tensor::Tensor;

const INSTANCE_NORM_EPS: f64 = 1e-5;
const L2_NORM_FLOOR: f64 = 1e-12;

fn dims2(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [r, c] => (r, c),
        _ => panic!("expected a matrix, got {shape:?}"),
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    let m = MatRef::row_major(data, rows, cols);
    if transposed {
        m.t()
    } else {
        m
    }
}

impl<T: Real> Tape<T> {
    /// Per-sample, per-channel normalization to zero mean and unit variance
    /// (no affine parameters).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("instance_norm input must be rank 4, got {s:?}"),
        };
        let hw = h * w;
        let inv_hw = T::one() / T::of(hw as f64);
        let eps = T::of(INSTANCE_NORM_EPS);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in xv.chunks(hw) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(plane.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("checked");
        self.push(value, Op::InstanceNorm { input: x, inv_std }, &[x])
    }

    /// Matrix product of two rank-2 tensors, optionally transposing either.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = dims2(self.shape(a));
        let (br, bc) = dims2(self.shape(b));
        let av = view(self.value(a).data(), ar, ac, ta);
        let bv = view(self.value(b).data(), br, bc, tb);
        assert_eq!(av.cols, bv.rows, "matmul inner dimensions differ");
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), av, bv, T::zero(), &mut out);
        let value = Tensor::new(&[m, n], out).expect("checked");
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, cols) = dims2(self.shape(x));
        assert_eq!(self.shape(bias), [cols], "row bias length mismatch");
        let bv = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (d, &b) in row.iter_mut().zip(&bv) {
                *d += b;
            }
        }
        self.push(value, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Scales every row of a matrix to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = dims2(self.shape(x));
        let floor = T::of(L2_NORM_FLOOR);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for row in xv.chunks(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(&[rows, cols], out).expect("checked");
        self.push(value, Op::L2NormalizeRows { input: x, norms }, &[x])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, computed with
    /// max-shifted exponentials.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, cols) = dims2(self.shape(logits));
        assert_eq!(rows, targets.len(), "one target per row");
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = T::zero();
        for (row, &t) in lv.chunks(cols).zip(targets) {
            assert!(t < cols, "target column out of range");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let loss = total / T::of(rows as f64);
        let targets = targets.iter().map(|&t| t as u32).collect();
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        )
    }
}

pub(super) fn instance_norm_backward<T: Real>(shape: &[usize], y: &[T], inv_std: &[T], g: &[T], gx: &mut [T]) {
    let hw = shape[2] * shape[3];
    let inv_hw = T::one() / T::of(hw as f64);
    for (((yp, gp), dst), &inv) in y.chunks(hw).zip(g.chunks(hw)).zip(gx.chunks_mut(hw)).zip(inv_std) {
        let mean_g = gp.iter().copied().sum::<T>() * inv_hw;
        let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
        for ((d, &gv), &yv) in dst.iter_mut().zip(gp).zip(yp) {
            *d += inv * (gv - mean_g - yv * mean_gy);
        }
    }
}

pub(super) fn matmul_backward<T: Real>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (ar, ac) = dims2(tape.shape(a));
    let (br, bc) = dims2(tape.shape(b));
    let a_eff = view(tape.value(a).data(), ar, ac, ta);
    let b_eff = view(tape.value(b).data(), br, bc, tb);
    let (m, n) = (a_eff.rows, b_eff.cols);
    let gm = MatRef::row_major(g, m, n);
    tape.acc_with(grads, a, |ga| {
        if ta {
            gemm(T::one(), b_eff, gm.t(), T::one(), ga);
        } else {
            gemm(T::one(), gm, b_eff.t(), T::one(), ga);
        }
    });
    tape.acc_with(grads, b, |gb| {
        if tb {
            gemm(T::one(), gm.t(), a_eff, T::one(), gb);
        } else {
            gemm(T::one(), a_eff.t(), gm, T::one(), gb);
        }
    });
}

pub(super) fn l2_normalize_backward<T: Real>(cols: usize, y: &[T], norms: &[T], g: &[T], gx: &mut [T]) {
    for (((yr, gr), dst), &norm) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)).zip(norms) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
            *d += (gv - yv * dot) / norm;
        }
    }
}
