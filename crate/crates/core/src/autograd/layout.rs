//! Index-remapping operations: padding, cropping, resampling, broadcasting
//! and pooling on `[batch, channels, height, width]` tensors.


use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Border extension of [`Tape::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
    /// Repeat the edge sample (`aaa|abcd|ddd`).
    Replicate,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // A single reflection suffices because pads are smaller than the extent.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h, w),
        _ => panic!("expected a rank-4 tensor, got {shape:?}"),
    }
}

impl<T: Real> Tape<T> {
    /// `out[i] = src[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Vec<u32>, shape: &[usize]) -> Var {
        let sv = self.value(src).data();
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather index/shape mismatch");
        let data: Vec<T> = index.iter().map(|&i| sv[i as usize]).collect();
        let value = Tensor::new(shape, data).expect("checked");
        self.push(value, Op::Gather(src, index), &[src])
    }

    /// Pads the two spatial axes by `(top, bottom, left, right)`.
    pub fn pad2d(&mut self, x: Var, pads: (usize, usize, usize, usize), mode: PadMode) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let (top, bottom, left, right) = pads;
        if mode == PadMode::Reflect {
            assert!(top < h && bottom < h && left < w && right < w, "reflect pad must be smaller than the image");
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let map = |i: isize, len: usize| match mode {
            PadMode::Reflect => reflect(i, len),
            PadMode::Replicate => clamp(i, len),
        };
        let rows: Vec<usize> = (0..oh).map(|r| map(r as isize - top as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|q| map(q as isize - left as isize, w)).collect();
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for &r in &rows {
                for &q in &cols {
                    index.push((base + r * w + q) as u32);
                }
            }
        }
        self.gather(x, index, &[n, c, oh, ow])
    }

    /// Spatial window `[top, top + height) x [left, left + width)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(top + height <= h && left + width <= w, "crop window exceeds the image");
        let mut index = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            for r in top..top + height {
                for q in left..left + width {
                    index.push((plane * h * w + r * w + q) as u32);
                }
            }
        }
        self.gather(x, index, &[n, c, height, width])
    }

    /// Nearest-neighbour upsampling by 2 on both spatial axes.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let mut index = Vec::with_capacity(n * c * 4 * h * w);
        for plane in 0..n * c {
            for r in 0..2 * h {
                for q in 0..2 * w {
                    index.push((plane * h * w + (r / 2) * w + q / 2) as u32);
                }
            }
        }
        self.gather(x, index, &[n, c, 2 * h, 2 * w])
    }

    /// Broadcasts a `[n, c, 1, 1]` gate over `height x width`.
    pub fn expand_spatial(&mut self, g: Var, height: usize, width: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(g));
        assert!(h == 1 && w == 1, "expand_spatial needs a [n, c, 1, 1] input");
        let hw = height * width;
        let mut index = Vec::with_capacity(n * c * hw);
        for plane in 0..n * c {
            index.extend(core::iter::repeat_n(plane as u32, hw));
        }
        self.gather(g, index, &[n, c, height, width])
    }

    /// Broadcasts a `[n, 1, h, w]` gate over `channels`.
    pub fn expand_channels(&mut self, g: Var, channels: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(g));
        assert_eq!(c, 1, "expand_channels needs a single-channel input");
        let hw = h * w;
        let mut index = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for _ in 0..channels {
                index.extend((b * hw..(b + 1) * hw).map(|i| i as u32));
            }
        }
        self.gather(g, index, &[n, channels, h, w])
    }

    /// Feature vectors of batch item `item` at flattened spatial
    /// `locations`, as a `[locations, channels]` matrix.
    pub fn gather_locations(&mut self, x: Var, item: usize, locations: &[usize]) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(item < n, "batch item out of range");
        let hw = h * w;
        let mut index = Vec::with_capacity(locations.len() * c);
        for &loc in locations {
            assert!(loc < hw, "location out of range");
            for ch in 0..c {
                index.push(((item * c + ch) * hw + loc) as u32);
            }
        }
        self.gather(x, index, &[locations.len(), c])
    }

    /// Batch item `item` of a rank-4 tensor, keeping a leading axis of one.
    pub fn select_item(&mut self, x: Var, item: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(item < n, "batch item out of range");
        let len = c * h * w;
        let index = (item * len..(item + 1) * len).map(|i| i as u32).collect();
        self.gather(x, index, &[1, c, h, w])
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let (n, _, h, w) = dims4(self.shape(parts[0]));
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.shape(p));
            assert!(pn == n && ph == h && pw == w, "concat operands differ outside the channel axis");
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                data.extend_from_slice(&pv.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data).expect("checked");
        self.push(value, Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// 2x2 max pooling with stride 2 (even extents required).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = base + 2 * r * w + 2 * q;
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * r + dr) * w + 2 * q + dq;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    data.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data).expect("checked");
        self.push(value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// 2x2 average pooling with stride 2 (even extents required).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of(0.25);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let i = base + 2 * r * w + 2 * q;
                    data.push((xv[i] + xv[i + 1] + xv[i + w] + xv[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data).expect("checked");
        self.push(value, Op::AvgPool2(x), &[x])
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data).expect("checked");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }
}

pub(super) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    parts: &[Var],
    out_shape: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n, total, h, w) = dims4(out_shape);
    let hw = h * w;
    let mut offset = 0;
    for &p in parts {
        let pc = tape.shape(p)[1];
        tape.acc_with(grads, p, |gp| {
            for b in 0..n {
                let src = &g[(b * total + offset) * hw..(b * total + offset + pc) * hw];
                let dst = &mut gp[b * pc * hw..(b + 1) * pc * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        });
        offset += pc;
    }
}

pub(super) fn avg_pool2_backward<T: Real>(xs: &[usize], g: &[T], gx: &mut [T]) {
    let (n, c, h, w) = dims4(xs);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let v = g[k] * quarter;
                k += 1;
                let i = base + 2 * r * w + 2 * q;
                gx[i] += v;
                gx[i + 1] += v;
                gx[i + w] += v;
                gx[i + w + 1] += v;
            }
        }
    }
}

