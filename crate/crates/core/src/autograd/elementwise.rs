use alloc::vec::Vec;

use super::{Op, Tape, Unary, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{what}: operand shapes differ");
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// `x + s` where `s` holds a single element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v + sv);
        self.push(value, Op::AddScalar(x, s), &[x, s])
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        self.push(value, Op::MulScalar(x, s), &[x, s])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst(x), &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::MulConst(x, c), &[x])
    }

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let value = self.value(x).map(|v| unary_forward(kind, v));
        self.push(value, Op::Unary(x, kind), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// Subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Reinterprets `x` with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape keeps element count");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Sum of one-element vars, weighted. Convenience for loss combinations.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = if w == T::one() { v } else { self.mul_const(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(T::zero())))
    }
}

pub(super) fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(super) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_forward<T: Real>(kind: Unary<T>, v: T) -> T {
    match kind {
        Unary::Neg => -v,
        Unary::Exp => v.exp(),
        Unary::Ln => v.ln(),
        Unary::Sqrt => v.sqrt(),
        Unary::Tanh => v.tanh(),
        Unary::Sigmoid => sigmoid(v),
        Unary::Relu => v.max(T::zero()),
        Unary::LeakyRelu(s) => {
            if v > T::zero() {
                v
            } else {
                v * s
            }
        }
        Unary::Abs => v.abs(),
        Unary::Square => v * v,
        Unary::Softplus => softplus(v),
        Unary::Recip => T::one() / v,
    }
}

pub(super) fn unary_backward<T: Real>(kind: Unary<T>, x: &[T], out: &[T], g: &[T], gx: &mut [T]) {
    let it = gx.iter_mut().zip(g).zip(x).zip(out);
    match kind {
        Unary::Neg => it.for_each(|(((d, &g), _), _)| *d -= g),
        Unary::Exp => it.for_each(|(((d, &g), _), &o)| *d += g * o),
        Unary::Ln => it.for_each(|(((d, &g), &x), _)| *d += g / x),
        Unary::Sqrt => it.for_each(|(((d, &g), _), &o)| *d += g / (o + o)),
        Unary::Tanh => it.for_each(|(((d, &g), _), &o)| *d += g * (T::one() - o * o)),
        Unary::Sigmoid => it.for_each(|(((d, &g), _), &o)| *d += g * o * (T::one() - o)),
        Unary::Relu => it.for_each(|(((d, &g), &x), _)| {
            if x > T::zero() {
                *d += g
            }
        }),
        Unary::LeakyRelu(s) => it.for_each(|(((d, &g), &x), _)| {
            *d += if x > T::zero() { g } else { g * s };
        }),
        Unary::Abs => it.for_each(|(((d, &g), &x), _)| {
            if x > T::zero() {
                *d += g
            } else if x < T::zero() {
                *d -= g
            }
        }),
        Unary::Square => it.for_each(|(((d, &g), &x), _)| *d += g * (x + x)),
        Unary::Softplus => it.for_each(|(((d, &g), &x), _)| *d += g * sigmoid(x)),
        Unary::Recip => it.for_each(|(((d, &g), _), &o)| *d -= g * o * o),
    }
}
