//! Elementwise nonlinearities, softmax and dropout masks.

use alloc::format;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    Sigmoid,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_C) * x * x * x);
    T::from_f64(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_C);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, grad: &Tensor<T>, kind: Activation) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| grad.data()[i] * kind.derivative(x.data()[i], y.data()[i]))
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range"), x.shape(), &[]));
    }
    let (outer, n, inner) = axis_layout(x.shape(), axis);
    let mut y = x.clone();
    let d = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(d[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..n {
                let e = (d[at(j)] - m).exp();
                d[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                d[at(j)] /= s;
            }
        }
    }
    Ok(y)
}

/// `dx = y * (g - sum(g * y))` along `axis`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_layout(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), grad.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
            for j in 0..n {
                dd[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    dx
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`. Consumes one stream of `rng`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut RngState) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut s = rng.stream();
    Ok(Tensor::from_fn(shape, |_| if s.uniform() < rate { T::zero() } else { keep }))
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Dropout as a pure function. In eval mode, or at rate 0, it is the identity
/// and consumes no randomness.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, rng: &mut RngState, train: bool) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    x.zip_map(&mask, |a, b| a * b)
}
