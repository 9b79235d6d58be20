use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::tensor::{numel_of, Element, Tensor};

/// Result shape of numpy-style broadcasting.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into a tensor of
/// shape `src` that broadcasts to it.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n = numel_of(out);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_into<T: Element>(len: usize, offsets: &[usize], g: &[T]) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for (&o, &v) in offsets.iter().zip(g) {
        acc[o] += v;
    }
    acc
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Element> Tensor<T> {
    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.0.data)
    }

    fn binary(&self, other: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        if self.shape() == other.shape() {
            let data: Vec<T> = self.data().iter().zip(other.data()).map(|(&x, &y)| f(x, y)).collect();
            let (a, b) = (self.data_rc(), other.data_rc());
            return Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| match op {
                Binary::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
                Binary::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
                Binary::Mul => vec![
                    Some(g.iter().zip(b.iter()).map(|(&g, &y)| g * y).collect()),
                    Some(g.iter().zip(a.iter()).map(|(&g, &x)| g * x).collect()),
                ],
            }));
        }
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let oa = Rc::new(broadcast_offsets(self.shape(), &out_shape));
        let ob = Rc::new(broadcast_offsets(other.shape(), &out_shape));
        let (a, b) = (self.data_rc(), other.data_rc());
        let data: Vec<T> = oa.iter().zip(ob.iter()).map(|(&i, &j)| f(a[i], b[j])).collect();
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(out_shape, data, &[self, other], move |g| {
            let (ga, gb): (Vec<T>, Vec<T>) = match op {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                Binary::Mul => (
                    g.iter().zip(ob.iter()).map(|(&g, &j)| g * b[j]).collect(),
                    g.iter().zip(oa.iter()).map(|(&g, &i)| g * a[i]).collect(),
                ),
            };
            vec![Some(reduce_into(na, &oa, &ga)), Some(reduce_into(nb, &ob, &gb))]
        }))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::of(s);
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| vec![Some(g.iter().map(|&v| v * s).collect())])
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::of(s);
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let y: Rc<Vec<T>> = Rc::new(self.data().iter().map(|&v| f(v)).collect());
        let x = self.data_rc();
        let yc = Rc::clone(&y);
        let grad_y = move |g: &[T]| {
            vec![Some(g.iter().zip(x.iter().zip(yc.iter())).map(|(&g, (&x, &y))| g * df(x, y)).collect())]
        };
        let data = Rc::try_unwrap(y).unwrap_or_else(|rc| (*rc).clone());
        Tensor::from_op(self.shape().to_vec(), data, &[self], grad_y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Exact Gaussian-error GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
        self.unary(
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| half * (T::one() + (x * inv_sqrt2).erf()) + x * inv_sqrt_2pi * (-half * x * x).exp(),
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![total], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over every axis from `axis` on, keeping them as extent 1.
    pub fn mean_from(&self, axis: usize) -> Result<Tensor<T>> {
        if axis > self.ndim() {
            return Err(dim_err!("mean_from axis {} on rank {}", axis, self.ndim()));
        }
        let outer = numel_of(&self.shape()[..axis]);
        let inner = numel_of(&self.shape()[axis..]);
        if inner == 0 {
            return Err(dim_err!("mean over empty axes of {:?}", self.shape()));
        }
        let inv = T::of(1.0 / inner as f64);
        let data: Vec<T> = self.data().chunks(inner).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let mut shape = self.shape()[..axis].to_vec();
        shape.extend(std::iter::repeat_n(1, self.ndim() - axis));
        debug_assert_eq!(data.len(), outer);
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut out = Vec::with_capacity(outer * inner);
            for &v in g {
                out.extend(std::iter::repeat_n(v * inv, inner));
            }
            vec![Some(out)]
        }))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
