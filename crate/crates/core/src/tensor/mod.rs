//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted array. Every op that
//! consumes a tensor with `requires_grad` records a closure that maps the
//! output gradient to input gradients; [`Tensor::backward`] walks those
//! closures in reverse topological order and accumulates gradients into
//! the leaves.

mod element;
mod fft;
mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub(crate) use element::gemm;
pub use element::Element;
pub use fft::{irfft2, ComplexSpectrum};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};

use crate::error::{dim_err, Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    apply: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    is_leaf: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: RefCell<Option<GradFn<T>>>,
    backpropagated: Cell<bool>,
}

/// Dense row-major N-dimensional array with optional gradient tracking.
pub struct Tensor<T: Element = f32>(Rc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        if self.requires_grad() {
            write!(f, " (grad)")?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            is_leaf: grad_fn.is_none(),
            grad: RefCell::new(None),
            grad_fn: RefCell::new(grad_fn),
            backpropagated: Cell::new(false),
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(dim_err!("shape {:?} holds {} elements, got {}", shape, numel_of(shape), data.len()));
        }
        Ok(Self::build(shape.to_vec(), Rc::new(data), false, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Rc::new(vec![value; numel_of(shape)]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.requires_grad_(true))
    }

    /// Returns a new leaf sharing this tensor's data with the given flag.
    pub fn requires_grad_(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), Rc::clone(&self.0.data), requires_grad, None)
    }

    /// Leaf copy without gradient tracking.
    pub fn detach(&self) -> Self {
        self.requires_grad_(false)
    }

    /// Records an op result. The closure receives the output gradient and
    /// returns one optional gradient per parent, in order.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: &[&Tensor<T>], apply: F) -> Self
    where
        F: FnOnce(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    {
        let track = parents.iter().any(|p| p.requires_grad());
        let grad_fn =
            track.then(|| GradFn { parents: parents.iter().map(|&p| p.clone()).collect(), apply: Box::new(apply) });
        Self::build(shape, Rc::new(data), track, grad_fn)
    }

    /// Same data, new shape; gradient passes through unchanged.
    pub(crate) fn view_as(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel_of(&shape), self.numel());
        let grad_fn = self.requires_grad().then(|| GradFn {
            parents: vec![self.clone()],
            apply: Box::new(|g: &[T]| vec![Some(g.to_vec())]) as BackwardFn<T>,
        });
        Self::build(shape, Rc::clone(&self.0.data), self.requires_grad(), grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.is_leaf
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        Ref::filter_map(self.0.grad.borrow(), |g| g.as_ref()).ok()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad().map(|g| Tensor::build(self.0.shape.clone(), Rc::new(g.clone()), false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Overflow(format!("{what} produced non-finite values")))
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.f64())).collect();
        Tensor::build(self.0.shape.clone(), Rc::new(data), false, None)
    }

    fn accumulate(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar into every `requires_grad` leaf.
    ///
    /// The recorded graph is consumed: calling this twice on the same loss
    /// is a usage error. Leaf gradients accumulate until [`zero_grad`](Self::zero_grad).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!("backward() needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(Error::Usage("loss does not depend on any requires_grad tensor".into()));
        }
        if self.0.backpropagated.replace(true) {
            return Err(Error::Usage("backward() already called on this loss".into()));
        }

        let order = self.topo_order()?;
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if node.is_leaf() {
                node.accumulate(&g);
                continue;
            }
            let grad_fn = node.0.grad_fn.borrow_mut().take();
            let Some(GradFn { parents, apply }) = grad_fn else {
                return Err(Error::Usage("graph segment already consumed by an earlier backward()".into()));
            };
            let grads = apply(&g);
            debug_assert_eq!(grads.len(), parents.len());
            for (parent, pg) in parents.iter().zip(grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    None => {
                        pending.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked subgraph (parents before children).
    fn topo_order(&self) -> Result<Vec<Tensor<T>>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if node.is_leaf() {
                continue;
            }
            let grad_fn = node.0.grad_fn.borrow();
            let Some(gf) = grad_fn.as_ref() else {
                return Err(Error::Usage("graph segment already consumed by an earlier backward()".into()));
            };
            for p in &gf.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::<f32>::scalar(2.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f64>::param(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_input() {
        let v = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::<f64>::param(&[4], v.clone()).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let want: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        assert_eq!(*x.grad().unwrap(), want);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::param(&[3], vec![1.0; 3]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn second_backward_is_an_error() {
        let x = Tensor::<f64>::param(&[3], vec![1.0; 3]).unwrap();
        let loss = x.silu().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Usage(_))));
        // gradients from the first call are intact
        assert_eq!(x.grad().unwrap().len(), 3);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let y = x.scale(2.0);
        let z = y.mul(&y).unwrap().add(&y).unwrap().sum();
        z.backward().unwrap();
        // z = 4x^2 + 2x -> 8x + 2
        assert_eq!(x.grad().unwrap()[0], 26.0);
    }

    #[test]
    fn leaves_accumulate_across_losses_until_reset() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let x = Tensor::<f32>::ones(&[4]);
        let y = x.silu().sum();
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }
}
