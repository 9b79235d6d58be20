use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::tensor::{numel_of, Element, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Transposes row-major `data` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // innermost output axis handled as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n / run {
        for k in 0..run {
            out.push(data[off + k * run_stride]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Ok(self.view_as(shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("invalid permutation {:?} for rank {}", axes, rank));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.view_as(self.shape().to_vec()));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(out_shape, data, &[self], move |g| vec![Some(permute_data(g, &grad_shape, &inverse).0)]))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("cat of zero tensors"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(dim_err!("cat axis {} on rank {}", axis, rank));
        }
        for p in parts {
            let ok = p.ndim() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err!("cat shape mismatch {:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let outer = numel_of(&first.shape()[..axis]);
        let inner = numel_of(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner.max(1);
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::from_op(shape, data, &refs, move |g| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[pos..pos + w]);
                    pos += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {:?}", self.shape()));
        }
        let outer = numel_of(&self.shape()[..axis]);
        let inner = numel_of(&self.shape()[axis + 1..]);
        let full = self.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut gi = vec![T::zero(); n];
            for o in 0..outer {
                let base = o * full + start * inner;
                gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// Reorders the last axis: `out[..., i] = in[..., perm[i]]`.
    pub fn gather_last(&self, perm: &Rc<[usize]>) -> Result<Tensor<T>> {
        let k = *self.shape().last().ok_or_else(|| dim_err!("gather_last on a scalar"))?;
        if perm.len() != k || perm.iter().any(|&p| p >= k) {
            return Err(dim_err!("permutation of length {} for last extent {}", perm.len(), k));
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks(k) {
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let perm = Rc::clone(perm);
        let n = self.numel();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            let mut gi = vec![T::zero(); n];
            for (dst, src) in gi.chunks_mut(k).zip(g.chunks(k)) {
                for (i, &p) in perm.iter().enumerate() {
                    dst[p] += src[i];
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Depth-to-space: `[B, C·r², H, W] -> [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let &[b, c, h, w] = self.shape() else {
            return Err(dim_err!("pixel_shuffle needs a rank-4 tensor, got {:?}", self.shape()));
        };
        if r == 0 || c % (r * r) != 0 {
            return Err(dim_err!("pixel_shuffle: {} channels not divisible by {}²", c, r));
        }
        let co = c / (r * r);
        self.reshape(&[b, co, r, r, h, w])?.permute(&[0, 1, 4, 2, 5, 3])?.reshape(&[b, co, h * r, w * r])
    }

    /// Space-to-depth, the inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let &[b, c, h, w] = self.shape() else {
            return Err(dim_err!("pixel_unshuffle needs a rank-4 tensor, got {:?}", self.shape()));
        };
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(dim_err!("pixel_unshuffle: {}x{} not divisible by {}", h, w, r));
        }
        self.reshape(&[b, c, h / r, r, w / r, r])?.permute(&[0, 1, 3, 5, 2, 4])?.reshape(&[b, c * r * r, h / r, w / r])
    }
}
