use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tensor<T> {
    /// Normalizes over the last axis, then applies a per-channel affine map.
    pub fn layer_norm(&self, gain: &Tensor<T>, offset: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        self.norm_axis(c, 1, gain, offset, eps)
    }

    /// Normalizes over axis 1 of `[B, C, ...]` at every other position.
    pub fn layer_norm_channels(&self, gain: &Tensor<T>, offset: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(dim_err!("layer_norm_channels needs rank >= 2, got {:?}", self.shape()));
        }
        let inner = self.shape()[2..].iter().product();
        self.norm_axis(self.shape()[1], inner, gain, offset, eps)
    }

    fn norm_axis(&self, c: usize, inner: usize, gain: &Tensor<T>, offset: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if c == 0 {
            return Err(dim_err!("layer_norm over an empty channel axis"));
        }
        if gain.shape() != [c] || offset.shape() != [c] {
            return Err(dim_err!("layer_norm affine shapes {:?}/{:?}, expected [{}]", gain.shape(), offset.shape(), c));
        }
        let outer = self.numel() / (c * inner);
        let x = self.data();
        let (gd, od) = (gain.data(), offset.data());
        let eps = T::of(eps);
        let inv_c = T::of(1.0 / c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| x[at(ch)]).sum::<T>() * inv_c;
                let var = (0..c).map(|ch| (x[at(ch)] - mean).powi(2)).sum::<T>() * inv_c;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for ch in 0..c {
                    let xh = (x[at(ch)] - mean) * r;
                    xhat[at(ch)] = xh;
                    y[at(ch)] = xh * gd[ch] + od[ch];
                }
            }
        }
        let gr = gain.data_rc();
        let need_x = self.requires_grad();
        let (need_g, need_o) = (gain.requires_grad(), offset.requires_grad());
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self, gain, offset], move |gy| {
            let mut gx = need_x.then(|| vec![T::zero(); gy.len()]);
            let mut gg = vec![T::zero(); c];
            let mut go = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |ch: usize| (o * c + ch) * inner + i;
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for ch in 0..c {
                        let g = gy[at(ch)];
                        let xh = xhat[at(ch)];
                        gg[ch] += g * xh;
                        go[ch] += g;
                        let gxh = g * gr[ch];
                        mean_g += gxh;
                        mean_gx += gxh * xh;
                    }
                    if let Some(gx) = gx.as_mut() {
                        mean_g *= inv_c;
                        mean_gx *= inv_c;
                        let r = rstd[o * inner + i];
                        for ch in 0..c {
                            gx[at(ch)] = r * (gy[at(ch)] * gr[ch] - mean_g - xhat[at(ch)] * mean_gx);
                        }
                    }
                }
            }
            vec![gx, need_g.then_some(gg), need_o.then_some(go)]
        }))
    }
}
