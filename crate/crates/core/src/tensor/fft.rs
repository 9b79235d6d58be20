//! Real 2-D discrete Fourier transform over the last two axes.
//!
//! Both directions are written as products with cosine/sine tables, so the
//! backward passes are the exact transposes of the forward maps. Sizes need
//! not be powers of two; the intended extents are small feature maps.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Half-plane spectrum of a real `[B, C, H, W]` tensor.
///
/// Stored as one `[B, 2C, H, W/2+1]` tensor: the first `C` channels of
/// every batch entry are the real planes, the next `C` the imaginary ones.
#[derive(Clone, Debug)]
pub struct ComplexSpectrum<T: Element = f32> {
    packed: Tensor<T>,
    width: usize,
}

struct Tables<T> {
    h: usize,
    w: usize,
    wh: usize,
    /// `[wh, w]`
    cw: Vec<T>,
    sw: Vec<T>,
    /// `[h, h]`, symmetric
    ch: Vec<T>,
    sh: Vec<T>,
    /// Hermitian multiplicity of each half-plane column.
    mult: Vec<T>,
}

impl<T: Element> Tables<T> {
    fn new(h: usize, w: usize) -> Self {
        let wh = w / 2 + 1;
        let angle = |k: usize, n: usize, len: usize| 2.0 * PI * ((k * n) % len) as f64 / len as f64;
        let mut cw = Vec::with_capacity(wh * w);
        let mut sw = Vec::with_capacity(wh * w);
        for k in 0..wh {
            for n in 0..w {
                let a = angle(k, n, w);
                cw.push(T::of(a.cos()));
                sw.push(T::of(a.sin()));
            }
        }
        let mut ch = Vec::with_capacity(h * h);
        let mut sh = Vec::with_capacity(h * h);
        for k in 0..h {
            for n in 0..h {
                let a = angle(k, n, h);
                ch.push(T::of(a.cos()));
                sh.push(T::of(a.sin()));
            }
        }
        let mult = (0..wh).map(|k| if k == 0 || (w % 2 == 0 && k == w / 2) { T::one() } else { T::of(2.0) }).collect();
        Tables { h, w, wh, cw, sw, ch, sh, mult }
    }

    /// One plane `x [h, w]` to `(re, im) [h, wh]`.
    fn forward(&self, x: &[T], re: &mut [T], im: &mut [T], scratch: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.wh);
        let (r, i) = scratch.split_at_mut(h * wh);
        gemm(h, w, wh, x, false, &self.cw, true, r, false);
        gemm(h, w, wh, x, false, &self.sw, true, i, false);
        i.iter_mut().for_each(|v| *v = -*v);
        // re = CH r + SH i ; im = CH i - SH r
        gemm(h, h, wh, &self.ch, false, r, false, re, false);
        gemm(h, h, wh, &self.sh, false, i, false, re, true);
        gemm(h, h, wh, &self.ch, false, i, false, im, false);
        let mut tmp = vec![T::zero(); h * wh];
        gemm(h, h, wh, &self.sh, false, r, false, &mut tmp, false);
        im.iter_mut().zip(&tmp).for_each(|(a, &b)| *a -= b);
    }

    /// Transpose of [`forward`](Self::forward).
    fn forward_adjoint(&self, gre: &[T], gim: &[T], gx: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.wh);
        let mut gr = vec![T::zero(); h * wh];
        let mut gi = vec![T::zero(); h * wh];
        let mut tmp = vec![T::zero(); h * wh];
        // gr = CH gre - SH gim ; gi = SH gre + CH gim
        gemm(h, h, wh, &self.ch, false, gre, false, &mut gr, false);
        gemm(h, h, wh, &self.sh, false, gim, false, &mut tmp, false);
        gr.iter_mut().zip(&tmp).for_each(|(a, &b)| *a -= b);
        gemm(h, h, wh, &self.sh, false, gre, false, &mut gi, false);
        gemm(h, h, wh, &self.ch, false, gim, false, &mut gi, true);
        // gx = gr CW - gi SW
        gemm(h, wh, w, &gr, false, &self.cw, false, gx, true);
        gi.iter_mut().for_each(|v| *v = -*v);
        gemm(h, wh, w, &gi, false, &self.sw, false, gx, true);
    }

    /// `(re, im) [h, wh]` to one real plane `[h, w]`, scaled by `1/(h w)`.
    fn inverse(&self, re: &[T], im: &[T], x: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.wh);
        let mut ure = vec![T::zero(); h * wh];
        let mut uim = vec![T::zero(); h * wh];
        let mut tmp = vec![T::zero(); h * wh];
        // ure = CH re - SH im ; uim = SH re + CH im
        gemm(h, h, wh, &self.ch, false, re, false, &mut ure, false);
        gemm(h, h, wh, &self.sh, false, im, false, &mut tmp, false);
        ure.iter_mut().zip(&tmp).for_each(|(a, &b)| *a -= b);
        gemm(h, h, wh, &self.sh, false, re, false, &mut uim, false);
        gemm(h, h, wh, &self.ch, false, im, false, &mut uim, true);
        let norm = T::of(1.0 / (h * w) as f64);
        for row in 0..h {
            for k in 0..wh {
                let m = self.mult[k] * norm;
                ure[row * wh + k] *= m;
                uim[row * wh + k] *= -m;
            }
        }
        gemm(h, wh, w, &ure, false, &self.cw, false, x, false);
        gemm(h, wh, w, &uim, false, &self.sw, false, x, true);
    }

    /// Transpose of [`inverse`](Self::inverse).
    fn inverse_adjoint(&self, gx: &[T], gre: &mut [T], gim: &mut [T]) {
        let (h, w, wh) = (self.h, self.w, self.wh);
        let mut gure = vec![T::zero(); h * wh];
        let mut guim = vec![T::zero(); h * wh];
        gemm(h, w, wh, gx, false, &self.cw, true, &mut gure, false);
        gemm(h, w, wh, gx, false, &self.sw, true, &mut guim, false);
        let norm = T::of(1.0 / (h * w) as f64);
        for row in 0..h {
            for k in 0..wh {
                let m = self.mult[k] * norm;
                gure[row * wh + k] *= m;
                guim[row * wh + k] *= -m;
            }
        }
        // gre = CH gure + SH guim ; gim = CH guim - SH gure
        gemm(h, h, wh, &self.ch, false, &gure, false, gre, false);
        gemm(h, h, wh, &self.sh, false, &guim, false, gre, true);
        gemm(h, h, wh, &self.ch, false, &guim, false, gim, false);
        let mut tmp = vec![T::zero(); h * wh];
        gemm(h, h, wh, &self.sh, false, &gure, false, &mut tmp, false);
        gim.iter_mut().zip(&tmp).for_each(|(a, &b)| *a -= b);
    }
}

impl<T: Element> Tensor<T> {
    /// Unnormalized real FFT over the last two axes of `[B, C, H, W]`.
    pub fn rfft2(&self) -> Result<ComplexSpectrum<T>> {
        let &[b, c, h, w] = self.shape() else {
            return Err(dim_err!("rfft2 expects [B, C, H, W], got {:?}", self.shape()));
        };
        if h == 0 || w == 0 {
            return Err(dim_err!("rfft2 of an empty plane {}x{}", h, w));
        }
        let tables = Rc::new(Tables::<T>::new(h, w));
        let wh = tables.wh;
        let (plane, half) = (h * w, h * wh);
        let mut out = vec![T::zero(); b * 2 * c * half];
        let mut scratch = vec![T::zero(); 2 * half];
        for bi in 0..b {
            let block = &mut out[bi * 2 * c * half..(bi + 1) * 2 * c * half];
            let (res, ims) = block.split_at_mut(c * half);
            for ci in 0..c {
                let x = &self.data()[(bi * c + ci) * plane..][..plane];
                tables.forward(
                    x,
                    &mut res[ci * half..(ci + 1) * half],
                    &mut ims[ci * half..(ci + 1) * half],
                    &mut scratch,
                );
            }
        }
        let t = Rc::clone(&tables);
        let packed = Tensor::from_op(vec![b, 2 * c, h, wh], out, &[self], move |g| {
            let mut gx = vec![T::zero(); b * c * plane];
            for bi in 0..b {
                let block = &g[bi * 2 * c * half..(bi + 1) * 2 * c * half];
                let (gres, gims) = block.split_at(c * half);
                for ci in 0..c {
                    t.forward_adjoint(
                        &gres[ci * half..(ci + 1) * half],
                        &gims[ci * half..(ci + 1) * half],
                        &mut gx[(bi * c + ci) * plane..][..plane],
                    );
                }
            }
            vec![Some(gx)]
        });
        Ok(ComplexSpectrum { packed, width: w })
    }
}

/// Inverse of [`Tensor::rfft2`] producing a real `[B, C, h, w]` tensor.
pub fn irfft2<T: Element>(spec: &ComplexSpectrum<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    spec.irfft2(h, w)
}

impl<T: Element> ComplexSpectrum<T> {
    /// Wraps a `[B, 2C, H, W/2+1]` tensor of stacked real/imaginary planes.
    pub fn from_packed(packed: Tensor<T>, width: usize) -> Result<Self> {
        let &[_, c2, _, wh] = packed.shape() else {
            return Err(dim_err!("spectrum must be rank 4, got {:?}", packed.shape()));
        };
        if c2 % 2 != 0 || wh != width / 2 + 1 {
            return Err(dim_err!("spectrum shape {:?} inconsistent with width {}", packed.shape(), width));
        }
        Ok(ComplexSpectrum { packed, width })
    }

    pub fn packed(&self) -> &Tensor<T> {
        &self.packed
    }

    pub fn batch(&self) -> usize {
        self.packed.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.packed.shape()[1] / 2
    }

    pub fn height(&self) -> usize {
        self.packed.shape()[2]
    }

    /// Width of the real signal the spectrum came from.
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(batch, channel, H, W/2+1)`
    pub fn shape(&self) -> [usize; 4] {
        let s = self.packed.shape();
        [s[0], s[1] / 2, s[2], s[3]]
    }

    fn plane(&self, imag: bool, b: usize, c: usize) -> &[T] {
        let [_, ch, h, wh] = self.shape();
        let half = h * wh;
        let idx = b * 2 * ch + if imag { ch + c } else { c };
        &self.packed.data()[idx * half..(idx + 1) * half]
    }

    pub fn re(&self, b: usize, c: usize) -> &[T] {
        self.plane(false, b, c)
    }

    pub fn im(&self, b: usize, c: usize) -> &[T] {
        self.plane(true, b, c)
    }

    /// `|X|` per bin, shaped `(batch, channel, H, W/2+1)`.
    pub fn magnitude(&self) -> Vec<T> {
        let [b, c, _, _] = self.shape();
        let mut out = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                out.extend(self.re(bi, ci).iter().zip(self.im(bi, ci)).map(|(&r, &i)| (r * r + i * i).sqrt()));
            }
        }
        out
    }

    /// Multiplies real and imaginary parts by the same real `[B, C, H, W/2+1]` gate.
    pub fn scale(&self, gate: &Tensor<T>) -> Result<Self> {
        if gate.shape() != self.shape() {
            return Err(dim_err!("gate shape {:?} vs spectrum {:?}", gate.shape(), self.shape()));
        }
        let [b, c, h, wh] = self.shape();
        let doubled =
            gate.reshape(&[b, 1, c, h, wh])?.mul(&Tensor::ones(&[1, 2, 1, 1, 1]))?.reshape(&[b, 2 * c, h, wh])?;
        Ok(ComplexSpectrum { packed: self.packed.mul(&doubled)?, width: self.width })
    }

    /// Inverse transform with `1/(h w)` normalization.
    pub fn irfft2(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let [b, c, sh, wh] = self.shape();
        if sh != h || wh != w / 2 + 1 || w == 0 || h == 0 {
            return Err(dim_err!("spectrum {:?} cannot be inverted to {}x{}", self.shape(), h, w));
        }
        let tables = Rc::new(Tables::<T>::new(h, w));
        let (plane, half) = (h * w, h * wh);
        let src = self.packed.data();
        let mut out = vec![T::zero(); b * c * plane];
        for bi in 0..b {
            let block = &src[bi * 2 * c * half..(bi + 1) * 2 * c * half];
            let (res, ims) = block.split_at(c * half);
            for ci in 0..c {
                tables.inverse(
                    &res[ci * half..(ci + 1) * half],
                    &ims[ci * half..(ci + 1) * half],
                    &mut out[(bi * c + ci) * plane..][..plane],
                );
            }
        }
        let t = Rc::clone(&tables);
        Ok(Tensor::from_op(vec![b, c, h, w], out, &[&self.packed], move |g| {
            let mut gs = vec![T::zero(); b * 2 * c * half];
            for bi in 0..b {
                let block = &mut gs[bi * 2 * c * half..(bi + 1) * 2 * c * half];
                let (gres, gims) = block.split_at_mut(c * half);
                for ci in 0..c {
                    t.inverse_adjoint(
                        &g[(bi * c + ci) * plane..][..plane],
                        &mut gres[ci * half..(ci + 1) * half],
                        &mut gims[ci * half..(ci + 1) * half],
                    );
                }
            }
            vec![Some(gs)]
        }))
    }
}
