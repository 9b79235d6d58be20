use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unrolls one group of one image into a `[k, p]` column matrix.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin_g() {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + i) * self.kw + j) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin_g() {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((ci * self.kh + i) * self.kw + j) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let (hw, phw) = (g.h * g.w, g.p());
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * hw..][..hw];
            let kern = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let out = &mut y[(b * g.cin + c) * phw..][..phw];
            for oh in 0..g.ho {
                for i in 0..g.kh {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..][..g.w];
                    let dst = &mut out[oh * g.wo..][..g.wo];
                    for j in 0..g.kw {
                        let kv = kern[i * g.kw + j];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + j) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d += kv * src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let (hw, phw) = (g.h * g.w, g.p());
    let mut gx = gx;
    let mut gw = gw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * hw..][..hw];
            let kern = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let gout = &gy[(b * g.cin + c) * phw..][..phw];
            for oh in 0..g.ho {
                for i in 0..g.kh {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row = ih as usize * g.w;
                    for j in 0..g.kw {
                        let mut acc = T::zero();
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + j) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let go = gout[oh * g.wo + ow];
                            acc += go * plane[row + iw as usize];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[(b * g.cin + c) * hw + row + iw as usize] += go * kern[i * g.kw + j];
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[c * g.kh * g.kw + i * g.kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation over `[B, Cin, H, W]` with weight `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let &[batch, cin, h, w] = self.shape() else {
            return Err(dim_err!("conv2d input must be rank 4, got {:?}", self.shape()));
        };
        let &[cout, cin_g, kh, kw] = weight.shape() else {
            return Err(dim_err!("conv2d weight must be rank 4, got {:?}", weight.shape()));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(dim_err!(
                "conv2d groups={} incompatible with input channels {} and weight {:?}",
                groups,
                cin,
                weight.shape()
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(dim_err!("conv2d needs odd kernels and stride >= 1, got {}x{} stride {}", kh, kw, stride));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err!("conv2d kernel {}x{} larger than padded input {}x{}", kh, kw, h, w));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(dim_err!("conv2d bias shape {:?}, expected [{}]", b.shape(), cout));
            }
        }
        let g = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (p, k, cin_g, cout_g) = (g.p(), g.k(), g.cin_g(), g.cout_g());
        let mut y = vec![T::zero(); batch * cout * p];
        let xd = self.data();
        let wd = weight.data();
        if g.depthwise() {
            depthwise_forward(&g, xd, wd, &mut y);
        } else {
            let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            for b in 0..batch {
                for grp in 0..groups {
                    let xs = &xd[(b * cin + grp * cin_g) * h * w..][..cin_g * h * w];
                    let rhs: &[T] = if g.pointwise() {
                        xs
                    } else {
                        g.im2col(xs, &mut cols);
                        &cols
                    };
                    let out = &mut y[(b * cout + grp * cout_g) * p..][..cout_g * p];
                    gemm(cout_g, k, p, &wd[grp * cout_g * k..][..cout_g * k], false, rhs, false, out, false);
                }
            }
        }
        if let Some(bias) = bias {
            for (i, chunk) in y.chunks_mut(p).enumerate() {
                let bv = bias.data()[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }

        let (xr, wr) = (self.data_rc(), weight.data_rc());
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(vec![batch, cout, g.ho, g.wo], y, &parents, move |gy| {
            let mut gx = need_x.then(|| vec![T::zero(); xr.len()]);
            let mut gw = need_w.then(|| vec![T::zero(); wr.len()]);
            if g.depthwise() {
                depthwise_backward(&g, &xr, &wr, gy, gx.as_deref_mut(), gw.as_deref_mut());
            } else {
                let mut cols = vec![T::zero(); k * p];
                let mut gcols = vec![T::zero(); k * p];
                for b in 0..batch {
                    for grp in 0..groups {
                        let xs = &xr[(b * cin + grp * cin_g) * h * w..][..cin_g * h * w];
                        let gys = &gy[(b * cout + grp * cout_g) * p..][..cout_g * p];
                        let wg = &wr[grp * cout_g * k..][..cout_g * k];
                        if let Some(gw) = gw.as_deref_mut() {
                            let rhs: &[T] = if g.pointwise() {
                                xs
                            } else {
                                g.im2col(xs, &mut cols);
                                &cols
                            };
                            gemm(cout_g, p, k, gys, false, rhs, true, &mut gw[grp * cout_g * k..][..cout_g * k], true);
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gxs = &mut gx[(b * cin + grp * cin_g) * h * w..][..cin_g * h * w];
                            if g.pointwise() {
                                gemm(k, cout_g, p, wg, true, gys, false, gxs, true);
                            } else {
                                gemm(k, cout_g, p, wg, true, gys, false, &mut gcols, false);
                                g.col2im(&gcols, gxs);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for (i, chunk) in gy.chunks(p).enumerate() {
                        gb[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Affine map over the last axis: `[..., Cin] x [Cout, Cin]ᵀ + b`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let &[cout, cin] = weight.shape() else {
            return Err(dim_err!("linear weight must be rank 2, got {:?}", weight.shape()));
        };
        if self.shape().last() != Some(&cin) {
            return Err(dim_err!("linear expects last extent {}, got {:?}", cin, self.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(dim_err!("linear bias shape {:?}, expected [{}]", b.shape(), cout));
            }
        }
        let m = self.numel() / cin.max(1);
        let mut y = vec![T::zero(); m * cout];
        gemm(m, cin, cout, self.data(), false, weight.data(), true, &mut y, false);
        if let Some(b) = bias {
            for row in y.chunks_mut(cout) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let (xr, wr) = (self.data_rc(), weight.data_rc());
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(shape, y, &parents, move |gy| {
            let gx = need_x.then(|| {
                let mut gx = vec![T::zero(); m * cin];
                gemm(m, cout, cin, gy, false, &wr, false, &mut gx, false);
                gx
            });
            let gw = need_w.then(|| {
                let mut gw = vec![T::zero(); cout * cin];
                gemm(cout, m, cin, gy, true, &xr, false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for row in gy.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Linear map over axis 1 of `[B, Cin, ...]` (a 1×1 convolution of any rank).
    pub fn pointwise(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(dim_err!("pointwise needs rank >= 2, got {:?}", self.shape()));
        }
        let (b, cin) = (self.shape()[0], self.shape()[1]);
        let p: usize = self.shape()[2..].iter().product();
        let &[cout, wc] = weight.shape() else {
            return Err(dim_err!("pointwise weight must be rank 2, got {:?}", weight.shape()));
        };
        if wc != cin {
            return Err(dim_err!("pointwise weight {:?} vs {} input channels", weight.shape(), cin));
        }
        let w4 = weight.reshape(&[cout, cin, 1, 1])?;
        let y = self.reshape(&[b, cin, 1, p])?.conv2d(&w4, bias, 1, 0, 1)?;
        let mut shape = self.shape().to_vec();
        shape[1] = cout;
        y.reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Element>(shape: &[usize], scale: f64, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = crate::tensor::numel_of(shape);
        Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.random_range(-scale..scale))).collect()).unwrap()
    }

    /// Six nested loops, accumulated in f64.
    fn naive_conv(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        b: &Tensor<f32>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let [bn, cin, h, wd] = x.shape().try_into().unwrap();
        let [cout, cin_g, kh, kw] = w.shape().try_into().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let cout_g = cout / groups;
        let mut out = vec![0.0; bn * cout * ho * wo];
        for n in 0..bn {
            for co in 0..cout {
                let grp = co / cout_g;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..cin_g {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * stride + i) as isize - pad as isize;
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    let cx = grp * cin_g + ci;
                                    acc += x.data()[((n * cin + cx) * h + ih as usize) * wd + iw as usize] as f64
                                        * w.data()[((co * cin_g + ci) * kh + i) * kw + j] as f64;
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::<f32>::ones(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        assert_eq!(x.conv2d(&w, None, 2, 1, 1).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn matches_naive_loops() {
        for (cin, cout, k, stride, pad, groups) in [
            (3, 6, 3, 1, 1, 1),
            (3, 4, 3, 2, 1, 1),
            (4, 6, 3, 1, 1, 2),
            (6, 6, 3, 1, 1, 6),
            (3, 5, 1, 1, 0, 1),
            (4, 4, 5, 1, 2, 1),
        ] {
            let x = random::<f32>(&[2, cin, 8, 8], 1.0, 1);
            let bound = 1.0 / ((cin / groups * k * k) as f64).sqrt();
            let w = random::<f32>(&[cout, cin / groups, k, k], bound, 2);
            let b = random::<f32>(&[cout], bound, 3);
            let y = x.conv2d(&w, Some(&b), stride, pad, groups).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad, groups);
            let err = y.data().iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "cin={cin} cout={cout} k={k} groups={groups}: {err}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(x.conv2d(&Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1, 1).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[2, 3, 2, 2]), None, 1, 1, 1).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[4, 1, 3, 3]), None, 1, 1, 2).is_err());
        assert!(Tensor::<f32>::zeros(&[3, 4, 4]).conv2d(&Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1, 1).is_err());
    }

    #[test]
    fn conv_gradients() {
        for (cin, cout, k, stride, pad, groups) in
            [(2, 3, 3, 1, 1, 1), (2, 2, 3, 2, 1, 1), (4, 2, 3, 1, 1, 2), (3, 3, 3, 1, 1, 3), (3, 2, 1, 1, 0, 1)]
        {
            let x = random::<f64>(&[2, cin, 5, 5], 1.0, 4);
            let w = random::<f64>(&[cout, cin / groups, k, k], 0.5, 5);
            let b = random::<f64>(&[cout], 0.5, 6);
            let e1 = grad_check(|t| Ok(t.conv2d(&w, Some(&b), stride, pad, groups)?.silu().sum()), &x, 1e-5).unwrap();
            let e2 = grad_check(|t| Ok(x.conv2d(t, Some(&b), stride, pad, groups)?.silu().sum()), &w, 1e-5).unwrap();
            let e3 = grad_check(|t| Ok(x.conv2d(&w, Some(t), stride, pad, groups)?.silu().sum()), &b, 1e-5).unwrap();
            assert!(e1.max(e2).max(e3) < 1e-6, "{cin} {cout} {groups}: {e1} {e2} {e3}");
        }
    }

    #[test]
    fn linear_identity_and_constant() {
        let x = random::<f32>(&[2, 3, 4], 1.0, 7);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let id = Tensor::from_vec(&[4, 4], eye).unwrap();
        assert_eq!(x.linear(&id, Some(&Tensor::zeros(&[4]))).unwrap().data(), x.data());
        let b = Tensor::<f32>::from_f64(&[2], &[0.5, -2.0]).unwrap();
        let y = x.linear(&Tensor::zeros(&[2, 4]), Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.data().chunks(2).all(|r| r == [0.5, -2.0]));
        assert!(x.linear(&Tensor::zeros(&[2, 3]), None).is_err());
    }

    #[test]
    fn linear_matches_dot_products() {
        let x = random::<f32>(&[4, 8], 1.0, 8);
        let w = random::<f32>(&[5, 8], 0.35, 9);
        let b = random::<f32>(&[5], 0.35, 10);
        let y = x.linear(&w, Some(&b)).unwrap();
        for i in 0..4 {
            for o in 0..5 {
                let want: f64 = b.data()[o] as f64
                    + (0..8).map(|k| x.data()[i * 8 + k] as f64 * w.data()[o * 8 + k] as f64).sum::<f64>();
                assert!((y.data()[i * 5 + o] as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn linear_and_pointwise_gradients() {
        let x = random::<f64>(&[2, 3, 4], 1.0, 11);
        let w = random::<f64>(&[5, 4], 0.5, 12);
        let b = random::<f64>(&[5], 0.5, 13);
        assert!(grad_check(|t| Ok(t.linear(&w, Some(&b))?.gelu().sum()), &x, 1e-5).unwrap() < 1e-6);
        assert!(grad_check(|t| Ok(x.linear(t, Some(&b))?.gelu().sum()), &w, 1e-5).unwrap() < 1e-6);
        let wp = random::<f64>(&[5, 3], 0.5, 14);
        assert!(grad_check(|t| Ok(t.pointwise(&wp, Some(&b))?.gelu().sum()), &x, 1e-5).unwrap() < 1e-6);
        assert!(grad_check(|t| Ok(x.pointwise(t, None)?.gelu().sum()), &wp, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn pointwise_equals_linear_on_channel_last() {
        let x = random::<f64>(&[2, 3, 5], 1.0, 15);
        let w = random::<f64>(&[4, 3], 0.5, 16);
        let a = x.pointwise(&w, None).unwrap();
        let b = x.permute(&[0, 2, 1]).unwrap().linear(&w, None).unwrap().permute(&[0, 2, 1]).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
