//! Pixel L1 plus feature-space L1 through a frozen random pyramid.

use crate::error::{dim_err, Result};
use crate::nn::Init;
use crate::tensor::{Element, Tensor};

/// Output channels of the three stride-2 stages.
pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

/// A fixed, seed-initialized 3-stage strided convolution pyramid. Its
/// weights never require gradients, so it only shapes the loss.
pub struct FeatureExtractor<T: Element = f32> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let init = Init::new(seed).child("features");
        let mut cin = 3;
        let stages = STAGE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stage = init.child(&format!("stage{i}"));
                let bound = (3.0 / (cin * 9) as f64).sqrt();
                let w = stage.uniform("weight", &[cout, cin, 3, 3], bound).detach();
                let b = stage.uniform("bias", &[cout], 0.1).detach();
                cin = cout;
                (w, b)
            })
            .collect();
        FeatureExtractor { stages }
    }

    /// Features of `[B, 3, H, W]` images, one tensor per stage.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for (w, b) in &self.stages {
            h = h.conv2d(w, Some(b), 2, 1, 1)?.gelu();
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn batched<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match *x.shape() {
        [3, h, w] => x.reshape(&[1, 3, h, w]),
        [_, 3, _, _] => Ok(x.clone()),
        _ => Err(dim_err!("images must be [3, H, W] or [B, 3, H, W], got {:?}", x.shape())),
    }
}

/// `w_pix·mean|pred − gt| + w_feat·Σ_stages mean|Φ(pred) − Φ(gt)|` over
/// `[3, H, W]` or `[B, 3, H, W]` images. A zero feature weight skips the
/// pyramid entirely.
pub fn loss_total<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    fx: &FeatureExtractor<T>,
    pixel_weight: f64,
    feature_weight: f64,
) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(dim_err!("prediction {:?} and target {:?} differ", pred.shape(), gt.shape()));
    }
    let (pred, gt) = (batched(pred)?, batched(gt)?);
    let mut loss = pred.sub(&gt)?.abs().mean().scale(pixel_weight);
    if feature_weight != 0.0 {
        let target = fx.features(&gt.detach())?;
        for (p, g) in fx.features(&pred)?.iter().zip(&target) {
            loss = loss.add(&p.sub(g)?.abs().mean().scale(feature_weight))?;
        }
    }
    Ok(loss)
}
