//! Bijections between feature grids and 1-D scan sequences.
//!
//! Spatial scans follow four orders: row-major, reversed row-major,
//! column-major and reversed column-major. Temporal scans run each spatial
//! site's length-`T` trajectory forwards or backwards; sites are batched,
//! never concatenated.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalDirection {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanLayout {
    /// `direction` in `1..=4`.
    Spatial {
        direction: u8,
        h: usize,
        w: usize,
    },
    Temporal {
        direction: TemporalDirection,
        t: usize,
    },
}

impl ScanLayout {
    pub fn spatial(direction: u8, h: usize, w: usize) -> Result<Self> {
        if !(1..=4).contains(&direction) {
            return Err(Error::Usage(format!("spatial scan direction must be 1..=4, got {direction}")));
        }
        Ok(ScanLayout::Spatial { direction, h, w })
    }

    pub fn temporal(direction: TemporalDirection, t: usize) -> Self {
        ScanLayout::Temporal { direction, t }
    }

    /// All four spatial layouts of an `h × w` grid, in direction order.
    pub fn spatial_all(h: usize, w: usize) -> [ScanLayout; 4] {
        [1, 2, 3, 4].map(|direction| ScanLayout::Spatial { direction, h, w })
    }

    pub fn len(&self) -> usize {
        match *self {
            ScanLayout::Spatial { h, w, .. } => h * w,
            ScanLayout::Temporal { t, .. } => t,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `order[i]` is the grid index visited at scan step `i`.
    pub fn order(&self) -> Vec<usize> {
        match *self {
            ScanLayout::Spatial { direction, h, w } => {
                let mut order: Vec<usize> = if direction <= 2 {
                    (0..h * w).collect()
                } else {
                    (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect()
                };
                if direction % 2 == 0 {
                    order.reverse();
                }
                order
            }
            ScanLayout::Temporal { direction, t } => match direction {
                TemporalDirection::Forward => (0..t).collect(),
                TemporalDirection::Backward => (0..t).rev().collect(),
            },
        }
    }

    /// `inverse[g]` is the scan step at which grid index `g` is visited.
    pub fn inverse(&self) -> Vec<usize> {
        let order = self.order();
        let mut inv = vec![0; order.len()];
        for (step, &g) in order.iter().enumerate() {
            inv[g] = step;
        }
        inv
    }

    /// The layout that visits the transposed grid in the same pattern.
    pub fn transposed(&self) -> ScanLayout {
        match *self {
            ScanLayout::Spatial { direction, h, w } => {
                let swapped = match direction {
                    1 => 3,
                    2 => 4,
                    3 => 1,
                    _ => 2,
                };
                ScanLayout::Spatial { direction: swapped, h: w, w: h }
            }
            temporal => temporal,
        }
    }
}

/// `[B, C, H, W] -> [B, C, H·W]` in the order of `direction`.
pub fn scan2d_flatten<T: Element>(x: &Tensor<T>, direction: u8) -> Result<Tensor<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(dim_err!("scan2d_flatten needs [B, C, H, W], got {:?}", x.shape()));
    };
    let layout = ScanLayout::spatial(direction, h, w)?;
    flatten_with(x.reshape(&[b, c, h * w])?, &layout)
}

fn flatten_with<T: Element>(seq: Tensor<T>, layout: &ScanLayout) -> Result<Tensor<T>> {
    if matches!(layout, ScanLayout::Spatial { direction: 1, .. }) {
        return Ok(seq);
    }
    seq.gather_last(&Rc::from(layout.order()))
}

/// Inverse of [`scan2d_flatten`]: `[B, C, H·W] -> [B, C, H, W]`.
pub fn scan2d_unflatten<T: Element>(seq: &Tensor<T>, layout: &ScanLayout) -> Result<Tensor<T>> {
    let ScanLayout::Spatial { direction, h, w } = *layout else {
        return Err(Error::Usage("scan2d_unflatten needs a spatial layout".into()));
    };
    let &[b, c, len] = seq.shape() else {
        return Err(dim_err!("scan sequence must be [B, C, L], got {:?}", seq.shape()));
    };
    if len != h * w {
        return Err(dim_err!("sequence of length {} for a {}x{} grid", len, h, w));
    }
    let grid = if direction == 1 { seq.clone() } else { seq.gather_last(&Rc::from(layout.inverse()))? };
    grid.reshape(&[b, c, h, w])
}

/// Unflattens each sequence through its own layout and sums the grids.
pub fn scan2d_merge<T: Element>(seqs: &[Tensor<T>], layouts: &[ScanLayout]) -> Result<Tensor<T>> {
    if seqs.len() != layouts.len() || seqs.is_empty() {
        return Err(dim_err!("{} sequences for {} layouts", seqs.len(), layouts.len()));
    }
    let mut acc: Option<Tensor<T>> = None;
    for (s, l) in seqs.iter().zip(layouts) {
        let grid = scan2d_unflatten(s, l)?;
        acc = Some(match acc {
            None => grid,
            Some(a) => a.add(&grid)?,
        });
    }
    Ok(acc.expect("at least one sequence"))
}

/// `[B, T, C, H, W] -> [B·H·W, C, T]`: one length-`T` trajectory per site
/// and channel, in frame order or reversed.
pub fn temporal_flatten<T: Element>(x: &Tensor<T>, direction: TemporalDirection) -> Result<Tensor<T>> {
    let &[b, t, c, h, w] = x.shape() else {
        return Err(dim_err!("temporal_flatten needs [B, T, C, H, W], got {:?}", x.shape()));
    };
    let seq = x.permute(&[0, 3, 4, 2, 1])?.reshape(&[b * h * w, c, t])?;
    match direction {
        TemporalDirection::Forward => Ok(seq),
        TemporalDirection::Backward => seq.gather_last(&Rc::from((0..t).rev().collect::<Vec<_>>())),
    }
}

/// Inverse of [`temporal_flatten`] for a grid of `b × h × w` sites.
pub fn temporal_unflatten<T: Element>(
    seq: &Tensor<T>,
    direction: TemporalDirection,
    b: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let &[sites, c, t] = seq.shape() else {
        return Err(dim_err!("temporal sequence must be [S, C, T], got {:?}", seq.shape()));
    };
    if sites != b * h * w {
        return Err(dim_err!("{} sequences for {}x{}x{} sites", sites, b, h, w));
    }
    let ordered = match direction {
        TemporalDirection::Forward => seq.clone(),
        TemporalDirection::Backward => seq.gather_last(&Rc::from((0..t).rev().collect::<Vec<_>>()))?,
    };
    ordered.reshape(&[b, h, w, c, t])?.permute(&[0, 4, 3, 1, 2])
}
