//! Spatial and temporal Mamba blocks with their frequency (AFB) and
//! channel-attention (CAB) companions.
//!
//! Spatial blocks take per-frame features `[N, C, H, W]`; temporal blocks
//! take `[B, T, C, H, W]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    scan2d_flatten, scan2d_merge, temporal_flatten, temporal_unflatten, ScanLayout, TemporalDirection,
};
use crate::nn::{join, ChannelNorm, Conv2d, Dense, Init, Module};
use crate::tensor::{Element, Tensor};

/// Initial weight scale of the last layer on each residual branch. At
/// unit scale the residual stream grows roughly 30× across the default
/// stack, which slows early training badly.
pub const BRANCH_INIT_SCALE: f64 = 0.1;

/// Initial AFB gate logit: the frequency branch starts nearly closed
/// (sigmoid(−3) ≈ 0.05) instead of passing half the input.
pub const GATE_INIT_BIAS: f64 = -3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    /// Base channel count `C`.
    pub channels: usize,
    /// Expansion factor λ of the Mamba branch.
    pub expand: usize,
    /// SSM state size `N`.
    pub state: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// CAB squeeze factor γ.
    pub gamma: usize,
    pub dwconv_kernel: usize,
    /// Reduction ratio inside channel attention.
    pub ca_reduction: usize,
    /// When false the selective scan is replaced by the identity.
    #[serde(default = "default_true")]
    pub ssm_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            channels: 48,
            expand: 2,
            state: 16,
            alpha1: 0.5,
            alpha2: 0.5,
            gamma: 3,
            dwconv_kernel: 3,
            ca_reduction: 4,
            ssm_enabled: true,
        }
    }
}

impl BlockConfig {
    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }

    /// Rank of the Δ projection, `⌈C/16⌉`.
    pub fn dt_rank(&self) -> usize {
        self.channels.div_ceil(16)
    }

    /// CAB hidden width `⌈C/γ⌉`.
    pub fn cab_hidden(&self) -> usize {
        self.channels.div_ceil(self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::Usage(format!("block config `{field}`: {detail}")));
        if self.channels == 0 || self.expand == 0 || self.state == 0 {
            return bad("channels/expand/state", "must be positive".into());
        }
        if self.gamma == 0 || self.ca_reduction == 0 {
            return bad("gamma/ca_reduction", "must be positive".into());
        }
        if self.dwconv_kernel % 2 == 0 {
            return bad("dwconv_kernel", format!("must be odd, got {}", self.dwconv_kernel));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(name, format!("must lie in [0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// One scan direction: input-dependent Δ, B, C and learned A, D.
pub struct SelectiveSsm<T: Element> {
    pub x_proj: Dense<T>,
    pub dt_proj: Dense<T>,
    /// `A = −exp(a_log)`, `[E, N]`.
    pub a_log: Tensor<T>,
    pub d: Tensor<T>,
    dt_rank: usize,
    state: usize,
}

impl<T: Element> SelectiveSsm<T> {
    pub fn new(init: &Init, cfg: &BlockConfig) -> Self {
        let (e, n, r) = (cfg.inner(), cfg.state, cfg.dt_rank());
        let x_proj = Dense::new(&init.child("x_proj"), e, r + 2 * n, false);
        let dt_init = init.child("dt_proj");
        let mut dt_proj = Dense::new(&dt_init, r, e, true);
        let mut rng = dt_init.rng("bias");
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bias: Vec<T> =
            (0..e).map(|_| T::of(inverse_softplus(rng.random_range(lo..hi).exp().clamp(1e-4, 1e-1)))).collect();
        dt_proj.bias = Some(Tensor::param(&[e], bias).expect("bias length"));
        let a_log = (0..e * n).map(|i| T::of(((i % n) as f64 + 1.0).ln())).collect();
        SelectiveSsm {
            x_proj,
            dt_proj,
            a_log: Tensor::param(&[e, n], a_log).expect("A length"),
            d: init.constant(&[e], 1.0),
            dt_rank: r,
            state: n,
        }
    }

    /// `[S, E, L] -> [S, E, L]`
    pub fn forward(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, n) = (self.dt_rank, self.state);
        let proj = self.x_proj.forward(u)?;
        let delta = self.dt_proj.forward(&proj.narrow(1, 0, r)?)?.softplus();
        let b = proj.narrow(1, r, n)?;
        let c = proj.narrow(1, r + n, n)?;
        let a = self.a_log.exp().neg();
        u.selective_scan(&delta, &a, &b, &c, &self.d)
    }
}

impl<T: Element> Module<T> for SelectiveSsm<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.x_proj.visit(&join(prefix, "x_proj"), out);
        self.dt_proj.visit(&join(prefix, "dt_proj"), out);
        out.push((join(prefix, "a_log"), &mut self.a_log));
        out.push((join(prefix, "d"), &mut self.d));
    }
}

/// The two-branch structure shared by spatial and temporal Mamba:
/// `out(LN(scan(SiLU(dwconv(in_x X)))) ⊙ SiLU(in_z X))`.
pub struct MambaCore<T: Element> {
    pub in_x: Dense<T>,
    pub in_z: Dense<T>,
    pub dwconv: Conv2d<T>,
    pub scans: Vec<SelectiveSsm<T>>,
    pub norm: ChannelNorm<T>,
    pub out: Dense<T>,
    ssm_enabled: bool,
}

impl<T: Element> MambaCore<T> {
    fn new(init: &Init, cfg: &BlockConfig, directions: usize) -> Self {
        let (c, e) = (cfg.channels, cfg.inner());
        MambaCore {
            in_x: Dense::new(&init.child("in_x"), c, e, true),
            in_z: Dense::new(&init.child("in_z"), c, e, true),
            dwconv: Conv2d::new(&init.child("dwconv"), e, e, cfg.dwconv_kernel, 1, e),
            scans: (0..directions).map(|i| SelectiveSsm::new(&init.child(&format!("scan{i}")), cfg)).collect(),
            norm: ChannelNorm::new(&init.child("norm"), e),
            out: Dense::new(&init.child("out"), e, c, true).shrunk(BRANCH_INIT_SCALE),
            ssm_enabled: cfg.ssm_enabled,
        }
    }

    /// Runs the gated branch around `mix`, which maps `[N, E, H, W]` to
    /// the same shape.
    fn forward_with(&self, x: &Tensor<T>, mix: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
        let x1 = self.dwconv.forward(&self.in_x.forward(x)?)?.silu();
        let mixed = if self.ssm_enabled { mix(&x1)? } else { x1 };
        let z = self.in_z.forward(x)?.silu();
        self.out.forward(&self.norm.forward(&mixed)?.mul(&z)?)
    }
}

impl<T: Element> Module<T> for MambaCore<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.in_x.visit(&join(prefix, "in_x"), out);
        self.in_z.visit(&join(prefix, "in_z"), out);
        self.dwconv.visit(&join(prefix, "dwconv"), out);
        for (i, s) in self.scans.iter_mut().enumerate() {
            s.visit(&join(prefix, &format!("scan{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
        self.out.visit(&join(prefix, "out"), out);
    }
}

/// Spatial Mamba: the selective scan runs along the four 2-D orders and
/// the unflattened results are summed.
pub struct SpatialMamba<T: Element>(pub MambaCore<T>);

impl<T: Element> SpatialMamba<T> {
    pub fn new(init: &Init, cfg: &BlockConfig) -> Self {
        SpatialMamba(MambaCore::new(init, cfg, 4))
    }

    /// `[N, C, H, W] -> [N, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward_with(x, |x1| {
            let &[_, _, h, w] = x1.shape() else { unreachable!("conv output is rank 4") };
            let layouts = ScanLayout::spatial_all(h, w);
            let seqs = self
                .0
                .scans
                .iter()
                .zip(1u8..)
                .map(|(scan, d)| scan.forward(&scan2d_flatten(x1, d)?))
                .collect::<Result<Vec<_>>>()?;
            scan2d_merge(&seqs, &layouts)
        })
    }
}

impl<T: Element> Module<T> for SpatialMamba<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.0.visit(prefix, out);
    }
}

/// Temporal Mamba: forward and backward scans over each site's frame
/// trajectory, summed.
pub struct TemporalMamba<T: Element>(pub MambaCore<T>);

impl<T: Element> TemporalMamba<T> {
    pub fn new(init: &Init, cfg: &BlockConfig) -> Self {
        TemporalMamba(MambaCore::new(init, cfg, 2))
    }

    /// `[B, T, C, H, W] -> [B, T, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, c, h, w) = dims5(x)?;
        let frames = x.reshape(&[b * t, c, h, w])?;
        let y = self.0.forward_with(&frames, |x1| {
            let e = x1.shape()[1];
            let x5 = x1.reshape(&[b, t, e, h, w])?;
            let mut acc: Option<Tensor<T>> = None;
            for (scan, dir) in self.0.scans.iter().zip([TemporalDirection::Forward, TemporalDirection::Backward]) {
                let y = scan.forward(&temporal_flatten(&x5, dir)?)?;
                let y = temporal_unflatten(&y, dir, b, h, w)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => a.add(&y)?,
                });
            }
            acc.expect("two directions").reshape(&[b * t, e, h, w])
        })?;
        y.reshape(&[b, t, c, h, w])
    }
}

impl<T: Element> Module<T> for TemporalMamba<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.0.visit(prefix, out);
    }
}

pub(crate) fn dims5<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    match *x.shape() {
        [b, t, c, h, w] => Ok((b, t, c, h, w)),
        _ => Err(crate::error::dim_err!("expected [B, T, C, H, W], got {:?}", x.shape())),
    }
}

/// Adaptive frequency block: a learned gate in `(0, 1)` on every real-FFT
/// bin and channel, computed from the spectrum itself.
pub struct Afb<T: Element> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
    pub c3: Conv2d<T>,
}

impl<T: Element> Afb<T> {
    pub fn new(init: &Init, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Afb {
            c1: Conv2d::new(&init.child("c1"), 2 * c, 2 * c, 1, 1, 1),
            c2: Conv2d::new(&init.child("c2"), 2 * c, 2 * c, 3, 1, 1),
            c3: Conv2d {
                bias: Some(init.constant(&[c], GATE_INIT_BIAS)),
                ..Conv2d::new(&init.child("c3"), 2 * c, c, 1, 1, 1)
            },
        }
    }

    /// The compressor: stacked real/imaginary planes to a sigmoid gate
    /// `[N, C, H, W/2+1]`. The spectrum is scaled by `1/√(HW)` so the
    /// gate sees unit-scale inputs at any resolution.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = x.rfft2()?;
        self.gate_of(spec.packed(), x.shape()[2] * x.shape()[3])
    }

    fn gate_of(&self, packed: &Tensor<T>, pixels: usize) -> Result<Tensor<T>> {
        let s = packed.scale(1.0 / (pixels as f64).sqrt());
        let h = self.c1.forward(&s)?.gelu();
        let h = self.c2.forward(&h)?.gelu();
        Ok(self.c3.forward(&h)?.sigmoid())
    }

    /// `[N, C, H, W] -> [N, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[_, _, h, w] = x.shape() else {
            return Err(crate::error::dim_err!("AFB input must be [N, C, H, W], got {:?}", x.shape()));
        };
        let spec = x.rfft2()?;
        let gate = self.gate_of(spec.packed(), h * w)?;
        spec.scale(&gate)?.irfft2(h, w)
    }
}

/// Multiplies every bin of `x`'s spectrum by `gate` and transforms back;
/// the gate scales real and imaginary parts alike, preserving phase.
pub fn apply_frequency_gate<T: Element>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, _, h, w] = x.shape() else {
        return Err(crate::error::dim_err!("input must be [N, C, H, W], got {:?}", x.shape()));
    };
    x.rfft2()?.scale(gate)?.irfft2(h, w)
}

impl<T: Element> Module<T> for Afb<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.c1.visit(&join(prefix, "c1"), out);
        self.c2.visit(&join(prefix, "c2"), out);
        self.c3.visit(&join(prefix, "c3"), out);
    }
}

/// Channel attention block: squeeze/expand convolutions followed by a
/// pooled channel gate.
pub struct Cab<T: Element> {
    pub squeeze: Conv2d<T>,
    pub expand: Conv2d<T>,
    pub ca_reduce: Dense<T>,
    pub ca_expand: Dense<T>,
}

impl<T: Element> Cab<T> {
    pub fn new(init: &Init, cfg: &BlockConfig) -> Self {
        let (c, hidden) = (cfg.channels, cfg.cab_hidden());
        let reduced = c.div_ceil(cfg.ca_reduction);
        Cab {
            squeeze: Conv2d::new(&init.child("squeeze"), c, hidden, 3, 1, 1),
            expand: Conv2d::new(&init.child("expand"), hidden, c, 3, 1, 1).shrunk(BRANCH_INIT_SCALE),
            ca_reduce: Dense::new(&init.child("ca_reduce"), c, reduced, true),
            ca_expand: Dense::new(&init.child("ca_expand"), reduced, c, true),
        }
    }

    /// Channel gate for features `f`: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn attention(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = f.mean_from(2)?;
        let hidden = self.ca_reduce.forward(&pooled)?.gelu();
        Ok(self.ca_expand.forward(&hidden)?.sigmoid())
    }

    /// `[N, C, H, W] -> [N, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.expand.forward(&self.squeeze.forward(x)?.gelu())?;
        f.mul(&self.attention(&f)?)
    }
}

impl<T: Element> Module<T> for Cab<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.squeeze.visit(&join(prefix, "squeeze"), out);
        self.expand.visit(&join(prefix, "expand"), out);
        self.ca_reduce.visit(&join(prefix, "ca_reduce"), out);
        self.ca_expand.visit(&join(prefix, "ca_expand"), out);
    }
}

/// `X + SpatialMamba(X) + α₁·AFB(X)`, per frame. Without an AFB the
/// block is the α₁ = 0 path.
pub struct Smb<T: Element> {
    pub mamba: SpatialMamba<T>,
    pub afb: Option<Afb<T>>,
    pub alpha1: f64,
}

impl<T: Element> Smb<T> {
    pub fn new(init: &Init, cfg: &BlockConfig, with_afb: bool) -> Self {
        Smb {
            mamba: SpatialMamba::new(&init.child("mamba"), cfg),
            afb: with_afb.then(|| Afb::new(&init.child("afb"), cfg)),
            alpha1: cfg.alpha1,
        }
    }

    /// `[N, C, H, W] -> [N, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.add(&self.mamba.forward(x)?)?;
        if let Some(afb) = &self.afb {
            y = y.add(&afb.forward(x)?.scale(self.alpha1))?;
        }
        Ok(y)
    }
}

impl<T: Element> Module<T> for Smb<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.mamba.visit(&join(prefix, "mamba"), out);
        self.afb.visit(&join(prefix, "afb"), out);
    }
}

/// `X + TemporalMamba(X) + α₂·CAB(X)`, with CAB applied per frame.
pub struct Tmb<T: Element> {
    pub mamba: TemporalMamba<T>,
    pub cab: Option<Cab<T>>,
    pub alpha2: f64,
}

impl<T: Element> Tmb<T> {
    pub fn new(init: &Init, cfg: &BlockConfig, with_cab: bool) -> Self {
        Tmb {
            mamba: TemporalMamba::new(&init.child("mamba"), cfg),
            cab: with_cab.then(|| Cab::new(&init.child("cab"), cfg)),
            alpha2: cfg.alpha2,
        }
    }

    /// `[B, T, C, H, W] -> [B, T, C, H, W]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.add(&self.mamba.forward(x)?)?;
        if let Some(cab) = &self.cab {
            let (b, t, c, h, w) = dims5(x)?;
            let per_frame = cab.forward(&x.reshape(&[b * t, c, h, w])?)?;
            y = y.add(&per_frame.reshape(x.shape())?.scale(self.alpha2))?;
        }
        Ok(y)
    }
}

impl<T: Element> Module<T> for Tmb<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.mamba.visit(&join(prefix, "mamba"), out);
        self.cab.visit(&join(prefix, "cab"), out);
    }
}
