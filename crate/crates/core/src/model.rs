//! The full raw-to-sRGB restoration network.
//!
//! Each of the `T` Bayer frames is packed to RGGB and passed through one
//! shared stride-2 convolution, giving per-frame features `F₀` at a
//! quarter of the raw resolution. The stacked groups mix them spatially
//! (per frame) and temporally (across frames); `F₀` is added back, the
//! frames are fused by a 1×1 convolution and two conv + pixel-shuffle
//! stages bring the map up to full resolution.

use serde::{Deserialize, Serialize};

use crate::blocks::{dims5, BlockConfig, Smb, Tmb, BRANCH_INIT_SCALE};
use crate::error::{dim_err, Error, Result};
use crate::nn::{copy_params, join, Conv2d, Dense, Init, Module};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoAfb,
    NoCab,
    AllSmb,
    AllTmb,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoAfb, Ablation::NoCab, Ablation::AllSmb, Ablation::AllTmb];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAfb => "no_afb",
            Ablation::NoCab => "no_cab",
            Ablation::AllSmb => "all_smb",
            Ablation::AllTmb => "all_tmb",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of FASTMG groups.
    pub groups: usize,
    /// SMB and TMB count per group (`M`).
    pub blocks_per_group: usize,
    /// Frames per clip (`T`), odd.
    pub frames: usize,
    pub block: BlockConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            groups: 4,
            blocks_per_group: 4,
            frames: 3,
            block: BlockConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.block.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.blocks_per_group == 0 {
            return Err(Error::Usage("groups and blocks_per_group must be at least 1".into()));
        }
        if self.frames % 2 == 0 {
            return Err(Error::Usage(format!("frame count must be odd, got {}", self.frames)));
        }
        self.block.validate()
    }

    /// Field-by-field comparison; the error names the first difference.
    pub fn ensure_matches(&self, other: &ModelConfig) -> Result<()> {
        let a = serde_json::to_value(self)?;
        let b = serde_json::to_value(other)?;
        if let Some((field, detail)) = first_difference("", &a, &b) {
            return Err(Error::ConfigMismatch { field, detail });
        }
        Ok(())
    }
}

fn first_difference(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<(String, String)> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = join(path, k);
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(&p, va, vb) {
                            return Some(d);
                        }
                    }
                    None => return Some((p, "missing".into())),
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| (join(path, k), "unexpected".into()))
        }
        _ if a == b => None,
        _ => Some((path.to_string(), format!("{a} vs {b}"))),
    }
}

/// `[H, W]` Bayer mosaic to `[4, H/2, W/2]` in R, G(row 0), G(row 1), B order.
pub fn pack_rggb<T: Element>(bayer: &Tensor<T>) -> Result<Tensor<T>> {
    let &[h, w] = bayer.shape() else {
        return Err(dim_err!("Bayer mosaic must be [H, W], got {:?}", bayer.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("Bayer mosaic extents must be even, got {}x{}", h, w));
    }
    bayer.reshape(&[1, 1, h, w])?.pixel_unshuffle(2)?.reshape(&[4, h / 2, w / 2])
}

/// Inverse of [`pack_rggb`].
pub fn unpack_rggb<T: Element>(packed: &Tensor<T>) -> Result<Tensor<T>> {
    let &[4, h, w] = packed.shape() else {
        return Err(dim_err!("packed planes must be [4, H, W], got {:?}", packed.shape()));
    };
    packed.reshape(&[1, 4, h, w])?.pixel_shuffle(2)?.reshape(&[2 * h, 2 * w])
}

pub enum Stage<T: Element> {
    Spatial(Smb<T>),
    Temporal(Tmb<T>),
}

/// M (SMB, TMB) pairs, a 3×3 convolution, and a group residual.
pub struct Fastmg<T: Element> {
    pub stages: Vec<Stage<T>>,
    pub conv: Conv2d<T>,
}

impl<T: Element> Fastmg<T> {
    pub fn new(init: &Init, cfg: &ModelConfig) -> Self {
        let b = &cfg.block;
        let with_afb = cfg.ablation != Ablation::NoAfb;
        let with_cab = cfg.ablation != Ablation::NoCab;
        let stages = (0..2 * cfg.blocks_per_group)
            .map(|i| {
                let spatial = match cfg.ablation {
                    Ablation::AllSmb => true,
                    Ablation::AllTmb => false,
                    _ => i % 2 == 0,
                };
                let si = init.child(&format!("stages.{i}"));
                if spatial {
                    Stage::Spatial(Smb::new(&si.child("smb"), b, with_afb))
                } else {
                    Stage::Temporal(Tmb::new(&si.child("tmb"), b, with_cab))
                }
            })
            .collect();
        let conv = Conv2d::new(&init.child("conv"), b.channels, b.channels, 3, 1, 1).shrunk(BRANCH_INIT_SCALE);
        Fastmg { stages, conv }
    }

    /// `[B, T, C, h, w] -> [B, T, C, h, w]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, c, h, w) = dims5(x)?;
        let mut y = x.clone();
        for stage in &self.stages {
            y = match stage {
                Stage::Spatial(smb) => smb.forward(&y.reshape(&[b * t, c, h, w])?)?.reshape(x.shape())?,
                Stage::Temporal(tmb) => tmb.forward(&y)?,
            };
        }
        let y = self.conv.forward(&y.reshape(&[b * t, c, h, w])?)?;
        y.reshape(x.shape())?.add(x)
    }
}

impl<T: Element> Module<T> for Fastmg<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            match stage {
                Stage::Spatial(s) => s.visit(&join(&p, "smb"), out),
                Stage::Temporal(t) => t.visit(&join(&p, "tmb"), out),
            }
        }
        self.conv.visit(&join(prefix, "conv"), out);
    }
}

pub struct Model<T: Element> {
    config: ModelConfig,
    pub shallow: Conv2d<T>,
    pub groups: Vec<Fastmg<T>>,
    pub fuse: Dense<T>,
    pub recon_up: Conv2d<T>,
    pub recon_out: Conv2d<T>,
}

impl<T: Element> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let c = config.channels();
        Ok(Model {
            config: config.clone(),
            shallow: Conv2d::new(&init.child("shallow"), 4, c, 3, 2, 1),
            groups: (0..config.groups).map(|g| Fastmg::new(&init.child(&format!("groups.{g}")), config)).collect(),
            fuse: Dense::new(&init.child("fuse"), config.frames * c, c, true),
            recon_up: Conv2d::new(&init.child("recon_up"), c, 4 * c, 3, 1, 1),
            recon_out: Conv2d::new(&init.child("recon_out"), c, 12, 3, 1, 1),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&mut self) -> Result<Model<U>> {
        let mut other = Model::<U>::new(&self.config, 0)?;
        copy_params(self, &mut other)?;
        Ok(other)
    }

    /// `[B, T, H, W]` raw frames to `[B, T, C, H/4, W/4]` shallow features.
    pub fn shallow_extract(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, t, h, w] = raw.shape() else {
            return Err(dim_err!("raw input must be [B, T, H, W], got {:?}", raw.shape()));
        };
        if t != self.config.frames {
            return Err(dim_err!("model expects {} frames, got {}", self.config.frames, t));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(dim_err!("raw extents must be positive multiples of 4, got {}x{}", h, w));
        }
        let packed = raw.reshape(&[b * t, 1, h, w])?.pixel_unshuffle(2)?;
        let f0 = self.shallow.forward(&packed)?;
        f0.reshape(&[b, t, self.config.channels(), h / 4, w / 4])
    }

    /// Groups plus the global residual: `[B, T, C, h, w]`.
    pub fn deep_features(&self, f0: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = f0.clone();
        for g in &self.groups {
            x = g.forward(&x)?;
        }
        x.add(f0)
    }

    /// Frame fusion and ×4 sub-pixel reconstruction: `[B, 3, 4h, 4w]`.
    pub fn reconstruct(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, c, h, w) = dims5(features)?;
        let fused = self.fuse.forward(&features.reshape(&[b, t * c, h, w])?)?;
        let up = self.recon_up.forward(&fused)?.pixel_shuffle(2)?.silu();
        self.recon_out.forward(&up)?.pixel_shuffle(2)
    }

    /// `[B, T, H, W]` raw Bayer frames to `[B, 3, H, W]` sRGB, unclamped.
    pub fn forward(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let f0 = self.shallow_extract(raw)?;
        self.reconstruct(&self.deep_features(&f0)?)
    }

    /// `(top-level module, parameter count)` in visiting order.
    pub fn param_breakdown(&mut self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, p) in self.named_params() {
            let top = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["groups", g, ..] => format!("groups.{g}"),
                [first, ..] => first.to_string(),
                [] => String::new(),
            };
            match out.last_mut() {
                Some((n, count)) if *n == top => *count += p.numel(),
                _ => out.push((top, p.numel())),
            }
        }
        out
    }

    /// Replaces every parameter with the same-named entry, checking shapes.
    pub fn load_params(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let params = self.named_params();
        if params.len() != entries.len() {
            return Err(Error::ConfigMismatch {
                field: "parameters".into(),
                detail: format!("checkpoint has {} tensors, model has {}", entries.len(), params.len()),
            });
        }
        for ((name, p), (entry_name, value)) in params.into_iter().zip(entries) {
            if &name != entry_name || p.shape() != value.shape() {
                return Err(Error::ConfigMismatch {
                    field: name,
                    detail: format!("checkpoint has {entry_name} {:?}, model expects {:?}", value.shape(), p.shape()),
                });
            }
            *p = value.cast::<T>().requires_grad_(true);
        }
        Ok(())
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.shallow.visit(&join(prefix, "shallow"), out);
        for (g, group) in self.groups.iter_mut().enumerate() {
            group.visit(&join(prefix, &format!("groups.{g}")), out);
        }
        self.fuse.visit(&join(prefix, "fuse"), out);
        self.recon_up.visit(&join(prefix, "recon_up"), out);
        self.recon_out.visit(&join(prefix, "recon_out"), out);
    }
}

/// Exact number of learnable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::new(config, 0)?.param_count())
}
