//! The clip container: raw mosaic frames, clean frames, JSON metadata.
//!
//! Little-endian layout: magic `MVC1`, version `u32`, `T`, `H`, `W` as
//! `u16`, flags `u8`, the raw plane `T×H×W` and clean plane `T×3×H×W` as
//! `f32`, then a `u32`-prefixed JSON metadata block.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{apply_moire, demosaic_bilinear, mosaic_bayer, render_clean, MoireParams};
use crate::checkpoint::Cursor;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVC1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 2 + 2 + 2 + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub moire: MoireParams,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct VideoClip {
    /// `[T, H, W]` linear RGGB mosaic of the degraded frames.
    pub raw: Tensor<f32>,
    /// `[T, 3, H, W]` clean display frames.
    pub clean: Tensor<f32>,
    pub meta: ClipMeta,
    pub flags: u8,
}

impl VideoClip {
    pub fn new(raw: Tensor<f32>, clean: Tensor<f32>, meta: ClipMeta) -> Result<Self> {
        let &[t, h, w] = raw.shape() else {
            return Err(dim_err!("raw frames must be [T, H, W], got {:?}", raw.shape()));
        };
        if clean.shape() != [t, 3, h, w] {
            return Err(dim_err!("clean frames {:?} do not match raw {:?}", clean.shape(), raw.shape()));
        }
        Ok(VideoClip { raw, clean, meta, flags: 0 })
    }

    pub fn frames(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.raw.shape()[2]
    }

    /// Clean target `[3, H, W]` of the center frame.
    pub fn center_clean(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        let c = self.frames() / 2;
        let plane = 3 * h * w;
        Tensor::from_vec(&[3, h, w], self.clean.data()[c * plane..(c + 1) * plane].to_vec()).expect("sized")
    }

    /// Bilinear demosaic of the center raw frame, the no-learning baseline.
    pub fn center_baseline(&self) -> Result<Tensor<f32>> {
        let (h, w) = (self.height(), self.width());
        let c = self.frames() / 2;
        demosaic_bilinear(&self.raw.data()[c * h * w..(c + 1) * h * w], h, w)
    }

    /// Payload size in bytes for the given metadata length.
    pub fn encoded_len(t: usize, h: usize, w: usize, meta_len: usize) -> usize {
        HEADER_BYTES + 4 * (t * h * w + t * 3 * h * w) + 4 + meta_len
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = [self.frames(), self.height(), self.width()];
        let dims: Vec<u16> = dims
            .iter()
            .map(|&d| u16::try_from(d).map_err(|_| Error::Usage(format!("extent {d} exceeds the clip format"))))
            .collect::<Result<_>>()?;
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(Self::encoded_len(self.frames(), self.height(), self.width(), meta.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.flags);
        for v in self.raw.data().iter().chain(self.clean.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if &cur.array::<4>("magic")? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic, not a clip file".into() });
        }
        let at = cur.offset();
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: at, message: format!("unsupported clip version {version}") });
        }
        let t = cur.u16("T")? as usize;
        let h = cur.u16("H")? as usize;
        let w = cur.u16("W")? as usize;
        let flags = cur.u8("flags")?;
        let raw = cur.f32s(t * h * w, "raw plane")?;
        let clean = cur.f32s(t * 3 * h * w, "clean plane")?;
        let meta_len = cur.u32("metadata length")? as usize;
        let at = cur.offset();
        let meta: ClipMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
            .map_err(|e| Error::Format { offset: at, message: format!("metadata: {e}") })?;
        if cur.remaining() != 0 {
            return cur.fail(format!("{} trailing bytes", cur.remaining()));
        }
        let mut clip =
            VideoClip::new(Tensor::from_vec(&[t, h, w], raw)?, Tensor::from_vec(&[t, 3, h, w], clean)?, meta)?;
        clip.flags = flags;
        Ok(clip)
    }
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::write(path, clip.encode()?)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    VideoClip::decode(&std::fs::read(path)?)
}

/// Renders, degrades and mosaics one clip, all derived from `seed`.
pub fn generate_clip(seed: u64, frames: usize, h: usize, w: usize, amplitude: f64) -> Result<VideoClip> {
    let clean = render_clean(seed, frames, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6972_65);
    let moire = MoireParams::sample(&mut rng, amplitude);
    let raw = mosaic_bayer(&apply_moire(&clean, &moire)?)?;
    VideoClip::new(raw, clean, ClipMeta { moire, seed })
}
