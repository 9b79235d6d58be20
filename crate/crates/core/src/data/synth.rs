//! Procedural clean clips, two-grating moiré, and the Bayer sensor model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const GAMMA: f64 = 2.2;

/// sRGB-like display value to linear sensor value.
pub fn linearize(v: f64) -> f64 {
    v.max(0.0).powf(GAMMA)
}

pub fn delinearize(v: f64) -> f64 {
    v.max(0.0).powf(1.0 / GAMMA)
}

#[derive(Clone, Debug)]
struct Rect {
    center: (f64, f64),
    half: (f64, f64),
    angle: f64,
    color: [f64; 3],
    opacity: f64,
}

#[derive(Clone, Debug)]
struct Stroke {
    from: (f64, f64),
    to: (f64, f64),
    width: f64,
    color: [f64; 3],
}

/// A static scene in pixel coordinates that moves rigidly by `velocity`
/// pixels per frame.
#[derive(Clone, Debug)]
pub struct Scene {
    pub velocity: (f64, f64),
    base: [[f64; 3]; 2],
    base_dir: f64,
    rects: Vec<Rect>,
    strokes: Vec<Stroke>,
}

/// Anti-aliased coverage of a signed distance (negative inside).
fn coverage(sd: f64, edge: f64) -> f64 {
    (0.5 - sd / edge).clamp(0.0, 1.0)
}

impl Scene {
    /// Random scene sized for an `h × w` frame.
    pub fn random(seed: u64, h: usize, w: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hf, wf) = (h as f64, w as f64);
        let size = hf.max(wf);
        let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let velocity = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let base = [color(&mut rng), color(&mut rng)];
        let base_dir = rng.random_range(0.0..2.0 * PI);
        let rects = (0..rng.random_range(6..12))
            .map(|_| Rect {
                center: (rng.random_range(-0.1..1.1) * wf, rng.random_range(-0.1..1.1) * hf),
                half: (rng.random_range(0.05..0.3) * size, rng.random_range(0.05..0.3) * size),
                angle: rng.random_range(0.0..PI),
                color: color(&mut rng),
                opacity: rng.random_range(0.6..1.0),
            })
            .collect();
        let strokes = (0..rng.random_range(10..20))
            .map(|_| {
                let from = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
                let len = rng.random_range(0.03..0.1) * size;
                let dir = rng.random_range(0.0..2.0 * PI);
                let ink = if rng.random::<bool>() { rng.random_range(0.0..0.15) } else { rng.random_range(0.85..1.0) };
                Stroke {
                    from,
                    to: (from.0 + len * dir.cos(), from.1 + len * dir.sin()),
                    width: rng.random_range(0.8..1.6),
                    color: [ink; 3],
                }
            })
            .collect();
        Scene { velocity, base, base_dir, rects, strokes }
    }

    fn sample(&self, x: f64, y: f64, size: f64) -> [f64; 3] {
        let s = (0.5 + ((x - size / 2.0) * self.base_dir.cos() + (y - size / 2.0) * self.base_dir.sin()) / size)
            .clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.base[0][k] * (1.0 - s) + self.base[1][k] * s;
        }
        let blend = |c: &mut [f64; 3], color: &[f64; 3], alpha: f64| {
            for k in 0..3 {
                c[k] += alpha * (color[k] - c[k]);
            }
        };
        for r in &self.rects {
            let (dx, dy) = (x - r.center.0, y - r.center.1);
            let (ca, sa) = (r.angle.cos(), r.angle.sin());
            let (u, v) = ((dx * ca + dy * sa).abs() - r.half.0, (-dx * sa + dy * ca).abs() - r.half.1);
            let outside = u.max(0.0).hypot(v.max(0.0));
            let sd = outside + u.max(v).min(0.0);
            let alpha = coverage(sd, 1.0) * r.opacity;
            if alpha > 0.0 {
                blend(&mut c, &r.color, alpha);
            }
        }
        for s in &self.strokes {
            let (vx, vy) = (s.to.0 - s.from.0, s.to.1 - s.from.1);
            let t = (((x - s.from.0) * vx + (y - s.from.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
            let d = (x - s.from.0 - t * vx).hypot(y - s.from.1 - t * vy);
            let alpha = coverage(d - s.width / 2.0, 1.0);
            if alpha > 0.0 {
                blend(&mut c, &s.color, alpha);
            }
        }
        c
    }

    /// `[T, 3, H, W]` frames; frame `t` is shifted by `t · velocity`.
    pub fn render(&self, frames: usize, h: usize, w: usize) -> Tensor<f32> {
        let size = h.max(w) as f64;
        let mut data = vec![0.0f32; frames * 3 * h * w];
        for t in 0..frames {
            let (ox, oy) = (self.velocity.0 * t as f64, self.velocity.1 * t as f64);
            for i in 0..h {
                for j in 0..w {
                    let c = self.sample(j as f64 + 0.5 - ox, i as f64 + 0.5 - oy, size);
                    for k in 0..3 {
                        data[((t * 3 + k) * h + i) * w + j] = c[k].clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        Tensor::from_vec(&[frames, 3, h, w], data).expect("sized above")
    }
}

/// Deterministic clean clip `[T, 3, H, W]` in display values `[0, 1]`.
pub fn render_clean(seed: u64, frames: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    if frames == 0 {
        return Err(Error::Usage("at least one frame is required".into()));
    }
    Ok(Scene::random(seed, h, w).render(frames, h, w))
}

/// Two interfering gratings; their product beats at the sum and
/// difference frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoireParams {
    /// Cycles per pixel, below 0.5.
    pub f1: f64,
    pub f2: f64,
    /// Radians.
    pub theta1: f64,
    pub theta2: f64,
    pub amplitude: f64,
    /// Per-frame phase advance (radians).
    pub phase_drift: f64,
    /// Per-frame orientation change (radians).
    pub orientation_jitter: f64,
    pub phase1: f64,
    pub phase2: f64,
    /// Per-channel gain of the pattern.
    pub gains: [f64; 3],
}

impl MoireParams {
    pub fn sample(rng: &mut impl Rng, amplitude: f64) -> Self {
        let f1 = rng.random_range(0.15..0.35);
        let theta1 = rng.random_range(0.0..PI);
        MoireParams {
            f1,
            f2: f1 * (1.0 + rng.random_range(-0.1..0.1)),
            theta1,
            theta2: theta1 + rng.random_range(-0.1..0.1),
            amplitude,
            phase_drift: rng.random_range(0.2..0.8),
            orientation_jitter: rng.random_range(-0.02..0.02),
            phase1: rng.random_range(0.0..2.0 * PI),
            phase2: rng.random_range(0.0..2.0 * PI),
            gains: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("f1", self.f1), ("f2", self.f2)] {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::Domain(format!("{name} = {f} must lie in (0, 0.5)")));
            }
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Domain(format!("amplitude {} must lie in [0, 1]", self.amplitude)));
        }
        Ok(())
    }

    /// Pattern value before gains at pixel `(i, j)` of frame `t`.
    pub fn field(&self, t: usize, i: usize, j: usize) -> f64 {
        let tf = t as f64;
        let (x, y) = (j as f64, i as f64);
        let wave = |f: f64, theta: f64, phase: f64| {
            let th = theta + self.orientation_jitter * tf;
            (2.0 * PI * f * (x * th.cos() + y * th.sin()) + phase).cos()
        };
        self.amplitude
            * wave(self.f1, self.theta1, self.phase1 + self.phase_drift * tf)
            * wave(self.f2, self.theta2, self.phase2 - self.phase_drift * tf)
    }
}

/// Adds the gained moiré field to each channel and clamps to `[0, 1]`.
pub fn apply_moire(clean: &Tensor<f32>, p: &MoireParams) -> Result<Tensor<f32>> {
    p.validate()?;
    let &[frames, 3, h, w] = clean.shape() else {
        return Err(dim_err!("clip must be [T, 3, H, W], got {:?}", clean.shape()));
    };
    let mut out = clean.to_vec();
    for t in 0..frames {
        for i in 0..h {
            for j in 0..w {
                let m = p.field(t, i, j);
                for k in 0..3 {
                    let v = &mut out[((t * 3 + k) * h + i) * w + j];
                    *v = (f64::from(*v) + p.gains[k] * m).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Tensor::from_vec(clean.shape(), out)
}

/// Colour sampled at `(i, j)` of an RGGB mosaic.
#[inline]
pub fn bayer_channel(i: usize, j: usize) -> usize {
    match (i % 2, j % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// `[T, 3, H, W]` display values to a `[T, H, W]` linear RGGB mosaic.
pub fn mosaic_bayer(scene: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[frames, 3, h, w] = scene.shape() else {
        return Err(dim_err!("scene must be [T, 3, H, W], got {:?}", scene.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("mosaic extents must be even, got {}x{}", h, w));
    }
    let s = scene.data();
    let mut raw = vec![0.0f32; frames * h * w];
    for t in 0..frames {
        for i in 0..h {
            for j in 0..w {
                let k = bayer_channel(i, j);
                raw[(t * h + i) * w + j] = linearize(f64::from(s[((t * 3 + k) * h + i) * w + j])) as f32;
            }
        }
    }
    Tensor::from_vec(&[frames, h, w], raw)
}

/// Bilinear demosaic of one `[H, W]` mosaic to `[3, H, W]` display values.
/// Known samples are kept; missing ones are the weighted mean of the
/// same-colour samples in the 3×3 neighbourhood.
pub fn demosaic_bilinear(mosaic: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
    if mosaic.len() != h * w || h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("mosaic of {} values for {}x{}", mosaic.len(), h, w));
    }
    const K: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let own = bayer_channel(i, j);
            for k in 0..3 {
                let v = if k == own {
                    f64::from(mosaic[i * w + j])
                } else {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (di, row) in K.iter().enumerate() {
                        for (dj, &wt) in row.iter().enumerate() {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let (ii, jj) = (ii as usize, jj as usize);
                            if bayer_channel(ii, jj) == k {
                                num += wt * f64::from(mosaic[ii * w + jj]);
                                den += wt;
                            }
                        }
                    }
                    num / den
                };
                out[(k * h + i) * w + j] = delinearize(v).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}
