//! Siamese-style augmentation: one transform, sampled per batch, applied to
//! every image in the batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Flip,
    Crop,
    Cutout,
    Rotate,
    Scale,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Flip,
        AugmentOp::Crop,
        AugmentOp::Cutout,
        AugmentOp::Rotate,
        AugmentOp::Scale,
    ];
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentOp::Flip => "flip",
            AugmentOp::Crop => "crop",
            AugmentOp::Cutout => "cutout",
            AugmentOp::Rotate => "rotate",
            AugmentOp::Scale => "scale",
        })
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentOp>,
    /// Probability of mirroring.
    pub flip: f64,
    /// Maximum translation as a fraction of the side.
    pub crop_pad: f64,
    /// Cutout square side as a fraction of the side.
    pub cutout: f64,
    /// Maximum rotation in degrees.
    pub rotate: f64,
    /// Maximum per-axis zoom factor.
    pub scale: f64,
    /// Draw parameters per image instead of per batch.
    pub per_sample: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            flip: 0.5,
            crop_pad: 0.125,
            cutout: 0.5,
            rotate: 15.0,
            scale: 1.2,
            per_sample: false,
        }
    }
}

impl AugmentConfig {
    pub fn with_ops(ops: &[AugmentOp]) -> Self {
        Self {
            ops: ops.to_vec(),
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.ops.is_empty()
    }
}

/// Transform parameters for one draw.
#[derive(Debug, Clone, Copy)]
enum Draw {
    Identity,
    Mirror,
    Shift { dy: isize, dx: isize },
    Cut { y0: usize, x0: usize, side_h: usize, side_w: usize },
    /// Inverse affine map from output to input coordinates about the center.
    Affine { m: [f64; 4] },
}

fn draw(op: AugmentOp, cfg: &AugmentConfig, h: usize, w: usize, rng: &mut Rng) -> Draw {
    match op {
        AugmentOp::Flip => {
            if rng.gen_bool(cfg.flip.clamp(0.0, 1.0)) {
                Draw::Mirror
            } else {
                Draw::Identity
            }
        }
        AugmentOp::Crop => {
            let py = (cfg.crop_pad * h as f64).round() as isize;
            let px = (cfg.crop_pad * w as f64).round() as isize;
            Draw::Shift {
                dy: rng.gen_range(-py..=py),
                dx: rng.gen_range(-px..=px),
            }
        }
        AugmentOp::Cutout => {
            let side_h = ((cfg.cutout * h as f64).round() as usize).min(h);
            let side_w = ((cfg.cutout * w as f64).round() as usize).min(w);
            Draw::Cut {
                y0: rng.gen_range(0..=h - side_h),
                x0: rng.gen_range(0..=w - side_w),
                side_h,
                side_w,
            }
        }
        AugmentOp::Rotate => {
            let theta = rng.gen_range(-cfg.rotate..=cfg.rotate).to_radians();
            let (s, c) = theta.sin_cos();
            Draw::Affine { m: [c, s, -s, c] }
        }
        AugmentOp::Scale => {
            let lo = 1.0 / cfg.scale;
            let sy: f64 = rng.gen_range(lo..=cfg.scale);
            let sx: f64 = rng.gen_range(lo..=cfg.scale);
            Draw::Affine {
                m: [1.0 / sy, 0.0, 0.0, 1.0 / sx],
            }
        }
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

fn apply(d: Draw, src: &[f64], dst: &mut [f64], h: usize, w: usize) {
    match d {
        Draw::Identity => dst.copy_from_slice(src),
        Draw::Mirror => {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
        }
        Draw::Shift { dy, dx } => {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as isize - dy, x as isize - dx);
                    dst[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        Draw::Cut { y0, x0, side_h, side_w } => {
            dst.copy_from_slice(src);
            for y in y0..y0 + side_h {
                dst[y * w + x0..y * w + x0 + side_w].fill(0.0);
            }
        }
        Draw::Affine { m } => {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                    let sy = m[0] * ry + m[1] * rx + cy;
                    let sx = m[2] * ry + m[3] * rx + cx;
                    dst[y * w + x] = bilinear(src, h, w, sy, sx);
                }
            }
        }
    }
}

/// Applies one op, sampled uniformly from `cfg.ops`, to a `[N, C, H, W]`
/// batch. Output values are clamped to the input's range widened to
/// include 0 (the fill value).
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    if batch.ndim() != 4 {
        return Err(Error::invalid(format!(
            "augmentation needs a [N, C, H, W] batch, got {:?}",
            batch.shape()
        )));
    }
    if cfg.ops.is_empty() {
        log::info!("augmentation requested with no enabled ops; batch passed through");
        return Ok(batch.clone());
    }
    let [n, c, h, w] = [batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]];
    let op = cfg.ops[rng.gen_range(0..cfg.ops.len())];
    let plane = h * w;
    let mut out = Tensor::zeros(batch.shape());
    let shared = draw(op, cfg, h, w, rng);
    for s in 0..n {
        let d = if cfg.per_sample && s > 0 { draw(op, cfg, h, w, rng) } else { shared };
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            apply(d, &batch.data()[off..off + plane], &mut out.data_mut()[off..off + plane], h, w);
        }
    }
    let lo = batch.data().iter().copied().fold(0.0, f64::min);
    let hi = batch.data().iter().copied().fold(0.0, f64::max);
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Ok(out)
}
