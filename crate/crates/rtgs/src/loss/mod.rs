//! Training objectives.
//!
//! The photometric term mixes mean absolute error with structural
//! dissimilarity. The remaining terms regularize the transparent region:
//! blended specularity is pushed toward the glass target, blended depth is
//! kept in front of the mesh exit, and splat normals are tied to the
//! depth-derived and monocular normals. Every term has a hand-written
//! backward that accumulates into the relevant map adjoints.

pub mod ssim;

use crate::img::{Image, Map};
use crate::raster::depth::{DepthNormals, COVERAGE_MIN};
pub use ssim::{ssim_backward, ssim_forward, SsimForward};

/// Blended specularity the glass region is pulled toward.
pub const SPEC_TARGET: f64 = 0.9;

/// Photometric mix: `L1_WEIGHT * L1 + DSSIM_WEIGHT * (1 - SSIM) / 2`.
pub const L1_WEIGHT: f64 = 0.8;
pub const DSSIM_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub spec: f64,
    pub depth: f64,
    pub normal: f64,
    pub mono: f64,
    pub grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            spec: 0.2,
            depth: 0.2,
            normal: 0.04,
            mono: 0.01,
            grad: 0.01,
        }
    }
}

/// Per-term values of one training view, for the loss log.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub spec: f64,
    pub depth: f64,
    pub normal: f64,
    pub mono: f64,
    pub grad: f64,
    pub total: f64,
}

pub fn loss_l1(render: &Map, target: &Map) -> f64 {
    debug_assert_eq!(render.data.len(), target.data.len());
    let sum: f64 = render
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(r, t)| (r - t).abs())
        .sum();
    sum / render.data.len() as f64
}

pub fn loss_l1_backward(render: &Map, target: &Map, d_loss: f64, d_render: &mut Map) {
    let scale = d_loss / render.data.len() as f64;
    for i in 0..render.data.len() {
        let diff = render.data[i] - target.data[i];
        if diff > 0.0 {
            d_render.data[i] += scale;
        } else if diff < 0.0 {
            d_render.data[i] -= scale;
        }
    }
}

/// Photometric loss; the returned moments feed [`loss_rgb_backward`].
pub fn loss_rgb(render: &Map, target: &Map) -> (f64, SsimForward) {
    let fwd = ssim_forward(render, target);
    let value = L1_WEIGHT * loss_l1(render, target) + DSSIM_WEIGHT * (1.0 - fwd.mean) / 2.0;
    (value, fwd)
}

pub fn loss_rgb_backward(
    fwd: &SsimForward,
    render: &Map,
    target: &Map,
    d_loss: f64,
    d_render: &mut Map,
) {
    loss_l1_backward(render, target, d_loss * L1_WEIGHT, d_render);
    ssim_backward(fwd, render, target, -d_loss * DSSIM_WEIGHT / 2.0, d_render);
}

fn masked_count(mask: &Image) -> usize {
    mask.data.iter().filter(|&&m| m > 0.5).count()
}

/// Hinge pulling the blended specularity up to [`SPEC_TARGET`] inside the
/// glass mask.
pub fn loss_spec(ks: &Map, mask: &Image) -> f64 {
    let np = masked_count(mask);
    if np == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 0..ks.height {
        for x in 0..ks.width {
            if mask.get(x, y, 0) > 0.5 {
                sum += (SPEC_TARGET - ks.get(x, y, 0)).max(0.0);
            }
        }
    }
    sum / np as f64
}

pub fn loss_spec_backward(ks: &Map, mask: &Image, d_loss: f64, d_ks: &mut Map) {
    let np = masked_count(mask);
    if np == 0 {
        return;
    }
    let scale = d_loss / np as f64;
    for y in 0..ks.height {
        for x in 0..ks.width {
            if mask.get(x, y, 0) > 0.5 && ks.get(x, y, 0) < SPEC_TARGET {
                d_ks.add(x, y, 0, -scale);
            }
        }
    }
}

/// Hinge keeping the blended depth of the masked region in front of the
/// mesh exit `D2`; `exit` is per pixel, row major.
pub fn loss_depth(depth: &Map, exit: &[Option<f64>], mask: &Image) -> f64 {
    let mut np = 0usize;
    let mut sum = 0.0;
    for y in 0..depth.height {
        for x in 0..depth.width {
            if mask.get(x, y, 0) <= 0.5 {
                continue;
            }
            let Some(d2) = exit[y * depth.width + x] else {
                continue;
            };
            np += 1;
            sum += (depth.get(x, y, 0) - d2).max(0.0);
        }
    }
    if np == 0 {
        0.0
    } else {
        sum / np as f64
    }
}

pub fn loss_depth_backward(
    depth: &Map,
    exit: &[Option<f64>],
    mask: &Image,
    d_loss: f64,
    d_depth: &mut Map,
) {
    let mut np = 0usize;
    for y in 0..depth.height {
        for x in 0..depth.width {
            if mask.get(x, y, 0) > 0.5 && exit[y * depth.width + x].is_some() {
                np += 1;
            }
        }
    }
    if np == 0 {
        return;
    }
    let scale = d_loss / np as f64;
    for y in 0..depth.height {
        for x in 0..depth.width {
            if mask.get(x, y, 0) <= 0.5 {
                continue;
            }
            let Some(d2) = exit[y * depth.width + x] else {
                continue;
            };
            if depth.get(x, y, 0) > d2 {
                d_depth.add(x, y, 0, scale);
            }
        }
    }
}

/// Cosine agreement between the blended splat normals and the normals
/// differentiated from depth, over covered pixels. Both sides carry
/// gradients.
pub fn loss_normal(normal: &Map, dn: &DepthNormals, alpha: &Map) -> f64 {
    let (w, h) = (normal.width, normal.height);
    let mut np = 0usize;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if alpha.get(x, y, 0) <= COVERAGE_MIN || !dn.valid[y * w + x] {
                continue;
            }
            np += 1;
            let mut dot = 0.0;
            for c in 0..3 {
                dot += normal.get(x, y, c) * dn.normal.get(x, y, c);
            }
            sum += 1.0 - dot;
        }
    }
    if np == 0 {
        0.0
    } else {
        sum / np as f64
    }
}

pub fn loss_normal_backward(
    normal: &Map,
    dn: &DepthNormals,
    alpha: &Map,
    d_loss: f64,
    d_normal: &mut Map,
    d_dn: &mut Map,
) {
    let (w, h) = (normal.width, normal.height);
    let np = (0..w * h)
        .filter(|&i| alpha.data[i] > COVERAGE_MIN && dn.valid[i])
        .count();
    if np == 0 {
        return;
    }
    let scale = -d_loss / np as f64;
    for y in 0..h {
        for x in 0..w {
            if alpha.get(x, y, 0) <= COVERAGE_MIN || !dn.valid[y * w + x] {
                continue;
            }
            for c in 0..3 {
                d_normal.add(x, y, c, scale * dn.normal.get(x, y, c));
                d_dn.add(x, y, c, scale * normal.get(x, y, c));
            }
        }
    }
}

/// Cosine agreement with a fixed monocular normal image over covered
/// pixels.
pub fn loss_mono(normal: &Map, mono: &Image, alpha: &Map) -> f64 {
    let (w, h) = (normal.width, normal.height);
    let mut np = 0usize;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if alpha.get(x, y, 0) <= COVERAGE_MIN {
                continue;
            }
            np += 1;
            let mut dot = 0.0;
            for c in 0..3 {
                dot += normal.get(x, y, c) * mono.get(x, y, c) as f64;
            }
            sum += 1.0 - dot;
        }
    }
    if np == 0 {
        0.0
    } else {
        sum / np as f64
    }
}

pub fn loss_mono_backward(
    normal: &Map,
    mono: &Image,
    alpha: &Map,
    d_loss: f64,
    d_normal: &mut Map,
) {
    let (w, h) = (normal.width, normal.height);
    let np = (0..w * h).filter(|&i| alpha.data[i] > COVERAGE_MIN).count();
    if np == 0 {
        return;
    }
    let scale = -d_loss / np as f64;
    for y in 0..h {
        for x in 0..w {
            if alpha.get(x, y, 0) <= COVERAGE_MIN {
                continue;
            }
            for c in 0..3 {
                d_normal.add(x, y, c, scale * mono.get(x, y, c) as f64);
            }
        }
    }
}

/// Image-gradient agreement: mean absolute difference of the forward
/// differences of render and target. A cheap stand-in for a learned
/// perceptual term; off by default.
pub fn loss_grad(render: &Map, target: &Map) -> f64 {
    let (w, h, ch) = (render.width, render.height, render.channels);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let gr = render.get(x + 1, y, c) - render.get(x, y, c);
                    let gt = target.get(x + 1, y, c) - target.get(x, y, c);
                    sum += (gr - gt).abs();
                    n += 1;
                }
                if y + 1 < h {
                    let gr = render.get(x, y + 1, c) - render.get(x, y, c);
                    let gt = target.get(x, y + 1, c) - target.get(x, y, c);
                    sum += (gr - gt).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn loss_grad_backward(render: &Map, target: &Map, d_loss: f64, d_render: &mut Map) {
    let (w, h, ch) = (render.width, render.height, render.channels);
    let mut n = 0usize;
    for _ in 0..ch {
        n += (w - 1) * h + w * (h - 1);
    }
    if n == 0 {
        return;
    }
    let scale = d_loss / n as f64;
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let diff = (render.get(x + 1, y, c) - render.get(x, y, c))
                        - (target.get(x + 1, y, c) - target.get(x, y, c));
                    let s = scale * diff.signum();
                    if diff != 0.0 {
                        d_render.add(x + 1, y, c, s);
                        d_render.add(x, y, c, -s);
                    }
                }
                if y + 1 < h {
                    let diff = (render.get(x, y + 1, c) - render.get(x, y, c))
                        - (target.get(x, y + 1, c) - target.get(x, y, c));
                    let s = scale * diff.signum();
                    if diff != 0.0 {
                        d_render.add(x, y + 1, c, s);
                        d_render.add(x, y, c, -s);
                    }
                }
            }
        }
    }
}
