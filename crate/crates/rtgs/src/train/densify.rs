//! Interval-driven clone/split/prune of the surfel sets. Moment buffers are
//! edited in lockstep so the optimizer state stays aligned.

use crate::grads::SetGrads;
use crate::scene::init::logit;
use crate::scene::{splat_frame, GaussianSet};
use crate::train::adam::{PrimMoments, SetMoments};

pub const DENSIFY_INTERVAL: usize = 100;
/// Mean position-gradient norm that marks a surfel for densification.
pub const DENSIFY_GRAD_MIN: f64 = 2e-4;
/// Activated opacity below which a surfel is pruned.
pub const PRUNE_OPACITY: f64 = 0.005;
/// Fraction of the run after which densification stops.
pub const DENSIFY_STOP_FRAC: f64 = 0.6;
/// Surfels whose major scale exceeds this fraction of the scene extent
/// split; smaller ones clone.
pub const SPLIT_EXTENT_FRAC: f64 = 0.01;
/// Split children sit at this multiple of the major scale from the parent,
/// along the major axis.
pub const SPLIT_OFFSET: f64 = 0.5;
/// The major scale shrinks by this factor on split, keeping the second
/// moment of the pair equal to the parent's.
pub const SPLIT_SHRINK: f64 = 1.154_700_538_379_251_5; // 2 / sqrt(3)

/// Kernel value of one child at the parent center. The child opacity is
/// raised by this overlap so the pair reproduces the parent's peak alpha.
fn split_center_overlap() -> f64 {
    let r = SPLIT_OFFSET * SPLIT_SHRINK;
    (-r * r / 2.0).exp()
}

/// Position-gradient magnitudes accumulated since the last densify pass.
#[derive(Debug, Clone, Default)]
pub struct GradStats {
    norm_sum: Vec<f64>,
    steps: usize,
}

impl GradStats {
    pub fn reset(&mut self, count: usize) {
        self.norm_sum.clear();
        self.norm_sum.resize(count, 0.0);
        self.steps = 0;
    }

    pub fn accumulate(&mut self, grads: &SetGrads) {
        assert_eq!(self.norm_sum.len(), grads.prims.len(), "stats shape mismatch");
        for (s, g) in self.norm_sum.iter_mut().zip(grads.prims.iter()) {
            *s += g.center_norm();
        }
        self.steps += 1;
    }

    fn mean(&self, i: usize) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

impl DensifyReport {
    pub fn changed(&self) -> bool {
        self.cloned + self.split + self.pruned > 0
    }
}

/// One densify/prune pass. Prunes transparent surfels, clones small
/// high-gradient ones (the copy starts with zero moments) and splits large
/// ones into a shrunken pair straddling the parent along its major axis.
pub fn densify_prune(
    set: &mut GaussianSet,
    moments: &mut SetMoments,
    stats: &GradStats,
    scene_scale: f64,
) -> DensifyReport {
    assert_eq!(set.len(), moments.prims.len(), "moment shape mismatch");
    assert_eq!(set.len(), stats.norm_sum.len(), "stats shape mismatch");
    let split_above = SPLIT_EXTENT_FRAC * scene_scale;
    let overlap = split_center_overlap();

    let mut report = DensifyReport::default();
    let mut prims = Vec::with_capacity(set.len());
    let mut moms = Vec::with_capacity(set.len());
    for (i, prim) in set.prims.drain(..).enumerate() {
        let act = prim.activate();
        if act.opacity < PRUNE_OPACITY {
            report.pruned += 1;
            continue;
        }
        let hot = stats.mean(i) > DENSIFY_GRAD_MIN;
        let frame = splat_frame(prim.tan_u, prim.tan_v);
        let s_major = act.scale_u.max(act.scale_v);
        if hot && s_major > split_above {
            if let Some(frame) = frame {
                let (axis, slot) = if act.scale_u >= act.scale_v {
                    (frame.eu, 0)
                } else {
                    (frame.ev, 1)
                };
                let child_opacity =
                    ((1.0 - (1.0 - act.opacity).sqrt()) / overlap).clamp(1e-4, 0.999);
                let mut child = prim;
                child.log_scales[slot] -= SPLIT_SHRINK.ln();
                child.opacity_logit = logit(child_opacity);
                let step = axis * (SPLIT_OFFSET * s_major);
                let mut lo = child.clone();
                lo.center -= step;
                child.center += step;
                prims.push(lo);
                prims.push(child);
                moms.push(PrimMoments::default());
                moms.push(PrimMoments::default());
                report.split += 1;
                continue;
            }
        }
        if hot {
            prims.push(prim.clone());
            moms.push(moments.prims[i]);
            prims.push(prim);
            moms.push(PrimMoments::default());
            report.cloned += 1;
        } else {
            prims.push(prim);
            moms.push(moments.prims[i]);
        }
    }
    set.prims = prims;
    moments.prims = moms;
    report
}
