//! Adam over the surfel parameter structs, with one learning rate per
//! parameter group.

use crate::grads::{PrimGrad, SetGrads};
use crate::scene::GaussianSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Base learning rates. The position rate is relative to the scene extent
/// and decays exponentially; everything else is constant.
#[derive(Debug, Clone, Copy)]
pub struct LearningRates {
    pub position: f64,
    /// Total position-rate decay factor over the whole run.
    pub position_decay: f64,
    pub opacity: f64,
    /// Log-scales and tangent vectors.
    pub scales: f64,
    pub sh: f64,
    /// Roughness, base reflectance and specularity logits.
    pub material: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_decay: 0.01,
            opacity: 0.05,
            scales: 5e-3,
            sh: 2.5e-3,
            material: 5e-3,
        }
    }
}

impl LearningRates {
    /// Rates for one step: position scaled by the scene extent and decayed
    /// along the run fraction `t` in [0, 1].
    pub fn at(&self, scene_scale: f64, t: f64) -> StepRates {
        StepRates {
            position: self.position * scene_scale * self.position_decay.powf(t),
            opacity: self.opacity,
            scales: self.scales,
            sh: self.sh,
            material: self.material,
        }
    }
}

/// Learning rates resolved for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepRates {
    pub position: f64,
    pub opacity: f64,
    pub scales: f64,
    pub sh: f64,
    pub material: f64,
}

/// First and second moments of one surfel, same layout as its gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrimMoments {
    pub m: PrimGrad,
    pub v: PrimGrad,
}

/// Moment buffers for one surfel set. The length must track the set across
/// densify and prune.
#[derive(Debug, Clone, Default)]
pub struct SetMoments {
    pub prims: Vec<PrimMoments>,
}

impl SetMoments {
    pub fn zeros(count: usize) -> Self {
        SetMoments {
            prims: vec![PrimMoments::default(); count],
        }
    }
}

fn step_scalar(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    let mh = *m / c1;
    let vh = *v / c2;
    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
}

/// One bias-corrected Adam step over every surfel of the set. `t` is the
/// 1-based update count.
pub fn adam_update(
    set: &mut GaussianSet,
    grads: &SetGrads,
    moments: &mut SetMoments,
    rates: &StepRates,
    t: u64,
) {
    assert_eq!(set.len(), grads.prims.len(), "gradient shape mismatch");
    assert_eq!(set.len(), moments.prims.len(), "moment shape mismatch");
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for ((prim, g), mo) in set
        .prims
        .iter_mut()
        .zip(grads.prims.iter())
        .zip(moments.prims.iter_mut())
    {
        for k in 0..3 {
            step_scalar(
                &mut prim.center[k],
                g.center[k],
                &mut mo.m.center[k],
                &mut mo.v.center[k],
                rates.position,
                c1,
                c2,
            );
            step_scalar(
                &mut prim.tan_u[k],
                g.tan_u[k],
                &mut mo.m.tan_u[k],
                &mut mo.v.tan_u[k],
                rates.scales,
                c1,
                c2,
            );
            step_scalar(
                &mut prim.tan_v[k],
                g.tan_v[k],
                &mut mo.m.tan_v[k],
                &mut mo.v.tan_v[k],
                rates.scales,
                c1,
                c2,
            );
            step_scalar(
                &mut prim.f0_logit[k],
                g.f0_logit[k],
                &mut mo.m.f0_logit[k],
                &mut mo.v.f0_logit[k],
                rates.material,
                c1,
                c2,
            );
        }
        for k in 0..2 {
            step_scalar(
                &mut prim.log_scales[k],
                g.log_scales[k],
                &mut mo.m.log_scales[k],
                &mut mo.v.log_scales[k],
                rates.scales,
                c1,
                c2,
            );
        }
        step_scalar(
            &mut prim.opacity_logit,
            g.opacity_logit,
            &mut mo.m.opacity_logit,
            &mut mo.v.opacity_logit,
            rates.opacity,
            c1,
            c2,
        );
        for k in 0..prim.sh.len() {
            for c in 0..3 {
                step_scalar(
                    &mut prim.sh[k][c],
                    g.sh[k][c],
                    &mut mo.m.sh[k][c],
                    &mut mo.v.sh[k][c],
                    rates.sh,
                    c1,
                    c2,
                );
            }
        }
        step_scalar(
            &mut prim.rough_logit,
            g.rough_logit,
            &mut mo.m.rough_logit,
            &mut mo.v.rough_logit,
            rates.material,
            c1,
            c2,
        );
        step_scalar(
            &mut prim.ks_logit,
            g.ks_logit,
            &mut mo.m.ks_logit,
            &mut mo.v.ks_logit,
            rates.material,
            c1,
            c2,
        );
    }
}
