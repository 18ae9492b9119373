//! Dense per-surfel gradient buffers.
//!
//! Parallel workers accumulate into small per-tile (or per-chunk) buffers
//! which are then folded into these dense buffers sequentially, in a fixed
//! order, so training is bit-identical for any worker count.

use nalgebra::Vector3;

use crate::scene::GaussianSet;
use crate::sh::MAX_COEFFS;

/// Gradient of one surfel with respect to its raw (logit-space) parameters.
#[derive(Debug, Clone, Copy)]
pub struct PrimGrad {
    pub center: Vector3<f64>,
    pub tan_u: Vector3<f64>,
    pub tan_v: Vector3<f64>,
    pub log_scales: [f64; 2],
    pub opacity_logit: f64,
    pub sh: [[f64; 3]; MAX_COEFFS],
    pub rough_logit: f64,
    pub f0_logit: [f64; 3],
    pub ks_logit: f64,
}

impl Default for PrimGrad {
    fn default() -> Self {
        PrimGrad {
            center: Vector3::zeros(),
            tan_u: Vector3::zeros(),
            tan_v: Vector3::zeros(),
            log_scales: [0.0; 2],
            opacity_logit: 0.0,
            sh: [[0.0; 3]; MAX_COEFFS],
            rough_logit: 0.0,
            f0_logit: [0.0; 3],
            ks_logit: 0.0,
        }
    }
}

impl PrimGrad {
    pub fn add_assign(&mut self, other: &PrimGrad) {
        self.center += other.center;
        self.tan_u += other.tan_u;
        self.tan_v += other.tan_v;
        self.log_scales[0] += other.log_scales[0];
        self.log_scales[1] += other.log_scales[1];
        self.opacity_logit += other.opacity_logit;
        for k in 0..MAX_COEFFS {
            for c in 0..3 {
                self.sh[k][c] += other.sh[k][c];
            }
        }
        self.rough_logit += other.rough_logit;
        for c in 0..3 {
            self.f0_logit[c] += other.f0_logit[c];
        }
        self.ks_logit += other.ks_logit;
    }

    /// Euclidean norm of the positional gradient (used by densification).
    pub fn center_norm(&self) -> f64 {
        self.center.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.tan_u.iter().all(|v| v.is_finite())
            && self.tan_v.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.rough_logit.is_finite()
            && self.f0_logit.iter().all(|v| v.is_finite())
            && self.ks_logit.is_finite()
    }
}

/// Gradients for one whole surfel set.
#[derive(Debug, Clone)]
pub struct SetGrads {
    pub prims: Vec<PrimGrad>,
}

impl SetGrads {
    pub fn zeros(count: usize) -> Self {
        SetGrads {
            prims: vec![PrimGrad::default(); count],
        }
    }

    pub fn zeros_like(set: &GaussianSet) -> Self {
        Self::zeros(set.len())
    }

    pub fn add_assign(&mut self, other: &SetGrads) {
        assert_eq!(self.prims.len(), other.prims.len());
        for (a, b) in self.prims.iter_mut().zip(other.prims.iter()) {
            a.add_assign(b);
        }
    }
}

/// Gradients for the whole model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub diffuse: SetGrads,
    pub reflection: SetGrads,
    pub transmittance: SetGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &crate::scene::SceneModel) -> Self {
        ModelGrads {
            diffuse: SetGrads::zeros_like(&model.diffuse),
            reflection: SetGrads::zeros_like(&model.reflection),
            transmittance: SetGrads::zeros_like(&model.transmittance),
        }
    }
}
