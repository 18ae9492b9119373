//! Scene model: Gaussian surfel sets, cameras and parameter activations.
//!
//! A surfel is a 2D Gaussian living on the tangent plane spanned by two
//! stored tangent vectors. Raw parameters are unconstrained; rendering works
//! on activated values (logistic for opacity, roughness, reflectance and
//! specular weight, exponential for the two scales). The orthonormal frame
//! is recovered from the tangents by Gram-Schmidt and both the activation
//! and the frame construction have exact backward passes.

pub mod init;
pub mod io;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::sh;

pub use init::Aabb;

/// Which of the three radiance fields a set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Diffuse,
    Reflection,
    Transmittance,
}

impl Role {
    /// SH degree used by the set: full degree 3 for the diffuse field,
    /// constant color for the traced fields.
    pub fn sh_degree(self) -> usize {
        match self {
            Role::Diffuse => 3,
            _ => 0,
        }
    }
}

/// One surfel with raw (pre-activation) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatPrimitive {
    pub center: Vector3<f64>,
    pub tan_u: Vector3<f64>,
    pub tan_v: Vector3<f64>,
    /// log of the two tangent-plane standard deviations.
    pub log_scales: [f64; 2],
    pub opacity_logit: f64,
    /// SH coefficients per channel; length 1 or 16 depending on the set role.
    pub sh: Vec<[f64; 3]>,
    pub rough_logit: f64,
    pub f0_logit: [f64; 3],
    pub ks_logit: f64,
}

/// Activated per-surfel values used by the renderer.
#[derive(Debug, Clone, Copy)]
pub struct Activated {
    pub opacity: f64,
    pub scale_u: f64,
    pub scale_v: f64,
    pub rough: f64,
    /// True when the roughness floor clamp is active (gradient is zero).
    pub rough_clamped: bool,
    pub f0: [f64; 3],
    pub ks: f64,
}

pub const ROUGHNESS_FLOOR: f64 = 0.02;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SplatPrimitive {
    pub fn activate(&self) -> Activated {
        let raw_rough = sigmoid(self.rough_logit);
        let rough_clamped = raw_rough < ROUGHNESS_FLOOR;
        Activated {
            opacity: sigmoid(self.opacity_logit),
            scale_u: self.log_scales[0].exp(),
            scale_v: self.log_scales[1].exp(),
            rough: raw_rough.max(ROUGHNESS_FLOOR),
            rough_clamped,
            f0: [
                sigmoid(self.f0_logit[0]),
                sigmoid(self.f0_logit[1]),
                sigmoid(self.f0_logit[2]),
            ],
            ks: sigmoid(self.ks_logit),
        }
    }

    pub fn param_count(&self) -> usize {
        3 + 3 + 3 + 2 + 1 + 1 + 3 + 1 + self.sh.len() * 3
    }
}

/// Orthonormal frame of a surfel plus the forward cache needed to run the
/// Gram-Schmidt construction backwards.
#[derive(Debug, Clone, Copy)]
pub struct SplatFrame {
    pub eu: Vector3<f64>,
    pub ev: Vector3<f64>,
    pub normal: Vector3<f64>,
    len_tu: f64,
    len_w: f64,
    tv_dot_eu: f64,
}

/// Builds the orthonormal frame. Returns `None` for degenerate tangents
/// (zero length or near-parallel, cross-product norm below 1e-8 relative);
/// such surfels are skipped by the renderer.
pub fn splat_frame(tan_u: Vector3<f64>, tan_v: Vector3<f64>) -> Option<SplatFrame> {
    let len_tu = tan_u.norm();
    let len_tv = tan_v.norm();
    if len_tu < 1e-12 || len_tv < 1e-12 {
        return None;
    }
    if tan_u.cross(&tan_v).norm() < 1e-8 * len_tu * len_tv {
        return None;
    }
    let eu = tan_u / len_tu;
    let tv_dot_eu = tan_v.dot(&eu);
    let w = tan_v - eu * tv_dot_eu;
    let len_w = w.norm();
    if len_w < 1e-12 {
        return None;
    }
    let ev = w / len_w;
    let normal = eu.cross(&ev);
    Some(SplatFrame {
        eu,
        ev,
        normal,
        len_tu,
        len_w,
        tv_dot_eu,
    })
}

/// Backward pass of [`splat_frame`]: maps adjoints of (eu, ev, normal) to
/// adjoints of the raw tangents.
pub fn splat_frame_backward(
    frame: &SplatFrame,
    tan_v: Vector3<f64>,
    d_eu: Vector3<f64>,
    d_ev: Vector3<f64>,
    d_normal: Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    // normal = eu x ev
    let mut eu_bar = d_eu + frame.ev.cross(&d_normal);
    let ev_bar = d_ev + d_normal.cross(&frame.eu);
    // ev = w / |w|
    let w_bar = (ev_bar - frame.ev * frame.ev.dot(&ev_bar)) / frame.len_w;
    // w = tv - (tv . eu) eu
    let tv_bar = w_bar - frame.eu * w_bar.dot(&frame.eu);
    eu_bar += -tan_v * w_bar.dot(&frame.eu) - w_bar * frame.tv_dot_eu;
    // eu = tu / |tu|
    let tu_bar = (eu_bar - frame.eu * frame.eu.dot(&eu_bar)) / frame.len_tu;
    (tu_bar, tv_bar)
}

/// A named collection of surfels sharing one role.
#[derive(Debug, Clone)]
pub struct GaussianSet {
    pub role: Role,
    pub prims: Vec<SplatPrimitive>,
}

impl GaussianSet {
    pub fn new(role: Role) -> Self {
        GaussianSet {
            role,
            prims: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }
}

/// The full trainable model: one set per radiance field.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub diffuse: GaussianSet,
    pub reflection: GaussianSet,
    pub transmittance: GaussianSet,
}

impl SceneModel {
    pub fn empty() -> Self {
        SceneModel {
            diffuse: GaussianSet::new(Role::Diffuse),
            reflection: GaussianSet::new(Role::Reflection),
            transmittance: GaussianSet::new(Role::Transmittance),
        }
    }

    pub fn set(&self, role: Role) -> &GaussianSet {
        match role {
            Role::Diffuse => &self.diffuse,
            Role::Reflection => &self.reflection,
            Role::Transmittance => &self.transmittance,
        }
    }

    pub fn set_mut(&mut self, role: Role) -> &mut GaussianSet {
        match role {
            Role::Diffuse => &mut self.diffuse,
            Role::Reflection => &mut self.reflection,
            Role::Transmittance => &mut self.transmittance,
        }
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Points closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

impl Camera {
    /// Validates intrinsics and checks that the rotation is orthonormal.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera resolution must be nonzero"));
        }
        if !(self.fx.is_finite() && self.fy.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::validation("camera focal lengths must be positive"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let eye = Matrix3::identity();
        let err = (gram - eye).abs().max();
        if err > 1e-6 {
            return Err(Error::validation(format!(
                "world_to_camera rotation is not orthonormal (|R^T R - I| = {err:.2e})"
            )));
        }
        Ok(())
    }

    /// Camera center in world space.
    pub fn origin(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }

    /// Projects a world point; `None` when behind the near plane.
    pub fn project(&self, p_world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(p_world);
        if p.z <= NEAR_PLANE {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// World-space unit ray through pixel sample position (u, v).
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }
}

/// A posed dataset: cameras, target images, optional masks and monocular
/// normal maps, seed points and the scene bounding box.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Binary transparent-object masks, one per view (all-zero if absent).
    pub masks: Vec<Image>,
    /// Unit-normal maps from a monocular predictor, per view when available.
    pub mono_normals: Vec<Option<Image>>,
    pub points: Vec<(Vector3<f64>, [f32; 3])>,
    pub bbox: Aabb,
}

impl SceneBundle {
    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }
}

pub fn sh_coeffs_for_role(role: Role) -> usize {
    sh::coeff_count(role.sh_degree())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
        )
    }

    #[test]
    fn frame_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let tu = rand_vec(&mut rng, -2.0, 2.0);
            let tv = rand_vec(&mut rng, -2.0, 2.0);
            let Some(f) = splat_frame(tu, tv) else {
                continue;
            };
            assert!((f.eu.norm() - 1.0).abs() < 1e-12);
            assert!((f.ev.norm() - 1.0).abs() < 1e-12);
            assert!((f.normal.norm() - 1.0).abs() < 1e-12);
            assert!(f.eu.dot(&f.ev).abs() < 1e-12);
            assert!(f.eu.dot(&f.normal).abs() < 1e-12);
            assert!(f.ev.dot(&f.normal).abs() < 1e-12);
            // Handedness: normal agrees with tu x tv direction.
            assert!(f.normal.dot(&tu.cross(&tv)) > 0.0);
        }
    }

    #[test]
    fn degenerate_tangents_are_rejected() {
        let tu = Vector3::new(1.0, 0.0, 0.0);
        assert!(splat_frame(tu, tu * 3.0).is_none());
        assert!(splat_frame(tu, tu * -0.5).is_none());
        assert!(splat_frame(Vector3::zeros(), tu).is_none());
        // Barely non-parallel passes.
        assert!(splat_frame(tu, Vector3::new(1.0, 1e-4, 0.0)).is_some());
    }

    #[test]
    fn frame_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let tu = rand_vec(&mut rng, -1.5, 1.5);
            let tv = rand_vec(&mut rng, -1.5, 1.5);
            let Some(frame) = splat_frame(tu, tv) else {
                continue;
            };
            // Random linear scalarization of all outputs.
            let w_eu = rand_vec(&mut rng, -1.0, 1.0);
            let w_ev = rand_vec(&mut rng, -1.0, 1.0);
            let w_n = rand_vec(&mut rng, -1.0, 1.0);
            let score = |tu: Vector3<f64>, tv: Vector3<f64>| -> f64 {
                let f = splat_frame(tu, tv).unwrap();
                w_eu.dot(&f.eu) + w_ev.dot(&f.ev) + w_n.dot(&f.normal)
            };
            let (d_tu, d_tv) = splat_frame_backward(&frame, tv, w_eu, w_ev, w_n);
            let h = 1e-6;
            for axis in 0..3 {
                let mut tu_p = tu;
                let mut tu_m = tu;
                tu_p[axis] += h;
                tu_m[axis] -= h;
                let fd = (score(tu_p, tv) - score(tu_m, tv)) / (2.0 * h);
                assert!(
                    (fd - d_tu[axis]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "d_tu[{axis}]: fd {fd} vs {x}",
                    x = d_tu[axis]
                );
                let mut tv_p = tv;
                let mut tv_m = tv;
                tv_p[axis] += h;
                tv_m[axis] -= h;
                let fd = (score(tu, tv_p) - score(tu, tv_m)) / (2.0 * h);
                assert!(
                    (fd - d_tv[axis]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "d_tv[{axis}]: fd {fd} vs {x}",
                    x = d_tv[axis]
                );
            }
        }
    }

    #[test]
    fn activation_ranges() {
        let prim = SplatPrimitive {
            center: Vector3::zeros(),
            tan_u: Vector3::x(),
            tan_v: Vector3::y(),
            log_scales: [-1.0, 0.5],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
            rough_logit: -10.0,
            f0_logit: [0.0; 3],
            ks_logit: 20.0,
        };
        let a = prim.activate();
        assert!((a.opacity - 0.5).abs() < 1e-12);
        assert!((a.scale_u - (-1.0f64).exp()).abs() < 1e-15);
        assert!((a.scale_v - 0.5f64.exp()).abs() < 1e-15);
        assert_eq!(a.rough, ROUGHNESS_FLOOR);
        assert!(a.rough_clamped);
        assert!(a.ks > 0.999_999);
    }

    #[test]
    fn camera_ray_and_projection_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A rotated, translated camera.
        let axis = Vector3::new(0.3, -0.8, 0.52).normalize();
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            0.7,
        )
        .into_inner();
        let cam = Camera {
            fx: 120.0,
            fy: 115.0,
            cx: 63.5,
            cy: 47.5,
            width: 128,
            height: 96,
            rotation,
            translation: Vector3::new(0.2, -0.1, 2.0),
        };
        cam.validate().unwrap();
        let origin = cam.origin();
        assert!(cam.to_camera(&origin).norm() < 1e-12);
        for _ in 0..100 {
            let u = rng.gen_range(0.0..128.0);
            let v = rng.gen_range(0.0..96.0);
            let dir = cam.ray_dir(u, v);
            assert!((dir.norm() - 1.0).abs() < 1e-12);
            let t = rng.gen_range(0.5..5.0);
            let p = origin + dir * t;
            let (pu, pv, z) = cam.project(&p).expect("in front of camera");
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
            assert!(z > 0.0);
        }
        // Behind the near plane.
        let behind = origin - cam.ray_dir(64.0, 48.0) * 0.5;
        assert!(cam.project(&behind).is_none());
    }
}
