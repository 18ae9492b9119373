//! Exact ray / surfel intersection.
//!
//! A surfel is evaluated by intersecting the ray with its tangent plane and
//! measuring the hit offset in units of the two scales. No screen-space
//! approximation is involved, so the same routine serves the rasterizer
//! (pixel rays) and the ray tracer (bounce rays).

use nalgebra::Vector3;

use crate::scene::SplatFrame;

/// Rays closer than this to parallel with the surfel plane miss it.
pub const MIN_PLANE_DOT: f64 = 1e-9;
/// Squared standardized radius beyond which the response is cut (3 sigma).
pub const CUTOFF_R2: f64 = 9.0;

/// One surfel hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatHit {
    /// Distance along the (unit) ray.
    pub t: f64,
    /// Gaussian response in (0, 1].
    pub g: f64,
    /// Standardized tangent-plane offsets of the hit point.
    pub a: f64,
    pub b: f64,
}

/// Intersects a ray with a surfel. Returns `None` for near-parallel rays,
/// hits outside the 3 sigma cutoff, or hits with `t <= t_min`.
#[inline]
pub fn splat_response(
    center: &Vector3<f64>,
    frame: &SplatFrame,
    scale_u: f64,
    scale_v: f64,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_min: f64,
) -> Option<SplatHit> {
    let denom = dir.dot(&frame.normal);
    if denom.abs() < MIN_PLANE_DOT {
        return None;
    }
    let t = (center - origin).dot(&frame.normal) / denom;
    if t <= t_min {
        return None;
    }
    let q = origin + dir * t - center;
    let a = q.dot(&frame.eu) / scale_u;
    let b = q.dot(&frame.ev) / scale_v;
    let r2 = a * a + b * b;
    if r2 > CUTOFF_R2 {
        return None;
    }
    Some(SplatHit {
        t,
        g: (-0.5 * r2).exp(),
        a,
        b,
    })
}

/// Adjoints produced by [`splat_response_backward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ResponseGrad {
    pub d_center: Vector3<f64>,
    pub d_eu: Vector3<f64>,
    pub d_ev: Vector3<f64>,
    pub d_normal: Vector3<f64>,
    pub d_log_su: f64,
    pub d_log_sv: f64,
    pub d_origin: Vector3<f64>,
    pub d_dir: Vector3<f64>,
}

/// Backward pass of [`splat_response`] for adjoints of the response `g` and
/// the hit distance `t`. The hit must come from the same inputs.
pub fn splat_response_backward(
    center: &Vector3<f64>,
    frame: &SplatFrame,
    scale_u: f64,
    scale_v: f64,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    hit: &SplatHit,
    d_g: f64,
    d_t: f64,
) -> ResponseGrad {
    let denom = dir.dot(&frame.normal);
    let q = origin + dir * hit.t - center;

    let a_bar = -hit.a * hit.g * d_g;
    let b_bar = -hit.b * hit.g * d_g;
    let q_bar = frame.eu * (a_bar / scale_u) + frame.ev * (b_bar / scale_v);
    let t_total = d_t + q_bar.dot(dir);
    let tn = t_total / denom;

    ResponseGrad {
        d_center: -q_bar + frame.normal * tn,
        d_eu: q * (a_bar / scale_u),
        d_ev: q * (b_bar / scale_v),
        d_normal: -q * tn,
        d_log_su: -hit.a * a_bar,
        d_log_sv: -hit.b * b_bar,
        d_origin: q_bar - frame.normal * tn,
        d_dir: q_bar * hit.t - frame.normal * (tn * hit.t),
    }
}
