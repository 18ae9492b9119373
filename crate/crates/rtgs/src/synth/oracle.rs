//! Brute-force references for the fast render paths.
//!
//! The compositor here walks every surfel for every ray with no tiles, no
//! BVH and no early termination, re-deriving the blend arithmetic from the
//! front-to-back recurrence. Agreement with the tiled rasterizer and the
//! traced path therefore checks candidate enumeration, ordering and
//! accumulation at the same time. A central-difference engine backs the
//! analytic adjoints.

use nalgebra::Vector3;

use crate::raster::composite::ALPHA_CLIP;
use crate::raster::response::splat_response;
use crate::raster::SortMode;
use crate::scene::{sh_coeffs_for_role, splat_frame, Camera, GaussianSet, NEAR_PLANE};
use crate::sh;
use crate::trace::{TraceConfig, TraceResult, DEPTH_ALPHA_MIN};

/// Blend result of one ray with the ids it consumed, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct RayReference<const C: usize> {
    pub attrs: [f64; C],
    pub alpha: f64,
    pub frags: Vec<u32>,
}

/// Sorts by `(key, id)` and composites front to back without early
/// termination: `a_i = min(o_i g_i, 0.99)`, every attribute premultiplied,
/// total coverage `1 - prod(1 - a_i)`.
pub fn brute_blend<const C: usize>(mut rows: Vec<(u32, f64, f64, [f64; C])>) -> RayReference<C> {
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out = RayReference {
        attrs: [0.0; C],
        alpha: 0.0,
        frags: Vec::with_capacity(rows.len()),
    };
    let mut transmit = 1.0;
    for (id, _, raw_alpha, attrs) in rows {
        let a = raw_alpha.min(ALPHA_CLIP);
        for c in 0..C {
            out.attrs[c] += attrs[c] * a * transmit;
        }
        transmit *= 1.0 - a;
        out.frags.push(id);
    }
    out.alpha = 1.0 - transmit;
    out
}

/// All-surfel reference for one rasterized pixel. Culling is limited to the
/// near-plane rule the renderer shares; everything the footprint or tile
/// binning might drop is kept, so a lost fragment shows up as a mismatch.
pub fn brute_rasterize_pixel(
    cam: &Camera,
    set: &GaussianSet,
    px: usize,
    py: usize,
    sort: SortMode,
    t_min: f64,
) -> RayReference<12> {
    let origin = cam.origin();
    let dir = cam.ray_dir(px as f64, py as f64);
    let basis = sh::basis([dir.x, dir.y, dir.z], sh_coeffs_for_role(set.role));
    let mut rows = Vec::new();
    for (id, prim) in set.prims.iter().enumerate() {
        let Some(frame) = splat_frame(prim.tan_u, prim.tan_v) else {
            continue;
        };
        let depth_key = cam.to_camera(&prim.center).z;
        if depth_key <= NEAR_PLANE {
            continue;
        }
        let act = prim.activate();
        let Some(hit) = splat_response(
            &prim.center,
            &frame,
            act.scale_u,
            act.scale_v,
            &origin,
            &dir,
            t_min,
        ) else {
            continue;
        };
        let (color, _) = sh::eval_color(&prim.sh, &basis);
        let flip = if frame.normal.dot(&dir) > 0.0 { -1.0 } else { 1.0 };
        let n = frame.normal * flip;
        let key = match sort {
            SortMode::CenterDepth => depth_key,
            SortMode::HitDepth => hit.t,
        };
        rows.push((
            id as u32,
            key,
            act.opacity * hit.g,
            [
                color[0], color[1], color[2], hit.t, n.x, n.y, n.z, act.rough, act.f0[0],
                act.f0[1], act.f0[2], act.ks,
            ],
        ));
    }
    brute_blend(rows)
}

/// All-surfel reference for one traced ray, ordered by hit distance.
pub fn brute_trace_ray(
    set: &GaussianSet,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cfg: &TraceConfig,
) -> (TraceResult, RayReference<4>) {
    let basis = sh::basis([dir.x, dir.y, dir.z], sh_coeffs_for_role(set.role));
    let mut rows = Vec::new();
    for (id, prim) in set.prims.iter().enumerate() {
        let Some(frame) = splat_frame(prim.tan_u, prim.tan_v) else {
            continue;
        };
        let act = prim.activate();
        let Some(hit) = splat_response(
            &prim.center,
            &frame,
            act.scale_u,
            act.scale_v,
            origin,
            dir,
            cfg.t_min,
        ) else {
            continue;
        };
        let (color, _) = sh::eval_color(&prim.sh, &basis);
        rows.push((
            id as u32,
            hit.t,
            act.opacity * hit.g,
            [color[0], color[1], color[2], hit.t],
        ));
    }
    let blend = brute_blend(rows);
    let mut res = TraceResult {
        color: [blend.attrs[0], blend.attrs[1], blend.attrs[2]],
        alpha: blend.alpha,
        depth: 0.0,
        depth_valid: false,
    };
    if blend.alpha > DEPTH_ALPHA_MIN {
        res.depth = blend.attrs[3] / blend.alpha;
        res.depth_valid = true;
    }
    (res, blend)
}

/// Central-difference gradient. Parameters whose perturbed evaluations go
/// non-finite are listed in `flagged` and left as NaN in `grad`.
#[derive(Debug, Clone)]
pub struct FdGrad {
    pub grad: Vec<f64>,
    pub flagged: Vec<usize>,
}

pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> FdGrad {
    let mut p = params.to_vec();
    let mut out = FdGrad {
        grad: Vec::with_capacity(params.len()),
        flagged: Vec::new(),
    };
    for i in 0..params.len() {
        let x = params[i];
        p[i] = x + step;
        let fp = f(&p);
        p[i] = x - step;
        let fm = f(&p);
        p[i] = x;
        if fp.is_finite() && fm.is_finite() {
            out.grad.push((fp - fm) / (2.0 * step));
        } else {
            out.grad.push(f64::NAN);
            out.flagged.push(i);
        }
    }
    out
}

/// One analytic-vs-numeric disagreement.
#[derive(Debug, Clone, Copy)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
}

/// Entries where `|analytic - numeric|` exceeds both the absolute floor and
/// the relative tolerance. NaN numeric entries (flagged upstream) are
/// skipped.
pub fn gradient_mismatches(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_floor: f64,
) -> Vec<GradMismatch> {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        if n.is_nan() {
            continue;
        }
        let err = (a - n).abs();
        if err > abs_floor && err > rel_tol * a.abs().max(n.abs()) {
            out.push(GradMismatch {
                index: i,
                analytic: a,
                numeric: n,
                abs_err: err,
            });
        }
    }
    out
}
