//! Conservative screen-space footprints for tile binning.
//!
//! The bound only decides which pixels evaluate a surfel; the response
//! itself is always the exact ray/plane intersection. It must therefore be
//! conservative: every pixel whose ray could pass the 3 sigma cutoff has to
//! land inside the box. The four corners of the 3 sigma tangent
//! parallelogram are projected and their pixel box padded by one pixel; if
//! any corner reaches the near plane the whole image is used instead.

use nalgebra::Vector3;

use crate::scene::{Camera, SplatFrame, NEAR_PLANE};

/// Inclusive pixel bounds plus the rasterizer sort key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    /// Camera-space depth of the surfel center; primary sort key.
    pub depth_key: f64,
}

impl Footprint {
    pub fn intersects_tile(&self, tx0: usize, ty0: usize, tx1: usize, ty1: usize) -> bool {
        self.x0 <= tx1 && self.x1 >= tx0 && self.y0 <= ty1 && self.y1 >= ty0
    }
}

/// Computes the footprint of a surfel. `None` when the center is behind the
/// near plane or the bound misses the image entirely.
pub fn project_splat(
    cam: &Camera,
    center: &Vector3<f64>,
    frame: &SplatFrame,
    scale_u: f64,
    scale_v: f64,
) -> Option<Footprint> {
    let center_cam = cam.to_camera(center);
    if center_cam.z <= NEAR_PLANE {
        return None;
    }
    let du = frame.eu * (3.0 * scale_u);
    let dv = frame.ev * (3.0 * scale_v);
    let corners = [
        center + du + dv,
        center + du - dv,
        center - du + dv,
        center - du - dv,
    ];
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    let mut clipped = false;
    for corner in &corners {
        match cam.project(corner) {
            Some((u, v, _)) => {
                min_u = min_u.min(u);
                max_u = max_u.max(u);
                min_v = min_v.min(v);
                max_v = max_v.max(v);
            }
            None => {
                // A corner pierces the near plane: fall back to the full
                // image rather than risk dropping pixels.
                clipped = true;
                break;
            }
        }
    }
    let (w, h) = (cam.width as i64, cam.height as i64);
    let (x0, x1, y0, y1) = if clipped {
        (0, w - 1, 0, h - 1)
    } else {
        (
            min_u.floor() as i64 - 1,
            max_u.ceil() as i64 + 1,
            min_v.floor() as i64 - 1,
            max_v.ceil() as i64 + 1,
        )
    };
    let x0 = x0.max(0);
    let y0 = y0.max(0);
    let x1 = x1.min(w - 1);
    let y1 = y1.min(h - 1);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Footprint {
        x0: x0 as usize,
        x1: x1 as usize,
        y0: y0 as usize,
        y1: y1 as usize,
        depth_key: center_cam.z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::response::splat_response;
    use crate::scene::splat_frame;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_cam() -> Camera {
        Camera {
            fx: 60.0,
            fy: 60.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[test]
    fn center_behind_near_plane_is_culled() {
        let cam = test_cam();
        let frame = splat_frame(Vector3::x(), Vector3::y()).unwrap();
        assert!(project_splat(&cam, &Vector3::new(0.0, 0.0, -1.0), &frame, 0.1, 0.1).is_none());
        assert!(project_splat(&cam, &Vector3::new(0.0, 0.0, 0.005), &frame, 0.1, 0.1).is_none());
    }

    #[test]
    fn footprint_covers_every_responding_pixel() {
        let cam = test_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let tu = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let tv = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let Some(frame) = splat_frame(tu, tv) else {
                continue;
            };
            let center = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.3..4.0),
            );
            let su = rng.gen_range(0.01..0.5);
            let sv = rng.gen_range(0.01..0.5);
            let fp = project_splat(&cam, &center, &frame, su, sv);
            let origin = cam.origin();
            for py in 0..cam.height {
                for px in 0..cam.width {
                    let dir = cam.ray_dir(px as f64, py as f64);
                    let hit = splat_response(&center, &frame, su, sv, &origin, &dir, NEAR_PLANE);
                    if hit.is_some() {
                        let fp = fp.expect("responding surfel must have a footprint");
                        assert!(
                            px >= fp.x0 && px <= fp.x1 && py >= fp.y0 && py <= fp.y1,
                            "pixel ({px},{py}) outside bound {fp:?}"
                        );
                    }
                }
            }
        }
    }
}
