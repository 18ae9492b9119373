//! Geometry recovered from the blended depth map.
//!
//! Shading points come from marching the pixel ray out to the blended
//! distance; a screen-space normal map is built from forward differences of
//! those positions (the depth-derived normal that the normal-consistency
//! loss compares against). Both operations run backwards into the depth map.

use nalgebra::Vector3;

use crate::img::Map;
use crate::scene::Camera;

/// Pixels with blended opacity at or below this hold no usable geometry.
pub const COVERAGE_MIN: f64 = 1e-2;

/// World positions per pixel plus the primary ray directions.
#[derive(Debug, Clone)]
pub struct PosMap {
    pub pos: Map,
    /// Unit ray direction per pixel (constant, not differentiated).
    pub dirs: Map,
    pub valid: Vec<bool>,
}

/// `pos = origin + depth * dir` wherever coverage exceeds [`COVERAGE_MIN`].
pub fn position_from_depth(cam: &Camera, depth: &Map, alpha: &Map) -> PosMap {
    let (w, h) = (depth.width, depth.height);
    let mut pos = Map::new(w, h, 3);
    let mut dirs = Map::new(w, h, 3);
    let mut valid = vec![false; w * h];
    let origin = cam.origin();
    for y in 0..h {
        for x in 0..w {
            let dir = cam.ray_dir(x as f64, y as f64);
            for c in 0..3 {
                dirs.set(x, y, c, dir[c]);
            }
            if alpha.get(x, y, 0) > COVERAGE_MIN {
                valid[y * w + x] = true;
                let p = origin + dir * depth.get(x, y, 0);
                for c in 0..3 {
                    pos.set(x, y, c, p[c]);
                }
            }
        }
    }
    PosMap { pos, dirs, valid }
}

/// Backward pass of [`position_from_depth`]: adjoint of the position map
/// folded onto the depth map.
pub fn position_from_depth_backward(pm: &PosMap, d_pos: &Map, d_depth: &mut Map) {
    let w = pm.pos.width;
    for y in 0..pm.pos.height {
        for x in 0..w {
            if !pm.valid[y * w + x] {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..3 {
                acc += pm.dirs.get(x, y, c) * d_pos.get(x, y, c);
            }
            d_depth.add(x, y, 0, acc);
        }
    }
}

/// Screen-space normal map from forward differences of the position map.
#[derive(Debug, Clone)]
pub struct DepthNormals {
    pub normal: Map,
    pub valid: Vec<bool>,
    /// Pixel each value was computed at (border pixels copy inward).
    src: Vec<u32>,
    /// Sign applied after normalization to face the camera.
    flip: Vec<f64>,
    /// Interior pixels where the cross product was actually formed.
    computed: Vec<bool>,
}

/// Builds camera-facing unit normals from the position map. Interior pixels
/// use forward differences toward +x and +y; the last row and column copy
/// their inward neighbor. Pixels whose stencil is incomplete are invalid.
pub fn normal_from_depth(pm: &PosMap) -> DepthNormals {
    let (w, h) = (pm.pos.width, pm.pos.height);
    let mut out = DepthNormals {
        normal: Map::new(w, h, 3),
        valid: vec![false; w * h],
        src: (0..w * h).map(|i| i as u32).collect(),
        flip: vec![1.0; w * h],
        computed: vec![false; w * h],
    };
    let at = |m: &Map, x: usize, y: usize| {
        Vector3::new(m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2))
    };
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            if !(pm.valid[i] && pm.valid[i + 1] && pm.valid[i + w]) {
                continue;
            }
            let p = at(&pm.pos, x, y);
            let gx = at(&pm.pos, x + 1, y) - p;
            let gy = at(&pm.pos, x, y + 1) - p;
            let cr = gx.cross(&gy);
            let len = cr.norm();
            if len < 1e-12 {
                continue;
            }
            let mut n = cr / len;
            let dir = at(&pm.dirs, x, y);
            if n.dot(&dir) > 0.0 {
                n = -n;
                out.flip[i] = -1.0;
            }
            for c in 0..3 {
                out.normal.set(x, y, c, n[c]);
            }
            out.valid[i] = true;
            out.computed[i] = true;
        }
    }
    // Copy the last column from its left neighbor, then the last row from
    // above (the corner picks up the doubly-inward value through the chain).
    let copy = |dst_x: usize, dst_y: usize, src_x: usize, src_y: usize, out: &mut DepthNormals| {
        let di = dst_y * w + dst_x;
        let si = src_y * w + src_x;
        if out.valid[si] {
            for c in 0..3 {
                let v = out.normal.get(src_x, src_y, c);
                out.normal.set(dst_x, dst_y, c, v);
            }
            out.valid[di] = true;
            out.src[di] = out.src[si];
        }
    };
    if w >= 2 {
        for y in 0..h {
            copy(w - 1, y, w - 2, y, &mut out);
        }
    }
    if h >= 2 {
        for x in 0..w {
            copy(x, h - 1, x, h - 2, &mut out);
        }
    }
    out
}

/// Backward pass of [`normal_from_depth`]: adjoint of the normal map folded
/// onto the position map. Border adjoints flow to the pixel that produced
/// the copied value.
pub fn normal_from_depth_backward(pm: &PosMap, nd: &DepthNormals, d_normal: &Map, d_pos: &mut Map) {
    let (w, h) = (pm.pos.width, pm.pos.height);
    // Fold copied-pixel adjoints onto their source pixel first.
    let mut folded = vec![Vector3::zeros(); w * h];
    for i in 0..w * h {
        if !nd.valid[i] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let g = Vector3::new(
            d_normal.get(x, y, 0),
            d_normal.get(x, y, 1),
            d_normal.get(x, y, 2),
        );
        folded[nd.src[i] as usize] += g;
    }
    let at = |m: &Map, x: usize, y: usize| {
        Vector3::new(m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2))
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !nd.computed[i] {
                continue;
            }
            let g_n = folded[i] * nd.flip[i];
            if g_n == Vector3::zeros() {
                continue;
            }
            let p = at(&pm.pos, x, y);
            let gx = at(&pm.pos, x + 1, y) - p;
            let gy = at(&pm.pos, x, y + 1) - p;
            let cr = gx.cross(&gy);
            let len = cr.norm();
            let n_hat = cr / len;
            // normalize backward
            let d_cr = (g_n - n_hat * n_hat.dot(&g_n)) / len;
            let d_gx = gy.cross(&d_cr);
            let d_gy = d_cr.cross(&gx);
            for c in 0..3 {
                d_pos.add(x + 1, y, c, d_gx[c]);
                d_pos.add(x, y + 1, c, d_gy[c]);
                d_pos.add(x, y, c, -(d_gx[c] + d_gy[c]));
            }
        }
    }
}
