//! Analytic ground-truth scenes and a small reference renderer.
//!
//! Surfaces have closed-form intersections and are shaded through the same
//! [`crate::bsdf`] routines the trainable pipeline uses: one mirror bounce
//! supplies the reflection color, one straight-through segment past
//! transparent surfaces supplies the transmission color, and rays that
//! escape return a constant environment radiance. Rendered views therefore
//! sit exactly inside the family of images the splat model can represent.

pub mod oracle;

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bsdf;
use crate::error::{Error, Result};
use crate::img::{self, Image};
use crate::scene::io::{save_manifest, save_points_ply, CameraJson, SceneJson};
use crate::scene::{Aabb, Camera};
use crate::threading;

/// Glass-box thickness used by the `slab` and `combo` presets.
pub const SLAB_THICKNESS: f64 = 0.2;

/// Start offset for secondary rays so a bounce never re-hits its own surface.
const SECONDARY_T_MIN: f64 = 1e-6;

/// Base color of a surface, looked up in its in-plane coordinates.
#[derive(Debug, Clone, Copy)]
pub enum Albedo {
    Flat([f64; 3]),
    /// Two-tone square tiling with edge length `tile` in world units.
    Checker { a: [f64; 3], b: [f64; 3], tile: f64 },
}

impl Albedo {
    fn at(&self, uv: (f64, f64)) -> [f64; 3] {
        match *self {
            Albedo::Flat(c) => c,
            Albedo::Checker { a, b, tile } => {
                let parity = (uv.0 / tile).floor() + (uv.1 / tile).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Shading parameters of one surface; `rough` feeds the same roughness
/// remap as the renderer so ground truth stays representable.
#[derive(Debug, Clone, Copy)]
pub struct Material {
    pub albedo: Albedo,
    pub rough: f64,
    pub f0: [f64; 3],
    pub ks: f64,
    pub transparent: bool,
}

impl Material {
    pub fn diffuse(albedo: Albedo) -> Material {
        Material {
            albedo,
            rough: 0.5,
            f0: [0.04; 3],
            ks: 0.0,
            transparent: false,
        }
    }
}

/// Closed-form geometry. Quads are double sided; boxes are axis aligned.
#[derive(Debug, Clone, Copy)]
pub enum Shape {
    /// Finite rectangle spanning `center +- edge_u +- edge_v`.
    Quad {
        center: Vector3<f64>,
        edge_u: Vector3<f64>,
        edge_v: Vector3<f64>,
    },
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Surface {
    pub shape: Shape,
    pub material: Material,
    /// GGX roughness after the remap, cached at construction.
    alpha_eff: f64,
}

/// Intersection record; the normal is flipped to face the ray origin.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// In-plane world coordinates for the checker lookup.
    pub uv: (f64, f64),
    pub surface: usize,
}

/// Camera orbit used when generating datasets from this scene.
#[derive(Debug, Clone, Copy)]
pub struct OrbitPath {
    pub target: Vector3<f64>,
    pub radius: f64,
    /// Elevation above the horizontal plane, radians.
    pub elevation: f64,
}

/// A fully analytic scene: surfaces plus a constant environment emitter
/// returned by rays that hit nothing.
#[derive(Debug, Clone)]
pub struct AnalyticScene {
    pub surfaces: Vec<Surface>,
    pub env: [f64; 3],
    pub orbit: OrbitPath,
}

fn quad_hit(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_min: f64,
    center: &Vector3<f64>,
    edge_u: &Vector3<f64>,
    edge_v: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>, (f64, f64))> {
    let n = edge_u.cross(edge_v);
    let denom = dir.dot(&n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (center - origin).dot(&n) / denom;
    if t <= t_min {
        return None;
    }
    let rel = origin + dir * t - center;
    let (lu, lv) = (edge_u.norm(), edge_v.norm());
    let u = rel.dot(edge_u) / lu;
    let v = rel.dot(edge_v) / lv;
    if u.abs() > lu || v.abs() > lv {
        return None;
    }
    Some((t, n.normalize(), (u, v)))
}

fn box_hit(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_min: f64,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>, (f64, f64))> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0;
    let mut exit_axis = 0;
    for axis in 0..3 {
        let inv = 1.0 / dir[axis];
        let (a, b) = ((min[axis] - origin[axis]) * inv, (max[axis] - origin[axis]) * inv);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t_enter {
            t_enter = near;
            enter_axis = axis;
        }
        if far < t_exit {
            t_exit = far;
            exit_axis = axis;
        }
        if t_enter > t_exit {
            return None;
        }
    }
    // Entry face if reachable, otherwise the exit face for rays starting
    // inside (transmission segments do this).
    let (t, axis) = if t_enter > t_min {
        (t_enter, enter_axis)
    } else if t_exit > t_min {
        (t_exit, exit_axis)
    } else {
        return None;
    };
    if !t.is_finite() {
        return None;
    }
    let p = origin + dir * t;
    let mut normal = Vector3::zeros();
    normal[axis] = 1.0;
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    Some((t, normal, (p[ua], p[va])))
}

fn sphere_hit(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_min: f64,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<(f64, Vector3<f64>, (f64, f64))> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let t = if -b - root > t_min {
        -b - root
    } else if -b + root > t_min {
        -b + root
    } else {
        return None;
    };
    let normal = (origin + dir * t - center) / radius;
    Some((t, normal, (0.0, 0.0)))
}

impl AnalyticScene {
    /// Validates materials and caches the remapped roughness per surface.
    pub fn new(
        surfaces: Vec<(Shape, Material)>,
        env: [f64; 3],
        orbit: OrbitPath,
    ) -> Result<AnalyticScene> {
        let mut out = Vec::with_capacity(surfaces.len());
        for (shape, material) in surfaces {
            let m = &material;
            if !(0.0..=1.0).contains(&m.ks) || m.f0.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(Error::validation("surface ks and f0 must lie in [0, 1]"));
            }
            let alpha_eff = bsdf::roughness_remap(m.rough)?;
            out.push(Surface {
                shape,
                material,
                alpha_eff,
            });
        }
        Ok(AnalyticScene {
            surfaces: out,
            env,
            orbit,
        })
    }

    /// Nearest intersection past `t_min`; ties go to the lower surface index.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<SurfaceHit> {
        self.intersect_filtered(origin, dir, t_min, false)
    }

    /// Nearest non-transparent intersection: the straight-through segment
    /// used for the ground-truth transmission color.
    pub fn first_opaque(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<SurfaceHit> {
        self.intersect_filtered(origin, dir, t_min, true)
    }

    fn intersect_filtered(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        skip_transparent: bool,
    ) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (i, surf) in self.surfaces.iter().enumerate() {
            if skip_transparent && surf.material.transparent {
                continue;
            }
            let hit = match surf.shape {
                Shape::Quad {
                    center,
                    edge_u,
                    edge_v,
                } => quad_hit(origin, dir, t_min, &center, &edge_u, &edge_v),
                Shape::Box { min, max } => box_hit(origin, dir, t_min, &min, &max),
                Shape::Sphere { center, radius } => sphere_hit(origin, dir, t_min, &center, radius),
            };
            if let Some((t, mut normal, uv)) = hit {
                if best.as_ref().map(|b| t < b.t).unwrap_or(true) {
                    if normal.dot(dir) > 0.0 {
                        normal = -normal;
                    }
                    best = Some(SurfaceHit {
                        t,
                        point: origin + dir * t,
                        normal,
                        uv,
                        surface: i,
                    });
                }
            }
        }
        best
    }

    pub fn albedo(&self, hit: &SurfaceHit) -> [f64; 3] {
        self.surfaces[hit.surface].material.albedo.at(hit.uv)
    }

    /// Composition at one shading point from already-gathered radiances,
    /// through the shared microfacet routines.
    pub fn surface_color(
        material: &Material,
        alpha_eff: f64,
        cos_o: f64,
        cd: [f64; 3],
        cr: [f64; 3],
        ct: [f64; 3],
    ) -> [f64; 3] {
        let wr = bsdf::brdf_weight(cos_o, alpha_eff, material.f0).value;
        let wt = bsdf::btdf_weight(cos_o, material.f0, material.transparent).value;
        bsdf::compose_final(cd, material.ks, wr, cr, wt, ct)
    }

    /// Ground-truth radiance along one ray.
    pub fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        let Some(hit) = self.intersect(origin, dir, SECONDARY_T_MIN) else {
            return self.env;
        };
        let surf = &self.surfaces[hit.surface];
        let cd = self.albedo(&hit);
        if surf.material.ks == 0.0 {
            return cd;
        }
        let cos_o = (-dir).dot(&hit.normal);
        let rdir = crate::trace::reflect_dir(&hit.normal, &-dir);
        let cr = match self.intersect(&hit.point, &rdir, SECONDARY_T_MIN) {
            Some(h) => self.albedo(&h),
            None => self.env,
        };
        let ct = if surf.material.transparent {
            match self.first_opaque(&hit.point, dir, SECONDARY_T_MIN) {
                Some(h) => self.albedo(&h),
                None => self.env,
            }
        } else {
            [0.0; 3]
        };
        Self::surface_color(&surf.material, surf.alpha_eff, cos_o, cd, cr, ct)
    }

    /// Tight bounds over all surfaces.
    pub fn bounds(&self) -> Aabb {
        let mut bb: Option<Aabb> = None;
        let mut grow = |p: Vector3<f64>| match &mut bb {
            Some(bb) => bb.expand(&p),
            None => bb = Some(Aabb::new(p, p)),
        };
        for surf in &self.surfaces {
            match surf.shape {
                Shape::Quad {
                    center,
                    edge_u,
                    edge_v,
                } => {
                    for su in [-1.0, 1.0] {
                        for sv in [-1.0, 1.0] {
                            grow(center + edge_u * su + edge_v * sv);
                        }
                    }
                }
                Shape::Box { min, max } => {
                    grow(min);
                    grow(max);
                }
                Shape::Sphere { center, radius } => {
                    grow(center - Vector3::repeat(radius));
                    grow(center + Vector3::repeat(radius));
                }
            }
        }
        bb.expect("scene has no surfaces")
    }

    fn surface_area(shape: &Shape) -> f64 {
        match *shape {
            Shape::Quad { edge_u, edge_v, .. } => 4.0 * edge_u.cross(&edge_v).norm(),
            Shape::Box { min, max } => {
                let d = max - min;
                2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
            }
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    /// Area-weighted surface samples with their local albedo, for seeding
    /// the diffuse splat set.
    pub fn sample_surface_points(&self, count: usize, seed: u64) -> Vec<(Vector3<f64>, [f32; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = self.surfaces.iter().map(|s| Self::surface_area(&s.shape)).collect();
        let total: f64 = areas.iter().sum();
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pick = rng.gen::<f64>() * total;
            let mut idx = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a || i == areas.len() - 1 {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let surf = &self.surfaces[idx];
            let (pos, uv) = match surf.shape {
                Shape::Quad {
                    center,
                    edge_u,
                    edge_v,
                } => {
                    let (su, sv) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    (
                        center + edge_u * su + edge_v * sv,
                        (su * edge_u.norm(), sv * edge_v.norm()),
                    )
                }
                Shape::Box { min, max } => {
                    let d = max - min;
                    let faces = [d.y * d.z, d.y * d.z, d.z * d.x, d.z * d.x, d.x * d.y, d.x * d.y];
                    let fsum: f64 = faces.iter().sum();
                    let mut fp = rng.gen::<f64>() * fsum;
                    let mut face = 5;
                    for (i, a) in faces.iter().enumerate() {
                        if fp < *a {
                            face = i;
                            break;
                        }
                        fp -= a;
                    }
                    let axis = face / 2;
                    let side = if face % 2 == 0 { min[axis] } else { max[axis] };
                    let mut p = Vector3::new(
                        rng.gen_range(min.x..max.x),
                        rng.gen_range(min.y..max.y),
                        rng.gen_range(min.z..max.z),
                    );
                    p[axis] = side;
                    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
                    (p, (p[ua], p[va]))
                }
                Shape::Sphere { center, radius } => {
                    // Rejection sample the unit ball, then push to the shell.
                    let dir = loop {
                        let v = Vector3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        );
                        let n = v.norm();
                        if n > 1e-6 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    (center + dir * radius, (0.0, 0.0))
                }
            };
            let c = surf.material.albedo.at(uv);
            points.push((pos, [c[0] as f32, c[1] as f32, c[2] as f32]));
        }
        points
    }
}

/// Pinhole camera at `eye` looking toward `target`, image y pointing down.
pub fn look_at_camera(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
    width: usize,
    height: usize,
    focal: f64,
) -> Camera {
    let forward = (target - eye).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Camera {
        fx: focal,
        fy: focal,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
        rotation,
        translation: -(rotation * eye),
    }
}

/// Cameras evenly spaced on the scene's orbit.
pub fn orbit_cameras(scene: &AnalyticScene, views: usize, width: usize, height: usize) -> Vec<Camera> {
    let OrbitPath {
        target,
        radius,
        elevation,
    } = scene.orbit;
    let focal = 0.9 * width as f64;
    (0..views)
        .map(|k| {
            let az = 2.0 * std::f64::consts::PI * k as f64 / views as f64;
            let eye = target
                + Vector3::new(
                    radius * elevation.cos() * az.sin(),
                    radius * elevation.sin(),
                    radius * elevation.cos() * az.cos(),
                );
            look_at_camera(eye, target, Vector3::y(), width, height, focal)
        })
        .collect()
}

/// One rendered ground-truth view. Color averages `spp` jittered rays;
/// depth (distance along the ray), normal and mask come from the center ray
/// and are zero where it escapes.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub color: Image,
    pub depth: Image,
    pub normal: Image,
    pub mask: Image,
}

fn pixel_seed(seed: u64, px: usize, py: usize) -> u64 {
    // splitmix64 over the pixel index keeps pixels independent of each
    // other and of the traversal order.
    let mut z = seed ^ (px as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (py as u64) << 32;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one view with `spp` stratified jittered samples per pixel,
/// deterministic under (`seed`, pixel).
pub fn reference_render(scene: &AnalyticScene, cam: &Camera, spp: usize, seed: u64) -> Result<RenderedView> {
    if spp == 0 {
        return Err(Error::validation("reference render needs spp >= 1"));
    }
    let (w, h) = (cam.width, cam.height);
    let origin = cam.origin();
    let grid = (spp as f64).sqrt().ceil() as usize;

    struct Row {
        color: Vec<f32>,
        depth: Vec<f32>,
        normal: Vec<f32>,
        mask: Vec<f32>,
    }
    let rows: Vec<Row> = threading::run(|| {
        (0..h)
            .into_par_iter()
            .map(|py| {
                let mut row = Row {
                    color: vec![0.0; w * 3],
                    depth: vec![0.0; w],
                    normal: vec![0.0; w * 3],
                    mask: vec![0.0; w],
                };
                for px in 0..w {
                    let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed, px, py));
                    let mut acc = [0.0f64; 3];
                    for s in 0..spp {
                        let (cx, cy) = (s % grid, s / grid);
                        let ju = (cx as f64 + rng.gen::<f64>()) / grid as f64 - 0.5;
                        let jv = (cy as f64 + rng.gen::<f64>()) / grid as f64 - 0.5;
                        let dir = cam.ray_dir(px as f64 + ju, py as f64 + jv);
                        let c = scene.shade(&origin, &dir);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                    for ch in 0..3 {
                        row.color[px * 3 + ch] = (acc[ch] / spp as f64) as f32;
                    }
                    let dir = cam.ray_dir(px as f64, py as f64);
                    if let Some(hit) = scene.intersect(&origin, &dir, SECONDARY_T_MIN) {
                        row.depth[px] = hit.t as f32;
                        for ch in 0..3 {
                            row.normal[px * 3 + ch] = hit.normal[ch] as f32;
                        }
                        if self_transparent(scene, hit.surface) {
                            row.mask[px] = 1.0;
                        }
                    }
                }
                row
            })
            .collect()
    });

    let mut view = RenderedView {
        color: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        normal: Image::new(w, h, 3),
        mask: Image::new(w, h, 1),
    };
    for (py, row) in rows.into_iter().enumerate() {
        for px in 0..w {
            for ch in 0..3 {
                view.color.set(px, py, ch, row.color[px * 3 + ch]);
                view.normal.set(px, py, ch, row.normal[px * 3 + ch]);
            }
            view.depth.set(px, py, 0, row.depth[px]);
            view.mask.set(px, py, 0, row.mask[px]);
        }
    }
    Ok(view)
}

fn self_transparent(scene: &AnalyticScene, surface: usize) -> bool {
    scene.surfaces[surface].material.transparent
}

/// Knobs for [`generate_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct DatasetConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub spp: usize,
    /// Seed-point count sampled from the analytic surfaces.
    pub points: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            views: 8,
            width: 128,
            height: 128,
            spp: 64,
            points: 4000,
            seed: 7,
        }
    }
}

/// Renders the orbit views and writes a loadable dataset directory:
/// `scene.json`, PFM colors and normals, PNG masks and a seed PLY.
pub fn generate_dataset(scene: &AnalyticScene, cfg: &DatasetConfig, dir: &Path) -> Result<SceneJson> {
    if cfg.views < 2 {
        return Err(Error::validation("a dataset needs at least 2 views"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cameras = orbit_cameras(scene, cfg.views, cfg.width, cfg.height);

    let mut manifest_cams = Vec::with_capacity(cfg.views);
    for (k, cam) in cameras.iter().enumerate() {
        let view = reference_render(scene, cam, cfg.spp, view_seed(cfg.seed, k))?;
        let (image, mask, normal) = (
            format!("view_{k:03}.pfm"),
            format!("mask_{k:03}.png"),
            format!("normal_{k:03}.pfm"),
        );
        img::save_pfm(&dir.join(&image), &view.color)?;
        img::save_png_mask(&dir.join(&mask), &view.mask)?;
        img::save_pfm(&dir.join(&normal), &view.normal)?;
        let mut cj = CameraJson::from_camera(cam, image);
        cj.mask = Some(mask);
        cj.mono_normal = Some(normal);
        manifest_cams.push(cj);
    }

    let points = scene.sample_surface_points(cfg.points, cfg.seed ^ 0x5EED_4A17);
    save_points_ply(&dir.join("points.ply"), &points)?;

    let bb = scene.bounds().padded(0.05 * scene.bounds().diagonal());
    let manifest = SceneJson {
        cameras: manifest_cams,
        points: "points.ply".to_string(),
        bbox: [bb.min.x, bb.min.y, bb.min.z, bb.max.x, bb.max.y, bb.max.z],
    };
    save_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Per-view render seed derived from the dataset seed.
pub fn view_seed(seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x100_0000_01B3) ^ (view as u64)
}

/// Builds one of the named scenes: `mirror` (checker floor, wall mirror,
/// probe box), `slab` (thin glass box, interior sphere, checker backdrop)
/// or `combo` (union of both).
pub fn build_preset(name: &str) -> Result<AnalyticScene> {
    match name {
        "mirror" => mirror_scene(),
        "slab" => slab_scene(),
        "combo" => combo_scene(),
        _ => Err(Error::validation(format!(
            "unknown preset `{name}` (expected mirror, slab or combo)"
        ))),
    }
}

fn checker_floor() -> (Shape, Material) {
    (
        Shape::Quad {
            center: Vector3::zeros(),
            edge_u: Vector3::new(1.6, 0.0, 0.0),
            edge_v: Vector3::new(0.0, 0.0, 1.6),
        },
        Material::diffuse(Albedo::Checker {
            a: [0.72, 0.72, 0.70],
            b: [0.18, 0.22, 0.28],
            tile: 0.4,
        }),
    )
}

fn mirror_material() -> Material {
    Material {
        albedo: Albedo::Flat([0.03; 3]),
        rough: 0.05,
        f0: [0.92; 3],
        ks: 0.9,
        transparent: false,
    }
}

fn glass_material() -> Material {
    Material {
        albedo: Albedo::Flat([0.05, 0.06, 0.07]),
        rough: 0.3,
        f0: [0.04; 3],
        ks: 0.9,
        transparent: true,
    }
}

fn mirror_scene() -> Result<AnalyticScene> {
    let surfaces = vec![
        checker_floor(),
        (
            Shape::Quad {
                center: Vector3::new(0.0, 0.75, -1.3),
                edge_u: Vector3::new(0.9, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.65, 0.0),
            },
            mirror_material(),
        ),
        (
            Shape::Box {
                min: Vector3::new(-0.45, 0.0, -0.75),
                max: Vector3::new(0.15, 0.55, -0.15),
            },
            Material::diffuse(Albedo::Flat([0.75, 0.25, 0.15])),
        ),
    ];
    AnalyticScene::new(
        surfaces,
        [0.0; 3],
        OrbitPath {
            target: Vector3::new(0.0, 0.45, -0.5),
            radius: 2.8,
            elevation: 0.32,
        },
    )
}

fn slab_scene() -> Result<AnalyticScene> {
    let surfaces = vec![
        (
            Shape::Box {
                min: Vector3::new(-0.5, 0.1, -SLAB_THICKNESS / 2.0),
                max: Vector3::new(0.5, 1.1, SLAB_THICKNESS / 2.0),
            },
            glass_material(),
        ),
        (
            Shape::Sphere {
                center: Vector3::new(0.0, 0.6, 0.0),
                radius: 0.08,
            },
            Material::diffuse(Albedo::Flat([0.8, 0.45, 0.12])),
        ),
        (
            Shape::Quad {
                center: Vector3::new(0.0, 0.6, -1.2),
                edge_u: Vector3::new(1.3, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.8, 0.0),
            },
            Material::diffuse(Albedo::Checker {
                a: [0.70, 0.65, 0.30],
                b: [0.20, 0.30, 0.55],
                tile: 0.25,
            }),
        ),
    ];
    AnalyticScene::new(
        surfaces,
        [0.0; 3],
        OrbitPath {
            target: Vector3::new(0.0, 0.6, -0.2),
            radius: 2.6,
            elevation: 0.15,
        },
    )
}

fn combo_scene() -> Result<AnalyticScene> {
    let surfaces = vec![
        checker_floor(),
        (
            Shape::Quad {
                center: Vector3::new(-0.75, 0.7, -1.25),
                edge_u: Vector3::new(0.65, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.55, 0.0),
            },
            mirror_material(),
        ),
        (
            Shape::Box {
                min: Vector3::new(-1.15, 0.0, -0.65),
                max: Vector3::new(-0.6, 0.5, -0.1),
            },
            Material::diffuse(Albedo::Flat([0.75, 0.25, 0.15])),
        ),
        (
            Shape::Box {
                min: Vector3::new(0.1, 0.08, -0.32),
                max: Vector3::new(1.1, 1.08, -0.32 + SLAB_THICKNESS),
            },
            glass_material(),
        ),
        (
            Shape::Sphere {
                center: Vector3::new(0.6, 0.55, -0.22),
                radius: 0.08,
            },
            Material::diffuse(Albedo::Flat([0.8, 0.45, 0.12])),
        ),
        (
            Shape::Quad {
                center: Vector3::new(0.6, 0.7, -1.35),
                edge_u: Vector3::new(0.8, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.6, 0.0),
            },
            Material::diffuse(Albedo::Checker {
                a: [0.70, 0.65, 0.30],
                b: [0.20, 0.30, 0.55],
                tile: 0.25,
            }),
        ),
    ];
    AnalyticScene::new(
        surfaces,
        [0.0; 3],
        OrbitPath {
            target: Vector3::new(0.0, 0.5, -0.4),
            radius: 3.0,
            elevation: 0.3,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::io::load_scene;

    #[test]
    fn presets_have_expected_objects() {
        assert_eq!(build_preset("mirror").unwrap().surfaces.len(), 3);
        assert_eq!(build_preset("slab").unwrap().surfaces.len(), 3);
        assert_eq!(build_preset("combo").unwrap().surfaces.len(), 6);
        assert!(build_preset("cube").is_err());
        // The glass box is exactly SLAB_THICKNESS deep.
        let slab = build_preset("slab").unwrap();
        let Shape::Box { min, max } = slab.surfaces[0].shape else {
            panic!("slab preset must start with the glass box");
        };
        assert!((max.z - min.z - SLAB_THICKNESS).abs() < 1e-12);
    }

    #[test]
    fn checker_camera_matches_closed_form() {
        // Straight-down camera with the focal length chosen so checker tile
        // boundaries land exactly on pixel-cell edges: every pixel footprint
        // is a single tone and jitter cannot blur it.
        let scene = AnalyticScene::new(
            vec![(
                Shape::Quad {
                    center: Vector3::zeros(),
                    edge_u: Vector3::new(1.0, 0.0, 0.0),
                    edge_v: Vector3::new(0.0, 0.0, 1.0),
                },
                Material::diffuse(Albedo::Checker {
                    a: [0.9, 0.9, 0.9],
                    b: [0.1, 0.1, 0.1],
                    tile: 0.25,
                }),
            )],
            [0.0; 3],
            OrbitPath {
                target: Vector3::zeros(),
                radius: 2.0,
                elevation: 1.0,
            },
        )
        .unwrap();
        let cam = look_at_camera(
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            32,
            32,
            64.0,
        );
        let view = reference_render(&scene, &cam, 64, 11).unwrap();
        let origin = cam.origin();
        for py in 0..32 {
            for px in 0..32 {
                let dir = cam.ray_dir(px as f64, py as f64);
                let hit = scene.intersect(&origin, &dir, 0.0).unwrap();
                let want = scene.albedo(&hit);
                for ch in 0..3 {
                    let got = view.color.get(px, py, ch) as f64;
                    assert!(
                        (got - want[ch]).abs() < 1.0 / 255.0,
                        "pixel ({px},{py}) ch {ch}: got {got}, want {}",
                        want[ch]
                    );
                }
            }
        }
    }

    #[test]
    fn mirror_at_normal_incidence_scales_probe_color() {
        // Mirror facing +z, probe wall behind the camera: the axis ray
        // reflects straight back, so the specular term is w_r(cos=1) times
        // the probe albedo.
        let probe = [0.2, 0.5, 0.8];
        let mirror = Material {
            albedo: Albedo::Flat([0.0; 3]),
            rough: 0.02,
            f0: [1.0; 3],
            ks: 0.9,
            transparent: false,
        };
        let scene = AnalyticScene::new(
            vec![
                (
                    Shape::Quad {
                        center: Vector3::zeros(),
                        edge_u: Vector3::new(1.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 1.0, 0.0),
                    },
                    mirror,
                ),
                (
                    Shape::Quad {
                        center: Vector3::new(0.0, 0.0, 4.0),
                        edge_u: Vector3::new(8.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 8.0, 0.0),
                    },
                    Material::diffuse(Albedo::Flat(probe)),
                ),
            ],
            [0.0; 3],
            OrbitPath {
                target: Vector3::zeros(),
                radius: 2.0,
                elevation: 0.0,
            },
        )
        .unwrap();
        let origin = Vector3::new(0.0, 0.0, 2.0);
        let dir = Vector3::new(0.0, 0.0, -1.0);
        let got = scene.shade(&origin, &dir);
        let alpha_eff = bsdf::roughness_remap(0.02).unwrap();
        let wr = bsdf::brdf_weight(1.0, alpha_eff, [1.0; 3]).value;
        for ch in 0..3 {
            let want = 0.9 * wr[ch] * probe[ch];
            assert!(
                (got[ch] - want) < 1e-12 && (want - got[ch]) < 1e-12,
                "ch {ch}: got {}, want {want}",
                got[ch]
            );
        }
    }

    #[test]
    fn slab_pixel_composes_sphere_and_reflection() {
        let scene = build_preset("slab").unwrap();
        // Ray through the sphere center from straight ahead.
        let origin = Vector3::new(0.0, 0.6, 2.0);
        let dir = Vector3::new(0.0, 0.0, -1.0);
        let hit = scene.intersect(&origin, &dir, 0.0).unwrap();
        assert_eq!(hit.surface, 0);
        assert!(scene.surfaces[hit.surface].material.transparent);

        let cd = scene.albedo(&hit);
        let rdir = crate::trace::reflect_dir(&hit.normal, &-dir);
        let cr = match scene.intersect(&hit.point, &rdir, 1e-6) {
            Some(h) => scene.albedo(&h),
            None => scene.env,
        };
        let ct = scene.albedo(&scene.first_opaque(&hit.point, &dir, 1e-6).unwrap());
        assert_eq!(ct, [0.8, 0.45, 0.12], "straight-through must reach the sphere");

        let surf = &scene.surfaces[0];
        let m = &surf.material;
        let wr = bsdf::brdf_weight(1.0, surf.alpha_eff, m.f0).value;
        let wt = bsdf::btdf_weight(1.0, m.f0, true).value;
        let want = bsdf::compose_final(cd, m.ks, wr, cr, wt, ct);
        assert_eq!(scene.shade(&origin, &dir), want);
    }

    #[test]
    fn shading_shares_the_bsdf_exactly() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let m = Material {
                albedo: Albedo::Flat([rng.gen(), rng.gen(), rng.gen()]),
                rough: rng.gen_range(0.02..1.0),
                f0: [rng.gen(), rng.gen(), rng.gen()],
                ks: rng.gen(),
                transparent: rng.gen_bool(0.5),
            };
            let cos_o = rng.gen_range(1e-3..1.0f64);
            let (cd, cr, ct) = (
                [rng.gen(), rng.gen(), rng.gen()],
                [rng.gen(), rng.gen(), rng.gen()],
                [rng.gen(), rng.gen(), rng.gen()],
            );
            let alpha_eff = bsdf::roughness_remap(m.rough).unwrap();
            let got = AnalyticScene::surface_color(&m, alpha_eff, cos_o, cd, cr, ct);
            let wr = bsdf::brdf_weight(cos_o, alpha_eff, m.f0).value;
            let wt = bsdf::btdf_weight(cos_o, m.f0, m.transparent).value;
            let want = bsdf::compose_final(cd, m.ks, wr, cr, wt, ct);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn dataset_round_trips_and_rerenders_bit_exactly() {
        let dir = std::env::temp_dir().join("rtgs_synth_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let scene = build_preset("slab").unwrap();
        let cfg = DatasetConfig {
            views: 3,
            width: 24,
            height: 20,
            spp: 4,
            points: 200,
            seed: 5,
        };
        generate_dataset(&scene, &cfg, &dir).unwrap();
        let bundle = load_scene(&dir).unwrap();
        assert_eq!(bundle.view_count(), 3);
        assert_eq!(bundle.points.len(), 200);

        // No hidden state: re-rendering view 0 reproduces the stored image
        // bit for bit, and the mask matches the analytic silhouette.
        let view = reference_render(&scene, &bundle.cameras[0], cfg.spp, view_seed(cfg.seed, 0)).unwrap();
        assert_eq!(view.color, bundle.images[0]);
        let origin = bundle.cameras[0].origin();
        for py in 0..cfg.height {
            for px in 0..cfg.width {
                let dir_px = bundle.cameras[0].ray_dir(px as f64, py as f64);
                let transparent_first = scene
                    .intersect(&origin, &dir_px, 0.0)
                    .map(|h| scene.surfaces[h.surface].material.transparent)
                    .unwrap_or(false);
                let got = bundle.masks[0].get(px, py, 0) >= 0.5;
                assert_eq!(got, transparent_first, "mask mismatch at ({px},{py})");
            }
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn dataset_is_deterministic_under_seed() {
        let scene = build_preset("mirror").unwrap();
        let cfg = DatasetConfig {
            views: 2,
            width: 16,
            height: 16,
            spp: 4,
            points: 64,
            seed: 21,
        };
        let cam = orbit_cameras(&scene, 2, 16, 16)[0].clone();
        let a = reference_render(&scene, &cam, cfg.spp, view_seed(cfg.seed, 0)).unwrap();
        let b = reference_render(&scene, &cam, cfg.spp, view_seed(cfg.seed, 0)).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(
            scene.sample_surface_points(64, 21),
            scene.sample_surface_points(64, 21)
        );
        assert!(reference_render(&scene, &cam, 0, 1).is_err());
    }
}
