//! Surfel initialization from seed points or uniform noise.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{GaussianSet, Role, SplatPrimitive};
use crate::sh;
use crate::threading;

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut iter = points.into_iter();
        let first = *iter.next()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for p in iter {
            bb.expand(p);
        }
        Some(bb)
    }

    pub fn expand(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn padded(&self, margin: f64) -> Self {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub const DEFAULT_OPACITY: f64 = 0.1;
pub const DEFAULT_ROUGHNESS: f64 = 0.5;
pub const DEFAULT_F0: f64 = 0.04;
pub const DEFAULT_KS: f64 = 0.1;
/// Floor applied to nearest-neighbor derived scales.
pub const MIN_INIT_SCALE: f64 = 1e-4;

fn default_prim(role: Role) -> SplatPrimitive {
    SplatPrimitive {
        center: Vector3::zeros(),
        tan_u: Vector3::x(),
        tan_v: Vector3::y(),
        log_scales: [0.0; 2],
        opacity_logit: logit(DEFAULT_OPACITY),
        sh: vec![[0.0; 3]; crate::scene::sh_coeffs_for_role(role)],
        rough_logit: logit(DEFAULT_ROUGHNESS),
        f0_logit: [logit(DEFAULT_F0); 3],
        ks_logit: logit(DEFAULT_KS),
    }
}

/// Random orthonormal tangent pair (uniform over orientations).
fn random_tangents(rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 < 1e-4 || n2 > 1.0 {
            continue;
        }
        let n = n2.sqrt();
        let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0] / n,
            q[1] / n,
            q[2] / n,
            q[3] / n,
        ));
        let rot = quat.to_rotation_matrix();
        return (rot * Vector3::x(), rot * Vector3::y());
    }
}

/// Mean distance to the 3 nearest neighbors for every point.
fn knn3_mean_distances(points: &[Vector3<f64>]) -> Vec<f64> {
    threading::run(|| {
        points
            .par_iter()
            .map(|p| {
                let mut best = [f64::INFINITY; 3];
                for q in points {
                    let d2 = (p - q).norm_squared();
                    if d2 == 0.0 {
                        continue;
                    }
                    if d2 < best[2] {
                        best[2] = d2;
                        if best[2] < best[1] {
                            best.swap(1, 2);
                        }
                        if best[1] < best[0] {
                            best.swap(0, 1);
                        }
                    }
                }
                let finite: Vec<f64> = best.iter().filter(|d| d.is_finite()).map(|d| d.sqrt()).collect();
                if finite.is_empty() {
                    0.0
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                }
            })
            .collect()
    })
}

/// Builds the diffuse set from colored seed points. Scales come from the
/// mean 3-NN distance (floored at [`MIN_INIT_SCALE`]), DC color matches the
/// point color, orientation is random.
pub fn init_diffuse_from_points(
    points: &[(Vector3<f64>, [f32; 3])],
    rng: &mut impl Rng,
) -> Result<GaussianSet> {
    if points.is_empty() {
        return Err(Error::validation("cannot initialize from zero seed points"));
    }
    let positions: Vec<Vector3<f64>> = points.iter().map(|(p, _)| *p).collect();
    let nn = knn3_mean_distances(&positions);
    let fallback = Aabb::from_points(&positions)
        .map(|bb| (bb.diagonal() / 100.0).max(MIN_INIT_SCALE))
        .unwrap_or(MIN_INIT_SCALE);

    let mut set = GaussianSet::new(Role::Diffuse);
    set.prims.reserve(points.len());
    for (i, (pos, rgb)) in points.iter().enumerate() {
        let mut prim = default_prim(Role::Diffuse);
        prim.center = *pos;
        let (tu, tv) = random_tangents(rng);
        prim.tan_u = tu;
        prim.tan_v = tv;
        let scale = if nn[i] > 0.0 {
            nn[i].max(MIN_INIT_SCALE)
        } else {
            fallback
        };
        prim.log_scales = [scale.ln(); 2];
        for c in 0..3 {
            prim.sh[0][c] = (rgb[c] as f64 - 0.5) / sh::DC_NORM;
        }
        set.prims.push(prim);
    }
    Ok(set)
}

/// Fills a traced set with `count` surfels scattered uniformly in `bbox`.
/// Scale defaults to 1/100 of the box diagonal, color to mid-gray.
pub fn init_random_in_bbox(
    role: Role,
    count: usize,
    bbox: &Aabb,
    rng: &mut impl Rng,
) -> GaussianSet {
    let scale = (bbox.diagonal() / 100.0).max(MIN_INIT_SCALE);
    let mut set = GaussianSet::new(role);
    set.prims.reserve(count);
    for _ in 0..count {
        let mut prim = default_prim(role);
        prim.center = Vector3::new(
            rng.gen_range(bbox.min.x..=bbox.max.x),
            rng.gen_range(bbox.min.y..=bbox.max.y),
            rng.gen_range(bbox.min.z..=bbox.max.z),
        );
        let (tu, tv) = random_tangents(rng);
        prim.tan_u = tu;
        prim.tan_v = tv;
        prim.log_scales = [scale.ln(); 2];
        set.prims.push(prim);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn points_init_sets_scale_from_neighbors() {
        // Regular grid with spacing 0.5: every point has neighbors at 0.5.
        let mut points = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                points.push((
                    Vector3::new(i as f64 * 0.5, j as f64 * 0.5, 0.0),
                    [1.0f32, 0.5, 0.25],
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = init_diffuse_from_points(&points, &mut rng).unwrap();
        assert_eq!(set.len(), 16);
        for prim in &set.prims {
            let s = prim.log_scales[0].exp();
            // Corner points see (0.5, 0.5, 0.7071), interior ones (0.5 x3).
            assert!(s >= 0.5 - 1e-9 && s <= 0.58, "scale {s}");
            assert_eq!(prim.sh.len(), 16);
            let a = prim.activate();
            assert!((a.opacity - DEFAULT_OPACITY).abs() < 1e-12);
            assert!((a.ks - DEFAULT_KS).abs() < 1e-12);
            assert!((a.f0[0] - DEFAULT_F0).abs() < 1e-12);
            // DC color decodes back to the point color.
            let basis = crate::sh::basis([0.0, 0.0, 1.0], 1);
            let (color, _) = crate::sh::eval_color(&prim.sh[..1], &basis);
            assert!((color[0] - 1.0).abs() < 1e-9);
            assert!((color[1] - 0.5).abs() < 1e-9);
            assert!((color[2] - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_points_fall_back_to_bbox_scale() {
        let points = vec![
            (Vector3::new(0.0, 0.0, 0.0), [0.5f32; 3]),
            (Vector3::new(0.0, 0.0, 0.0), [0.5f32; 3]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = init_diffuse_from_points(&points, &mut rng).unwrap();
        for prim in &set.prims {
            assert!(prim.log_scales[0].exp() >= MIN_INIT_SCALE);
        }
    }

    #[test]
    fn random_init_stays_in_bbox() {
        let bbox = Aabb::new(Vector3::new(-1.0, 0.0, 2.0), Vector3::new(1.0, 3.0, 4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = init_random_in_bbox(Role::Reflection, 64, &bbox, &mut rng);
        assert_eq!(set.len(), 64);
        for prim in &set.prims {
            assert!(bbox.contains(&prim.center));
            assert_eq!(prim.sh.len(), 1);
            assert!(crate::scene::splat_frame(prim.tan_u, prim.tan_v).is_some());
        }
    }

    #[test]
    fn random_init_is_deterministic_per_seed() {
        let bbox = Aabb::new(Vector3::zeros(), Vector3::repeat(1.0));
        let a = init_random_in_bbox(Role::Transmittance, 16, &bbox, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_random_in_bbox(Role::Transmittance, 16, &bbox, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.prims, b.prims);
    }
}
