//! Proxy mesh reconstruction for the transparent geometry.
//!
//! Rendered depth maps of the transmittance surfels are fused into a
//! truncated signed distance volume, the zero level set is extracted with
//! marching cubes, and the resulting triangle mesh answers the only two
//! queries the renderer needs: where a camera ray enters the glass and
//! where it leaves it. The mesh guides ray bending and the depth loss; it
//! carries no gradients.

mod tables;

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Map;
use crate::scene::init::Aabb;
use crate::scene::Camera;
use crate::threading;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};

/// Truncation band of the distance volume, in voxels.
pub const TRUNCATION_VOXELS: f64 = 4.0;
/// Default grid resolution along the scene bounding box diagonal.
pub const DEFAULT_DIAGONAL_VOXELS: f64 = 256.0;
/// Hard cap on lattice points per axis.
pub const MAX_GRID_DIM: usize = 512;
/// Depth samples with blended coverage below this are treated as empty.
pub const FUSE_ALPHA_MIN: f64 = 0.5;
/// Two ray-mesh hits closer than this are the same surface.
pub const DISTINCT_HIT: f64 = 1e-4;

/// Truncated signed distance volume on a regular lattice. Values are
/// positive in front of the observed surface and negative behind it.
pub struct TsdfVolume {
    origin: Vector3<f64>,
    voxel: f64,
    dims: [usize; 3],
    values: Vec<f32>,
    weights: Vec<f32>,
}

impl TsdfVolume {
    /// Allocates a volume covering `bbox` plus one truncation band of
    /// padding on every side.
    pub fn new(bbox: &Aabb, voxel: f64) -> Result<Self> {
        if !(voxel > 0.0) {
            return Err(Error::validation(format!("voxel size {voxel} must be positive")));
        }
        let tau = TRUNCATION_VOXELS * voxel;
        let padded = bbox.padded(tau);
        let extent = padded.extent();
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            dims[axis] = (extent[axis] / voxel).ceil() as usize + 1;
            if dims[axis] > MAX_GRID_DIM {
                return Err(Error::validation(format!(
                    "distance grid needs {} points on axis {axis}, cap is {MAX_GRID_DIM}; \
                     raise the voxel size",
                    dims[axis]
                )));
            }
            dims[axis] = dims[axis].max(2);
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin: padded.min,
            voxel,
            dims,
            values: vec![0.0; n],
            weights: vec![0.0; n],
        })
    }

    /// Voxel size chosen so the bounding box diagonal spans the default
    /// number of voxels.
    pub fn default_voxel(bbox: &Aabb) -> f64 {
        bbox.diagonal() / DEFAULT_DIAGONAL_VOXELS
    }

    pub fn voxel(&self) -> f64 {
        self.voxel
    }

    fn lattice_point(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                ix as f64 * self.voxel,
                iy as f64 * self.voxel,
                iz as f64 * self.voxel,
            )
    }

    #[inline]
    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    /// Folds one rendered view into the volume. `depth` is the blended,
    /// premultiplied distance map and `alpha` its coverage; pixels with
    /// coverage at most [`FUSE_ALPHA_MIN`] contribute nothing. Samples more
    /// than one truncation band behind the surface are occluded and
    /// skipped; the rest update a running per-voxel mean.
    pub fn integrate(&mut self, cam: &Camera, depth: &Map, alpha: &Map) {
        assert_eq!(depth.width, cam.width);
        assert_eq!(depth.height, cam.height);
        let tau = TRUNCATION_VOXELS * self.voxel;
        let cam_origin = cam.origin();
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel;
        threading::run(|| {
            self.values
                .par_chunks_mut(slab)
                .zip(self.weights.par_chunks_mut(slab))
                .enumerate()
                .for_each(|(iz, (vals, wts))| {
                    for iy in 0..ny {
                        for ix in 0..nx {
                            let p = origin
                                + Vector3::new(
                                    ix as f64 * voxel,
                                    iy as f64 * voxel,
                                    iz as f64 * voxel,
                                );
                            let Some((u, v, _)) = cam.project(&p) else {
                                continue;
                            };
                            let px = u.round();
                            let py = v.round();
                            if px < 0.0
                                || py < 0.0
                                || px >= cam.width as f64
                                || py >= cam.height as f64
                            {
                                continue;
                            }
                            let (px, py) = (px as usize, py as usize);
                            let a = alpha.get(px, py, 0);
                            if a <= FUSE_ALPHA_MIN {
                                continue;
                            }
                            let d_surface = depth.get(px, py, 0) / a;
                            let dist = (p - cam_origin).norm();
                            let sdf = d_surface - dist;
                            if sdf < -tau {
                                continue;
                            }
                            let clamped = sdf.min(tau) as f32;
                            let i = iy * nx + ix;
                            wts[i] += 1.0;
                            vals[i] += (clamped - vals[i]) / wts[i];
                        }
                    }
                });
        });
    }

    /// Extracts the zero level set. Only cubes whose eight corners were all
    /// observed produce triangles; vertices on shared edges are reused so
    /// the mesh is watertight across cube boundaries.
    pub fn extract_surface(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        let mut edge_ids: std::collections::HashMap<(u32, u8), u32> =
            std::collections::HashMap::new();
        let (nx, ny, nz) = (self.dims[0], self.dims[1], self.dims[2]);
        // Base lattice point and axis for each of the 12 cube edges.
        let mut edge_base = [([0usize; 3], 0usize); 12];
        for (e, corners) in EDGE_CORNERS.iter().enumerate() {
            let a = CORNER_OFFSETS[corners[0]];
            let b = CORNER_OFFSETS[corners[1]];
            let base = [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])];
            let axis = (0..3).find(|&k| a[k] != b[k]).unwrap();
            edge_base[e] = (base, axis);
        }
        for iz in 0..nz - 1 {
            for iy in 0..ny - 1 {
                for ix in 0..nx - 1 {
                    let mut vals = [0.0f32; 8];
                    let mut config = 0usize;
                    let mut observed = true;
                    for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                        let i = self.index(ix + off[0], iy + off[1], iz + off[2]);
                        if self.weights[i] == 0.0 {
                            observed = false;
                            break;
                        }
                        vals[c] = self.values[i];
                        if vals[c] < 0.0 {
                            config |= 1 << c;
                        }
                    }
                    if !observed || config == 0 || config == 255 {
                        continue;
                    }
                    let crossings = EDGE_TABLE[config];
                    let mut cube_verts = [u32::MAX; 12];
                    for e in 0..12 {
                        if crossings & (1 << e) == 0 {
                            continue;
                        }
                        let (base, axis) = edge_base[e];
                        let key_point = self
                            .index(ix + base[0], iy + base[1], iz + base[2])
                            as u32;
                        let key = (key_point, axis as u8);
                        let id = *edge_ids.entry(key).or_insert_with(|| {
                            let [c0, c1] = EDGE_CORNERS[e];
                            let v0 = vals[c0] as f64;
                            let v1 = vals[c1] as f64;
                            let t = if (v1 - v0).abs() < 1e-12 {
                                0.5
                            } else {
                                (0.0 - v0) / (v1 - v0)
                            };
                            let o0 = CORNER_OFFSETS[c0];
                            let o1 = CORNER_OFFSETS[c1];
                            let p0 = self.lattice_point(ix + o0[0], iy + o0[1], iz + o0[2]);
                            let p1 = self.lattice_point(ix + o1[0], iy + o1[1], iz + o1[2]);
                            mesh.vertices.push(p0 + (p1 - p0) * t);
                            (mesh.vertices.len() - 1) as u32
                        });
                        cube_verts[e] = id;
                    }
                    let row = &TRIANGLE_TABLE[config];
                    let mut k = 0;
                    while k < row.len() && row[k] >= 0 {
                        mesh.triangles.push([
                            cube_verts[row[k] as usize],
                            cube_verts[row[k + 1] as usize],
                            cube_verts[row[k + 2] as usize],
                        ]);
                        k += 3;
                    }
                }
            }
        }
        mesh
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn triangle_normal(&self, tri: &[u32; 3]) -> Vector3<f64> {
        let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 1e-20 {
            n / len
        } else {
            Vector3::z()
        }
    }

    /// Binary STL.
    pub fn save_stl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&[0u8; 80])?;
        write(&(self.triangles.len() as u32).to_le_bytes())?;
        for tri in &self.triangles {
            let n = self.triangle_normal(tri);
            for k in 0..3 {
                write(&(n[k] as f32).to_le_bytes())?;
            }
            for &vi in tri {
                let v = self.vertices[vi as usize];
                for k in 0..3 {
                    write(&(v[k] as f32).to_le_bytes())?;
                }
            }
            write(&0u16.to_le_bytes())?;
        }
        Ok(())
    }

    /// ASCII OBJ.
    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut res: std::io::Result<()> = Ok(());
        for v in &self.vertices {
            res = res.and_then(|_| writeln!(w, "v {} {} {}", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            res = res.and_then(|_| writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        res.map_err(|e| Error::io(path, e))
    }
}

/// Watertight double-sided ray-triangle intersection. Returns the hit
/// distance along `dir`.
pub fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - v0;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&qvec) * inv_det)
}

#[derive(Debug, Clone, Copy)]
struct TriNode {
    min: Vector3<f64>,
    max: Vector3<f64>,
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

/// BVH over the proxy mesh for entry/exit depth queries.
#[derive(Debug)]
pub struct TriBvh {
    nodes: Vec<TriNode>,
    order: Vec<u32>,
}

const TRI_LEAF_SIZE: usize = 4;

impl TriBvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let mut bvh = TriBvh {
            nodes: Vec::new(),
            order: Vec::new(),
        };
        if mesh.triangles.is_empty() {
            return bvh;
        }
        let bounds: Vec<(Vector3<f64>, Vector3<f64>)> = mesh
            .triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
                (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
            })
            .collect();
        let mut ids: Vec<u32> = (0..mesh.triangles.len() as u32).collect();
        let count = ids.len();
        bvh.build_node(&mut ids, 0, count, &bounds);
        bvh
    }

    fn build_node(
        &mut self,
        ids: &mut Vec<u32>,
        start: usize,
        count: usize,
        bounds: &[(Vector3<f64>, Vector3<f64>)],
    ) -> u32 {
        let mut node_min = Vector3::repeat(f64::INFINITY);
        let mut node_max = Vector3::repeat(f64::NEG_INFINITY);
        let mut cmin = Vector3::repeat(f64::INFINITY);
        let mut cmax = Vector3::repeat(f64::NEG_INFINITY);
        for &id in &ids[start..start + count] {
            let (bmin, bmax) = bounds[id as usize];
            node_min = node_min.inf(&bmin);
            node_max = node_max.sup(&bmax);
            let c = (bmin + bmax) * 0.5;
            cmin = cmin.inf(&c);
            cmax = cmax.sup(&c);
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(TriNode {
            min: node_min,
            max: node_max,
            left: 0,
            right: 0,
            start: 0,
            count: 0,
        });
        let extent = cmax - cmin;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        if count <= TRI_LEAF_SIZE || extent[axis] <= 0.0 {
            let leaf_start = self.order.len() as u32;
            self.order.extend_from_slice(&ids[start..start + count]);
            self.nodes[idx as usize].start = leaf_start;
            self.nodes[idx as usize].count = count as u32;
            return idx;
        }
        let mid = count / 2;
        let centroid = |id: u32| {
            let (bmin, bmax) = bounds[id as usize];
            (bmin[axis] + bmax[axis]) * 0.5
        };
        ids[start..start + count]
            .select_nth_unstable_by(mid, |&a, &b| centroid(a).total_cmp(&centroid(b)).then(a.cmp(&b)));
        let left = self.build_node(ids, start, mid, bounds);
        let right = self.build_node(ids, start + mid, count - mid, bounds);
        self.nodes[idx as usize].left = left;
        self.nodes[idx as usize].right = right;
        idx
    }

    fn collect_hits(
        &self,
        mesh: &TriangleMesh,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        out: &mut Vec<f64>,
    ) {
        if self.nodes.is_empty() {
            return;
        }
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            let mut t0 = t_min;
            let mut t1 = f64::INFINITY;
            for axis in 0..3 {
                let a = (node.min[axis] - origin[axis]) * inv[axis];
                let b = (node.max[axis] - origin[axis]) * inv[axis];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 {
                continue;
            }
            if node.count > 0 {
                for &id in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let tri = &mesh.triangles[id as usize];
                    let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
                    if let Some(t) = ray_triangle(origin, dir, &a, &b, &c) {
                        if t > t_min {
                            out.push(t);
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
    }

    /// Entry and exit distances of the ray through the mesh. The first hit
    /// is the entry; the exit is the next hit more than [`DISTINCT_HIT`]
    /// farther, so coplanar duplicates from the triangulation collapse into
    /// one surface. Returns `None` when the ray misses entirely, and a
    /// `None` exit when no second surface exists.
    pub fn first_second(
        &self,
        mesh: &TriangleMesh,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Option<(f64, Option<f64>)> {
        let mut hits = Vec::new();
        self.collect_hits(mesh, origin, dir, DISTINCT_HIT, &mut hits);
        if hits.is_empty() {
            return None;
        }
        hits.sort_unstable_by(f64::total_cmp);
        let first = hits[0];
        let second = hits.iter().copied().find(|&t| t > first + DISTINCT_HIT);
        Some((first, second))
    }
}
