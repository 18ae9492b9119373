//! Median-split BVH over surfel bounds.
//!
//! Each surfel is bounded by its center plus/minus the 3 sigma tangent
//! extents, so every point that can pass the response cutoff lies inside
//! the box. Traversal collects all hit candidates along a ray; ordering is
//! left to the caller.

use nalgebra::Vector3;

use crate::raster::response::{splat_response, SplatHit};
use crate::raster::PrimRender;

#[derive(Debug, Clone, Copy)]
struct Node {
    min: Vector3<f64>,
    max: Vector3<f64>,
    /// Child node indices; unused on leaves.
    left: u32,
    right: u32,
    /// Leaf range into `order`; `count == 0` marks an inner node.
    start: u32,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct SplatBvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

fn prim_bounds(pr: &PrimRender) -> (Vector3<f64>, Vector3<f64>) {
    let mut half = Vector3::zeros();
    for axis in 0..3 {
        half[axis] = 3.0
            * (pr.act.scale_u * pr.frame.eu[axis].abs()
                + pr.act.scale_v * pr.frame.ev[axis].abs());
    }
    (pr.center - half, pr.center + half)
}

impl SplatBvh {
    /// Builds over the non-degenerate surfels of a prepared set.
    pub fn build(prim_render: &[Option<PrimRender>]) -> Self {
        let mut ids: Vec<u32> = prim_render
            .iter()
            .enumerate()
            .filter(|(_, pr)| pr.is_some())
            .map(|(i, _)| i as u32)
            .collect();
        let mut bvh = SplatBvh {
            nodes: Vec::new(),
            order: Vec::new(),
        };
        if ids.is_empty() {
            return bvh;
        }
        let bounds: Vec<(Vector3<f64>, Vector3<f64>)> = prim_render
            .iter()
            .map(|pr| {
                pr.as_ref()
                    .map(prim_bounds)
                    .unwrap_or((Vector3::zeros(), Vector3::zeros()))
            })
            .collect();
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
        self.nodes.push(Node {
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
        if count <= LEAF_SIZE || extent[axis] <= 0.0 {
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

    /// Collects every surfel hit along the ray with `t > t_min` into `out`
    /// as `(prim id, hit)` pairs, unordered.
    pub fn collect_hits(
        &self,
        prim_render: &[Option<PrimRender>],
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        out: &mut Vec<(u32, SplatHit)>,
    ) {
        if self.nodes.is_empty() {
            return;
        }
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            // Slab test; f64::min/max drop NaNs from 0 * inf.
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
                    let pr = prim_render[id as usize].as_ref().unwrap();
                    if let Some(hit) = splat_response(
                        &pr.center,
                        &pr.frame,
                        pr.act.scale_u,
                        pr.act.scale_v,
                        origin,
                        dir,
                        t_min,
                    ) {
                        out.push((id, hit));
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
    }
}
