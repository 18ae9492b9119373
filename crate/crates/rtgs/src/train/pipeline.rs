//! One rendered frame of the full pipeline and its adjoint.
//!
//! The forward pass rasterizes the diffuse set into material maps, lifts
//! the depth map to world positions, spawns reflection rays at covered
//! pixels and transmittance rays at masked ones, and composes the final
//! color per pixel. Every intermediate is cached so the backward pass can
//! push a color adjoint through the shading chain, the traced-ray chain and
//! the rasterizer onto all three surfel sets.

use nalgebra::Vector3;

use crate::bsdf::{
    brdf_weight, brdf_weight_backward, btdf_weight, btdf_weight_backward, compose_final,
    compose_final_backward, roughness_remap_grad, BrdfWeight, BtdfWeight, MIN_COS, REMAP_FLOOR,
};
use crate::grads::ModelGrads;
use crate::img::{Image, Map};
use crate::loss::{
    loss_depth, loss_depth_backward, loss_grad, loss_grad_backward, loss_mono, loss_mono_backward,
    loss_normal, loss_normal_backward, loss_rgb, loss_rgb_backward, loss_spec, loss_spec_backward,
    LossBreakdown, LossWeights,
};
use crate::mesh::{TriBvh, TriangleMesh};
use crate::raster::depth::{
    normal_from_depth, normal_from_depth_backward, position_from_depth,
    position_from_depth_backward, DepthNormals, PosMap,
};
use crate::raster::{
    prepare_prims, rasterize, rasterize_backward, MaterialBuffers, MaterialGrads, RasterCache,
    RasterConfig, SortMode,
};
use crate::scene::{Camera, SceneModel};
use crate::trace::bvh::SplatBvh;
use crate::trace::{
    reflect_dir, reflect_dir_backward, trace_batch, trace_batch_backward, TraceConfig, TraceGrad,
    TraceResult,
};

/// Secondary-ray origins are nudged off the surface by this fraction of the
/// scene extent.
pub const RAY_OFFSET_FRAC: f64 = 1e-3;

/// Extracted surface mesh with its ray query structure.
#[derive(Debug)]
pub struct MeshGuide {
    pub mesh: TriangleMesh,
    pub bvh: TriBvh,
}

impl MeshGuide {
    pub fn new(mesh: TriangleMesh) -> Self {
        let bvh = TriBvh::build(&mesh);
        MeshGuide { mesh, bvh }
    }
}

/// Frame-level render controls.
#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub reflection: bool,
    pub transmittance: bool,
    /// Start the second transmittance bounce at the mesh exit depth; when
    /// false it starts at the first-bounce splat depth instead.
    pub mesh_guide: bool,
    pub sort: SortMode,
    /// World-space offset nudging secondary ray origins off the surface.
    pub offset: f64,
}

impl RenderSettings {
    /// Every pass enabled, with the offset sized for the scene.
    pub fn full(scene_scale: f64) -> Self {
        RenderSettings {
            reflection: true,
            transmittance: true,
            mesh_guide: true,
            sort: SortMode::CenterDepth,
            offset: RAY_OFFSET_FRAC * scene_scale,
        }
    }
}

/// Per-pixel shading intermediates kept for the backward pass.
#[derive(Debug, Clone, Copy)]
struct ShadeCache {
    /// False when the pixel bypassed shading (uncovered, zero normal or
    /// grazing view); the composed color is then the raw diffuse color.
    shaded: bool,
    normal: Vector3<f64>,
    wo: Vector3<f64>,
    /// Gradient of the effective GGX alpha w.r.t. the blended roughness
    /// (zero while the blend sits outside the remap domain).
    remap_grad: f64,
    wr: BrdfWeight,
    wt: BtdfWeight,
}

impl ShadeCache {
    fn bypass() -> Self {
        ShadeCache {
            shaded: false,
            normal: Vector3::zeros(),
            wo: Vector3::zeros(),
            remap_grad: 0.0,
            wr: brdf_weight(0.0, 1.0, [0.0; 3]),
            wt: btdf_weight(0.0, [0.0; 3], false),
        }
    }
}

/// One batch of secondary rays and everything needed to replay it.
#[derive(Debug, Default)]
struct TracePass {
    /// Row-major pixel index of each ray.
    pixels: Vec<usize>,
    rays: Vec<(Vector3<f64>, Vector3<f64>)>,
    results: Vec<TraceResult>,
    hits: Vec<Vec<u32>>,
}

impl TracePass {
    fn len(&self) -> usize {
        self.rays.len()
    }
}

/// The two-segment transmittance pass.
#[derive(Debug, Default)]
struct TransPass {
    first: TracePass,
    /// Index into `second` for first rays continuing past the back surface.
    cont: Vec<Option<usize>>,
    second: TracePass,
}

/// Forward render of one view with the caches its backward pass replays.
pub struct FrameRender {
    /// Composed color (premultiplied by coverage, like the diffuse map).
    pub color: Map,
    pub maps: MaterialBuffers,
    pub pos: PosMap,
    pub dn: DepthNormals,
    /// First-bounce transmittance depth per pixel (zero where undefined).
    pub trans_depth: Map,
    /// Mesh exit depth per pixel (`None` where absent or unmasked).
    pub mesh_exit: Vec<Option<f64>>,
    /// Traced reflection color per pixel.
    pub refl_color: Vec<[f64; 3]>,
    /// Combined transmitted color per pixel.
    pub trans_color: Vec<[f64; 3]>,
    cache: RasterCache,
    shade: Vec<ShadeCache>,
    refl: TracePass,
    trans: TransPass,
}

fn map_vec3(m: &Map, x: usize, y: usize) -> Vector3<f64> {
    Vector3::new(m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2))
}

fn map_rgb(m: &Map, x: usize, y: usize) -> [f64; 3] {
    [m.get(x, y, 0), m.get(x, y, 1), m.get(x, y, 2)]
}

pub fn render_frame(
    model: &SceneModel,
    cam: &Camera,
    mask: Option<&Image>,
    mesh: Option<&MeshGuide>,
    settings: &RenderSettings,
) -> FrameRender {
    let (w, h) = (cam.width, cam.height);
    let raster_cfg = RasterConfig {
        sort: settings.sort,
        ..RasterConfig::default()
    };
    let (maps, cache) = rasterize(cam, &model.diffuse, raster_cfg);
    let pos = position_from_depth(cam, &maps.depth, &maps.alpha);
    let dn = normal_from_depth(&pos);
    let trace_cfg = TraceConfig::default();

    let in_mask = |x: usize, y: usize| mask.is_some_and(|m| m.get(x, y, 0) > 0.5);

    // Classify every pixel and cache its shading weights. With both traced
    // routes off the frame is the plain rasterization and shading is skipped
    // wholesale.
    let mut shade = vec![ShadeCache::bypass(); w * h];
    if settings.reflection || settings.transmittance {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !pos.valid[i] {
                    continue;
                }
                let n = map_vec3(&maps.normal, x, y);
                if n.norm_squared() < 0.25 {
                    // Fragments cancelled out; the blend left no usable normal.
                    continue;
                }
                let wo = -map_vec3(&pos.dirs, x, y);
                let cos_o = n.dot(&wo);
                if cos_o <= MIN_COS {
                    continue;
                }
                let rough = maps.rough.get(x, y, 0);
                let clamped = rough.clamp(REMAP_FLOOR, 1.0);
                let (alpha_eff, remap_grad) =
                    roughness_remap_grad(clamped).expect("clamped into the remap domain");
                let f0 = map_rgb(&maps.f0, x, y);
                shade[i] = ShadeCache {
                    shaded: true,
                    normal: n,
                    wo,
                    remap_grad: if (REMAP_FLOOR..=1.0).contains(&rough) {
                        remap_grad
                    } else {
                        0.0
                    },
                    wr: brdf_weight(cos_o, alpha_eff, f0),
                    wt: btdf_weight(cos_o, f0, in_mask(x, y)),
                };
            }
        }
    }

    // Reflection rays at every shaded pixel.
    let mut refl = TracePass::default();
    if settings.reflection {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let cell = &shade[i];
                if !cell.shaded {
                    continue;
                }
                let p = map_vec3(&pos.pos, x, y);
                refl.pixels.push(i);
                refl.rays.push((
                    p + cell.normal * settings.offset,
                    reflect_dir(&cell.normal, &cell.wo),
                ));
            }
        }
        let prims = prepare_prims(&model.reflection);
        let bvh = SplatBvh::build(&prims);
        let (results, hits) = trace_batch(&model.reflection, &prims, &bvh, &refl.rays, &trace_cfg);
        refl.results = results;
        refl.hits = hits;
    }

    // Transmittance: mesh exit depths, the interior segment, and the
    // continuation over the diffuse set behind the back surface.
    let mut trans = TransPass::default();
    let mut mesh_exit = vec![None; w * h];
    if settings.transmittance && mask.is_some() {
        if let Some(guide) = mesh {
            let origin = cam.origin();
            for y in 0..h {
                for x in 0..w {
                    if !in_mask(x, y) {
                        continue;
                    }
                    let dir = map_vec3(&pos.dirs, x, y);
                    mesh_exit[y * w + x] = guide
                        .bvh
                        .first_second(&guide.mesh, &origin, &dir)
                        .and_then(|(_, d2)| d2);
                    let i = y * w + x;
                    if shade[i].shaded {
                        let p = map_vec3(&pos.pos, x, y);
                        trans.first.pixels.push(i);
                        trans
                            .first
                            .rays
                            .push((p - shade[i].normal * settings.offset, dir));
                    }
                }
            }
            let prims = prepare_prims(&model.transmittance);
            let bvh = SplatBvh::build(&prims);
            let (results, hits) =
                trace_batch(&model.transmittance, &prims, &bvh, &trans.first.rays, &trace_cfg);
            trans.first.results = results;
            trans.first.hits = hits;

            // Second bounce, detached from the first: the ray restarts past
            // the back surface and gathers the diffuse field behind it.
            trans.cont = vec![None; trans.first.len()];
            for k in 0..trans.first.len() {
                let i = trans.first.pixels[k];
                let (first_origin, dir) = trans.first.rays[k];
                let restart = if settings.mesh_guide {
                    mesh_exit[i].map(|d2| origin + dir * (d2 + settings.offset))
                } else {
                    let r = &trans.first.results[k];
                    r.depth_valid
                        .then(|| first_origin + dir * (r.depth + settings.offset))
                };
                if let Some(o2) = restart {
                    trans.cont[k] = Some(trans.second.len());
                    trans.second.pixels.push(i);
                    trans.second.rays.push((o2, dir));
                }
            }
            // The surfel snapshot the rasterizer already built doubles as the
            // trace view of the diffuse set.
            let bvh = SplatBvh::build(&cache.prim_render);
            let (results, hits) = trace_batch(
                &model.diffuse,
                &cache.prim_render,
                &bvh,
                &trans.second.rays,
                &trace_cfg,
            );
            trans.second.results = results;
            trans.second.hits = hits;
        }
    }

    // Scatter the traced colors into dense per-pixel buffers.
    let mut refl_color = vec![[0.0; 3]; w * h];
    for (k, &i) in refl.pixels.iter().enumerate() {
        refl_color[i] = refl.results[k].color;
    }
    let mut trans_color = vec![[0.0; 3]; w * h];
    let mut trans_depth = Map::new(w, h, 1);
    for (k, &i) in trans.first.pixels.iter().enumerate() {
        let r = &trans.first.results[k];
        let c_out = trans.cont[k]
            .map(|j| trans.second.results[j].color)
            .unwrap_or([0.0; 3]);
        for c in 0..3 {
            trans_color[i][c] = r.color[c] + (1.0 - r.alpha) * c_out[c];
        }
        if r.depth_valid {
            trans_depth.data[i] = r.depth;
        }
    }

    // Compose the final color.
    let mut color = maps.color.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let cell = &shade[i];
            if !cell.shaded {
                continue;
            }
            let out = compose_final(
                map_rgb(&maps.color, x, y),
                maps.ks.get(x, y, 0),
                cell.wr.value,
                refl_color[i],
                cell.wt.value,
                trans_color[i],
            );
            for c in 0..3 {
                color.set(x, y, c, out[c]);
            }
        }
    }

    FrameRender {
        color,
        maps,
        pos,
        dn,
        trans_depth,
        mesh_exit,
        refl_color,
        trans_color,
        cache,
        shade,
        refl,
        trans,
    }
}

/// Adjoints of the frame outputs the losses touch.
pub struct FrameAdjoints {
    pub d_color: Map,
    pub d_normal: Map,
    pub d_dn: Map,
    pub d_ks: Map,
    pub d_trans_depth: Map,
}

impl FrameAdjoints {
    pub fn zeros(w: usize, h: usize) -> Self {
        FrameAdjoints {
            d_color: Map::new(w, h, 3),
            d_normal: Map::new(w, h, 3),
            d_dn: Map::new(w, h, 3),
            d_ks: Map::new(w, h, 1),
            d_trans_depth: Map::new(w, h, 1),
        }
    }
}

pub fn render_frame_backward(
    model: &SceneModel,
    cam: &Camera,
    frame: &FrameRender,
    adj: &FrameAdjoints,
    settings: &RenderSettings,
) -> ModelGrads {
    let (w, h) = (cam.width, cam.height);
    let trace_cfg = TraceConfig::default();
    let mut grads = ModelGrads::zeros_like(model);
    let mut d_maps = MaterialGrads::new(w, h);
    let mut d_pos = Map::new(w, h, 3);
    d_maps.ks = adj.d_ks.clone();
    d_maps.normal = adj.d_normal.clone();

    // Color adjoint through the per-pixel composition.
    let mut d_cr = vec![[0.0; 3]; w * h];
    let mut d_ct = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dc = map_rgb(&adj.d_color, x, y);
            let cell = &frame.shade[i];
            if !cell.shaded {
                for c in 0..3 {
                    d_maps.color.add(x, y, c, dc[c]);
                }
                continue;
            }
            let g = compose_final_backward(
                map_rgb(&frame.maps.color, x, y),
                frame.maps.ks.get(x, y, 0),
                cell.wr.value,
                frame.refl_color[i],
                cell.wt.value,
                frame.trans_color[i],
                dc,
            );
            for c in 0..3 {
                d_maps.color.add(x, y, c, g.d_cd[c]);
            }
            d_maps.ks.add(x, y, 0, g.d_ks);
            let (d_cos_r, d_alpha_eff, d_f0_r) = brdf_weight_backward(&cell.wr, g.d_wr);
            let (d_cos_t, d_f0_t) = btdf_weight_backward(&cell.wt, g.d_wt);
            d_maps.rough.add(x, y, 0, d_alpha_eff * cell.remap_grad);
            for c in 0..3 {
                d_maps.f0.add(x, y, c, d_f0_r[c] + d_f0_t[c]);
            }
            // cos_o = n . wo with the view ray fixed.
            let d_cos = d_cos_r + d_cos_t;
            for c in 0..3 {
                d_maps.normal.add(x, y, c, d_cos * cell.wo[c]);
            }
            d_cr[i] = g.d_cr;
            d_ct[i] = g.d_ct;
        }
    }

    // Reflection rays: traced-set parameters plus the chain back through
    // ray origin (position map) and direction (normal map).
    if frame.refl.len() > 0 {
        let adjoints: Vec<TraceGrad> = frame
            .refl
            .pixels
            .iter()
            .map(|&i| TraceGrad {
                d_color: d_cr[i],
                ..TraceGrad::default()
            })
            .collect();
        let prims = prepare_prims(&model.reflection);
        let (set_grads, ray_grads) = trace_batch_backward(
            &model.reflection,
            &prims,
            &frame.refl.rays,
            &frame.refl.hits,
            &trace_cfg,
            &adjoints,
        );
        grads.reflection.add_assign(&set_grads);
        for (k, &i) in frame.refl.pixels.iter().enumerate() {
            let (x, y) = (i % w, i / w);
            let cell = &frame.shade[i];
            let rg = &ray_grads[k];
            let mut d_n = rg.d_origin * settings.offset;
            d_n += reflect_dir_backward(&cell.normal, &cell.wo, &rg.d_dir);
            for c in 0..3 {
                d_pos.add(x, y, c, rg.d_origin[c]);
                d_maps.normal.add(x, y, c, d_n[c]);
            }
        }
    }

    // Transmittance: the combination C_in + (1 - A_in) * C_out splits the
    // adjoint between the two segments; the second segment's origin is
    // detached, so only its surfel parameters receive gradients.
    if frame.trans.first.len() > 0 {
        let mut first_adj = vec![TraceGrad::default(); frame.trans.first.len()];
        let mut second_adj = vec![TraceGrad::default(); frame.trans.second.len()];
        for (k, &i) in frame.trans.first.pixels.iter().enumerate() {
            let (x, y) = (i % w, i / w);
            let c_out = frame.trans.cont[k]
                .map(|j| frame.trans.second.results[j].color)
                .unwrap_or([0.0; 3]);
            let a_in = frame.trans.first.results[k].alpha;
            let mut d_a = 0.0;
            for c in 0..3 {
                d_a -= d_ct[i][c] * c_out[c];
            }
            first_adj[k] = TraceGrad {
                d_color: d_ct[i],
                d_alpha: d_a,
                d_depth: adj.d_trans_depth.get(x, y, 0),
            };
            if let Some(j) = frame.trans.cont[k] {
                for c in 0..3 {
                    second_adj[j].d_color[c] = (1.0 - a_in) * d_ct[i][c];
                }
            }
        }

        let prims = prepare_prims(&model.transmittance);
        let (set_grads, ray_grads) = trace_batch_backward(
            &model.transmittance,
            &prims,
            &frame.trans.first.rays,
            &frame.trans.first.hits,
            &trace_cfg,
            &first_adj,
        );
        grads.transmittance.add_assign(&set_grads);
        for (k, &i) in frame.trans.first.pixels.iter().enumerate() {
            let (x, y) = (i % w, i / w);
            let rg = &ray_grads[k];
            // origin = p - offset * n; the direction is the fixed view ray.
            for c in 0..3 {
                d_pos.add(x, y, c, rg.d_origin[c]);
                d_maps.normal.add(x, y, c, -settings.offset * rg.d_origin[c]);
            }
        }

        if frame.trans.second.len() > 0 {
            let (set_grads, _) = trace_batch_backward(
                &model.diffuse,
                &frame.cache.prim_render,
                &frame.trans.second.rays,
                &frame.trans.second.hits,
                &trace_cfg,
                &second_adj,
            );
            grads.diffuse.add_assign(&set_grads);
        }
    }

    // Depth-normal chain, then positions fold onto the depth map.
    normal_from_depth_backward(&frame.pos, &frame.dn, &adj.d_dn, &mut d_pos);
    position_from_depth_backward(&frame.pos, &d_pos, &mut d_maps.depth);

    let raster_grads = rasterize_backward(cam, &model.diffuse, &frame.cache, &frame.maps, &d_maps);
    grads.diffuse.add_assign(&raster_grads);
    grads
}

/// Which optional losses run this step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossActive {
    pub spec: bool,
    pub depth: bool,
    pub grad: bool,
}

/// Evaluates the active losses on a frame and collects their adjoints,
/// each scaled by its weight so `total` differentiates to the output.
pub fn frame_losses(
    frame: &FrameRender,
    target: &Map,
    mask: &Image,
    mono: Option<&Image>,
    weights: &LossWeights,
    active: &LossActive,
) -> (LossBreakdown, FrameAdjoints) {
    let (w, h) = (frame.color.width, frame.color.height);
    let mut adj = FrameAdjoints::zeros(w, h);
    let mut b = LossBreakdown::default();

    let (rgb, ssim) = loss_rgb(&frame.color, target);
    b.rgb = rgb;
    loss_rgb_backward(&ssim, &frame.color, target, 1.0, &mut adj.d_color);

    if active.spec {
        b.spec = loss_spec(&frame.maps.ks, mask);
        loss_spec_backward(&frame.maps.ks, mask, weights.spec, &mut adj.d_ks);
    }
    if active.depth {
        b.depth = loss_depth(&frame.trans_depth, &frame.mesh_exit, mask);
        loss_depth_backward(
            &frame.trans_depth,
            &frame.mesh_exit,
            mask,
            weights.depth,
            &mut adj.d_trans_depth,
        );
    }
    b.normal = loss_normal(&frame.maps.normal, &frame.dn, &frame.maps.alpha);
    loss_normal_backward(
        &frame.maps.normal,
        &frame.dn,
        &frame.maps.alpha,
        weights.normal,
        &mut adj.d_normal,
        &mut adj.d_dn,
    );
    if let Some(mono) = mono {
        b.mono = loss_mono(&frame.maps.normal, mono, &frame.maps.alpha);
        loss_mono_backward(
            &frame.maps.normal,
            mono,
            &frame.maps.alpha,
            weights.mono,
            &mut adj.d_normal,
        );
    }
    if active.grad {
        b.grad = loss_grad(&frame.color, target);
        loss_grad_backward(&frame.color, target, weights.grad, &mut adj.d_color);
    }

    b.total = b.rgb
        + weights.spec * b.spec
        + weights.depth * b.depth
        + weights.normal * b.normal
        + weights.mono * b.mono
        + weights.grad * b.grad;
    (b, adj)
}
