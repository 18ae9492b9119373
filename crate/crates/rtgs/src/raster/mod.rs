//! Tiled differentiable rasterizer for the diffuse surfel set.
//!
//! Surfels are binned into fixed screen tiles using conservative footprints,
//! sorted per tile by center depth (optionally re-sorted per pixel by exact
//! hit distance), evaluated with the exact ray/plane response and blended
//! front to back into premultiplied material buffers: color, ray distance,
//! normal, roughness, base reflectance, specular weight and accumulated
//! opacity. The normal buffer is renormalized after blending; everything
//! else stays premultiplied.
//!
//! Tiles are processed in parallel; gradients are accumulated per tile and
//! folded in tile order, so results do not depend on the worker count.

pub mod composite;
pub mod depth;
pub mod project;
pub mod response;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::grads::{PrimGrad, SetGrads};
use crate::img::Map;
use crate::scene::{
    Activated, Camera, GaussianSet, Role, SplatFrame, SplatPrimitive, NEAR_PLANE,
};
use crate::sh;
use crate::threading;
use composite::{blend_backward, blend_forward, BlendFrag};
use project::{project_splat, Footprint};
use response::{splat_response, splat_response_backward};

pub const TILE: usize = 16;

/// Fragment ordering rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortMode {
    /// Global per-tile order by camera-space center depth (default).
    CenterDepth,
    /// Per-pixel order by exact hit distance (study mode).
    HitDepth,
}

#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    pub sort: SortMode,
    /// Transmittance early-stop threshold (0 disables).
    pub early_stop: f64,
    /// Minimum hit distance along the pixel ray.
    pub t_min: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            sort: SortMode::CenterDepth,
            early_stop: composite::EARLY_STOP,
            t_min: NEAR_PLANE,
        }
    }
}

/// Premultiplied shading buffers.
#[derive(Debug, Clone)]
pub struct MaterialBuffers {
    pub color: Map,
    pub depth: Map,
    /// Renormalized blended normal (zero where coverage is empty).
    pub normal: Map,
    pub rough: Map,
    pub f0: Map,
    pub ks: Map,
    pub alpha: Map,
}

impl MaterialBuffers {
    pub fn new(w: usize, h: usize) -> Self {
        MaterialBuffers {
            color: Map::new(w, h, 3),
            depth: Map::new(w, h, 1),
            normal: Map::new(w, h, 3),
            rough: Map::new(w, h, 1),
            f0: Map::new(w, h, 3),
            ks: Map::new(w, h, 1),
            alpha: Map::new(w, h, 1),
        }
    }
}

/// Adjoints of [`MaterialBuffers`].
pub type MaterialGrads = MaterialBuffers;

/// Per-surfel values fixed for one pass.
#[derive(Debug, Clone, Copy)]
pub struct PrimRender {
    pub center: Vector3<f64>,
    pub frame: SplatFrame,
    pub act: Activated,
}

/// Builds the per-pass surfel snapshot (`None` for degenerate frames).
pub fn prepare_prims(set: &GaussianSet) -> Vec<Option<PrimRender>> {
    threading::run(|| {
        set.prims
            .par_iter()
            .map(|p| {
                crate::scene::splat_frame(p.tan_u, p.tan_v).map(|frame| PrimRender {
                    center: p.center,
                    frame,
                    act: p.activate(),
                })
            })
            .collect()
    })
}

struct TileCache {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Surfel ids overlapping the tile, in composition order.
    candidates: Vec<u32>,
    /// Per tile pixel (row-major), start offset into `frags`; one extra
    /// entry holds the total.
    frag_start: Vec<u32>,
    /// Consumed fragments as indices into `candidates`.
    frags: Vec<u32>,
}

/// Everything needed to run the pass backwards.
pub struct RasterCache {
    pub cfg: RasterConfig,
    pub prim_render: Vec<Option<PrimRender>>,
    tiles: Vec<TileCache>,
    /// Length of the blended normal before renormalization, per pixel.
    norm_len: Map,
}

impl RasterCache {
    /// Surfel ids consumed at one pixel, in blend order.
    pub fn pixel_frags(&self, px: usize, py: usize) -> Vec<u32> {
        let tile = self
            .tiles
            .iter()
            .find(|t| px >= t.x0 && px <= t.x1 && py >= t.y0 && py <= t.y1)
            .expect("pixel outside every tile");
        let local = (py - tile.y0) * (tile.x1 - tile.x0 + 1) + (px - tile.x0);
        let lo = tile.frag_start[local] as usize;
        let hi = tile.frag_start[local + 1] as usize;
        tile.frags[lo..hi]
            .iter()
            .map(|&ci| tile.candidates[ci as usize])
            .collect()
    }
}

/// Number of blended attribute channels:
/// rgb(3) + distance(1) + normal(3) + rough(1) + f0(3) + ks(1).
const ATTRS: usize = 12;

fn fragment_attrs(
    pr: &PrimRender,
    prim: &SplatPrimitive,
    basis: &[f64; sh::MAX_COEFFS],
    dir: &Vector3<f64>,
    t: f64,
) -> [f64; ATTRS] {
    let (color, _) = sh::eval_color(&prim.sh, basis);
    let flip = if pr.frame.normal.dot(dir) > 0.0 { -1.0 } else { 1.0 };
    let n = pr.frame.normal * flip;
    [
        color[0],
        color[1],
        color[2],
        t,
        n.x,
        n.y,
        n.z,
        pr.act.rough,
        pr.act.f0[0],
        pr.act.f0[1],
        pr.act.f0[2],
        pr.act.ks,
    ]
}

/// Rasterizes the set into material buffers. The cache holds the per-tile
/// fragment lists for [`rasterize_backward`]. Only the diffuse set carries
/// rasterizable material maps; traced sets go through `trace` instead.
pub fn rasterize(cam: &Camera, set: &GaussianSet, cfg: RasterConfig) -> (MaterialBuffers, RasterCache) {
    assert_eq!(set.role, Role::Diffuse, "rasterize expects the diffuse set");
    let (w, h) = (cam.width, cam.height);
    let prim_render = prepare_prims(set);
    let footprints: Vec<Option<Footprint>> = threading::run(|| {
        set.prims
            .par_iter()
            .zip(prim_render.par_iter())
            .map(|(_, pr)| {
                pr.as_ref()
                    .and_then(|pr| project_splat(cam, &pr.center, &pr.frame, pr.act.scale_u, pr.act.scale_v))
            })
            .collect()
    });

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let origin = cam.origin();

    let mut maps = MaterialBuffers::new(w, h);
    let mut norm_len = Map::new(w, h, 1);

    struct TileOut {
        cache: TileCache,
        // Row-major per-pixel map values for the tile.
        values: Vec<[f64; ATTRS + 2]>, // attrs + alpha + norm_len
    }

    let tile_outs: Vec<TileOut> = threading::run(|| {
        (0..tiles_x * tiles_y)
            .into_par_iter()
            .map(|tile_idx| {
                let tx = tile_idx % tiles_x;
                let ty = tile_idx / tiles_x;
                let x0 = tx * TILE;
                let y0 = ty * TILE;
                let x1 = (x0 + TILE - 1).min(w - 1);
                let y1 = (y0 + TILE - 1).min(h - 1);

                // Candidates sorted by (center depth, id).
                let mut candidates: Vec<u32> = footprints
                    .iter()
                    .enumerate()
                    .filter(|(_, fp)| {
                        fp.map(|fp| fp.intersects_tile(x0, y0, x1, y1)).unwrap_or(false)
                    })
                    .map(|(i, _)| i as u32)
                    .collect();
                candidates.sort_unstable_by(|&a, &b| {
                    let ka = footprints[a as usize].unwrap().depth_key;
                    let kb = footprints[b as usize].unwrap().depth_key;
                    ka.total_cmp(&kb).then(a.cmp(&b))
                });

                let n_px = (x1 - x0 + 1) * (y1 - y0 + 1);
                let mut cache = TileCache {
                    x0,
                    y0,
                    x1,
                    y1,
                    candidates,
                    frag_start: Vec::with_capacity(n_px + 1),
                    frags: Vec::new(),
                };
                let mut values = vec![[0.0; ATTRS + 2]; n_px];

                let mut scratch: Vec<(u32, BlendFrag<ATTRS>)> = Vec::new();
                for py in y0..=y1 {
                    for px in x0..=x1 {
                        cache.frag_start.push(cache.frags.len() as u32);
                        let dir = cam.ray_dir(px as f64, py as f64);
                        let basis = sh::basis([dir.x, dir.y, dir.z], sh_count(set));
                        scratch.clear();
                        for (ci, &prim_id) in cache.candidates.iter().enumerate() {
                            let pr = prim_render[prim_id as usize].as_ref().unwrap();
                            let Some(hit) = splat_response(
                                &pr.center,
                                &pr.frame,
                                pr.act.scale_u,
                                pr.act.scale_v,
                                &origin,
                                &dir,
                                cfg.t_min,
                            ) else {
                                continue;
                            };
                            let prim = &set.prims[prim_id as usize];
                            let attrs = fragment_attrs(pr, prim, &basis, &dir, hit.t);
                            scratch.push((
                                ci as u32,
                                BlendFrag {
                                    raw_alpha: pr.act.opacity * hit.g,
                                    attrs,
                                },
                            ));
                        }
                        if cfg.sort == SortMode::HitDepth {
                            scratch.sort_by(|a, b| {
                                a.1.attrs[3]
                                    .total_cmp(&b.1.attrs[3])
                                    .then(cache.candidates[a.0 as usize].cmp(&cache.candidates[b.0 as usize]))
                            });
                        }
                        let frags: Vec<BlendFrag<ATTRS>> =
                            scratch.iter().map(|(_, f)| *f).collect();
                        let out = blend_forward(&frags, cfg.early_stop);
                        for (ci, _) in scratch.iter().take(out.used) {
                            cache.frags.push(*ci);
                        }
                        let v = &mut values[(py - y0) * (x1 - x0 + 1) + (px - x0)];
                        v[..ATTRS].copy_from_slice(&out.attrs);
                        v[ATTRS] = out.alpha;
                        // Renormalize the blended normal; remember its length.
                        let m = Vector3::new(out.attrs[4], out.attrs[5], out.attrs[6]);
                        let len = m.norm();
                        if len > 1e-12 {
                            let n = m / len;
                            v[4] = n.x;
                            v[5] = n.y;
                            v[6] = n.z;
                            v[ATTRS + 1] = len;
                        } else {
                            v[4] = 0.0;
                            v[5] = 0.0;
                            v[6] = 0.0;
                            v[ATTRS + 1] = 0.0;
                        }
                    }
                }
                cache.frag_start.push(cache.frags.len() as u32);
                TileOut { cache, values }
            })
            .collect()
    });

    // Scatter tile results into the maps (fixed order).
    let mut tiles = Vec::with_capacity(tile_outs.len());
    for out in tile_outs {
        let tc = &out.cache;
        let tw = tc.x1 - tc.x0 + 1;
        for py in tc.y0..=tc.y1 {
            for px in tc.x0..=tc.x1 {
                let v = &out.values[(py - tc.y0) * tw + (px - tc.x0)];
                for c in 0..3 {
                    maps.color.set(px, py, c, v[c]);
                    maps.normal.set(px, py, c, v[4 + c]);
                    maps.f0.set(px, py, c, v[8 + c]);
                }
                maps.depth.set(px, py, 0, v[3]);
                maps.rough.set(px, py, 0, v[7]);
                maps.ks.set(px, py, 0, v[11]);
                maps.alpha.set(px, py, 0, v[ATTRS]);
                norm_len.set(px, py, 0, v[ATTRS + 1]);
            }
        }
        tiles.push(out.cache);
    }

    (
        maps,
        RasterCache {
            cfg,
            prim_render,
            tiles,
            norm_len,
        },
    )
}

fn sh_count(set: &GaussianSet) -> usize {
    crate::scene::sh_coeffs_for_role(set.role)
}

/// Activation chain: adjoints of activated values onto raw logits.
fn route_activated(
    pr: &PrimRender,
    prim: &SplatPrimitive,
    basis: &[f64; sh::MAX_COEFFS],
    d_attrs: &[f64; ATTRS],
    d_opacity: f64,
    grad: &mut PrimGrad,
) {
    // Color through the SH decode (clamp recomputed from the forward value).
    let (_, clamped) = sh::eval_color(&prim.sh, basis);
    let n_coeffs = prim.sh.len();
    let mut d_sh = vec![[0.0; 3]; n_coeffs];
    sh::eval_color_backward([d_attrs[0], d_attrs[1], d_attrs[2]], clamped, basis, &mut d_sh);
    for (k, d) in d_sh.iter().enumerate() {
        for c in 0..3 {
            grad.sh[k][c] += d[c];
        }
    }
    // Logistic activations.
    let o = pr.act.opacity;
    grad.opacity_logit += d_opacity * o * (1.0 - o);
    if !pr.act.rough_clamped {
        let r = pr.act.rough;
        grad.rough_logit += d_attrs[7] * r * (1.0 - r);
    }
    for c in 0..3 {
        let f = pr.act.f0[c];
        grad.f0_logit[c] += d_attrs[8 + c] * f * (1.0 - f);
    }
    let ks = pr.act.ks;
    grad.ks_logit += d_attrs[11] * ks * (1.0 - ks);
}

/// Runs the pass backwards: adjoints of the material buffers onto raw surfel
/// parameters. `maps` must be the buffers the forward pass produced.
pub fn rasterize_backward(
    cam: &Camera,
    set: &GaussianSet,
    cache: &RasterCache,
    maps: &MaterialBuffers,
    d_maps: &MaterialGrads,
) -> SetGrads {
    let origin = cam.origin();
    let n_coeffs = sh_count(set);

    // Per tile: list of (prim id, grad) in a fixed accumulation order.
    let tile_grads: Vec<Vec<(u32, PrimGrad)>> = threading::run(|| {
        cache
            .tiles
            .par_iter()
            .map(|tc| {
                let mut slot: Vec<u32> = vec![u32::MAX; tc.candidates.len()];
                let mut touched: Vec<(u32, PrimGrad)> = Vec::new();
                let tw = tc.x1 - tc.x0 + 1;
                for py in tc.y0..=tc.y1 {
                    for px in tc.x0..=tc.x1 {
                        let pix = (py - tc.y0) * tw + (px - tc.x0);
                        let f0 = tc.frag_start[pix] as usize;
                        let f1 = tc.frag_start[pix + 1] as usize;
                        if f0 == f1 {
                            continue;
                        }
                        let dir = cam.ray_dir(px as f64, py as f64);
                        let basis = sh::basis([dir.x, dir.y, dir.z], n_coeffs);

                        // Rebuild the consumed fragment run.
                        let mut frags: Vec<BlendFrag<ATTRS>> = Vec::with_capacity(f1 - f0);
                        let mut hits = Vec::with_capacity(f1 - f0);
                        for &ci in &tc.frags[f0..f1] {
                            let prim_id = tc.candidates[ci as usize];
                            let pr = cache.prim_render[prim_id as usize].as_ref().unwrap();
                            let hit = splat_response(
                                &pr.center,
                                &pr.frame,
                                pr.act.scale_u,
                                pr.act.scale_v,
                                &origin,
                                &dir,
                                cache.cfg.t_min,
                            )
                            .expect("cached fragment must still hit");
                            let prim = &set.prims[prim_id as usize];
                            frags.push(BlendFrag {
                                raw_alpha: pr.act.opacity * hit.g,
                                attrs: fragment_attrs(pr, prim, &basis, &dir, hit.t),
                            });
                            hits.push(hit);
                        }

                        // Assemble map adjoints for this pixel.
                        let mut d_attrs = [0.0; ATTRS];
                        for c in 0..3 {
                            d_attrs[c] = d_maps.color.get(px, py, c);
                            d_attrs[8 + c] = d_maps.f0.get(px, py, c);
                        }
                        d_attrs[3] = d_maps.depth.get(px, py, 0);
                        d_attrs[7] = d_maps.rough.get(px, py, 0);
                        d_attrs[11] = d_maps.ks.get(px, py, 0);
                        let d_alpha = d_maps.alpha.get(px, py, 0);
                        // Renormalization backward for the normal channels:
                        // the map stores n = m / |m|, so pull the adjoint
                        // back through the normalize.
                        let len = cache.norm_len.get(px, py, 0);
                        if len > 1e-12 {
                            let g = Vector3::new(
                                d_maps.normal.get(px, py, 0),
                                d_maps.normal.get(px, py, 1),
                                d_maps.normal.get(px, py, 2),
                            );
                            let n_hat = Vector3::new(
                                maps.normal.get(px, py, 0),
                                maps.normal.get(px, py, 1),
                                maps.normal.get(px, py, 2),
                            );
                            let d_m = (g - n_hat * n_hat.dot(&g)) / len;
                            d_attrs[4] = d_m.x;
                            d_attrs[5] = d_m.y;
                            d_attrs[6] = d_m.z;
                        }

                        blend_backward(
                            &frags,
                            cache.cfg.early_stop,
                            &d_attrs,
                            d_alpha,
                            |i, d_raw, d_x| {
                                let ci = tc.frags[f0 + i];
                                let prim_id = tc.candidates[ci as usize];
                                let pr = cache.prim_render[prim_id as usize].as_ref().unwrap();
                                let prim = &set.prims[prim_id as usize];
                                let hit = &hits[i];

                                // Allocate / fetch the accumulation slot.
                                let s = if slot[ci as usize] == u32::MAX {
                                    slot[ci as usize] = touched.len() as u32;
                                    touched.push((prim_id, PrimGrad::default()));
                                    touched.len() - 1
                                } else {
                                    slot[ci as usize] as usize
                                };
                                let grad = &mut touched[s].1;

                                let d_opacity = d_raw * hit.g;
                                let d_g_alpha = d_raw * pr.act.opacity;
                                route_activated(pr, prim, &basis, &d_x, d_opacity, grad);

                                // Geometry chain: response + frame.
                                let flip =
                                    if pr.frame.normal.dot(&dir) > 0.0 { -1.0 } else { 1.0 };
                                let d_n_attr =
                                    Vector3::new(d_x[4], d_x[5], d_x[6]) * flip;
                                let rg = splat_response_backward(
                                    &pr.center,
                                    &pr.frame,
                                    pr.act.scale_u,
                                    pr.act.scale_v,
                                    &origin,
                                    &dir,
                                    hit,
                                    d_g_alpha,
                                    d_x[3],
                                );
                                let (d_tu, d_tv) = crate::scene::splat_frame_backward(
                                    &pr.frame,
                                    prim.tan_v,
                                    rg.d_eu,
                                    rg.d_ev,
                                    rg.d_normal + d_n_attr,
                                );
                                grad.center += rg.d_center;
                                grad.tan_u += d_tu;
                                grad.tan_v += d_tv;
                                grad.log_scales[0] += rg.d_log_su;
                                grad.log_scales[1] += rg.d_log_sv;
                            },
                        );
                    }
                }
                touched
            })
            .collect()
    });

    let mut grads = SetGrads::zeros_like(set);
    for tile in tile_grads {
        for (prim_id, g) in tile {
            grads.prims[prim_id as usize].add_assign(&g);
        }
    }
    grads
}
