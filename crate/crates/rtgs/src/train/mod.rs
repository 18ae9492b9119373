//! Staged optimization of the three surfel sets against posed images.
//!
//! A run walks four stages on a shared step counter: plain rasterization to
//! settle the diffuse geometry, reflection tracing with the specular hinge,
//! transmittance tracing once a surface mesh has been fused from the learned
//! depth, and finally the exit-depth penalty. All stage boundaries scale
//! together so short runs keep the same proportions.

pub mod adam;
pub mod checkpoint;
pub mod densify;
pub mod metrics;
pub mod pipeline;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::img::Map;
use crate::mesh::{TriangleMesh, TsdfVolume};
use crate::raster::{rasterize, RasterConfig, SortMode};
use crate::scene::init::{init_diffuse_from_points, init_random_in_bbox};
use crate::scene::{Role, SceneBundle, SceneModel};

pub use adam::{adam_update, LearningRates, SetMoments, StepRates};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use densify::{densify_prune, DensifyReport, GradStats, DENSIFY_INTERVAL, DENSIFY_STOP_FRAC};
pub use metrics::{eval_metrics, masked_psnr, mse, psnr, LossLog};
pub use pipeline::{
    frame_losses, render_frame, render_frame_backward, FrameAdjoints, FrameRender, LossActive,
    MeshGuide, RenderSettings, RAY_OFFSET_FRAC,
};

use crate::loss::LossWeights;

/// Full-length stage boundaries. Step counts below these (after scaling)
/// render raster-only, trace reflections, trace transmittance and penalize
/// exit depth respectively.
pub const RASTER_ONLY_STEPS: usize = 3_000;
pub const MESH_EXTRACT_STEP: usize = 20_000;
pub const DEPTH_LOSS_STEP: usize = 40_000;
pub const TOTAL_STEPS: usize = 60_000;

/// Stage boundaries of one run, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    /// Steps below this rasterize only.
    pub raster_only_until: usize,
    /// The surface mesh is fused at this step and transmittance starts.
    pub mesh_extract_at: usize,
    /// The exit-depth penalty starts here.
    pub depth_loss_from: usize,
    pub total: usize,
}

impl Schedule {
    /// The full-length boundaries scaled by `scale` in (0, 1]. Fails when
    /// rounding collapses two boundaries onto the same step.
    pub fn scaled(scale: f64) -> Result<Schedule> {
        if !scale.is_finite() || scale <= 0.0 || scale > 1.0 {
            return Err(Error::validation(format!(
                "schedule scale must be in (0, 1], got {scale}"
            )));
        }
        let at = |steps: usize| (steps as f64 * scale).round() as usize;
        let s = Schedule {
            raster_only_until: at(RASTER_ONLY_STEPS),
            mesh_extract_at: at(MESH_EXTRACT_STEP),
            depth_loss_from: at(DEPTH_LOSS_STEP),
            total: at(TOTAL_STEPS),
        };
        if s.raster_only_until == 0
            || s.raster_only_until >= s.mesh_extract_at
            || s.mesh_extract_at >= s.depth_loss_from
            || s.depth_loss_from >= s.total
        {
            return Err(Error::validation(format!(
                "scale {scale} collapses the stage boundaries \
                 ({}/{}/{}/{})",
                s.raster_only_until, s.mesh_extract_at, s.depth_loss_from, s.total
            )));
        }
        Ok(s)
    }
}

/// What a given step renders and penalizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageFlags {
    pub reflection: bool,
    pub transmittance: bool,
    pub spec_loss: bool,
    pub depth_loss: bool,
    /// True exactly at the step where the surface mesh is fused.
    pub extract_mesh: bool,
}

/// Stage flags for `step` under `s`, before any ablation.
pub fn schedule_stage(step: usize, s: &Schedule) -> StageFlags {
    let reflection = step >= s.raster_only_until;
    StageFlags {
        reflection,
        transmittance: step >= s.mesh_extract_at,
        spec_loss: reflection,
        depth_loss: step >= s.depth_loss_from,
        extract_mesh: step == s.mesh_extract_at,
    }
}

/// Component switches for ablation runs. Dropping the transmittance set also
/// skips mesh fusion, which leaves the exit-depth penalty with nothing to
/// measure; dropping mesh guidance keeps the mesh and the penalty but starts
/// second bounces from the first-bounce depth instead.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ablation {
    pub no_transmittance_set: bool,
    pub no_spec_loss: bool,
    pub no_depth_loss: bool,
    pub no_mesh_guide: bool,
}

impl Ablation {
    pub fn apply(&self, mut flags: StageFlags) -> StageFlags {
        if self.no_transmittance_set {
            flags.transmittance = false;
            flags.extract_mesh = false;
        }
        if self.no_spec_loss {
            flags.spec_loss = false;
        }
        if self.no_depth_loss {
            flags.depth_loss = false;
        }
        flags
    }
}

/// Everything a run carries between steps; exactly what a checkpoint stores.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub model: SceneModel,
    pub diffuse_moments: SetMoments,
    pub reflection_moments: SetMoments,
    pub transmittance_moments: SetMoments,
    /// Fused surface mesh, present once the extraction step has passed.
    pub mesh: Option<TriangleMesh>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn moments(&self, role: Role) -> &SetMoments {
        match role {
            Role::Diffuse => &self.diffuse_moments,
            Role::Reflection => &self.reflection_moments,
            Role::Transmittance => &self.transmittance_moments,
        }
    }

    pub fn moments_mut(&mut self, role: Role) -> &mut SetMoments {
        match role {
            Role::Diffuse => &mut self.diffuse_moments,
            Role::Reflection => &mut self.reflection_moments,
            Role::Transmittance => &mut self.transmittance_moments,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Run-length factor in (0, 1]; scales every stage boundary.
    pub scale: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub rates: LearningRates,
    pub sort: SortMode,
    pub densify: bool,
    /// Adds the image-gradient loss term.
    pub grad_loss: bool,
    pub ablation: Ablation,
    /// Interval checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Initial surfel count of each traced set.
    pub traced_count: usize,
    /// Progress line cadence on stderr; 0 is silent.
    pub progress_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            rates: LearningRates::default(),
            sort: SortMode::CenterDepth,
            densify: true,
            grad_loss: false,
            ablation: Ablation::default(),
            checkpoint_every: 0,
            traced_count: 2_000,
            progress_every: 0,
        }
    }
}

/// Fuses a surface mesh from the diffuse set's depth as rendered into every
/// training view.
pub fn extract_scene_mesh(
    bundle: &SceneBundle,
    model: &SceneModel,
    sort: SortMode,
) -> Result<TriangleMesh> {
    let voxel = TsdfVolume::default_voxel(&bundle.bbox);
    let mut vol = TsdfVolume::new(&bundle.bbox, voxel)?;
    let cfg = RasterConfig {
        sort,
        ..RasterConfig::default()
    };
    for cam in &bundle.cameras {
        let (maps, _) = rasterize(cam, &model.diffuse, cfg);
        vol.integrate(cam, &maps.depth, &maps.alpha);
    }
    let mesh = vol.extract_surface();
    if mesh.is_empty() {
        return Err(Error::validation(
            "surface fusion produced an empty mesh; the depth maps never \
             crossed the fusion threshold",
        ));
    }
    Ok(mesh)
}

/// Runs the staged optimization and leaves `losses.csv`, interval
/// checkpoints and `final.ckpt` in `out_dir`.
pub fn train(bundle: &SceneBundle, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainState> {
    if bundle.view_count() == 0 {
        return Err(Error::validation("cannot train on zero views"));
    }
    let schedule = Schedule::scaled(cfg.scale)?;
    let scene_scale = bundle.bbox.diagonal();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let diffuse = init_diffuse_from_points(&bundle.points, &mut rng)?;
    // Mirror images live outside the physical scene, so the reflection set
    // gets room beyond the box; refracted content stays inside it.
    let refl_box = bundle.bbox.padded(0.5 * scene_scale);
    let reflection = init_random_in_bbox(Role::Reflection, cfg.traced_count, &refl_box, &mut rng);
    let transmittance =
        init_random_in_bbox(Role::Transmittance, cfg.traced_count, &bundle.bbox, &mut rng);
    let mut state = TrainState {
        step: 0,
        diffuse_moments: SetMoments::zeros(diffuse.len()),
        reflection_moments: SetMoments::zeros(reflection.len()),
        transmittance_moments: SetMoments::zeros(transmittance.len()),
        model: SceneModel {
            diffuse,
            reflection,
            transmittance,
        },
        mesh: None,
        rng,
    };

    let targets: Vec<Map> = bundle.images.iter().map(|img| img.to_map()).collect();
    let mut log = LossLog::create(&out_dir.join("losses.csv"))?;
    let mut guide: Option<MeshGuide> = None;
    let mut stats = [GradStats::default(), GradStats::default(), GradStats::default()];
    for (st, role) in stats.iter_mut().zip(ROLES) {
        st.reset(state.model.set(role).len());
    }
    let densify_until = (DENSIFY_STOP_FRAC * schedule.total as f64) as usize;

    while state.step < schedule.total {
        let flags = cfg.ablation.apply(schedule_stage(state.step, &schedule));
        if flags.extract_mesh && state.mesh.is_none() {
            let mesh = extract_scene_mesh(bundle, &state.model, cfg.sort)?;
            guide = Some(MeshGuide::new(mesh.clone()));
            state.mesh = Some(mesh);
        }

        let view = state.rng.gen_range(0..bundle.view_count());
        let settings = RenderSettings {
            reflection: flags.reflection,
            transmittance: flags.transmittance,
            mesh_guide: !cfg.ablation.no_mesh_guide,
            sort: cfg.sort,
            offset: RAY_OFFSET_FRAC * scene_scale,
        };
        let cam = &bundle.cameras[view];
        let mask = &bundle.masks[view];
        let frame = render_frame(&state.model, cam, Some(mask), guide.as_ref(), &settings);
        let active = LossActive {
            spec: flags.spec_loss,
            depth: flags.depth_loss,
            grad: cfg.grad_loss,
        };
        let (losses, adj) = frame_losses(
            &frame,
            &targets[view],
            mask,
            bundle.mono_normals[view].as_ref(),
            &cfg.weights,
            &active,
        );
        if !losses.total.is_finite() {
            let dump = out_dir.join("abort.ckpt");
            save_checkpoint(&state, &dump)?;
            return Err(Error::validation(format!(
                "loss diverged at step {} (state dumped to {})",
                state.step,
                dump.display()
            )));
        }
        let grads = render_frame_backward(&state.model, cam, &frame, &adj, &settings);
        log.append(state.step, &losses)?;

        let t_frac = state.step as f64 / schedule.total as f64;
        let rates = cfg.rates.at(scene_scale, t_frac);
        let t = (state.step + 1) as u64;
        for ((st, role), set_grads) in stats.iter_mut().zip(ROLES).zip([
            &grads.diffuse,
            &grads.reflection,
            &grads.transmittance,
        ]) {
            st.accumulate(set_grads);
            let (set, moments) = state.set_and_moments(role);
            adam_update(set, set_grads, moments, &rates, t);
        }
        state.step += 1;

        if cfg.densify && state.step % DENSIFY_INTERVAL == 0 && state.step < densify_until {
            for (st, role) in stats.iter_mut().zip(ROLES) {
                let (set, moments) = state.set_and_moments(role);
                densify_prune(set, moments, st, scene_scale);
                st.reset(state.model.set(role).len());
            }
        }

        if cfg.progress_every > 0 && state.step % cfg.progress_every == 0 {
            eprintln!(
                "step {}/{}  total {:.5}  rgb {:.5}",
                state.step, schedule.total, losses.total, losses.rgb
            );
        }
        if cfg.checkpoint_every > 0
            && state.step % cfg.checkpoint_every == 0
            && state.step < schedule.total
        {
            let path = out_dir.join(format!("ckpt_{:06}.bin", state.step));
            save_checkpoint(&state, &path)?;
        }
    }

    log.finish()?;
    save_checkpoint(&state, &out_dir.join("final.ckpt"))?;
    Ok(state)
}

const ROLES: [Role; 3] = [Role::Diffuse, Role::Reflection, Role::Transmittance];

impl TrainState {
    /// The set and its moment buffer together, for callers that update both.
    fn set_and_moments(&mut self, role: Role) -> (&mut crate::scene::GaussianSet, &mut SetMoments) {
        match role {
            Role::Diffuse => (&mut self.model.diffuse, &mut self.diffuse_moments),
            Role::Reflection => (&mut self.model.reflection, &mut self.reflection_moments),
            Role::Transmittance => (&mut self.model.transmittance, &mut self.transmittance_moments),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule_keeps_the_published_boundaries() {
        let s = Schedule::scaled(1.0).unwrap();
        assert_eq!(s.raster_only_until, 3_000);
        assert_eq!(s.mesh_extract_at, 20_000);
        assert_eq!(s.depth_loss_from, 40_000);
        assert_eq!(s.total, 60_000);
    }

    #[test]
    fn scaled_schedule_rounds_each_boundary() {
        let s = Schedule::scaled(0.05).unwrap();
        assert_eq!(s.raster_only_until, 150);
        assert_eq!(s.mesh_extract_at, 1_000);
        assert_eq!(s.depth_loss_from, 2_000);
        assert_eq!(s.total, 3_000);
    }

    #[test]
    fn degenerate_scales_are_rejected() {
        for scale in [0.0, -1.0, 1.5, f64::NAN, f64::INFINITY] {
            assert!(Schedule::scaled(scale).is_err(), "accepted {scale}");
        }
        // Small enough to round every boundary to nearly nothing.
        assert!(Schedule::scaled(1e-5).is_err());
    }

    #[test]
    fn stages_switch_on_at_their_boundaries() {
        let s = Schedule::scaled(1.0).unwrap();
        let f = schedule_stage(0, &s);
        assert_eq!(f, StageFlags::default());
        let f = schedule_stage(s.raster_only_until, &s);
        assert!(f.reflection && f.spec_loss);
        assert!(!f.transmittance && !f.depth_loss && !f.extract_mesh);
        let f = schedule_stage(s.mesh_extract_at, &s);
        assert!(f.reflection && f.transmittance && f.extract_mesh);
        assert!(!f.depth_loss);
        let f = schedule_stage(s.mesh_extract_at + 1, &s);
        assert!(f.transmittance && !f.extract_mesh);
        let f = schedule_stage(45_000, &s);
        assert!(f.reflection && f.transmittance && f.spec_loss && f.depth_loss);
        assert!(!f.extract_mesh);
    }

    #[test]
    fn ablations_cut_their_component_only() {
        let s = Schedule::scaled(1.0).unwrap();
        let late = schedule_stage(50_000, &s);
        let at_extract = schedule_stage(s.mesh_extract_at, &s);

        let ab = Ablation {
            no_transmittance_set: true,
            ..Ablation::default()
        };
        let f = ab.apply(at_extract);
        assert!(!f.transmittance && !f.extract_mesh);
        assert!(f.reflection && f.spec_loss);
        // The depth penalty stays nominally on; without a mesh it just
        // never finds an exit to compare against.
        assert!(ab.apply(late).depth_loss);

        let ab = Ablation {
            no_spec_loss: true,
            ..Ablation::default()
        };
        let f = ab.apply(late);
        assert!(!f.spec_loss && f.reflection && f.transmittance && f.depth_loss);

        let ab = Ablation {
            no_depth_loss: true,
            ..Ablation::default()
        };
        let f = ab.apply(late);
        assert!(!f.depth_loss && f.transmittance);

        let ab = Ablation {
            no_mesh_guide: true,
            ..Ablation::default()
        };
        assert_eq!(ab.apply(late), late);
    }

    #[test]
    fn moment_accessors_follow_the_role() {
        let state = TrainState {
            step: 0,
            model: SceneModel::empty(),
            diffuse_moments: SetMoments::zeros(1),
            reflection_moments: SetMoments::zeros(2),
            transmittance_moments: SetMoments::zeros(3),
            mesh: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        assert_eq!(state.moments(Role::Diffuse).prims.len(), 1);
        assert_eq!(state.moments(Role::Reflection).prims.len(), 2);
        assert_eq!(state.moments(Role::Transmittance).prims.len(), 3);
    }
}
