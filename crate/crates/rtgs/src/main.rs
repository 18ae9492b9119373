//! Command-line driver: synthetic dataset generation, training, rendering,
//! evaluation and mesh export. Worker count is capped by the `RTGS_THREADS`
//! environment variable.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rtgs::img::{save_pfm, save_png_srgb, Map};
use rtgs::raster::SortMode;
use rtgs::scene::io::load_scene;
use rtgs::scene::SceneBundle;
use rtgs::synth::{build_preset, generate_dataset, DatasetConfig};
use rtgs::train::{
    eval_metrics, load_checkpoint, masked_psnr, render_frame, train, Ablation, FrameRender,
    MeshGuide, RenderSettings, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(name = "rtgs", version, about = "Gaussian surfel renderer and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from an analytic preset.
    Synth(SynthArgs),
    /// Optimize the surfel sets against a scene directory.
    Train(TrainArgs),
    /// Render one training view from a checkpoint.
    Render(RenderArgs),
    /// Report per-view PSNR/SSIM of a checkpoint as CSV.
    Eval(EvalArgs),
    /// Export the fused surface mesh from a checkpoint.
    Mesh(MeshArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Preset name: mirror, slab or combo.
    #[arg(long)]
    preset: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Square image resolution.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Reference samples per pixel.
    #[arg(long, default_value_t = 64)]
    spp: usize,
    /// Seed points sampled from the analytic surfaces.
    #[arg(long, default_value_t = 4000)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory holding scene.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for losses.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Run-length factor in (0, 1]; scales every stage boundary.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the periodic clone/split/prune passes.
    #[arg(long)]
    no_densify: bool,
    /// Ablation: drop the transmittance set (and mesh fusion).
    #[arg(long)]
    no_transmittance_set: bool,
    /// Ablation: drop the specularity hinge loss.
    #[arg(long)]
    no_spec_loss: bool,
    /// Ablation: drop the exit-depth penalty.
    #[arg(long)]
    no_depth_loss: bool,
    /// Ablation: start second bounces from the first-bounce depth instead
    /// of the mesh exit.
    #[arg(long)]
    no_mesh_guide: bool,
    /// Add the image-gradient loss term.
    #[arg(long)]
    grad_loss: bool,
    /// Primitive sort order during rasterization.
    #[arg(long, value_enum, default_value_t = SortArg::Center)]
    sort: SortArg,
    /// Interval checkpoint cadence in steps (0 writes only the final one).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Initial surfel count of each traced set.
    #[arg(long, default_value_t = 2000)]
    traced_count: usize,
    /// Progress line cadence on stderr (0 is silent).
    #[arg(long, default_value_t = 100)]
    progress_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene directory providing the camera poses.
    #[arg(long)]
    scene: PathBuf,
    /// Training view index.
    #[arg(long)]
    view: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also dump the raw material maps as PFM files into this directory.
    #[arg(long)]
    dump_maps: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// CSV output path; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output path; .obj writes ASCII OBJ, anything else binary STL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SortArg {
    /// Global per-tile order by camera-space center depth.
    Center,
    /// Per-pixel order by exact hit distance.
    Hit,
}

impl From<SortArg> for SortMode {
    fn from(s: SortArg) -> SortMode {
        match s {
            SortArg::Center => SortMode::CenterDepth,
            SortArg::Hit => SortMode::HitDepth,
        }
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => run_synth(&args),
        Command::Train(args) => run_train(&args),
        Command::Render(args) => run_render(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Mesh(args) => run_mesh(&args),
    }
}

fn run_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let scene = build_preset(&args.preset)?;
    let cfg = DatasetConfig {
        views: args.views,
        width: args.size,
        height: args.size,
        spp: args.spp,
        points: args.points,
        seed: args.seed,
    };
    generate_dataset(&scene, &cfg, &args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} views of '{}' to {}",
        args.views,
        args.preset,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let bundle = load_scene(&args.scene)?;
    let cfg = TrainConfig {
        scale: args.scale,
        seed: args.seed,
        sort: args.sort.into(),
        densify: !args.no_densify,
        grad_loss: args.grad_loss,
        ablation: Ablation {
            no_transmittance_set: args.no_transmittance_set,
            no_spec_loss: args.no_spec_loss,
            no_depth_loss: args.no_depth_loss,
            no_mesh_guide: args.no_mesh_guide,
        },
        checkpoint_every: args.checkpoint_every,
        traced_count: args.traced_count,
        progress_every: args.progress_every,
        ..TrainConfig::default()
    };
    let state = train(&bundle, &cfg, &args.out)?;
    println!(
        "finished {} steps; {} diffuse / {} reflection / {} transmittance surfels; \
         checkpoint at {}",
        state.step,
        state.model.diffuse.len(),
        state.model.reflection.len(),
        state.model.transmittance.len(),
        args.out.join("final.ckpt").display()
    );
    Ok(())
}

/// Renders `view` with everything the checkpoint supports: reflections
/// always, transmittance when a fused mesh is present.
fn render_view(bundle: &SceneBundle, state: &TrainState, view: usize) -> anyhow::Result<FrameRender> {
    if view >= bundle.view_count() {
        bail!("view {view} out of range ({} views)", bundle.view_count());
    }
    let guide = state.mesh.clone().map(MeshGuide::new);
    let settings = RenderSettings {
        transmittance: guide.is_some(),
        ..RenderSettings::full(bundle.bbox.diagonal())
    };
    Ok(render_frame(
        &state.model,
        &bundle.cameras[view],
        Some(&bundle.masks[view]),
        guide.as_ref(),
        &settings,
    ))
}

fn run_render(args: &RenderArgs) -> anyhow::Result<()> {
    let bundle = load_scene(&args.scene)?;
    let state = load_checkpoint(&args.ckpt)?;
    let frame = render_view(&bundle, &state, args.view)?;
    save_png_srgb(&args.out, &frame.color.to_image())?;
    println!("wrote {}", args.out.display());
    if let Some(dir) = &args.dump_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let maps: [(&str, &Map); 7] = [
            ("color", &frame.maps.color),
            ("depth", &frame.maps.depth),
            ("normal", &frame.maps.normal),
            ("rough", &frame.maps.rough),
            ("f0", &frame.maps.f0),
            ("ks", &frame.maps.ks),
            ("alpha", &frame.maps.alpha),
        ];
        for (name, map) in maps {
            save_pfm(&dir.join(format!("{name}.pfm")), &map.to_image())?;
        }
        println!("dumped material maps to {}", dir.display());
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let bundle = load_scene(&args.scene)?;
    let state = load_checkpoint(&args.ckpt)?;
    let mut rows = String::from("view,psnr,ssim,masked_psnr\n");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut masked = Vec::new();
    for view in 0..bundle.view_count() {
        let frame = render_view(&bundle, &state, view)?;
        let target = bundle.images[view].to_map();
        let (p, s) = eval_metrics(&frame.color, &target);
        psnr_sum += p;
        ssim_sum += s;
        let m = masked_psnr(&frame.color, &target, &bundle.masks[view]);
        if let Some(m) = m {
            masked.push(m);
        }
        rows.push_str(&format!(
            "{view},{p:.4},{s:.6},{}\n",
            m.map_or(String::new(), |m| format!("{m:.4}"))
        ));
    }
    let n = bundle.view_count() as f64;
    rows.push_str(&format!(
        "mean,{:.4},{:.6},{}\n",
        psnr_sum / n,
        ssim_sum / n,
        if masked.is_empty() {
            String::new()
        } else {
            format!("{:.4}", masked.iter().sum::<f64>() / masked.len() as f64)
        }
    ));
    match &args.out {
        Some(path) => {
            fs::write(path, rows).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rows}"),
    }
    Ok(())
}

fn run_mesh(args: &MeshArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&args.ckpt)?;
    let Some(mesh) = &state.mesh else {
        bail!(
            "checkpoint {} holds no mesh; train past the extraction stage \
             (without --no-transmittance-set) first",
            args.ckpt.display()
        );
    };
    if args.out.extension().is_some_and(|e| e == "obj") {
        mesh.save_obj(&args.out)?;
    } else {
        mesh.save_stl(&args.out)?;
    }
    println!(
        "wrote {} ({} vertices, {} triangles)",
        args.out.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}
