//! Dataset IO: `scene.json` manifests and ASCII PLY point clouds.
//!
//! A dataset directory holds one `scene.json` plus the image, mask, normal
//! and point files it references (paths are relative to the directory).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{self, Image};
use crate::scene::{Aabb, Camera, SceneBundle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid world-to-camera transform, 16 values row-major.
    pub world_to_camera: Vec<f64>,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mono_normal: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneJson {
    pub cameras: Vec<CameraJson>,
    /// Relative path of the seed point cloud (ASCII PLY).
    pub points: String,
    /// [min_x, min_y, min_z, max_x, max_y, max_z]
    pub bbox: [f64; 6],
}

impl CameraJson {
    pub fn to_camera(&self, path: &Path) -> Result<Camera> {
        if self.world_to_camera.len() != 16 {
            return Err(Error::parse(
                path,
                format!(
                    "world_to_camera needs 16 values, got {}",
                    self.world_to_camera.len()
                ),
            ));
        }
        let m = &self.world_to_camera;
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::parse(
                path,
                "world_to_camera bottom row must be [0, 0, 0, 1]",
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn from_camera(cam: &Camera, image: String) -> Self {
        let r = &cam.rotation;
        let t = &cam.translation;
        CameraJson {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera: vec![
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                t.x,
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                t.y,
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                t.z,
                0.0,
                0.0,
                0.0,
                1.0,
            ],
            image,
            mask: None,
            mono_normal: None,
        }
    }
}

fn load_image_any(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => img::load_pfm(path),
        Some("png") => img::load_png_linear(path),
        _ => Err(Error::parse(path, "unsupported image extension")),
    }
}

/// Loads a dataset directory (must contain `scene.json`).
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let manifest_path = dir.join("scene.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SceneJson = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&manifest_path, format!("bad scene.json: {e}")))?;

    if manifest.cameras.is_empty() {
        return Err(Error::parse(&manifest_path, "scene has no cameras"));
    }
    let bb = manifest.bbox;
    let bbox = Aabb::new(
        Vector3::new(bb[0], bb[1], bb[2]),
        Vector3::new(bb[3], bb[4], bb[5]),
    );
    if !(0..3).all(|i| bbox.min[i] < bbox.max[i]) {
        return Err(Error::parse(&manifest_path, "bbox min must be below max"));
    }

    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut mono_normals = Vec::new();
    for cj in &manifest.cameras {
        let cam = cj.to_camera(&manifest_path)?;
        let image = load_image_any(&dir.join(&cj.image))?;
        if image.width != cam.width || image.height != cam.height {
            return Err(Error::validation(format!(
                "image {} is {}x{}, camera says {}x{}",
                cj.image, image.width, image.height, cam.width, cam.height
            )));
        }
        let mask = match &cj.mask {
            Some(rel) => {
                let m = img::load_png_mask(&dir.join(rel))?;
                if m.width != cam.width || m.height != cam.height {
                    return Err(Error::validation(format!(
                        "mask {} does not match camera resolution",
                        rel
                    )));
                }
                m
            }
            None => Image::new(cam.width, cam.height, 1),
        };
        let mono = match &cj.mono_normal {
            Some(rel) => {
                let n = img::load_pfm(&dir.join(rel))?;
                if n.width != cam.width || n.height != cam.height || n.channels != 3 {
                    return Err(Error::validation(format!(
                        "normal map {} does not match camera resolution",
                        rel
                    )));
                }
                Some(n)
            }
            None => None,
        };
        cameras.push(cam);
        images.push(image);
        masks.push(mask);
        mono_normals.push(mono);
    }

    let points = load_points_ply(&dir.join(&manifest.points))?;
    Ok(SceneBundle {
        cameras,
        images,
        masks,
        mono_normals,
        points,
        bbox,
    })
}

/// Writes a `scene.json` manifest.
pub fn save_manifest(dir: &Path, manifest: &SceneJson) -> Result<PathBuf> {
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::parse(&path, format!("serialize failed: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an ASCII PLY with x/y/z floats and red/green/blue uchars.
/// Colors come back linearized to [0, 1].
pub fn load_points_ply(path: &Path) -> Result<Vec<(Vector3<f64>, [f32; 3])>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();

    let header_line = |lines: &mut std::io::Lines<BufReader<fs::File>>| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, "truncated ply header"))?
            .map_err(|e| Error::io(path, e))
    };

    let magic = header_line(&mut lines)?;
    if magic.trim() != "ply" {
        return Err(Error::parse(path, "missing ply magic"));
    }
    loop {
        let line = header_line(&mut lines)?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(Error::parse(path, "only ascii ply is supported"));
                }
            }
            Some("element") => {
                if parts.next() == Some("vertex") {
                    vertex_count = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .or(Some(0));
                }
            }
            Some("property") => {
                let _ty = parts.next();
                if let Some(name) = parts.next() {
                    props.push(name.to_string());
                }
            }
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| Error::parse(path, "ply has no vertex element"))?;
    let needed = ["x", "y", "z", "red", "green", "blue"];
    let idx: Vec<usize> = needed
        .iter()
        .map(|n| {
            props
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| Error::parse(path, format!("ply is missing property {n}")))
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, "ply has fewer vertices than declared"))?
            .map_err(|e| Error::io(path, e))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("bad ply value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() < props.len() {
            return Err(Error::parse(path, "short ply vertex row"));
        }
        let pos = Vector3::new(values[idx[0]], values[idx[1]], values[idx[2]]);
        let mut rgb = [0.0f32; 3];
        for c in 0..3 {
            rgb[c] = img::srgb_to_linear(values[idx[3 + c]] / 255.0) as f32;
        }
        points.push((pos, rgb));
    }
    Ok(points)
}

/// Writes an ASCII PLY with positions and linear colors (sRGB-encoded bytes).
pub fn save_points_ply(path: &Path, points: &[(Vector3<f64>, [f32; 3])]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    emit("ply\nformat ascii 1.0\n".to_string())?;
    emit(format!("element vertex {}\n", points.len()))?;
    emit(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            .to_string(),
    )?;
    for (pos, rgb) in points {
        let bytes: Vec<u8> = rgb
            .iter()
            .map(|&c| (img::linear_to_srgb(c.clamp(0.0, 1.0) as f64) * 255.0).round() as u8)
            .collect();
        emit(format!(
            "{} {} {} {} {} {}\n",
            pos.x, pos.y, pos.z, bytes[0], bytes[1], bytes[2]
        ))?;
    }
    Ok(())
}
