//! Versioned binary snapshots of the full training state. Writing and
//! re-reading a state is bit-exact, so seeded runs can resume or be
//! compared checkpoint-to-checkpoint.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grads::PrimGrad;
use crate::mesh::TriangleMesh;
use crate::scene::{sh_coeffs_for_role, GaussianSet, Role, SceneModel, SplatPrimitive};
use crate::train::adam::SetMoments;
use crate::train::TrainState;

const MAGIC: [u8; 4] = *b"RTGS";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn vec3(&mut self, v: &Vector3<f64>) {
        for k in 0..3 {
            self.f64(v[k]);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // A generous sanity bound so corrupt counts fail cleanly instead of
        // attempting huge allocations.
        if n > 1 << 32 {
            return Err(Error::Checkpoint(format!(
                "implausible {what} count {n} at byte {}",
                self.pos - 8
            )));
        }
        Ok(n as usize)
    }
}

fn write_prim(w: &mut Writer, prim: &SplatPrimitive) {
    w.vec3(&prim.center);
    w.vec3(&prim.tan_u);
    w.vec3(&prim.tan_v);
    w.f64(prim.log_scales[0]);
    w.f64(prim.log_scales[1]);
    w.f64(prim.opacity_logit);
    for sh in &prim.sh {
        for c in 0..3 {
            w.f64(sh[c]);
        }
    }
    w.f64(prim.rough_logit);
    for c in 0..3 {
        w.f64(prim.f0_logit[c]);
    }
    w.f64(prim.ks_logit);
}

fn read_prim(r: &mut Reader, coeffs: usize) -> Result<SplatPrimitive> {
    let center = r.vec3()?;
    let tan_u = r.vec3()?;
    let tan_v = r.vec3()?;
    let log_scales = [r.f64()?, r.f64()?];
    let opacity_logit = r.f64()?;
    let mut sh = vec![[0.0; 3]; coeffs];
    for coeff in sh.iter_mut() {
        for c in coeff.iter_mut() {
            *c = r.f64()?;
        }
    }
    let rough_logit = r.f64()?;
    let f0_logit = [r.f64()?, r.f64()?, r.f64()?];
    let ks_logit = r.f64()?;
    Ok(SplatPrimitive {
        center,
        tan_u,
        tan_v,
        log_scales,
        opacity_logit,
        sh,
        rough_logit,
        f0_logit,
        ks_logit,
    })
}

fn write_set(w: &mut Writer, set: &GaussianSet) {
    w.u64(set.len() as u64);
    w.u64(sh_coeffs_for_role(set.role) as u64);
    for prim in &set.prims {
        write_prim(w, prim);
    }
}

fn read_set(r: &mut Reader, role: Role) -> Result<GaussianSet> {
    let count = r.count("surfel")?;
    let coeffs = r.count("coefficient")?;
    if coeffs != sh_coeffs_for_role(role) {
        return Err(Error::Checkpoint(format!(
            "set {role:?} stores {coeffs} SH coefficients, expected {}",
            sh_coeffs_for_role(role)
        )));
    }
    let mut set = GaussianSet::new(role);
    set.prims.reserve(count);
    for _ in 0..count {
        set.prims.push(read_prim(r, coeffs)?);
    }
    Ok(set)
}

fn write_grad(w: &mut Writer, g: &PrimGrad, coeffs: usize) {
    w.vec3(&g.center);
    w.vec3(&g.tan_u);
    w.vec3(&g.tan_v);
    w.f64(g.log_scales[0]);
    w.f64(g.log_scales[1]);
    w.f64(g.opacity_logit);
    for k in 0..coeffs {
        for c in 0..3 {
            w.f64(g.sh[k][c]);
        }
    }
    w.f64(g.rough_logit);
    for c in 0..3 {
        w.f64(g.f0_logit[c]);
    }
    w.f64(g.ks_logit);
}

fn read_grad(r: &mut Reader, coeffs: usize) -> Result<PrimGrad> {
    let mut g = PrimGrad {
        center: r.vec3()?,
        tan_u: r.vec3()?,
        tan_v: r.vec3()?,
        ..PrimGrad::default()
    };
    g.log_scales = [r.f64()?, r.f64()?];
    g.opacity_logit = r.f64()?;
    for k in 0..coeffs {
        for c in 0..3 {
            g.sh[k][c] = r.f64()?;
        }
    }
    g.rough_logit = r.f64()?;
    g.f0_logit = [r.f64()?, r.f64()?, r.f64()?];
    g.ks_logit = r.f64()?;
    Ok(g)
}

fn write_moments(w: &mut Writer, moments: &SetMoments, coeffs: usize) {
    w.u64(moments.prims.len() as u64);
    for pm in &moments.prims {
        write_grad(w, &pm.m, coeffs);
        write_grad(w, &pm.v, coeffs);
    }
}

fn read_moments(r: &mut Reader, expect: usize, coeffs: usize) -> Result<SetMoments> {
    let count = r.count("moment")?;
    if count != expect {
        return Err(Error::Checkpoint(format!(
            "moment buffer holds {count} entries for {expect} surfels"
        )));
    }
    let mut out = SetMoments::zeros(count);
    for pm in out.prims.iter_mut() {
        pm.m = read_grad(r, coeffs)?;
        pm.v = read_grad(r, coeffs)?;
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u64(state.step as u64);
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u128(state.rng.get_word_pos());
    for role in [Role::Diffuse, Role::Reflection, Role::Transmittance] {
        write_set(&mut w, state.model.set(role));
    }
    for role in [Role::Diffuse, Role::Reflection, Role::Transmittance] {
        write_moments(&mut w, state.moments(role), sh_coeffs_for_role(role));
    }
    match &state.mesh {
        None => w.u8(0),
        Some(mesh) => {
            w.u8(1);
            w.u64(mesh.vertices.len() as u64);
            for v in &mesh.vertices {
                w.vec3(v);
            }
            w.u64(mesh.triangles.len() as u64);
            for t in &mesh.triangles {
                for &i in t {
                    w.u32(i);
                }
            }
        }
    }
    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let step = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let model = SceneModel {
        diffuse: read_set(&mut r, Role::Diffuse)?,
        reflection: read_set(&mut r, Role::Reflection)?,
        transmittance: read_set(&mut r, Role::Transmittance)?,
    };
    let diffuse_moments = read_moments(
        &mut r,
        model.diffuse.len(),
        sh_coeffs_for_role(Role::Diffuse),
    )?;
    let reflection_moments = read_moments(
        &mut r,
        model.reflection.len(),
        sh_coeffs_for_role(Role::Reflection),
    )?;
    let transmittance_moments = read_moments(
        &mut r,
        model.transmittance.len(),
        sh_coeffs_for_role(Role::Transmittance),
    )?;

    let mesh = match r.u8()? {
        0 => None,
        1 => {
            let vcount = r.count("vertex")?;
            let mut vertices = Vec::with_capacity(vcount);
            for _ in 0..vcount {
                vertices.push(r.vec3()?);
            }
            let tcount = r.count("triangle")?;
            let mut triangles = Vec::with_capacity(tcount);
            for _ in 0..tcount {
                triangles.push([r.u32()?, r.u32()?, r.u32()?]);
            }
            Some(TriangleMesh {
                vertices,
                triangles,
            })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad mesh flag {other} at byte {}",
                r.pos - 1
            )))
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after byte {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    Ok(TrainState {
        step,
        model,
        diffuse_moments,
        reflection_moments,
        transmittance_moments,
        mesh,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grad_eq(x: &PrimGrad, y: &PrimGrad) -> bool {
        x.center == y.center
            && x.tan_u == y.tan_u
            && x.tan_v == y.tan_v
            && x.log_scales == y.log_scales
            && x.opacity_logit == y.opacity_logit
            && x.sh == y.sh
            && x.rough_logit == y.rough_logit
            && x.f0_logit == y.f0_logit
            && x.ks_logit == y.ks_logit
    }

    fn moments_match(a: &SetMoments, b: &SetMoments) -> bool {
        a.prims.len() == b.prims.len()
            && a.prims
                .iter()
                .zip(b.prims.iter())
                .all(|(pa, pb)| grad_eq(&pa.m, &pb.m) && grad_eq(&pa.v, &pb.v))
    }

    fn random_state(seed: u64) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = SceneModel::empty();
        for role in [Role::Diffuse, Role::Reflection, Role::Transmittance] {
            let coeffs = sh_coeffs_for_role(role);
            let set = model.set_mut(role);
            for _ in 0..5 {
                let mut sh = vec![[0.0; 3]; coeffs];
                for coeff in sh.iter_mut() {
                    for c in coeff.iter_mut() {
                        *c = rng.gen_range(-1.0..1.0);
                    }
                }
                set.prims.push(SplatPrimitive {
                    center: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    tan_u: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    tan_v: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    log_scales: [rng.gen(), rng.gen()],
                    opacity_logit: rng.gen(),
                    sh,
                    rough_logit: rng.gen(),
                    f0_logit: [rng.gen(), rng.gen(), rng.gen()],
                    ks_logit: rng.gen(),
                });
            }
        }
        let mut moments = |count: usize, coeffs: usize| {
            let mut m = SetMoments::zeros(count);
            for pm in m.prims.iter_mut() {
                pm.m.center = Vector3::new(rng.gen(), rng.gen(), rng.gen());
                for k in 0..coeffs {
                    pm.v.sh[k][1] = rng.gen();
                }
            }
            m
        };
        let diffuse_moments = moments(5, 16);
        let reflection_moments = moments(5, 1);
        let transmittance_moments = moments(5, 1);
        let mesh = Some(TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
        });
        let mut state_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        let _: u64 = state_rng.gen(); // advance so the word position is nonzero
        TrainState {
            step: 1234,
            model,
            diffuse_moments,
            reflection_moments,
            transmittance_moments,
            mesh,
            rng: state_rng,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut state = random_state(3);
        save_checkpoint(&state, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, state.step);
        for role in [Role::Diffuse, Role::Reflection, Role::Transmittance] {
            assert_eq!(loaded.model.set(role).prims, state.model.set(role).prims);
            assert!(moments_match(loaded.moments(role), state.moments(role)));
        }
        assert_eq!(loaded.mesh, state.mesh);
        assert_eq!(loaded.rng, state.rng);
        // Both RNGs continue identically.
        let a: u64 = state.rng.gen();
        let b: u64 = loaded.rng.gen();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_reports_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let state = random_state(4);
        save_checkpoint(&state, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated at byte"), "got: {msg}");
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let state = random_state(5);
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version low byte
        fs::write(&path, &bytes).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("unsupported version"), "got: {msg}");

        fs::write(&path, b"plainly not a checkpoint").unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("not a checkpoint"), "got: {msg}");
    }
}
