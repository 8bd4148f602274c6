//! GaussianSet checkpoints.
//!
//! Little-endian binary: header `SPLC`, u32 version, u64 count, u32 sh
//! degree, u32 k_ref, u32 height, u32 width; then per-Gaussian f32 records
//! in field declaration order (d, q, sh, scale, opacity) with the u32
//! provenance indices; then one JSON object with the shared intrinsics and
//! the reference-view poses.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sh::basis_len;
use super::{GaussianSet, PixelGaussian, SplatError};
use crate::geometry::{CameraIntrinsics, CameraPose, IntrinsicsJson, PoseJson};
use crate::scalar::Scalar;
use nalgebra::{Vector3, Vector4};

const MAGIC: &[u8; 4] = b"SPLC";
const VERSION: u32 = 1;

/// A loaded checkpoint. Gaussian parameters live at file precision; cameras
/// come back at f64 and can be cast down by the caller.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub set: GaussianSet<f32>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub poses: Vec<CameraPose<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CameraBlock {
    intrinsics: IntrinsicsJson,
    poses: Vec<PoseJson>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SplatError> {
        if self.at + n > self.buf.len() {
            return Err(SplatError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SplatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SplatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, SplatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    set: &GaussianSet<S>,
    k: &CameraIntrinsics<S>,
    poses: &[CameraPose<S>],
) -> Result<(), SplatError> {
    if poses.len() != set.k_ref as usize {
        return Err(SplatError::Checkpoint(format!(
            "{} poses for k_ref {}",
            poses.len(),
            set.k_ref
        )));
    }
    let coeffs = set.sh_coeffs();
    let mut buf = Vec::with_capacity(32 + set.len() * (4 * (9 + coeffs * 3) + 8));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&set.sh_degree.to_le_bytes());
    buf.extend_from_slice(&set.k_ref.to_le_bytes());
    buf.extend_from_slice(&set.height.to_le_bytes());
    buf.extend_from_slice(&set.width.to_le_bytes());
    let f = |buf: &mut Vec<u8>, v: S| buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    for g in &set.gaussians {
        f(&mut buf, g.d);
        for &v in g.q.iter() {
            f(&mut buf, v);
        }
        for &v in &g.sh {
            f(&mut buf, v);
        }
        for &v in g.scale.iter() {
            f(&mut buf, v);
        }
        f(&mut buf, g.opacity);
        buf.extend_from_slice(&g.source_view.to_le_bytes());
        buf.extend_from_slice(&g.source_pixel.to_le_bytes());
    }
    let cameras = CameraBlock {
        intrinsics: IntrinsicsJson::from_intrinsics(k),
        poses: poses.iter().map(PoseJson::from_pose).collect(),
    };
    buf.extend_from_slice(
        serde_json::to_string(&cameras)
            .map_err(|e| SplatError::Checkpoint(e.to_string()))?
            .as_bytes(),
    );
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, SplatError> {
    let data = fs::read(path)?;
    let mut cur = Cursor { buf: &data, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(SplatError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(SplatError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u64()? as usize;
    let sh_degree = cur.u32()?;
    let k_ref = cur.u32()?;
    let height = cur.u32()?;
    let width = cur.u32()?;
    if sh_degree > 3 {
        return Err(SplatError::Checkpoint(format!("sh degree {sh_degree}")));
    }
    let coeffs = basis_len(sh_degree) * 3;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let d = cur.f32()?;
        let q = Vector4::new(cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?);
        let mut sh = Vec::with_capacity(coeffs);
        for _ in 0..coeffs {
            sh.push(cur.f32()?);
        }
        let scale = Vector3::new(cur.f32()?, cur.f32()?, cur.f32()?);
        let opacity = cur.f32()?;
        let source_view = cur.u32()?;
        let source_pixel = cur.u32()?;
        gaussians.push(PixelGaussian { d, q, sh, scale, opacity, source_view, source_pixel });
    }
    let cameras: CameraBlock = serde_json::from_slice(&data[cur.at..])
        .map_err(|e| SplatError::Checkpoint(format!("camera block: {e}")))?;
    if cameras.poses.len() != k_ref as usize {
        return Err(SplatError::Checkpoint(format!(
            "{} poses for k_ref {k_ref}",
            cameras.poses.len()
        )));
    }
    let set = GaussianSet::new(gaussians, sh_degree, k_ref, width, height)?;
    let intrinsics = cameras
        .intrinsics
        .to_intrinsics()
        .map_err(|e| SplatError::Checkpoint(e.to_string()))?;
    let poses = cameras
        .poses
        .iter()
        .map(|p| p.to_pose().map_err(|e| SplatError::Checkpoint(e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(Checkpoint { set, intrinsics, poses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_set() -> GaussianSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gaussians = (0..17)
            .map(|_| PixelGaussian::<f32> {
                d: rng.random_range(-1.0..2.0),
                q: Vector4::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                sh: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
                scale: Vector3::new(
                    rng.random_range(-2.0..0.0),
                    rng.random_range(-2.0..0.0),
                    rng.random_range(-2.0..0.0),
                ),
                opacity: rng.random_range(-3.0..3.0),
                source_view: rng.random_range(0..3),
                source_pixel: rng.random_range(0..48),
            })
            .collect();
        GaussianSet::new(gaussians, 1, 3, 8, 6).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.splc");
        let set = sample_set();
        let k = CameraIntrinsics::<f32>::new(9.5, 9.8, 4.1, 3.2, 8, 6).unwrap();
        let poses = vec![
            CameraPose::identity(),
            CameraPose::new(Vector4::new(0.9, 0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)).unwrap(),
            CameraPose::new(Vector4::new(1.0, 0.0, 0.5, 0.0), Vector3::new(-0.5, 0.0, 0.25)).unwrap(),
        ];
        save_checkpoint(&path, &set, &k, &poses).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.set.sh_degree, 1);
        assert_eq!(ck.set.k_ref, 3);
        assert_eq!((ck.set.width, ck.set.height), (8, 6));
        assert_eq!(ck.set.gaussians, set.gaussians);
        assert_eq!(ck.intrinsics.fx, 9.5f32 as f64);
        assert_eq!(ck.intrinsics.width, 8);
        for (a, b) in ck.poses.iter().zip(&poses) {
            assert!((a.quat() - b.cast::<f64>().quat()).norm() < 1e-7);
            assert!((a.trans - b.cast::<f64>().trans).norm() < 1e-7);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.splc");
        let set = sample_set();
        let k = CameraIntrinsics::<f32>::new(9.5, 9.8, 4.1, 3.2, 8, 6).unwrap();
        let poses = vec![CameraPose::identity(); 3];
        save_checkpoint(&path, &set, &k, &poses).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(load_checkpoint(&path).is_err());

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn pose_count_must_match_k_ref() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.splc");
        let set = sample_set();
        let k = CameraIntrinsics::<f32>::new(9.5, 9.8, 4.1, 3.2, 8, 6).unwrap();
        assert!(save_checkpoint(&path, &set, &k, &[CameraPose::identity()]).is_err());
    }
}
