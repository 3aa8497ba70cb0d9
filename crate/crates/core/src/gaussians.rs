//! Explicit 3D Gaussian primitives and the `.sggs` scene format.
//!
//! A scene file is a 12-byte header followed by 14 little-endian `f32` per
//! Gaussian:
//!
//! ```text
//! "SGGS" | version u8 | 3 pad bytes | count u32 LE | count × (mu[3] scale[3] rot[4] color[3] opacity)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Mat3;

pub const MAGIC: [u8; 4] = *b"SGGS";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 12;
pub const FLOATS_PER_GAUSSIAN: usize = 14;
pub const BYTES_PER_GAUSSIAN: usize = FLOATS_PER_GAUSSIAN * 4;

/// One anisotropic, colored Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mu: [f32; 3],
    /// Per-axis standard deviation.
    pub scale: [f32; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rot: [f32; 4],
    pub color: [f32; 3],
    pub opacity: f32,
}

impl Default for Gaussian3D {
    fn default() -> Self {
        Gaussian3D {
            mu: [0.0; 3],
            scale: [0.01; 3],
            rot: [1.0, 0.0, 0.0, 0.0],
            color: [0.5; 3],
            opacity: 1.0,
        }
    }
}

impl Gaussian3D {
    pub fn to_array(&self) -> [f32; FLOATS_PER_GAUSSIAN] {
        let mut a = [0.0; FLOATS_PER_GAUSSIAN];
        a[0..3].copy_from_slice(&self.mu);
        a[3..6].copy_from_slice(&self.scale);
        a[6..10].copy_from_slice(&self.rot);
        a[10..13].copy_from_slice(&self.color);
        a[13] = self.opacity;
        a
    }

    pub fn from_slice(a: &[f32]) -> Self {
        Gaussian3D {
            mu: [a[0], a[1], a[2]],
            scale: [a[3], a[4], a[5]],
            rot: [a[6], a[7], a[8], a[9]],
            color: [a[10], a[11], a[12]],
            opacity: a[13],
        }
    }

    /// Check the primitive invariants against a scale cap.
    pub fn is_valid(&self, s_max: f32) -> bool {
        let qn = self.rot.iter().map(|v| v * v).sum::<f32>().sqrt();
        (qn - 1.0).abs() <= 1e-5
            && self.scale.iter().all(|s| (0.0..=s_max).contains(s))
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance(self.scale.map(f64::from), self.rot.map(f64::from))
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_mat(q: [f64; 4]) -> Result<Mat3> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidRotation);
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

/// `Σ = R·diag(scale²)·Rᵀ`.
pub fn covariance(scale: [f64; 3], rot: [f64; 4]) -> Result<Mat3> {
    let r = quat_to_mat(rot)?;
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum();
        }
    }
    Ok(s)
}

/// Clamp every scale component into `[0, s_max]`.
pub fn clip_params(g: &Gaussian3D, s_max: f32) -> Gaussian3D {
    Gaussian3D {
        scale: g.scale.map(|s| s.clamp(0.0, s_max)),
        ..*g
    }
}

/// An ordered set of Gaussians, optionally tagged with the index of the query
/// that produced each one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
    pub provenance: Option<Vec<u32>>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        GaussianSet {
            gaussians,
            provenance: None,
        }
    }

    pub fn with_provenance(gaussians: Vec<Gaussian3D>, provenance: Vec<u32>) -> Self {
        assert_eq!(gaussians.len(), provenance.len(), "one provenance entry per Gaussian");
        GaussianSet {
            gaussians,
            provenance: Some(provenance),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Flat `N × 14` parameter buffer in file field order.
    pub fn to_flat(&self) -> Vec<f32> {
        self.gaussians.iter().flat_map(|g| g.to_array()).collect()
    }

    pub fn from_flat(flat: &[f32]) -> Self {
        GaussianSet::new(flat.chunks(FLOATS_PER_GAUSSIAN).map(Gaussian3D::from_slice).collect())
    }

    /// Size in bytes of the Gaussian records alone.
    pub fn payload_bytes(&self) -> usize {
        self.len() * BYTES_PER_GAUSSIAN
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for g in &self.gaussians {
            for v in g.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated {
                expected: HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let expected = HEADER_BYTES + count * BYTES_PER_GAUSSIAN;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        const FIELDS: [&str; FLOATS_PER_GAUSSIAN] = [
            "mu", "mu", "mu", "scale", "scale", "scale", "rot", "rot", "rot", "rot", "color",
            "color", "color", "opacity",
        ];
        let mut gaussians = Vec::with_capacity(count);
        for (index, rec) in bytes[HEADER_BYTES..].chunks_exact(BYTES_PER_GAUSSIAN).enumerate() {
            let mut a = [0f32; FLOATS_PER_GAUSSIAN];
            for (k, slot) in a.iter_mut().enumerate() {
                let v = f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        index,
                        field: FIELDS[k],
                    });
                }
                *slot = v;
            }
            gaussians.push(Gaussian3D::from_slice(&a));
        }
        Ok(GaussianSet::new(gaussians))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GaussianSet::deserialize(&bytes).map_err(|e| Error::Scene {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut impl Rng) -> Gaussian3D {
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        Gaussian3D {
            mu: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            scale: std::array::from_fn(|_| rng.random_range(0.0..0.5)),
            rot: q.map(|v| v / n),
            color: std::array::from_fn(|_| rng.random()),
            opacity: rng.random(),
        }
    }

    #[test]
    fn identity_covariances() {
        let s = covariance([1.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s = covariance([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]]);
    }

    #[test]
    fn z_rotation_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let s = covariance([1.0, 2.0, 3.0], [h.cos(), 0.0, 0.0, h.sin()]).unwrap();
        // direct R·D·Rᵀ with R = [[0,-1,0],[1,0,0],[0,0,1]]
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let d = [1.0, 4.0, 9.0];
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| r[i][k] * d[k] * r[j][k]).sum();
                assert!((s[i][j] - want).abs() < 1e-12);
            }
        }
        assert!((s[0][0] - 4.0).abs() < 1e-12 && (s[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(
            covariance([1.0; 3], [0.0; 4]),
            Err(Error::InvalidRotation)
        ));
    }

    #[test]
    fn covariance_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let g = random_gaussian(&mut rng);
            let s = g.covariance().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((s[i][j] - s[j][i]).abs() < 1e-6);
                }
            }
            // PSD: vᵀΣv ≥ 0 along random directions and all principal minors
            for _ in 0..8 {
                let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let q: f64 = (0..3).map(|i| (0..3).map(|j| v[i] * s[i][j] * v[j]).sum::<f64>()).sum();
                assert!(q >= -1e-8);
            }
            assert!(crate::geometry::det(&s) >= -1e-8);
        }
    }

    #[test]
    fn clip_example() {
        let g = Gaussian3D {
            scale: [0.5, 0.01, 0.2],
            ..Default::default()
        };
        assert_eq!(clip_params(&g, 0.1).scale, [0.1, 0.01, 0.1]);
        let ok = Gaussian3D::default();
        assert_eq!(clip_params(&ok, 0.1), ok);
    }

    #[test]
    fn clip_idempotent_and_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let g = random_gaussian(&mut rng);
            let c = clip_params(&g, 0.1);
            assert_eq!(clip_params(&c, 0.1), c);
            for k in 0..3 {
                assert!(c.scale[k] <= g.scale[k]);
            }
            assert_eq!((c.mu, c.rot, c.color, c.opacity), (g.mu, g.rot, g.color, g.opacity));
        }
    }

    #[test]
    fn size_accounting() {
        let set = GaussianSet::new(vec![Gaussian3D::default(); 5120]);
        assert_eq!(set.payload_bytes(), 286_720);
        assert_eq!(set.serialize().len(), HEADER_BYTES + 286_720);
    }

    #[test]
    fn empty_round_trip() {
        let bytes = GaussianSet::default().serialize();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert!(GaussianSet::deserialize(&bytes).unwrap().is_empty());
    }

    #[test]
    fn distinct_errors() {
        let set = GaussianSet::new(vec![Gaussian3D::default(); 2]);
        let mut bytes = set.serialize();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GaussianSet::deserialize(&bad), Err(Error::BadMagic(_))));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(GaussianSet::deserialize(short), Err(Error::Truncated { .. })));
        bytes[HEADER_BYTES + BYTES_PER_GAUSSIAN + 13 * 4..HEADER_BYTES + BYTES_PER_GAUSSIAN + 14 * 4]
            .copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            GaussianSet::deserialize(&bytes),
            Err(Error::NonFinite { index: 1, field: "opacity" })
        ));
        let mut ver = set.serialize();
        ver[4] = 9;
        assert!(matches!(GaussianSet::deserialize(&ver), Err(Error::UnsupportedVersion(9))));
    }
}
