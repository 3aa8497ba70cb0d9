//! Pinhole cameras, projection, frustum unprojection and sinusoidal
//! positional encoding of 3D points.
//!
//! Poses are stored world→camera: `x_cam = R·x_world + t`. The camera looks
//! down +z with x to the right and y down. Pixel `(i, j)` (row, column) has
//! its center at `(j + 0.5, i + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

/// Intrinsics plus world→camera extrinsics and a depth range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world→camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub near: f64,
    pub far: f64,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    /// `false` when the point is at or behind the camera plane.
    pub visible: bool,
}

impl CameraPose {
    /// Identity extrinsics with the given intrinsics.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraPose {
            fx,
            fy,
            cx,
            cy,
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0; 3],
            near: 0.1,
            far: 10.0,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` the approximate world
    /// up direction (image y points away from it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, up);
        if norm(right) < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rot: Mat3 = [right, down, forward];
        let rt = mat_vec(&rot, eye);
        let pose = CameraPose {
            fx,
            fy,
            cx,
            cy,
            r: [
                rot[0][0], rot[0][1], rot[0][2], rot[1][0], rot[1][1], rot[1][2], rot[2][0],
                rot[2][1], rot[2][2],
            ],
            t: [-rt[0], -rt[1], -rt[2]],
            near,
            far,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn rotation(&self) -> Mat3 {
        let r = &self.r;
        [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let c = mat_t_vec(&self.rotation(), self.t);
        [-c[0], -c[1], -c[2]]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.near, self.far];
        if all.iter().chain(&self.r).chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite field".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidPose("focal lengths must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidPose("need 0 < near < far".into()));
        }
        let r = self.rotation();
        let rtr = mat_mul(&transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-5 {
                    return Err(Error::InvalidPose("rotation is not orthonormal".into()));
                }
            }
        }
        if det(&r) <= 0.0 {
            return Err(Error::InvalidPose("rotation has negative determinant".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, x: Vec3) -> Vec3 {
        let c = mat_vec(&self.rotation(), x);
        [c[0] + self.t[0], c[1] + self.t[1], c[2] + self.t[2]]
    }

    pub fn camera_to_world(&self, c: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation(), sub(c, self.t))
    }

    /// Pinhole projection of a world point.
    pub fn project(&self, x: Vec3) -> Projection {
        let c = self.world_to_camera(x);
        let visible = c[2] > 0.0;
        Projection {
            u: self.fx * c[0] / c[2] + self.cx,
            v: self.fy * c[1] / c[2] + self.cy,
            z: c[2],
            visible,
        }
    }

    /// World point on the ray through pixel coordinate `(u, v)` at camera
    /// depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        self.camera_to_world(c)
    }

    /// `d` depths linearly spaced over `[near, far]`, endpoints included.
    pub fn depth_samples(&self, d: usize) -> Vec<f64> {
        if d == 1 {
            return vec![self.near];
        }
        (0..d)
            .map(|k| self.near + (self.far - self.near) * k as f64 / (d - 1) as f64)
            .collect()
    }
}

/// World-space points on each feature-pixel ray, `V × H_F × W_F × d_th × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frustum {
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub depths: usize,
    pub points: Vec<f64>,
}

impl Frustum {
    pub fn point(&self, view: usize, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = ((((view * self.grid_h + i) * self.grid_w + j) * self.depths) + k) * 3;
        [self.points[idx], self.points[idx + 1], self.points[idx + 2]]
    }

    /// The `d_th × 3` depth-point vector of one feature pixel.
    pub fn pixel(&self, view: usize, i: usize, j: usize) -> &[f64] {
        let n = self.depths * 3;
        let idx = ((view * self.grid_h + i) * self.grid_w + j) * n;
        &self.points[idx..idx + n]
    }
}

/// Pixel-coordinate center of feature cell `(i, j)` on an `image_hw` image
/// split into a `grid_hw` grid.
pub fn grid_center(image_hw: (usize, usize), grid_hw: (usize, usize), i: usize, j: usize) -> (f64, f64) {
    let sy = image_hw.0 as f64 / grid_hw.0 as f64;
    let sx = image_hw.1 as f64 / grid_hw.1 as f64;
    ((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy)
}

/// Lift every feature-grid pixel center to `d_th` points along its ray.
pub fn unproject_frustum(
    poses: &[CameraPose],
    image_hw: (usize, usize),
    grid_hw: (usize, usize),
    d_th: usize,
) -> Result<Frustum> {
    if d_th == 0 {
        return Err(Error::Shape("d_th must be at least 1".into()));
    }
    if grid_hw.0 == 0 || grid_hw.1 == 0 {
        return Err(Error::Shape("empty feature grid".into()));
    }
    let mut points = Vec::with_capacity(poses.len() * grid_hw.0 * grid_hw.1 * d_th * 3);
    for pose in poses {
        pose.validate()?;
        let depths = pose.depth_samples(d_th);
        for i in 0..grid_hw.0 {
            for j in 0..grid_hw.1 {
                let (u, v) = grid_center(image_hw, grid_hw, i, j);
                for &d in &depths {
                    points.extend_from_slice(&pose.unproject(u, v, d));
                }
            }
        }
    }
    Ok(Frustum {
        views: poses.len(),
        grid_h: grid_hw.0,
        grid_w: grid_hw.1,
        depths: d_th,
        points,
    })
}

/// `sin(2^j x_a)` for `j < n_freq`, `a < 3` (index `3j + a`) followed by the
/// cosines in the same order. Length `6·n_freq`.
pub fn sinusoidal_pe(x: Vec3, n_freq: usize) -> Vec<f64> {
    let half = 3 * n_freq;
    let mut out = vec![0.0; 2 * half];
    for j in 0..n_freq {
        let f = (1u64 << j) as f64;
        for a in 0..3 {
            out[j * 3 + a] = (f * x[a]).sin();
            out[half + j * 3 + a] = (f * x[a]).cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let r = random_rotation(rng);
        CameraPose {
            fx: rng.random_range(20.0..200.0),
            fy: rng.random_range(20.0..200.0),
            cx: rng.random_range(0.0..128.0),
            cy: rng.random_range(0.0..128.0),
            r: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            t: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            near: 0.5,
            far: 6.0,
        }
    }

    #[test]
    fn principal_axis_projects_to_origin() {
        let p = CameraPose::identity(1.0, 1.0, 0.0, 0.0).project([0.0, 0.0, 1.0]);
        assert_eq!((p.u, p.v, p.z), (0.0, 0.0, 1.0));
        assert!(p.visible);
    }

    #[test]
    fn pinhole_formula() {
        let p = CameraPose::identity(100.0, 100.0, 64.0, 64.0).project([0.1, 0.0, 1.0]);
        assert!((p.u - 74.0).abs() < 1e-12);
        assert_eq!(p.v, 64.0);
        assert_eq!(p.z, 1.0);
    }

    #[test]
    fn behind_camera_flagged() {
        let p = CameraPose::identity(1.0, 1.0, 0.0, 0.0).project([0.0, 0.0, -1.0]);
        assert!(!p.visible);
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let u = rng.random_range(0.0..128.0);
            let v = rng.random_range(0.0..128.0);
            let d = rng.random_range(pose.near..pose.far);
            let p = pose.project(pose.unproject(u, v, d));
            worst = worst.max((p.u - u).abs()).max((p.v - v).abs()).max((p.z - d).abs());
        }
        assert!(worst < 1e-6, "round-trip error {worst}");
    }

    #[test]
    fn validate_rejects_bad_poses() {
        let mut p = CameraPose::identity(1.0, 1.0, 0.0, 0.0);
        p.near = 2.0;
        p.far = 1.0;
        assert!(p.validate().is_err());
        let mut p = CameraPose::identity(1.0, 1.0, 0.0, 0.0);
        p.r = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0];
        assert!(p.validate().is_err());
        let mut p = CameraPose::identity(1.0, 1.0, 0.0, 0.0);
        p.fx = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let pose = CameraPose::look_at(
            [3.0, 1.0, 2.0],
            [0.0; 3],
            [0.0, 0.0, 1.0],
            50.0,
            50.0,
            32.0,
            32.0,
            1.0,
            6.0,
        )
        .unwrap();
        let p = pose.project([0.0; 3]);
        assert!((p.u - 32.0).abs() < 1e-9 && (p.v - 32.0).abs() < 1e-9);
        let c = pose.center();
        assert!(norm(sub(c, [3.0, 1.0, 2.0])) < 1e-12);
        // world up appears toward the top of the image
        assert!(pose.project([0.0, 0.0, 0.5]).v < 32.0);
    }

    #[test]
    fn optical_axis_frustum() {
        let pose = CameraPose::identity(10.0, 10.0, 1.0, 1.0);
        // 2×2 image, 1×1 grid: the only cell center is the principal point
        let f = unproject_frustum(&[pose.clone()], (2, 2), (1, 1), 4).unwrap();
        for (k, d) in pose.depth_samples(4).into_iter().enumerate() {
            assert_eq!(f.point(0, 0, 0, k), [0.0, 0.0, d]);
        }
    }

    #[test]
    fn degenerate_depth_range_collapses() {
        let mut pose = CameraPose::identity(10.0, 10.0, 4.0, 4.0);
        pose.near = 2.0;
        pose.far = 2.0 + 1e-9;
        let f = unproject_frustum(&[pose.clone()], (8, 8), (2, 2), 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let p = pose.world_to_camera(f.point(0, i, j, 0));
                assert!((p[2] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frustum_reprojects_to_cell_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<_> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let f = unproject_frustum(&poses, (64, 64), (8, 8), 16).unwrap();
        for (v, pose) in poses.iter().enumerate() {
            for i in 0..8 {
                for j in 0..8 {
                    let (u0, v0) = grid_center((64, 64), (8, 8), i, j);
                    let mut last = f64::NEG_INFINITY;
                    for k in 0..16 {
                        let p = pose.project(f.point(v, i, j, k));
                        assert!((p.u - u0).abs() < 1e-5 && (p.v - v0).abs() < 1e-5);
                        assert!(p.z > last, "depths must increase");
                        last = p.z;
                    }
                }
            }
        }
    }

    #[test]
    fn frustum_rejects_zero_depths() {
        let pose = CameraPose::identity(1.0, 1.0, 0.0, 0.0);
        assert!(unproject_frustum(&[pose], (8, 8), (2, 2), 0).is_err());
    }

    #[test]
    fn pe_at_origin() {
        let pe = sinusoidal_pe([0.0; 3], 8);
        assert_eq!(pe.len(), 48);
        assert!(pe[..24].iter().all(|v| *v == 0.0));
        assert!(pe[24..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn pe_base_frequency_period() {
        let x = [0.3, -0.7, 1.1];
        let y = x.map(|v| v + 2.0 * std::f64::consts::PI);
        let (a, b) = (sinusoidal_pe(x, 4), sinusoidal_pe(y, 4));
        for axis in 0..3 {
            assert!((a[axis] - b[axis]).abs() < 1e-12);
            assert!((a[12 + axis] - b[12 + axis]).abs() < 1e-12);
        }
    }

    #[test]
    fn pe_no_collisions_among_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..512)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let embs: Vec<Vec<f64>> = pts.iter().map(|p| sinusoidal_pe(*p, 8)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-12, "collision between anchors {i} and {j}");
            }
        }
    }

    #[test]
    fn pe_injective_on_box() {
        // the base-frequency pair pins each coordinate on (-π, π), so decoding
        // it must return the input for every sample
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let x: Vec3 = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let pe = sinusoidal_pe(x, 8);
            for a in 0..3 {
                let back = pe[a].atan2(pe[24 + a]);
                assert!((back - x[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_json_schema() {
        let pose = CameraPose::identity(2.0, 3.0, 4.0, 5.0);
        let json = serde_json::to_value(&pose).unwrap();
        for key in ["fx", "fy", "cx", "cy", "R", "t", "near", "far"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["R"].as_array().unwrap().len(), 9);
        let back: CameraPose = serde_json::from_value(json).unwrap();
        assert_eq!(back, pose);
    }
}
