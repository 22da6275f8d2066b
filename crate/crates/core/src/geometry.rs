//! Rigid transforms, alignment of past/future sweeps to the current frame,
//! and query-ray construction from future returns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, FormatError, Result};

pub type Vec3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-9;

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Rigid sensor-to-world transform: `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rrt: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt - want).abs() > ORTHO_TOL {
                    return Err(contract!("rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {rrt})"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(contract!("rotation determinant is {det}, expected +1"));
        }
        if translation.iter().chain(r.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(contract!("pose contains non-finite values"));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose { translation: t, ..Self::identity() }
    }

    /// Rotation by `yaw` radians about +z followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation: t }
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: Vec3) -> Result<Self> {
        let r = [
            [rotation[0], rotation[1], rotation[2]],
            [rotation[3], rotation[4], rotation[5]],
            [rotation[6], rotation[7], rotation[8]],
        ];
        Self::new(r, translation)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(self.rotate(p), self.translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let (a, b) = (&self.rotation, &other.rotation);
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Pose { rotation: r, translation: self.apply(other.translation) }
    }

    pub fn invert(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Pose { rotation: rt, translation: [0.0; 3] };
        let t = inv.rotate(self.translation);
        Pose { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Seconds.
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, timestamp: f64) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract!("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points, timestamp })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| pose.apply(p)).collect(),
            timestamp: self.timestamp,
        }
    }
}

/// A ray with ground-truth termination depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRay {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    /// Meters, > 0.
    pub gt_depth: f64,
}

impl QueryRay {
    pub fn new(origin: Vec3, direction: Vec3, gt_depth: f64) -> Result<Self> {
        if (norm(direction) - 1.0).abs() > 1e-9 {
            return Err(contract!("ray direction is not unit length"));
        }
        if !(gt_depth > 0.0) {
            return Err(contract!("ray depth {gt_depth} is not positive"));
        }
        Ok(QueryRay { origin, direction, gt_depth })
    }

    pub fn point_at(&self, depth: f64) -> Vec3 {
        add(self.origin, scale(self.direction, depth))
    }

    pub fn endpoint(&self) -> Vec3 {
        self.point_at(self.gt_depth)
    }
}

/// Transform taking points in a frame's sensor coordinates into the current
/// frame's sensor coordinates. Poses are sensor→world.
pub fn relative_pose(frame_pose: &Pose, current_pose: &Pose) -> Pose {
    current_pose.invert().compose(frame_pose)
}

/// Re-expresses a sensor-frame cloud in the current frame.
pub fn align_to_current(cloud: &PointCloud, frame_pose: &Pose, current_pose: &Pose) -> PointCloud {
    cloud.transformed(&relative_pose(frame_pose, current_pose))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<QueryRay>,
    /// Points dropped for lying within 1e-6 m of the origin.
    pub skipped: usize,
}

pub const MIN_RAY_RANGE: f64 = 1e-6;

/// One query ray per point, from `origin` through the point.
pub fn rays_from_future_cloud(cloud: &PointCloud, origin: Vec3) -> RayBatch {
    let mut rays = Vec::with_capacity(cloud.len());
    let mut skipped = 0;
    for &p in &cloud.points {
        let d = sub(p, origin);
        let depth = norm(d);
        if depth <= MIN_RAY_RANGE {
            skipped += 1;
            continue;
        }
        rays.push(QueryRay { origin, direction: scale(d, 1.0 / depth), gt_depth: depth });
    }
    RayBatch { rays, skipped }
}

/// One entry of a pose file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub timestamp: f64,
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn new(timestamp: f64, pose: &Pose) -> Self {
        PoseRecord {
            timestamp,
            rotation: pose.rotation_row_major(),
            translation: pose.translation(),
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_row_major(&self.rotation, self.translation)
    }
}

pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(records).expect("pose records serialize");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a pose file, validating every rotation.
pub fn read_pose_file(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<PoseRecord> = serde_json::from_slice(&text)
        .map_err(|e| FormatError::Invalid { path: path.to_path_buf(), msg: e.to_string() })?;
    records
        .iter()
        .map(|r| {
            r.pose().map(|p| (r.timestamp, p)).map_err(|e| {
                FormatError::Invalid { path: path.to_path_buf(), msg: e.to_string() }.into()
            })
        })
        .collect()
}
