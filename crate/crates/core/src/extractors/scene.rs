//! Scene ingestion types: camera, LiDAR scans, box tracks, map elements.
//!
//! Units: timestamps in seconds, positions in meters, right-handed world
//! frame. Camera poses are world-to-camera. The whole scene round-trips
//! through a single JSON file.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major 3x3 rotation.
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
}

impl Pose {
    pub fn identity() -> Pose {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Inverse of a rigid transform: R^T (p - t).
    pub fn apply_inverse(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        let q = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    pub fn orthonormality_error(&self) -> f32 {
        let r = &self.rotation;
        let mut worst = 0.0f32;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0f32;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    /// One world-to-camera pose per frame.
    pub poses: Vec<Pose>,
    pub fps: f32,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsics.fx <= 0.0 || self.intrinsics.fy <= 0.0 {
            return Err(CoreError::Input("camera focal lengths must be positive".into()));
        }
        if self.fps <= 0.0 {
            return Err(CoreError::Input("camera fps must be positive".into()));
        }
        for (i, pose) in self.poses.iter().enumerate() {
            let err = pose.orthonormality_error();
            if err > 1e-6 {
                return Err(CoreError::Input(format!(
                    "pose {i} rotation not orthonormal (error {err})"
                )));
            }
        }
        Ok(())
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps as f64
    }

    pub fn pose(&self, frame: usize) -> Result<&Pose> {
        self.poses.get(frame).ok_or_else(|| {
            CoreError::Input(format!("no camera pose for frame {frame} ({} available)", self.poses.len()))
        })
    }

    /// Pinhole projection of a world point at `frame`.
    /// Returns (u, v, depth); None when the point is at or behind the camera.
    pub fn project(&self, frame: usize, p_world: [f32; 3]) -> Result<Option<(f32, f32, f32)>> {
        let cam = self.pose(frame)?.apply(p_world);
        if cam[2] <= 1e-6 {
            return Ok(None);
        }
        let u = self.intrinsics.fx * cam[0] / cam[2] + self.intrinsics.cx;
        let v = self.intrinsics.fy * cam[1] / cam[2] + self.intrinsics.cy;
        Ok(Some((u, v, cam[2])))
    }

    /// Inverse pinhole: pixel (u, v) at `depth` back to world coordinates.
    pub fn back_project(&self, frame: usize, u: f32, v: f32, depth: f32) -> Result<[f32; 3]> {
        let cam = [
            (u - self.intrinsics.cx) / self.intrinsics.fx * depth,
            (v - self.intrinsics.cy) / self.intrinsics.fy * depth,
            depth,
        ];
        Ok(self.pose(frame)?.apply_inverse(cam))
    }
}

/// One 10 Hz LiDAR sweep. `dynamic_ids[i] == 0` marks a static point,
/// anything else is the object id of the box track the point rides on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidarScan {
    pub timestamp: f64,
    pub points: Vec<[f32; 3]>,
    pub dynamic_ids: Vec<u32>,
}

impl LidarScan {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.dynamic_ids.len() {
            return Err(CoreError::Input(format!(
                "scan at t={} has {} points but {} dynamic ids",
                self.timestamp,
                self.points.len(),
                self.dynamic_ids.len()
            )));
        }
        for p in &self.points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CoreError::Input("non-finite lidar point".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxKeyframe {
    pub timestamp: f64,
    pub center: [f32; 3],
    /// Full extents (length, width, height).
    pub size: [f32; 3],
    pub yaw: f32,
}

/// Interpolated rigid pose of a box at some time.
#[derive(Debug, Clone, Copy)]
pub struct BoxPose {
    pub center: [f32; 3],
    pub yaw: f32,
}

impl BoxPose {
    /// Box-local to world.
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.center[0],
            s * p[0] + c * p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }

    /// World to box-local.
    pub fn apply_inverse(&self, p: [f32; 3]) -> [f32; 3] {
        let (s, c) = self.yaw.sin_cos();
        let q = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * q[0] + s * q[1], -s * q[0] + c * q[1], q[2]]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxTrack {
    pub object_id: u32,
    pub keyframes: Vec<BoxKeyframe>,
}

impl BoxTrack {
    pub fn validate(&self) -> Result<()> {
        if self.keyframes.is_empty() {
            return Err(CoreError::Input(format!("box track {} has no keyframes", self.object_id)));
        }
        for w in self.keyframes.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(CoreError::Input(format!(
                    "box track {} timestamps not strictly increasing",
                    self.object_id
                )));
            }
        }
        Ok(())
    }

    /// Pose at time `t`: linear center, shortest-arc yaw, clamped outside the
    /// keyframe range.
    pub fn pose_at(&self, t: f64) -> BoxPose {
        let kf = &self.keyframes;
        if t <= kf[0].timestamp || kf.len() == 1 {
            return BoxPose { center: kf[0].center, yaw: kf[0].yaw };
        }
        if t >= kf[kf.len() - 1].timestamp {
            let last = &kf[kf.len() - 1];
            return BoxPose { center: last.center, yaw: last.yaw };
        }
        let idx = kf.partition_point(|k| k.timestamp <= t) - 1;
        let (a, b) = (&kf[idx], &kf[idx + 1]);
        let alpha = ((t - a.timestamp) / (b.timestamp - a.timestamp)) as f32;
        let center = [
            a.center[0] + alpha * (b.center[0] - a.center[0]),
            a.center[1] + alpha * (b.center[1] - a.center[1]),
            a.center[2] + alpha * (b.center[2] - a.center[2]),
        ];
        let mut dyaw = b.yaw - a.yaw;
        while dyaw > std::f32::consts::PI {
            dyaw -= 2.0 * std::f32::consts::PI;
        }
        while dyaw < -std::f32::consts::PI {
            dyaw += 2.0 * std::f32::consts::PI;
        }
        BoxPose { center, yaw: a.yaw + alpha * dyaw }
    }

    /// Size at time `t` (sizes are not interpolated; the bracketing keyframe
    /// before `t` wins).
    pub fn size_at(&self, t: f64) -> [f32; 3] {
        let idx = self.keyframes.partition_point(|k| k.timestamp <= t);
        self.keyframes[idx.saturating_sub(1).min(self.keyframes.len() - 1)].size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapElementKind {
    LaneLine,
    RoadBoundary,
    StopLine,
    Pole,
    Crosswalk,
}

impl MapElementKind {
    /// Raster color, one fixed hue per element type.
    pub fn color(&self) -> [f32; 3] {
        match self {
            MapElementKind::LaneLine => [0.0, 1.0, 0.0],
            MapElementKind::RoadBoundary => [1.0, 0.0, 0.0],
            MapElementKind::StopLine => [1.0, 1.0, 0.0],
            MapElementKind::Pole => [0.0, 1.0, 1.0],
            MapElementKind::Crosswalk => [1.0, 0.0, 1.0],
        }
    }
}

/// Color used for projected 3D box wireframes.
pub const BOX_WIREFRAME_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapElement {
    pub kind: MapElementKind,
    pub polyline: Vec<[f32; 3]>,
}

/// A full scene as ingested from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub camera: CameraModel,
    #[serde(default)]
    pub lidar_scans: Vec<LidarScan>,
    #[serde(default)]
    pub boxes: Vec<BoxTrack>,
    #[serde(default)]
    pub map_elements: Vec<MapElement>,
}

impl SceneFile {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        for scan in &self.lidar_scans {
            scan.validate()?;
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SceneFile> {
        let scene: SceneFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Per-object binary segmentation masks with caption phrases.
#[derive(Debug, Clone)]
pub struct SegMask {
    pub object_id: u32,
    pub phrase: String,
    /// (T, Y, X) flattened row-major.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SegMaskSet {
    pub extents: (usize, usize, usize),
    pub masks: Vec<SegMask>,
}

impl SegMaskSet {
    pub fn validate(&self) -> Result<()> {
        let (t, y, x) = self.extents;
        let len = t * y * x;
        let mut seen = std::collections::HashSet::new();
        for m in &self.masks {
            if m.mask.len() != len {
                return Err(CoreError::Shape(format!(
                    "mask for object {} has {} entries, extents want {len}",
                    m.object_id,
                    m.mask.len()
                )));
            }
            if !seen.insert(m.object_id) {
                return Err(CoreError::Input(format!("duplicate object id {}", m.object_id)));
            }
        }
        Ok(())
    }

    pub fn by_id(&self, id: u32) -> Option<&SegMask> {
        self.masks.iter().find(|m| m.object_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trip() {
        let yaw: f32 = 0.6;
        let (s, c) = yaw.sin_cos();
        let pose = Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [1.0, -2.0, 0.5],
        };
        assert!(pose.orthonormality_error() < 1e-6);
        let p = [0.3, 1.7, -0.9];
        let q = pose.apply_inverse(pose.apply(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn box_pose_interpolation_linear_center() {
        let track = BoxTrack {
            object_id: 1,
            keyframes: vec![
                BoxKeyframe { timestamp: 0.0, center: [0.0, 0.0, 0.0], size: [1.0; 3], yaw: 0.0 },
                BoxKeyframe { timestamp: 1.0, center: [2.0, 4.0, 0.0], size: [1.0; 3], yaw: 0.0 },
            ],
        };
        let p = track.pose_at(0.25);
        assert!((p.center[0] - 0.5).abs() < 1e-6);
        assert!((p.center[1] - 1.0).abs() < 1e-6);
        // Clamped outside the range.
        assert_eq!(track.pose_at(-5.0).center, [0.0, 0.0, 0.0]);
        assert_eq!(track.pose_at(5.0).center, [2.0, 4.0, 0.0]);
    }

    #[test]
    fn yaw_takes_shortest_arc() {
        let pi = std::f32::consts::PI;
        let track = BoxTrack {
            object_id: 1,
            keyframes: vec![
                BoxKeyframe { timestamp: 0.0, center: [0.0; 3], size: [1.0; 3], yaw: pi - 0.1 },
                BoxKeyframe { timestamp: 1.0, center: [0.0; 3], size: [1.0; 3], yaw: -pi + 0.1 },
            ],
        };
        // Short way crosses pi, not zero.
        let mid = track.pose_at(0.5).yaw;
        assert!((mid.abs() - pi).abs() < 1e-5, "midpoint yaw {mid}");
    }

    #[test]
    fn projection_and_back_projection() {
        let cam = CameraModel {
            intrinsics: CameraIntrinsics { fx: 50.0, fy: 50.0, cx: 32.0, cy: 24.0 },
            poses: vec![Pose::identity()],
            fps: 30.0,
        };
        cam.validate().unwrap();
        // Point on the optical axis lands at (cx, cy).
        let (u, v, z) = cam.project(0, [0.0, 0.0, 4.0]).unwrap().unwrap();
        assert_eq!((u, v, z), (32.0, 24.0, 4.0));
        // Behind the camera is clipped.
        assert!(cam.project(0, [0.0, 0.0, -1.0]).unwrap().is_none());
        // Back-projection inverts projection.
        let w = cam.back_project(0, 40.0, 20.0, 2.5).unwrap();
        let (u2, v2, z2) = cam.project(0, w).unwrap().unwrap();
        assert!((u2 - 40.0).abs() < 1e-4 && (v2 - 20.0).abs() < 1e-4 && (z2 - 2.5).abs() < 1e-5);
    }

    #[test]
    fn scene_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneFile {
            camera: CameraModel {
                intrinsics: CameraIntrinsics { fx: 50.0, fy: 50.0, cx: 16.0, cy: 16.0 },
                poses: vec![Pose::identity(); 3],
                fps: 30.0,
            },
            lidar_scans: vec![LidarScan {
                timestamp: 0.0,
                points: vec![[1.0, 2.0, 3.0]],
                dynamic_ids: vec![0],
            }],
            boxes: vec![],
            map_elements: vec![MapElement {
                kind: MapElementKind::LaneLine,
                polyline: vec![[0.0, 0.0, 5.0], [0.0, 1.0, 5.0]],
            }],
        };
        let path = dir.path().join("scene.json");
        scene.save(&path).unwrap();
        let loaded = SceneFile::load(&path).unwrap();
        assert_eq!(loaded.lidar_scans[0].points, scene.lidar_scans[0].points);
        assert_eq!(loaded.map_elements[0].kind, MapElementKind::LaneLine);
    }
}
