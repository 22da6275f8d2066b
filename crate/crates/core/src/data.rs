//! Synthetic LiDAR sequences and their on-disk format.
//!
//! A sequence directory holds `manifest.json` (frame cadence and poses) and
//! one `frame_<k>.o4dp` file per frame: magic `O4DP`, u32 version, u64 point
//! count, then `x y z` as little-endian f32 triples in the sensor frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, FormatError, Result};
use crate::geometry::{PointCloud, Pose, PoseRecord, Vec3};

/// Axis-aligned box moving at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    /// m/s.
    pub velocity: Vec3,
}

impl SceneBox {
    pub fn at(&self, time: f64) -> SceneBox {
        SceneBox {
            center: std::array::from_fn(|a| self.center[a] + self.velocity[a] * time),
            ..*self
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        (
            std::array::from_fn(|a| self.center[a] - self.half_extents[a]),
            std::array::from_fn(|a| self.center[a] + self.half_extents[a]),
        )
    }
}

/// Ego motion: constant world velocity and yaw rate from a start pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoTrajectory {
    pub start: Vec3,
    pub start_yaw: f64,
    pub velocity: Vec3,
    /// rad/s.
    pub yaw_rate: f64,
}

impl EgoTrajectory {
    pub fn stationary(position: Vec3) -> Self {
        EgoTrajectory { start: position, start_yaw: 0.0, velocity: [0.0; 3], yaw_rate: 0.0 }
    }

    pub fn pose_at(&self, time: f64) -> Pose {
        let p = std::array::from_fn(|a| self.start[a] + self.velocity[a] * time);
        Pose::from_yaw(self.start_yaw + self.yaw_rate * time, p)
    }
}

/// Ground plane `z = 0`, moving boxes and an ego trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub ego: EgoTrajectory,
}

impl Scene {
    pub fn new(boxes: Vec<SceneBox>, ego: EgoTrajectory) -> Result<Self> {
        if boxes.iter().any(|b| b.half_extents.iter().any(|&h| !(h > 0.0))) {
            return Err(contract!("box extents must be positive"));
        }
        Ok(Scene { boxes, ego })
    }

    /// Boxes advanced to `time`.
    pub fn at(&self, time: f64) -> Scene {
        Scene { boxes: self.boxes.iter().map(|b| b.at(time)).collect(), ego: self.ego }
    }

    pub fn translated(&self, t: Vec3) -> Scene {
        let shift = |p: Vec3| std::array::from_fn(|a| p[a] + t[a]);
        Scene {
            boxes: self.boxes.iter().map(|b| SceneBox { center: shift(b.center), ..*b }).collect(),
            ego: EgoTrajectory { start: shift(self.ego.start), ..self.ego },
        }
    }
}

/// Beam layout of the simulated sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub azimuth_count: usize,
    /// Radians, positive up.
    pub elevation_angles: Vec<f64>,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            azimuth_count: 360,
            elevation_angles: (0..16).map(|i| (-25.0 + 1.8 * i as f64).to_radians()).collect(),
            max_range: 40.0,
        }
    }
}

fn box_hit(o: Vec3, d: Vec3, b: &SceneBox) -> Option<f64> {
    let (lo, hi) = b.bounds();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn ground_hit(o: Vec3, d: Vec3) -> Option<f64> {
    (d[2] < 0.0 && o[2] > 0.0).then(|| -o[2] / d[2])
}

/// Direction of beam `(azimuth, elevation)` in the sensor frame.
pub fn beam_direction(azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Casts one ray per `(azimuth, elevation)` from the posed sensor and keeps
/// the closest hit among the boxes and the ground plane. Returned points are
/// in the sensor frame; misses and hits beyond `max_range` are dropped.
pub fn simulate_lidar(scene: &Scene, pose: &Pose, lidar: &LidarConfig, azimuth_offset: f64) -> Result<PointCloud> {
    if lidar.azimuth_count == 0 {
        return Err(contract!("azimuth_count must be at least 1"));
    }
    let o = pose.translation();
    let mut points = Vec::new();
    for i in 0..lidar.azimuth_count {
        let az = azimuth_offset + std::f64::consts::TAU * i as f64 / lidar.azimuth_count as f64;
        for &el in &lidar.elevation_angles {
            let ds = beam_direction(az, el);
            let dw = pose.rotate(ds);
            let hit = scene
                .boxes
                .iter()
                .filter_map(|b| box_hit(o, dw, b))
                .chain(ground_hit(o, dw))
                .fold(f64::INFINITY, f64::min);
            if hit <= lidar.max_range {
                points.push([ds[0] * hit, ds[1] * hit, ds[2] * hit]);
            }
        }
    }
    PointCloud::new(points, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub num_past: usize,
    pub num_future: usize,
    /// Seconds between frames.
    pub frame_period: f64,
    pub lidar: LidarConfig,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig { num_past: 5, num_future: 5, frame_period: 0.6, lidar: LidarConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Sensor-frame points.
    pub cloud: PointCloud,
    /// Sensor→world.
    pub pose: Pose,
}

/// Past, current and future sweeps of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<Frame>,
    pub num_past: usize,
    pub num_future: usize,
    pub frame_period: f64,
}

impl SequenceRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = self.num_past + 1 + self.num_future;
        if self.frames.len() != expected {
            return Err(contract!(
                "sequence has {} frames, expected num_past + 1 + T = {expected}",
                self.frames.len()
            ));
        }
        if self.num_future == 0 {
            return Err(contract!("a sequence needs at least one future frame"));
        }
        if let Some(i) = self.frames.iter().position(|f| f.cloud.is_empty()) {
            return Err(contract!("frame {i} has an empty cloud"));
        }
        Ok(())
    }

    /// Index of the current (most recent observed) frame.
    pub fn current_index(&self) -> usize {
        self.num_past
    }

    /// Past and current frames, chronological.
    pub fn observed(&self) -> &[Frame] {
        &self.frames[..=self.num_past]
    }

    pub fn future(&self) -> &[Frame] {
        &self.frames[self.num_past + 1..]
    }

    pub fn current_pose(&self) -> &Pose {
        &self.frames[self.num_past].pose
    }
}

fn quantize(p: Vec3) -> Vec3 {
    p.map(|v| v as f32 as f64)
}

/// Simulates `num_past + 1 + num_future` sweeps at `frame_period` spacing.
/// Each sweep starts at a seed-dependent azimuth phase; coordinates are
/// rounded to `f32` so that the record survives the on-disk format exactly.
pub fn generate_sequence(scene: &Scene, config: &SequenceConfig, seed: u64) -> Result<SequenceRecord> {
    if !(config.frame_period > 0.0) {
        return Err(contract!("frame_period must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = std::f64::consts::TAU / config.lidar.azimuth_count.max(1) as f64;
    let n = config.num_past + 1 + config.num_future;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let time = k as f64 * config.frame_period;
        let pose = scene.ego.pose_at(time);
        let phase = rng.random_range(0.0..step);
        let mut cloud = simulate_lidar(&scene.at(time), &pose, &config.lidar, phase)?;
        cloud.points.iter_mut().for_each(|p| *p = quantize(*p));
        cloud.timestamp = time;
        frames.push(Frame { cloud, pose });
    }
    let record = SequenceRecord {
        frames,
        num_past: config.num_past,
        num_future: config.num_future,
        frame_period: config.frame_period,
    };
    record.validate()?;
    Ok(record)
}

/// Parameters of [`random_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_boxes: usize,
    /// Boxes are placed within ±`extent` m of the ego start, horizontally.
    pub extent: f64,
    /// Boxes closer than this to the ego start are rejected.
    pub clearance: f64,
    pub max_box_speed: f64,
    pub ego_speed: f64,
    pub sensor_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_boxes: 12,
            extent: 14.0,
            clearance: 4.0,
            max_box_speed: 1.5,
            ego_speed: 1.0,
            sensor_height: 1.8,
        }
    }
}

/// A random street-like scene around the origin.
pub fn random_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::with_capacity(config.num_boxes);
    while boxes.len() < config.num_boxes {
        let c = [rng.random_range(-config.extent..config.extent), rng.random_range(-config.extent..config.extent)];
        if c[0].hypot(c[1]) < config.clearance {
            continue;
        }
        let half = [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.5..1.5)];
        let moving = rng.random_bool(0.5);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let s = if moving { config.max_box_speed * rng.random::<f64>() } else { 0.0 };
        let velocity = [s * heading.cos(), s * heading.sin(), 0.0];
        boxes.push(SceneBox { center: [c[0], c[1], half[2]], half_extents: half, velocity });
    }
    let yaw = rng.random_range(-0.3..0.3);
    let ego = EgoTrajectory {
        start: [0.0, 0.0, config.sensor_height],
        start_yaw: yaw,
        velocity: [config.ego_speed * yaw.cos(), config.ego_speed * yaw.sin(), 0.0],
        yaw_rate: 0.0,
    };
    Scene::new(boxes, ego)
}

/// Uniformly random reordering of the points, deterministic per seed.
pub fn point_shuffle(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points.clone();
    points.shuffle(&mut rng);
    PointCloud { points, timestamp: cloud.timestamp }
}

// ---- on-disk format ----

const POINT_MAGIC: &[u8; 4] = b"O4DP";
pub const POINT_VERSION: u32 = 1;
pub const SEQUENCE_MANIFEST: &str = "manifest.json";
pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    file: String,
    points: usize,
    pose: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceManifest {
    version: u32,
    num_past: usize,
    num_future: usize,
    frame_period: f64,
    frame_count: usize,
    frames: Vec<FrameEntry>,
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k}.o4dp")
}

/// Encodes points as an `.o4dp` byte buffer.
pub fn encode_points(points: &[Vec3]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + points.len() * 12);
    buf.extend_from_slice(POINT_MAGIC);
    buf.extend_from_slice(&POINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for &v in p {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

/// Decodes an `.o4dp` buffer; `path` is only used in error messages.
pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Vec3>> {
    let eof = || Error::from(FormatError::UnexpectedEof { path: path.into() });
    if bytes.len() < 4 {
        return Err(eof());
    }
    if &bytes[..4] != POINT_MAGIC {
        return Err(FormatError::BadMagic { path: path.into(), expected: "O4DP" }.into());
    }
    if bytes.len() < 16 {
        return Err(eof());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != POINT_VERSION {
        return Err(FormatError::Version { path: path.into(), expected: POINT_VERSION, found: version }.into());
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    let need = usize::try_from(count).ok().and_then(|c| c.checked_mul(12)).ok_or_else(eof)?;
    if body.len() < need {
        return Err(eof());
    }
    if body.len() > need {
        return Err(FormatError::CountMismatch { path: path.into(), expected: need, found: body.len() }.into());
    }
    Ok(body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FormatError::MissingFile { path: path.into() }.into(),
        _ => Error::io(path, e),
    })
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    fs::write(path, encode_points(points)).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    decode_points(&read_bytes(path)?, path)
}

pub fn write_sequence(record: &SequenceRecord, dir: &Path) -> Result<()> {
    record.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(record.frames.len());
    for (k, f) in record.frames.iter().enumerate() {
        let file = frame_file_name(k);
        write_points(&dir.join(&file), &f.cloud.points)?;
        frames.push(FrameEntry {
            file,
            points: f.cloud.len(),
            pose: PoseRecord::new(f.cloud.timestamp, &f.pose),
        });
    }
    let manifest = SequenceManifest {
        version: POINT_VERSION,
        num_past: record.num_past,
        num_future: record.num_future,
        frame_period: record.frame_period,
        frame_count: record.frames.len(),
        frames,
    };
    let path = dir.join(SEQUENCE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let mpath = dir.join(SEQUENCE_MANIFEST);
    let invalid = |msg: String| Error::from(FormatError::Invalid { path: mpath.clone(), msg });
    let manifest: SequenceManifest =
        serde_json::from_slice(&read_bytes(&mpath)?).map_err(|e| invalid(e.to_string()))?;
    if manifest.version != POINT_VERSION {
        return Err(FormatError::Version { path: mpath, expected: POINT_VERSION, found: manifest.version }.into());
    }
    let expected = manifest.num_past + 1 + manifest.num_future;
    if manifest.frame_count != expected || manifest.frames.len() != expected {
        return Err(FormatError::CountMismatch {
            path: mpath,
            expected,
            found: manifest.frames.len().min(manifest.frame_count),
        }
        .into());
    }
    let mut frames = Vec::with_capacity(expected);
    for entry in &manifest.frames {
        let path = dir.join(&entry.file);
        let points = read_points(&path)?;
        if points.len() != entry.points {
            return Err(FormatError::CountMismatch { path, expected: entry.points, found: points.len() }.into());
        }
        let pose = entry.pose.pose().map_err(|e| invalid(e.to_string()))?;
        let cloud = PointCloud::new(points, entry.pose.timestamp).map_err(|e| {
            Error::from(FormatError::Invalid { path: path.clone(), msg: e.to_string() })
        })?;
        frames.push(Frame { cloud, pose });
    }
    let record = SequenceRecord {
        frames,
        num_past: manifest.num_past,
        num_future: manifest.num_future,
        frame_period: manifest.frame_period,
    };
    record.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Sequence directories, relative to the dataset root.
    pub sequences: Vec<String>,
}

pub fn sequence_dir_name(i: usize) -> String {
    format!("seq_{i:04}")
}

pub fn write_dataset_manifest(root: &Path, sequences: &[String]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let m = DatasetManifest { version: POINT_VERSION, sequences: sequences.to_vec() };
    let path = root.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&m).expect("serializes")).map_err(|e| Error::io(&path, e))
}

/// Sequence directories listed in a dataset root.
pub fn read_dataset(root: &Path) -> Result<Vec<PathBuf>> {
    let path = root.join(DATASET_MANIFEST);
    let m: DatasetManifest = serde_json::from_slice(&read_bytes(&path)?)
        .map_err(|e| FormatError::Invalid { path: path.clone(), msg: e.to_string() })?;
    Ok(m.sequences.iter().map(|s| root.join(s)).collect())
}
