//! Simulates a sequence of LiDAR sweeps over a moving scene and round-trips
//! it through the on-disk format.

use occ4d::data::{generate_sequence, random_scene, read_sequence, write_sequence, SceneConfig, SequenceConfig};

fn main() -> occ4d::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = random_scene(&SceneConfig::default(), seed)?;
    println!("{} boxes, ego velocity {:?}", scene.boxes.len(), scene.ego.velocity);
    let record = generate_sequence(&scene, &SequenceConfig::default(), seed)?;
    for (k, f) in record.frames.iter().enumerate() {
        let tag = if k < record.current_index() { "past" } else if k == record.current_index() { "current" } else { "future" };
        println!("frame {k:2} t={:.1}s {tag:7} {} points, sensor at {:?}", f.cloud.timestamp, f.cloud.len(), f.pose.translation());
    }

    let dir = tempfile::tempdir().map_err(|e| occ4d::Error::Config(e.to_string()))?;
    write_sequence(&record, dir.path())?;
    assert_eq!(read_sequence(dir.path())?, record);
    println!("round trip through {} is exact", dir.path().display());
    Ok(())
}
