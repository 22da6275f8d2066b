//! Aligns a future sweep into the current sensor frame and turns its returns
//! into query rays.

use occ4d::geometry::{align_to_current, rays_from_future_cloud, relative_pose, PointCloud, Pose};

fn main() -> occ4d::Result<()> {
    // Ego drives 2 m forward and turns 10 degrees between the two sweeps.
    let current = Pose::from_yaw(0.0, [0.0, 0.0, 1.8]);
    let future = Pose::from_yaw(10f64.to_radians(), [2.0, 0.0, 1.8]);

    let sweep = PointCloud::new(vec![[5.0, 0.0, -1.8], [3.0, 4.0, 0.0], [0.0, -6.0, -1.0]], 0.6)?;
    let aligned = align_to_current(&sweep, &future, &current);
    let origin = relative_pose(&future, &current).translation();
    println!("future sensor origin in current frame: {origin:?}");

    let batch = rays_from_future_cloud(&aligned, origin);
    for (p, r) in aligned.points.iter().zip(&batch.rays) {
        println!(
            "point [{:7.3} {:7.3} {:7.3}]  dir [{:6.3} {:6.3} {:6.3}]  depth {:.3}",
            p[0], p[1], p[2], r.direction[0], r.direction[1], r.direction[2], r.gt_depth
        );
    }
    println!("skipped {} near-zero-range points", batch.skipped);
    Ok(())
}
