//! Voxelizes a simulated sweep, reads it as a height-as-channel BEV map,
//! downsamples it and dumps the grid.

use occ4d::data::{random_scene, simulate_lidar, LidarConfig, SceneConfig};
use occ4d::voxel::{bev_encode, downsample_bev, read_grid, voxelize, write_grid, GridSpec};

fn main() -> occ4d::Result<()> {
    let scene = random_scene(&SceneConfig::default(), 3)?;
    let cloud = simulate_lidar(&scene, &scene.ego.pose_at(0.0), &LidarConfig::default(), 0.0)?;
    let spec = GridSpec::new([-16.0, -16.0, -2.0], [16.0, 16.0, 2.0], [0.5; 3])?;

    // Sensor-frame points: the ground sits 1.8 m below the origin.
    let vox = voxelize(&cloud, &spec);
    let occupied = vox.grid.values().data().iter().filter(|&&v| v > 0.0).count();
    println!("{} points -> {occupied} occupied cells of {}, {} outside", cloud.len(), spec.num_cells(), vox.outside);

    let path = std::env::temp_dir().join("occ4d_example.o4dg");
    write_grid(&path, &vox.grid)?;
    println!("grid dump: {} ({} values)", path.display(), read_grid(&path)?.values.len());

    let bev = bev_encode(vox.grid)?;
    let small = downsample_bev(&bev, 4)?;
    println!("BEV {:?} -> {:?}", bev.shape(), small.shape());
    let [c, h, w] = small.shape() else { unreachable!() };
    for y in (0..*h).rev() {
        let row: String = (0..*w)
            .map(|x| {
                let n = (0..*c).filter(|&z| small.at(&[z, y, x]) > 0.0).count();
                [' ', '.', ':', '+', '#'][n.min(4)]
            })
            .collect();
        println!("|{row}|");
    }
    Ok(())
}
