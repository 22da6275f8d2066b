//! Scores an oracle forecast (ground-truth voxels) and the all-empty
//! baseline on one simulated sequence.

use occ4d::data::{generate_sequence, random_scene, SceneConfig, SequenceConfig};
use occ4d::metrics::{chamfer, evaluate, EvalSettings};
use occ4d::render::RenderSettings;
use occ4d::train::prepare_sample;
use occ4d::voxel::{voxelize, GridKind, GridSpec, OccupancyForecast, OccupancyGrid};

fn main() -> occ4d::Result<()> {
    println!("chamfer({{0}}, {{(1,0,0), (0,2,0)}}) = {}", chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])?);

    let record = generate_sequence(&random_scene(&SceneConfig::default(), 4)?, &SequenceConfig::default(), 4)?;
    let spec = GridSpec::new([-16.0, -16.0, -1.0], [16.0, 16.0, 3.0], [0.5; 3])?;
    let sample = prepare_sample(&record, &spec, None)?;
    let settings = EvalSettings { render: RenderSettings::new(40.0), near_field_radius: 10.0 };

    let oracle = OccupancyForecast::new(sample.future.iter().map(|c| voxelize(c, &spec).grid).collect(), 0.6)?;
    let empty = OccupancyForecast::new(
        (0..sample.future.len()).map(|_| OccupancyGrid::zeros(spec, GridKind::Probability)).collect(),
        0.6,
    )?;
    println!("{}", occ4d::metrics::MetricsReport::CSV_HEADER);
    for (name, f) in [("oracle", &oracle), ("empty", &empty)] {
        let r = evaluate(f, &sample.rays, &settings)?;
        println!("{} ({name})", r.csv_row());
    }
    Ok(())
}
