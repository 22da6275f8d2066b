//! Walks a ray through a grid and renders its expected depth.

use occ4d::diffcore::Tensor;
use occ4d::geometry::QueryRay;
use occ4d::render::{expected_depth, termination_weights, traverse};
use occ4d::voxel::{GridKind, GridSpec, OccupancyGrid};

fn main() -> occ4d::Result<()> {
    let spec = GridSpec::new([0.0; 3], [8.0, 4.0, 1.0], [1.0; 3])?;
    let ray = QueryRay::new([0.0, 0.5, 0.5], [1.0, 0.0, 0.0], 5.0)?;
    let chain = traverse(&spec, &ray, 8.0)?;
    for s in &chain.segments {
        println!("cell {:?}  [{:.2}, {:.2})  midpoint {:.2}", s.cell, s.entry, s.exit, s.midpoint());
    }

    for (label, probs) in [
        ("empty", vec![0.0; 8]),
        ("opaque at x=3", [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0].to_vec()),
        ("two half cells", [0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0].to_vec()),
    ] {
        let mut values = vec![0.0; spec.num_cells()];
        for (x, p) in probs.iter().enumerate() {
            values[spec.flat_index([x, 0, 0])] = *p;
        }
        let grid = OccupancyGrid::new(spec, Tensor::new(spec.zyx_shape(), values)?, GridKind::Probability)?;
        let (w, bg) = termination_weights(grid.values().data(), &spec, &chain);
        let depth = expected_depth(&grid, &chain, 10.0)?;
        println!("{label:15} depth {depth:.4}  weight sum {:.3}", w.iter().sum::<f64>() + bg);
    }
    Ok(())
}
