//! Depth and point-set metrics for occupancy forecasts: L1 depth error,
//! absolute relative error, chamfer distance and near-field chamfer distance.

mod kdtree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::NearestNeighborIndex;

use crate::error::{contract, Error, Result};
use crate::geometry::{QueryRay, Vec3};
use crate::render::{render_batch, FrameRay, RenderSettings};
use crate::voxel::OccupancyForecast;

/// Aggregate scores of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute depth error, meters.
    pub l1: f64,
    pub absrel: f64,
    /// Near-field chamfer distance, meters.
    pub nfcd: f64,
    /// Chamfer distance, meters.
    pub cd: f64,
    pub ray_count: usize,
    /// Ground-truth points per future frame.
    pub point_counts: Vec<usize>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "l1,absrel,nfcd,cd,ray_count";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.l1, self.absrel, self.nfcd, self.cd, self.ray_count)
    }
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty("depth arrays"));
    }
    if pred.len() != gt.len() {
        return Err(contract!("{} predicted depths but {} ground-truth depths", pred.len(), gt.len()));
    }
    Ok(())
}

/// Mean absolute depth difference.
pub fn l1_depth(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean of `|pred − gt| / gt`.
pub fn absrel(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    if let Some(g) = gt.iter().find(|&&g| !(g > 0.0)) {
        return Err(contract!("absrel: ground-truth depth {g} is not positive"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / pred.len() as f64)
}

fn mean_nn_distance(from: &[Vec3], to: &NearestNeighborIndex) -> f64 {
    let total: f64 = from
        .par_iter()
        .map(|&p| to.nearest(p).expect("index is nonempty").1)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / from.len() as f64
}

/// `mean_{p∈a} min_{q∈b} ‖p−q‖ + mean_{q∈b} min_{p∈a} ‖p−q‖`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer point set"));
    }
    let ia = NearestNeighborIndex::build(a);
    let ib = NearestNeighborIndex::build(b);
    Ok(mean_nn_distance(a, &ib) + mean_nn_distance(b, &ia))
}

fn horizontal_distance(p: Vec3, origin: Vec3) -> f64 {
    let (dx, dy) = (p[0] - origin[0], p[1] - origin[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Points within `radius` of `origin` in the x-y plane.
pub fn near_field_crop(points: &[Vec3], origin: Vec3, radius: f64) -> Vec<Vec3> {
    points.iter().copied().filter(|&p| horizontal_distance(p, origin) <= radius).collect()
}

/// Chamfer distance over the points of each set lying within `radius`
/// (horizontally) of `origin`.
pub fn near_field_chamfer(a: &[Vec3], b: &[Vec3], origin: Vec3, radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(contract!("near-field radius must be positive"));
    }
    let (ca, cb) = (near_field_crop(a, origin, radius), near_field_crop(b, origin, radius));
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::NoNearFieldPoints { radius });
    }
    chamfer(&ca, &cb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub render: RenderSettings,
    pub near_field_radius: f64,
}

/// Renders every ray against its frame, reconstructs predicted points as
/// `origin + depth · direction`, and scores them against the ray endpoints.
///
/// L1 and AbsRel average over all rays. CD and NFCD are computed per frame
/// and averaged over frames that have rays. For NFCD a ray is near-field when
/// its ground-truth endpoint lies within the radius of the ray origin, and
/// both its predicted and true points enter the crop.
pub fn evaluate(
    forecast: &OccupancyForecast,
    rays_by_frame: &[Vec<QueryRay>],
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if rays_by_frame.len() != forecast.len() {
        return Err(contract!(
            "{} ray groups for a forecast of {} frames",
            rays_by_frame.len(),
            forecast.len()
        ));
    }
    let probs = forecast.to_probabilities();
    let flat: Vec<FrameRay> = rays_by_frame
        .iter()
        .enumerate()
        .flat_map(|(f, rs)| rs.iter().map(move |&ray| FrameRay { frame: f, ray }))
        .collect();
    if flat.is_empty() {
        return Err(Error::Empty("evaluation rays"));
    }
    let depths = render_batch(&probs, &flat, &settings.render)?;
    let gt: Vec<f64> = flat.iter().map(|r| r.ray.gt_depth).collect();
    let l1 = l1_depth(&depths, &gt)?;
    let rel = absrel(&depths, &gt)?;

    let mut cd_sum = 0.0;
    let mut nf_sum = 0.0;
    let (mut cd_frames, mut nf_frames) = (0usize, 0usize);
    let mut offset = 0;
    for rays in rays_by_frame {
        let d = &depths[offset..offset + rays.len()];
        offset += rays.len();
        if rays.is_empty() {
            continue;
        }
        let pred: Vec<Vec3> = rays.iter().zip(d).map(|(r, &e)| r.point_at(e)).collect();
        let truth: Vec<Vec3> = rays.iter().map(QueryRay::endpoint).collect();
        cd_sum += chamfer(&pred, &truth)?;
        cd_frames += 1;

        let near: Vec<usize> = (0..rays.len())
            .filter(|&i| horizontal_distance(truth[i], rays[i].origin) <= settings.near_field_radius)
            .collect();
        if !near.is_empty() {
            let np: Vec<Vec3> = near.iter().map(|&i| pred[i]).collect();
            let nt: Vec<Vec3> = near.iter().map(|&i| truth[i]).collect();
            nf_sum += chamfer(&np, &nt)?;
            nf_frames += 1;
        }
    }
    if nf_frames == 0 {
        return Err(Error::NoNearFieldPoints { radius: settings.near_field_radius });
    }
    let report = MetricsReport {
        l1,
        absrel: rel,
        nfcd: nf_sum / nf_frames as f64,
        cd: cd_sum / cd_frames as f64,
        ray_count: flat.len(),
        point_counts: rays_by_frame.iter().map(Vec::len).collect(),
    };
    let vals = [report.l1, report.absrel, report.nfcd, report.cd];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(format!("metric values out of range: {vals:?}")));
    }
    Ok(report)
}
