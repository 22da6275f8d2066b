//! Differentiable expected-depth rendering through occupancy grids.
//!
//! A ray is walked cell by cell (incremental grid traversal), one sample is
//! taken at the midpoint of each visited segment, and the occupancy
//! probability of the cell is used as the probability that the ray
//! terminates there. Rays that pass every cell terminate at a background
//! depth.

use rayon::prelude::*;

use crate::diffcore::{CustomBackward, Tape, Var};
use crate::error::{contract, Result};
use crate::geometry::QueryRay;
use crate::voxel::{GridKind, GridSpec, OccupancyForecast, OccupancyGrid};

/// Portion of a ray inside one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub cell: [usize; 3],
    pub entry: f64,
    pub exit: f64,
}

impl Segment {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.entry + self.exit)
    }
}

/// Ordered cells visited by a ray with their entry/exit distances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySampleChain {
    pub segments: Vec<Segment>,
    /// Distance at which the ray leaves the grid or reaches its maximum range.
    pub exit_distance: f64,
}

impl RaySampleChain {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.segments.iter().map(|s| s.cell)
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.segments.iter().map(Segment::midpoint).collect()
    }
}

/// Cells intersected by the segment `origin + t·direction`, `t ∈ [0, max_range]`,
/// in order of increasing distance.
///
/// When boundary crossings on several axes coincide, x advances first, then
/// y, then z. Cells touched over zero length (exact edge or corner hits)
/// are not reported.
pub fn traverse(spec: &GridSpec, ray: &QueryRay, max_range: f64) -> Result<RaySampleChain> {
    if !(max_range > 0.0) {
        return Err(contract!("traverse: max_range must be positive, got {max_range}"));
    }
    let (o, d) = (ray.origin, ray.direction);
    let dims = spec.dims();

    let mut t0: f64 = 0.0;
    let mut t1 = max_range;
    for a in 0..3 {
        let (lo, hi) = (spec.min_corner[a], spec.max_corner[a]);
        if d[a] == 0.0 {
            if o[a] < lo || o[a] >= hi {
                return Ok(RaySampleChain::default());
            }
        } else {
            let ta = (lo - o[a]) / d[a];
            let tb = (hi - o[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t0 < t1) {
        return Ok(RaySampleChain::default());
    }

    let entry = ray.point_at(t0);
    let mut cell = [0usize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = spec.cell_coordinate(entry, a).floor();
        cell[a] = f.clamp(0.0, (dims[a] - 1) as f64) as usize;
        step[a] = if d[a] > 0.0 {
            1
        } else if d[a] < 0.0 {
            -1
        } else {
            0
        };
        t_next[a] = boundary_distance(spec, o, d, a, cell[a], step[a]);
    }

    let mut segments = Vec::new();
    let mut t = t0;
    loop {
        let mut axis = 0;
        for a in 1..3 {
            if t_next[a] < t_next[axis] {
                axis = a;
            }
        }
        let exit = t_next[axis].min(t1);
        if exit > t {
            segments.push(Segment { cell, entry: t, exit });
        }
        if t_next[axis] >= t1 {
            break;
        }
        t = t.max(t_next[axis]);
        let next = cell[axis] as isize + step[axis];
        if next < 0 || next >= dims[axis] as isize {
            break;
        }
        cell[axis] = next as usize;
        t_next[axis] = boundary_distance(spec, o, d, axis, cell[axis], step[axis]);
    }
    Ok(RaySampleChain { segments, exit_distance: t1 })
}

fn boundary_distance(spec: &GridSpec, o: [f64; 3], d: [f64; 3], a: usize, cell: usize, step: isize) -> f64 {
    let face = match step {
        1 => cell + 1,
        -1 => cell,
        _ => return f64::INFINITY,
    };
    (spec.min_corner[a] + face as f64 * spec.voxel_size[a] - o[a]) / d[a]
}

/// Termination weights `w_i = p_i · ∏_{j<i}(1 − p_j)` for each visited cell,
/// and the background weight `∏_j (1 − p_j)`.
pub fn termination_weights(probs: &[f64], spec: &GridSpec, chain: &RaySampleChain) -> (Vec<f64>, f64) {
    let mut transmittance = 1.0;
    let weights = chain
        .segments
        .iter()
        .map(|s| {
            let p = probs[spec.flat_index(s.cell)];
            let w = p * transmittance;
            transmittance *= 1.0 - p;
            w
        })
        .collect();
    (weights, transmittance)
}

fn depth_from_values(probs: &[f64], flat: &[usize], mids: &[f64], background: f64) -> f64 {
    let mut transmittance = 1.0;
    let mut depth = 0.0;
    for (&i, &m) in flat.iter().zip(mids) {
        let p = probs[i];
        depth += p * transmittance * m;
        transmittance *= 1.0 - p;
    }
    depth + transmittance * background
}

/// Adds `upstream · ∂E/∂p_i` for every visited cell into `grad`.
///
/// With `T_i = ∏_{j<i}(1 − p_j)` and `R_i` the expected depth of the ray
/// restarted just after cell `i`, `∂E/∂p_i = T_i · (d_i − R_i)`.
fn depth_grad(
    probs: &[f64],
    flat: &[usize],
    mids: &[f64],
    background: f64,
    upstream: f64,
    out: &mut Vec<(usize, f64)>,
) {
    let n = flat.len();
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for &i in flat {
        trans.push(t);
        t *= 1.0 - probs[i];
    }
    let mut rest = background;
    let start = out.len();
    out.resize(start + n, (0, 0.0));
    for k in (0..n).rev() {
        out[start + k] = (flat[k], upstream * trans[k] * (mids[k] - rest));
        let p = probs[flat[k]];
        rest = p * mids[k] + (1.0 - p) * rest;
    }
}

/// Expected termination depth of one chain through a probability grid.
pub fn expected_depth(grid: &OccupancyGrid, chain: &RaySampleChain, background_depth: f64) -> Result<f64> {
    if grid.kind() != GridKind::Probability {
        return Err(contract!("expected_depth needs a probability grid"));
    }
    if chain.exit_distance > background_depth && !chain.is_empty() {
        return Err(contract!(
            "background depth {background_depth} is closer than the chain exit {}",
            chain.exit_distance
        ));
    }
    let spec = grid.spec();
    let flat: Vec<usize> = chain.cells().map(|c| spec.flat_index(c)).collect();
    Ok(depth_from_values(grid.values().data(), &flat, &chain.midpoints(), background_depth))
}

/// Rendering range and background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Rays are walked over `[0, max_range]`.
    pub max_range: f64,
    /// Depth assigned to the probability mass that passes every cell.
    pub background_depth: f64,
}

impl RenderSettings {
    pub fn new(max_range: f64) -> Self {
        RenderSettings { max_range, background_depth: max_range }
    }

    fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0) {
            return Err(contract!("max_range must be positive"));
        }
        if self.background_depth < self.max_range {
            return Err(contract!(
                "background depth {} must be at least max_range {}",
                self.background_depth,
                self.max_range
            ));
        }
        Ok(())
    }
}

/// A query ray paired with the index of the future frame it observes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRay {
    pub frame: usize,
    pub ray: QueryRay,
}

struct PreparedRay {
    frame: usize,
    flat: Vec<usize>,
    mids: Vec<f64>,
}

fn prepare(spec: &GridSpec, rays: &[FrameRay], frames: usize, settings: &RenderSettings) -> Result<Vec<PreparedRay>> {
    settings.validate()?;
    if let Some(bad) = rays.iter().find(|r| r.frame >= frames) {
        return Err(contract!("ray refers to frame {} but only {frames} frames exist", bad.frame));
    }
    rays.par_iter()
        .map(|r| {
            let chain = traverse(spec, &r.ray, settings.max_range)?;
            Ok(PreparedRay {
                frame: r.frame,
                flat: chain.cells().map(|c| spec.flat_index(c)).collect(),
                mids: chain.midpoints(),
            })
        })
        .collect()
}

/// Renders every ray against its own frame of a probability forecast.
pub fn render_batch(forecast: &OccupancyForecast, rays: &[FrameRay], settings: &RenderSettings) -> Result<Vec<f64>> {
    if forecast.frames().iter().any(|f| f.kind() != GridKind::Probability) {
        return Err(contract!("render_batch needs probability grids"));
    }
    let prepared = prepare(forecast.spec(), rays, forecast.len(), settings)?;
    let frames = forecast.frames();
    Ok(prepared
        .par_iter()
        .map(|r| depth_from_values(frames[r.frame].values().data(), &r.flat, &r.mids, settings.background_depth))
        .collect())
}

struct RenderBackward {
    rays: Vec<PreparedRay>,
    background: f64,
}

impl CustomBackward for RenderBackward {
    fn backward(&self, inputs: &[&[f64]], output_grad: &[f64], input_grads: &mut [Vec<f64>]) {
        let contributions: Vec<Vec<(usize, f64)>> = self
            .rays
            .par_iter()
            .zip(output_grad.par_iter())
            .map(|(r, &g)| {
                let mut out = Vec::with_capacity(r.flat.len());
                if g != 0.0 {
                    depth_grad(inputs[r.frame], &r.flat, &r.mids, self.background, g, &mut out);
                }
                out
            })
            .collect();
        // Serial accumulation in ray order keeps the sum schedule-independent.
        for (r, c) in self.rays.iter().zip(&contributions) {
            let dst = &mut input_grads[r.frame];
            for &(i, v) in c {
                dst[i] += v;
            }
        }
    }
}

/// Differentiable form of [`render_batch`]: `frames` are probability grids
/// recorded on `tape` (shape `[Z,Y,X]` over `spec`). Returns a `[N]` vector
/// of expected depths; gradients reach only the frame each ray observes.
pub fn render_on_tape(
    tape: &mut Tape,
    frames: &[Var],
    spec: &GridSpec,
    rays: &[FrameRay],
    settings: &RenderSettings,
) -> Result<Var> {
    let shape = spec.zyx_shape();
    for (i, &f) in frames.iter().enumerate() {
        if tape.shape(f) != shape.as_slice() {
            return Err(contract!("frame {i} has shape {:?}, grid requires {shape:?}", tape.shape(f)));
        }
        if tape.value(f).iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract!("frame {i} holds values outside [0, 1]"));
        }
    }
    let prepared = prepare(spec, rays, frames.len(), settings)?;
    let depths: Vec<f64> = prepared
        .par_iter()
        .map(|r| depth_from_values(tape.value(frames[r.frame]), &r.flat, &r.mids, settings.background_depth))
        .collect();
    let n = depths.len();
    tape.custom(
        frames,
        vec![n],
        depths,
        Box::new(RenderBackward { rays: prepared, background: settings.background_depth }),
    )
}
