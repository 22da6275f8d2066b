//! The learnable forecaster: temporal fusion of past BEV maps, a recurrent
//! convolutional decoder emitting one occupancy grid per future frame, and a
//! residual UNet refinement stage.
//!
//! All stages take parameters bound on a [`Tape`], so the same code serves
//! training (tracking tape) and inference ([`Tape::without_grad`]).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{load_checkpoint, save_checkpoint, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::geometry::PointCloud;
use crate::voxel::{bev_encode, downsample_bev, voxelize, GridKind, GridSpec, OccupancyForecast, OccupancyGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Past frames observed in addition to the current one.
    pub num_past: usize,
    /// Future frames forecast (T).
    pub num_future: usize,
    /// Seconds.
    pub frame_period: f64,
    /// Width of the fused BEV feature and recurrent state.
    pub channels: usize,
    /// Base width of the refinement UNet.
    pub unet_channels: usize,
    pub leaky_slope: f64,
    /// Max-pool factor applied to the BEV before fusion.
    pub bev_downsample: usize,
    /// Volume voxelized from the aligned input clouds.
    pub encode_grid: GridSpec,
    /// Volume of the forecast occupancy grids. Its Y/X cell counts must be
    /// twice the downsampled BEV size.
    pub output_grid: GridSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let desk = GridSpec { min_corner: [-16.0, -16.0, -1.0], max_corner: [16.0, 16.0, 3.0], voxel_size: [0.5; 3] };
        PipelineConfig {
            num_past: 5,
            num_future: 5,
            frame_period: 0.6,
            channels: 16,
            unet_channels: 8,
            leaky_slope: 0.1,
            bev_downsample: 2,
            encode_grid: desk,
            output_grid: desk,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_past < 1 {
            return Err(Error::Config("num_past must be at least 1".into()));
        }
        if self.num_future < 1 {
            return Err(Error::Config("num_future must be at least 1".into()));
        }
        if !(self.frame_period > 0.0) {
            return Err(Error::Config("frame_period must be positive".into()));
        }
        if self.channels == 0 || self.unet_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        self.encode_grid.validate().map_err(|e| Error::Config(format!("encode_grid: {e}")))?;
        self.output_grid.validate().map_err(|e| Error::Config(format!("output_grid: {e}")))?;
        let [ex, ey, _] = self.encode_grid.dims();
        let d = self.bev_downsample;
        if d == 0 || ex % d != 0 || ey % d != 0 {
            return Err(Error::Config(format!("bev_downsample {d} must divide the encode grid {ex}x{ey}")));
        }
        let [ox, oy, _] = self.output_grid.dims();
        if ox != 2 * ex / d || oy != 2 * ey / d {
            return Err(Error::Config(format!(
                "output grid {ox}x{oy} must be twice the downsampled BEV {}x{}",
                ex / d,
                ey / d
            )));
        }
        if ox % 2 != 0 || oy % 2 != 0 {
            return Err(Error::Config("output grid X and Y counts must be even".into()));
        }
        Ok(())
    }

    fn encode_channels(&self) -> usize {
        self.encode_grid.dims()[2]
    }

    fn output_channels(&self) -> usize {
        self.output_grid.dims()[2]
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.channels;
        let u = self.unet_channels;
        let zin = self.encode_channels() * (self.num_past + 1);
        let zo = self.output_channels();
        let conv = |co: usize, ci: usize| vec![co, ci, 3, 3];
        vec![
            ("fuse.conv1.weight", conv(c, zin)),
            ("fuse.conv1.bias", vec![c]),
            ("fuse.conv2.weight", conv(c, c)),
            ("fuse.conv2.bias", vec![c]),
            ("block.weight", conv(c, 2 * c)),
            ("block.bias", vec![c]),
            ("head.weight", conv(zo, c)),
            ("head.bias", vec![zo]),
            ("unet.enc1.weight", conv(u, zo)),
            ("unet.enc1.bias", vec![u]),
            ("unet.enc2.weight", conv(2 * u, u)),
            ("unet.enc2.bias", vec![2 * u]),
            ("unet.dec1.weight", conv(u, 3 * u)),
            ("unet.dec1.bias", vec![u]),
            ("unet.out.weight", conv(zo, u)),
            ("unet.out.bias", vec![zo]),
        ]
    }
}

/// He-normal weights, zero biases, and a zero UNet output layer so that
/// refinement starts as the identity.
pub fn init_params(config: &PipelineConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if shape.len() == 1 || name.starts_with("unet.out") {
            vec![0.0; n]
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Voxelizes, encodes and downsamples each aligned cloud.
pub fn encode_clouds(aligned: &[PointCloud], config: &PipelineConfig) -> Result<Vec<Tensor>> {
    if aligned.len() != config.num_past + 1 {
        return Err(contract!("expected {} aligned clouds, got {}", config.num_past + 1, aligned.len()));
    }
    aligned
        .iter()
        .map(|c| downsample_bev(&bev_encode(voxelize(c, &config.encode_grid).grid)?, config.bev_downsample))
        .collect()
}

/// Chronological channel concatenation followed by conv → leaky → conv.
pub fn temporal_fuse(tape: &mut Tape, bev_frames: &[Var], p: &BoundParams, slope: f64) -> Result<Var> {
    let Some(&first) = bev_frames.first() else {
        return Err(contract!("temporal_fuse needs at least one frame"));
    };
    let shape = tape.shape(first).to_vec();
    if let Some(i) = bev_frames.iter().position(|&f| tape.shape(f) != shape.as_slice()) {
        return Err(contract!("BEV frame {i} has shape {:?}, frame 0 has {shape:?}", tape.shape(bev_frames[i])));
    }
    let x = tape.concat_channels(bev_frames)?;
    let h = tape.conv2d(x, p.get("fuse.conv1.weight"), p.get("fuse.conv1.bias"), 1)?;
    let h = tape.leaky_relu(h, slope);
    tape.conv2d(h, p.get("fuse.conv2.weight"), p.get("fuse.conv2.bias"), 1)
}

/// Recurrent decoding: `h_0` is the fused map and
/// `h_t = leaky(conv(concat(h_{t-1}, fused)))` with one set of block weights
/// shared over all steps. Frame `t` is `upsample2x(head(h_t))`, height
/// slices as channels.
pub fn rollout(tape: &mut Tape, fused: Var, p: &BoundParams, steps: usize, slope: f64) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(contract!("rollout needs T >= 1"));
    }
    let mut h = fused;
    let mut frames = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = tape.concat_channels(&[h, fused])?;
        let y = tape.conv2d(x, p.get("block.weight"), p.get("block.bias"), 1)?;
        h = tape.leaky_relu(y, slope);
        let logits = tape.conv2d(h, p.get("head.weight"), p.get("head.bias"), 1)?;
        frames.push(tape.upsample_nearest2x(logits)?);
    }
    Ok(frames)
}

fn unet_one(tape: &mut Tape, x: Var, p: &BoundParams, slope: f64) -> Result<Var> {
    let e1 = tape.conv2d(x, p.get("unet.enc1.weight"), p.get("unet.enc1.bias"), 1)?;
    let e1 = tape.leaky_relu(e1, slope);
    let down = tape.max_pool2x(e1)?;
    let e2 = tape.conv2d(down, p.get("unet.enc2.weight"), p.get("unet.enc2.bias"), 1)?;
    let e2 = tape.leaky_relu(e2, slope);
    let up = tape.upsample_nearest2x(e2)?;
    let cat = tape.concat_channels(&[up, e1])?;
    let d1 = tape.conv2d(cat, p.get("unet.dec1.weight"), p.get("unet.dec1.bias"), 1)?;
    let d1 = tape.leaky_relu(d1, slope);
    let out = tape.conv2d(d1, p.get("unet.out.weight"), p.get("unet.out.bias"), 1)?;
    tape.add(x, out)
}

/// Residual per-frame refinement `x + UNet(x)`.
pub fn unet_refine(tape: &mut Tape, logits: &[Var], p: &BoundParams, slope: f64) -> Result<Vec<Var>> {
    logits.iter().map(|&x| unet_one(tape, x, p, slope)).collect()
}

/// Full differentiable forward pass on pre-encoded BEV maps. Returns one
/// logit grid per future frame, shaped like `config.output_grid`.
pub fn forecast_on_tape(tape: &mut Tape, bev: &[Tensor], config: &PipelineConfig, p: &BoundParams) -> Result<Vec<Var>> {
    if bev.len() != config.num_past + 1 {
        return Err(contract!("expected {} BEV frames, got {}", config.num_past + 1, bev.len()));
    }
    let frames: Vec<Var> = bev.iter().map(|t| tape.leaf(t.clone())).collect();
    let fused = temporal_fuse(tape, &frames, p, config.leaky_slope)?;
    let coarse = rollout(tape, fused, p, config.num_future, config.leaky_slope)?;
    let refined = unet_refine(tape, &coarse, p, config.leaky_slope)?;
    let want = config.output_grid.zyx_shape();
    if tape.shape(refined[0]) != want.as_slice() {
        return Err(contract!("forecast shape {:?} does not match output grid {want:?}", tape.shape(refined[0])));
    }
    Ok(refined)
}

/// voxelize → bev_encode → downsample → temporal_fuse → rollout →
/// unet_refine, without gradient tracking. Returns logit grids.
pub fn forecast_from_clouds(aligned: &[PointCloud], config: &PipelineConfig, params: &ParamSet) -> Result<OccupancyForecast> {
    let bev = encode_clouds(aligned, config)?;
    let mut tape = Tape::without_grad();
    let p = params.bind(&mut tape);
    let frames = forecast_on_tape(&mut tape, &bev, config, &p)?;
    let grids = frames
        .into_iter()
        .map(|f| OccupancyGrid::new(config.output_grid, tape.tensor(f), GridKind::Logits))
        .collect::<Result<Vec<_>>>()?;
    OccupancyForecast::new(grids, config.frame_period)
}

const CHECKPOINT_KIND: &str = "occ4d-forecaster";

/// Saves parameters together with the pipeline configuration they belong to.
pub fn save_forecaster(dir: &Path, config: &PipelineConfig, params: &ParamSet) -> Result<()> {
    let meta = serde_json::json!({ "kind": CHECKPOINT_KIND, "pipeline": config });
    save_checkpoint(dir, params, meta)
}

/// Loads a checkpoint, rejecting ones written for another model or for a
/// different pipeline configuration.
pub fn load_forecaster(dir: &Path, config: &PipelineConfig) -> Result<ParamSet> {
    let (manifest, params) = load_checkpoint(dir)?;
    if manifest.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(Error::Config(format!("{} is not a forecaster checkpoint", dir.display())));
    }
    let saved: PipelineConfig = serde_json::from_value(manifest.meta["pipeline"].clone())
        .map_err(|e| Error::Config(format!("{}: unreadable pipeline config: {e}", dir.display())))?;
    if saved != *config {
        return Err(Error::Config(format!(
            "{} was trained with a different pipeline configuration",
            dir.display()
        )));
    }
    let expected = config.param_shapes();
    let ok = expected.len() == params.len()
        && expected.iter().zip(params.iter()).all(|((n, s), (m, t))| n == &m && s.as_slice() == t.shape());
    if !ok {
        return Err(Error::Config(format!("{}: parameter layout does not match the pipeline", dir.display())));
    }
    Ok(params)
}
