//! Self-supervised training: L1 on rendered depth, Adam, cosine annealing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{point_shuffle, read_dataset, read_sequence, SequenceRecord};
use crate::diffcore::{ParamSet, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::forecast::{encode_clouds, forecast_on_tape, init_params, save_forecaster, PipelineConfig};
use crate::geometry::{align_to_current, rays_from_future_cloud, relative_pose, PointCloud, QueryRay};
use crate::render::{render_on_tape, FrameRay, RenderSettings};
use crate::voxel::GridSpec;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_max: 0.001, lr_min: 0.0, total_steps: 200 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(sched: &ScheduleConfig, step: usize) -> Result<f64> {
    if step > sched.total_steps || sched.total_steps == 0 {
        return Err(contract!("step {step} outside schedule of {} steps", sched.total_steps));
    }
    if step == 0 {
        return Ok(sched.lr_max);
    }
    if step == sched.total_steps {
        return Ok(sched.lr_min);
    }
    let phase = std::f64::consts::PI * step as f64 / sched.total_steps as f64;
    Ok(sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + phase.cos()))
}

/// Adam moments for every parameter of a [`ParamSet`], in its order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam update from the gradients stored on `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(contract!("optimizer state holds {} buffers for {} parameters", state.m.len(), params.len()));
    }
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(contract!("parameter {name} has no gradient"));
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(k);
    let c2 = 1.0 - ADAM_BETA2.powi(k);
    for (((_, t), m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = t.grad().expect("checked above").to_vec();
        if g.len() != m.len() {
            return Err(contract!("moment buffer shape does not match parameter"));
        }
        for (((w, g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Mean absolute error between rendered depths and ground truth.
pub fn depth_l1_loss(tape: &mut Tape, rendered: Var, gt: &[f64]) -> Result<Var> {
    if gt.is_empty() {
        return Err(Error::Empty("depth batch"));
    }
    tape.l1_loss(rendered, gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    /// Query rays sampled per future frame and step.
    pub rays_per_frame: usize,
    /// Sequences whose gradients are averaged per optimizer step.
    pub grad_accumulation: usize,
    pub max_range: f64,
    pub background_depth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            rays_per_frame: 1024,
            grad_accumulation: 1,
            max_range: 40.0,
            background_depth: 40.0,
        }
    }
}

impl TrainConfig {
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { max_range: self.max_range, background_depth: self.background_depth }
    }

    /// A zero-step run is allowed and leaves the initialization untouched.
    pub fn validate(&self) -> Result<()> {
        if self.schedule.total_steps > 0 {
            self.schedule.validate()?;
        }
        if self.rays_per_frame == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config("rays_per_frame and grad_accumulation must be at least 1".into()));
        }
        if !(self.max_range > 0.0) || self.background_depth < self.max_range {
            return Err(Error::Config("need 0 < max_range <= background_depth".into()));
        }
        Ok(())
    }
}

/// Model inputs and supervision extracted from one sequence, all in the
/// current sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Past and current clouds, chronological.
    pub observed: Vec<PointCloud>,
    /// Future clouds.
    pub future: Vec<PointCloud>,
    /// One ray per future return whose endpoint lies inside the output grid.
    pub rays: Vec<Vec<QueryRay>>,
}

/// Aligns a record to its current frame and builds the future query rays.
/// With `shuffle_seed`, observed clouds are point-shuffled first.
pub fn prepare_sample(record: &SequenceRecord, output_grid: &GridSpec, shuffle_seed: Option<u64>) -> Result<SequenceSample> {
    record.validate()?;
    let current = *record.current_pose();
    let observed = record
        .observed()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cloud = match shuffle_seed {
                Some(s) => point_shuffle(&f.cloud, s.wrapping_add(i as u64)),
                None => f.cloud.clone(),
            };
            align_to_current(&cloud, &f.pose, &current)
        })
        .collect();
    let mut future = Vec::new();
    let mut rays = Vec::new();
    for f in record.future() {
        let aligned = align_to_current(&f.cloud, &f.pose, &current);
        let origin = relative_pose(&f.pose, &current).translation();
        let batch = rays_from_future_cloud(&aligned, origin);
        rays.push(batch.rays.into_iter().filter(|r| output_grid.contains(r.endpoint())).collect());
        future.push(aligned);
    }
    Ok(SequenceSample { observed, future, rays })
}

/// Uniform subsample of at most `n` rays, kept in original order.
pub fn subsample_rays(rays: &[QueryRay], n: usize, rng: &mut impl Rng) -> Vec<QueryRay> {
    if rays.len() <= n {
        return rays.to_vec();
    }
    let mut idx = sample(rng, rays.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rays[i]).collect()
}

/// Forward pass plus depth loss for one sample; returns the loss variable.
pub fn sample_loss(
    tape: &mut Tape,
    params: &ParamSet,
    pipeline: &PipelineConfig,
    observed: &[PointCloud],
    rays: &[Vec<QueryRay>],
    settings: &RenderSettings,
) -> Result<(Var, crate::diffcore::BoundParams)> {
    let bev = encode_clouds(observed, pipeline)?;
    let p = params.bind(tape);
    let logits = forecast_on_tape(tape, &bev, pipeline, &p)?;
    let probs: Vec<Var> = logits.into_iter().map(|l| tape.sigmoid(l)).collect();
    let frame_rays: Vec<FrameRay> = rays
        .iter()
        .enumerate()
        .flat_map(|(frame, rs)| rs.iter().map(move |&ray| FrameRay { frame, ray }))
        .collect();
    if frame_rays.is_empty() {
        return Err(Error::Empty("training rays"));
    }
    let gt: Vec<f64> = frame_rays.iter().map(|r| r.ray.gt_depth).collect();
    let depths = render_on_tape(tape, &probs, &pipeline.output_grid, &frame_rays, settings)?;
    let loss = depth_l1_loss(tape, depths, &gt)?;
    Ok((loss, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in log {
        writeln!(s, "{},{},{}", r.step, r.lr, r.loss).expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LossRecord>,
}

/// Trains on preloaded sequences. Step `s` uses sequences
/// `s·k .. s·k + k` (cyclically) for accumulation factor `k`.
pub fn train_on_records(
    records: &[(String, SequenceRecord)],
    pipeline: &PipelineConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    pipeline.validate()?;
    train.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    for (id, r) in records {
        if r.num_past != pipeline.num_past || r.num_future != pipeline.num_future {
            return Err(Error::Config(format!(
                "sequence {id} has {} past / {} future frames, pipeline expects {} / {}",
                r.num_past, r.num_future, pipeline.num_past, pipeline.num_future
            )));
        }
    }
    let settings = train.render_settings();
    let mut params = init_params(pipeline, seed)?;
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(train.schedule.total_steps);
    let k = train.grad_accumulation;
    for step in 0..train.schedule.total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        params.zero_grad();
        let mut total = 0.0;
        for j in 0..k {
            let (id, record) = &records[(step * k + j) % records.len()];
            let with_id = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("sequence {id}: {m}")),
                Error::Contract(m) => Error::Contract(format!("sequence {id}: {m}")),
                other => other,
            };
            let sample = prepare_sample(record, &pipeline.output_grid, Some(rng.random())).map_err(with_id)?;
            let rays: Vec<Vec<QueryRay>> =
                sample.rays.iter().map(|r| subsample_rays(r, train.rays_per_frame, &mut rng)).collect();
            let mut tape = Tape::new();
            let (loss, bound) =
                sample_loss(&mut tape, &params, pipeline, &sample.observed, &rays, &settings).map_err(with_id)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("sequence {id}: loss is {value} at step {step}")));
            }
            total += value;
            tape.backward(loss)?;
            params.accumulate_grads(&tape, &bound)?;
        }
        if k > 1 {
            for (_, t) in params.iter_mut() {
                let g: Vec<f64> = t.grad().expect("accumulated").iter().map(|g| g / k as f64).collect();
                t.set_grad(g)?;
            }
        }
        let lr = cosine_lr(&train.schedule, step)?;
        adam_step(&mut params, &mut state, lr)?;
        log.push(LossRecord { step, lr, loss: total / k as f64 });
    }
    params.zero_grad();
    Ok(TrainOutcome { params, log })
}

pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains on every sequence listed in a dataset directory, then writes
/// `loss.csv` and `checkpoint/` under `out_dir`.
pub fn train_loop(
    dataset: &Path,
    pipeline: &PipelineConfig,
    train: &TrainConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let dirs: Vec<PathBuf> = read_dataset(dataset)?;
    let records = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), read_sequence(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_on_records(&records, pipeline, train, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let lpath = out_dir.join(LOSS_FILE);
    fs::write(&lpath, loss_csv(&outcome.log)).map_err(|e| Error::io(&lpath, e))?;
    save_forecaster(&out_dir.join(CHECKPOINT_DIR), pipeline, &outcome.params)?;
    Ok(outcome)
}
