//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity and its tolerance, then asserts.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use occ4d::cli::{cmd_eval, cmd_train, ForecastSource, RunConfig};
use occ4d::data::{
    decode_points, encode_points, generate_sequence, random_scene, read_sequence, simulate_lidar,
    write_dataset_manifest, write_sequence, LidarConfig, SceneConfig, SequenceConfig,
};
use occ4d::diffcore::gradcheck::{central_difference, max_relative_error, FD_STEP};
use occ4d::diffcore::{ParamSet, Tape, Tensor, Var};
use occ4d::forecast::{encode_clouds, forecast_on_tape, init_params, PipelineConfig};
use occ4d::geometry::{distance, PointCloud, QueryRay, Vec3};
use occ4d::metrics::{chamfer, evaluate, EvalSettings, NearestNeighborIndex};
use occ4d::render::{
    expected_depth, render_batch, render_on_tape, termination_weights, traverse, FrameRay, RenderSettings,
};
use occ4d::train::{adam_step, cosine_lr, depth_l1_loss, OptimizerState, ScheduleConfig};
use occ4d::voxel::{voxelize, GridKind, GridSpec, OccupancyForecast, OccupancyGrid};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, title: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let ok = ok && elapsed <= budget;
    println!(
        "{} criterion {id} ({title}): {detail}; {:.1}s of {}s budget",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let d: Vec3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return d.map(|v| v / n);
        }
    }
}

/// Max relative error of every input gradient of `build`, reduced to a
/// scalar by an L1 loss against a target offset from the output by at
/// least 0.5 per element (so the loss is smooth under the FD step).
fn op_error(rng: &mut impl Rng, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let target: Vec<f64> = tape
        .value(y)
        .iter()
        .map(|v| v + rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let loss = tape.l1_loss(y, &target).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = central_difference(
            |x| {
                let mut t = Tape::without_grad();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| {
                        if j == k {
                            t.leaf(Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            t.leaf(inp.clone())
                        }
                    })
                    .collect();
                let y = build(&mut t, &vs);
                let l = t.l1_loss(y, &target).unwrap();
                t.value(l)[0]
            },
            input.data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut errors: Vec<(&str, f64)> = Vec::new();
    for _ in 0..5 {
        let x = random_tensor(&mut rng, vec![2, 5, 5]);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = random_tensor(&mut rng, vec![3]);
        errors.push(("conv2d", op_error(&mut rng, vec![x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 1).unwrap())));
        let x = random_tensor(&mut rng, vec![2, 4, 4]);
        errors.push(("sigmoid", op_error(&mut rng, vec![x.clone()], |t, v| t.sigmoid(v[0]))));
        errors.push(("leaky_relu", op_error(&mut rng, vec![x.clone()], |t, v| t.leaky_relu(v[0], 0.1))));
        errors.push(("upsample", op_error(&mut rng, vec![x.clone()], |t, v| t.upsample_nearest2x(v[0]).unwrap())));
        errors.push(("mean", op_error(&mut rng, vec![x.clone()], |t, v| t.mean(v[0]).unwrap())));
        let y = random_tensor(&mut rng, vec![2, 4, 4]);
        errors.push(("add", op_error(&mut rng, vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1]).unwrap())));
        let z = random_tensor(&mut rng, vec![1, 4, 4]);
        errors.push(("concat", op_error(&mut rng, vec![x, z], |t, v| t.concat_channels(&[v[0], v[1]]).unwrap())));
        // Distinct, well separated levels so no pooling window is near a tie.
        let mut levels: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.6).collect();
        levels.shuffle(&mut rng);
        let p = Tensor::new(vec![2, 4, 4], levels).unwrap();
        errors.push(("max_pool", op_error(&mut rng, vec![p], |t, v| t.max_pool2x(v[0]).unwrap())));

        let spec = GridSpec::new([0.0; 3], [4.0; 3], [1.0; 3]).unwrap();
        let probs = Tensor::new(spec.zyx_shape(), (0..64).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let rays: Vec<FrameRay> = (0..16)
            .map(|_| {
                let o = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
                FrameRay { frame: 0, ray: QueryRay::new(o, random_unit(&mut rng), 1.0).unwrap() }
            })
            .collect();
        let settings = RenderSettings::new(8.0);
        errors.push((
            "render",
            op_error(&mut rng, vec![probs], |t, v| render_on_tape(t, &[v[0]], &spec, &rays, &settings).unwrap()),
        ));
    }
    let op_worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let worst_op = errors.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;

    // Full pipeline on a 16×16×4 grid with 64 rays.
    let grid = GridSpec::new([-4.0, -4.0, -1.0], [4.0, 4.0, 1.0], [0.5; 3]).unwrap();
    let cfg = PipelineConfig {
        num_past: 1,
        num_future: 2,
        channels: 4,
        unet_channels: 4,
        encode_grid: grid,
        output_grid: grid,
        ..PipelineConfig::default()
    };
    let mut params = init_params(&cfg, 3).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let clouds: Vec<PointCloud> = (0..2)
        .map(|_| {
            let pts = (0..80)
                .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-1.0..1.0)])
                .collect();
            PointCloud::new(pts, 0.0).unwrap()
        })
        .collect();
    let bev = encode_clouds(&clouds, &cfg).unwrap();
    let rays: Vec<FrameRay> = (0..64)
        .map(|i| {
            let o = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
            FrameRay { frame: i % 2, ray: QueryRay::new(o, random_unit(&mut rng), rng.random_range(0.5..4.0)).unwrap() }
        })
        .collect();
    let gt: Vec<f64> = rays.iter().map(|r| r.ray.gt_depth).collect();
    let settings = RenderSettings::new(8.0);
    let loss_of = |ps: &ParamSet, tape: &mut Tape| {
        let p = ps.bind(tape);
        let logits = forecast_on_tape(tape, &bev, &cfg, &p).unwrap();
        let probs: Vec<Var> = logits.into_iter().map(|l| tape.sigmoid(l)).collect();
        let depths = render_on_tape(tape, &probs, &grid, &rays, &settings).unwrap();
        (depth_l1_loss(tape, depths, &gt).unwrap(), p)
    };
    let mut tape = Tape::new();
    let (loss, bound) = loss_of(&params, &mut tape);
    tape.backward(loss).unwrap();
    let mut analytic = params.clone();
    analytic.accumulate_grads(&tape, &bound).unwrap();
    let mut pipe_worst: f64 = 0.0;
    for (name, t) in analytic.iter() {
        let numeric = central_difference(
            |x| {
                let mut ps = params.clone();
                ps.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                let mut tape = Tape::without_grad();
                let (l, _) = loss_of(&ps, &mut tape);
                tape.value(l)[0]
            },
            params.get(name).unwrap().data(),
            FD_STEP,
        );
        pipe_worst = pipe_worst.max(max_relative_error(t.grad().unwrap(), &numeric));
    }
    let ok = op_worst < 1e-3 && pipe_worst < 1e-3;
    let detail = format!(
        "max rel. error ops {op_worst:.2e} (worst {worst_op}), full pipeline {pipe_worst:.2e} over {} params; tolerance 1e-3",
        params.numel()
    );
    assert!(verdict(1, "gradient integrity", ok, &detail, start.elapsed(), Duration::from_secs(120)));
}

type Cell = [i64; 3];

/// Cell under the point at distance `t`, by direct flooring.
fn oracle_cell(spec: &GridSpec, ray: &QueryRay, t: f64) -> Option<Cell> {
    let dims = spec.dims();
    let mut c = [0i64; 3];
    for a in 0..3 {
        let v = ((ray.origin[a] + t * ray.direction[a] - spec.min_corner[a]) / spec.voxel_size[a]).floor();
        if v < 0.0 || v >= dims[a] as f64 {
            return None;
        }
        c[a] = v as i64;
    }
    Some(c)
}

fn adjacent(a: Cell, b: Cell) -> bool {
    (0..3).map(|k| (a[k] - b[k]).abs()).sum::<i64>() == 1
}

/// Cells strictly between samples `(ta, a)` and `(tb, b)`, found by bisection
/// until consecutive cells are face neighbours.
fn refine(spec: &GridSpec, ray: &QueryRay, ta: f64, a: Option<Cell>, tb: f64, b: Option<Cell>, out: &mut Vec<Cell>) {
    if a == b || matches!((a, b), (Some(x), Some(y)) if adjacent(x, y)) || tb - ta < 1e-12 {
        return;
    }
    let tm = 0.5 * (ta + tb);
    let m = oracle_cell(spec, ray, tm);
    refine(spec, ray, ta, a, tm, m, out);
    if let Some(c) = m {
        if out.last() != Some(&c) {
            out.push(c);
        }
    }
    refine(spec, ray, tm, m, tb, b, out);
}

fn fine_sampling_oracle(spec: &GridSpec, ray: &QueryRay, max_range: f64) -> Vec<Cell> {
    let step = spec.voxel_size[0] / 100.0;
    let n = (max_range / step).ceil() as usize;
    let mut out: Vec<Cell> = Vec::new();
    let mut prev: Option<(f64, Option<Cell>)> = None;
    for k in 0..=n {
        let t = (k as f64 * step).min(max_range);
        let c = oracle_cell(spec, ray, t);
        if let Some((tp, cp)) = prev {
            refine(spec, ray, tp, cp, t, c, &mut out);
        }
        if let Some(c) = c {
            if out.last() != Some(&c) {
                out.push(c);
            }
        }
        prev = Some((t, c));
    }
    out
}

#[test]
fn criterion_2_traversal_exactness() {
    let start = Instant::now();
    let spec = GridSpec::new([-4.0; 3], [4.0; 3], [0.5; 3]).unwrap();
    assert_eq!(spec.dims(), [16, 16, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for _ in 0..1000 {
        let o = [rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0)];
        let ray = QueryRay::new(o, random_unit(&mut rng), 1.0).unwrap();
        let max_range = rng.random_range(1.0..20.0);
        let chain = traverse(&spec, &ray, max_range).unwrap();
        let got: Vec<Cell> = chain.cells().map(|c| c.map(|v| v as i64)).collect();
        let increasing = chain.segments.windows(2).all(|w| w[0].midpoint() < w[1].midpoint());
        if got != fine_sampling_oracle(&spec, &ray, max_range) || !increasing {
            mismatches += 1;
        }
        nonempty += usize::from(!got.is_empty());
    }
    let detail = format!("{mismatches} of 1000 rays differ from the fine-sampling oracle ({nonempty} hit the grid)");
    assert!(verdict(2, "traversal exactness", mismatches == 0, &detail, start.elapsed(), Duration::from_secs(30)));
}

#[test]
fn criterion_3_rendering_closed_forms() {
    let start = Instant::now();
    let spec = GridSpec::new([0.0; 3], [8.0, 1.0, 1.0], [1.0; 3]).unwrap();
    let ray = QueryRay::new([0.0, 0.5, 0.5], [1.0, 0.0, 0.0], 1.0).unwrap();
    let chain = traverse(&spec, &ray, 8.0).unwrap();
    let grid_with = |p: &[(usize, f64)]| {
        let mut v = vec![0.0; 8];
        p.iter().for_each(|&(i, x)| v[i] = x);
        OccupancyGrid::new(spec, Tensor::new(spec.zyx_shape(), v).unwrap(), GridKind::Probability).unwrap()
    };
    let opaque = expected_depth(&grid_with(&[(3, 1.0)]), &chain, 10.0).unwrap();
    let empty = expected_depth(&grid_with(&[]), &chain, 70.0).unwrap();
    let two = expected_depth(&grid_with(&[(0, 0.5), (1, 0.5)]), &chain, 10.0).unwrap();
    let closed = (opaque - 3.5).abs() <= 1e-9 && (empty - 70.0).abs() <= 1e-9 && (two - 3.125).abs() <= 1e-9;

    let small = GridSpec::new([0.0; 3], [4.0; 3], [1.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let probs: Vec<f64> = (0..64)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let o = [rng.random_range(-1.0..5.0), rng.random_range(-1.0..5.0), rng.random_range(-1.0..5.0)];
        let r = QueryRay::new(o, random_unit(&mut rng), 1.0).unwrap();
        let chain = traverse(&small, &r, 10.0).unwrap();
        let (w, bg) = termination_weights(&probs, &small, &chain);
        if w.iter().any(|&x| x < 0.0) || bg < 0.0 {
            worst = f64::INFINITY;
        }
        worst = worst.max((w.iter().sum::<f64>() + bg - 1.0).abs());
    }
    let ok = closed && worst <= 1e-12;
    let detail = format!(
        "opaque {opaque}, empty {empty}, two half cells {two} (tol 1e-9); max |sum w + w_bg - 1| = {worst:.1e} over 10000 cases (tol 1e-12)"
    );
    assert!(verdict(3, "rendering closed forms", ok, &detail, start.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_4_metric_correctness() {
    let start = Instant::now();
    let hand = chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pt = |rng: &mut ChaCha8Rng| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-3.0..3.0)];
    let pts: Vec<Vec3> = (0..2000).map(|_| pt(&mut rng)).collect();
    let tree = NearestNeighborIndex::build(&pts);
    let tree_ok = (0..1000).all(|_| {
        let q = pt(&mut rng);
        let scan = pts.iter().map(|&p| distance(q, p)).fold(f64::INFINITY, f64::min);
        tree.nearest(q).unwrap().1 == scan
    });

    let a: Vec<Vec3> = (0..500).map(|_| pt(&mut rng)).collect();
    let b: Vec<Vec3> = (0..300).map(|_| pt(&mut rng)).collect();
    let symmetric = chamfer(&a, &b).unwrap() == chamfer(&b, &a).unwrap();

    // Perfect prediction: ground-truth depths are what the grid renders.
    let spec = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [0.5; 3]).unwrap();
    let values: Vec<f64> = (0..spec.num_cells()).map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 }).collect();
    let grid = OccupancyGrid::new(spec, Tensor::new(spec.zyx_shape(), values).unwrap(), GridKind::Probability).unwrap();
    let forecast = OccupancyForecast::new(vec![grid], 0.6).unwrap();
    let settings = EvalSettings { render: RenderSettings::new(30.0), near_field_radius: 35.0 };
    let probe: Vec<FrameRay> = (0..400)
        .map(|_| FrameRay { frame: 0, ray: QueryRay::new([0.0; 3], random_unit(&mut rng), 1.0).unwrap() })
        .collect();
    let depths = render_batch(&forecast, &probe, &settings.render).unwrap();
    let rays: Vec<QueryRay> =
        probe.iter().zip(&depths).map(|(r, &d)| QueryRay::new(r.ray.origin, r.ray.direction, d).unwrap()).collect();
    let report = evaluate(&forecast, &[rays], &settings).unwrap();
    let zero = report.l1 == 0.0 && report.absrel == 0.0 && report.cd == 0.0 && report.nfcd == 0.0;

    let ok = hand == 2.5 && tree_ok && symmetric && zero;
    let detail = format!(
        "hand case {hand} (exact 2.5); tree == scan on 1000 queries: {tree_ok}; symmetry exact: {symmetric}; perfect report l1 {} absrel {} cd {} nfcd {}",
        report.l1, report.absrel, report.cd, report.nfcd
    );
    assert!(verdict(4, "metric correctness", ok, &detail, start.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_5_optimizer_and_schedule() {
    let start = Instant::now();
    let lr = 1e-3;
    let mut worst: f64 = 0.0;
    // The identity holds up to eps/|g|, so gradients stay well above 1e-2.
    for g in [2.5, -0.05, 1e3, -40.0] {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(0.7)).unwrap();
        p.get_mut("w").unwrap().set_grad(vec![g]).unwrap();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, lr).unwrap();
        let delta = p.get("w").unwrap().data()[0] - 0.7;
        worst = worst.max((delta + lr * g.signum()).abs());
    }
    let first_ok = worst < 1e-6 * lr;

    let sched = ScheduleConfig { lr_max: 0.001, lr_min: 1e-5, total_steps: 50 };
    let ends_ok = cosine_lr(&sched, 0).unwrap() == 0.001 && cosine_lr(&sched, 50).unwrap() == 1e-5;

    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut st = OptimizerState::new(&p);
    for _ in 0..100 {
        let w = p.get("w").unwrap().data()[0];
        p.get_mut("w").unwrap().set_grad(vec![w - 3.0]).unwrap();
        adam_step(&mut p, &mut st, 0.05).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    let ok = first_ok && ends_ok && (w - 3.0).abs() < 0.05;
    let detail = format!(
        "first step max |delta + lr*sign(g)| = {worst:.1e} (tol {:.0e}); cosine endpoints exact: {ends_ok}; quadratic from w=1: |w-3| = {:.4} (tol 0.05)",
        1e-6 * lr,
        (w - 3.0).abs()
    );
    assert!(verdict(5, "optimizer and schedule", ok, &detail, start.elapsed(), Duration::from_secs(10)));
}

#[test]
fn criterion_6_raw_logit_self_supervision() {
    let start = Instant::now();
    let scene = random_scene(&SceneConfig { max_box_speed: 0.0, ego_speed: 0.0, ..SceneConfig::default() }, 21).unwrap();
    let pose = scene.ego.pose_at(0.0);
    let cloud = simulate_lidar(&scene, &pose, &LidarConfig::default(), 0.0).unwrap();
    // Sensor frame: the ground lies 1.8 m below the origin.
    let spec = GridSpec::new([-16.0, -16.0, -2.5], [16.0, 16.0, 1.5], [0.5; 3]).unwrap();
    let gt_grid = voxelize(&cloud, &spec).grid;
    let batch = occ4d::geometry::rays_from_future_cloud(&cloud, [0.0; 3]);
    let rays: Vec<FrameRay> =
        batch.rays.into_iter().filter(|r| spec.contains(r.endpoint())).map(|ray| FrameRay { frame: 0, ray }).collect();
    let gt: Vec<f64> = rays.iter().map(|r| r.ray.gt_depth).collect();
    let settings = RenderSettings::new(40.0);

    // Cells each ray passes through up to and including the cell it ends in.
    let mut observed = vec![false; spec.num_cells()];
    for r in &rays {
        let chain = traverse(&spec, &r.ray, settings.max_range).unwrap();
        for s in chain.segments.iter().filter(|s| s.entry <= r.ray.gt_depth) {
            observed[spec.flat_index(s.cell)] = true;
        }
    }

    let mut params = ParamSet::new();
    params.insert("logits", Tensor::zeros(spec.zyx_shape())).unwrap();
    let mut state = OptimizerState::new(&params);
    let iou = |params: &ParamSet| {
        let logits = params.get("logits").unwrap().data();
        let (mut inter, mut union) = (0usize, 0usize);
        for (i, &seen) in observed.iter().enumerate() {
            if !seen {
                continue;
            }
            let pred = logits[i] > 0.0;
            let truth = gt_grid.values().data()[i] > 0.5;
            inter += usize::from(pred && truth);
            union += usize::from(pred || truth);
        }
        inter as f64 / union.max(1) as f64
    };
    let mut best = (0.0, 0usize);
    for step in 1..=500 {
        params.zero_grad();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let probs = tape.sigmoid(p.get("logits"));
        let depths = render_on_tape(&mut tape, &[probs], &spec, &rays, &settings).unwrap();
        let loss = depth_l1_loss(&mut tape, depths, &gt).unwrap();
        tape.backward(loss).unwrap();
        params.accumulate_grads(&tape, &p).unwrap();
        adam_step(&mut params, &mut state, 0.1).unwrap();
        let score = iou(&params);
        if score > best.0 {
            best = (score, step);
        }
        if score >= 0.7 {
            break;
        }
    }
    let detail = format!(
        "voxel IoU {:.3} at step {} on {} ray-observed cells, {} rays (threshold 0.7 within 500 steps)",
        best.0,
        best.1,
        observed.iter().filter(|&&o| o).count(),
        rays.len()
    );
    assert!(verdict(6, "raw-logit self-supervision", best.0 >= 0.7, &detail, start.elapsed(), Duration::from_secs(300)));
}

fn static_dataset(root: &Path, cfg: &RunConfig) {
    let scene =
        random_scene(&SceneConfig { max_box_speed: 0.0, ego_speed: 0.0, ..cfg.generator.scene.clone() }, 7).unwrap();
    let record = generate_sequence(&scene, &cfg.sequence_config(), 7).unwrap();
    write_sequence(&record, &root.join("seq_0000")).unwrap();
    write_dataset_manifest(root, &["seq_0000".to_string()]).unwrap();
}

#[test]
fn criterion_7_training_convergence() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.pipeline.channels = 8;
    cfg.train.schedule.total_steps = 200;
    cfg.train.rays_per_frame = 1024;
    assert_eq!(cfg.pipeline.output_grid.dims(), [64, 64, 8]);
    let data = dir.path().join("data");
    static_dataset(&data, &cfg);

    let outcome = cmd_train(&cfg, &data, &dir.path().join("run")).unwrap();
    let first = outcome.log[0].loss;
    let last = outcome.log.last().unwrap().loss;
    let ratio = last / first;
    let trained = cmd_eval(&cfg, &ForecastSource::Checkpoint(dir.path().join("run/checkpoint")), &data).unwrap();
    let empty = cmd_eval(&cfg, &ForecastSource::Empty, &data).unwrap();
    let gain = empty.overall.l1 / trained.overall.l1;
    let ok = ratio <= 0.2 && gain >= 2.0;
    let detail = format!(
        "loss {first:.3} -> {last:.3} (ratio {ratio:.3}, need <= 0.2); eval L1 {:.3} vs empty {:.3} ({gain:.1}x, need >= 2x)",
        trained.overall.l1, empty.overall.l1
    );
    assert!(verdict(7, "training convergence", ok, &detail, start.elapsed(), Duration::from_secs(600)));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_pipeline(root: &Path, threads: &str) {
    let bin = env!("CARGO_BIN_EXE_occ4d");
    let small = [
        "--set", "pipeline.channels=4",
        "--set", "train.schedule.total_steps=3",
        "--set", "train.rays_per_frame=128",
        "--set", "generator.lidar.azimuth_count=120",
        "--seed", "5",
    ];
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).args(small).env("OCC4D_THREADS", threads).output().unwrap();
        assert!(st.status.success(), "{args:?}: {}", String::from_utf8_lossy(&st.stderr));
    };
    let p = |s: &str| root.join(s).display().to_string();
    run(&["gen", "--out", &p("data"), "--n", "2"]);
    run(&["train", "--data", &p("data"), "--out", &p("run")]);
    run(&["eval", "--data", &p("data"), "--checkpoint", &p("run/checkpoint"), "--out", &p("eval.json"), "--csv", &p("eval.csv")]);
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), "1");
    run_pipeline(b.path(), "4");
    let ta = read_tree(a.path());
    let tb = read_tree(b.path());
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> =
        ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let ok = ta.len() == tb.len() && differing.is_empty() && names.contains(&"eval.json") && names.contains(&"run/loss.csv");
    let detail = format!(
        "{} output files from gen/train/eval compared across two runs (1 vs 4 threads); differing: {differing:?}",
        ta.len()
    );
    assert!(verdict(8, "determinism", ok, &detail, start.elapsed(), Duration::from_secs(120)));
}

#[test]
fn criterion_9_format_robustness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let path = Path::new("probe.o4dp");

    // Round trip on arbitrary f32 bit patterns, including -0.0 and extremes.
    let mut roundtrip_ok = true;
    for n in [0usize, 1, 7, 1000] {
        let bits: Vec<[u32; 3]> = (0..n)
            .map(|_| {
                [rng.random::<u32>(), rng.random::<u32>(), rng.random::<u32>()]
                    .map(|b| if f32::from_bits(b).is_finite() { b } else { 0x8000_0000 })
            })
            .collect();
        let pts: Vec<Vec3> = bits.iter().map(|p| p.map(|b| f32::from_bits(b) as f64)).collect();
        let back = decode_points(&encode_points(&pts), path).unwrap();
        roundtrip_ok &= back.iter().zip(&bits).all(|(p, b)| (0..3).all(|k| (p[k] as f32).to_bits() == b[k]));
        roundtrip_ok &= back.len() == n;
    }

    let pts: Vec<Vec3> = (0..50).map(|_| [rng.random::<f32>() as f64, 1.5, -2.25]).collect();
    let good = encode_points(&pts);
    let truncated_ok = (0..good.len()).all(|len| {
        decode_points(&good[..len], path).is_err_and(|e| e.to_string().contains("unexpected end of file"))
    });
    let magic_ok = (0..4).all(|i| {
        (0..=255u8).filter(|&v| v != good[i]).all(|v| {
            let mut bad = good.clone();
            bad[i] = v;
            decode_points(&bad, path).is_err_and(|e| e.to_string().contains("bad magic"))
        })
    });
    // Arbitrary garbage must come back as a value, never a panic.
    let fuzz_ok = std::panic::catch_unwind(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            let len = rng.random_range(0..64);
            let mut bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            if rng.random_bool(0.5) && bytes.len() >= 4 {
                bytes[..4].copy_from_slice(b"O4DP");
            }
            let _ = decode_points(&bytes, Path::new("fuzz.o4dp"));
        }
    })
    .is_ok();

    // The same errors surface through a sequence directory, naming the file.
    let dir = tempfile::tempdir().unwrap();
    let scene = random_scene(&SceneConfig::default(), 2).unwrap();
    let cfg = SequenceConfig { lidar: LidarConfig { azimuth_count: 60, ..LidarConfig::default() }, ..SequenceConfig::default() };
    let record = generate_sequence(&scene, &cfg, 2).unwrap();
    write_sequence(&record, dir.path()).unwrap();
    let seq_ok_rt = read_sequence(dir.path()).unwrap() == record;
    let f = dir.path().join("frame_4.o4dp");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    let e1 = read_sequence(dir.path()).unwrap_err().to_string();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&f, &bad).unwrap();
    let e2 = read_sequence(dir.path()).unwrap_err().to_string();
    let seq_ok = seq_ok_rt
        && e1.contains("unexpected end of file")
        && e1.contains("frame_4.o4dp")
        && e2.contains("bad magic")
        && e2.contains("frame_4.o4dp");

    let ok = roundtrip_ok && truncated_ok && magic_ok && fuzz_ok && seq_ok;
    let detail = format!(
        "bitwise round trip {roundtrip_ok}; {} truncations -> unexpected end of file {truncated_ok}; 1020 magic corruptions -> bad magic {magic_ok}; 20000 fuzz inputs without panic {fuzz_ok}; sequence-level errors name the file {seq_ok}",
        good.len()
    );
    assert!(verdict(9, "format robustness", ok, &detail, start.elapsed(), Duration::from_secs(60)));
}

