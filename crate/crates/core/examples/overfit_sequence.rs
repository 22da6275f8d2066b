//! Overfits the full forecaster to one static sequence and reports the loss
//! curve. Pass a step count to shorten the run (default 200).

use occ4d::data::{generate_sequence, random_scene, SceneConfig, SequenceConfig};
use occ4d::forecast::PipelineConfig;
use occ4d::train::{train_on_records, ScheduleConfig, TrainConfig};

fn main() -> occ4d::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let scene = random_scene(&SceneConfig { max_box_speed: 0.0, ego_speed: 0.0, ..SceneConfig::default() }, 7)?;
    let record = generate_sequence(&scene, &SequenceConfig::default(), 7)?;
    let pipeline = PipelineConfig { channels: 8, ..PipelineConfig::default() };
    let train = TrainConfig { schedule: ScheduleConfig { total_steps: steps, ..ScheduleConfig::default() }, ..TrainConfig::default() };

    let out = train_on_records(&[("static".into(), record)], &pipeline, &train, 1)?;
    for r in out.log.iter().filter(|r| r.step % 20 == 0 || r.step + 1 == steps) {
        println!("step {:4}  lr {:.6}  loss {:.4}", r.step, r.lr, r.loss);
    }
    if let (Some(a), Some(b)) = (out.log.first(), out.log.last()) {
        println!("final / initial loss = {:.3}", b.loss / a.loss);
    }
    Ok(())
}
