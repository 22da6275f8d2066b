//! gen -> train -> eval -> render through the command functions, in a
//! temporary directory.

use occ4d::cli::{cmd_eval, cmd_gen, cmd_render, cmd_train, ForecastSource, RunConfig};

fn main() -> occ4d::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| occ4d::Error::Config(e.to_string()))?;
    let root = dir.path();
    let mut cfg = RunConfig::default();
    cfg.pipeline.channels = 8;
    cfg.train.schedule.total_steps = 40;

    cmd_gen(&cfg, &root.join("data"), 2)?;
    let outcome = cmd_train(&cfg, &root.join("data"), &root.join("run"))?;
    println!("loss {:.3} -> {:.3}", outcome.log[0].loss, outcome.log.last().unwrap().loss);

    let ckpt = ForecastSource::Checkpoint(root.join("run/checkpoint"));
    for (name, src) in [("trained", &ckpt), ("oracle", &ForecastSource::Oracle), ("empty", &ForecastSource::Empty)] {
        let r = cmd_eval(&cfg, src, &root.join("data"))?.overall;
        println!("{name:8} l1 {:.3}  absrel {:.3}  nfcd {:.3}  cd {:.3}", r.l1, r.absrel, r.nfcd, r.cd);
    }
    let s = cmd_render(&cfg, &ckpt, &root.join("data/seq_0000"), &root.join("render"))?;
    println!("rendered rays per future frame: {:?}", s.rays_per_frame);
    Ok(())
}
