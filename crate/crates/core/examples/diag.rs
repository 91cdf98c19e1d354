// temporary diagnostic: desk-scale pilot training
use sbplan_core::datagen::{generate, GenConfig};
use sbplan_core::maze::{compute_reference_scores, make_maze, MazeId};
use sbplan_core::pipeline::*;
use sbplan_core::planner::Engine;
use sbplan_core::priors::PriorKind;
use std::time::Instant;

fn main() {
    let maze_id = MazeId::Umaze;
    let horizon = 128;
    let ts = 8_000usize;
    let batch = 2usize;
    let total = 50 * ts * batch / 4;
    println!("dataset: {total} env steps");
    let t0 = Instant::now();
    let ds = generate(&GenConfig { maze_id, total_steps: total, horizon, seed: 11 }).unwrap();
    println!("generated {} segments in {:.1}s", ds.len(), t0.elapsed().as_secs_f64());

    let spec = make_maze(maze_id);
    let refs = compute_reference_scores(&spec, 200, 600).unwrap();
    println!("refs: random={:.1} expert={:.1}", refs.0, refs.1);

    for (engine, n, prior, nfes) in [
        (Engine::Ddpm, 16usize, PriorKind::Gaussian, vec![16usize]),
        (Engine::Ddpm, 1, PriorKind::Gaussian, vec![1]),
        (Engine::I2sb, 16, PriorKind::StraightLine, vec![1, 16]),
    ] {
        let mut cfg = TrainConfig::new(engine, n, prior);
        cfg.training_steps = ts;
        cfg.batch = batch;
        cfg.seed = 1;
        let t0 = Instant::now();
        let (model, losses) = train_model(&ds, &cfg).unwrap();
        let train_min = t0.elapsed().as_secs_f64() / 60.0;
        let early: f64 = losses[..200.min(losses.len())].iter().sum::<f64>() / 200.0;
        let late: f64 = losses[losses.len().saturating_sub(200)..].iter().sum::<f64>() / 200.0;
        for nfe in nfes {
            let t1 = Instant::now();
            let results = evaluate_model(&model, nfe, 50, 999, refs).unwrap();
            let mean: f64 = results.iter().map(|r| r.normalized_score.unwrap()).sum::<f64>() / 50.0;
            let reach = results.iter().filter(|r| r.reached).count();
            println!(
                "{engine:?} N={n} prior={prior:?} nfe={nfe}: score={mean:.1} reached={reach}/50 \
                 loss {early:.1}->{late:.1} train={train_min:.1}min eval={:.0}s",
                t1.elapsed().as_secs_f64()
            );
        }
    }
}
