//! End-to-end orchestration: training either engine on a dataset, bundling
//! checkpoints with their configuration, and running seeded evaluation
//! episodes against cached reference scores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::sample_batch;
use crate::ddpm::{self, make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::i2sb::{self, make_bridge_schedule, BridgeSchedule};
use crate::maze::{
    self, episode_rng, make_maze, normalized_score, sample_start_goal, EpisodeResult, MazeId,
};
use crate::net::{DenoiserNetwork, PriorNetwork, TrainerState};
use crate::planner::{self, Conditioning, Engine, EngineModel, PlanRequest};
use crate::priors::{PriorKind, PriorSampler};
use crate::trajectory::{Dataset, NormalizationStats, STATE_DIM, TRANSITION_DIM};

const MODEL_MAGIC: &[u8; 8] = b"SBMODEL1";

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub engine: Engine,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    pub prior: PriorKind,
    pub training_steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(engine: Engine, n_steps: usize, prior: PriorKind) -> Self {
        TrainConfig {
            engine,
            n_steps,
            schedule: ScheduleKind::Cosine,
            prior,
            training_steps: 2000,
            batch: 4,
            seed: 0,
        }
    }
}

/// Everything needed to plan with a trained checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub engine: Engine,
    pub n_steps: usize,
    pub schedule: ScheduleKind,
    pub prior: PriorKind,
    pub maze_id: MazeId,
    pub horizon: usize,
    pub training_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub stats_min: Vec<f64>,
    pub stats_max: Vec<f64>,
}

pub struct TrainedModel {
    pub net: DenoiserNetwork,
    pub prior_net: Option<PriorNetwork>,
    pub meta: ModelMeta,
}

impl TrainedModel {
    pub fn stats(&self) -> NormalizationStats {
        let mut min = [0.0; TRANSITION_DIM];
        let mut max = [0.0; TRANSITION_DIM];
        min.copy_from_slice(&self.meta.stats_min);
        max.copy_from_slice(&self.meta.stats_max);
        NormalizationStats::new(min, max).expect("stats validated at save")
    }

    pub fn engine_model(&self) -> Result<(EngineSchedules, NormalizationStats)> {
        let sched = match self.meta.engine {
            Engine::Ddpm => {
                EngineSchedules::Ddpm(make_schedule(self.meta.n_steps, self.meta.schedule)?)
            }
            Engine::I2sb => EngineSchedules::I2sb(make_bridge_schedule(self.meta.n_steps)?),
        };
        Ok((sched, self.stats()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MODEL_MAGIC)?;
            let json = serde_json::to_vec(&self.meta).expect("meta serializes");
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(&json)?;
            self.net.write_to(&mut w)?;
            match &self.prior_net {
                Some(p) => {
                    w.write_all(&[1])?;
                    p.write_to(&mut w)?;
                }
                None => w.write_all(&[0])?,
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        crate::net::unet::read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::VersionMismatch);
        }
        let json_len = crate::net::unet::read_u32(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        crate::net::unet::read_exact(&mut r, &mut json)?;
        let meta: ModelMeta = serde_json::from_slice(&json)
            .map_err(|e| Error::CheckpointMismatch(format!("bad metadata: {e}")))?;
        let net = DenoiserNetwork::read_from(&mut r)?;
        let mut flag = [0u8; 1];
        crate::net::unet::read_exact(&mut r, &mut flag)?;
        let prior_net = if flag[0] == 1 {
            Some(PriorNetwork::read_from(&mut r)?)
        } else {
            None
        };
        if net.horizon() != meta.horizon {
            return Err(Error::CheckpointMismatch(format!(
                "net horizon {} != meta horizon {}",
                net.horizon(),
                meta.horizon
            )));
        }
        Ok(TrainedModel { net, prior_net, meta })
    }

    fn prior_sampler<'a>(&'a self, stats: &'a NormalizationStats) -> Result<PriorSampler<'a>> {
        Ok(match self.meta.prior {
            PriorKind::Gaussian => PriorSampler::Gaussian,
            PriorKind::StraightLine => PriorSampler::StraightLine { stats },
            PriorKind::Learned => PriorSampler::Learned(
                self.prior_net
                    .as_ref()
                    .ok_or_else(|| Error::CheckpointMismatch("missing prior network".into()))?,
            ),
        })
    }
}

pub enum EngineSchedules {
    Ddpm(NoiseSchedule),
    I2sb(BridgeSchedule),
}

/// Trains the configured engine on the dataset, returning the model bundle
/// and the per-step loss curve. Deterministic given the config seed.
pub fn train_model(ds: &Dataset, cfg: &TrainConfig) -> Result<(TrainedModel, Vec<f64>)> {
    let horizon = ds.horizon().ok_or(Error::EmptyDataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prior_net = if cfg.engine == Engine::I2sb && cfg.prior == PriorKind::Learned {
        let (pnet, _) =
            train_prior_network(ds, cfg.training_steps, cfg.batch, cfg.seed ^ 0x9e37_79b9)?;
        Some(pnet)
    } else {
        None
    };

    let mut net = DenoiserNetwork::new(horizon, TRANSITION_DIM, cfg.seed)?;
    let mut trainer = TrainerState::new(net.param_count(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.training_steps);

    let mut ws = crate::net::GradWorkspace::new(cfg.batch, net.param_count());
    let mut grad = vec![0.0; net.param_count()];
    match cfg.engine {
        Engine::Ddpm => {
            let sched = make_schedule(cfg.n_steps, cfg.schedule)?;
            for _ in 0..cfg.training_steps {
                let (xs, conds) = sample_batch(ds, cfg.batch, &mut rng)?;
                let loss = ddpm::loss_simple_into(
                    &net, &xs, Some(&conds), &mut rng, &sched, &mut ws, &mut grad,
                )?;
                apply_update(&mut trainer, &mut net, &grad);
                losses.push(loss);
            }
        }
        Engine::I2sb => {
            let sched = make_bridge_schedule(cfg.n_steps)?;
            let stats = ds.stats.clone();
            for _ in 0..cfg.training_steps {
                let (xs, conds) = sample_batch(ds, cfg.batch, &mut rng)?;
                let sampler = match cfg.prior {
                    PriorKind::Gaussian => PriorSampler::Gaussian,
                    PriorKind::StraightLine => PriorSampler::StraightLine { stats: &stats },
                    PriorKind::Learned => {
                        PriorSampler::Learned(prior_net.as_ref().expect("trained above"))
                    }
                };
                let pairs: Vec<(Vec<f64>, Vec<f64>)> = xs
                    .into_iter()
                    .zip(&conds)
                    .map(|(x0, cond)| {
                        let x1 = sampler.sample(horizon, cond, &mut rng);
                        (x0, x1)
                    })
                    .collect();
                let loss = i2sb::bridge_loss_into(
                    &net, &pairs, Some(&conds), &mut rng, &sched, &mut ws, &mut grad,
                )?;
                apply_update(&mut trainer, &mut net, &grad);
                losses.push(loss);
            }
        }
    }

    let meta = ModelMeta {
        engine: cfg.engine,
        n_steps: cfg.n_steps,
        schedule: cfg.schedule,
        prior: cfg.prior,
        maze_id: ds.maze_id,
        horizon,
        training_steps: cfg.training_steps,
        batch: cfg.batch,
        seed: cfg.seed,
        stats_min: ds.stats.min().to_vec(),
        stats_max: ds.stats.max().to_vec(),
    };
    Ok((TrainedModel { net, prior_net, meta }, losses))
}

fn apply_update(trainer: &mut TrainerState, net: &mut DenoiserNetwork, grad: &[f64]) {
    // non-finite gradients are skipped and counted, not fatal
    let _ = trainer.train_step(net.params_mut(), grad);
}

/// Trains the shallow prior network with the plain squared-error objective on
/// normalized target trajectories, conditioned on each segment's endpoints.
pub fn train_prior_network(
    ds: &Dataset,
    training_steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(PriorNetwork, Vec<f64>)> {
    let horizon = ds.horizon().ok_or(Error::EmptyDataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pnet = PriorNetwork::new(horizon, TRANSITION_DIM, STATE_DIM, seed);
    let mut trainer = TrainerState::new(pnet.param_count(), seed);
    let mut losses = Vec::with_capacity(training_steps);

    for _ in 0..training_steps {
        let (xs, conds) = sample_batch(ds, batch, &mut rng)?;
        let results: Vec<(f64, Vec<f64>)> = xs
            .par_iter()
            .zip(conds.par_iter())
            .map(|(target, cond)| {
                let pred = pnet.forward(&cond.start_state, &cond.goal_state);
                let mut loss = 0.0;
                let mut upstream = vec![0.0; pred.len()];
                for j in 0..pred.len() {
                    let d = pred[j] - target[j];
                    loss += d * d;
                    upstream[j] = 2.0 * d / batch as f64;
                }
                let grad = pnet.backward(&cond.start_state, &cond.goal_state, &upstream);
                (loss, grad)
            })
            .collect();
        let mut grad = vec![0.0; pnet.param_count()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let _ = trainer.train_step(pnet.params_mut(), &grad);
        losses.push(loss / batch as f64);
    }
    Ok((pnet, losses))
}

/// Mean squared error of a prior against normalized targets drawn from a
/// dataset, for holdout comparisons.
pub fn prior_holdout_mse(
    sampler: &PriorSampler,
    ds: &Dataset,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let horizon = ds.horizon().ok_or(Error::EmptyDataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, conds) = sample_batch(ds, n, &mut rng)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, cond) in xs.iter().zip(&conds) {
        let pred = sampler.sample(horizon, cond, &mut rng);
        for (p, t) in pred.iter().zip(x) {
            total += (p - t) * (p - t);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One evaluation episode of a trained model: sample a task, plan once,
/// execute open loop.
pub fn run_model_episode(
    model: &TrainedModel,
    schedules: &EngineSchedules,
    stats: &NormalizationStats,
    nfe: usize,
    eval_seed: u64,
    episode: u64,
) -> Result<EpisodeResult> {
    let spec = make_maze(model.meta.maze_id);
    let mut rng = episode_rng(eval_seed, episode);
    let (start, goal) = sample_start_goal(&spec, &mut rng);
    let plan_seed: u64 = rng.random();

    let req = PlanRequest {
        start_state: [start[0], start[1], 0.0, 0.0],
        goal_position: goal,
        engine: model.meta.engine,
        prior: model.meta.prior,
        nfe,
        seed: plan_seed,
    };
    let engine_model = match schedules {
        EngineSchedules::Ddpm(s) => EngineModel::Ddpm { net: &model.net, sched: s },
        EngineSchedules::I2sb(s) => EngineModel::I2sb {
            net: &model.net,
            sched: s,
            prior: model.prior_sampler(stats)?,
        },
    };
    let traj = planner::plan(&req, &engine_model, stats)?;
    Ok(planner::execute(&spec, &traj, goal))
}

/// Runs seeded evaluation episodes in parallel and attaches normalized
/// scores.
pub fn evaluate_model(
    model: &TrainedModel,
    nfe: usize,
    episodes: usize,
    eval_seed: u64,
    refs: (f64, f64),
) -> Result<Vec<EpisodeResult>> {
    let (schedules, stats) = model.engine_model()?;
    let mut results: Vec<EpisodeResult> = (0..episodes as u64)
        .into_par_iter()
        .map(|ep| run_model_episode(model, &schedules, &stats, nfe, eval_seed, ep))
        .collect::<Result<_>>()?;
    for r in &mut results {
        r.normalized_score = Some(normalized_score(r.total_reward, refs.0, refs.1)?);
    }
    Ok(results)
}

/// Reference policies runnable through the same episode stream as the
/// diffusion engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    Expert,
    Random,
}

/// Evaluates a reference policy over the same seeded episodes used by
/// `compute_reference_scores`, so the expert scores 100 and the random
/// policy scores 0 by construction.
pub fn evaluate_reference_policy(
    maze_id: MazeId,
    policy: ReferencePolicy,
    episodes: usize,
    eval_seed: u64,
    refs: (f64, f64),
) -> Result<Vec<EpisodeResult>> {
    let spec = make_maze(maze_id);
    let mut results = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = episode_rng(eval_seed, ep as u64);
        let (start, goal) = sample_start_goal(&spec, &mut rng);
        let mut r = match policy {
            ReferencePolicy::Random => maze::run_episode(&spec, start, goal, |_| {
                [
                    rng.random_range(-maze::A_MAX..=maze::A_MAX),
                    rng.random_range(-maze::A_MAX..=maze::A_MAX),
                ]
            }),
            ReferencePolicy::Expert => {
                let field = spec.distance_field(spec.cell_of(goal));
                maze::run_episode(&spec, start, goal, |s| {
                    maze::expert_action_with_field(&spec, s, &field).expect("reachable")
                })
            }
        };
        r.normalized_score = Some(normalized_score(r.total_reward, refs.0, refs.1)?);
        results.push(r);
    }
    Ok(results)
}

/// Builds the conditioning a dataset segment provides, for tests and tools.
pub fn conditioning_of_segment(ds: &Dataset, index: usize) -> Result<Conditioning> {
    let traj = ds.trajectories.get(index).ok_or(Error::EmptyDataset)?;
    let mut data = traj.data().to_vec();
    ds.stats.normalize_slice(&mut data);
    let horizon = traj.horizon();
    let mut start = [0.0; STATE_DIM];
    let mut goal = [0.0; STATE_DIM];
    start.copy_from_slice(&data[crate::trajectory::ACTION_DIM..TRANSITION_DIM]);
    let off = (horizon - 1) * TRANSITION_DIM;
    goal.copy_from_slice(&data[off + crate::trajectory::ACTION_DIM..off + TRANSITION_DIM]);
    Ok(Conditioning { start_state: start, goal_state: goal })
}
