//! Offline training data: the expert wanders between random goals and the
//! log is sliced into overlapping horizon-length windows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maze::{
    self, expert_action_with_field, initial_state, make_maze, sample_start_goal, MazeId, MazeSpec,
};
use crate::planner::Conditioning;
use crate::trajectory::{
    Dataset, NormalizationStats, Trajectory, ACTION_DIM, TRANSITION_DIM,
};

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub maze_id: MazeId,
    pub total_steps: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::HorizonTooShort(self.horizon));
        }
        if self.total_steps < 10 * self.horizon {
            return Err(Error::ShapeMismatch {
                expected: format!("total_steps >= {}", 10 * self.horizon),
                got: format!("{}", self.total_steps),
            });
        }
        Ok(())
    }
}

/// Steps the expert toward its goal, drawing a fresh goal on every arrival.
/// Goals that resist the expert for two episode caps are abandoned so the
/// wander never stalls.
fn wander_log(spec: &MazeSpec, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (start, goal) = sample_start_goal(spec, rng);
    let mut state = initial_state(start, goal);
    let mut field = spec.distance_field(spec.cell_of(goal));
    let mut log = Vec::with_capacity(cfg.total_steps * TRANSITION_DIM);
    let patience = 2 * spec.id.episode_cap();
    let mut since_new_goal = 0usize;

    for _ in 0..cfg.total_steps {
        let action = expert_action_with_field(spec, &state, &field)?;
        log.extend_from_slice(&[
            action[0],
            action[1],
            state.position[0],
            state.position[1],
            state.velocity[0],
            state.velocity[1],
        ]);
        let (next, reward) = maze::step(spec, &state, action);
        state = next;
        since_new_goal += 1;
        if reward > 0.0 || since_new_goal > patience {
            let (_, goal) = sample_start_goal(spec, rng);
            state.goal = goal;
            field = spec.distance_field(spec.cell_of(goal));
            since_new_goal = 0;
        }
    }
    Ok(log)
}

/// Window stride: a quarter horizon.
pub fn stride_for(horizon: usize) -> usize {
    (horizon / 4).max(1)
}

/// Generates the dataset: one continuous expert log, segmented into
/// overlapping windows, with stats fitted on the full log. Deterministic
/// given the seed.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let spec = make_maze(cfg.maze_id);
    let mut rng = crate::maze::episode_rng(cfg.seed, 0);
    let log = wander_log(&spec, cfg, &mut rng)?;

    let mut min = [f64::INFINITY; TRANSITION_DIM];
    let mut max = [f64::NEG_INFINITY; TRANSITION_DIM];
    for row in log.chunks_exact(TRANSITION_DIM) {
        for d in 0..TRANSITION_DIM {
            min[d] = min[d].min(row[d]);
            max[d] = max[d].max(row[d]);
        }
    }
    let stats = NormalizationStats::new(min, max)?;

    let stride = stride_for(cfg.horizon);
    let mut trajectories = Vec::new();
    let mut start = 0;
    while start + cfg.horizon <= cfg.total_steps {
        let window =
            log[start * TRANSITION_DIM..(start + cfg.horizon) * TRANSITION_DIM].to_vec();
        trajectories.push(Trajectory::from_rows(cfg.horizon, window)?);
        start += stride;
    }
    Dataset::new(trajectories, stats, cfg.maze_id)
}

/// Draws `batch` segments with replacement, returning normalized row-major
/// buffers plus each segment's endpoint conditioning (normalized states at
/// rows 0 and horizon-1).
pub fn sample_batch<R: Rng>(
    ds: &Dataset,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Conditioning>)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let horizon = ds.horizon().expect("non-empty dataset");
    let mut xs = Vec::with_capacity(batch);
    let mut conds = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = rng.random_range(0..ds.trajectories.len());
        let traj = &ds.trajectories[idx];
        let mut data = traj.data().to_vec();
        ds.stats.normalize_slice(&mut data);

        let mut first = [0.0; TRANSITION_DIM - ACTION_DIM];
        let mut last = [0.0; TRANSITION_DIM - ACTION_DIM];
        first.copy_from_slice(&data[ACTION_DIM..TRANSITION_DIM]);
        let off = (horizon - 1) * TRANSITION_DIM;
        last.copy_from_slice(&data[off + ACTION_DIM..off + TRANSITION_DIM]);

        xs.push(data);
        conds.push(Conditioning { start_state: first, goal_state: last });
    }
    Ok((xs, conds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::V_MAX;

    fn small_cfg() -> GenConfig {
        GenConfig { maze_id: MazeId::Umaze, total_steps: 640, horizon: 64, seed: 5 }
    }

    #[test]
    fn segment_count_matches_windowing_arithmetic() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        // floor((10h - h) / (h/4)) + 1 = 37
        assert_eq!(ds.len(), 37);
    }

    #[test]
    fn segments_respect_maze_walls_and_speed_limit() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let spec = make_maze(cfg.maze_id);
        for traj in &ds.trajectories {
            for t in 0..traj.horizon() {
                let s = traj.state(t);
                assert!(!spec.is_wall_at([s[0], s[1]]), "state in wall: {s:?}");
                assert!(s[2].abs() <= V_MAX && s[3].abs() <= V_MAX);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn windowing_covers_at_least_90_percent() {
        let cfg = small_cfg();
        let stride = stride_for(cfg.horizon);
        let n_seg = (cfg.total_steps - cfg.horizon) / stride + 1;
        let covered = (n_seg - 1) * stride + cfg.horizon;
        assert!(covered * 10 >= cfg.total_steps * 9);
    }

    #[test]
    fn batch_conditioning_matches_segment_endpoints() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let mut rng = crate::maze::episode_rng(1, 0);
        let (xs, conds) = sample_batch(&ds, 1, &mut rng).unwrap();
        let h = cfg.horizon;
        assert_eq!(&xs[0][ACTION_DIM..TRANSITION_DIM], &conds[0].start_state);
        let off = (h - 1) * TRANSITION_DIM;
        assert_eq!(&xs[0][off + ACTION_DIM..off + TRANSITION_DIM], &conds[0].goal_state);
    }

    #[test]
    fn batch_larger_than_dataset_samples_with_replacement() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let mut rng = crate::maze::episode_rng(2, 0);
        let (xs, conds) = sample_batch(&ds, 50, &mut rng).unwrap();
        assert_eq!(xs.len(), 50);
        assert_eq!(conds.len(), 50);
        for x in &xs {
            assert_eq!(x.len(), cfg.horizon * TRANSITION_DIM);
            assert!(x.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn conditioning_positions_decode_to_free_cells() {
        let cfg = small_cfg();
        let ds = generate(&cfg).unwrap();
        let spec = make_maze(cfg.maze_id);
        let mut rng = crate::maze::episode_rng(3, 0);
        let (_, conds) = sample_batch(&ds, 16, &mut rng).unwrap();
        for cond in &conds {
            for state in [&cond.start_state, &cond.goal_state] {
                let x = ds.stats.denormalize_value(ACTION_DIM, state[0]);
                let y = ds.stats.denormalize_value(ACTION_DIM + 1, state[1]);
                assert!(!spec.is_wall_at([x, y]), "conditioned position in wall");
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let stats = NormalizationStats::new([0.0; 6], [1.0; 6]).unwrap();
        let ds = Dataset::new(Vec::new(), stats, MazeId::Open).unwrap();
        let mut rng = crate::maze::episode_rng(0, 0);
        assert!(matches!(sample_batch(&ds, 4, &mut rng), Err(Error::EmptyDataset)));
    }
}
