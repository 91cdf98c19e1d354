//! Self-contained 2D maze benchmark: grid worlds, point-mass dynamics, a
//! waypoint expert, and normalized scoring.
//!
//! The four layouts are hand-encoded to match the standard Maze2D suite at
//! cell granularity. Dynamics are a double integrator with axis-separated
//! wall collision; the reward is a sparse indicator inside the goal radius.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CELL_SIZE: f64 = 1.0;
pub const GOAL_RADIUS: f64 = 0.5;
pub const DT: f64 = 0.02;
pub const A_MAX: f64 = 1.0;
pub const V_MAX: f64 = 5.0;
pub const KP: f64 = 10.0;
pub const KD: f64 = 2.0;
/// Start/goal jitter around a free cell center, in meters.
pub const SPAWN_JITTER: f64 = 0.25;

/// Clamped positions sit this far off the wall face so the containing cell
/// stays the free one.
const WALL_EPS: f64 = 1e-9;

const OPEN_LAYOUT: &str = "#######\n\
                           #.....#\n\
                           #.....#\n\
                           #.....#\n\
                           #######";

const UMAZE_LAYOUT: &str = "#####\n\
                            #...#\n\
                            ###.#\n\
                            #...#\n\
                            #####";

const MEDIUM_LAYOUT: &str = "########\n\
                             #..##..#\n\
                             #..#...#\n\
                             ##...###\n\
                             #..#...#\n\
                             #.#..#.#\n\
                             #...#..#\n\
                             ########";

const LARGE_LAYOUT: &str = "############\n\
                            #....#.....#\n\
                            #.##.#.#.#.#\n\
                            #......#...#\n\
                            #.##.#.###.#\n\
                            #..#.#.....#\n\
                            ##.#.#.#.#.#\n\
                            #...#...#..#\n\
                            ############";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MazeId {
    Open = 0,
    Umaze = 1,
    Medium = 2,
    Large = 3,
}

impl MazeId {
    pub const ALL: [MazeId; 4] = [MazeId::Open, MazeId::Umaze, MazeId::Medium, MazeId::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            MazeId::Open => "open",
            MazeId::Umaze => "umaze",
            MazeId::Medium => "medium",
            MazeId::Large => "large",
        }
    }

    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(MazeId::Open),
            1 => Some(MazeId::Umaze),
            2 => Some(MazeId::Medium),
            3 => Some(MazeId::Large),
            _ => None,
        }
    }

    /// Maximum episode length; large mazes get more steps than the rest.
    pub fn episode_cap(self) -> usize {
        match self {
            MazeId::Large => 800,
            _ => 600,
        }
    }

    /// Default planning horizon (256 medium, 384 large; the two small mazes
    /// use 128).
    pub fn default_horizon(self) -> usize {
        match self {
            MazeId::Medium => 256,
            MazeId::Large => 384,
            _ => 128,
        }
    }
}

impl std::str::FromStr for MazeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(MazeId::Open),
            "umaze" => Ok(MazeId::Umaze),
            "medium" => Ok(MazeId::Medium),
            "large" => Ok(MazeId::Large),
            other => Err(Error::UnknownMaze(other.to_string())),
        }
    }
}

impl std::fmt::Display for MazeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Immutable grid layout plus geometry constants. Safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct MazeSpec {
    pub id: MazeId,
    rows: usize,
    cols: usize,
    /// true = wall, row-major.
    grid: Vec<bool>,
    pub cell_size: f64,
    pub goal_radius: f64,
}

/// Point-mass state: position and velocity in meters, plus the active goal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub steps_elapsed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub steps: usize,
    pub reached: bool,
    pub normalized_score: Option<f64>,
}

pub fn make_maze(id: MazeId) -> MazeSpec {
    let layout = match id {
        MazeId::Open => OPEN_LAYOUT,
        MazeId::Umaze => UMAZE_LAYOUT,
        MazeId::Medium => MEDIUM_LAYOUT,
        MazeId::Large => LARGE_LAYOUT,
    };
    MazeSpec::parse(id, layout).expect("embedded layout is valid")
}

impl MazeSpec {
    fn parse(id: MazeId, layout: &str) -> Result<Self> {
        let lines: Vec<&str> = layout.lines().map(str::trim).collect();
        let rows = lines.len();
        let cols = lines[0].len();
        let mut grid = Vec::with_capacity(rows * cols);
        for line in &lines {
            if line.len() != cols {
                return Err(Error::ShapeDisagreement("ragged maze layout".into()));
            }
            for ch in line.chars() {
                grid.push(ch == '#');
            }
        }
        let spec = Self { id, rows, cols, grid, cell_size: CELL_SIZE, goal_radius: GOAL_RADIUS };
        spec.check_invariants()?;
        Ok(spec)
    }

    fn check_invariants(&self) -> Result<()> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let border = r == 0 || c == 0 || r == self.rows - 1 || c == self.cols - 1;
                if border && !self.is_wall_cell(r, c) {
                    return Err(Error::ShapeDisagreement("open border cell".into()));
                }
            }
        }
        let free = self.free_cells();
        if free.len() < 2 {
            return Err(Error::ShapeDisagreement("fewer than 2 free cells".into()));
        }
        let dist = self.distance_field(free[0]);
        for &(r, c) in &free {
            if dist[r * self.cols + c] == u32::MAX {
                return Err(Error::UnreachableGoal(r, c));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_wall_cell(&self, row: usize, col: usize) -> bool {
        row >= self.rows || col >= self.cols || self.grid[row * self.cols + col]
    }

    /// Cell containing a position; positions outside the grid count as wall.
    pub fn cell_of(&self, pos: [f64; 2]) -> (usize, usize) {
        let c = (pos[0] / self.cell_size).floor();
        let r = (pos[1] / self.cell_size).floor();
        if c < 0.0 || r < 0.0 {
            return (usize::MAX, usize::MAX);
        }
        (r as usize, c as usize)
    }

    pub fn is_wall_at(&self, pos: [f64; 2]) -> bool {
        let (r, c) = self.cell_of(pos);
        self.is_wall_cell(r, c)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.is_wall_cell(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// BFS distance (in cells, 4-connected) from every cell to `target`.
    /// Walls and unreachable cells get `u32::MAX`.
    pub fn distance_field(&self, target: (usize, usize)) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.rows * self.cols];
        if self.is_wall_cell(target.0, target.1) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[target.0 * self.cols + target.1] = 0;
        queue.push_back(target);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.cols + c];
            for (nr, nc) in self.neighbors(r, c) {
                let idx = nr * self.cols + nc;
                if dist[idx] == u32::MAX {
                    dist[idx] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }

    fn neighbors(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        OFFSETS.iter().filter_map(move |&(dr, dc)| {
            let nr = r.checked_add_signed(dr)?;
            let nc = c.checked_add_signed(dc)?;
            (!self.is_wall_cell(nr, nc)).then_some((nr, nc))
        })
    }

    /// `#`/`.` rendering of the grid, one row per line.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.cols + 1) * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_wall_cell(r, c) { '#' } else { '.' });
            }
            if r + 1 < self.rows {
                s.push('\n');
            }
        }
        s
    }
}

/// Semi-implicit Euler step with per-axis wall clamping. Actions are clipped,
/// never rejected; the reward is 1 inside the goal radius, else 0.
pub fn step(spec: &MazeSpec, s: &SimState, action: [f64; 2]) -> (SimState, f64) {
    let ax = action[0].clamp(-A_MAX, A_MAX);
    let ay = action[1].clamp(-A_MAX, A_MAX);

    let mut vx = (s.velocity[0] + ax * DT).clamp(-V_MAX, V_MAX);
    let mut vy = (s.velocity[1] + ay * DT).clamp(-V_MAX, V_MAX);

    let mut px = s.position[0];
    let mut py = s.position[1];

    // x axis first, then y against the updated x.
    let nx = px + vx * DT;
    if spec.is_wall_at([nx, py]) {
        if vx > 0.0 {
            px = nx.floor() * spec.cell_size - WALL_EPS;
        } else {
            px = (nx.floor() + 1.0) * spec.cell_size + WALL_EPS;
        }
        vx = 0.0;
    } else {
        px = nx;
    }

    let ny = py + vy * DT;
    if spec.is_wall_at([px, ny]) {
        if vy > 0.0 {
            py = ny.floor() * spec.cell_size - WALL_EPS;
        } else {
            py = (ny.floor() + 1.0) * spec.cell_size + WALL_EPS;
        }
        vy = 0.0;
    } else {
        py = ny;
    }

    let next = SimState {
        position: [px, py],
        velocity: [vx, vy],
        goal: s.goal,
        steps_elapsed: s.steps_elapsed + 1,
    };
    let dx = px - s.goal[0];
    let dy = py - s.goal[1];
    let reward = if (dx * dx + dy * dy).sqrt() <= spec.goal_radius { 1.0 } else { 0.0 };
    (next, reward)
}

/// Pursuit lookahead along the BFS path, meters.
pub const EXPERT_LOOKAHEAD: f64 = 0.35;
/// Terminal braking profile: the lookahead shrinks with the square root of
/// the remaining path so the approach speed stays parkable under the
/// acceleration bound.
const BRAKE_FACTOR: f64 = 0.25;
/// Spacing of line-of-sight probes along candidate shortcuts.
const LOS_STEP: f64 = 0.1;

/// PD control toward the next waypoint of the BFS shortest cell path from
/// the current cell to the goal cell. The waypoint is a pursuit point a
/// short arc ahead on the line-of-sight-smoothed path; the lookahead shrinks
/// near the goal so the point mass can park inside the goal radius.
pub fn expert_action(spec: &MazeSpec, s: &SimState) -> Result<[f64; 2]> {
    let dist = spec.distance_field(spec.cell_of(s.goal));
    expert_action_with_field(spec, s, &dist)
}

/// Same as [`expert_action`] with a precomputed goal distance field, for
/// callers stepping many times toward one goal.
pub fn expert_action_with_field(
    spec: &MazeSpec,
    s: &SimState,
    goal_dist: &[u32],
) -> Result<[f64; 2]> {
    let (r, c) = spec.cell_of(s.position);
    let here = goal_dist
        .get(r * spec.cols + c)
        .copied()
        .unwrap_or(u32::MAX);
    if here == u32::MAX {
        return Err(Error::UnreachableGoal(r, c));
    }
    let waypoint = pursuit_waypoint(spec, s, goal_dist);
    Ok(pd_action(waypoint, s))
}

fn visible(spec: &MazeSpec, a: [f64; 2], b: [f64; 2]) -> bool {
    let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let steps = (d / LOS_STEP).ceil() as usize + 1;
    (0..=steps).all(|i| {
        let f = i as f64 / steps as f64;
        !spec.is_wall_at([a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f])
    })
}

fn pursuit_waypoint(spec: &MazeSpec, s: &SimState, goal_dist: &[u32]) -> [f64; 2] {
    // greedy descent to the goal cell, ending at the goal point itself
    let mut pts = Vec::new();
    let mut cur = spec.cell_of(s.position);
    while goal_dist[cur.0 * spec.cols + cur.1] > 0 {
        cur = spec
            .neighbors(cur.0, cur.1)
            .min_by_key(|&(nr, nc)| goal_dist[nr * spec.cols + nc])
            .expect("reachable cell has neighbors");
        pts.push(spec.cell_center(cur.0, cur.1));
    }
    pts.push(s.goal);

    // cut the Manhattan staircase: aim at the farthest visible vertex
    let mut target_idx = 0;
    for (i, p) in pts.iter().enumerate() {
        if visible(spec, s.position, *p) {
            target_idx = i;
        } else {
            break;
        }
    }

    let seg_len = |a: [f64; 2], b: [f64; 2]| {
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    };
    let mut arc = 0.0;
    let mut from = s.position;
    for p in &pts[target_idx..] {
        arc += seg_len(from, *p);
        from = *p;
    }
    let lookahead = EXPERT_LOOKAHEAD.min(BRAKE_FACTOR * arc.sqrt());

    let mut remaining = lookahead;
    let mut from = s.position;
    for p in &pts[target_idx..] {
        let d = seg_len(from, *p);
        if d >= remaining {
            let f = remaining / d.max(1e-12);
            return [from[0] + (p[0] - from[0]) * f, from[1] + (p[1] - from[1]) * f];
        }
        remaining -= d;
        from = *p;
    }
    *pts.last().expect("path has at least the goal")
}

/// `a = kp (w - p) - kd v`, per-component clipped to the action bound.
pub fn pd_action(waypoint: [f64; 2], s: &SimState) -> [f64; 2] {
    [
        (KP * (waypoint[0] - s.position[0]) - KD * s.velocity[0]).clamp(-A_MAX, A_MAX),
        (KP * (waypoint[1] - s.position[1]) - KD * s.velocity[1]).clamp(-A_MAX, A_MAX),
    ]
}

/// `100 (total - random_ref) / (expert_ref - random_ref)`, unclipped.
pub fn normalized_score(total: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if expert_ref <= random_ref {
        return Err(Error::DegenerateReference { random_ref, expert_ref });
    }
    Ok(100.0 * (total - random_ref) / (expert_ref - random_ref))
}

/// Uniformly sampled start/goal over free cell centers (distinct cells) with
/// +-0.25 m jitter on each coordinate.
pub fn sample_start_goal<R: Rng>(spec: &MazeSpec, rng: &mut R) -> ([f64; 2], [f64; 2]) {
    let free = spec.free_cells();
    let si = rng.random_range(0..free.len());
    let gi = loop {
        let i = rng.random_range(0..free.len());
        if i != si {
            break i;
        }
    };
    let jitter = |rng: &mut R, center: [f64; 2]| {
        [
            center[0] + rng.random_range(-SPAWN_JITTER..=SPAWN_JITTER),
            center[1] + rng.random_range(-SPAWN_JITTER..=SPAWN_JITTER),
        ]
    };
    let start = jitter(rng, spec.cell_center(free[si].0, free[si].1));
    let goal = jitter(rng, spec.cell_center(free[gi].0, free[gi].1));
    (start, goal)
}

pub fn initial_state(start: [f64; 2], goal: [f64; 2]) -> SimState {
    SimState { position: start, velocity: [0.0, 0.0], goal, steps_elapsed: 0 }
}

/// Rolls a policy to the episode cap, accumulating reward.
pub fn run_episode<F>(spec: &MazeSpec, start: [f64; 2], goal: [f64; 2], mut policy: F) -> EpisodeResult
where
    F: FnMut(&SimState) -> [f64; 2],
{
    let cap = spec.id.episode_cap();
    let mut s = initial_state(start, goal);
    let mut total = 0.0;
    let mut reached = false;
    let mut steps_to_reach = cap;
    for i in 0..cap {
        let a = policy(&s);
        let (next, reward) = step(spec, &s, a);
        total += reward;
        if reward > 0.0 && !reached {
            reached = true;
            steps_to_reach = i + 1;
        }
        s = next;
    }
    EpisodeResult { total_reward: total, steps: steps_to_reach, reached, normalized_score: None }
}

/// Per-episode RNG stream derived from `(seed, episode_index)`.
pub fn episode_rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Mean total reward of the uniform-random policy and of the expert over
/// matched (start, goal) pairs. Deterministic given the seed.
pub fn compute_reference_scores(
    spec: &MazeSpec,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if episodes < 100 {
        return Err(Error::ShapeMismatch {
            expected: "at least 100 reference episodes".into(),
            got: format!("{episodes}"),
        });
    }
    let mut random_total = 0.0;
    let mut expert_total = 0.0;
    for ep in 0..episodes {
        let mut rng = episode_rng(seed, ep as u64);
        let (start, goal) = sample_start_goal(spec, &mut rng);

        let random = run_episode(spec, start, goal, |_| {
            [rng.random_range(-A_MAX..=A_MAX), rng.random_range(-A_MAX..=A_MAX)]
        });
        random_total += random.total_reward;

        let field = spec.distance_field(spec.cell_of(goal));
        let expert = run_episode(spec, start, goal, |s| {
            expert_action_with_field(spec, s, &field).expect("goal reachable")
        });
        expert_total += expert.total_reward;
    }
    let n = episodes as f64;
    Ok((random_total / n, expert_total / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn umaze_is_5x5_u_shape() {
        let m = make_maze(MazeId::Umaze);
        assert_eq!((m.rows(), m.cols()), (5, 5));
        assert_eq!(
            m.to_ascii(),
            "#####\n#...#\n###.#\n#...#\n#####"
        );
        // free region is U-shaped: two full rows joined on one side only
        assert!(!m.is_wall_cell(1, 1) && !m.is_wall_cell(3, 1));
        assert!(m.is_wall_cell(2, 1) && m.is_wall_cell(2, 2));
        assert!(!m.is_wall_cell(2, 3));
    }

    #[test]
    fn open_has_no_interior_walls() {
        let m = make_maze(MazeId::Open);
        for r in 1..m.rows() - 1 {
            for c in 1..m.cols() - 1 {
                assert!(!m.is_wall_cell(r, c));
            }
        }
    }

    #[test]
    fn large_has_more_free_cells_than_medium() {
        let medium = make_maze(MazeId::Medium).free_cells().len();
        let large = make_maze(MazeId::Large).free_cells().len();
        assert!(large > medium, "large {large} <= medium {medium}");
    }

    #[test]
    fn all_mazes_connected() {
        for id in MazeId::ALL {
            let m = make_maze(id);
            let free = m.free_cells();
            let dist = m.distance_field(free[0]);
            for &(r, c) in &free {
                assert_ne!(dist[r * m.cols() + c], u32::MAX, "{id}: ({r},{c}) unreachable");
            }
        }
    }

    #[test]
    fn zero_velocity_zero_action_stays_put() {
        let m = make_maze(MazeId::Open);
        let s = initial_state([2.5, 2.5], [2.6, 2.5]);
        let (next, reward) = step(&m, &s, [0.0, 0.0]);
        assert_eq!(next.position, s.position);
        assert_eq!(next.velocity, [0.0, 0.0]);
        assert_eq!(reward, 1.0); // within goal radius already
    }

    #[test]
    fn reward_is_indicator_of_goal_radius() {
        let m = make_maze(MazeId::Open);
        let s = initial_state([2.5, 2.5], [2.5 + GOAL_RADIUS + 0.05, 2.5]);
        let (_, reward) = step(&m, &s, [0.0, 0.0]);
        assert_eq!(reward, 0.0);
        let s2 = initial_state([2.5, 2.5], [2.5 + GOAL_RADIUS - 0.05, 2.5]);
        let (_, reward2) = step(&m, &s2, [0.1, 0.0]);
        assert_eq!(reward2, 1.0);
    }

    #[test]
    fn head_on_wall_zeroes_normal_component_only() {
        let m = make_maze(MazeId::Open);
        // moving down into the top border wall (row 0) while drifting +x
        let s = SimState {
            position: [1.5, 1.001],
            velocity: [0.5, -1.0],
            goal: [5.0, 3.0],
            steps_elapsed: 0,
        };
        let (next, _) = step(&m, &s, [0.0, 0.0]);
        assert_eq!(next.velocity[1], 0.0, "normal component zeroed");
        assert_eq!(next.velocity[0], 0.5, "tangential preserved");
        assert!((next.position[1] - 1.0).abs() < 1e-6, "clamped to wall face");
        assert!((next.position[0] - 1.51).abs() < 1e-12);
    }

    #[test]
    fn fuzz_never_enters_wall_and_speed_bounded() {
        for id in [MazeId::Umaze, MazeId::Medium] {
            let m = make_maze(id);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (start, goal) = sample_start_goal(&m, &mut rng);
            let mut s = initial_state(start, goal);
            for _ in 0..100_000 {
                let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let (next, _) = step(&m, &s, a);
                assert!(!m.is_wall_at(next.position), "{id}: wall at {:?}", next.position);
                assert!(next.velocity[0].abs() <= V_MAX && next.velocity[1].abs() <= V_MAX);
                s = next;
            }
        }
    }

    #[test]
    fn expert_points_along_open_corridor() {
        let m = make_maze(MazeId::Umaze);
        // bottom corridor of the U: goal to the right, path is straight
        let s = initial_state([1.5, 3.5], [3.5, 3.5]);
        let a = expert_action(&m, &s).unwrap();
        assert!(a[0] > 0.0, "should push +x, got {a:?}");
        assert!(a[1].abs() < 1e-9);
    }

    #[test]
    fn expert_at_goal_is_gentle() {
        let m = make_maze(MazeId::Umaze);
        let goal = [1.5, 3.5];
        let s = SimState { position: [1.6, 3.5], velocity: [0.0, 0.0], goal, steps_elapsed: 0 };
        let a = expert_action(&m, &s).unwrap();
        let mag = (a[0] * a[0] + a[1] * a[1]).sqrt();
        assert!(mag <= KP * GOAL_RADIUS + 1e-9);
    }

    #[test]
    fn expert_reaches_goal_on_umaze() {
        let m = make_maze(MazeId::Umaze);
        // opposite ends of the U
        let start = [1.5, 1.5];
        let goal = [1.5, 3.5];
        let field = m.distance_field(m.cell_of(goal));
        let result = run_episode(&m, start, goal, |s| {
            expert_action_with_field(&m, s, &field).unwrap()
        });
        assert!(result.reached, "expert failed to reach the goal");
        assert!(result.steps < m.id.episode_cap());
    }

    #[test]
    fn expert_success_rate_at_least_95_percent() {
        for id in MazeId::ALL {
            let m = make_maze(id);
            let mut ok = 0;
            let episodes = 200usize;
            for ep in 0..episodes as u64 {
                let mut rng = episode_rng(12345, ep);
                let (start, goal) = sample_start_goal(&m, &mut rng);
                let field = m.distance_field(m.cell_of(goal));
                let r = run_episode(&m, start, goal, |s| {
                    expert_action_with_field(&m, s, &field).unwrap()
                });
                ok += r.reached as usize;
            }
            assert!(ok * 100 >= 95 * episodes, "{id}: {ok}/{episodes} reached");
        }
    }

    #[test]
    fn normalized_score_endpoints_and_monotonicity() {
        assert_eq!(normalized_score(3.0, 3.0, 11.0).unwrap(), 0.0);
        assert_eq!(normalized_score(11.0, 3.0, 11.0).unwrap(), 100.0);
        assert_eq!(normalized_score(7.0, 3.0, 11.0).unwrap(), 50.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let s = normalized_score(i as f64, 3.0, 11.0).unwrap();
            assert!(s > prev);
            prev = s;
        }
        assert!(matches!(
            normalized_score(1.0, 5.0, 5.0),
            Err(Error::DegenerateReference { .. })
        ));
    }

    #[test]
    fn reference_scores_expert_beats_random_everywhere() {
        let mut expert_refs = std::collections::HashMap::new();
        for id in MazeId::ALL {
            let m = make_maze(id);
            let (random_ref, expert_ref) = compute_reference_scores(&m, 100, 7).unwrap();
            assert!(
                expert_ref > random_ref,
                "{id}: expert {expert_ref} <= random {random_ref}"
            );
            expert_refs.insert(id, expert_ref);
        }
        assert!(expert_refs[&MazeId::Open] >= expert_refs[&MazeId::Umaze]);
    }

    #[test]
    fn reference_scores_deterministic() {
        let m = make_maze(MazeId::Umaze);
        let a = compute_reference_scores(&m, 100, 3).unwrap();
        let b = compute_reference_scores(&m, 100, 3).unwrap();
        assert_eq!(a, b);
    }
}
