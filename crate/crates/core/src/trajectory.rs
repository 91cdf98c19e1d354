//! Trajectory data model, min-max normalization and the on-disk dataset format.
//!
//! A trajectory is a `horizon x 6` row-major matrix; each row is the
//! concatenation `[action (2), state (4)]` with state `(x, y, vx, vy)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::maze::MazeId;

pub const ACTION_DIM: usize = 2;
pub const STATE_DIM: usize = 4;
pub const TRANSITION_DIM: usize = ACTION_DIM + STATE_DIM;

/// Width below which a dimension is treated as constant by the normalizer.
pub const DEGENERATE_EPS: f64 = 1e-6;

const DATASET_MAGIC: &[u8; 8] = b"SBPLAN01";

/// One planned or logged trajectory. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    horizon: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl Trajectory {
    /// Builds a raw-unit trajectory from row-major data, rejecting
    /// non-finite entries and horizons shorter than 2.
    pub fn from_rows(horizon: usize, data: Vec<f64>) -> Result<Self> {
        Self::build(horizon, data, false)
    }

    /// Same validation as `from_rows` but marks the result normalized.
    pub fn from_rows_normalized(horizon: usize, data: Vec<f64>) -> Result<Self> {
        Self::build(horizon, data, true)
    }

    fn build(horizon: usize, data: Vec<f64>, normalized: bool) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::HorizonTooShort(horizon));
        }
        if data.len() != horizon * TRANSITION_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", horizon * TRANSITION_DIM),
                got: format!("{}", data.len()),
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: i / TRANSITION_DIM,
                    dim: i % TRANSITION_DIM,
                });
            }
        }
        Ok(Self { horizon, data, normalized })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * TRANSITION_DIM..(t + 1) * TRANSITION_DIM]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.row(t)[..ACTION_DIM]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.row(t)[ACTION_DIM..]
    }
}

/// Per-dimension min/max fitted on raw data, mapping `[min, max] -> [-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    min: [f64; TRANSITION_DIM],
    max: [f64; TRANSITION_DIM],
}

impl NormalizationStats {
    pub fn new(min: [f64; TRANSITION_DIM], max: [f64; TRANSITION_DIM]) -> Result<Self> {
        for d in 0..TRANSITION_DIM {
            if !min[d].is_finite() || !max[d].is_finite() {
                return Err(Error::NonFinite { row: 0, dim: d });
            }
            if max[d] < min[d] {
                return Err(Error::ShapeDisagreement(format!(
                    "stats max < min in dimension {d}"
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Fits per-dimension bounds over every row of every trajectory.
    pub fn fit<'a, I: IntoIterator<Item = &'a Trajectory>>(trajs: I) -> Result<Self> {
        let mut min = [f64::INFINITY; TRANSITION_DIM];
        let mut max = [f64::NEG_INFINITY; TRANSITION_DIM];
        let mut any = false;
        for traj in trajs {
            any = true;
            for row in traj.data.chunks_exact(TRANSITION_DIM) {
                for d in 0..TRANSITION_DIM {
                    min[d] = min[d].min(row[d]);
                    max[d] = max[d].max(row[d]);
                }
            }
        }
        if !any {
            return Err(Error::EmptyDataset);
        }
        Self::new(min, max)
    }

    pub fn min(&self) -> &[f64; TRANSITION_DIM] {
        &self.min
    }

    pub fn max(&self) -> &[f64; TRANSITION_DIM] {
        &self.max
    }

    /// A dimension narrower than `DEGENERATE_EPS` maps to constant 0.
    pub fn is_degenerate(&self, dim: usize) -> bool {
        self.max[dim] - self.min[dim] < DEGENERATE_EPS
    }

    pub fn normalize_value(&self, dim: usize, v: f64) -> f64 {
        if self.is_degenerate(dim) {
            0.0
        } else {
            2.0 * (v - self.min[dim]) / (self.max[dim] - self.min[dim]) - 1.0
        }
    }

    pub fn denormalize_value(&self, dim: usize, v: f64) -> f64 {
        if self.is_degenerate(dim) {
            0.5 * (self.min[dim] + self.max[dim])
        } else {
            (v + 1.0) * 0.5 * (self.max[dim] - self.min[dim]) + self.min[dim]
        }
    }

    /// Normalizes a whole row-major buffer in place.
    pub fn normalize_slice(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(TRANSITION_DIM) {
            for d in 0..TRANSITION_DIM {
                row[d] = self.normalize_value(d, row[d]);
            }
        }
    }

    pub fn denormalize_slice(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(TRANSITION_DIM) {
            for d in 0..TRANSITION_DIM {
                row[d] = self.denormalize_value(d, row[d]);
            }
        }
    }
}

/// Affine map of every dimension onto `[-1, 1]`.
pub fn normalize(traj: &Trajectory, stats: &NormalizationStats) -> Result<Trajectory> {
    let mut data = traj.data.clone();
    stats.normalize_slice(&mut data);
    Trajectory::from_rows_normalized(traj.horizon, data)
}

/// Inverse of [`normalize`].
pub fn denormalize(traj: &Trajectory, stats: &NormalizationStats) -> Result<Trajectory> {
    let mut data = traj.data.clone();
    stats.denormalize_slice(&mut data);
    Trajectory::from_rows(traj.horizon, data)
}

/// Fixed-horizon trajectory collection in raw units plus its fitted stats.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormalizationStats,
    pub maze_id: MazeId,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        stats: NormalizationStats,
        maze_id: MazeId,
    ) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            let h = first.horizon;
            if trajectories.iter().any(|t| t.horizon != h) {
                return Err(Error::ShapeMismatch {
                    expected: format!("shared horizon {h}"),
                    got: "mixed horizons".into(),
                });
            }
        }
        Ok(Self { trajectories, stats, maze_id })
    }

    pub fn horizon(&self) -> Option<usize> {
        self.trajectories.first().map(|t| t.horizon)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Writes the fixed little-endian binary format:
/// magic `SBPLAN01`, u32 counts (n_traj, horizon, transition_dim), u32 maze
/// id, f64 stats block (min then max), f64 payload in row-major order.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(DATASET_MAGIC)?;
        let horizon = ds.horizon().unwrap_or(0);
        w.write_all(&(ds.trajectories.len() as u32).to_le_bytes())?;
        w.write_all(&(horizon as u32).to_le_bytes())?;
        w.write_all(&(TRANSITION_DIM as u32).to_le_bytes())?;
        w.write_all(&(ds.maze_id as u32).to_le_bytes())?;
        for v in ds.stats.min.iter().chain(ds.stats.max.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for traj in &ds.trajectories {
            for v in &traj.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::VersionMismatch);
    }

    let n_traj = read_u32(&mut r)? as usize;
    let horizon = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let maze_raw = read_u32(&mut r)?;
    if dim != TRANSITION_DIM {
        return Err(Error::ShapeDisagreement(format!(
            "transition_dim {dim}, expected {TRANSITION_DIM}"
        )));
    }
    if n_traj > 0 && horizon < 2 {
        return Err(Error::ShapeDisagreement(format!("horizon {horizon}")));
    }
    let maze_id = MazeId::from_u32(maze_raw)
        .ok_or_else(|| Error::ShapeDisagreement(format!("maze id {maze_raw}")))?;

    let mut min = [0.0; TRANSITION_DIM];
    let mut max = [0.0; TRANSITION_DIM];
    for v in min.iter_mut().chain(max.iter_mut()) {
        *v = read_f64(&mut r)?;
    }
    let stats = NormalizationStats::new(min, max)?;

    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut data = vec![0.0; horizon * TRANSITION_DIM];
        for v in data.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        trajectories.push(Trajectory::from_rows(horizon, data)?);
    }

    // Anything after the payload means the counts lied.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::ShapeDisagreement("trailing bytes after payload".into()));
    }

    Dataset::new(trajectories, stats, maze_id)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_stats() -> NormalizationStats {
        NormalizationStats::new(
            [-1.0, -1.0, 0.0, 0.0, -5.0, -5.0],
            [1.0, 1.0, 4.0, 6.0, 5.0, 5.0],
        )
        .unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, horizon: usize, stats: &NormalizationStats) -> Trajectory {
        let data: Vec<f64> = (0..horizon * TRANSITION_DIM)
            .map(|i| {
                let d = i % TRANSITION_DIM;
                rng.random_range(stats.min()[d]..stats.max()[d])
            })
            .collect();
        Trajectory::from_rows(horizon, data).unwrap()
    }

    #[test]
    fn normalize_maps_endpoints() {
        let stats = demo_stats();
        // min -> -1, midpoint -> 0 in every dimension
        for d in 0..TRANSITION_DIM {
            assert_eq!(stats.normalize_value(d, stats.min()[d]), -1.0);
            let mid = 0.5 * (stats.min()[d] + stats.max()[d]);
            assert!(stats.normalize_value(d, mid).abs() < 1e-15);
            assert_eq!(stats.denormalize_value(d, -1.0), stats.min()[d]);
            assert_eq!(stats.denormalize_value(d, 1.0), stats.max()[d]);
        }
    }

    #[test]
    fn round_trip_100_random_trajectories() {
        let stats = demo_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let traj = random_traj(&mut rng, 16, &stats);
            let back = denormalize(&normalize(&traj, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.data().iter().zip(traj.data().iter()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-12, "round trip off: {a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_dimension_maps_to_zero() {
        let stats = NormalizationStats::new(
            [0.0, 3.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 3.0 + 1e-9, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(stats.is_degenerate(1));
        assert!(!stats.is_degenerate(0));
        assert_eq!(stats.normalize_value(1, 3.0), 0.0);
        // denormalize returns the dimension's midpoint constant
        assert!((stats.denormalize_value(1, 0.7) - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite() {
        let mut data = vec![0.0; 2 * TRANSITION_DIM];
        data[7] = f64::NAN;
        match Trajectory::from_rows(2, data) {
            Err(Error::NonFinite { row: 1, dim: 1 }) => {}
            other => panic!("expected NonFinite {{1, 1}}, got {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip_bit_exact() {
        let stats = demo_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let trajs: Vec<_> = (0..3).map(|_| random_traj(&mut rng, 256, &stats)).collect();
        let ds = Dataset::new(trajs, stats, MazeId::Umaze).unwrap();

        let dir = std::env::temp_dir().join("sbplan_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.sbp");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.maze_id, MazeId::Umaze);
        assert_eq!(loaded.trajectories, ds.trajectories);
        assert_eq!(loaded.stats, ds.stats);

        // byte-compare oracle: saving the loaded dataset reproduces the file
        let path2 = dir.join("roundtrip2.sbp");
        save_dataset(&loaded, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_dataset_round_trip() {
        let ds = Dataset::new(Vec::new(), demo_stats(), MazeId::Open).unwrap();
        let dir = std::env::temp_dir().join("sbplan_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.sbp");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.stats, ds.stats);
    }

    #[test]
    fn corrupted_header_is_version_mismatch() {
        let ds = Dataset::new(Vec::new(), demo_stats(), MazeId::Open).unwrap();
        let dir = std::env::temp_dir().join("sbplan_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.sbp");
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::VersionMismatch)));
    }

    #[test]
    fn truncated_file_is_detected() {
        let stats = demo_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = Dataset::new(
            vec![random_traj(&mut rng, 8, &stats)],
            stats,
            MazeId::Medium,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("sbplan_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.sbp");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated)));
    }

    #[test]
    fn normalized_fit_data_stays_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stats0 = demo_stats();
        let trajs: Vec<_> = (0..5).map(|_| random_traj(&mut rng, 32, &stats0)).collect();
        let fitted = NormalizationStats::fit(trajs.iter()).unwrap();
        for traj in &trajs {
            let n = normalize(traj, &fitted).unwrap();
            assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
