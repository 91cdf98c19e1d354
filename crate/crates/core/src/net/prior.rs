//! Shallow learned-prior network: two affine layers around a leaky
//! rectifier, mapping trajectory endpoints to a whole trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::layers::{Dense, ParamAlloc};
use crate::net::unet::{fnv1a, read_exact, read_u32, read_u64};

pub const LEAKY_SLOPE: f64 = 0.1;

const PRIOR_MAGIC: &[u8; 8] = b"SBPRI001";

/// `affine(2 s_dim -> horizon dim)`, LeakyReLU(0.1),
/// `affine(horizon dim -> horizon dim)`. Input is the concatenated
/// normalized (start state, goal state); output reshapes to a trajectory.
pub struct PriorNetwork {
    horizon: usize,
    dim: usize,
    s_dim: usize,
    params: Vec<f64>,
    l1: Dense,
    l2: Dense,
}

impl PriorNetwork {
    pub fn new(horizon: usize, dim: usize, s_dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let flat = horizon * dim;
        let mut alloc = ParamAlloc::default();
        let l1 = Dense::new(&mut alloc, 2 * s_dim, flat);
        let l2 = Dense::new(&mut alloc, flat, flat);
        let mut params = vec![0.0; alloc.len()];

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, fan_in) in [(&l1, 2 * s_dim), (&l2, flat)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[layer.w_off..layer.w_off + layer.n_out * layer.n_in] {
                *v = rng.random_range(-bound..bound);
            }
            for v in &mut params[layer.b_off..layer.b_off + layer.n_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        PriorNetwork { horizon, dim, s_dim, params, l1, l2 }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_vec(&self, start_state: &[f64], goal_state: &[f64]) -> Vec<f64> {
        debug_assert_eq!(start_state.len(), self.s_dim);
        debug_assert_eq!(goal_state.len(), self.s_dim);
        let mut x = Vec::with_capacity(2 * self.s_dim);
        x.extend_from_slice(start_state);
        x.extend_from_slice(goal_state);
        x
    }

    /// Deterministic trajectory prediction, row-major `horizon x dim`.
    pub fn forward(&self, start_state: &[f64], goal_state: &[f64]) -> Vec<f64> {
        let x = self.input_vec(start_state, goal_state);
        let h = self.l1.forward(&self.params, &x);
        let a: Vec<f64> = h.iter().map(|&v| leaky(v)).collect();
        self.l2.forward(&self.params, &a)
    }

    /// Gradient of `<forward, upstream>` with respect to the parameters.
    pub fn backward(
        &self,
        start_state: &[f64],
        goal_state: &[f64],
        upstream: &[f64],
    ) -> Vec<f64> {
        let mut gp = vec![0.0; self.params.len()];
        self.backward_into(start_state, goal_state, upstream, &mut gp);
        gp
    }

    pub fn backward_into(
        &self,
        start_state: &[f64],
        goal_state: &[f64],
        upstream: &[f64],
        gp: &mut [f64],
    ) {
        let x = self.input_vec(start_state, goal_state);
        let h = self.l1.forward(&self.params, &x);
        let a: Vec<f64> = h.iter().map(|&v| leaky(v)).collect();
        let g_a = self.l2.backward(&self.params, &a, upstream, gp);
        let g_h: Vec<f64> =
            g_a.iter().zip(&h).map(|(&g, &v)| if v > 0.0 { g } else { g * LEAKY_SLOPE }).collect();
        self.l1.backward(&self.params, &x, &g_h, gp);
    }

    fn arch_hash(&self) -> u64 {
        fnv1a(format!("prior1:h{}:d{}:s{}", self.horizon, self.dim, self.s_dim).as_bytes())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PRIOR_MAGIC)?;
        w.write_all(&self.arch_hash().to_le_bytes())?;
        w.write_all(&(self.horizon as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.s_dim as u32).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != PRIOR_MAGIC {
            return Err(Error::VersionMismatch);
        }
        let hash = read_u64(r)?;
        let horizon = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let s_dim = read_u32(r)? as usize;
        let n_params = read_u64(r)? as usize;
        let mut net = PriorNetwork::new(horizon, dim, s_dim, 0);
        if net.arch_hash() != hash || net.params.len() != n_params {
            return Err(Error::CheckpointMismatch("prior network header".into()));
        }
        for v in &mut net.params {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}
