//! Tractable Schrödinger-bridge engine: boundary-accumulated variances, the
//! analytic bridge posterior, bridge training loss, and closed-form
//! multi-step sampling that decouples evaluation count from diffusion steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{CountingDenoiser, Denoiser, DenoiserNetwork};
use crate::planner::Conditioning;

/// Per-step noise mass plus variances accumulated from either boundary, on
/// grid points `t = 0..=N`. `sigma2(t) + sigma2_bar(t)` is constant in `t`.
#[derive(Debug, Clone)]
pub struct BridgeSchedule {
    n_steps: usize,
    beta: Vec<f64>,
    sigma2: Vec<f64>,
    sigma2_bar: Vec<f64>,
}

impl BridgeSchedule {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Noise mass accumulated on `[0, t]`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    /// Noise mass accumulated on `[t, N]`.
    pub fn sigma2_bar(&self, t: usize) -> f64 {
        self.sigma2_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2[t].sqrt()
    }

    pub fn total_mass(&self) -> f64 {
        self.sigma2[self.n_steps]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.n_steps {
            return Err(Error::InvalidTimestep { t, lo: 0, hi: self.n_steps });
        }
        Ok(())
    }
}

/// Symmetric triangular per-step noise peaking mid-trajectory, with unit
/// total mass.
pub fn make_bridge_schedule(n: usize) -> Result<BridgeSchedule> {
    if n == 0 {
        return Err(Error::EmptySchedule);
    }
    let mut beta: Vec<f64> = (1..=n)
        .map(|s| (s as f64 - 0.5).min(n as f64 - s as f64 + 0.5))
        .collect();
    let mass: f64 = beta.iter().sum();
    for b in &mut beta {
        *b /= mass;
    }
    let mut sigma2 = Vec::with_capacity(n + 1);
    sigma2.push(0.0);
    let mut acc = 0.0;
    for &b in &beta {
        acc += b;
        sigma2.push(acc);
    }
    let total = sigma2[n];
    let sigma2_bar: Vec<f64> = sigma2.iter().map(|v| total - v).collect();
    Ok(BridgeSchedule { n_steps: n, beta, sigma2, sigma2_bar })
}

/// Posterior of the bridge pinned at both boundaries:
/// `mu_t = (sb2 x0 + s2 x1) / (s2 + sb2)`, `Sigma_t = s2 sb2 / (s2 + sb2)`.
pub fn bridge_posterior(
    x0: &[f64],
    x1: &[f64],
    t: usize,
    sched: &BridgeSchedule,
) -> Result<(Vec<f64>, f64)> {
    sched.check_t(t)?;
    if x0.len() != x1.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", x0.len()),
            got: format!("{}", x1.len()),
        });
    }
    let s2 = sched.sigma2(t);
    let sb2 = sched.sigma2_bar(t);
    let den = s2 + sb2;
    let (w0, w1) = (sb2 / den, s2 / den);
    let mu = x0.iter().zip(x1).map(|(a, b)| w0 * a + w1 * b).collect();
    Ok((mu, s2 * sb2 / den))
}

/// Draws `x_t ~ N(mu_t, Sigma_t I)` between a paired boundary sample.
pub fn bridge_sample_training(
    x0: &[f64],
    x1: &[f64],
    t: usize,
    rng: &mut ChaCha8Rng,
    sched: &BridgeSchedule,
) -> Result<Vec<f64>> {
    let (mut mu, var) = bridge_posterior(x0, x1, t, sched)?;
    let sd = var.sqrt();
    if sd > 0.0 {
        for v in &mut mu {
            let z: f64 = StandardNormal.sample(rng);
            *v += sd * z;
        }
    }
    Ok(mu)
}

fn masked_for(cond: Option<&Conditioning>, horizon: usize, dim: usize) -> Vec<bool> {
    let mut mask = vec![false; horizon * dim];
    if let Some(c) = cond {
        c.mark_mask(horizon, dim, &mut mask);
    }
    mask
}

/// Bridge training loss: per item a uniform `t` in `[1, N]`, a posterior
/// draw, and squared error against the scaled displacement target
/// `(x_t - x0) / sigma_t`, summed over non-conditioned entries and averaged
/// over the batch.
pub fn bridge_loss(
    net: &DenoiserNetwork,
    pairs: &[(Vec<f64>, Vec<f64>)],
    conds: Option<&[Conditioning]>,
    rng: &mut ChaCha8Rng,
    sched: &BridgeSchedule,
) -> Result<(f64, Vec<f64>)> {
    let mut ws = crate::net::GradWorkspace::new(pairs.len(), net.param_count());
    let mut grad = vec![0.0; net.param_count()];
    let loss = bridge_loss_into(net, pairs, conds, rng, sched, &mut ws, &mut grad)?;
    Ok((loss, grad))
}

/// As [`bridge_loss`] but reusing caller-owned gradient buffers.
pub fn bridge_loss_into(
    net: &DenoiserNetwork,
    pairs: &[(Vec<f64>, Vec<f64>)],
    conds: Option<&[Conditioning]>,
    rng: &mut ChaCha8Rng,
    sched: &BridgeSchedule,
    ws: &mut crate::net::GradWorkspace,
    grad: &mut [f64],
) -> Result<f64> {
    let horizon = net.horizon();
    let dim = net.dim();
    let b = pairs.len();
    ws.ensure(b, net.param_count());

    let mut items = Vec::with_capacity(b);
    for (x0, x1) in pairs {
        let t = rng.random_range(1..=sched.n_steps());
        let x_t = bridge_sample_training(x0, x1, t, rng, sched)?;
        items.push((x0, t, x_t));
    }

    let losses: Vec<f64> = items
        .par_iter()
        .zip(ws.bufs_mut().par_iter_mut())
        .enumerate()
        .map(|(i, ((x0, t, x_t), gbuf))| {
            let cond = conds.map(|c| &c[i]);
            let mask = masked_for(cond, horizon, dim);
            let sigma = sched.sigma(*t);
            let mut x_in = x_t.clone();
            // the net sees pinned entries exactly as it will during sampling
            if let Some(c) = cond {
                c.apply(horizon, dim, &mut x_in);
            }
            let pred = net.forward(&x_in, *t, sched.n_steps()).expect("shapes match");
            let mut loss = 0.0;
            let mut upstream = vec![0.0; x_t.len()];
            for j in 0..x_t.len() {
                if !mask[j] {
                    let target = (x_t[j] - x0[j]) / sigma;
                    let d = pred[j] - target;
                    loss += d * d;
                    upstream[j] = 2.0 * d / b as f64;
                }
            }
            net.backward_into(&x_in, *t, &upstream, gbuf).expect("shapes match");
            loss
        })
        .collect();

    ws.reduce_into(grad);
    Ok(losses.iter().sum::<f64>() / b as f64)
}

/// Loss only, usable with stub denoisers.
pub fn bridge_loss_value(
    net: &dyn Denoiser,
    pairs: &[(Vec<f64>, Vec<f64>)],
    conds: Option<&[Conditioning]>,
    rng: &mut ChaCha8Rng,
    sched: &BridgeSchedule,
) -> Result<f64> {
    let horizon = net.horizon();
    let dim = net.dim();
    let mut total = 0.0;
    for (i, (x0, x1)) in pairs.iter().enumerate() {
        let t = rng.random_range(1..=sched.n_steps());
        let x_t = bridge_sample_training(x0, x1, t, rng, sched)?;
        let cond = conds.map(|c| &c[i]);
        let mask = masked_for(cond, horizon, dim);
        let sigma = sched.sigma(t);
        let mut x_in = x_t.clone();
        if let Some(c) = cond {
            c.apply(horizon, dim, &mut x_in);
        }
        let pred = net.denoise(&x_in, t);
        for j in 0..x_t.len() {
            if !mask[j] {
                let target = (x_t[j] - x0[j]) / sigma;
                let d = pred[j] - target;
                total += d * d;
            }
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Nearest-integer grid of `nfe + 1` timesteps from `N` down to 0.
pub fn sample_grid(n_steps: usize, nfe: usize) -> Vec<usize> {
    (0..=nfe)
        .map(|i| ((n_steps * (nfe - i)) as f64 / nfe as f64).round() as usize)
        .collect()
}

/// One posterior jump `s -> t`: reconstructs `xhat0` from the prediction at
/// `s`, then draws the bridge posterior between `xhat0` and the current
/// iterate with variances re-accumulated on `[0, t]` and `[t, s]`.
pub fn bridge_jump(
    x: &mut [f64],
    eps_hat: &[f64],
    s: usize,
    t: usize,
    sched: &BridgeSchedule,
    mut noise: impl FnMut() -> f64,
) {
    let sigma_s = sched.sigma(s);
    let s2_s = sched.sigma2(s);
    let s2_t = sched.sigma2(t);
    let part_bar = s2_s - s2_t; // noise mass on [t, s]
    let var = s2_t * part_bar / s2_s;
    let sd = var.sqrt();
    let (w_hat, w_cur) = (part_bar / s2_s, s2_t / s2_s);
    for j in 0..x.len() {
        let xhat0 = x[j] - sigma_s * eps_hat[j];
        let mu = w_hat * xhat0 + w_cur * x[j];
        let z = if sd > 0.0 { noise() } else { 0.0 };
        x[j] = mu + sd * z;
    }
}

/// Closed-form multi-step sampling: from the prior boundary sample, each jump
/// reconstructs `xhat0 = x_s - sigma_s eps_hat`, then draws the bridge
/// posterior between `xhat0` and `x_s` with variances re-accumulated on
/// `[0, t]` and `[t, s]`. Conditioning is re-applied after every jump.
/// Returns the sample and the evaluation count (exactly `nfe`).
pub fn bridge_sample(
    net: &dyn Denoiser,
    sched: &BridgeSchedule,
    x1: &[f64],
    nfe: usize,
    cond: Option<&Conditioning>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    if nfe < 1 || nfe > sched.n_steps() {
        return Err(Error::InvalidNfe { nfe, n_steps: sched.n_steps() });
    }
    let horizon = net.horizon();
    let dim = net.dim();
    let counting = CountingDenoiser::new(net);
    let grid = sample_grid(sched.n_steps(), nfe);

    let mut x = x1.to_vec();
    if let Some(c) = cond {
        c.apply(horizon, dim, &mut x);
    }
    for w in grid.windows(2) {
        let (s, t) = (w[0], w[1]);
        let eps_hat = counting.denoise(&x, s);
        bridge_jump(&mut x, &eps_hat, s, t, sched, || StandardNormal.sample(rng));
        if let Some(c) = cond {
            c.apply(horizon, dim, &mut x);
            debug_assert!(c.holds(horizon, dim, &x));
        }
    }
    Ok((x, counting.count()))
}
