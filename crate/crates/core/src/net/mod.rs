//! Time-conditioned temporal-convolution denoiser and the shallow prior
//! network, both with exact analytic gradients.

pub mod adam;
pub mod layers;
pub mod prior;
pub mod unet;

pub use adam::TrainerState;
pub use prior::PriorNetwork;
pub use unet::DenoiserNetwork;

/// Anything that can predict noise for an iterate at a timestep. Samplers are
/// written against this so tests can plug in stubs and counters.
pub trait Denoiser {
    fn horizon(&self) -> usize;
    fn dim(&self) -> usize;
    fn denoise(&self, x: &[f64], t: usize) -> Vec<f64>;
}

/// Reusable per-item gradient buffers for batched losses. Backward passes
/// overwrite every slot, so buffers never need zeroing between steps.
pub struct GradWorkspace {
    bufs: Vec<Vec<f64>>,
}

impl GradWorkspace {
    pub fn new(batch: usize, n_params: usize) -> Self {
        GradWorkspace { bufs: vec![vec![0.0; n_params]; batch] }
    }

    pub fn ensure(&mut self, batch: usize, n_params: usize) {
        if self.bufs.len() != batch || self.bufs.first().map_or(true, |b| b.len() != n_params) {
            self.bufs = vec![vec![0.0; n_params]; batch];
        }
    }

    pub fn bufs_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.bufs
    }

    /// Sums the per-item buffers into `grad` in index order.
    pub fn reduce_into(&self, grad: &mut [f64]) {
        grad.copy_from_slice(&self.bufs[0]);
        for buf in &self.bufs[1..] {
            for (acc, v) in grad.iter_mut().zip(buf) {
                *acc += v;
            }
        }
    }
}

/// Wrapper that counts network evaluations.
pub struct CountingDenoiser<'a, D: Denoiser + ?Sized> {
    inner: &'a D,
    count: std::cell::Cell<usize>,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, count: std::cell::Cell::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.get()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.count.set(self.count.get() + 1);
        self.inner.denoise(x, t)
    }
}
