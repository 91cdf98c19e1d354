//! Layer primitives with hand-written forward and backward passes.
//!
//! Parameters live in one flat `f64` vector shared by the whole network;
//! each layer holds offsets into it. Backward passes *overwrite* their own
//! parameter-gradient segments (they are visited exactly once per sample),
//! so gradient buffers never need zeroing between steps. Features are
//! channel-major: `data[c * len + h]`.

/// Channel-major feature map.
#[derive(Debug, Clone)]
pub struct Feat {
    pub c: usize,
    pub l: usize,
    pub d: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, l: usize) -> Self {
        Feat { c, l, d: vec![0.0; c * l] }
    }

    pub fn ch(&self, i: usize) -> &[f64] {
        &self.d[i * self.l..(i + 1) * self.l]
    }

    pub fn ch_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.d[i * self.l..(i + 1) * self.l]
    }

    /// Row-major `horizon x dim` -> channel-major.
    pub fn from_rows(rows: &[f64], horizon: usize, dim: usize) -> Self {
        let mut f = Feat::zeros(dim, horizon);
        for h in 0..horizon {
            for c in 0..dim {
                f.d[c * horizon + h] = rows[h * dim + c];
            }
        }
        f
    }

    /// Channel-major -> row-major `horizon x dim`.
    pub fn to_rows(&self) -> Vec<f64> {
        let mut rows = vec![0.0; self.c * self.l];
        for h in 0..self.l {
            for c in 0..self.c {
                rows[h * self.c + c] = self.d[c * self.l + h];
            }
        }
        rows
    }

    pub fn concat(a: &Feat, b: &Feat) -> Feat {
        debug_assert_eq!(a.l, b.l);
        let mut d = Vec::with_capacity((a.c + b.c) * a.l);
        d.extend_from_slice(&a.d);
        d.extend_from_slice(&b.d);
        Feat { c: a.c + b.c, l: a.l, d }
    }

    pub fn split(&self, c_first: usize) -> (Feat, Feat) {
        let at = c_first * self.l;
        (
            Feat { c: c_first, l: self.l, d: self.d[..at].to_vec() },
            Feat { c: self.c - c_first, l: self.l, d: self.d[at..].to_vec() },
        )
    }
}

/// Bump allocator for offsets into the flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn alloc(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

// ---------------------------------------------------------------------------
// Conv1d, kernel 5, stride 1, same padding
// ---------------------------------------------------------------------------

/// Temporal convolution, kernel 5, same output length. Weight layout
/// `[c_out][c_in][5]`, then bias `[c_out]`.
#[derive(Debug, Clone)]
pub struct Conv5 {
    pub c_in: usize,
    pub c_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

pub const K5: usize = 5;
const PAD5: usize = 2;

/// Fills `col` with the zero-padded im2col expansion of `x` for a kernel-5
/// same convolution: `col[(ci K5 + j) l + h] = x[ci][h + j - 2]`.
fn im2col_k5(x: &Feat, col: &mut Vec<f64>) {
    let l = x.l;
    col.clear();
    col.resize(x.c * K5 * l, 0.0);
    for ci in 0..x.c {
        let xr = x.ch(ci);
        for j in 0..K5 {
            let row = &mut col[(ci * K5 + j) * l..(ci * K5 + j + 1) * l];
            let shift = j as isize - PAD5 as isize;
            let (dst_lo, src_lo) = if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
            let n = l - dst_lo.max(src_lo);
            row[dst_lo..dst_lo + n].copy_from_slice(&xr[src_lo..src_lo + n]);
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// `c = alpha a b + beta c` with row-major views given as (rows, cols).
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv5 {
    pub fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize) -> Self {
        let w_off = alloc.alloc(c_out * c_in * K5);
        let b_off = alloc.alloc(c_out);
        Conv5 { c_in, c_out, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * K5
    }

    pub fn forward(&self, p: &[f64], x: &Feat) -> Feat {
        debug_assert_eq!(x.c, self.c_in);
        let l = x.l;
        let cik = self.c_in * K5;
        let mut out = Feat::zeros(self.c_out, l);
        for co in 0..self.c_out {
            out.ch_mut(co).fill(p[self.b_off + co]);
        }
        SCRATCH.with(|s| {
            let col = &mut s.borrow_mut().0;
            im2col_k5(x, col);
            let w = &p[self.w_off..self.w_off + self.c_out * cik];
            dgemm(self.c_out, cik, l, 1.0, w, cik as isize, 1, col, l as isize, 1, 1.0, &mut out.d);
        });
        out
    }

    /// Overwrites this layer's weight/bias gradient segments in `gp` and
    /// returns the input gradient.
    pub fn backward(&self, p: &[f64], x: &Feat, gout: &Feat, gp: &mut [f64]) -> Feat {
        let l = x.l;
        let cik = self.c_in * K5;
        let cok = self.c_out * K5;
        let mut gin = Feat::zeros(self.c_in, l);

        SCRATCH.with(|s| {
            let mut scratch = s.borrow_mut();
            let (col, wflip) = &mut *scratch;

            // weight gradient: gout (co x l) times im2col(x)^T (l x cik)
            im2col_k5(x, col);
            let gw = &mut gp[self.w_off..self.w_off + self.c_out * cik];
            dgemm(self.c_out, l, cik, 1.0, &gout.d, l as isize, 1, col, 1, l as isize, 0.0, gw);

            // input gradient: transposed, kernel-flipped weights against the
            // im2col expansion of gout
            wflip.clear();
            wflip.resize(self.c_in * cok, 0.0);
            for co in 0..self.c_out {
                for ci in 0..self.c_in {
                    for j in 0..K5 {
                        wflip[ci * cok + co * K5 + j] =
                            p[self.w_off + (co * self.c_in + ci) * K5 + (K5 - 1 - j)];
                    }
                }
            }
            im2col_k5(gout, col);
            dgemm(self.c_in, cok, l, 1.0, wflip, cok as isize, 1, col, l as isize, 1, 0.0, &mut gin.d);
        });

        for co in 0..self.c_out {
            gp[self.b_off + co] = gout.ch(co).iter().sum();
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Pointwise conv (kernel 1)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1 {
    pub c_in: usize,
    pub c_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv1 {
    pub fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize) -> Self {
        let w_off = alloc.alloc(c_out * c_in);
        let b_off = alloc.alloc(c_out);
        Conv1 { c_in, c_out, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in
    }

    pub fn forward(&self, p: &[f64], x: &Feat) -> Feat {
        let l = x.l;
        let mut out = Feat::zeros(self.c_out, l);
        for co in 0..self.c_out {
            out.ch_mut(co).fill(p[self.b_off + co]);
        }
        let w = &p[self.w_off..self.w_off + self.c_out * self.c_in];
        dgemm(self.c_out, self.c_in, l, 1.0, w, self.c_in as isize, 1, &x.d, l as isize, 1, 1.0, &mut out.d);
        out
    }

    pub fn backward(&self, p: &[f64], x: &Feat, gout: &Feat, gp: &mut [f64]) -> Feat {
        let l = x.l;
        let mut gin = Feat::zeros(self.c_in, l);
        let w = &p[self.w_off..self.w_off + self.c_out * self.c_in];
        // gin = w^T gout
        dgemm(self.c_in, self.c_out, l, 1.0, w, 1, self.c_in as isize, &gout.d, l as isize, 1, 0.0, &mut gin.d);
        // gw = gout x^T
        let gw = &mut gp[self.w_off..self.w_off + self.c_out * self.c_in];
        dgemm(self.c_out, l, self.c_in, 1.0, &gout.d, l as isize, 1, &x.d, 1, l as isize, 0.0, gw);
        for co in 0..self.c_out {
            gp[self.b_off + co] = gout.ch(co).iter().sum();
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Strided downsampling conv: kernel 3, stride 2, pad 1 (halves the length)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DownConv {
    pub c: usize,
    pub w_off: usize,
    pub b_off: usize,
}

const K3: usize = 3;

impl DownConv {
    pub fn new(alloc: &mut ParamAlloc, c: usize) -> Self {
        let w_off = alloc.alloc(c * c * K3);
        let b_off = alloc.alloc(c);
        DownConv { c, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        self.c * K3
    }

    pub fn forward(&self, p: &[f64], x: &Feat) -> Feat {
        debug_assert_eq!(x.l % 2, 0);
        let l_out = x.l / 2;
        let mut out = Feat::zeros(self.c, l_out);
        for co in 0..self.c {
            let or = out.ch_mut(co);
            or.fill(p[self.b_off + co]);
            for ci in 0..self.c {
                let xr = x.ch(ci);
                let w = &p[self.w_off + (co * self.c + ci) * K3..][..K3];
                // ho = 0 misses the i = -1 tap
                or[0] += w[1] * xr[0] + w[2] * xr[1];
                for ho in 1..l_out {
                    let i = 2 * ho;
                    or[ho] += w[0] * xr[i - 1] + w[1] * xr[i] + w[2] * xr[i + 1];
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &[f64], x: &Feat, gout: &Feat, gp: &mut [f64]) -> Feat {
        let l_out = gout.l;
        let mut gin = Feat::zeros(self.c, x.l);
        for ci in 0..self.c {
            let gr = gin.ch_mut(ci);
            for co in 0..self.c {
                let gor = gout.ch(co);
                let w = &p[self.w_off + (co * self.c + ci) * K3..][..K3];
                gr[0] += w[1] * gor[0];
                gr[1] += w[2] * gor[0];
                for ho in 1..l_out {
                    let g = gor[ho];
                    let i = 2 * ho;
                    gr[i - 1] += w[0] * g;
                    gr[i] += w[1] * g;
                    gr[i + 1] += w[2] * g;
                }
            }
        }
        for co in 0..self.c {
            let gor = gout.ch(co);
            for ci in 0..self.c {
                let xr = x.ch(ci);
                let mut acc = [0.0; K3];
                acc[1] += gor[0] * xr[0];
                acc[2] += gor[0] * xr[1];
                for ho in 1..l_out {
                    let g = gor[ho];
                    let i = 2 * ho;
                    acc[0] += g * xr[i - 1];
                    acc[1] += g * xr[i];
                    acc[2] += g * xr[i + 1];
                }
                let base = self.w_off + (co * self.c + ci) * K3;
                gp[base..base + K3].copy_from_slice(&acc);
            }
            gp[self.b_off + co] = gout.ch(co).iter().sum();
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Transposed conv: kernel 4, stride 2, pad 1 (doubles the length)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UpConv {
    pub c_in: usize,
    pub c_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

const K4: usize = 4;

impl UpConv {
    pub fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize) -> Self {
        let w_off = alloc.alloc(c_out * c_in * K4);
        let b_off = alloc.alloc(c_out);
        UpConv { c_in, c_out, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        // per output position exactly two taps contribute
        self.c_in * 2
    }

    /// out[2i + j - 1] += w[j] x[i]
    pub fn forward(&self, p: &[f64], x: &Feat) -> Feat {
        let l = x.l;
        let l_out = 2 * l;
        let mut out = Feat::zeros(self.c_out, l_out);
        for co in 0..self.c_out {
            let or = out.ch_mut(co);
            or.fill(p[self.b_off + co]);
            for ci in 0..self.c_in {
                let xr = x.ch(ci);
                let w = &p[self.w_off + (co * self.c_in + ci) * K4..][..K4];
                for i in 1..l {
                    or[2 * i - 1] += w[0] * xr[i];
                }
                for i in 0..l {
                    or[2 * i] += w[1] * xr[i];
                    or[2 * i + 1] += w[2] * xr[i];
                }
                for i in 0..l - 1 {
                    or[2 * i + 2] += w[3] * xr[i];
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &[f64], x: &Feat, gout: &Feat, gp: &mut [f64]) -> Feat {
        let l = x.l;
        let mut gin = Feat::zeros(self.c_in, l);
        for ci in 0..self.c_in {
            let gr = gin.ch_mut(ci);
            for co in 0..self.c_out {
                let gor = gout.ch(co);
                let w = &p[self.w_off + (co * self.c_in + ci) * K4..][..K4];
                for i in 0..l {
                    let mut acc = w[1] * gor[2 * i] + w[2] * gor[2 * i + 1];
                    if i > 0 {
                        acc += w[0] * gor[2 * i - 1];
                    }
                    if i + 1 < l {
                        acc += w[3] * gor[2 * i + 2];
                    }
                    gr[i] += acc;
                }
            }
        }
        for co in 0..self.c_out {
            let gor = gout.ch(co);
            for ci in 0..self.c_in {
                let xr = x.ch(ci);
                let mut acc = [0.0; K4];
                for i in 1..l {
                    acc[0] += xr[i] * gor[2 * i - 1];
                }
                for i in 0..l {
                    acc[1] += xr[i] * gor[2 * i];
                    acc[2] += xr[i] * gor[2 * i + 1];
                }
                for i in 0..l - 1 {
                    acc[3] += xr[i] * gor[2 * i + 2];
                }
                let base = self.w_off + (co * self.c_in + ci) * K4;
                gp[base..base + K4].copy_from_slice(&acc);
            }
            gp[self.b_off + co] = gout.ch(co).iter().sum();
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

pub const GN_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma_off: usize,
    pub beta_off: usize,
}

#[derive(Debug, Clone)]
pub struct GnCache {
    pub xhat: Feat,
    pub inv: Vec<f64>,
}

impl GroupNorm {
    pub fn new(alloc: &mut ParamAlloc, c: usize) -> Self {
        debug_assert_eq!(c % GN_GROUPS, 0);
        let gamma_off = alloc.alloc(c);
        let beta_off = alloc.alloc(c);
        GroupNorm { c, groups: GN_GROUPS, gamma_off, beta_off }
    }

    pub fn init(&self, p: &mut [f64]) {
        p[self.gamma_off..self.gamma_off + self.c].fill(1.0);
        p[self.beta_off..self.beta_off + self.c].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &Feat) -> (Feat, GnCache) {
        let l = x.l;
        let per = self.c / self.groups;
        let m = (per * l) as f64;
        let mut xhat = Feat::zeros(self.c, l);
        let mut inv = vec![0.0; self.groups];
        let mut out = Feat::zeros(self.c, l);
        for g in 0..self.groups {
            let span = g * per * l..(g + 1) * per * l;
            let mut mean = 0.0;
            for &v in &x.d[span.clone()] {
                mean += v;
            }
            mean /= m;
            let mut var = 0.0;
            for &v in &x.d[span.clone()] {
                let d = v - mean;
                var += d * d;
            }
            var /= m;
            let iv = 1.0 / (var + GN_EPS).sqrt();
            inv[g] = iv;
            for idx in span {
                xhat.d[idx] = (x.d[idx] - mean) * iv;
            }
        }
        for c in 0..self.c {
            let gamma = p[self.gamma_off + c];
            let beta = p[self.beta_off + c];
            let xh = xhat.ch(c);
            let or = out.ch_mut(c);
            for h in 0..l {
                or[h] = gamma * xh[h] + beta;
            }
        }
        (out, GnCache { xhat, inv })
    }

    pub fn backward(&self, p: &[f64], cache: &GnCache, gout: &Feat, gp: &mut [f64]) -> Feat {
        let l = gout.l;
        let per = self.c / self.groups;
        let m = (per * l) as f64;
        let mut gin = Feat::zeros(self.c, l);

        for c in 0..self.c {
            let gor = gout.ch(c);
            let xh = cache.xhat.ch(c);
            let mut gb = 0.0;
            let mut gg = 0.0;
            for h in 0..l {
                gb += gor[h];
                gg += gor[h] * xh[h];
            }
            gp[self.beta_off + c] = gb;
            gp[self.gamma_off + c] = gg;
        }

        for g in 0..self.groups {
            // ghat = gout * gamma, reduced over the group
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for cc in 0..per {
                let c = g * per + cc;
                let gamma = p[self.gamma_off + c];
                let gor = gout.ch(c);
                let xh = cache.xhat.ch(c);
                for h in 0..l {
                    let gh = gor[h] * gamma;
                    sum_g += gh;
                    sum_gx += gh * xh[h];
                }
            }
            let m1 = sum_g / m;
            let m2 = sum_gx / m;
            let iv = cache.inv[g];
            for cc in 0..per {
                let c = g * per + cc;
                let gamma = p[self.gamma_off + c];
                let gor = gout.ch(c);
                let xh = cache.xhat.ch(c);
                let gr = gin.ch_mut(c);
                for h in 0..l {
                    let gh = gor[h] * gamma;
                    gr[h] = iv * (gh - m1 - xh[h] * m2);
                }
            }
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Mish activation
// ---------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * tanh(softplus(x))`; returns the output and caches `tanh(softplus(x))`.
pub fn mish_forward(x: &Feat) -> (Feat, Vec<f64>) {
    let mut out = Feat::zeros(x.c, x.l);
    let mut tsp = vec![0.0; x.d.len()];
    for i in 0..x.d.len() {
        let t = softplus(x.d[i]).tanh();
        tsp[i] = t;
        out.d[i] = x.d[i] * t;
    }
    (out, tsp)
}

pub fn mish_backward(x: &Feat, tsp: &[f64], gout: &Feat) -> Feat {
    let mut gin = Feat::zeros(x.c, x.l);
    for i in 0..x.d.len() {
        let t = tsp[i];
        let d = t + x.d[i] * (1.0 - t * t) * sigmoid(x.d[i]);
        gin.d[i] = gout.d[i] * d;
    }
    gin
}

// ---------------------------------------------------------------------------
// Dense layer on plain vectors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, n_in: usize, n_out: usize) -> Self {
        let w_off = alloc.alloc(n_out * n_in);
        let b_off = alloc.alloc(n_out);
        Dense { n_in, n_out, w_off, b_off }
    }

    pub fn fan_in(&self) -> usize {
        self.n_in
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out];
        for o in 0..self.n_out {
            let w = &p[self.w_off + o * self.n_in..][..self.n_in];
            let mut acc = p[self.b_off + o];
            for i in 0..self.n_in {
                acc += w[i] * x[i];
            }
            out[o] = acc;
        }
        out
    }

    pub fn backward(&self, p: &[f64], x: &[f64], gout: &[f64], gp: &mut [f64]) -> Vec<f64> {
        let mut gin = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let g = gout[o];
            let w = &p[self.w_off + o * self.n_in..][..self.n_in];
            let gw = &mut gp[self.w_off + o * self.n_in..][..self.n_in];
            for i in 0..self.n_in {
                gin[i] += w[i] * g;
                gw[i] = x[i] * g;
            }
            gp[self.b_off + o] = g;
        }
        gin
    }
}

/// Sinusoidal timestep features, half sine / half cosine.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
