//! Encoder-decoder over the time axis: kernel-5 temporal convolutions, two
//! stride-2 downsampling levels at widths (32, 64, 128), residual blocks with
//! 8-group normalization and Mish, skip connections, and a sinusoidal
//! timestep embedding fed through a two-layer perceptron and added per block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::layers::{
    mish_backward, mish_forward, sinusoidal_embedding, Conv1, Conv5, Dense, DownConv, Feat,
    GnCache, GroupNorm, ParamAlloc, UpConv,
};
use crate::net::Denoiser;

pub const EMB_DIM: usize = 32;
const EMB_HIDDEN: usize = 128;
pub const WIDTHS: [usize; 3] = [32, 64, 128];

const CHECKPOINT_MAGIC: &[u8; 8] = b"SBNET001";

struct ResBlock {
    conv1: Conv5,
    gn1: GroupNorm,
    time_proj: Dense,
    conv2: Conv5,
    gn2: GroupNorm,
    shortcut: Option<Conv1>,
}

struct ResTrace {
    x: Feat,
    g1: Feat,
    tsp1: Vec<f64>,
    gn1_cache: GnCache,
    a1b: Feat,
    g2: Feat,
    tsp2: Vec<f64>,
    gn2_cache: GnCache,
}

impl ResBlock {
    fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize) -> Self {
        ResBlock {
            conv1: Conv5::new(alloc, c_in, c_out),
            gn1: GroupNorm::new(alloc, c_out),
            time_proj: Dense::new(alloc, EMB_DIM, c_out),
            conv2: Conv5::new(alloc, c_out, c_out),
            gn2: GroupNorm::new(alloc, c_out),
            shortcut: (c_in != c_out).then(|| Conv1::new(alloc, c_in, c_out)),
        }
    }

    fn forward(&self, p: &[f64], x: &Feat, emb: &[f64]) -> (Feat, ResTrace) {
        let h1 = self.conv1.forward(p, x);
        let (g1, gn1_cache) = self.gn1.forward(p, &h1);
        let (a1, tsp1) = mish_forward(&g1);
        let tp = self.time_proj.forward(p, emb);
        let mut a1b = a1;
        for c in 0..a1b.c {
            let bias = tp[c];
            for v in a1b.ch_mut(c) {
                *v += bias;
            }
        }
        let h2 = self.conv2.forward(p, &a1b);
        let (g2, gn2_cache) = self.gn2.forward(p, &h2);
        let (a2, tsp2) = mish_forward(&g2);

        let mut out = a2;
        match &self.shortcut {
            Some(sc) => {
                let s = sc.forward(p, x);
                for (o, v) in out.d.iter_mut().zip(&s.d) {
                    *o += v;
                }
            }
            None => {
                for (o, v) in out.d.iter_mut().zip(&x.d) {
                    *o += v;
                }
            }
        }
        let trace =
            ResTrace { x: x.clone(), g1, tsp1, gn1_cache, a1b, g2, tsp2, gn2_cache };
        (out, trace)
    }

    /// Returns (input gradient, embedding gradient contribution).
    fn backward(
        &self,
        p: &[f64],
        trace: &ResTrace,
        emb: &[f64],
        gout: &Feat,
        gp: &mut [f64],
    ) -> (Feat, Vec<f64>) {
        let g_g2 = mish_backward(&trace.g2, &trace.tsp2, gout);
        let g_h2 = self.gn2.backward(p, &trace.gn2_cache, &g_g2, gp);
        let g_a1b = self.conv2.backward(p, &trace.a1b, &g_h2, gp);

        let g_tp: Vec<f64> = (0..g_a1b.c).map(|c| g_a1b.ch(c).iter().sum()).collect();
        let gemb = self.time_proj.backward(p, emb, &g_tp, gp);

        let g_g1 = mish_backward(&trace.g1, &trace.tsp1, &g_a1b);
        let g_h1 = self.gn1.backward(p, &trace.gn1_cache, &g_g1, gp);
        let mut gin = self.conv1.backward(p, &trace.x, &g_h1, gp);

        match &self.shortcut {
            Some(sc) => {
                let gs = sc.backward(p, &trace.x, gout, gp);
                for (a, b) in gin.d.iter_mut().zip(&gs.d) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in gin.d.iter_mut().zip(&gout.d) {
                    *a += b;
                }
            }
        }
        (gin, gemb)
    }
}

struct UnetArch {
    time_l1: Dense,
    time_l2: Dense,
    enc0: ResBlock,
    down0: DownConv,
    enc1: ResBlock,
    down1: DownConv,
    mid0: ResBlock,
    mid1: ResBlock,
    up1: UpConv,
    dec1: ResBlock,
    up0: UpConv,
    dec0: ResBlock,
    fin_conv: Conv5,
    fin_gn: GroupNorm,
    fin_out: Conv1,
    n_params: usize,
}

impl UnetArch {
    fn build(dim: usize) -> Self {
        let [w0, w1, w2] = WIDTHS;
        let mut alloc = ParamAlloc::default();
        let time_l1 = Dense::new(&mut alloc, EMB_DIM, EMB_HIDDEN);
        let time_l2 = Dense::new(&mut alloc, EMB_HIDDEN, EMB_DIM);
        let enc0 = ResBlock::new(&mut alloc, dim, w0);
        let down0 = DownConv::new(&mut alloc, w0);
        let enc1 = ResBlock::new(&mut alloc, w0, w1);
        let down1 = DownConv::new(&mut alloc, w1);
        let mid0 = ResBlock::new(&mut alloc, w1, w2);
        let mid1 = ResBlock::new(&mut alloc, w2, w2);
        let up1 = UpConv::new(&mut alloc, w2, w1);
        let dec1 = ResBlock::new(&mut alloc, w1 + w1, w1);
        let up0 = UpConv::new(&mut alloc, w1, w0);
        let dec0 = ResBlock::new(&mut alloc, w0 + w0, w0);
        let fin_conv = Conv5::new(&mut alloc, w0, w0);
        let fin_gn = GroupNorm::new(&mut alloc, w0);
        let fin_out = Conv1::new(&mut alloc, w0, dim);
        let n_params = alloc.len();
        UnetArch {
            time_l1,
            time_l2,
            enc0,
            down0,
            enc1,
            down1,
            mid0,
            mid1,
            up1,
            dec1,
            up0,
            dec0,
            fin_conv,
            fin_gn,
            fin_out,
            n_params,
        }
    }
}

struct UnetTrace {
    sincos: Vec<f64>,
    e_pre: Vec<f64>,
    e_tsp: Vec<f64>,
    e_act: Vec<f64>,
    emb: Vec<f64>,
    enc0: ResTrace,
    enc0_out: Feat,
    enc1: ResTrace,
    enc1_out: Feat,
    mid0: ResTrace,
    mid1: ResTrace,
    mid1_out: Feat,
    dec1: ResTrace,
    dec1_out: Feat,
    dec0: ResTrace,
    fin_in: Feat,
    fin_g: Feat,
    fin_tsp: Vec<f64>,
    fin_gn_cache: GnCache,
    fin_a: Feat,
}

/// The shared noise-prediction network. Input and output are row-major
/// `horizon x dim` buffers on the normalized scale.
pub struct DenoiserNetwork {
    horizon: usize,
    dim: usize,
    params: Vec<f64>,
    arch: UnetArch,
}

impl DenoiserNetwork {
    pub fn new(horizon: usize, dim: usize, seed: u64) -> Result<Self> {
        if horizon % 4 != 0 {
            return Err(Error::HorizonNotDivisible(horizon));
        }
        let arch = UnetArch::build(dim);
        let mut net =
            DenoiserNetwork { horizon, dim, params: vec![0.0; arch.n_params], arch };
        net.init(seed);
        Ok(net)
    }

    /// Uniform Kaiming-style init, deterministic in the seed.
    fn init(&mut self, seed: u64) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut self.params;
        let a = &self.arch;

        fn fill_uniform(rng: &mut ChaCha8Rng, p: &mut [f64], off: usize, n: usize, fan_in: usize) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[off..off + n] {
                *v = rng.random_range(-bound..bound);
            }
        }
        fn init_conv5(rng: &mut ChaCha8Rng, p: &mut [f64], c: &Conv5) {
            fill_uniform(rng, p, c.w_off, c.c_out * c.c_in * 5, c.fan_in());
            fill_uniform(rng, p, c.b_off, c.c_out, c.fan_in());
        }
        fn init_res(rng: &mut ChaCha8Rng, p: &mut [f64], r: &ResBlock) {
            init_conv5(rng, p, &r.conv1);
            r.gn1.init(p);
            fill_uniform(rng, p, r.time_proj.w_off, r.time_proj.n_out * r.time_proj.n_in, r.time_proj.fan_in());
            fill_uniform(rng, p, r.time_proj.b_off, r.time_proj.n_out, r.time_proj.fan_in());
            init_conv5(rng, p, &r.conv2);
            r.gn2.init(p);
            if let Some(sc) = &r.shortcut {
                fill_uniform(rng, p, sc.w_off, sc.c_out * sc.c_in, sc.fan_in());
                fill_uniform(rng, p, sc.b_off, sc.c_out, sc.fan_in());
            }
        }

        fill_uniform(&mut rng, p, a.time_l1.w_off, a.time_l1.n_out * a.time_l1.n_in, a.time_l1.fan_in());
        fill_uniform(&mut rng, p, a.time_l1.b_off, a.time_l1.n_out, a.time_l1.fan_in());
        fill_uniform(&mut rng, p, a.time_l2.w_off, a.time_l2.n_out * a.time_l2.n_in, a.time_l2.fan_in());
        fill_uniform(&mut rng, p, a.time_l2.b_off, a.time_l2.n_out, a.time_l2.fan_in());
        init_res(&mut rng, p, &a.enc0);
        fill_uniform(&mut rng, p, a.down0.w_off, a.down0.c * a.down0.c * 3, a.down0.fan_in());
        fill_uniform(&mut rng, p, a.down0.b_off, a.down0.c, a.down0.fan_in());
        init_res(&mut rng, p, &a.enc1);
        fill_uniform(&mut rng, p, a.down1.w_off, a.down1.c * a.down1.c * 3, a.down1.fan_in());
        fill_uniform(&mut rng, p, a.down1.b_off, a.down1.c, a.down1.fan_in());
        init_res(&mut rng, p, &a.mid0);
        init_res(&mut rng, p, &a.mid1);
        fill_uniform(&mut rng, p, a.up1.w_off, a.up1.c_out * a.up1.c_in * 4, a.up1.fan_in());
        fill_uniform(&mut rng, p, a.up1.b_off, a.up1.c_out, a.up1.fan_in());
        init_res(&mut rng, p, &a.dec1);
        fill_uniform(&mut rng, p, a.up0.w_off, a.up0.c_out * a.up0.c_in * 4, a.up0.fan_in());
        fill_uniform(&mut rng, p, a.up0.b_off, a.up0.c_out, a.up0.fan_in());
        init_res(&mut rng, p, &a.dec0);
        init_conv5(&mut rng, p, &a.fin_conv);
        a.fin_gn.init(p);
        fill_uniform(&mut rng, p, a.fin_out.w_off, a.fin_out.c_out * a.fin_out.c_in, a.fin_out.fan_in());
        fill_uniform(&mut rng, p, a.fin_out.b_off, a.fin_out.c_out, a.fin_out.fan_in());
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.arch.n_params
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.horizon * self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.horizon * self.dim),
                got: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    /// Predicts noise for iterate `x` at timestep `t` of an `n_steps`
    /// schedule.
    pub fn forward(&self, x: &[f64], t: usize, n_steps: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if t > n_steps {
            return Err(Error::InvalidTimestep { t, lo: 0, hi: n_steps });
        }
        Ok(self.forward_rows(x, t))
    }

    fn forward_rows(&self, x: &[f64], t: usize) -> Vec<f64> {
        let feat = Feat::from_rows(x, self.horizon, self.dim);
        self.forward_feat(&feat, t).to_rows()
    }

    fn embed(&self, p: &[f64], t: usize) -> Vec<f64> {
        let sincos = sinusoidal_embedding(t as f64, EMB_DIM);
        let e_pre = self.arch.time_l1.forward(p, &sincos);
        let (e_act, _) = mish_vec(&e_pre);
        self.arch.time_l2.forward(p, &e_act)
    }

    fn forward_feat(&self, x: &Feat, t: usize) -> Feat {
        let p = &self.params;
        let a = &self.arch;
        let emb = self.embed(p, t);

        let (enc0_out, _) = a.enc0.forward(p, x, &emb);
        let d0 = a.down0.forward(p, &enc0_out);
        let (enc1_out, _) = a.enc1.forward(p, &d0, &emb);
        let d1 = a.down1.forward(p, &enc1_out);
        let (m0, _) = a.mid0.forward(p, &d1, &emb);
        let (m1, _) = a.mid1.forward(p, &m0, &emb);
        let u1 = a.up1.forward(p, &m1);
        let cat1 = Feat::concat(&u1, &enc1_out);
        let (dec1_out, _) = a.dec1.forward(p, &cat1, &emb);
        let u0 = a.up0.forward(p, &dec1_out);
        let cat0 = Feat::concat(&u0, &enc0_out);
        let (dec0_out, _) = a.dec0.forward(p, &cat0, &emb);
        let f1 = a.fin_conv.forward(p, &dec0_out);
        let (fg, _) = a.fin_gn.forward(p, &f1);
        let (fa, _) = mish_forward(&fg);
        a.fin_out.forward(p, &fa)
    }

    fn forward_trace(&self, x: &Feat, t: usize) -> (Feat, UnetTrace) {
        let p = &self.params;
        let a = &self.arch;

        let sincos = sinusoidal_embedding(t as f64, EMB_DIM);
        let e_pre = a.time_l1.forward(p, &sincos);
        let (e_act, e_tsp) = mish_vec(&e_pre);
        let emb = a.time_l2.forward(p, &e_act);

        let (enc0_out, enc0) = a.enc0.forward(p, x, &emb);
        let d0 = a.down0.forward(p, &enc0_out);
        let (enc1_out, enc1) = a.enc1.forward(p, &d0, &emb);
        let d1 = a.down1.forward(p, &enc1_out);
        let (mid0_out, mid0) = a.mid0.forward(p, &d1, &emb);
        let (mid1_out, mid1) = a.mid1.forward(p, &mid0_out, &emb);
        let u1 = a.up1.forward(p, &mid1_out);
        let cat1 = Feat::concat(&u1, &enc1_out);
        let (dec1_out, dec1) = a.dec1.forward(p, &cat1, &emb);
        let u0 = a.up0.forward(p, &dec1_out);
        let cat0 = Feat::concat(&u0, &enc0_out);
        let (dec0_out, dec0) = a.dec0.forward(p, &cat0, &emb);
        let fin_in = dec0_out;
        let f1 = a.fin_conv.forward(p, &fin_in);
        let (fin_g, fin_gn_cache) = a.fin_gn.forward(p, &f1);
        let (fin_a, fin_tsp) = mish_forward(&fin_g);
        let out = a.fin_out.forward(p, &fin_a);

        let trace = UnetTrace {
            sincos,
            e_pre,
            e_tsp,
            e_act,
            emb,
            enc0,
            enc0_out,
            enc1,
            enc1_out,
            mid0,
            mid1,
            mid1_out,
            dec1,
            dec1_out,
            dec0,
            fin_g,
            fin_tsp,
            fin_gn_cache,
            fin_a,
            fin_in,
        };
        (out, trace)
    }

    /// Gradient of `<forward(x, t), upstream>` with respect to the
    /// parameters.
    pub fn backward(&self, x: &[f64], t: usize, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut gp = vec![0.0; self.arch.n_params];
        self.backward_into(x, t, upstream, &mut gp)?;
        Ok(gp)
    }

    /// As [`backward`](Self::backward) but writing into a caller-owned
    /// buffer. Every parameter-gradient slot is overwritten.
    pub fn backward_into(
        &self,
        x: &[f64],
        t: usize,
        upstream: &[f64],
        gp: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        self.check_input(upstream)?;
        if gp.len() != self.arch.n_params {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient slots", self.arch.n_params),
                got: format!("{}", gp.len()),
            });
        }
        let feat = Feat::from_rows(x, self.horizon, self.dim);
        let (_, trace) = self.forward_trace(&feat, t);
        let gout = Feat::from_rows(upstream, self.horizon, self.dim);
        self.backprop(&trace, &gout, gp);
        Ok(())
    }

    fn backprop(&self, tr: &UnetTrace, gout: &Feat, gp: &mut [f64]) {
        let p = &self.params;
        let a = &self.arch;
        let emb = &tr.emb;
        let mut g_emb = vec![0.0; EMB_DIM];

        let g_fa = a.fin_out.backward(p, &tr.fin_a, gout, gp);
        let g_fg = mish_backward(&tr.fin_g, &tr.fin_tsp, &g_fa);
        let g_f1 = a.fin_gn.backward(p, &tr.fin_gn_cache, &g_fg, gp);
        let g_dec0_out = a.fin_conv.backward(p, &tr.fin_in, &g_f1, gp);

        let (g_cat0, ge) = a.dec0.backward(p, &tr.dec0, emb, &g_dec0_out, gp);
        add_assign(&mut g_emb, &ge);
        let (g_u0, g_enc0_a) = g_cat0.split(WIDTHS[0]);
        let g_dec1_out = a.up0.backward(p, &tr.dec1_out, &g_u0, gp);

        let (g_cat1, ge) = a.dec1.backward(p, &tr.dec1, emb, &g_dec1_out, gp);
        add_assign(&mut g_emb, &ge);
        let (g_u1, g_enc1_a) = g_cat1.split(WIDTHS[1]);
        let g_mid1_out = a.up1.backward(p, &tr.mid1_out, &g_u1, gp);

        let (g_mid0_out, ge) = a.mid1.backward(p, &tr.mid1, emb, &g_mid1_out, gp);
        add_assign(&mut g_emb, &ge);
        let (g_d1, ge) = a.mid0.backward(p, &tr.mid0, emb, &g_mid0_out, gp);
        add_assign(&mut g_emb, &ge);

        let mut g_enc1_out = a.down1.backward(p, &tr.enc1_out, &g_d1, gp);
        for (acc, v) in g_enc1_out.d.iter_mut().zip(&g_enc1_a.d) {
            *acc += v;
        }
        let (g_d0, ge) = a.enc1.backward(p, &tr.enc1, emb, &g_enc1_out, gp);
        add_assign(&mut g_emb, &ge);

        let mut g_enc0_out = a.down0.backward(p, &tr.enc0_out, &g_d0, gp);
        for (acc, v) in g_enc0_out.d.iter_mut().zip(&g_enc0_a.d) {
            *acc += v;
        }
        let (_, ge) = a.enc0.backward(p, &tr.enc0, emb, &g_enc0_out, gp);
        add_assign(&mut g_emb, &ge);

        // shared time MLP, visited once with the accumulated gradient
        let g_e_act = a.time_l2.backward(p, &tr.e_act, &g_emb, gp);
        let g_e_pre = mish_vec_backward(&tr.e_pre, &tr.e_tsp, &g_e_act);
        a.time_l1.backward(p, &tr.sincos, &g_e_pre, gp);
    }

    /// Architecture fingerprint written into checkpoints.
    pub fn arch_hash(&self) -> u64 {
        let desc = format!(
            "unet1:k5:w{},{},{}:g8:e{}:h{}:d{}",
            WIDTHS[0], WIDTHS[1], WIDTHS[2], EMB_DIM, self.horizon, self.dim
        );
        fnv1a(desc.as_bytes())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.arch_hash().to_le_bytes())?;
        w.write_all(&(self.horizon as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::VersionMismatch);
        }
        let hash = read_u64(r)?;
        let horizon = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let n_params = read_u64(r)? as usize;

        let mut net = DenoiserNetwork::new(horizon, dim, 0)?;
        if net.arch_hash() != hash {
            return Err(Error::CheckpointMismatch(format!(
                "architecture hash {hash:#x} != {:#x}",
                net.arch_hash()
            )));
        }
        if net.params.len() != n_params {
            return Err(Error::CheckpointMismatch(format!(
                "parameter count {n_params} != {}",
                net.params.len()
            )));
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

impl Denoiser for DenoiserNetwork {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.forward_rows(x, t)
    }
}

fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn mish_vec(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let feat = Feat { c: 1, l: x.len(), d: x.to_vec() };
    let (out, tsp) = mish_forward(&feat);
    (out.d, tsp)
}

fn mish_vec_backward(x: &[f64], tsp: &[f64], gout: &[f64]) -> Vec<f64> {
    let xf = Feat { c: 1, l: x.len(), d: x.to_vec() };
    let gf = Feat { c: 1, l: gout.len(), d: gout.to_vec() };
    mish_backward(&xf, tsp, &gf).d
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
