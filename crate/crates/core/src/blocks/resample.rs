//! Length/width adapters from the semantic grid `L1 × d1` to the Mel grid
//! `L2 × d2`.

use rand::Rng;

use super::{ModelError, Result};
use crate::tensor::{Graph, Init, ParamStore, Tensor, Var};

/// `[to, from]` linear-interpolation matrix on an aligned-corner grid.
pub fn interp_matrix(from: usize, to: usize) -> Tensor {
    let mut m = Tensor::zeros(&[to, from]);
    for i in 0..to {
        let pos = if to > 1 {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(from - 1);
        let frac = pos - lo as f64;
        m.data_mut()[i * from + lo] += 1.0 - frac;
        if frac > 0.0 {
            m.data_mut()[i * from + lo + 1] += frac;
        }
    }
    m
}

fn check_bilinear(rows: usize, cols: usize) -> Result<()> {
    if rows < 2 || cols < 2 {
        return Err(ModelError::DegenerateInput { rows, cols });
    }
    Ok(())
}

/// Separable bilinear interpolation of `x: [L1, d1]` to `[L2, d2]`.
pub fn resample_bilinear(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(ModelError::DegenerateInput { rows: x.len(), cols: 1 });
    }
    check_bilinear(x.rows(), x.cols())?;
    let at = interp_matrix(x.rows(), target.0);
    let af = interp_matrix(x.cols(), target.1);
    Ok(at.matmul(x)?.matmul(&af.transpose())?)
}

/// Differentiable form of [`resample_bilinear`]: `A_t · x · A_fᵀ` with
/// constant interpolation matrices.
pub fn resample_bilinear_graph(g: &mut Graph, x: Var, target: (usize, usize)) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(ModelError::DegenerateInput { rows: 0, cols: 0 });
    }
    check_bilinear(s[0], s[1])?;
    let at = g.constant(interp_matrix(s[0], target.0));
    let aft = g.constant(interp_matrix(s[1], target.1).transpose());
    let y = g.matmul(at, x)?;
    Ok(g.matmul(y, aft)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverConfig {
    pub in_dim: usize,
    /// Number of latents `N`.
    pub latents: usize,
    /// Latent width `D`.
    pub width: usize,
    pub self_layers: usize,
    /// Rows of the output query; outputs are cropped to the requested `L2`.
    pub max_out_len: usize,
    pub out_dim: usize,
}

impl PerceiverConfig {
    pub fn new(in_dim: usize, max_out_len: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            latents: 32,
            width: 256,
            self_layers: 4,
            max_out_len,
            out_dim,
        }
    }
}

/// Latent cross-attention resampler: encode into `N` learned latents, refine
/// with self-attention, decode with a learned output query.
#[derive(Clone, Debug)]
pub struct Perceiver {
    prefix: String,
    cfg: PerceiverConfig,
}

/// Pre-LN single-head attention layer with a GELU feed-forward.
struct AttnLayer<'a> {
    prefix: String,
    store: &'a ParamStore,
}

impl AttnLayer<'_> {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        q_dim: usize,
        kv_dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> crate::tensor::Result<()> {
        let p = |s: &str| format!("{prefix}{s}");
        let fan = |n| Init::FanIn { fan_in: n, gain: 1.0 };
        store.init(p("ln_q.g"), &[q_dim], Init::Ones, rng)?;
        store.init(p("ln_q.b"), &[q_dim], Init::Zeros, rng)?;
        store.init(p("ln_kv.g"), &[kv_dim], Init::Ones, rng)?;
        store.init(p("ln_kv.b"), &[kv_dim], Init::Zeros, rng)?;
        store.init(p("wq"), &[q_dim, width], fan(q_dim), rng)?;
        store.init(p("wk"), &[kv_dim, width], fan(kv_dim), rng)?;
        store.init(p("wv"), &[kv_dim, width], fan(kv_dim), rng)?;
        store.init(p("wo"), &[width, q_dim], fan(width), rng)?;
        store.init(p("ln_ff.g"), &[q_dim], Init::Ones, rng)?;
        store.init(p("ln_ff.b"), &[q_dim], Init::Zeros, rng)?;
        store.init(p("ff1.w"), &[q_dim, 4 * q_dim], fan(q_dim), rng)?;
        store.init(p("ff1.b"), &[4 * q_dim], Init::Zeros, rng)?;
        store.init(p("ff2.w"), &[4 * q_dim, q_dim], fan(4 * q_dim), rng)?;
        store.init(p("ff2.b"), &[q_dim], Init::Zeros, rng)?;
        Ok(())
    }

    fn p(&self, g: &mut Graph, s: &str) -> crate::tensor::Result<Var> {
        g.param(self.store, &format!("{}{s}", self.prefix))
    }

    fn ln(&self, g: &mut Graph, x: Var, name: &str) -> crate::tensor::Result<Var> {
        let gm = self.p(g, &format!("{name}.g"))?;
        let bt = self.p(g, &format!("{name}.b"))?;
        g.layer_norm(x, gm, bt)
    }

    /// `q + Attn(LN q, LN kv)`, then `+ FF(LN ·)`. `kv = None` is self-attention.
    fn forward(&self, g: &mut Graph, q: Var, kv: Option<Var>) -> crate::tensor::Result<Var> {
        let qn = self.ln(g, q, "ln_q")?;
        let kvn = match kv {
            Some(kv) => self.ln(g, kv, "ln_kv")?,
            None => self.ln(g, q, "ln_kv")?,
        };
        let (wq, wk, wv, wo) = (
            self.p(g, "wq")?,
            self.p(g, "wk")?,
            self.p(g, "wv")?,
            self.p(g, "wo")?,
        );
        let qq = g.matmul(qn, wq)?;
        let kk = g.matmul(kvn, wk)?;
        let vv = g.matmul(kvn, wv)?;
        let a = g.attention(qq, kk, vv)?;
        let a = g.matmul(a, wo)?;
        let h = g.add(q, a)?;
        let hn = self.ln(g, h, "ln_ff")?;
        let (w1, b1, w2, b2) = (
            self.p(g, "ff1.w")?,
            self.p(g, "ff1.b")?,
            self.p(g, "ff2.w")?,
            self.p(g, "ff2.b")?,
        );
        let f = g.linear(hn, w1, b1)?;
        let f = g.gelu(f);
        let f = g.linear(f, w2, b2)?;
        g.add(h, f)
    }
}

impl Perceiver {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: PerceiverConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (n, d) = (cfg.latents, cfg.width);
        store.init(format!("{prefix}in.w"), &[cfg.in_dim, d], Init::FanIn { fan_in: cfg.in_dim, gain: 1.0 }, rng)?;
        store.init(format!("{prefix}in.b"), &[d], Init::Zeros, rng)?;
        store.init(format!("{prefix}latents"), &[n, d], Init::Normal(1.0), rng)?;
        store.init(format!("{prefix}query"), &[cfg.max_out_len, cfg.out_dim], Init::Normal(1.0), rng)?;
        AttnLayer::init(store, &format!("{prefix}enc."), d, d, d, rng)?;
        for i in 0..cfg.self_layers {
            AttnLayer::init(store, &format!("{prefix}self{i}."), d, d, d, rng)?;
        }
        AttnLayer::init(store, &format!("{prefix}dec."), cfg.out_dim, d, d, rng)?;
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn config(&self) -> &PerceiverConfig {
        &self.cfg
    }

    fn layer<'a>(&self, store: &'a ParamStore, name: &str) -> AttnLayer<'a> {
        AttnLayer {
            prefix: format!("{}{name}.", self.prefix),
            store,
        }
    }

    /// `z1 = crossAttn(x, l)`: the latents attend to the projected input.
    /// Returns `[N, D]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}in.w", self.prefix))?;
        let b = g.param(store, &format!("{}in.b", self.prefix))?;
        let xp = g.linear(x, w, b)?;
        let l = g.param(store, &format!("{}latents", self.prefix))?;
        Ok(self.layer(store, "enc").forward(g, l, Some(xp))?)
    }

    /// `[L1, in_dim] -> [out_len, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, out_len: usize) -> Result<Var> {
        if out_len == 0 || out_len > self.cfg.max_out_len {
            return Err(ModelError::SequenceTooLong {
                len: out_len,
                max: self.cfg.max_out_len,
            });
        }
        let mut z = self.encode(g, store, x)?;
        for i in 0..self.cfg.self_layers {
            z = self.layer(store, &format!("self{i}")).forward(g, z, None)?;
        }
        let o = g.param(store, &format!("{}query", self.prefix))?;
        let o = g.slice_rows(o, 0, out_len)?;
        Ok(self.layer(store, "dec").forward(g, o, Some(z))?)
    }
}
