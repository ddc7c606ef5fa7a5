use rand::Rng;

use super::{ModelError, Result};
use crate::tensor::{Graph, Init, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Channels at the three resolution levels.
    pub channels: [usize; 3],
    /// Width of the sinusoidal noise-level embedding.
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128],
            emb_dim: 128,
        }
    }
}

/// Sinusoidal features of a scalar: `[sin(v·f_i), cos(v·f_i)]` with
/// `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(v: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (v * f).sin();
        out[half + i] = (v * f).cos();
    }
    Tensor::new(vec![1, dim], out).expect("static shape")
}

/// Three-level 2-D U-Net over `[L2, d2]` grids with the prior as a second
/// input channel and an additive `ln σ` embedding in every block.
#[derive(Clone, Debug)]
pub struct UNet {
    prefix: String,
    cfg: UNetConfig,
}

fn groups_for(c: usize) -> usize {
    let mut g = c.min(8);
    while !c.is_multiple_of(g) {
        g -= 1;
    }
    g
}

/// Block names with their input and output channel counts.
fn blocks(c: [usize; 3]) -> Vec<(&'static str, usize, usize)> {
    vec![
        ("enc1a", 2, c[0]),
        ("enc1b", c[0], c[0]),
        ("enc2a", c[1], c[1]),
        ("enc2b", c[1], c[1]),
        ("mida", c[2], c[2]),
        ("midb", c[2], c[2]),
        ("dec2a", c[2] + c[1], c[1]),
        ("dec2b", c[1], c[1]),
        ("dec1a", c[1] + c[0], c[0]),
        ("dec1b", c[0], c[0]),
    ]
}

impl UNet {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: UNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let p = |s: &str| format!("{prefix}{s}");
        let fan = |n| Init::FanIn { fan_in: n, gain: 1.0 };
        let (c, e) = (cfg.channels, cfg.emb_dim);
        store.init(p("emb1.w"), &[e, e], fan(e), rng)?;
        store.init(p("emb1.b"), &[e], Init::Zeros, rng)?;
        store.init(p("emb2.w"), &[e, e], fan(e), rng)?;
        store.init(p("emb2.b"), &[e], Init::Zeros, rng)?;
        for (name, cin, cout) in blocks(c) {
            store.init(p(&format!("{name}.k")), &[3, 3, cin, cout], fan(9 * cin), rng)?;
            store.init(p(&format!("{name}.b")), &[cout], Init::Zeros, rng)?;
            store.init(p(&format!("{name}.gn.g")), &[cout], Init::Ones, rng)?;
            store.init(p(&format!("{name}.gn.b")), &[cout], Init::Zeros, rng)?;
            store.init(p(&format!("{name}.shift.w")), &[e, cout], fan(e), rng)?;
            store.init(p(&format!("{name}.shift.b")), &[cout], Init::Zeros, rng)?;
        }
        store.init(p("down1.w"), &[4 * c[0], c[1]], fan(4 * c[0]), rng)?;
        store.init(p("down1.b"), &[c[1]], Init::Zeros, rng)?;
        store.init(p("down2.w"), &[4 * c[1], c[2]], fan(4 * c[1]), rng)?;
        store.init(p("down2.b"), &[c[2]], Init::Zeros, rng)?;
        store.init(p("out.w"), &[c[0], 1], Init::Zeros, rng)?;
        store.init(p("out.b"), &[1], Init::Zeros, rng)?;
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn p(&self, g: &mut Graph, store: &ParamStore, s: &str) -> Result<Var> {
        Ok(g.param(store, &format!("{}{s}", self.prefix))?)
    }

    fn lin(&self, g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
        let w = self.p(g, store, &format!("{name}.w"))?;
        let b = self.p(g, store, &format!("{name}.b"))?;
        Ok(g.linear(x, w, b)?)
    }

    /// conv 3×3 → group norm → `+ shift(emb)` → GELU.
    fn block(&self, g: &mut Graph, store: &ParamStore, x: Var, emb: Var, name: &str) -> Result<Var> {
        let k = self.p(g, store, &format!("{name}.k"))?;
        let b = self.p(g, store, &format!("{name}.b"))?;
        let y = g.conv2d(x, k)?;
        let y = g.add_bias(y, b)?;
        let c = g.shape(y)[2];
        let gm = self.p(g, store, &format!("{name}.gn.g"))?;
        let bt = self.p(g, store, &format!("{name}.gn.b"))?;
        let y = g.group_norm(y, groups_for(c), gm, bt)?;
        let shift = self.lin(g, store, emb, &format!("{name}.shift"))?;
        let shift = g.reshape(shift, &[c])?;
        let y = g.add_bias(y, shift)?;
        Ok(g.gelu(y))
    }

    /// Raw network output `F(x, ln σ, prior)` for `[L2, d2]` inputs.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        noised: Var,
        ln_sigma: f64,
        prior: Var,
    ) -> Result<Var> {
        let s = g.shape(noised).to_vec();
        if s.len() != 2 || g.shape(prior) != s.as_slice() || s[0] == 0 || s[1] == 0 {
            return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "unet",
                detail: format!("noised {:?} vs prior {:?}", s, g.shape(prior)),
            }));
        }
        let (h, w) = (s[0], s[1]);
        let (hp, wp) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);

        let e = g.constant(sinusoidal_embedding(ln_sigma, self.cfg.emb_dim));
        let e = self.lin(g, store, e, "emb1")?;
        let e = g.gelu(e);
        let emb = self.lin(g, store, e, "emb2")?;

        let a = g.reshape(noised, &[h, w, 1])?;
        let b = g.reshape(prior, &[h, w, 1])?;
        let x = g.concat_last(a, b)?;
        let x = g.pad_crop2d(x, hp, wp)?;

        let x = self.block(g, store, x, emb, "enc1a")?;
        let s1 = self.block(g, store, x, emb, "enc1b")?;
        let x = g.space_to_depth2(s1)?;
        let x = self.lin(g, store, x, "down1")?;
        let x = self.block(g, store, x, emb, "enc2a")?;
        let s2 = self.block(g, store, x, emb, "enc2b")?;
        let x = g.space_to_depth2(s2)?;
        let x = self.lin(g, store, x, "down2")?;
        let x = self.block(g, store, x, emb, "mida")?;
        let x = self.block(g, store, x, emb, "midb")?;
        let x = g.upsample2(x)?;
        let x = g.concat_last(x, s2)?;
        let x = self.block(g, store, x, emb, "dec2a")?;
        let x = self.block(g, store, x, emb, "dec2b")?;
        let x = g.upsample2(x)?;
        let x = g.concat_last(x, s1)?;
        let x = self.block(g, store, x, emb, "dec1a")?;
        let x = self.block(g, store, x, emb, "dec1b")?;
        let y = self.lin(g, store, x, "out")?;
        let y = g.pad_crop2d(y, h, w)?;
        Ok(g.reshape(y, &[h, w])?)
    }
}
