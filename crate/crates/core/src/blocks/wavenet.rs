use rand::Rng;

use crate::tensor::{Graph, Init, ParamStore, Result, Var};

/// Gated, dilated 1-D convolution stack over `[T, in_dim]` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveNetConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Start the output projection at zero.
    pub zero_output: bool,
}

impl WaveNetConfig {
    pub fn new(in_dim: usize, channels: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            channels,
            out_dim,
            kernel: 3,
            dilations: vec![1, 2, 4, 8, 1, 2, 4, 8],
            zero_output: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WaveNet {
    prefix: String,
    cfg: WaveNetConfig,
}

impl WaveNet {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: WaveNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let k = cfg.kernel;
        let p = |s: &str| format!("{prefix}{s}");
        let fan = |n| Init::FanIn { fan_in: n, gain: 1.0 };
        store.init(p("in.w"), &[cfg.in_dim, c], fan(cfg.in_dim), rng)?;
        store.init(p("in.b"), &[c], Init::Zeros, rng)?;
        let layers = cfg.dilations.len();
        for i in 0..layers {
            for gate in ["a", "b"] {
                store.init(p(&format!("l{i}.conv_{gate}.k")), &[k, c, c], fan(k * c), rng)?;
                store.init(p(&format!("l{i}.conv_{gate}.b")), &[c], Init::Zeros, rng)?;
            }
            // the last layer only feeds the skip path
            if i + 1 < layers {
                store.init(p(&format!("l{i}.res.w")), &[c, c], fan(c), rng)?;
                store.init(p(&format!("l{i}.res.b")), &[c], Init::Zeros, rng)?;
            }
            store.init(p(&format!("l{i}.skip.w")), &[c, c], fan(c), rng)?;
            store.init(p(&format!("l{i}.skip.b")), &[c], Init::Zeros, rng)?;
        }
        let out_init = if cfg.zero_output { Init::Zeros } else { fan(c) };
        store.init(p("out.w"), &[c, cfg.out_dim], out_init, rng)?;
        store.init(p("out.b"), &[cfg.out_dim], Init::Zeros, rng)?;
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.cfg
    }

    fn lin(&self, g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
        let w = g.param(store, &format!("{}{name}.w", self.prefix))?;
        let b = g.param(store, &format!("{}{name}.b", self.prefix))?;
        g.linear(x, w, b)
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, x: Var, name: &str, dil: usize) -> Result<Var> {
        let k = g.param(store, &format!("{}{name}.k", self.prefix))?;
        let b = g.param(store, &format!("{}{name}.b", self.prefix))?;
        let y = g.conv1d(x, k, dil)?;
        g.add_bias(y, b)
    }

    /// `[T, in_dim] -> [T, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.lin(g, store, x, "in")?;
        let mut skip: Option<Var> = None;
        let layers = self.cfg.dilations.len();
        for (i, &d) in self.cfg.dilations.iter().enumerate() {
            let a = self.conv(g, store, h, &format!("l{i}.conv_a"), d)?;
            let b = self.conv(g, store, h, &format!("l{i}.conv_b"), d)?;
            let z = g.gated_tanh(a, b)?;
            let s = self.lin(g, store, z, &format!("l{i}.skip"))?;
            if i + 1 < layers {
                let r = self.lin(g, store, z, &format!("l{i}.res"))?;
                let hr = g.add(h, r)?;
                h = g.scale(hr, std::f64::consts::FRAC_1_SQRT_2);
            }
            skip = Some(match skip {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let s = match skip {
            Some(acc) => g.scale(acc, 1.0 / (self.cfg.dilations.len() as f64).sqrt()),
            None => h,
        };
        let s = g.gelu(s);
        self.lin(g, store, s, "out")
    }
}
