use crate::tensor::{f32_round, shape_err, Grads, ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every parameter in `store`.
///
/// Parameters without a gradient entry are treated as having zero gradient
/// (their moments still decay). Values and moments are kept at f32
/// precision so a checkpointed run resumes bit-exactly.
pub fn adam_update(store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = store
            .get(name)
            .map_err(|_| TensorError::UnknownParam(name.to_string()))?;
        if p.value().len() != g.len() {
            return Err(shape_err(
                "adam_update",
                format!("`{name}`: {} values, {} gradients", p.value().len(), g.len()),
            ));
        }
    }
    let t = store.step() + 1;
    store.set_step(t);
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (name, p) in store.iter_mut() {
        let g = grads.get(name);
        let (w, m, v) = p.parts_mut();
        for i in 0..w.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = f32_round(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
            v[i] = f32_round(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] = f32_round(w[i] - lr * mh / (vh.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
