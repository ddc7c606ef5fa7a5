//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, Var};

/// Above this many entries, a seeded random subsample is checked.
pub const MAX_CHECKED_ENTRIES: usize = 10_000;

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.check_finite()?;
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, entry by entry.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    store: &ParamStore,
    eps: f64,
    seed: u64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_sampled(store, eps, seed, MAX_CHECKED_ENTRIES, f)
}

/// [`grad_check`] with an explicit cap on the number of checked entries.
pub fn grad_check_sampled(
    store: &ParamStore,
    eps: f64,
    seed: u64,
    max_entries: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let analytic = g.backward(out)?;
    drop(g);

    let mut entries: Vec<(String, usize)> = Vec::new();
    for (name, p) in store.iter() {
        for i in 0..p.value().len() {
            entries.push((name.to_string(), i));
        }
    }
    if entries.len() > max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, entries.len(), max_entries).into_vec();
        idx.sort_unstable();
        entries = idx.into_iter().map(|i| entries[i].clone()).collect();
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: entries.len(),
        worst: None,
    };
    for (name, i) in entries {
        let x0 = store.value(&name)?.data()[i];
        work.set_entry_raw(&name, i, x0 + eps)?;
        let fp = eval(&work, &f)?;
        work.set_entry_raw(&name, i, x0 - eps)?;
        let fm = eval(&work, &f)?;
        work.set_entry_raw(&name, i, x0)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.get(&name).map(|g| g[i]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    #[test]
    fn half_squared_norm_has_gradient_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.init("w", &[4, 3], Init::Normal(1.0), &mut rng).unwrap();
        let f = |g: &mut Graph, p: &ParamStore| {
            let w = g.param(p, "w")?;
            let sq = g.mul(w, w)?;
            let m = g.mean(sq);
            Ok(g.scale(m, 0.5 * 12.0))
        };
        let mut g = Graph::new();
        let out = f(&mut g, &s).unwrap();
        let grads = g.backward(out).unwrap();
        let w = s.value("w").unwrap();
        for (a, b) in grads.get("w").unwrap().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = grad_check(&s, 1e-4, 0, f).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn large_stores_are_subsampled() {
        let mut s = ParamStore::new();
        s.insert("big", Tensor::full(&[MAX_CHECKED_ENTRIES + 5], 0.1))
            .unwrap();
        let r = grad_check(&s, 1e-4, 3, |g, p| {
            let w = g.param(p, "big")?;
            Ok(g.mean(w))
        })
        .unwrap();
        assert_eq!(r.checked, MAX_CHECKED_ENTRIES);
        assert!(r.max_rel_error < 1e-6);
    }
}
