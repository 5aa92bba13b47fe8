//! Central-difference verification of tape gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Absolute floor in the relative-error denominator, so that two tiny
    /// gradients don't produce a large ratio. Raised to `noise_quanta` round-off
    /// quanta of the difference quotient (`|L|·ε_mach/eps`) when that is larger.
    pub floor: f64,
    pub noise_quanta: f64,
    /// Probe at most this many entries per parameter (evenly strided). `None` probes all.
    pub max_entries: Option<usize>,
    /// Multiplies the analytic gradient before comparison. 1.0 for real checks;
    /// anything else is a negative control.
    pub corrupt: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
            noise_quanta: 1e4,
            max_entries: None,
            corrupt: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub probed: usize,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `f` against central differences for every parameter.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    let quantum = g.value(loss).item().abs() * f64::EPSILON / opts.eps;
    let floor = opts.floor.max(opts.noise_quanta * quantum);
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut params = Vec::with_capacity(names.len());
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = store.grad(&name)?.clone();
        let n = analytic.len();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut max_rel: f64 = 0.0;
        let mut worst_pair = (0.0, 0.0);
        let mut probed = 0;
        for idx in (0..n).step_by(stride) {
            let orig = store.get(&name)?.data()[idx];
            store.get_mut(&name)?.data_mut()[idx] = orig + opts.eps;
            let fp = eval(store)?;
            store.get_mut(&name)?.data_mut()[idx] = orig - opts.eps;
            let fm = eval(store)?;
            store.get_mut(&name)?.data_mut()[idx] = orig;
            let num = (fp - fm) / (2.0 * opts.eps);
            let ana = analytic.data()[idx] * opts.corrupt;
            let denom = ana.abs().max(num.abs()).max(floor);
            let rel = (ana - num).abs() / denom;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst_pair = (ana, num);
            }
            probed += 1;
        }
        worst = worst.max(max_rel);
        params.push(ParamCheck {
            name,
            max_rel_err: max_rel,
            probed,
            worst: worst_pair,
        });
    }
    Ok(GradReport {
        params,
        max_rel_err: worst,
        tol: opts.tol,
        passed: worst <= opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn quad(store: &mut ParamStore) {
        store
            .insert("w", Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
    }

    fn norm2(g: &mut Graph, s: &ParamStore) -> Result<Var> {
        let w = g.param(s, "w")?;
        let sq = g.mul(w, w)?;
        Ok(g.sum(sq))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        quad(&mut s);
        let r = grad_check(&mut s, norm2, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut s = ParamStore::new();
        quad(&mut s);
        let opts = GradCheckOptions {
            corrupt: 1.1,
            ..Default::default()
        };
        let r = grad_check(&mut s, norm2, &opts).unwrap();
        assert!(!r.passed);
    }
}
