//! Parameter registration and the forward builders used by the decoder.
//!
//! Naming: a linear layer under `p` owns `p.w` (`din×dout`) and `p.b` (`dout`);
//! a layer norm owns `p.g` and `p.b`; an mlp3 owns `p.l0`, `p.n0`, `p.l1`, `p.n1`,
//! `p.l2`; an attention block owns `p.q`, `p.k`, `p.v`, `p.o`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var, Window};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Xavier-uniform weight, zero bias.
pub fn add_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    let a = (6.0 / (din + dout) as f64).sqrt();
    let w = (0..din * dout).map(|_| rng.gen_range(-a..a)).collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(din, dout, w)?)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]))
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c]))
}

pub fn add_mlp3<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    din: usize,
    hidden: usize,
    dout: usize,
) -> Result<()> {
    add_linear(store, rng, &format!("{prefix}.l0"), din, hidden)?;
    add_layer_norm(store, &format!("{prefix}.n0"), hidden)?;
    add_linear(store, rng, &format!("{prefix}.l1"), hidden, hidden)?;
    add_layer_norm(store, &format!("{prefix}.n1"), hidden)?;
    add_linear(store, rng, &format!("{prefix}.l2"), hidden, dout)
}

pub fn add_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c: usize,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{prefix}.{p}"), c, c)?;
    }
    Ok(())
}

/// Table of small Gaussian values, used for learned embeddings.
pub fn add_embedding<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
) -> Result<()> {
    let n = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    store.insert(name, Tensor::matrix(rows, cols, data)?)
}

/// `y = x W + b`.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Linear → LayerNorm → ReLU, twice, then a plain linear output.
pub fn mlp3(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let mut h = x;
    for i in 0..2 {
        h = linear(g, store, h, &format!("{prefix}.l{i}"))?;
        h = layer_norm(g, store, h, &format!("{prefix}.n{i}"))?;
        h = g.relu(h);
    }
    linear(g, store, h, &format!("{prefix}.l2"))
}

pub struct Attention {
    /// `[nq × c]` after the output projection.
    pub values: Var,
    /// `[heads, nq, nk]` probabilities (windowed: `[heads, nq, width]`).
    pub weights: Var,
}

fn check_bias(g: &Graph, bias: Option<Var>) -> Result<()> {
    if let Some(b) = bias {
        if !g.value(b).is_finite() {
            return Err(Error::Input("non-finite attention bias".into()));
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention with an optional additive `nq×nk` bias and
/// an optional `nq×nk` block pattern (`true` = blocked).
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    blocked: Option<&[bool]>,
    heads: usize,
) -> Result<Attention> {
    check_bias(g, bias)?;
    let qp = linear(g, store, q, &format!("{prefix}.q"))?;
    let kp = linear(g, store, k, &format!("{prefix}.k"))?;
    let vp = linear(g, store, v, &format!("{prefix}.v"))?;
    let c = g.value(qp).cols();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let mut logits = g.head_logits(qp, kp, heads, scale)?;
    if let Some(b) = bias {
        logits = g.add_head_bias(logits, b)?;
    }
    let weights = g.softmax(logits, blocked)?;
    let mixed = g.head_mix(weights, vp, heads)?;
    let values = linear(g, store, mixed, &format!("{prefix}.o"))?;
    Ok(Attention { values, weights })
}

/// Attention where query `i` sees only the keys listed in its window row.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    win: Rc<Window>,
    heads: usize,
) -> Result<Attention> {
    let qp = linear(g, store, q, &format!("{prefix}.q"))?;
    let kp = linear(g, store, k, &format!("{prefix}.k"))?;
    let vp = linear(g, store, v, &format!("{prefix}.v"))?;
    let c = g.value(qp).cols();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let logits = g.window_logits(qp, kp, win.clone(), heads, scale)?;
    let blocked: Vec<bool> = win.valid.iter().map(|v| !v).collect();
    let weights = g.softmax(logits, Some(&blocked))?;
    let mixed = g.window_mix(weights, vp, win, heads)?;
    let values = linear(g, store, mixed, &format!("{prefix}.o"))?;
    Ok(Attention { values, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_hand_case() {
        let mut s = ParamStore::new();
        s.insert("f.w", Tensor::eye(2)).unwrap();
        s.insert("f.b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = linear(&mut g, &s, x, "f").unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mlp3_missing_parameter_is_registry_error() {
        let s = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(mlp3(&mut g, &s, x, "m"), Err(Error::Registry(_))));
    }

    #[test]
    fn attention_non_finite_bias_is_input_error() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        add_attention(&mut s, &mut rng, "a", 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 4]));
        let b = g.input(Tensor::matrix(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap());
        let r = masked_attention(&mut g, &s, "a", x, x, x, Some(b), None, 2);
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
