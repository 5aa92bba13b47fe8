//! Hierarchical topology heads (lane-lane and lane-traffic) and the synthetic
//! traffic-token encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::layers::{linear, masked_attention, mlp3};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::scene::{Category, TrafficElement};

pub const TE_INPUT: usize = 4 + 3;

pub struct TrafficTokens {
    pub q_te: Var,
    /// `[M×4]`, sigmoid-decoded.
    pub boxes: Var,
    /// `[M×3]` category logits.
    pub cls: Var,
    pub m: usize,
}

/// Encodes ground-truth traffic elements (with Gaussian jitter on the inputs) into
/// tokens. Returns `None` for an empty set.
pub fn te_encoder(
    g: &mut Graph,
    store: &ParamStore,
    traffic: &[TrafficElement],
    noise: f64,
    seed: u64,
) -> Result<Option<TrafficTokens>> {
    let m = traffic.len();
    if m == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut x = Vec::with_capacity(m * TE_INPUT);
    for t in traffic {
        let mut row = [0.0; TE_INPUT];
        row[..4].copy_from_slice(&t.bbox);
        row[4 + t.category.index()] = 1.0;
        for v in row.iter_mut() {
            if noise > 0.0 {
                *v += normal.sample(&mut rng);
            }
        }
        x.extend_from_slice(&row);
    }
    let x = g.input(Tensor::matrix(m, TE_INPUT, x)?);
    let q_te = mlp3(g, store, x, "te.enc")?;
    let b = linear(g, store, q_te, "te.box")?;
    let boxes = g.sigmoid(b);
    let cls = linear(g, store, q_te, "te.cls")?;
    Ok(Some(TrafficTokens { q_te, boxes, cls, m }))
}

/// Decoded traffic predictions as plain values.
pub fn decode_traffic(boxes: &Tensor, cls: &Tensor) -> Vec<([f64; 4], Category, f64)> {
    (0..boxes.rows())
        .map(|i| {
            let b = boxes.row(i);
            let c = cls.row(i);
            let k = crate::masks::argmax(c);
            let mx = c[k];
            let z: f64 = c.iter().map(|v| (v - mx).exp()).sum();
            let bbox = [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])];
            (bbox, Category::from_index(k).unwrap_or(Category::Sign), 1.0 / z)
        })
        .collect()
}

/// `mlp3(prefix.w)` applied to every per-pair vector of head weights of
/// `w[heads, a, b]`, giving an `a×b` matrix.
pub fn weight_term(g: &mut Graph, store: &ParamStore, w: Var, prefix: &str) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    let pairs = g.heads_to_pairs(w)?;
    let y = mlp3(g, store, pairs, prefix)?;
    g.reshape(y, &[shape[1], shape[2]])
}

/// `mlp3(prefix.a, x) · mlp3(prefix.b, y)ᵀ / √d_sim`, plus the attention-weight term
/// when `w` is given.
pub fn relation_head(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    y: Var,
    w: Option<Var>,
) -> Result<Var> {
    let a = mlp3(g, store, x, &format!("{prefix}.a"))?;
    let b = mlp3(g, store, y, &format!("{prefix}.b"))?;
    let d = g.value(a).cols() as f64;
    let s = g.matmul_bt(a, b)?;
    let s = g.scale(s, 1.0 / d.sqrt());
    match w {
        Some(w) => {
            let t = weight_term(g, store, w, &format!("{prefix}.w"))?;
            g.add(s, t)
        }
        None => Ok(s),
    }
}

pub fn i2i_head(g: &mut Graph, store: &ParamStore, q_ins: Var, w_i2i: Option<Var>) -> Result<Var> {
    relation_head(g, store, "topo.i2i", q_ins, q_ins, w_i2i)
}

pub fn p2i_head(
    g: &mut Graph,
    store: &ParamStore,
    q_pts: Var,
    q_ins: Var,
    w_p2i: Option<Var>,
) -> Result<Var> {
    relation_head(g, store, "topo.p2i", q_pts, q_ins, w_p2i)
}

/// `weight · t_inst + (1 − weight) · mean over the p points of t_pts`.
pub fn fuse(g: &mut Graph, t_inst: Var, t_pts: Var, p: usize, weight: f64) -> Result<Var> {
    let avg = g.mean_row_groups(t_pts, p)?;
    let a = g.scale(t_inst, weight);
    let b = g.scale(avg, 1.0 - weight);
    g.add(a, b)
}

pub struct L2tOutput {
    pub t_i2t: Var,
    pub t_p2t: Option<Var>,
    pub w_i2t: Var,
    pub w_p2t: Var,
    pub fused: Var,
}

pub struct L2tOptions {
    pub heads: usize,
    pub use_weights: bool,
    pub point_branch: bool,
    pub fuse_weight: f64,
}

/// Lane-traffic heads: one cross-attention from the hierarchical queries to the
/// traffic tokens provides `w_p2t`/`w_i2t`, then the relation heads run over the
/// traffic axis.
pub fn l2t_heads(
    g: &mut Graph,
    store: &ParamStore,
    q_ins: Var,
    q_pts: Var,
    q_te: Var,
    opts: &L2tOptions,
) -> Result<L2tOutput> {
    let n = g.value(q_ins).rows();
    let np = g.value(q_pts).rows();
    let m = g.value(q_te).rows();
    let p = np / n.max(1);
    let q_hcl = g.concat_rows(&[q_pts, q_ins])?;
    let att = masked_attention(g, store, "topo.l2t.att", q_hcl, q_te, q_te, None, None, opts.heads)?;
    // split [heads, NP+N, M] along the query axis
    let rows = np + n;
    let h = opts.heads;
    let all = g.reshape(att.weights, &[h * rows, m])?;
    let p_idx: Vec<usize> = (0..h).flat_map(|hh| (0..np).map(move |r| hh * rows + r)).collect();
    let i_idx: Vec<usize> = (0..h).flat_map(|hh| (np..rows).map(move |r| hh * rows + r)).collect();
    let w_p2t = g.gather_rows(all, p_idx)?;
    let w_p2t = g.reshape(w_p2t, &[h, np, m])?;
    let w_i2t = g.gather_rows(all, i_idx)?;
    let w_i2t = g.reshape(w_i2t, &[h, n, m])?;

    let wi = opts.use_weights.then_some(w_i2t);
    let t_i2t = relation_head(g, store, "topo.i2t", q_ins, q_te, wi)?;
    let (t_p2t, fused) = if opts.point_branch {
        let wp = opts.use_weights.then_some(w_p2t);
        let t_p2t = relation_head(g, store, "topo.p2t", q_pts, q_te, wp)?;
        let fused = fuse(g, t_i2t, t_p2t, p, opts.fuse_weight)?;
        (Some(t_p2t), fused)
    } else {
        (None, t_i2t)
    };
    Ok(L2tOutput {
        t_i2t,
        t_p2t,
        w_i2t,
        w_p2t,
        fused,
    })
}
