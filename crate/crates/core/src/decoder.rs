//! Hierarchical centerline decoder.
//!
//! Every layer runs the instance-aware module, the point-aware module and the
//! integrator, then the shared prediction heads and the topology heads. Topology
//! logits of layer `l` become attention biases of layer `l + 1`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{build_p2p_mask, ddt_to_attention_mask, geometric_prior_graph, relation_encoder};
use crate::nn::layers::{
    add_attention, add_embedding, add_layer_norm, add_linear, add_mlp3, layer_norm, linear,
    masked_attention, mlp3, window_attention,
};
use crate::nn::{Graph, ParamStore, Tensor, Var, Window};
use crate::scene::{BevSpec, TrafficElement, DDT_CLASSES};
use crate::topology::{
    fuse, i2i_head, l2t_heads, p2i_head, te_encoder, L2tOptions, L2tOutput, TrafficTokens, TE_INPUT,
};

/// Octaves of the sinusoidal point-position embedding (4 values each).
pub const PE_OCTAVES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Instance queries only; per-point slots come from a shared point embedding.
    Ins,
    InsPts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegSupervision {
    Off,
    Binary,
    Dt,
    Ddt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub n_points: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_sim: usize,
    pub rel_hidden: usize,
    pub mask_dim: usize,
    pub window_radius: usize,
    pub k_attend: usize,
    pub prior_sigma: f64,
    pub fuse_weight: f64,
    pub te_noise: f64,
    pub representation: Representation,
    pub p2p_constrain: bool,
    pub integrator: bool,
    pub seg_supervision: SegSupervision,
    pub cyclic: bool,
    pub forward_weights: bool,
    pub p2i_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 12,
            n_points: 11,
            d_model: 32,
            layers: 3,
            heads: 4,
            d_sim: 16,
            rel_hidden: 8,
            mask_dim: 16,
            window_radius: 2,
            k_attend: 3,
            prior_sigma: 2.0,
            fuse_weight: 0.5,
            te_noise: 0.005,
            representation: Representation::InsPts,
            p2p_constrain: true,
            integrator: true,
            seg_supervision: SegSupervision::Ddt,
            cyclic: true,
            forward_weights: true,
            p2i_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_queries == 0 || self.n_points < 2 || self.layers == 0 {
            return bad("n_queries, n_points >= 2 and layers must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.d_sim == 0 || self.rel_hidden == 0 || self.mask_dim == 0 {
            return bad("hidden sizes must be positive");
        }
        if self.k_attend >= DDT_CLASSES {
            return bad("k_attend must be below 6");
        }
        if !(self.prior_sigma > 0.0) || !(0.0..=1.0).contains(&self.fuse_weight) {
            return bad("prior_sigma must be positive and fuse_weight in [0, 1]");
        }
        Ok(())
    }

    /// Point queries take part in the decoder.
    pub fn has_points(&self) -> bool {
        self.representation == Representation::InsPts
    }

    /// The point-level topology branch is active.
    pub fn point_topology(&self) -> bool {
        self.p2i_branch && self.has_points()
    }
}

fn add_ffn<R: Rng>(s: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) -> Result<()> {
    add_linear(s, rng, &format!("{prefix}.l0"), c, 2 * c)?;
    add_linear(s, rng, &format!("{prefix}.l1"), 2 * c, c)
}

fn add_block<R: Rng>(s: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) -> Result<()> {
    add_attention(s, rng, prefix, c)?;
    add_layer_norm(s, &format!("{prefix}.n0"), c)?;
    add_ffn(s, rng, &format!("{prefix}.ffn"), c)?;
    add_layer_norm(s, &format!("{prefix}.n1"), c)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Registers every parameter of the model. The set of names does not depend on the
/// ablation toggles, so differently toggled runs share one layout.
pub fn init_params(cfg: &ModelConfig, bev_channels: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (n, p, c) = (cfg.n_queries, cfg.n_points, cfg.d_model);
    let r = &mut rng;

    add_embedding(&mut s, r, "query.ins", n, c, 1.0)?;
    add_embedding(&mut s, r, "query.pts", n * p, c, 1.0)?;
    add_embedding(&mut s, r, "query.pt_embed", p, c, 1.0)?;
    // reference polylines start as vertical strokes at random columns; the jitter
    // keeps points off cell boundaries, where the local window would jump
    let mut refs = Vec::with_capacity(n * p * 2);
    for _ in 0..n {
        let x = r.gen_range(0.1..0.9);
        let dy = r.gen_range(-0.02..0.02);
        for k in 0..p {
            let y = 0.05 + 0.9 * k as f64 / (p - 1) as f64 + dy;
            refs.push(logit(x));
            refs.push(logit(y));
        }
    }
    s.insert("query.ref", Tensor::matrix(n * p, 2, refs)?)?;

    add_linear(&mut s, r, "bev.embed", bev_channels, c)?;
    add_mlp3(&mut s, r, "bev.mask", bev_channels, c, cfg.mask_dim)?;
    add_linear(&mut s, r, "pe.pts", 4 * PE_OCTAVES, c)?;

    for l in 0..cfg.layers {
        for blk in ["ins_cross", "ins_self", "pts_self", "pts_cross"] {
            add_block(&mut s, r, &format!("dec.{l}.{blk}"), c)?;
        }
        add_linear(&mut s, r, &format!("dec.{l}.pts_cross.rel"), 2 * cfg.heads, c)?;
        add_attention(&mut s, r, &format!("dec.{l}.integ"), c)?;
        s.insert(format!("dec.{l}.w_agg"), Tensor::zeros(&[1, p]))?;
    }

    add_linear(&mut s, r, "head.cls", c, 1)?;
    add_mlp3(&mut s, r, "head.pts", c, c, 3)?;
    add_mlp3(&mut s, r, "head.mask", c, c, cfg.mask_dim)?;
    let a = (6.0 / (cfg.mask_dim + DDT_CLASSES) as f64).sqrt();
    let w = (0..cfg.mask_dim * DDT_CLASSES).map(|_| r.gen_range(-a..a)).collect();
    s.insert("head.ddt_w", Tensor::matrix(cfg.mask_dim, DDT_CLASSES, w)?)?;
    s.insert("head.ddt_b", Tensor::zeros(&[DDT_CLASSES]))?;

    add_mlp3(&mut s, r, "rel.i2i", 1, cfg.rel_hidden, 1)?;
    add_mlp3(&mut s, r, "rel.p2i", 1, cfg.rel_hidden, 1)?;

    for head in ["topo.i2i", "topo.p2i", "topo.i2t", "topo.p2t"] {
        add_mlp3(&mut s, r, &format!("{head}.a"), c, c, cfg.d_sim)?;
        add_mlp3(&mut s, r, &format!("{head}.b"), c, c, cfg.d_sim)?;
        add_mlp3(&mut s, r, &format!("{head}.w"), cfg.heads, cfg.rel_hidden, 1)?;
    }
    add_attention(&mut s, r, "topo.l2t.att", c)?;

    add_mlp3(&mut s, r, "te.enc", TE_INPUT, c, c)?;
    add_linear(&mut s, r, "te.box", c, 4)?;
    add_linear(&mut s, r, "te.cls", c, 3)?;
    Ok(s)
}

pub struct SceneInput<'a> {
    /// `[cells × channels]` BEV features.
    pub bev: Tensor,
    pub spec: &'a BevSpec,
    pub traffic: &'a [TrafficElement],
    pub te_seed: u64,
}

pub struct TopoOut {
    pub t_i2i: Var,
    pub t_p2i: Option<Var>,
    /// Fused lane-lane logits `[N×N]`.
    pub l2l: Var,
    pub l2t: Option<L2tOutput>,
    /// `[heads, N, N]`.
    pub w_i2i: Var,
    /// `[heads, NP, N]`.
    pub w_p2i: Option<Var>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LayerDiag {
    /// Fraction of BEV cells left open by the DDT mask, averaged over instances.
    pub mask_occupancy: f64,
    /// Mean entropy (nats) of the instance cross-attention rows.
    pub cross_entropy: f64,
}

pub struct LayerOutput {
    /// `[N×1]`.
    pub cls: Var,
    /// `[NP×2]` in meters.
    pub points: Var,
    /// `[NP×1]`; supervised to zero.
    pub z: Var,
    /// `[N, cells, 6]` when segmentation is enabled.
    pub ddt: Option<Var>,
    pub topo: TopoOut,
    pub q_ins: Var,
    pub q_pts: Var,
    pub diag: LayerDiag,
}

pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    pub traffic: Option<TrafficTokens>,
}

fn ffn(g: &mut Graph, s: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, s, x, &format!("{prefix}.l0"))?;
    let h = g.relu(h);
    linear(g, s, h, &format!("{prefix}.l1"))
}

/// Residual + norm after the attention step, then FFN with its own residual + norm.
fn finish_block(g: &mut Graph, s: &ParamStore, x: Var, delta: Var, prefix: &str) -> Result<Var> {
    let y = g.add(x, delta)?;
    let y = layer_norm(g, s, y, &format!("{prefix}.n0"))?;
    let f = ffn(g, s, y, &format!("{prefix}.ffn"))?;
    let z = g.add(y, f)?;
    layer_norm(g, s, z, &format!("{prefix}.n1"))
}

/// Sinusoidal embedding of normalized positions `[R×2]` → `[R × 4·PE_OCTAVES]`.
fn position_features(g: &mut Graph, pos: Var) -> Result<Var> {
    let mut f = vec![0.0; 2 * 2 * PE_OCTAVES];
    let cols = 2 * PE_OCTAVES;
    for o in 0..PE_OCTAVES {
        let w = std::f64::consts::PI * 2f64.powi(o as i32);
        f[o] = w; // row 0 (x) → columns 0..octaves
        f[cols + PE_OCTAVES + o] = w; // row 1 (y) → columns octaves..2·octaves
    }
    let fm = g.input(Tensor::matrix(2, cols, f)?);
    let ang = g.matmul(pos, fm)?;
    let s = g.sin(ang);
    let c = g.cos(ang);
    g.concat_cols(&[s, c])
}

fn windows(refs: &Tensor, spec: &BevSpec, r: usize) -> Window {
    let (h, w) = (spec.height_cells as isize, spec.width_cells as isize);
    let side = 2 * r + 1;
    let mut idx = Vec::with_capacity(refs.rows() * side * side);
    let mut valid = Vec::with_capacity(idx.capacity());
    for i in 0..refs.rows() {
        let x = refs.at(i, 0).clamp(0.0, 1.0);
        let y = refs.at(i, 1).clamp(0.0, 1.0);
        let cc = ((x * w as f64).floor() as isize).clamp(0, w - 1);
        let rc = ((y * h as f64).floor() as isize).clamp(0, h - 1);
        for dr in -(r as isize)..=r as isize {
            for dc in -(r as isize)..=r as isize {
                let (rr, c2) = (rc + dr, cc + dc);
                let ok = rr >= 0 && rr < h && c2 >= 0 && c2 < w;
                valid.push(ok);
                idx.push(if ok { (rr * w + c2) as usize } else { 0 });
            }
        }
    }
    Window {
        width: side * side,
        idx,
        valid,
    }
}

/// Attention-weighted mean offset from each reference point to the cells of its
/// window, per head: `[R × 2·heads]`, in units of the window half-width. The
/// weights of a row sum to one, so this is the weighted mean cell minus `ref_m`.
fn window_offsets(g: &mut Graph, weights: Var, ref_m: Var, win: &Window, spec: &BevSpec, heads: usize) -> Result<Var> {
    let (rows, width) = (g.value(ref_m).rows(), win.width);
    let half = (win.width as f64).sqrt() / 2.0 * spec.meters_per_cell;
    let mut centers = [vec![0.0; heads * rows * width], vec![0.0; heads * rows * width]];
    for i in 0..rows {
        for k in 0..width {
            if !win.valid[i * width + k] {
                continue;
            }
            let cell = win.idx[i * width + k];
            let c = spec.cell_center(cell / spec.width_cells, cell % spec.width_cells);
            for h in 0..heads {
                for d in 0..2 {
                    centers[d][(h * rows + i) * width + k] = c[d] / half;
                }
            }
        }
    }
    let w = g.reshape(weights, &[heads * rows, width])?;
    let mut cols = Vec::with_capacity(2 * heads);
    let mut at = Vec::with_capacity(2 * heads);
    for (d, c) in centers.into_iter().enumerate() {
        let c = g.input(Tensor::matrix(heads * rows, width, c)?);
        let m = g.mul(w, c)?;
        let m = g.sum_cols(m);
        let m = g.reshape(m, &[heads, rows])?;
        cols.push(g.transpose(m));
        let r = g.slice_cols(ref_m, d, 1)?;
        let r = g.scale(r, 1.0 / half);
        at.extend(std::iter::repeat(r).take(heads));
    }
    let mean = g.concat_cols(&cols)?;
    let at = g.concat_cols(&at)?;
    g.sub(mean, at)
}

/// `Σ_p softmax(w_agg)_p · x[n·P + p]` for every instance `n`.
fn aggregate(g: &mut Graph, s: &ParamStore, x: Var, l: usize, n: usize, p: usize) -> Result<Var> {
    let w = g.param(s, &format!("dec.{l}.w_agg"))?;
    let a = g.softmax(w, None)?;
    let a = g.transpose(a); // [P×1]
    let a = g.gather_rows(a, (0..n * p).map(|k| k % p).collect())?;
    let c = g.value(x).cols();
    let ones = g.input(Tensor::full(&[1, c], 1.0));
    let a = g.matmul(a, ones)?;
    let wx = g.mul(x, a)?;
    let m = g.mean_row_groups(wx, p)?;
    Ok(g.scale(m, p as f64))
}

/// DT-mode mask: a cell is open when the expected class is at most `k + 0.5`.
fn expected_class_mask(t: &Tensor, k_attend: usize) -> Vec<bool> {
    let (n, cells) = (t.shape()[0], t.shape()[1]);
    let mut blocked = vec![false; n * cells];
    for i in 0..n {
        let row = &mut blocked[i * cells..(i + 1) * cells];
        for (c, b) in row.iter_mut().enumerate() {
            let l = t.row(i * cells + c);
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let ex: f64 = e.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / z;
            *b = ex > k_attend as f64 + 0.5;
        }
        if row.iter().all(|&b| b) {
            row.iter_mut().for_each(|b| *b = false);
        }
    }
    blocked
}

fn row_entropy(w: &Tensor) -> f64 {
    let rows = w.rows();
    let mut tot = 0.0;
    for r in 0..rows {
        tot -= w.row(r).iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    tot / rows.max(1) as f64
}

pub fn decoder_forward(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    input: &SceneInput,
) -> Result<DecoderOutput> {
    cfg.validate()?;
    let (n, p, h) = (cfg.n_queries, cfg.n_points, cfg.heads);
    let spec = input.spec;
    let cells = spec.cells();
    if input.bev.rows() != cells {
        return Err(Error::Input(format!(
            "BEV has {} cells, spec says {cells}",
            input.bev.rows()
        )));
    }

    let bev = g.input(input.bev.clone());
    let bev_kv = linear(g, s, bev, "bev.embed")?;
    let seg = cfg.seg_supervision;
    let pix = if seg != SegSupervision::Off {
        Some(mlp3(g, s, bev, "bev.mask")?)
    } else {
        None
    };
    let extent = g.input(Tensor::new(vec![2], vec![spec.width_m(), spec.height_m()])?);
    let p2p = cfg.p2p_constrain.then(|| build_p2p_mask(n, p));
    let traffic = te_encoder(g, s, input.traffic, cfg.te_noise, input.te_seed)?;

    let mut q_ins = g.param(s, "query.ins")?;
    let mut q_pts = g.param(s, "query.pts")?;
    let mut ref_logits = g.param(s, "query.ref")?;
    let mut prev_ddt: Option<Tensor> = None;
    let mut prev_topo: Option<(Var, Option<Var>)> = None;
    let mut layers = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let pre = format!("dec.{l}");
        let ref_norm = g.sigmoid(ref_logits);

        // (a) masks and biases from the previous layer
        let blocked_ins = match (&prev_ddt, seg) {
            (Some(t), SegSupervision::Dt) => Some(expected_class_mask(t, cfg.k_attend)),
            (Some(t), _) => Some(ddt_to_attention_mask(t, cfg.k_attend)?),
            (None, _) => None,
        };
        let (m_i2i, m_p2i) = if l == 0 {
            let ref_m = g.mul_row(ref_norm, extent)?;
            let (ti, tp) = geometric_prior_graph(g, ref_m, n, p, cfg.prior_sigma)?;
            let mi = relation_encoder(g, s, ti, "rel.i2i")?;
            let mp = if cfg.point_topology() {
                Some(relation_encoder(g, s, tp, "rel.p2i")?)
            } else {
                None
            };
            (Some(mi), mp)
        } else if cfg.cyclic {
            let (ti, tp) = prev_topo.expect("set after layer 0");
            let mi = relation_encoder(g, s, ti, "rel.i2i")?;
            let mp = match tp {
                Some(tp) => Some(relation_encoder(g, s, tp, "rel.p2i")?),
                None => None,
            };
            (Some(mi), mp)
        } else {
            (None, None)
        };

        // (b) instance-aware module
        let cross = masked_attention(
            g,
            s,
            &format!("{pre}.ins_cross"),
            q_ins,
            bev_kv,
            bev_kv,
            None,
            blocked_ins.as_deref(),
            h,
        )?;
        let diag = LayerDiag {
            mask_occupancy: blocked_ins
                .as_ref()
                .map_or(1.0, |b| b.iter().filter(|&&x| !x).count() as f64 / b.len() as f64),
            cross_entropy: row_entropy(g.value(cross.weights)),
        };
        let qi = finish_block(g, s, q_ins, cross.values, &format!("{pre}.ins_cross"))?;
        let selfa = masked_attention(g, s, &format!("{pre}.ins_self"), qi, qi, qi, m_i2i, None, h)?;
        let w_i2i = selfa.weights;
        let qi = finish_block(g, s, qi, selfa.values, &format!("{pre}.ins_self"))?;

        // point-aware module and integrator
        let (q_ins_hat, q_pts_hat, w_p2i) = if cfg.has_points() {
            let pe_in = position_features(g, ref_norm)?;
            let pe = linear(g, s, pe_in, "pe.pts")?;
            let qk = g.add(q_pts, pe)?;
            let line = masked_attention(
                g,
                s,
                &format!("{pre}.pts_self"),
                qk,
                qk,
                q_pts,
                None,
                p2p.as_deref(),
                h,
            )?;
            let qp = finish_block(g, s, q_pts, line.values, &format!("{pre}.pts_self"))?;
            let qk = g.add(qp, pe)?;
            let win = Rc::new(windows(g.value(ref_norm), spec, cfg.window_radius));
            let local = window_attention(g, s, &format!("{pre}.pts_cross"), qk, bev_kv, bev_kv, win.clone(), h)?;
            // where the attended cells lie relative to the point
            let ref_m = g.mul_row(ref_norm, extent)?;
            let off = window_offsets(g, local.weights, ref_m, &win, spec, h)?;
            let off = linear(g, s, off, &format!("{pre}.pts_cross.rel"))?;
            let delta = g.add(local.values, off)?;
            let qp = finish_block(g, s, qp, delta, &format!("{pre}.pts_cross"))?;
            if cfg.integrator {
                let att = masked_attention(g, s, &format!("{pre}.integ"), qp, qi, qi, m_p2i, None, h)?;
                let qp_hat = g.add(qp, att.values)?;
                let qi_hat = aggregate(g, s, qp_hat, l, n, p)?;
                (qi_hat, qp_hat, Some(att.weights))
            } else {
                (qi, qp, None)
            }
        } else {
            let rep = g.repeat_rows(qi, p);
            let emb = g.param(s, "query.pt_embed")?;
            let emb = g.gather_rows(emb, (0..n * p).map(|k| k % p).collect())?;
            (qi, g.add(rep, emb)?, None)
        };

        // (c) heads
        let cls = linear(g, s, q_ins_hat, "head.cls")?;
        let reg = mlp3(g, s, q_pts_hat, "head.pts")?;
        let dxy = g.slice_cols(reg, 0, 2)?;
        let z = g.slice_cols(reg, 2, 1)?;
        let u = g.add(dxy, ref_logits)?;
        let pn = g.sigmoid(u);
        let points = g.mul_row(pn, extent)?;
        let ddt = match pix {
            Some(pix) => {
                let e = mlp3(g, s, q_ins_hat, "head.mask")?;
                let w = g.param(s, "head.ddt_w")?;
                let b = g.param(s, "head.ddt_b")?;
                let ml = g.mask_logits(e, pix, w)?;
                Some(g.add_row(ml, b)?)
            }
            None => None,
        };

        // (d) topology
        let fw = cfg.forward_weights;
        let t_i2i = i2i_head(g, s, q_ins_hat, fw.then_some(w_i2i))?;
        let (t_p2i, l2l) = if cfg.point_topology() {
            let w = if fw { w_p2i } else { None };
            let t = p2i_head(g, s, q_pts_hat, q_ins_hat, w)?;
            let f = fuse(g, t_i2i, t, p, cfg.fuse_weight)?;
            (Some(t), f)
        } else {
            (None, t_i2i)
        };
        let l2t = match &traffic {
            Some(te) => Some(l2t_heads(
                g,
                s,
                q_ins_hat,
                q_pts_hat,
                te.q_te,
                &L2tOptions {
                    heads: h,
                    use_weights: fw,
                    point_branch: cfg.point_topology(),
                    fuse_weight: cfg.fuse_weight,
                },
            )?),
            None => None,
        };

        if let Some(d) = ddt {
            prev_ddt = Some(g.value(d).clone());
        }
        prev_topo = Some((t_i2i, t_p2i));
        if !g.value(cls).is_finite() {
            return Err(Error::Numeric(format!("non-finite class logits at layer {l}")));
        }
        layers.push(LayerOutput {
            cls,
            points,
            z,
            ddt,
            topo: TopoOut {
                t_i2i,
                t_p2i,
                l2l,
                l2t,
                w_i2i,
                w_p2i,
            },
            q_ins: q_ins_hat,
            q_pts: q_pts_hat,
            diag,
        });
        q_ins = q_ins_hat;
        q_pts = q_pts_hat;
        ref_logits = u;
    }
    Ok(DecoderOutput { layers, traffic })
}
