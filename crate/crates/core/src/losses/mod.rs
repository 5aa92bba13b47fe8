//! Training objectives: set matching, detection, segmentation and topology losses.

mod hungarian;
mod total;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::scene::DDT_CLASSES;

pub use hungarian::hungarian;
pub use total::{match_layer, total_loss, LossBreakdown, LossOutput, SceneTargets};

/// Probability clamp used by the adaptive topological loss.
pub const ATL_CLAMP: f64 = 1e-7;
/// Additive smoothing of the soft dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopoLoss {
    /// Focal classification on every entry.
    Focal,
    /// Soft dice over the whole matrix.
    Dice,
    /// Adaptive topological loss.
    #[serde(alias = "adaptive")]
    Atl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_mask: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub topo: TopoLoss,
    pub lambda_neg: f64,
    pub lambda_pos: f64,
    pub w_topo: f64,
    pub w_te: f64,
    /// Supervise every decoder layer, not just the last.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_reg: 5.0,
            lambda_mask: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            topo: TopoLoss::Atl,
            lambda_neg: 5.0,
            lambda_pos: 400.0,
            w_topo: 0.05,
            w_te: 1.0,
            deep_supervision: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_reg,
            self.lambda_mask,
            self.focal_gamma,
            self.lambda_neg,
            self.lambda_pos,
            self.w_topo,
            self.w_te,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn check_binary(labels: &[f64]) -> Result<()> {
    if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("label {v} is not binary")));
    }
    Ok(())
}

fn constant_like(g: &mut Graph, like: Var, data: Vec<f64>) -> Result<Var> {
    let shape = g.shape(like).to_vec();
    Ok(g.input(Tensor::new(shape, data)?))
}

/// Sigmoid focal loss, averaged over entries.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    check_binary(targets)?;
    if targets.len() != g.value(logits).len() {
        return Err(Error::Input("focal targets do not match logits".into()));
    }
    // s = ±x so that p_t = sigmoid(s)
    let sign = constant_like(g, logits, targets.iter().map(|&y| 2.0 * y - 1.0).collect())?;
    let at = constant_like(
        g,
        logits,
        targets.iter().map(|&y| if y == 1.0 { -alpha } else { alpha - 1.0 }).collect(),
    )?;
    let s = g.mul(logits, sign)?;
    let log_pt = g.log_sigmoid(s);
    let ns = g.scale(s, -1.0);
    let one_minus = g.sigmoid(ns);
    let modulate = g.powf(one_minus, gamma);
    let t = g.mul(modulate, log_pt)?;
    let t = g.mul(t, at)?;
    Ok(g.mean(t))
}

/// `mean(y·λ_pos·(−ln x) + (1−y)·exp(λ_neg·x)·(−ln(1−x)))` with `x` the clamped
/// sigmoid of the logits.
pub fn adaptive_topo_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[f64],
    lambda_neg: f64,
    lambda_pos: f64,
) -> Result<Var> {
    check_binary(labels)?;
    if labels.len() != g.value(logits).len() {
        return Err(Error::Input("topology labels do not match logits".into()));
    }
    let x = g.sigmoid(logits);
    let x = g.clamp(x, ATL_CLAMP, 1.0 - ATL_CLAMP);
    let pos_w = constant_like(g, logits, labels.iter().map(|&y| -y * lambda_pos).collect())?;
    let neg_mask = constant_like(g, logits, labels.iter().map(|&y| y - 1.0).collect())?;
    let lx = g.log(x);
    let pos = g.mul(lx, pos_w)?;
    let nx = g.scale(x, -1.0);
    let one_minus = g.add_scalar(nx, 1.0);
    let l1x = g.log(one_minus);
    let ex = g.scale(x, lambda_neg);
    let weight = g.exp(ex);
    let neg = g.mul(weight, l1x)?;
    let neg = g.mul(neg, neg_mask)?;
    let t = g.add(pos, neg)?;
    Ok(g.mean(t))
}

/// `1 − (2Σpy + s) / (Σp + Σy + s)` over all entries, `p = sigmoid(logits)`.
pub fn dice_topo_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    check_binary(labels)?;
    let p = g.sigmoid(logits);
    let y = constant_like(g, logits, labels.to_vec())?;
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let sp = g.sum(p);
    let sy: f64 = labels.iter().sum();
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let den = g.add_scalar(sp, sy + DICE_SMOOTH);
    let r = g.div(num, den)?;
    let r = g.scale(r, -1.0);
    Ok(g.add_scalar(r, 1.0))
}

pub fn topo_loss(g: &mut Graph, logits: Var, labels: &[f64], cfg: &LossConfig) -> Result<Var> {
    match cfg.topo {
        TopoLoss::Atl => adaptive_topo_loss(g, logits, labels, cfg.lambda_neg, cfg.lambda_pos),
        TopoLoss::Focal => focal_loss(g, logits, labels, cfg.focal_alpha, cfg.focal_gamma),
        TopoLoss::Dice => dice_topo_loss(g, logits, labels),
    }
}

/// Cross-entropy plus macro soft dice over the six classes, for `k` instances whose
/// logits are stacked as `[k·cells × 6]`; `targets` holds `k·cells` class ids.
pub fn ddt_seg_loss(g: &mut Graph, logits: Var, targets: &[u8], cells: usize) -> Result<Var> {
    let t = g.value(logits);
    if t.cols() != DDT_CLASSES || t.rows() != targets.len() || cells == 0 || targets.len() % cells != 0 {
        return Err(Error::Input(format!(
            "segmentation logits {:?} vs {} targets",
            t.shape(),
            targets.len()
        )));
    }
    let rows = targets.len();
    let k = rows / cells;
    let mut onehot = vec![0.0; rows * DDT_CLASSES];
    for (r, &c) in targets.iter().enumerate() {
        if c as usize >= DDT_CLASSES {
            return Err(Error::Input(format!("class {c} out of range")));
        }
        onehot[r * DDT_CLASSES + c as usize] = 1.0;
    }
    let y = g.input(Tensor::matrix(rows, DDT_CLASSES, onehot.clone())?);
    let ls = g.log_softmax(logits);
    let ly = g.mul(ls, y)?;
    let ce = g.sum(ly);
    let ce = g.scale(ce, -1.0 / rows as f64);

    let p = g.softmax(logits, None)?;
    let py = g.mul(p, y)?;
    let inter = g.mean_row_groups(py, cells)?;
    let inter = g.scale(inter, 2.0 * cells as f64);
    let num = g.add_scalar(inter, DICE_SMOOTH);
    let sp = g.mean_row_groups(p, cells)?;
    let sp = g.scale(sp, cells as f64);
    let mut sy = vec![0.0; k * DDT_CLASSES];
    for (r, row) in onehot.chunks(DDT_CLASSES).enumerate() {
        for (c, v) in row.iter().enumerate() {
            sy[(r / cells) * DDT_CLASSES + c] += v + DICE_SMOOTH / cells as f64;
        }
    }
    let sy = g.input(Tensor::matrix(k, DDT_CLASSES, sy)?);
    let den = g.add(sp, sy)?;
    let ratio = g.div(num, den)?;
    let dice = g.mean(ratio);
    let dice = g.scale(dice, -1.0);
    let dice = g.add_scalar(dice, 1.0);
    g.add(ce, dice)
}

/// Continuous variant: L1 between the expected normalized distance under the class
/// softmax and the target distance field.
pub fn dt_seg_loss(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let t = g.value(logits);
    if t.cols() != DDT_CLASSES || t.rows() != targets.len() {
        return Err(Error::Input("distance targets do not match logits".into()));
    }
    let centers = (0..DDT_CLASSES).map(|k| (k as f64 + 0.5) / DDT_CLASSES as f64).collect();
    let centers = g.input(Tensor::matrix(DDT_CLASSES, 1, centers)?);
    let p = g.softmax(logits, None)?;
    let u = g.matmul(p, centers)?;
    let y = g.input(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let d = g.sub(u, y)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}
