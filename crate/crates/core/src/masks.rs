//! Relation masks and attention biases.
//!
//! Block masks are flat `bool` slices with `true` meaning blocked. Topology logits
//! become additive attention biases through the relation encoder.

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};
use crate::nn::layers::mlp3;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::scene::DDT_CLASSES;

pub const PRIOR_CLAMP: f64 = 1e-4;

/// `NP×NP` point-to-point mask: points only see points of their own instance.
pub fn build_p2p_mask(n: usize, p: usize) -> Vec<bool> {
    let np = n * p;
    let mut m = vec![true; np * np];
    for a in 0..np {
        let i = a / p;
        for b in i * p..(i + 1) * p {
            m[a * np + b] = false;
        }
    }
    m
}

fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln()
}

pub fn prior_score(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (sigma * sigma)).exp().clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP)
}

/// Endpoint-to-startpoint Gaussian prior. Returns `t_i2i` (`N×N`) and `t_p2i`
/// (`NP×N`, each instance row repeated over its `P` points).
pub fn geometric_prior(lines: &[Vec<Point>], sigma: f64) -> Result<(Tensor, Tensor)> {
    let n = lines.len();
    let p = lines.first().map_or(0, Vec::len);
    for (i, l) in lines.iter().enumerate() {
        if l.len() < 2 || l.len() != p || l.iter().all(|&q| q == l[0]) {
            return Err(Error::Input(format!("degenerate polyline {i}")));
        }
    }
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[i * n + j] = if i == j {
                logit(PRIOR_CLAMP)
            } else {
                logit(prior_score(dist(*lines[i].last().unwrap(), lines[j][0]), sigma))
            };
        }
    }
    let mut tp = Vec::with_capacity(n * p * n);
    for i in 0..n {
        for _ in 0..p {
            tp.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
    }
    Ok((Tensor::matrix(n, n, t)?, Tensor::matrix(n * p, n, tp)?))
}

/// The same prior on the tape, from predicted points `[N·P × 2]` in meters.
pub fn geometric_prior_graph(g: &mut Graph, points: Var, n: usize, p: usize, sigma: f64) -> Result<(Var, Var)> {
    let ends = g.gather_rows(points, (0..n).map(|i| i * p + p - 1).collect())?;
    let starts = g.gather_rows(points, (0..n).map(|i| i * p).collect())?;
    let ones_row = g.input(Tensor::full(&[1, n], 1.0));
    let e2 = g.mul(ends, ends)?;
    let e2 = g.sum_cols(e2);
    let e2 = g.matmul(e2, ones_row)?; // [N×N], row i = |e_i|²
    let s2 = g.mul(starts, starts)?;
    let s2 = g.sum_cols(s2);
    let s2t = g.transpose(s2);
    let ones_col = g.input(Tensor::full(&[n, 1], 1.0));
    let s2 = g.matmul(ones_col, s2t)?; // col j = |s_j|²
    let cross = g.matmul_bt(ends, starts)?;
    let cross = g.scale(cross, -2.0);
    let d2 = g.add(e2, s2)?;
    let d2 = g.add(d2, cross)?;
    let arg = g.scale(d2, -1.0 / (sigma * sigma));
    let s = g.exp(arg);
    let s = g.clamp(s, PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
    let ls = g.log(s);
    let one_minus = g.scale(s, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let l1s = g.log(one_minus);
    let t = g.sub(ls, l1s)?;
    let off = g.input(Tensor::new(
        vec![n, n],
        (0..n * n).map(|k| f64::from(u8::from(k / n != k % n))).collect(),
    )?);
    let diag = g.input(Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|k| if k / n == k % n { logit(PRIOR_CLAMP) } else { 0.0 })
            .collect(),
    )?);
    let t = g.mul(t, off)?;
    let t_i2i = g.add(t, diag)?;
    let t_p2i = g.repeat_rows(t_i2i, p);
    Ok((t_i2i, t_p2i))
}

/// Maps every logit independently through `sigmoid` and a 1→h→h→1 mlp3.
pub fn relation_encoder(g: &mut Graph, store: &ParamStore, logits: Var, prefix: &str) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let n = g.value(logits).len();
    let x = g.sigmoid(logits);
    let x = g.reshape(x, &[n, 1])?;
    let y = mlp3(g, store, x, prefix)?;
    g.reshape(y, &shape)
}

/// Turns `[N × cells × 6]` DDT logits into an `N × cells` block mask. A cell is open
/// when its argmax class (lowest index on ties) is at most `k_attend`; an instance
/// with no open cell is fully opened.
pub fn ddt_to_attention_mask(ddt_logits: &Tensor, k_attend: usize) -> Result<Vec<bool>> {
    if k_attend >= DDT_CLASSES || ddt_logits.cols() != DDT_CLASSES || ddt_logits.shape().len() != 3 {
        return Err(Error::Config(format!(
            "k_attend {k_attend} with logits {:?}",
            ddt_logits.shape()
        )));
    }
    let (n, cells) = (ddt_logits.shape()[0], ddt_logits.shape()[1]);
    let mut blocked = vec![false; n * cells];
    for i in 0..n {
        let row = &mut blocked[i * cells..(i + 1) * cells];
        for (c, b) in row.iter_mut().enumerate() {
            *b = argmax(ddt_logits.row(i * cells + c)) > k_attend;
        }
        if row.iter().all(|&b| b) {
            row.iter_mut().for_each(|b| *b = false);
        }
    }
    Ok(blocked)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2p_small_cases() {
        assert!(build_p2p_mask(1, 3).iter().all(|&b| !b));
        let m = build_p2p_mask(2, 2);
        assert!(m[3]);
        assert_eq!(m.iter().filter(|&&b| !b).count(), 2 * 4);
    }

    #[test]
    fn prior_arithmetic() {
        let sigma = 2.0;
        let touching = vec![vec![[0.0, 0.0], [0.0, 1.0]], vec![[0.0, 1.0], [0.0, 2.0]]];
        let (t, tp) = geometric_prior(&touching, sigma).unwrap();
        assert!((t.at(0, 1) - (0.9999f64 / 0.0001).ln()).abs() < 1e-9);
        assert!((t.at(0, 1) - 9.21).abs() < 5e-3);
        assert!((t.at(0, 0) + 9.21).abs() < 5e-3);
        assert_eq!(tp.row(1), t.row(0));

        let apart = vec![vec![[0.0, 0.0], [0.0, 1.0]], vec![[2.0, 1.0], [2.0, 2.0]]];
        let (t, _) = geometric_prior(&apart, sigma).unwrap();
        let e = (-1f64).exp();
        assert!((t.at(0, 1) - (e / (1.0 - e)).ln()).abs() < 1e-12);
        // exact value is -0.5413
        assert!((t.at(0, 1) - (-0.540)).abs() < 2e-3);
    }

    #[test]
    fn ddt_mask_cases() {
        let zeros = Tensor::zeros(&[2, 4, 6]);
        assert!(ddt_to_attention_mask(&zeros, 3).unwrap().iter().all(|&b| !b));

        let mut five = Tensor::zeros(&[1, 4, 6]);
        for c in 0..4 {
            five.data_mut()[c * 6 + 5] = 10.0;
        }
        assert!(ddt_to_attention_mask(&five, 3).unwrap().iter().all(|&b| !b));

        // classes [[0,5],[3,2]] with k = 3
        let mut hand = Tensor::zeros(&[1, 4, 6]);
        for (c, k) in [0usize, 5, 3, 2].into_iter().enumerate() {
            hand.data_mut()[c * 6 + k] = 1.0;
        }
        assert_eq!(
            ddt_to_attention_mask(&hand, 3).unwrap(),
            vec![false, true, false, false]
        );
    }
}
