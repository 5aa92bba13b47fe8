use std::rc::Rc;

use lanetopo::nn::layers::{self, add_attention, add_mlp3};
use lanetopo::nn::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor, Var, Window};
use lanetopo::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_param(s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], lo: f64, hi: f64) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    s.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
}

/// Reduces any tensor to a scalar with a fixed random weighting so every output
/// entry has a distinct gradient.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let t = g.value(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.input(Tensor::new(t.shape().to_vec(), w)?);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

fn check(s: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) {
    let r = grad_check(s, f, &GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{:#?}", r);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    rand_param(&mut s, &mut rng, "a", &[3, 4], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "b", &[3, 4], 0.5, 2.0);
    rand_param(&mut s, &mut rng, "r", &[4], -1.0, 1.0);
    check(&mut s, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let r = g.param(s, "r")?;
        let x = g.add(a, b)?;
        let x = g.sub(x, a)?;
        let x = g.mul(x, a)?;
        let x = g.div(x, b)?;
        let x = g.add_row(x, r)?;
        let x = g.mul_row(x, r)?;
        let x = g.scale(x, 1.7);
        let x = g.add_scalar(x, 0.3);
        let s1 = g.sigmoid(x);
        let s2 = g.log_sigmoid(x);
        let s3 = g.exp(x);
        let lb = g.log(b);
        let sn = g.sin(x);
        let cs = g.cos(x);
        let ab = g.abs(x);
        let cl = g.clamp(x, -0.2, 0.2);
        let pw = g.powf(b, 1.5);
        let rl = g.relu(x);
        let mut acc = s1;
        for v in [s2, s3, lb, sn, cs, ab, cl, pw, rl] {
            acc = g.add(acc, v)?;
        }
        probe(g, acc, 9)
    });
}

#[test]
fn matrix_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    rand_param(&mut s, &mut rng, "a", &[3, 4], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "b", &[4, 5], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "c", &[2, 4], -1.0, 1.0);
    check(&mut s, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let c = g.param(s, "c")?;
        let ab = g.matmul(a, b)?; // 3x5
        let act = g.matmul_bt(a, c)?; // 3x2
        let cat = g.concat_cols(&[ab, act])?; // 3x7
        let t = g.transpose(cat); // 7x3
        let sl = g.slice_cols(t, 1, 2)?; // 7x2
        let gr = g.gather_rows(sl, vec![0, 3, 3, 6])?; // 4x2
        let rep = g.repeat_rows(gr, 3); // 12x2
        let mg = g.mean_row_groups(rep, 2)?; // 6x2
        let cr = g.concat_rows(&[mg, gr])?; // 10x2
        let rs = g.reshape(cr, &[5, 4])?;
        let sc = g.sum_cols(rs);
        let sr = g.sum_rows(rs);
        let m = g.mean(rs);
        let p1 = probe(g, sc, 1)?;
        let p2 = probe(g, sr, 2)?;
        let x = g.add(p1, p2)?;
        g.add(x, m)
    });
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    rand_param(&mut s, &mut rng, "x", &[2, 3, 5], -2.0, 2.0);
    rand_param(&mut s, &mut rng, "g", &[5], 0.5, 1.5);
    rand_param(&mut s, &mut rng, "b", &[5], -0.5, 0.5);
    let blocked: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
    check(&mut s, move |g, s| {
        let x = g.param(s, "x")?;
        let gm = g.param(s, "g")?;
        let bt = g.param(s, "b")?;
        let ln = g.layer_norm(x, gm, bt)?;
        let sm = g.softmax(ln, Some(&blocked))?;
        let ls = g.log_softmax(x);
        let p1 = probe(g, sm, 4)?;
        let p2 = probe(g, ls, 5)?;
        g.add(p1, p2)
    });
}

#[test]
fn attention_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    rand_param(&mut s, &mut rng, "q", &[3, 4], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "k", &[5, 4], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "bias", &[3, 5], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "e", &[2, 3], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "f", &[4, 3], -1.0, 1.0);
    rand_param(&mut s, &mut rng, "w", &[3, 6], -1.0, 1.0);
    let win = Rc::new(Window {
        width: 3,
        idx: vec![0, 1, 2, 2, 3, 4, 4, 0, 1],
        valid: vec![true, true, false, true, true, true, true, false, true],
    });
    check(&mut s, move |g, s| {
        let q = g.param(s, "q")?;
        let k = g.param(s, "k")?;
        let b = g.param(s, "bias")?;
        let hl = g.head_logits(q, k, 2, 0.7)?;
        let hl = g.add_head_bias(hl, b)?;
        let w = g.softmax(hl, None)?;
        let mix = g.head_mix(w, k, 2)?;
        let pairs = g.heads_to_pairs(w)?;
        let wl = g.window_logits(q, k, win.clone(), 2, 0.5)?;
        let blocked: Vec<bool> = win.valid.iter().map(|v| !v).collect();
        let ww = g.softmax(wl, Some(&blocked))?;
        let wm = g.window_mix(ww, k, win.clone(), 2)?;
        let e = g.param(s, "e")?;
        let f = g.param(s, "f")?;
        let wk = g.param(s, "w")?;
        let ml = g.mask_logits(e, f, wk)?;
        let mut acc = probe(g, mix, 1)?;
        for (i, v) in [pairs, wm, ml].into_iter().enumerate() {
            let p = probe(g, v, 10 + i as u64)?;
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    });
}

#[test]
fn mlp3_with_softmax_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    add_mlp3(&mut s, &mut rng, "m", 3, 6, 4).unwrap();
    add_attention(&mut s, &mut rng, "att", 4).unwrap();
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    check(&mut s, move |g, s| {
        let xi = g.input(x.clone());
        let h = layers::mlp3(g, s, xi, "m")?;
        let a = layers::masked_attention(g, s, "att", h, h, h, None, None, 2)?;
        let sm = g.softmax(a.values, None)?;
        probe(g, sm, 3)
    });
}
