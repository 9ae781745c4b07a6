use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::config::NetConfig;
use super::embed::sinusoid;
use super::params::{BlockIx, Params};
use super::tokens::TokenBatch;
use crate::error::{ModelError, Result};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct BlockCache {
    mods: Array1<f64>,
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    o: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    u_pre: Array2<f64>,
    u: Array2<f64>,
    f: Array2<f64>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    order: Vec<usize>,
    n_total: usize,
    x: Array2<f64>,
    t_emb: Array1<f64>,
    c: Array1<f64>,
    s: Array1<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    mod_f: Array1<f64>,
    a_f: Array2<f64>,
}

/// Valid token indices in a canonical order that depends only on the token
/// contents, so the computation is identical under any permutation of tracks.
fn canonical_order(batch: &TokenBatch) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..batch.n_tokens()).filter(|&i| batch.mask[i]).collect();
    let cmp_rows = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> Ordering {
        for (x, y) in a.iter().zip(b.iter()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    };
    idx.sort_by(|&i, &j| {
        cmp_rows(batch.tokens.row(i), batch.tokens.row(j))
            .then_with(|| cmp_rows(batch.position_encoding.row(i), batch.position_encoding.row(j)))
    });
    idx
}

fn gather(m: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    m.select(Axis(0), order)
}

fn layer_norm(x: &Array2<f64>) -> LnCache {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    LnCache { xhat, inv_std }
}

fn layer_norm_backward(cache: &LnCache, dxhat: &Array2<f64>) -> Array2<f64> {
    let (n, d) = dxhat.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d as f64;
        let mean_gx = g.dot(&xh) / d as f64;
        let is = cache.inv_std[i];
        for ((o, gv), xv) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = is * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

/// `xhat * (1 + scale) + shift`, row-broadcast.
fn modulate(xhat: &Array2<f64>, shift: ArrayView1<f64>, scale: ArrayView1<f64>) -> Array2<f64> {
    let one_plus = scale.mapv(|v| 1.0 + v);
    xhat * &one_plus + &shift
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sg = 1.0 / (1.0 + (-x).exp());
    sg * (1.0 + x * (1.0 - sg))
}

fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_batch(cfg: &NetConfig, params: &Params, batch: &TokenBatch) -> Result<()> {
    let n = batch.n_tokens();
    if batch.tokens.ncols() != cfg.token_dim() {
        return Err(ModelError::shape(format!(
            "token width {} != {}",
            batch.tokens.ncols(),
            cfg.token_dim()
        )));
    }
    if batch.position_encoding.dim() != (n, cfg.width) || batch.mask.len() != n {
        return Err(ModelError::shape("position encoding or mask does not match tokens"));
    }
    if params.layout.ix.blocks.len() != cfg.depth
        || params.mat(params.layout.ix.input_w).dim() != (cfg.token_dim(), cfg.width)
    {
        return Err(ModelError::shape("parameters were built for a different configuration"));
    }
    if batch.tau == 0 || batch.tau > cfg.diffusion_steps {
        return Err(ModelError::config(format!("tau {} out of range", batch.tau)));
    }
    Ok(())
}

fn global_condition(cfg: &NetConfig, params: &Params, batch: &TokenBatch) -> (Array1<f64>, Array1<f64>) {
    let ix = &params.layout.ix;
    let t_emb = sinusoid(batch.tau as f64 / cfg.diffusion_steps as f64, cfg.width);
    let mut c = t_emb.dot(&params.mat(ix.t_embed_w)) + params.vec(ix.t_embed_b);
    if let Some(d) = batch.displacement {
        let wd = params.mat(ix.d_embed_w);
        c = c + &(&wd.row(0) * d[0]) + &(&wd.row(1) * d[1]);
    }
    (t_emb, c)
}

fn block_forward(cfg: &NetConfig, params: &Params, bx: &BlockIx, h: &mut Array2<f64>, s: &Array1<f64>) -> BlockCache {
    let d = cfg.width;
    let hd = cfg.head_dim();
    let n = h.nrows();
    let mods = s.dot(&params.mat(bx.modulation_w)) + params.vec(bx.modulation_b);
    let chunk = |k: usize| mods.slice(s![k * d..(k + 1) * d]);

    let ln1 = layer_norm(h);
    let a1 = modulate(&ln1.xhat, chunk(0), chunk(1));
    let qkv = linear(a1.view(), params.mat(bx.qkv_w), params.vec(bx.qkv_b));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attn = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let q = qkv.slice(s![.., head * hd..(head + 1) * hd]);
        let k = qkv.slice(s![.., d + head * hd..d + (head + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + head * hd..2 * d + (head + 1) * hd]);
        let mut p = q.dot(&k.t()) * scale;
        softmax_rows(&mut p);
        attn.slice_mut(s![.., head * hd..(head + 1) * hd]).assign(&p.dot(&v));
        probs.push(p);
    }
    let o = linear(attn.view(), params.mat(bx.proj_w), params.vec(bx.proj_b));
    *h += &(&o * &chunk(2));

    let ln2 = layer_norm(h);
    let a2 = modulate(&ln2.xhat, chunk(3), chunk(4));
    let u_pre = linear(a2.view(), params.mat(bx.fc1_w), params.vec(bx.fc1_b));
    let u = u_pre.mapv(gelu);
    let f = linear(u.view(), params.mat(bx.fc2_w), params.vec(bx.fc2_b));
    *h += &(&f * &chunk(5));
    BlockCache { mods, ln1, a1, qkv, probs, attn, o, ln2, a2, u_pre, u, f }
}

/// Denoiser forward pass. Returns the predicted clean target `[N, P]`, zero on
/// padded tracks, and the cache needed for [`backward`].
pub fn forward(cfg: &NetConfig, params: &Params, batch: &TokenBatch) -> Result<(Array2<f64>, ForwardCache)> {
    check_batch(cfg, params, batch)?;
    let ix = &params.layout.ix;
    let order = canonical_order(batch);
    let x = gather(&batch.tokens, &order);
    let pe = gather(&batch.position_encoding, &order);
    let (t_emb, c) = global_condition(cfg, params, batch);
    let s = c.mapv(silu);

    let mut h = linear(x.view(), params.mat(ix.input_w), params.vec(ix.input_b)) + &pe;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for bx in &ix.blocks {
        blocks.push(block_forward(cfg, params, bx, &mut h, &s));
    }
    let d = cfg.width;
    let mod_f = s.dot(&params.mat(ix.final_mod_w)) + params.vec(ix.final_mod_b);
    let ln_f = layer_norm(&h);
    let a_f = modulate(&ln_f.xhat, mod_f.slice(s![..d]), mod_f.slice(s![d..]));
    let y = linear(a_f.view(), params.mat(ix.out_w), params.vec(ix.out_b));

    let mut out = Array2::zeros((batch.n_tokens(), cfg.target_dim()));
    for (r, &i) in order.iter().enumerate() {
        out.row_mut(i).assign(&y.row(r));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("denoiser output".into()));
    }
    let cache = ForwardCache {
        order,
        n_total: batch.n_tokens(),
        x,
        t_emb,
        c,
        s,
        blocks,
        ln_f,
        mod_f,
        a_f,
    };
    Ok((out, cache))
}

pub fn predict(cfg: &NetConfig, params: &Params, batch: &TokenBatch) -> Result<Array2<f64>> {
    forward(cfg, params, batch).map(|(y, _)| y)
}

fn accumulate_linear(
    grads: &mut Params,
    w: usize,
    b: Option<usize>,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) {
    let gw = x.t().dot(&dy);
    grads.mat_mut(w).scaled_add(1.0, &gw);
    if let Some(b) = b {
        grads.vec_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
}

/// Backward for `a = xhat * (1 + scale) + shift`: returns `(dxhat, dshift, dscale)`.
fn modulate_backward(
    da: &Array2<f64>,
    xhat: &Array2<f64>,
    scale: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dshift = da.sum_axis(Axis(0));
    let dscale = (da * xhat).sum_axis(Axis(0));
    let one_plus = scale.mapv(|v| 1.0 + v);
    (da * &one_plus, dshift, dscale)
}

/// Accumulates parameter gradients of `sum(d_out * output)` into `grads` and
/// returns the gradient with respect to the input tokens `[N, token_dim]`,
/// which is zero on padded tracks.
pub fn backward(
    cfg: &NetConfig,
    params: &Params,
    batch: &TokenBatch,
    cache: &ForwardCache,
    d_out: ArrayView2<f64>,
    grads: &mut Params,
) -> Result<Array2<f64>> {
    params.check_same(grads)?;
    if d_out.dim() != (cache.n_total, cfg.target_dim()) {
        return Err(ModelError::shape("output gradient shape mismatch"));
    }
    let ix = &params.layout.ix;
    let d = cfg.width;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let dy = d_out.select(Axis(0), &cache.order);

    accumulate_linear(grads, ix.out_w, Some(ix.out_b), cache.a_f.view(), dy.view());
    let da_f = dy.dot(&params.mat(ix.out_w).t());
    let (dxhat, dshift, dscale) = modulate_backward(&da_f, &cache.ln_f.xhat, cache.mod_f.slice(s![d..]));
    let mut dh = layer_norm_backward(&cache.ln_f, &dxhat);
    let mut dmod_f = Array1::zeros(2 * d);
    dmod_f.slice_mut(s![..d]).assign(&dshift);
    dmod_f.slice_mut(s![d..]).assign(&dscale);
    let mut ds = params.mat(ix.final_mod_w).dot(&dmod_f);
    outer_add(grads, ix.final_mod_w, &cache.s, &dmod_f);
    grads.vec_mut(ix.final_mod_b).scaled_add(1.0, &dmod_f);

    for (bx, bc) in ix.blocks.iter().zip(&cache.blocks).rev() {
        let chunk = |k: usize| bc.mods.slice(s![k * d..(k + 1) * d]);
        let mut dmods = Array1::zeros(6 * d);

        // MLP branch: h_out = h_mid + gate2 * f
        dmods.slice_mut(s![5 * d..]).assign(&(&dh * &bc.f).sum_axis(Axis(0)));
        let df = &dh * &chunk(5);
        accumulate_linear(grads, bx.fc2_w, Some(bx.fc2_b), bc.u.view(), df.view());
        let mut du = df.dot(&params.mat(bx.fc2_w).t());
        du.zip_mut_with(&bc.u_pre, |g, &x| *g *= gelu_grad(x));
        accumulate_linear(grads, bx.fc1_w, Some(bx.fc1_b), bc.a2.view(), du.view());
        let da2 = du.dot(&params.mat(bx.fc1_w).t());
        let (dxhat2, dsh2, dsc2) = modulate_backward(&da2, &bc.ln2.xhat, chunk(4));
        dmods.slice_mut(s![3 * d..4 * d]).assign(&dsh2);
        dmods.slice_mut(s![4 * d..5 * d]).assign(&dsc2);
        dh += &layer_norm_backward(&bc.ln2, &dxhat2);

        // Attention branch: h_mid = h_in + gate1 * o
        dmods.slice_mut(s![2 * d..3 * d]).assign(&(&dh * &bc.o).sum_axis(Axis(0)));
        let d_o = &dh * &chunk(2);
        accumulate_linear(grads, bx.proj_w, Some(bx.proj_b), bc.attn.view(), d_o.view());
        let dattn = d_o.dot(&params.mat(bx.proj_w).t());
        let n = dh.nrows();
        let mut dqkv = Array2::zeros((n, 3 * d));
        for head in 0..cfg.heads {
            let cols = head * hd..(head + 1) * hd;
            let q = bc.qkv.slice(s![.., cols.clone()]);
            let k = bc.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = bc.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let p = &bc.probs[head];
            let dah = dattn.slice(s![.., cols.clone()]);
            let dv = p.t().dot(&dah);
            let dp = dah.dot(&v.t());
            let mut dsc = p * &dp;
            let rows = dsc.sum_axis(Axis(1));
            dsc -= &(p * &rows.insert_axis(Axis(1)));
            dsc *= scale;
            let dq = dsc.dot(&k);
            let dk = dsc.t().dot(&q);
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        accumulate_linear(grads, bx.qkv_w, Some(bx.qkv_b), bc.a1.view(), dqkv.view());
        let da1 = dqkv.dot(&params.mat(bx.qkv_w).t());
        let (dxhat1, dsh1, dsc1) = modulate_backward(&da1, &bc.ln1.xhat, chunk(1));
        dmods.slice_mut(s![..d]).assign(&dsh1);
        dmods.slice_mut(s![d..2 * d]).assign(&dsc1);
        dh += &layer_norm_backward(&bc.ln1, &dxhat1);

        ds += &params.mat(bx.modulation_w).dot(&dmods);
        outer_add(grads, bx.modulation_w, &cache.s, &dmods);
        grads.vec_mut(bx.modulation_b).scaled_add(1.0, &dmods);
    }

    accumulate_linear(grads, ix.input_w, Some(ix.input_b), cache.x.view(), dh.view());
    let dx = dh.dot(&params.mat(ix.input_w).t());

    let dc = &ds * &cache.c.mapv(silu_grad);
    outer_add(grads, ix.t_embed_w, &cache.t_emb, &dc);
    grads.vec_mut(ix.t_embed_b).scaled_add(1.0, &dc);
    if let Some(dv) = batch.displacement {
        let mut gw = grads.mat_mut(ix.d_embed_w);
        gw.row_mut(0).scaled_add(dv[0], &dc);
        gw.row_mut(1).scaled_add(dv[1], &dc);
    }

    let mut d_tokens = Array2::zeros((cache.n_total, cfg.token_dim()));
    for (r, &i) in cache.order.iter().enumerate() {
        d_tokens.row_mut(i).assign(&dx.row(r));
    }
    Ok(d_tokens)
}

fn outer_add(grads: &mut Params, w: usize, a: &Array1<f64>, b: &Array1<f64>) {
    let mut gw = grads.mat_mut(w);
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            gw.row_mut(i).scaled_add(ai, b);
        }
    }
}
