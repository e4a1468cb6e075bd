//! Forward pass, attention recording and the hand-written backward pass.

use super::params::{BlockSlots, Parameters};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::panels::{token_ranges, PANELS};
use crate::tensor::{gemm, Mat, Real, View, ViewMut};

const LN_EPS: f64 = 1e-6;

/// One denoising query: noisy canvas tokens at time `t`, plus the condition
/// and mask tokens (all `3l` rows, in panel order).
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, T> {
    pub tokens: &'a Mat<T>,
    pub t: T,
    pub cond: &'a Mat<T>,
    pub mask: &'a Mat<T>,
}

/// Key blocks of the joint sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyBlock {
    Text,
    Reference,
    Target,
    Fit,
}

/// Post-softmax attention rows of the fit-panel queries, per layer and head.
///
/// Each stored map is `n × L`: one row per F query, columns over the whole
/// `[T | G | P | F]` key sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    layers: usize,
    heads: usize,
    text: usize,
    panel: usize,
    maps: Vec<Mat<T>>,
}

impl<T: Real> AttentionRecord<T> {
    /// `maps` is layer-major: `maps[layer * heads + head]`.
    pub fn new(layers: usize, heads: usize, text: usize, panel: usize, maps: Vec<Mat<T>>) -> Result<Self> {
        if maps.len() != layers * heads {
            return Err(Error::Shape(format!("expected {} attention maps, got {}", layers * heads, maps.len())));
        }
        let width = text + PANELS * panel;
        for m in &maps {
            if m.rows() != panel || m.cols() != width {
                return Err(Error::Shape(format!(
                    "attention map is {}x{}, expected {panel}x{width}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self { layers, heads, text, panel, maps })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn text_tokens(&self) -> usize {
        self.text
    }

    /// `l`, which is also `n`, the number of F queries.
    pub fn tokens_per_panel(&self) -> usize {
        self.panel
    }

    pub fn total_keys(&self) -> usize {
        self.text + PANELS * self.panel
    }

    pub fn map(&self, layer: usize, head: usize) -> &Mat<T> {
        &self.maps[layer * self.heads + head]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[T] {
        self.map(layer, head).row(query)
    }

    pub fn block_range(&self, block: KeyBlock) -> std::ops::Range<usize> {
        let (t, l) = (self.text, self.panel);
        match block {
            KeyBlock::Text => 0..t,
            KeyBlock::Reference => t..t + l,
            KeyBlock::Target => t + l..t + 2 * l,
            KeyBlock::Fit => t + 2 * l..t + 3 * l,
        }
    }

    /// One query's slice of one key block, e.g. a row of `F_q G_k`.
    pub fn block(&self, layer: usize, head: usize, query: usize, block: KeyBlock) -> &[T] {
        &self.row(layer, head, query)[self.block_range(block)]
    }
}

/// Cotangent of an attention-level loss: added to `∂L/∂A[i, :]` for every F
/// query `i` in every layer and head. Length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusTarget<T> {
    pub key_grad: Vec<T>,
}

struct LayerNormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    modulation: Vec<T>,
    ln1: LayerNormCache<T>,
    a: Mat<T>,
    qkv: Mat<T>,
    attn: Vec<Mat<T>>,
    o: Mat<T>,
    attn_out: Mat<T>,
    ln2: LayerNormCache<T>,
    m: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
    mlp_out: Mat<T>,
}

struct Activations<T> {
    temb: Vec<T>,
    time_hidden: Vec<T>,
    time_act: Vec<T>,
    cond_vec: Vec<T>,
    cond_act: Vec<T>,
    feat: Mat<T>,
    blocks: Vec<BlockCache<T>>,
    final_mod: Vec<T>,
    final_ln: LayerNormCache<T>,
    final_y: Mat<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    acts: Activations<T>,
    record: AttentionRecord<T>,
}

impl<T: Real> Tape<T> {
    pub fn record(&self) -> &AttentionRecord<T> {
        &self.record
    }

    pub fn into_record(self) -> AttentionRecord<T> {
        self.record
    }
}

/// Velocity prediction (`3l × patch_channels`), optionally with the F-query attention record.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    input: &ModelInput<'_, T>,
    record: bool,
) -> Result<(Mat<T>, Option<AttentionRecord<T>>)> {
    let (v, record, _) = run(params, input, false, record)?;
    Ok((v, record))
}

/// Forward pass that keeps the activations for [`backward`]; always records attention.
pub fn forward_train<T: Real>(params: &Parameters<T>, input: &ModelInput<'_, T>) -> Result<(Mat<T>, Tape<T>)> {
    let (v, record, acts) = run(params, input, true, true)?;
    let tape = Tape { acts: acts.expect("activations requested"), record: record.expect("record requested") };
    Ok((v, tape))
}

fn check_input<T: Real>(cfg: &ModelConfig, input: &ModelInput<'_, T>) -> Result<()> {
    let layout = &cfg.layout;
    let ni = layout.image_tokens();
    let pc = layout.patch_channels();
    let p2 = layout.patch * layout.patch;
    for (name, m, cols) in [("tokens", input.tokens, pc), ("cond", input.cond, pc), ("mask", input.mask, p2)] {
        if m.rows() != ni || m.cols() != cols {
            return Err(Error::Shape(format!("{name} is {}x{}, expected {ni}x{cols}", m.rows(), m.cols())));
        }
        if !m.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} contains NaN or infinity")));
        }
    }
    if !input.t.is_finite() {
        return Err(Error::NonFinite("timestep".into()));
    }
    Ok(())
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn tanh<T: Real>(u: T) -> T {
    T::lit(2.0) / (T::one() + (u * T::lit(-2.0)).exp()) - T::one()
}

fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(0.797_884_560_802_865_4);
    let inner = k * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh(inner))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = k * (x + T::lit(0.044715) * x2 * x);
    let th = tanh(inner);
    let dinner = k * (T::one() + T::lit(3.0 * 0.044715) * x2);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

/// Sinusoidal embedding of `t · 1000`: `[cos(f_k t) | sin(f_k t)]`.
pub(crate) fn timestep_embedding<T: Real>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let tt = t.as_f64() * 1000.0;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = T::lit((tt * f).cos());
        out[half + k] = T::lit((tt * f).sin());
    }
    out
}

/// Fixed 2-D sin/cos code: first half of the channels encodes the patch row,
/// second half the patch column. Identical across panels.
pub(crate) fn position_code<T: Real>(cfg: &ModelConfig) -> Mat<T> {
    let layout = &cfg.layout;
    let d = cfg.d_model;
    let quarter = d / 4;
    let (gr, gc) = (layout.grid_rows(), layout.grid_cols());
    let mut out = Mat::zeros(layout.image_tokens(), d);
    for panel in 0..PANELS {
        for r in 0..gr {
            for c in 0..gc {
                let row = out.row_mut(panel * gr * gc + r * gc + c);
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    row[k] = T::lit((r as f64 * omega).sin());
                    row[quarter + k] = T::lit((r as f64 * omega).cos());
                    row[2 * quarter + k] = T::lit((c as f64 * omega).sin());
                    row[3 * quarter + k] = T::lit((c as f64 * omega).cos());
                }
            }
        }
    }
    out
}

/// `x · W + b` for a row vector.
fn vec_linear<T: Real>(x: &[T], w: View<'_, T>, b: &[T]) -> Vec<T> {
    let mut out = b.to_vec();
    gemm(T::one(), View::new(x, 1, x.len()), w, T::one(), ViewMut::new(&mut out, 1, b.len()));
    out
}

fn linear<T: Real>(x: View<'_, T>, w: View<'_, T>, b: &[T]) -> Mat<T> {
    let mut out = Mat::zeros(x.rows(), w.cols());
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(b);
    }
    gemm(T::one(), x, w, T::one(), out.view_mut());
    out
}

fn layer_norm<T: Real>(x: &Mat<T>) -> LayerNormCache<T> {
    let d = x.cols();
    let dn = T::lit(d as f64);
    let mut xhat = Mat::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    LayerNormCache { xhat, rstd }
}

fn layer_norm_backward<T: Real>(dy: &Mat<T>, cache: &LayerNormCache<T>) -> Mat<T> {
    let d = dy.cols();
    let dn = T::lit(d as f64);
    let mut dx = Mat::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.iter().copied().sum::<T>() / dn;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
        let rs = cache.rstd[r];
        for ((o, &gi), &xi) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = rs * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

fn modulate<T: Real>(xhat: &Mat<T>, shift: &[T], scale: &[T]) -> Mat<T> {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, &sh), &sc) in out.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *o = *o * (T::one() + sc) + sh;
        }
    }
    out
}

/// Returns `d xhat` and accumulates `d shift`, `d scale`.
fn modulate_backward<T: Real>(
    da: &Mat<T>,
    xhat: &Mat<T>,
    scale: &[T],
    dshift: &mut [T],
    dscale: &mut [T],
) -> Mat<T> {
    let mut dx = da.clone();
    for r in 0..da.rows() {
        let g = da.row(r);
        let xh = xhat.row(r);
        for j in 0..g.len() {
            dshift[j] += g[j];
            dscale[j] += g[j] * xh[j];
        }
        for (o, &sc) in dx.row_mut(r).iter_mut().zip(scale) {
            *o *= T::one() + sc;
        }
    }
    dx
}

fn softmax_rows<T: Real>(s: &mut Mat<T>) {
    for r in 0..s.rows() {
        T::softmax_in_place(s.row_mut(r));
    }
}

fn run<T: Real>(
    params: &Parameters<T>,
    input: &ModelInput<'_, T>,
    keep_tape: bool,
    record: bool,
) -> Result<(Mat<T>, Option<AttentionRecord<T>>, Option<Activations<T>>)> {
    let cfg = *params.config();
    check_input(&cfg, input)?;
    let s = &params.slots;
    let layout = &cfg.layout;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let l1 = layout.text_tokens;
    let l = layout.tokens_per_panel();
    let ni = layout.image_tokens();
    let n_seq = l1 + ni;
    let fit = token_ranges(layout).fit;

    // Timestep conditioning vector.
    let temb = timestep_embedding(input.t, cfg.time_dim);
    let time_hidden = vec_linear(&temb, params.mat(s.time_w0), params.slice(s.time_b0));
    let time_act: Vec<T> = time_hidden.iter().map(|&v| silu(v)).collect();
    let cond_vec = vec_linear(&time_act, params.mat(s.time_w2), params.slice(s.time_b2));
    let cond_act: Vec<T> = cond_vec.iter().map(|&v| silu(v)).collect();

    // Token embedding: [noisy | cond | mask] per patch.
    let in_ch = cfg.input_channels();
    let mut feat = Mat::zeros(ni, in_ch);
    for r in 0..ni {
        let row = feat.row_mut(r);
        let (a, rest) = row.split_at_mut(input.tokens.cols());
        let (b, c) = rest.split_at_mut(input.cond.cols());
        a.copy_from_slice(input.tokens.row(r));
        b.copy_from_slice(input.cond.row(r));
        c.copy_from_slice(input.mask.row(r));
    }
    let emb = linear(feat.view(), params.mat(s.patch_w), params.slice(s.patch_b));
    let pos = if cfg.positional { Some(position_code::<T>(&cfg)) } else { None };
    let panel_embed = params.mat(s.panel_embed);
    let mut x = Mat::zeros(n_seq, d);
    x.as_mut_slice()[..l1 * d].copy_from_slice(params.slice(s.text_tokens));
    for r in 0..ni {
        let panel = r / l;
        let row = x.row_mut(l1 + r);
        for j in 0..d {
            let mut v = emb.get(r, j) + panel_embed.get(panel, j);
            if let Some(p) = &pos {
                v += p.get(r, j);
            }
            row[j] = v;
        }
    }

    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut caches = Vec::new();
    let mut maps = Vec::new();
    for b in &s.blocks {
        let modulation = vec_linear(&cond_act, params.mat(b.mod_w), params.slice(b.mod_b));
        let (shift1, rest) = modulation.split_at(d);
        let (scale1, rest) = rest.split_at(d);
        let (gate1, rest) = rest.split_at(d);
        let (shift2, rest) = rest.split_at(d);
        let (scale2, gate2) = rest.split_at(d);

        let ln1 = layer_norm(&x);
        let a = modulate(&ln1.xhat, shift1, scale1);
        let qkv = linear(a.view(), params.mat(b.qkv_w), params.slice(b.qkv_b));
        let mut o = Mat::zeros(n_seq, d);
        let mut attn = Vec::new();
        for h in 0..cfg.heads {
            let q = qkv.view().cols_range(h * dh, dh);
            let k = qkv.view().cols_range(d + h * dh, dh);
            let v = qkv.view().cols_range(2 * d + h * dh, dh);
            let mut sc = Mat::zeros(n_seq, n_seq);
            gemm(scale, q, k.t(), T::zero(), sc.view_mut());
            softmax_rows(&mut sc);
            gemm(T::one(), sc.view(), v, T::zero(), o.view_mut().cols_range(h * dh, dh));
            if record {
                let rows = sc.as_slice()[fit.start * n_seq..fit.end * n_seq].to_vec();
                maps.push(Mat::from_vec(l, n_seq, rows));
            }
            if keep_tape {
                attn.push(sc);
            }
        }
        let attn_out = linear(o.view(), params.mat(b.proj_w), params.slice(b.proj_b));
        for r in 0..n_seq {
            for ((xv, &av), &g) in x.row_mut(r).iter_mut().zip(attn_out.row(r)).zip(gate1) {
                *xv += g * av;
            }
        }

        let ln2 = layer_norm(&x);
        let m = modulate(&ln2.xhat, shift2, scale2);
        let pre = linear(m.view(), params.mat(b.fc1_w), params.slice(b.fc1_b));
        let act = pre.map(gelu);
        let mlp_out = linear(act.view(), params.mat(b.fc2_w), params.slice(b.fc2_b));
        for r in 0..n_seq {
            for ((xv, &mv), &g) in x.row_mut(r).iter_mut().zip(mlp_out.row(r)).zip(gate2) {
                *xv += g * mv;
            }
        }
        if keep_tape {
            caches.push(BlockCache { modulation, ln1, a, qkv, attn, o, attn_out, ln2, m, pre, act, mlp_out });
        }
    }

    let final_mod = vec_linear(&cond_act, params.mat(s.final_mod_w), params.slice(s.final_mod_b));
    let (fshift, fscale) = final_mod.split_at(d);
    let img = Mat::from_vec(ni, d, x.as_slice()[l1 * d..].to_vec());
    let final_ln = layer_norm(&img);
    let final_y = modulate(&final_ln.xhat, fshift, fscale);
    let v = linear(final_y.view(), params.mat(s.out_w), params.slice(s.out_b));
    if !v.as_slice().iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("velocity prediction".into()));
    }

    let record = if record {
        Some(AttentionRecord::new(cfg.layers, cfg.heads, l1, l, maps)?)
    } else {
        None
    };
    let acts = keep_tape.then(|| Activations {
        temb,
        time_hidden,
        time_act,
        cond_vec,
        cond_act,
        feat,
        blocks: caches,
        final_mod,
        final_ln,
        final_y,
    });
    Ok((v, record, acts))
}

/// Mutable view of one parameter's gradient.
fn grad_mat<'g, T: Real>(params: &Parameters<T>, grads: &'g mut [T], idx: usize) -> ViewMut<'g, T> {
    let e = &params.entries()[idx];
    ViewMut::new(&mut grads[e.range()], e.rows, e.cols)
}

fn grad_slice<'g, T: Real>(params: &Parameters<T>, grads: &'g mut [T], idx: usize) -> &'g mut [T] {
    let e = &params.entries()[idx];
    &mut grads[e.range()]
}

/// `dW += xᵀ dy`, `db += Σ_rows dy`, returns `dx = dy Wᵀ`.
fn linear_backward<T: Real>(
    params: &Parameters<T>,
    grads: &mut [T],
    w: usize,
    b: usize,
    x: View<'_, T>,
    dy: &Mat<T>,
) -> Mat<T> {
    gemm(T::one(), x.t(), dy.view(), T::one(), grad_mat(params, grads, w));
    let gb = grad_slice(params, grads, b);
    for r in 0..dy.rows() {
        for (g, &v) in gb.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    Mat::matmul(dy.view(), params.mat(w).t())
}

fn vec_linear_backward<T: Real>(
    params: &Parameters<T>,
    grads: &mut [T],
    w: usize,
    b: usize,
    x: &[T],
    dy: &[T],
) -> Vec<T> {
    let dy_m = Mat::from_vec(1, dy.len(), dy.to_vec());
    let dx = linear_backward(params, grads, w, b, View::new(x, 1, x.len()), &dy_m);
    dx.into_vec()
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂v` and an optional
/// attention-level cotangent on the F-query rows.
pub fn backward<T: Real>(
    params: &Parameters<T>,
    tape: &Tape<T>,
    dv: &Mat<T>,
    focus: Option<&FocusTarget<T>>,
    grads: &mut [T],
) -> Result<()> {
    let cfg = *params.config();
    let s = &params.slots;
    let layout = &cfg.layout;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let l1 = layout.text_tokens;
    let ni = layout.image_tokens();
    let n_seq = l1 + ni;
    let fit = token_ranges(layout).fit;
    if grads.len() != params.len() {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    if dv.rows() != ni || dv.cols() != layout.patch_channels() {
        return Err(Error::Shape("velocity cotangent has the wrong shape".into()));
    }
    if let Some(f) = focus {
        if f.key_grad.len() != n_seq {
            return Err(Error::Shape(format!("focus cotangent has {} keys, expected {n_seq}", f.key_grad.len())));
        }
    }

    let acts = &tape.acts;
    let mut dcond_act = vec![T::zero(); d];

    // Output head.
    let dy = linear_backward(params, grads, s.out_w, s.out_b, acts.final_y.view(), dv);
    let (_, fscale) = acts.final_mod.split_at(d);
    let mut dfmod = vec![T::zero(); 2 * d];
    let dxhat = {
        let (dshift, dscale) = dfmod.split_at_mut(d);
        modulate_backward(&dy, &acts.final_ln.xhat, fscale, dshift, dscale)
    };
    let dimg = layer_norm_backward(&dxhat, &acts.final_ln);
    let dc = vec_linear_backward(params, grads, s.final_mod_w, s.final_mod_b, &acts.cond_act, &dfmod);
    for (a, b) in dcond_act.iter_mut().zip(&dc) {
        *a += *b;
    }
    let mut dx = Mat::zeros(n_seq, d);
    dx.as_mut_slice()[l1 * d..].copy_from_slice(dimg.as_slice());

    let scale = T::one() / T::lit(dh as f64).sqrt();
    for (bi, b) in s.blocks.iter().enumerate().rev() {
        let cache = &acts.blocks[bi];
        let mut dmod = vec![T::zero(); 6 * d];
        block_backward(params, grads, b, cache, &mut dx, &mut dmod, focus, &fit, scale, &cfg);
        let dc = vec_linear_backward(params, grads, b.mod_w, b.mod_b, &acts.cond_act, &dmod);
        for (a, b) in dcond_act.iter_mut().zip(&dc) {
            *a += *b;
        }
    }

    // Token embedding.
    let gt = grad_slice(params, grads, s.text_tokens);
    for (g, &v) in gt.iter_mut().zip(&dx.as_slice()[..l1 * d]) {
        *g += v;
    }
    let dimg_in = Mat::from_vec(ni, d, dx.as_slice()[l1 * d..].to_vec());
    let l = layout.tokens_per_panel();
    let gp = grad_slice(params, grads, s.panel_embed);
    for r in 0..ni {
        let panel = r / l;
        for (g, &v) in gp[panel * d..(panel + 1) * d].iter_mut().zip(dimg_in.row(r)) {
            *g += v;
        }
    }
    let _ = linear_backward(params, grads, s.patch_w, s.patch_b, acts.feat.view(), &dimg_in);

    // Timestep MLP.
    let dcond_vec: Vec<T> = dcond_act.iter().zip(&acts.cond_vec).map(|(&g, &c)| g * silu_grad(c)).collect();
    let dtime_act = vec_linear_backward(params, grads, s.time_w2, s.time_b2, &acts.time_act, &dcond_vec);
    let dtime_hidden: Vec<T> =
        dtime_act.iter().zip(&acts.time_hidden).map(|(&g, &h)| g * silu_grad(h)).collect();
    let _ = vec_linear_backward(params, grads, s.time_w0, s.time_b0, &acts.temb, &dtime_hidden);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    params: &Parameters<T>,
    grads: &mut [T],
    b: &BlockSlots,
    cache: &BlockCache<T>,
    dx: &mut Mat<T>,
    dmod: &mut [T],
    focus: Option<&FocusTarget<T>>,
    fit: &std::ops::Range<usize>,
    scale: T,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n_seq = dx.rows();
    let m = &cache.modulation;
    let (scale1, gate1) = (&m[d..2 * d], &m[2 * d..3 * d]);
    let (scale2, gate2) = (&m[4 * d..5 * d], &m[5 * d..6 * d]);

    // MLP branch: x_out = x_mid + gate2 ⊙ mlp(modulate(LN(x_mid))).
    let mut dmlp = Mat::zeros(n_seq, d);
    for r in 0..n_seq {
        let g = dx.row(r);
        let out = cache.mlp_out.row(r);
        let dm = dmlp.row_mut(r);
        for j in 0..d {
            dmod[5 * d + j] += g[j] * out[j];
            dm[j] = g[j] * gate2[j];
        }
    }
    let mut dact = linear_backward(params, grads, b.fc2_w, b.fc2_b, cache.act.view(), &dmlp);
    for (g, &p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *g *= gelu_grad(p);
    }
    let dm = linear_backward(params, grads, b.fc1_w, b.fc1_b, cache.m.view(), &dact);
    let dxhat2 = {
        let (head, tail) = dmod.split_at_mut(4 * d);
        let dshift2 = &mut head[3 * d..4 * d];
        let dscale2 = &mut tail[..d];
        modulate_backward(&dm, &cache.ln2.xhat, scale2, dshift2, dscale2)
    };
    let dln2 = layer_norm_backward(&dxhat2, &cache.ln2);
    for (a, &v) in dx.as_mut_slice().iter_mut().zip(dln2.as_slice()) {
        *a += v;
    }

    // Attention branch: x_mid = x_in + gate1 ⊙ proj(attn(modulate(LN(x_in)))).
    let mut dattn_out = Mat::zeros(n_seq, d);
    for r in 0..n_seq {
        let g = dx.row(r);
        let out = cache.attn_out.row(r);
        let da = dattn_out.row_mut(r);
        for j in 0..d {
            dmod[2 * d + j] += g[j] * out[j];
            da[j] = g[j] * gate1[j];
        }
    }
    let d_o = linear_backward(params, grads, b.proj_w, b.proj_b, cache.o.view(), &dattn_out);
    let mut dqkv = Mat::zeros(n_seq, 3 * d);
    let mut ds = Mat::zeros(n_seq, n_seq);
    for h in 0..cfg.heads {
        let a = &cache.attn[h];
        let q = cache.qkv.view().cols_range(h * dh, dh);
        let k = cache.qkv.view().cols_range(d + h * dh, dh);
        let v = cache.qkv.view().cols_range(2 * d + h * dh, dh);
        let d_oh = d_o.view().cols_range(h * dh, dh);
        gemm(T::one(), d_oh, v.t(), T::zero(), ds.view_mut());
        if let Some(f) = focus {
            for r in fit.clone() {
                for (g, &c) in ds.row_mut(r).iter_mut().zip(&f.key_grad) {
                    *g += c;
                }
            }
        }
        gemm(T::one(), a.view().t(), d_oh, T::zero(), dqkv.view_mut().cols_range(2 * d + h * dh, dh));
        for r in 0..n_seq {
            let arow = a.row(r);
            let grow = ds.row_mut(r);
            let dot = grow.iter().zip(arow).map(|(&g, &p)| g * p).sum::<T>();
            for (g, &p) in grow.iter_mut().zip(arow) {
                *g = p * (*g - dot);
            }
        }
        gemm(scale, ds.view(), k, T::zero(), dqkv.view_mut().cols_range(h * dh, dh));
        gemm(scale, ds.view().t(), q, T::zero(), dqkv.view_mut().cols_range(d + h * dh, dh));
    }
    let da = linear_backward(params, grads, b.qkv_w, b.qkv_b, cache.a.view(), &dqkv);
    let dxhat1 = {
        let (dshift1, rest) = dmod.split_at_mut(d);
        modulate_backward(&da, &cache.ln1.xhat, scale1, dshift1, &mut rest[..d])
    };
    let dln1 = layer_norm_backward(&dxhat1, &cache.ln1);
    for (a, &v) in dx.as_mut_slice().iter_mut().zip(dln1.as_slice()) {
        *a += v;
    }
}
