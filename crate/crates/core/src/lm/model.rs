//! Pre-LN decoder-only transformer with hand-written backpropagation.
//!
//! Blocks are `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`, with a final
//! layer norm, learned positional embeddings, a tanh-GELU MLP and an output
//! projection tied to the token embedding.

use super::config::ModelConfig;
use super::layout::{BlockOffsets, Layout};
use super::tensor::{
    gelu, gelu_grad, gemm, layernorm_backward, layernorm_forward, softmax_in_place, Real, View,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Standard deviation of the weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Transformer<T: Real> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

struct BlockCache<T> {
    x_in: Vec<T>,
    ln1_out: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    y: Vec<T>,
    attn_mask: Vec<T>,
    x_mid: Vec<T>,
    ln2_out: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
    mlp_mask: Vec<T>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Forward<T> {
    len: usize,
    emb_mask: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    x_final: Vec<T>,
    lnf_out: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    /// `[len, vocab_size]` row-major.
    pub logits: Vec<T>,
}

impl<T> Forward<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear_forward<T: Real>(out: &mut [T], inp: &[T], w: &[T], b: &[T], t: usize, k: usize, n: usize) {
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(b);
    }
    gemm(T::ONE, View::dense(inp, t, k), View::dense(w, k, n), T::ONE, out, n, 1);
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    dinp: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    dout: &[T],
    inp: &[T],
    w: &[T],
    t: usize,
    k: usize,
    n: usize,
) {
    gemm(T::ONE, View::dense(dout, t, n), View::dense(w, k, n).t(), T::ONE, dinp, k, 1);
    gemm(T::ONE, View::dense(inp, t, k).t(), View::dense(dout, t, n), T::ONE, dw, n, 1);
    for row in dout.chunks_exact(n) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += *g;
        }
    }
}

fn dropout_mask<T: Real>(rng: &mut Option<(&mut Rng, f64)>, len: usize) -> Vec<T> {
    match rng {
        Some((rng, p)) if *p > 0.0 => {
            let keep = T::from_f64(1.0 / (1.0 - *p));
            (0..len)
                .map(|_| if rng.uniform() < *p { T::ZERO } else { keep })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn apply_mask<T: Real>(x: &mut [T], mask: &[T]) {
    if !mask.is_empty() {
        for (v, m) in x.iter_mut().zip(mask) {
            *v *= *m;
        }
    }
}

impl<T: Real> Transformer<T> {
    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// `1/sqrt(2 * n_layers)`), zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut params = vec![T::ZERO; layout.total];
        let mut rng = Rng::derive(cfg.seed, 0x1417);
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        for spec in &layout.specs {
            let name = spec.name.as_str();
            let slice = &mut params[spec.range()];
            if name.ends_with(".g") {
                slice.fill(T::ONE);
            } else if spec.shape.len() == 2 {
                let std = if name.ends_with("w_proj") || name.ends_with("w_out") {
                    resid_std
                } else {
                    INIT_STD
                };
                for v in slice.iter_mut() {
                    *v = T::from_f64(rng.normal() * std);
                }
            }
        }
        Ok(Transformer {
            cfg: cfg.clone(),
            layout,
            params,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Transformer {
            cfg: cfg.clone(),
            layout,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        if ids.len() > self.cfg.context_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                context: self.cfg.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Full forward pass. Row `t` of the logits scores the token following
    /// `ids[t]`. Dropout is applied only when `dropout` is given.
    pub fn forward(&self, ids: &[u32], mut dropout: Option<(&mut Rng, f64)>) -> Result<Forward<T>> {
        self.check_ids(ids)?;
        let cfg = &self.cfg;
        let (t, d, f, v) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let wte = self.slice(self.layout.wte, v * d);
        let wpe = self.slice(self.layout.wpe, cfg.context_len * d);
        let mut x = vec![T::ZERO; t * d];
        for (pos, &id) in ids.iter().enumerate() {
            let row = &mut x[pos * d..(pos + 1) * d];
            let tok = &wte[id as usize * d..(id as usize + 1) * d];
            let p = &wpe[pos * d..(pos + 1) * d];
            for i in 0..d {
                row[i] = tok[i] + p[i];
            }
        }
        let emb_mask = dropout_mask(&mut dropout, t * d);
        apply_mask(&mut x, &emb_mask);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &self.layout.blocks {
            let x_in = x;
            let mut ln1_out = vec![T::ZERO; t * d];
            let mut ln1_mean = vec![T::ZERO; t];
            let mut ln1_rstd = vec![T::ZERO; t];
            layernorm_forward(
                &mut ln1_out,
                &mut ln1_mean,
                &mut ln1_rstd,
                &x_in,
                self.slice(b.ln1_g, d),
                self.slice(b.ln1_b, d),
                d,
            );
            let mut qkv = vec![T::ZERO; t * 3 * d];
            linear_forward(&mut qkv, &ln1_out, self.slice(b.w_qkv, d * 3 * d), self.slice(b.b_qkv, 3 * d), t, d, 3 * d);

            let mut att = vec![T::ZERO; nh * t * t];
            let mut y = vec![T::ZERO; t * d];
            for h in 0..nh {
                let a = &mut att[h * t * t..(h + 1) * t * t];
                let q = View::strided(&qkv[h * hd..], t, hd, 3 * d, 1);
                let k = View::strided(&qkv[d + h * hd..], t, hd, 3 * d, 1);
                let vv = View::strided(&qkv[2 * d + h * hd..], t, hd, 3 * d, 1);
                gemm(scale, q, k.t(), T::ZERO, a, t, 1);
                for i in 0..t {
                    let row = &mut a[i * t..(i + 1) * t];
                    row[i + 1..].fill(T::NEG_INFINITY);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(T::ZERO);
                }
                gemm(T::ONE, View::dense(a, t, t), vv, T::ZERO, &mut y[h * hd..], d, 1);
            }

            let mut proj = vec![T::ZERO; t * d];
            linear_forward(&mut proj, &y, self.slice(b.w_proj, d * d), self.slice(b.b_proj, d), t, d, d);
            let attn_mask = dropout_mask(&mut dropout, t * d);
            apply_mask(&mut proj, &attn_mask);
            let x_mid: Vec<T> = x_in.iter().zip(&proj).map(|(a, b)| *a + *b).collect();

            let mut ln2_out = vec![T::ZERO; t * d];
            let mut ln2_mean = vec![T::ZERO; t];
            let mut ln2_rstd = vec![T::ZERO; t];
            layernorm_forward(
                &mut ln2_out,
                &mut ln2_mean,
                &mut ln2_rstd,
                &x_mid,
                self.slice(b.ln2_g, d),
                self.slice(b.ln2_b, d),
                d,
            );
            let mut fc_pre = vec![T::ZERO; t * f];
            linear_forward(&mut fc_pre, &ln2_out, self.slice(b.w_fc, d * f), self.slice(b.b_fc, f), t, d, f);
            let fc_act: Vec<T> = fc_pre.iter().map(|&z| gelu(z)).collect();
            let mut mlp = vec![T::ZERO; t * d];
            linear_forward(&mut mlp, &fc_act, self.slice(b.w_out, f * d), self.slice(b.b_out, d), t, f, d);
            let mlp_mask = dropout_mask(&mut dropout, t * d);
            apply_mask(&mut mlp, &mlp_mask);
            x = x_mid.iter().zip(&mlp).map(|(a, b)| *a + *b).collect();

            blocks.push(BlockCache {
                x_in,
                ln1_out,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                y,
                attn_mask,
                x_mid,
                ln2_out,
                ln2_mean,
                ln2_rstd,
                fc_pre,
                fc_act,
                mlp_mask,
            });
        }

        let mut lnf_out = vec![T::ZERO; t * d];
        let mut lnf_mean = vec![T::ZERO; t];
        let mut lnf_rstd = vec![T::ZERO; t];
        layernorm_forward(
            &mut lnf_out,
            &mut lnf_mean,
            &mut lnf_rstd,
            &x,
            self.slice(self.layout.lnf_g, d),
            self.slice(self.layout.lnf_b, d),
            d,
        );
        let mut logits = vec![T::ZERO; t * v];
        gemm(T::ONE, View::dense(&lnf_out, t, d), View::dense(wte, v, d).t(), T::ZERO, &mut logits, v, 1);

        Ok(Forward {
            len: t,
            emb_mask,
            blocks,
            x_final: x,
            lnf_out,
            lnf_mean,
            lnf_rstd,
            logits,
        })
    }

    /// Eval-mode logits, `[len, vocab_size]`.
    pub fn logits(&self, ids: &[u32]) -> Result<Vec<T>> {
        Ok(self.forward(ids, None)?.logits)
    }

    /// Backpropagates `dlogits` through the cached pass, accumulating into
    /// `grads` (same layout as `params`).
    pub fn backward(&self, fwd: &Forward<T>, ids: &[u32], dlogits: &[T], grads: &mut [T]) {
        let cfg = &self.cfg;
        let (t, d, f, v) = (fwd.len, cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        assert_eq!(ids.len(), t);
        assert_eq!(dlogits.len(), t * v);
        assert_eq!(grads.len(), self.layout.total);

        let wte_off = self.layout.wte;
        let wte = self.slice(wte_off, v * d);

        // logits = lnf_out @ wte^T
        let mut dlnf = vec![T::ZERO; t * d];
        gemm(T::ONE, View::dense(dlogits, t, v), View::dense(wte, v, d), T::ZERO, &mut dlnf, d, 1);
        gemm(
            T::ONE,
            View::dense(dlogits, t, v).t(),
            View::dense(&fwd.lnf_out, t, d),
            T::ONE,
            &mut grads[wte_off..wte_off + v * d],
            d,
            1,
        );

        let mut dx = vec![T::ZERO; t * d];
        {
            let (lo, hi) = grads.split_at_mut(self.layout.lnf_b);
            layernorm_backward(
                &mut dx,
                &mut lo[self.layout.lnf_g..self.layout.lnf_g + d],
                &mut hi[..d],
                &dlnf,
                &fwd.x_final,
                self.slice(self.layout.lnf_g, d),
                &fwd.lnf_mean,
                &fwd.lnf_rstd,
                d,
            );
        }

        for (b, cache) in self.layout.blocks.iter().zip(&fwd.blocks).rev() {
            dx = self.block_backward(b, cache, dx, grads, t, d, f, nh, hd, scale);
        }

        apply_mask(&mut dx, &fwd.emb_mask);
        let wpe_off = self.layout.wpe;
        for (pos, &id) in ids.iter().enumerate() {
            let g = &dx[pos * d..(pos + 1) * d];
            let tok = wte_off + id as usize * d;
            for i in 0..d {
                grads[tok + i] += g[i];
                grads[wpe_off + pos * d + i] += g[i];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockOffsets,
        c: &BlockCache<T>,
        dx_out: Vec<T>,
        grads: &mut [T],
        t: usize,
        d: usize,
        f: usize,
        nh: usize,
        hd: usize,
        scale: T,
    ) -> Vec<T> {
        // MLP branch: x_out = x_mid + drop(fc_act @ w_out + b_out)
        let mut dmlp = dx_out.clone();
        apply_mask(&mut dmlp, &c.mlp_mask);
        let mut dfc = vec![T::ZERO; t * f];
        {
            let (dw, db) = two_mut(grads, b.w_out, f * d, b.b_out, d);
            linear_backward(&mut dfc, dw, db, &dmlp, &c.fc_act, self.slice(b.w_out, f * d), t, f, d);
        }
        for (g, &z) in dfc.iter_mut().zip(&c.fc_pre) {
            *g *= gelu_grad(z);
        }
        let mut dln2 = vec![T::ZERO; t * d];
        {
            let (dw, db) = two_mut(grads, b.w_fc, d * f, b.b_fc, f);
            linear_backward(&mut dln2, dw, db, &dfc, &c.ln2_out, self.slice(b.w_fc, d * f), t, d, f);
        }
        let mut dx_mid = dx_out;
        {
            let (dg, db) = two_mut(grads, b.ln2_g, d, b.ln2_b, d);
            layernorm_backward(&mut dx_mid, dg, db, &dln2, &c.x_mid, self.slice(b.ln2_g, d), &c.ln2_mean, &c.ln2_rstd, d);
        }

        // attention branch: x_mid = x_in + drop(y @ w_proj + b_proj)
        let mut dproj = dx_mid.clone();
        apply_mask(&mut dproj, &c.attn_mask);
        let mut dy = vec![T::ZERO; t * d];
        {
            let (dw, db) = two_mut(grads, b.w_proj, d * d, b.b_proj, d);
            linear_backward(&mut dy, dw, db, &dproj, &c.y, self.slice(b.w_proj, d * d), t, d, d);
        }

        let mut dqkv = vec![T::ZERO; t * 3 * d];
        let mut dp = vec![T::ZERO; t * t];
        for h in 0..nh {
            let a = &c.att[h * t * t..(h + 1) * t * t];
            let q = View::strided(&c.qkv[h * hd..], t, hd, 3 * d, 1);
            let k = View::strided(&c.qkv[d + h * hd..], t, hd, 3 * d, 1);
            let vv = View::strided(&c.qkv[2 * d + h * hd..], t, hd, 3 * d, 1);
            let dyh = View::strided(&dy[h * hd..], t, hd, d, 1);
            // dP = dY V^T ; dV += P^T dY
            gemm(T::ONE, dyh, vv.t(), T::ZERO, &mut dp, t, 1);
            gemm(T::ONE, View::dense(a, t, t).t(), dyh, T::ONE, &mut dqkv[2 * d + h * hd..], 3 * d, 1);
            // softmax backward, in place: dS = P * (dP - rowsum(P * dP))
            for i in 0..t {
                let prow = &a[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: T = (0..=i).map(|j| prow[j] * drow[j]).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                drow[i + 1..].fill(T::ZERO);
            }
            gemm(scale, View::dense(&dp, t, t), k, T::ONE, &mut dqkv[h * hd..], 3 * d, 1);
            gemm(scale, View::dense(&dp, t, t).t(), q, T::ONE, &mut dqkv[d + h * hd..], 3 * d, 1);
        }

        let mut dln1 = vec![T::ZERO; t * d];
        {
            let (dw, db) = two_mut(grads, b.w_qkv, d * 3 * d, b.b_qkv, 3 * d);
            linear_backward(&mut dln1, dw, db, &dqkv, &c.ln1_out, self.slice(b.w_qkv, d * 3 * d), t, d, 3 * d);
        }
        let mut dx_in = dx_mid;
        {
            let (dg, db) = two_mut(grads, b.ln1_g, d, b.ln1_b, d);
            layernorm_backward(&mut dx_in, dg, db, &dln1, &c.x_in, self.slice(b.ln1_g, d), &c.ln1_mean, &c.ln1_rstd, d);
        }
        dx_in
    }

    /// Fresh key/value cache for incremental decoding.
    pub fn kv_cache(&self) -> KvCache<T> {
        KvCache {
            keys: vec![Vec::new(); self.cfg.n_layers],
            values: vec![Vec::new(); self.cfg.n_layers],
            len: 0,
        }
    }

    /// Appends one token to the cache and returns the next-token logits.
    /// Matches the corresponding row of [`Transformer::logits`].
    pub fn step(&self, cache: &mut KvCache<T>, id: u32) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        if cache.len >= cfg.context_len {
            return Err(Error::SequenceTooLong {
                len: cache.len + 1,
                context: cfg.context_len,
            });
        }
        if id as usize >= v {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        let pos = cache.len;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let wte = self.slice(self.layout.wte, v * d);
        let wpe = self.slice(self.layout.wpe, cfg.context_len * d);
        let mut x: Vec<T> = (0..d)
            .map(|i| wte[id as usize * d + i] + wpe[pos * d + i])
            .collect();

        let mut mean = [T::ZERO];
        let mut rstd = [T::ZERO];
        let mut h1 = vec![T::ZERO; d];
        let mut qkv = vec![T::ZERO; 3 * d];
        let mut y = vec![T::ZERO; d];
        let mut tmp = vec![T::ZERO; d];
        let mut fc = vec![T::ZERO; f];
        for (l, b) in self.layout.blocks.iter().enumerate() {
            layernorm_forward(&mut h1, &mut mean, &mut rstd, &x, self.slice(b.ln1_g, d), self.slice(b.ln1_b, d), d);
            linear_forward(&mut qkv, &h1, self.slice(b.w_qkv, d * 3 * d), self.slice(b.b_qkv, 3 * d), 1, d, 3 * d);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = pos + 1;
            let mut scores = vec![T::ZERO; n];
            for h in 0..nh {
                let q = View::dense(&qkv[h * hd..(h + 1) * hd], 1, hd);
                let keys = View::strided(&cache.keys[l][h * hd..], n, hd, d, 1);
                gemm(scale, q, keys.t(), T::ZERO, &mut scores, n, 1);
                softmax_in_place(&mut scores);
                let vals = View::strided(&cache.values[l][h * hd..], n, hd, d, 1);
                gemm(T::ONE, View::dense(&scores, 1, n), vals, T::ZERO, &mut y[h * hd..(h + 1) * hd], hd, 1);
            }
            linear_forward(&mut tmp, &y, self.slice(b.w_proj, d * d), self.slice(b.b_proj, d), 1, d, d);
            for i in 0..d {
                x[i] += tmp[i];
            }
            layernorm_forward(&mut h1, &mut mean, &mut rstd, &x, self.slice(b.ln2_g, d), self.slice(b.ln2_b, d), d);
            linear_forward(&mut fc, &h1, self.slice(b.w_fc, d * f), self.slice(b.b_fc, f), 1, d, f);
            for z in fc.iter_mut() {
                *z = gelu(*z);
            }
            linear_forward(&mut tmp, &fc, self.slice(b.w_out, f * d), self.slice(b.b_out, d), 1, f, d);
            for i in 0..d {
                x[i] += tmp[i];
            }
        }
        layernorm_forward(
            &mut h1,
            &mut mean,
            &mut rstd,
            &x,
            self.slice(self.layout.lnf_g, d),
            self.slice(self.layout.lnf_b, d),
            d,
        );
        let mut logits = vec![T::ZERO; v];
        gemm(T::ONE, View::dense(&h1, 1, d), View::dense(wte, v, d).t(), T::ZERO, &mut logits, v, 1);
        cache.len += 1;
        Ok(logits)
    }
}

/// Keys and values of the positions decoded so far.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Disjoint mutable views of two parameter ranges, `a` before `b`.
fn two_mut<T>(buf: &mut [T], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [T], &mut [T]) {
    assert!(a + a_len <= b, "ranges overlap or are out of order");
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + a_len], &mut hi[..b_len])
}

/// Mean negative log-likelihood over positions where `mask` is set; row `t`
/// of `logits` is scored against `targets[t]`.
pub fn loss<T: Real>(logits: &[T], vocab_size: usize, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (sum, count, _) = nll_and_grad(logits, vocab_size, targets, mask, false)?;
    Ok(sum / count as f64)
}

/// Summed NLL, the number of scored positions and, if requested, the
/// gradient of the *summed* NLL with respect to the logits.
pub(crate) fn nll_and_grad<T: Real>(
    logits: &[T],
    vocab_size: usize,
    targets: &[u32],
    mask: &[bool],
    want_grad: bool,
) -> Result<(f64, usize, Vec<T>)> {
    let rows = targets.len();
    if logits.len() != rows * vocab_size || mask.len() != rows {
        return Err(Error::Invalid(format!(
            "shape mismatch: {} logits for {rows} targets over {vocab_size} tokens, {} mask flags",
            logits.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Invalid("every position is masked".into()));
    }
    let mut grad = if want_grad {
        vec![T::ZERO; logits.len()]
    } else {
        Vec::new()
    };
    let mut sum = 0.0f64;
    for (r, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id: target,
                size: vocab_size,
            });
        }
        let row = &logits[r * vocab_size..(r + 1) * vocab_size];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[target as usize].to_f64();
        if want_grad {
            let g = &mut grad[r * vocab_size..(r + 1) * vocab_size];
            for (gi, li) in g.iter_mut().zip(row) {
                *gi = T::from_f64((li.to_f64() - lse).exp());
            }
            g[target as usize] -= T::ONE;
        }
    }
    Ok((sum, count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tensor::log_softmax_f64;

    fn tiny(vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 12,
            vocab_size: vocab,
            dropout: 0.0,
            seed,
        }
    }

    #[test]
    fn output_shape_and_normalization() {
        let m = Transformer::<f32>::init(&tiny(11, 1)).unwrap();
        let ids = [1, 4, 2, 7, 3];
        let logits = m.logits(&ids).unwrap();
        assert_eq!(logits.len(), 5 * 11);
        for row in logits.chunks(11) {
            let s: f64 = log_softmax_f64(row).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_rows_are_bit_identical() {
        let m = Transformer::<f32>::init(&tiny(11, 2)).unwrap();
        let a = m.logits(&[1, 4, 2, 7, 3, 5]).unwrap();
        let b = m.logits(&[1, 4, 2, 9, 0, 10]).unwrap();
        assert_eq!(a[..3 * 11], b[..3 * 11]);
        assert_ne!(a[3 * 11..4 * 11], b[3 * 11..4 * 11]);
    }

    #[test]
    fn init_is_near_uniform() {
        let m = Transformer::<f32>::init(&tiny(16, 3)).unwrap();
        let logits = m.logits(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        for row in logits.chunks(16) {
            let maxp = log_softmax_f64(row).iter().map(|l| l.exp()).fold(0.0, f64::max);
            assert!(maxp < 0.5, "max prob {maxp}");
        }
        let targets = [1, 2, 3, 4, 5, 6, 7, 8];
        let nll = loss(&logits, 16, &targets, &[true; 8]).unwrap();
        assert!((nll - 16f64.ln()).abs() < 0.1 * 16f64.ln());
    }

    #[test]
    fn too_long_and_out_of_range() {
        let m = Transformer::<f32>::init(&tiny(11, 1)).unwrap();
        assert!(matches!(m.logits(&[0; 13]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.logits(&[11]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn incremental_matches_full() {
        let m = Transformer::<f32>::init(&tiny(11, 4)).unwrap();
        let ids = [3, 1, 4, 1, 5, 9, 2, 6];
        let full = m.logits(&ids).unwrap();
        let mut cache = m.kv_cache();
        for (t, &id) in ids.iter().enumerate() {
            let row = m.step(&mut cache, id).unwrap();
            for (a, b) in row.iter().zip(&full[t * 11..(t + 1) * 11]) {
                assert!((a - b).abs() < 1e-5, "pos {t}: {a} vs {b}");
            }
        }
        assert_eq!(cache.len(), ids.len());
    }

    #[test]
    fn loss_examples() {
        // uniform logits
        let v = 16;
        let logits = vec![0.0f64; 3 * v];
        let l = loss(&logits, v, &[0, 5, 9], &[true; 3]).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-6);

        // large-margin one-hot
        let mut sharp = vec![0.0f64; 2 * v];
        sharp[3] = 50.0;
        sharp[v + 7] = 50.0;
        assert!(loss(&sharp, v, &[3, 7], &[true, true]).unwrap() < 1e-12);

        assert!(loss(&sharp, v, &[3, 7], &[false, false]).is_err());
    }

    #[test]
    fn masked_loss_is_mean_of_kept_rows() {
        let v = 4;
        let logits: Vec<f64> = (0..4 * v).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let targets = [0, 3, 1, 2];
        let mask = [true, false, true, false];
        // brute force over the kept rows
        let mut want = 0.0;
        for r in [0usize, 2] {
            let row = &logits[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[targets[r] as usize].exp() / z).ln();
        }
        want /= 2.0;
        let got = loss(&logits, v, &targets, &mask).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
