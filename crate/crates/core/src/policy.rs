//! Small decoder-only autoregressive policy over the unified vocabulary.
//!
//! Pre-norm causal transformer with learned positions and an untied output
//! head. Gradients are handwritten backpropagation, verified against central
//! finite differences. Compute is generic over [`Real`]: f32 for training
//! throughput, f64 for gradient verification. Losses and log-probabilities
//! always accumulate in f64.

use crate::codec::TokenSequence;
use crate::rng::SeededRng;
use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Real, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_len: usize,
}

impl PolicyConfig {
    /// Desk-scale default: 2-block, 128-dim, 4-head causal transformer.
    pub fn default_for_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_blocks: 2,
            max_len: 1024,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.d_model % self.n_heads != 0 {
            return Err(PolicyError::BadConfig("d_model not divisible by n_heads"));
        }
        if self.vocab_size == 0 || self.n_blocks == 0 || self.max_len == 0 {
            return Err(PolicyError::BadConfig("zero-sized dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    BadConfig(&'static str),
    TooLong { len: usize, max: usize },
    ShapeMismatch(String),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::BadConfig(msg) => write!(f, "bad policy config: {msg}"),
            PolicyError::TooLong { len, max } => write!(f, "sequence length {len} exceeds {max}"),
            PolicyError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
        }
    }
}

/// One transformer block's parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTensors<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// All parameter arrays of the policy, in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTensors<T> {
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub blocks: Vec<BlockTensors<T>>,
    pub ln_f_g: Vec<T>,
    pub ln_f_b: Vec<T>,
    pub out_w: Vec<T>,
}

/// Gradient carrier: shape-congruent mirror of the parameter arrays.
pub type Gradient<T> = PolicyTensors<T>;

impl<T: Real> PolicyTensors<T> {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockTensors {
                ln1_g: vec![T::zero(); d],
                ln1_b: vec![T::zero(); d],
                wq: vec![T::zero(); d * d],
                wk: vec![T::zero(); d * d],
                wv: vec![T::zero(); d * d],
                wo: vec![T::zero(); d * d],
                ln2_g: vec![T::zero(); d],
                ln2_b: vec![T::zero(); d],
                w1: vec![T::zero(); d * ff],
                b1: vec![T::zero(); ff],
                w2: vec![T::zero(); ff * d],
                b2: vec![T::zero(); d],
            })
            .collect();
        Self {
            tok_emb: vec![T::zero(); cfg.vocab_size * d],
            pos_emb: vec![T::zero(); cfg.max_len * d],
            blocks,
            ln_f_g: vec![T::zero(); d],
            ln_f_b: vec![T::zero(); d],
            out_w: vec![T::zero(); d * cfg.vocab_size],
        }
    }

    /// All arrays in canonical order.
    pub fn arrays(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1,
                &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.ln_f_g, &self.ln_f_b, &self.out_w]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.out_w);
        out
    }

    pub fn numel(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// self += other * scale
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += *s * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for dst in self.arrays_mut() {
            for v in dst.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn convert<U: Real>(&self) -> PolicyTensors<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.into())).collect::<Vec<U>>();
        PolicyTensors {
            tok_emb: conv(&self.tok_emb),
            pos_emb: conv(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockTensors {
                    ln1_g: conv(&b.ln1_g),
                    ln1_b: conv(&b.ln1_b),
                    wq: conv(&b.wq),
                    wk: conv(&b.wk),
                    wv: conv(&b.wv),
                    wo: conv(&b.wo),
                    ln2_g: conv(&b.ln2_g),
                    ln2_b: conv(&b.ln2_b),
                    w1: conv(&b.w1),
                    b1: conv(&b.b1),
                    w2: conv(&b.w2),
                    b2: conv(&b.b2),
                })
                .collect(),
            ln_f_g: conv(&self.ln_f_g),
            ln_f_b: conv(&self.ln_f_b),
            out_w: conv(&self.out_w),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.arrays().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = ((*x).into() - (*y).into()).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }
}

/// Named parameter arrays of the policy (f32 storage).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub tensors: PolicyTensors<f32>,
}

impl PolicyParams {
    pub fn zeros(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self {
            tensors: PolicyTensors::zeros(&cfg),
            cfg,
        })
    }

    /// Seeded normal(0, 0.02) init for weights/embeddings, ones for layer
    /// norm gains, zeros for biases.
    pub fn init(cfg: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut p = PolicyTensors::<f32>::zeros(&cfg);
        let mut rng = SeededRng::new(seed);
        let mut fill = |v: &mut Vec<f32>| {
            for x in v.iter_mut() {
                *x = (0.02 * rng.normal()) as f32;
            }
        };
        fill(&mut p.tok_emb);
        fill(&mut p.pos_emb);
        for b in &mut p.blocks {
            fill(&mut b.wq);
            fill(&mut b.wk);
            fill(&mut b.wv);
            fill(&mut b.wo);
            fill(&mut b.w1);
            fill(&mut b.w2);
            b.ln1_g.iter_mut().for_each(|x| *x = 1.0);
            b.ln2_g.iter_mut().for_each(|x| *x = 1.0);
        }
        fill(&mut p.out_w);
        p.ln_f_g.iter_mut().for_each(|x| *x = 1.0);
        Ok(Self { cfg, tensors: p })
    }

    /// Canonical (name, shape) list matching [`PolicyTensors::arrays`] order.
    pub fn named_shapes(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        let mut out = vec![
            ("tok_emb".into(), vec![cfg.vocab_size, d]),
            ("pos_emb".into(), vec![cfg.max_len, d]),
        ];
        for i in 0..cfg.n_blocks {
            for (suffix, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.wo", vec![d, d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("ffn.w1", vec![d, ff]),
                ("ffn.b1", vec![ff]),
                ("ffn.w2", vec![ff, d]),
                ("ffn.b2", vec![d]),
            ] {
                out.push((format!("blk{i}.{suffix}"), shape));
            }
        }
        out.push(("ln_f.g".into(), vec![d]));
        out.push(("ln_f.b".into(), vec![d]));
        out.push(("out.w".into(), vec![d, cfg.vocab_size]));
        out
    }

    /// Named f32 tensors in canonical order (checkpoint surface).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        Self::named_shapes(&self.cfg)
            .into_iter()
            .zip(self.tensors.arrays())
            .map(|((name, shape), data)| {
                (
                    name,
                    Tensor {
                        shape,
                        data: data.clone(),
                    },
                )
            })
            .collect()
    }

    /// Rebuilds params from named tensors, validating shapes against cfg.
    pub fn from_named_tensors(
        cfg: PolicyConfig,
        tensors: &[(String, Tensor)],
    ) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let expected = Self::named_shapes(&cfg);
        if tensors.len() != expected.len() {
            return Err(PolicyError::ShapeMismatch(format!(
                "expected {} arrays, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = Self::zeros(cfg)?;
        {
            let dsts = params.tensors.arrays_mut();
            for (((name, shape), dst), (got_name, t)) in
                expected.iter().zip(dsts).zip(tensors.iter())
            {
                if name != got_name || shape != &t.shape {
                    return Err(PolicyError::ShapeMismatch(format!(
                        "array {got_name} {:?} does not match expected {name} {:?}",
                        t.shape, shape
                    )));
                }
                dst.copy_from_slice(&t.data);
            }
        }
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Compute model
// ---------------------------------------------------------------------------

/// Working copy of the parameters at compute precision T.
pub struct Model<T: Real> {
    pub cfg: PolicyConfig,
    p: PolicyTensors<T>,
}

struct BlockCache<T> {
    ln1_out: Vec<T>,
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// [n_heads][t][u] attention weights, lower-triangular rows.
    att: Vec<T>,
    ctx: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    ln2_out: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
}

struct ForwardCache<T> {
    len: usize,
    blocks: Vec<BlockCache<T>>,
    ln_f_xhat: Vec<T>,
    ln_f_rstd: Vec<T>,
    ln_f_out: Vec<T>,
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

/// y = g * (x - mu)/sigma + b per row; returns (xhat, rstd) for backward.
fn layer_norm_rows<T: Real>(
    x: &[T],
    g: &[T],
    b: &[T],
    rows: usize,
    d: usize,
    out: &mut Vec<T>,
    xhat: &mut Vec<T>,
    rstd: &mut Vec<T>,
) {
    out.resize(rows * d, T::zero());
    xhat.resize(rows * d, T::zero());
    rstd.resize(rows, T::zero());
    let dd = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / dd;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dd;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = g[i] * xh + b[i];
        }
    }
}

/// Backward of layer_norm_rows; accumulates into dg, db, writes dx.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    rows: usize,
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let dd = T::from_f64(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &xhat[r * d..(r + 1) * d];
        let mut sum_dyg = T::zero();
        let mut sum_dyg_xh = T::zero();
        for i in 0..d {
            let dyg = dyr[i] * g[i];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xhr[i];
            dg[i] += dyr[i] * xhr[i];
            db[i] += dyr[i];
        }
        let m1 = sum_dyg / dd;
        let m2 = sum_dyg_xh / dd;
        for i in 0..d {
            dx[r * d + i] = rstd[r] * (dyr[i] * g[i] - m1 - xhr[i] * m2);
        }
    }
}

impl<T: Real> Model<T> {
    pub fn from_params(params: &PolicyParams) -> Self {
        Self {
            cfg: params.cfg,
            p: params.tensors.convert(),
        }
    }

    fn embed(&self, ids: &[u32]) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut x = vec![T::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let e = &self.p.tok_emb[id as usize * d..(id as usize + 1) * d];
            let p = &self.p.pos_emb[t * d..(t + 1) * d];
            for i in 0..d {
                x[t * d + i] = e[i] + p[i];
            }
        }
        x
    }

    /// Full-sequence forward; caches everything needed for backprop.
    fn forward_cached(&self, ids: &[u32]) -> ForwardCache<T> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let len = ids.len();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        let mut x = self.embed(ids);
        let mut blocks = Vec::with_capacity(self.cfg.n_blocks);
        for bp in &self.p.blocks {
            let x_in = x.clone();
            let mut ln1_out = Vec::new();
            let mut ln1_xhat = Vec::new();
            let mut ln1_rstd = Vec::new();
            layer_norm_rows(
                &x, &bp.ln1_g, &bp.ln1_b, len, d, &mut ln1_out, &mut ln1_xhat, &mut ln1_rstd,
            );

            let mut q = vec![T::zero(); len * d];
            let mut k = vec![T::zero(); len * d];
            let mut v = vec![T::zero(); len * d];
            matmul_nn_acc(&ln1_out, &bp.wq, &mut q, len, d, d);
            matmul_nn_acc(&ln1_out, &bp.wk, &mut k, len, d, d);
            matmul_nn_acc(&ln1_out, &bp.wv, &mut v, len, d, d);

            let mut att = vec![T::zero(); heads * len * len];
            let mut ctx = vec![T::zero(); len * d];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..len {
                    let qrow = &q[t * d + off..t * d + off + hd];
                    // Scores over u <= t, softmax in f64 for stability.
                    let mut row_max = f64::NEG_INFINITY;
                    let mut scores = vec![0.0f64; t + 1];
                    for u in 0..=t {
                        let krow = &k[u * d + off..u * d + off + hd];
                        let mut s = T::zero();
                        for i in 0..hd {
                            s += qrow[i] * krow[i];
                        }
                        let s = (s * scale).into();
                        scores[u] = s;
                        if s > row_max {
                            row_max = s;
                        }
                    }
                    let mut denom = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - row_max).exp();
                        denom += *s;
                    }
                    let arow = &mut att[h * len * len + t * len..h * len * len + t * len + t + 1];
                    for u in 0..=t {
                        arow[u] = T::from_f64(scores[u] / denom);
                    }
                    let crow = &mut ctx[t * d + off..t * d + off + hd];
                    for u in 0..=t {
                        let w = arow[u];
                        let vrow = &v[u * d + off..u * d + off + hd];
                        for i in 0..hd {
                            crow[i] += w * vrow[i];
                        }
                    }
                }
            }

            let mut x_mid = x_in.clone();
            matmul_nn_acc(&ctx, &bp.wo, &mut x_mid, len, d, d);

            let mut ln2_out = Vec::new();
            let mut ln2_xhat = Vec::new();
            let mut ln2_rstd = Vec::new();
            layer_norm_rows(
                &x_mid, &bp.ln2_g, &bp.ln2_b, len, d, &mut ln2_out, &mut ln2_xhat, &mut ln2_rstd,
            );

            let ff = self.cfg.d_ff();
            let mut ff_pre = vec![T::zero(); len * ff];
            for t in 0..len {
                ff_pre[t * ff..(t + 1) * ff].copy_from_slice(&bp.b1);
            }
            matmul_nn_acc(&ln2_out, &bp.w1, &mut ff_pre, len, d, ff);
            let mut ff_act = vec![T::zero(); len * ff];
            for i in 0..len * ff {
                ff_act[i] = gelu(ff_pre[i]);
            }
            let mut x_out = x_mid.clone();
            for t in 0..len {
                for i in 0..d {
                    x_out[t * d + i] += bp.b2[i];
                }
            }
            matmul_nn_acc(&ff_act, &bp.w2, &mut x_out, len, ff, d);

            blocks.push(BlockCache {
                ln1_out,
                ln1_xhat,
                ln1_rstd,
                q,
                k,
                v,
                att,
                ctx,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                ff_pre,
                ff_act,
            });
            x = x_out;
        }

        let x_final_in = x;
        let mut ln_f_out = Vec::new();
        let mut ln_f_xhat = Vec::new();
        let mut ln_f_rstd = Vec::new();
        layer_norm_rows(
            &x_final_in,
            &self.p.ln_f_g,
            &self.p.ln_f_b,
            len,
            d,
            &mut ln_f_out,
            &mut ln_f_xhat,
            &mut ln_f_rstd,
        );
        ForwardCache {
            len,
            blocks,
            ln_f_xhat,
            ln_f_rstd,
            ln_f_out,
        }
    }

    /// Logits for a span of positions [start, end) from the cached trunk.
    fn logits_rows(&self, cache: &ForwardCache<T>, start: usize, end: usize) -> Vec<T> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let rows = end - start;
        let mut logits = vec![T::zero(); rows * v];
        matmul_nn_acc(
            &cache.ln_f_out[start * d..end * d],
            &self.p.out_w,
            &mut logits,
            rows,
            d,
            v,
        );
        logits
    }

    /// Next-token probability distribution after the prefix.
    pub fn forward_logits(&self, prefix: &[u32]) -> Result<Vec<f64>, PolicyError> {
        self.check_len(prefix.len(), true)?;
        let cache = self.forward_cached(prefix);
        let logits = self.logits_rows(&cache, cache.len - 1, cache.len);
        Ok(softmax_f64(&logits))
    }

    /// Per-token log-probs log P(seq[t] | seq[<t]) for positions >= prompt_len.
    pub fn sequence_log_prob(
        &self,
        ids: &[u32],
        prompt_len: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        if prompt_len == 0 || prompt_len >= ids.len() {
            return Err(PolicyError::ShapeMismatch(format!(
                "prompt_len {} out of range for sequence of {}",
                prompt_len,
                ids.len()
            )));
        }
        self.check_len(ids.len(), false)?;
        let v = self.cfg.vocab_size;
        let cache = self.forward_cached(ids);
        let logits = self.logits_rows(&cache, prompt_len - 1, ids.len() - 1);
        let mut out = Vec::with_capacity(ids.len() - prompt_len);
        for (row, t) in (prompt_len..ids.len()).enumerate() {
            let lse = log_sum_exp(&logits[row * v..(row + 1) * v]);
            out.push(Into::<f64>::into(logits[row * v + ids[t] as usize]) - lse);
        }
        Ok(out)
    }

    /// Exact gradient of sum_t weights[t] * log P(ids[prompt_len + t] | ...).
    ///
    /// Returns (weighted log-prob sum, gradient). `weights` aligns with the
    /// response positions `prompt_len..ids.len()`.
    pub fn grad_weighted_log_prob(
        &self,
        ids: &[u32],
        prompt_len: usize,
        weights: &[f64],
    ) -> Result<(f64, Gradient<T>), PolicyError> {
        if prompt_len == 0 || prompt_len >= ids.len() {
            return Err(PolicyError::ShapeMismatch(format!(
                "prompt_len {} out of range for sequence of {}",
                prompt_len,
                ids.len()
            )));
        }
        if weights.len() != ids.len() - prompt_len {
            return Err(PolicyError::ShapeMismatch(format!(
                "{} weights for {} response tokens",
                weights.len(),
                ids.len() - prompt_len
            )));
        }
        self.check_len(ids.len(), false)?;

        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let len = ids.len();
        let cache = self.forward_cached(ids);
        let mut grad = Gradient::<T>::zeros(&self.cfg);

        // Rows prompt_len-1 .. len-1 predict the response tokens.
        let start = prompt_len - 1;
        let rows = len - 1 - start;
        let logits = self.logits_rows(&cache, start, len - 1);
        let mut value = 0.0f64;
        let mut dlogits = vec![T::zero(); rows * v];
        for r in 0..rows {
            let w = weights[r];
            let target = ids[start + r + 1] as usize;
            let row = &logits[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            value += w * (Into::<f64>::into(row[target]) - lse);
            if w != 0.0 {
                let wt = T::from_f64(w);
                let drow = &mut dlogits[r * v..(r + 1) * v];
                for j in 0..v {
                    let p = T::from_f64((Into::<f64>::into(row[j]) - lse).exp());
                    drow[j] = -(wt * p);
                }
                drow[target] = drow[target] + wt;
            }
        }

        // d ln_f_out rows [start, len-1); zero elsewhere.
        let mut d_lnf_out = vec![T::zero(); len * d];
        matmul_nt_acc(
            &dlogits,
            &self.p.out_w,
            &mut d_lnf_out[start * d..(len - 1) * d],
            rows,
            v,
            d,
        );
        matmul_tn_acc(
            &cache.ln_f_out[start * d..(len - 1) * d],
            &dlogits,
            &mut grad.out_w,
            d,
            rows,
            v,
        );

        let mut dx = vec![T::zero(); len * d];
        layer_norm_backward(
            &d_lnf_out,
            &cache.ln_f_xhat,
            &cache.ln_f_rstd,
            &self.p.ln_f_g,
            len,
            d,
            &mut dx,
            &mut grad.ln_f_g,
            &mut grad.ln_f_b,
        );

        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let ff = self.cfg.d_ff();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());

        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let bp = &self.p.blocks[bi];
            let gb = &mut grad.blocks[bi];

            // FFN backward: x_out = x_mid + gelu(ln2_out*W1 + b1)*W2 + b2.
            let mut d_act = vec![T::zero(); len * ff];
            matmul_nt_acc(&dx, &bp.w2, &mut d_act, len, d, ff);
            matmul_tn_acc(&bc.ff_act, &dx, &mut gb.w2, ff, len, d);
            for t in 0..len {
                for i in 0..d {
                    gb.b2[i] += dx[t * d + i];
                }
            }
            let mut d_pre = vec![T::zero(); len * ff];
            for i in 0..len * ff {
                d_pre[i] = d_act[i] * gelu_grad(bc.ff_pre[i]);
            }
            let mut d_ln2_out = vec![T::zero(); len * d];
            matmul_nt_acc(&d_pre, &bp.w1, &mut d_ln2_out, len, ff, d);
            matmul_tn_acc(&bc.ln2_out, &d_pre, &mut gb.w1, d, len, ff);
            for t in 0..len {
                for i in 0..ff {
                    gb.b1[i] += d_pre[t * ff + i];
                }
            }
            // d x_mid = dx (residual) + LN2 backward contribution.
            let mut d_x_mid = vec![T::zero(); len * d];
            layer_norm_backward(
                &d_ln2_out,
                &bc.ln2_xhat,
                &bc.ln2_rstd,
                &bp.ln2_g,
                len,
                d,
                &mut d_x_mid,
                &mut gb.ln2_g,
                &mut gb.ln2_b,
            );
            for i in 0..len * d {
                d_x_mid[i] += dx[i];
            }

            // Attention backward: x_mid = x_in + ctx*Wo.
            let mut d_ctx = vec![T::zero(); len * d];
            matmul_nt_acc(&d_x_mid, &bp.wo, &mut d_ctx, len, d, d);
            matmul_tn_acc(&bc.ctx, &d_x_mid, &mut gb.wo, d, len, d);

            let mut dq = vec![T::zero(); len * d];
            let mut dk = vec![T::zero(); len * d];
            let mut dv = vec![T::zero(); len * d];
            for h in 0..heads {
                let off = h * hd;
                let abase = h * len * len;
                for t in 0..len {
                    let arow = &bc.att[abase + t * len..abase + t * len + t + 1];
                    let dc = &d_ctx[t * d + off..t * d + off + hd];
                    // datt[u] = dctx . v[u]; ds = att * (datt - sum(att*datt)).
                    let mut datt = vec![T::zero(); t + 1];
                    let mut inner = T::zero();
                    for u in 0..=t {
                        let vrow = &bc.v[u * d + off..u * d + off + hd];
                        let mut s = T::zero();
                        for i in 0..hd {
                            s += dc[i] * vrow[i];
                        }
                        datt[u] = s;
                        inner += arow[u] * s;
                    }
                    for u in 0..=t {
                        let ds = arow[u] * (datt[u] - inner) * scale;
                        let krow = &bc.k[u * d + off..u * d + off + hd];
                        let qrow = &bc.q[t * d + off..t * d + off + hd];
                        let dqr = &mut dq[t * d + off..t * d + off + hd];
                        for i in 0..hd {
                            dqr[i] += ds * krow[i];
                        }
                        let dkr = &mut dk[u * d + off..u * d + off + hd];
                        for i in 0..hd {
                            dkr[i] += ds * qrow[i];
                        }
                        // dv[u] += att[u] * dctx
                        let w = arow[u];
                        let dvr = &mut dv[u * d + off..u * d + off + hd];
                        for i in 0..hd {
                            dvr[i] += w * dc[i];
                        }
                    }
                }
            }

            let mut d_ln1_out = vec![T::zero(); len * d];
            matmul_nt_acc(&dq, &bp.wq, &mut d_ln1_out, len, d, d);
            matmul_nt_acc(&dk, &bp.wk, &mut d_ln1_out, len, d, d);
            matmul_nt_acc(&dv, &bp.wv, &mut d_ln1_out, len, d, d);
            matmul_tn_acc(&bc.ln1_out, &dq, &mut gb.wq, d, len, d);
            matmul_tn_acc(&bc.ln1_out, &dk, &mut gb.wk, d, len, d);
            matmul_tn_acc(&bc.ln1_out, &dv, &mut gb.wv, d, len, d);

            let mut d_x_in = vec![T::zero(); len * d];
            layer_norm_backward(
                &d_ln1_out,
                &bc.ln1_xhat,
                &bc.ln1_rstd,
                &bp.ln1_g,
                len,
                d,
                &mut d_x_in,
                &mut gb.ln1_g,
                &mut gb.ln1_b,
            );
            for i in 0..len * d {
                dx[i] = d_x_mid[i] + d_x_in[i];
            }
        }

        // Embedding backward.
        for (t, &id) in ids.iter().enumerate() {
            let src = &dx[t * d..(t + 1) * d];
            let te = &mut grad.tok_emb[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                te[i] += src[i];
            }
            let pe = &mut grad.pos_emb[t * d..(t + 1) * d];
            for i in 0..d {
                pe[i] += src[i];
            }
        }

        Ok((value, grad))
    }

    /// Ancestral sampling with a per-block KV cache.
    ///
    /// Temperature 0 is argmax with lowest-id tie-break. Returns the full
    /// sequence (prompt + response) and the log-prob of each sampled token.
    pub fn sample_sequence(
        &self,
        prompt: &[u32],
        temperature: f64,
        max_len: usize,
        stop_id: u32,
        rng_seed: u64,
    ) -> Result<(Vec<u32>, Vec<f64>), PolicyError> {
        if prompt.is_empty() || prompt.len() >= max_len || max_len > self.cfg.max_len {
            return Err(PolicyError::TooLong {
                len: prompt.len(),
                max: max_len.min(self.cfg.max_len),
            });
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let ff = self.cfg.d_ff();
        let vsz = self.cfg.vocab_size;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut rng = SeededRng::new(rng_seed);

        let mut kcache = vec![Vec::<T>::with_capacity(max_len * d); self.cfg.n_blocks];
        let mut vcache = vec![Vec::<T>::with_capacity(max_len * d); self.cfg.n_blocks];
        let mut ids: Vec<u32> = prompt.to_vec();
        let mut log_probs = Vec::new();

        let mut xbuf = vec![T::zero(); d];
        for pos in 0..max_len {
            if pos >= ids.len() {
                break;
            }
            let id = ids[pos] as usize;
            for i in 0..d {
                xbuf[i] = self.p.tok_emb[id * d + i] + self.p.pos_emb[pos * d + i];
            }
            let mut x = xbuf.clone();
            for (bi, bp) in self.p.blocks.iter().enumerate() {
                let mut a = Vec::new();
                let mut xh = Vec::new();
                let mut rs = Vec::new();
                layer_norm_rows(&x, &bp.ln1_g, &bp.ln1_b, 1, d, &mut a, &mut xh, &mut rs);
                let mut q = vec![T::zero(); d];
                let mut knew = vec![T::zero(); d];
                let mut vnew = vec![T::zero(); d];
                matmul_nn_acc(&a, &bp.wq, &mut q, 1, d, d);
                matmul_nn_acc(&a, &bp.wk, &mut knew, 1, d, d);
                matmul_nn_acc(&a, &bp.wv, &mut vnew, 1, d, d);
                kcache[bi].extend_from_slice(&knew);
                vcache[bi].extend_from_slice(&vnew);
                let klen = pos + 1;
                let mut ctx = vec![T::zero(); d];
                for h in 0..heads {
                    let off = h * hd;
                    let mut scores = vec![0.0f64; klen];
                    let mut row_max = f64::NEG_INFINITY;
                    for u in 0..klen {
                        let krow = &kcache[bi][u * d + off..u * d + off + hd];
                        let mut s = T::zero();
                        for i in 0..hd {
                            s += q[off + i] * krow[i];
                        }
                        let s = (s * scale).into();
                        scores[u] = s;
                        if s > row_max {
                            row_max = s;
                        }
                    }
                    let mut denom = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - row_max).exp();
                        denom += *s;
                    }
                    let crow = &mut ctx[off..off + hd];
                    for u in 0..klen {
                        let w = T::from_f64(scores[u] / denom);
                        let vrow = &vcache[bi][u * d + off..u * d + off + hd];
                        for i in 0..hd {
                            crow[i] += w * vrow[i];
                        }
                    }
                }
                let mut x_mid = x.clone();
                matmul_nn_acc(&ctx, &bp.wo, &mut x_mid, 1, d, d);
                let mut a2 = Vec::new();
                layer_norm_rows(&x_mid, &bp.ln2_g, &bp.ln2_b, 1, d, &mut a2, &mut xh, &mut rs);
                let mut pre = bp.b1.clone();
                matmul_nn_acc(&a2, &bp.w1, &mut pre, 1, d, ff);
                for v in pre.iter_mut() {
                    *v = gelu(*v);
                }
                let mut x_out = x_mid;
                for i in 0..d {
                    x_out[i] += bp.b2[i];
                }
                matmul_nn_acc(&pre, &bp.w2, &mut x_out, 1, ff, d);
                x = x_out;
            }
            let mut h = Vec::new();
            let mut xh = Vec::new();
            let mut rs = Vec::new();
            layer_norm_rows(&x, &self.p.ln_f_g, &self.p.ln_f_b, 1, d, &mut h, &mut xh, &mut rs);
            let mut logits = vec![T::zero(); vsz];
            matmul_nn_acc(&h, &self.p.out_w, &mut logits, 1, d, vsz);

            // Prompt positions only feed the cache.
            if pos + 1 < ids.len() {
                continue;
            }
            if ids.len() >= max_len {
                break;
            }
            let (next, lp) = if temperature <= 0.0 {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &l) in logits.iter().enumerate() {
                    let l: f64 = l.into();
                    if l > best_v {
                        best_v = l;
                        best = j;
                    }
                }
                let lse = log_sum_exp(&logits);
                (best as u32, best_v - lse)
            } else {
                let inv_t = 1.0 / temperature;
                let scaled: Vec<f64> = logits.iter().map(|&l| Into::<f64>::into(l) * inv_t).collect();
                let lse = log_sum_exp_f64(&scaled);
                let u = rng.uniform();
                let mut acc = 0.0f64;
                let mut chosen = vsz - 1;
                for (j, &s) in scaled.iter().enumerate() {
                    acc += (s - lse).exp();
                    if u < acc {
                        chosen = j;
                        break;
                    }
                }
                // Log-prob under the sampling temperature's distribution is
                // not what the ratio needs; record log P at temperature 1.
                let lse1 = log_sum_exp(&logits);
                (chosen as u32, Into::<f64>::into(logits[chosen]) - lse1)
            };
            ids.push(next);
            log_probs.push(lp);
            if next == stop_id {
                break;
            }
        }
        Ok((ids, log_probs))
    }

    fn check_len(&self, len: usize, strict: bool) -> Result<(), PolicyError> {
        let max = self.cfg.max_len;
        if len == 0 || len > max || (strict && len >= max) {
            return Err(PolicyError::TooLong { len, max });
        }
        Ok(())
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        let x: f64 = x.into();
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0f64;
    for &x in row {
        let x: f64 = x.into();
        s += (x - m).exp();
    }
    m + s.ln()
}

fn log_sum_exp_f64(row: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0f64;
    for &x in row {
        s += (x - m).exp();
    }
    m + s.ln()
}

fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| (Into::<f64>::into(x) - lse).exp()).collect()
}

// ---------------------------------------------------------------------------
// Spec-surface wrappers over PolicyParams (f32 compute).
// ---------------------------------------------------------------------------

/// Next-token distribution after the prefix.
pub fn forward_logits(params: &PolicyParams, prefix: &TokenSequence) -> Result<Vec<f64>, PolicyError> {
    Model::<f32>::from_params(params).forward_logits(&prefix.ids)
}

/// Per-token log-probs for positions >= prompt_len.
pub fn sequence_log_prob(
    params: &PolicyParams,
    seq: &TokenSequence,
    prompt_len: usize,
) -> Result<Vec<f64>, PolicyError> {
    Model::<f32>::from_params(params).sequence_log_prob(&seq.ids, prompt_len)
}

/// Seeded ancestral sampling; returns the full token sequence.
pub fn sample_sequence(
    params: &PolicyParams,
    prompt: &TokenSequence,
    temperature: f64,
    max_len: usize,
    stop_id: u32,
    rng_seed: u64,
) -> Result<TokenSequence, PolicyError> {
    let (ids, _) = Model::<f32>::from_params(params).sample_sequence(
        &prompt.ids,
        temperature,
        max_len,
        stop_id,
        rng_seed,
    )?;
    let mut seq = TokenSequence::new();
    for id in ids {
        seq.push(id);
    }
    Ok(seq)
}

/// Gradient of sum_t weights[t] * log P(seq[t] | seq[<t]).
pub fn grad_weighted_log_prob(
    params: &PolicyParams,
    seq: &TokenSequence,
    prompt_len: usize,
    weights: &[f64],
) -> Result<(f64, Gradient<f32>), PolicyError> {
    Model::<f32>::from_params(params).grad_weighted_log_prob(&seq.ids, prompt_len, weights)
}
