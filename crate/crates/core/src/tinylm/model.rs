//! Decoder-only transformer over injected embedding sequences.
//!
//! The model consumes a T×d embedding matrix directly, so vocabulary-token
//! embeddings and injected non-textual embeddings are interchangeable at
//! the interface. Pre-norm blocks, causal attention, GELU feed-forward,
//! tied input/output embeddings, and optional low-rank adapters on the
//! query and value projections. Forward and backward are hand-written and
//! verified against central finite differences.

use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_backward_row, Mat};
use crate::rng::Rng;

use super::vocab::{Vocabulary, EOS_ID};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_mult: usize,
    pub context: usize,
}

impl LmConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_mult: 4,
            context: 512,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub ff_w1: Mat,
    pub ff_b1: Mat,
    pub ff_w2: Mat,
    pub ff_b2: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseParams {
    /// Token embedding table, also the tied output head.
    pub embed: Mat,
    pub pos: Mat,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
}

impl BaseParams {
    pub fn init(config: &LmConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let ff = d * config.ff_mult;
        let sigma = 0.02;
        let ln_pair = |d: usize| {
            let mut g = Mat::zeros(1, d);
            g.fill(1.0);
            (g, Mat::zeros(1, d))
        };
        BaseParams {
            embed: Mat::randn(config.vocab_size, d, sigma, rng),
            pos: Mat::randn(config.context, d, sigma, rng),
            blocks: (0..config.n_blocks)
                .map(|_| {
                    let (ln1_g, ln1_b) = ln_pair(d);
                    let (ln2_g, ln2_b) = ln_pair(d);
                    BlockParams {
                        ln1_g,
                        ln1_b,
                        w_q: Mat::randn(d, d, sigma, rng),
                        w_k: Mat::randn(d, d, sigma, rng),
                        w_v: Mat::randn(d, d, sigma, rng),
                        w_o: Mat::randn(d, d, sigma, rng),
                        ln2_g,
                        ln2_b,
                        ff_w1: Mat::randn(d, ff, sigma, rng),
                        ff_b1: Mat::zeros(1, ff),
                        ff_w2: Mat::randn(ff, d, sigma, rng),
                        ff_b2: Mat::zeros(1, d),
                    }
                })
                .collect(),
            lnf_g: ln_pair(d).0,
            lnf_b: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        BaseParams {
            embed: self.embed.zeros_like(),
            pos: self.pos.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: b.ln1_g.zeros_like(),
                    ln1_b: b.ln1_b.zeros_like(),
                    w_q: b.w_q.zeros_like(),
                    w_k: b.w_k.zeros_like(),
                    w_v: b.w_v.zeros_like(),
                    w_o: b.w_o.zeros_like(),
                    ln2_g: b.ln2_g.zeros_like(),
                    ln2_b: b.ln2_b.zeros_like(),
                    ff_w1: b.ff_w1.zeros_like(),
                    ff_b1: b.ff_b1.zeros_like(),
                    ff_w2: b.ff_w2.zeros_like(),
                    ff_b2: b.ff_b2.zeros_like(),
                })
                .collect(),
            lnf_g: self.lnf_g.zeros_like(),
            lnf_b: self.lnf_b.zeros_like(),
        }
    }
}

impl NamedTensors for BaseParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> =
            vec![("embed".into(), &self.embed), ("pos".into(), &self.pos)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.g"), &b.ln1_g));
            out.push((format!("block{i}.ln1.b"), &b.ln1_b));
            out.push((format!("block{i}.w_q"), &b.w_q));
            out.push((format!("block{i}.w_k"), &b.w_k));
            out.push((format!("block{i}.w_v"), &b.w_v));
            out.push((format!("block{i}.w_o"), &b.w_o));
            out.push((format!("block{i}.ln2.g"), &b.ln2_g));
            out.push((format!("block{i}.ln2.b"), &b.ln2_b));
            out.push((format!("block{i}.ff.w1"), &b.ff_w1));
            out.push((format!("block{i}.ff.b1"), &b.ff_b1));
            out.push((format!("block{i}.ff.w2"), &b.ff_w2));
            out.push((format!("block{i}.ff.b2"), &b.ff_b2));
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.g"), &mut b.ln1_g));
            out.push((format!("block{i}.ln1.b"), &mut b.ln1_b));
            out.push((format!("block{i}.w_q"), &mut b.w_q));
            out.push((format!("block{i}.w_k"), &mut b.w_k));
            out.push((format!("block{i}.w_v"), &mut b.w_v));
            out.push((format!("block{i}.w_o"), &mut b.w_o));
            out.push((format!("block{i}.ln2.g"), &mut b.ln2_g));
            out.push((format!("block{i}.ln2.b"), &mut b.ln2_b));
            out.push((format!("block{i}.ff.w1"), &mut b.ff_w1));
            out.push((format!("block{i}.ff.b1"), &mut b.ff_b1));
            out.push((format!("block{i}.ff.w2"), &mut b.ff_w2));
            out.push((format!("block{i}.ff.b2"), &mut b.ff_b2));
        }
        out.push(("lnf.g".into(), &mut self.lnf_g));
        out.push(("lnf.b".into(), &mut self.lnf_b));
        out
    }
}

/// The frozen backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseLm {
    pub config: LmConfig,
    pub params: BaseParams,
    pub frozen: bool,
}

impl BaseLm {
    pub fn init(config: LmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(BaseLm {
            config,
            params: BaseParams::init(&config, rng),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Row lookup into the embedding table.
    pub fn embed_tokens(&self, ids: &[u32]) -> Mat {
        let d = self.config.d_model;
        let mut out = Mat::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(self.params.embed.row(id as usize));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Low-rank adapters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
        }
    }
}

/// Delta for one weight: effective W_delta = (alpha/r) * B A, with
/// A: r x d_in and B: d_out x r. B starts at zero so fresh adapters are an
/// exact identity wrapper.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockAdapters {
    pub q: LoraPair,
    pub v: LoraPair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapters {
    pub config: LoraConfig,
    pub blocks: Vec<BlockAdapters>,
}

impl LoraAdapters {
    pub fn init(lm: &LmConfig, config: LoraConfig, rng: &mut Rng) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let d = lm.d_model;
        let pair = |rng: &mut Rng| LoraPair {
            a: Mat::randn(config.rank, d, 0.02, rng),
            b: Mat::zeros(d, config.rank),
        };
        Ok(LoraAdapters {
            config,
            blocks: (0..lm.n_blocks)
                .map(|_| BlockAdapters {
                    q: pair(rng),
                    v: pair(rng),
                })
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        LoraAdapters {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockAdapters {
                    q: LoraPair {
                        a: b.q.a.zeros_like(),
                        b: b.q.b.zeros_like(),
                    },
                    v: LoraPair {
                        a: b.v.a.zeros_like(),
                        b: b.v.b.zeros_like(),
                    },
                })
                .collect(),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    /// (alpha/r) * B A as a d_out x d_in matrix.
    pub fn delta(&self, pair: &LoraPair) -> Mat {
        pair.b.matmul(&pair.a).scaled(self.scaling())
    }
}

impl NamedTensors for LoraAdapters {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.q.a"), &b.q.a));
            out.push((format!("block{i}.q.b"), &b.q.b));
            out.push((format!("block{i}.v.a"), &b.v.a));
            out.push((format!("block{i}.v.b"), &b.v.b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.q.a"), &mut b.q.a));
            out.push((format!("block{i}.q.b"), &mut b.q.b));
            out.push((format!("block{i}.v.a"), &mut b.v.a));
            out.push((format!("block{i}.v.b"), &mut b.v.b));
        }
        out
    }
}

/// Fold adapter deltas into a copy of the base weights.
pub fn apply_lora(base: &BaseLm, adapters: &LoraAdapters) -> Result<BaseLm> {
    if adapters.blocks.len() != base.config.n_blocks {
        return Err(Error::Shape(format!(
            "adapters cover {} blocks, model has {}",
            adapters.blocks.len(),
            base.config.n_blocks
        )));
    }
    let mut merged = base.clone();
    for (block, ad) in merged.params.blocks.iter_mut().zip(&adapters.blocks) {
        // Weights are stored d_in x d_out, so the delta transposes in.
        block.w_q.add_assign(&adapters.delta(&ad.q).transpose());
        block.w_v.add_assign(&adapters.delta(&ad.v).transpose());
    }
    merged.frozen = false;
    Ok(merged)
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    n1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// N1 . A^T per adapted projection, needed for adapter gradients.
    lora_q_u: Option<Mat>,
    lora_v_u: Option<Mat>,
    /// Causal attention probabilities, one T x T matrix per head.
    probs: Vec<Mat>,
    att_concat: Mat,
    ln2: LnCache,
    n2: Mat,
    ff_pre: Mat,
    ff_act: Mat,
}

/// Activations of one forward pass; feeds logit evaluation and backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    t: usize,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    /// Final hidden states after the last norm (T x d).
    pub hidden: Mat,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let (t, d) = (x.rows, x.cols);
    let mut out = Mat::zeros(t, d);
    let mut xhat = Mat::zeros(t, d);
    let mut inv_std = vec![0.0; t];
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            let xh = (row[c] - mean) * istd;
            xhat.data[r * d + c] = xh;
            out.data[r * d + c] = g.data[c] * xh + b.data[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// dL/dx for y = g*xhat + b, accumulating dg and db.
fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    g: &Mat,
    dg: &mut Mat,
    db: &mut Mat,
) -> Mat {
    let (t, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(t, d);
    for r in 0..t {
        let dy_row = dy.row(r);
        let xhat_row = cache.xhat.row(r);
        for c in 0..d {
            dg.data[c] += dy_row[c] * xhat_row[c];
            db.data[c] += dy_row[c];
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let dxh = dy_row[c] * g.data[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_row[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let istd = cache.inv_std[r];
        for c in 0..d {
            let dxh = dy_row[c] * g.data[c];
            dx.data[r * d + c] = istd * (dxh - mean_dxhat - xhat_row[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Projection with an optional low-rank delta. Returns (output, n1 . A^T).
fn project_with_adapter(
    n1: &Mat,
    w: &Mat,
    adapter: Option<(&LoraPair, f64)>,
) -> (Mat, Option<Mat>) {
    let mut out = n1.matmul(w);
    match adapter {
        None => (out, None),
        Some((pair, scaling)) => {
            let u = n1.matmul_transpose_b(&pair.a); // T x r
            let delta = u.matmul_transpose_b(&pair.b); // T x d_out
            for (o, d) in out.data.iter_mut().zip(delta.data.iter()) {
                *o += scaling * d;
            }
            (out, Some(u))
        }
    }
}

impl BaseLm {
    /// Run the stack over an embedding sequence. Positional embeddings are
    /// added internally.
    pub fn forward(&self, embeddings: &Mat, adapters: Option<&LoraAdapters>) -> Result<ForwardCache> {
        let t = embeddings.rows;
        let d = self.config.d_model;
        if embeddings.cols != d {
            return Err(Error::Shape(format!(
                "embeddings are {} wide, model expects {d}",
                embeddings.cols
            )));
        }
        if t > self.config.context {
            return Err(Error::ContextLength {
                len: t,
                max: self.config.context,
                detail: "input embedding sequence".into(),
            });
        }
        if let Some(ad) = adapters {
            if ad.blocks.len() != self.config.n_blocks {
                return Err(Error::Shape("adapter/block count mismatch".into()));
            }
        }
        let n_heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = embeddings.clone();
        for r in 0..t {
            axpy(x.row_mut(r), 1.0, self.params.pos.row(r));
        }

        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for (bi, block) in self.params.blocks.iter().enumerate() {
            let x_in = x.clone();
            let (n1, ln1) = layer_norm(&x_in, &block.ln1_g, &block.ln1_b);
            let ad = adapters.map(|a| (&a.blocks[bi], a.scaling()));
            let (q, lora_q_u) =
                project_with_adapter(&n1, &block.w_q, ad.map(|(b, s)| (&b.q, s)));
            let k = n1.matmul(&block.w_k);
            let (v, lora_v_u) =
                project_with_adapter(&n1, &block.w_v, ad.map(|(b, s)| (&b.v, s)));

            let mut att_concat = Mat::zeros(t, d);
            let mut probs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let off = h * hd;
                let mut p = Mat::zeros(t, t);
                for i in 0..t {
                    let qi = &q.row(i)[off..off + hd];
                    // causal: keys 0..=i only
                    let mut max = f64::NEG_INFINITY;
                    let row = p.row_mut(i);
                    for j in 0..=i {
                        let kj = &k.row(j)[off..off + hd];
                        let s = dot(qi, kj) * scale;
                        if !s.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite attention logit at block {bi} head {h}"
                            )));
                        }
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..=i {
                        row[j] /= sum;
                    }
                }
                for i in 0..t {
                    let out_row = &mut att_concat.row_mut(i)[off..off + hd];
                    for j in 0..=i {
                        let w = p.at(i, j);
                        if w != 0.0 {
                            let vj = &v.row(j)[off..off + hd];
                            for (o, &vv) in out_row.iter_mut().zip(vj.iter()) {
                                *o += w * vv;
                            }
                        }
                    }
                }
                probs.push(p);
            }

            let att_out = att_concat.matmul(&block.w_o);
            let mut x_mid = x_in.clone();
            x_mid.add_assign(&att_out);

            let (n2, ln2) = layer_norm(&x_mid, &block.ln2_g, &block.ln2_b);
            let mut ff_pre = n2.matmul(&block.ff_w1);
            for r in 0..t {
                axpy(ff_pre.row_mut(r), 1.0, block.ff_b1.row(0));
            }
            let mut ff_act = ff_pre.clone();
            for v in ff_act.data.iter_mut() {
                *v = gelu(*v);
            }
            let mut ff_out = ff_act.matmul(&block.ff_w2);
            for r in 0..t {
                axpy(ff_out.row_mut(r), 1.0, block.ff_b2.row(0));
            }
            let mut x_out = x_mid.clone();
            x_out.add_assign(&ff_out);

            blocks.push(BlockCache {
                ln1,
                n1,
                q,
                k,
                v,
                lora_q_u,
                lora_v_u,
                probs,
                att_concat,
                ln2,
                n2,
                ff_pre,
                ff_act,
            });
            x = x_out;
        }

        let (hidden, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Ok(ForwardCache {
            t,
            blocks,
            lnf,
            hidden,
        })
    }

    /// Logits for selected positions (rows of the hidden matrix), via the
    /// tied embedding head.
    pub fn logits_rows(&self, cache: &ForwardCache, rows: &[usize]) -> Result<Mat> {
        let v = self.config.vocab_size;
        let mut out = Mat::zeros(rows.len(), v);
        for (r_out, &r) in rows.iter().enumerate() {
            if r >= cache.t {
                return Err(Error::Data(format!(
                    "logit row {r} out of range for sequence of {}",
                    cache.t
                )));
            }
            let h = cache.hidden.row(r);
            let row = out.row_mut(r_out);
            for tok in 0..v {
                row[tok] = dot(h, self.params.embed.row(tok));
            }
        }
        Ok(out)
    }

    /// Full T x V logit matrix.
    pub fn logits_all(&self, cache: &ForwardCache) -> Mat {
        let rows: Vec<usize> = (0..cache.t).collect();
        self.logits_rows(cache, &rows).expect("rows in range")
    }

    /// One-call convenience: forward then full logits.
    pub fn forward_logits(
        &self,
        embeddings: &Mat,
        adapters: Option<&LoraAdapters>,
    ) -> Result<Mat> {
        let cache = self.forward(embeddings, adapters)?;
        Ok(self.logits_all(&cache))
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients from one backward pass. Base and adapter gradients are always
/// materialized; stages pick what they update.
#[derive(Debug)]
pub struct LmGrads {
    pub base: BaseParams,
    pub lora: Option<LoraAdapters>,
    /// Gradient with respect to the input embedding sequence.
    pub d_input: Mat,
}

impl BaseLm {
    /// Reverse-mode pass. `d_logits` pairs hidden-row indices with dense
    /// dL/dlogits rows for those positions; all other positions carry zero
    /// upstream gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        adapters: Option<&LoraAdapters>,
        d_logits: &[(usize, Vec<f64>)],
    ) -> Result<LmGrads> {
        let d = self.config.d_model;
        let t = cache.t;
        let n_heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut grads = LmGrads {
            base: self.params.zeros_like(),
            lora: adapters.map(|a| a.zeros_like()),
            d_input: Mat::zeros(t, d),
        };

        // Tied head: logits[r] = hidden[r] . embed^T
        let mut d_hidden = Mat::zeros(t, d);
        for (row, dl) in d_logits {
            if *row >= t {
                return Err(Error::Data(format!("gradient row {row} out of range")));
            }
            if dl.len() != self.config.vocab_size {
                return Err(Error::Shape("d_logits row has wrong width".into()));
            }
            let h = cache.hidden.row(*row);
            let dh = d_hidden.row_mut(*row);
            for (tok, &g) in dl.iter().enumerate() {
                if g != 0.0 {
                    axpy(dh, g, self.params.embed.row(tok));
                    axpy(grads.base.embed.row_mut(tok), g, h);
                }
            }
        }

        let mut dx = layer_norm_backward(
            &d_hidden,
            &cache.lnf,
            &self.params.lnf_g,
            &mut grads.base.lnf_g,
            &mut grads.base.lnf_b,
        );

        for bi in (0..self.params.blocks.len()).rev() {
            let block = &self.params.blocks[bi];
            let bc = &cache.blocks[bi];
            let gb = &mut grads.base.blocks[bi];

            // x_out = x_mid + ff(n2)
            let d_ff_out = dx.clone();
            for r in 0..t {
                for c in 0..d {
                    gb.ff_b2.data[c] += d_ff_out.at(r, c);
                }
            }
            gb.ff_w2.add_assign(&bc.ff_act.transpose_matmul(&d_ff_out));
            let mut d_ff_act = d_ff_out.matmul_transpose_b(&block.ff_w2);
            for (da, &pre) in d_ff_act.data.iter_mut().zip(bc.ff_pre.data.iter()) {
                *da *= gelu_deriv(pre);
            }
            let ff_cols = block.ff_b1.cols;
            for r in 0..t {
                for c in 0..ff_cols {
                    gb.ff_b1.data[c] += d_ff_act.at(r, c);
                }
            }
            gb.ff_w1.add_assign(&bc.n2.transpose_matmul(&d_ff_act));
            let d_n2 = d_ff_act.matmul_transpose_b(&block.ff_w1);
            let mut d_x_mid = layer_norm_backward(
                &d_n2,
                &bc.ln2,
                &block.ln2_g,
                &mut gb.ln2_g,
                &mut gb.ln2_b,
            );
            d_x_mid.add_assign(&dx); // residual

            // x_mid = x_in + att_concat . w_o
            let d_att_out = &d_x_mid;
            gb.w_o.add_assign(&bc.att_concat.transpose_matmul(d_att_out));
            let d_concat = d_att_out.matmul_transpose_b(&block.w_o);

            let mut d_q = Mat::zeros(t, d);
            let mut d_k = Mat::zeros(t, d);
            let mut d_v = Mat::zeros(t, d);
            for h in 0..n_heads {
                let off = h * hd;
                let p = &bc.probs[h];
                // att_concat_head = P . V_head
                for i in 0..t {
                    let d_oh = &d_concat.row(i)[off..off + hd];
                    // dV
                    for j in 0..=i {
                        let w = p.at(i, j);
                        if w != 0.0 {
                            let dvj = &mut d_v.row_mut(j)[off..off + hd];
                            for (dv, &g) in dvj.iter_mut().zip(d_oh.iter()) {
                                *dv += w * g;
                            }
                        }
                    }
                    // dP row then dS row
                    let mut dp_row = vec![0.0; i + 1];
                    for (j, dp) in dp_row.iter_mut().enumerate() {
                        let vj = &bc.v.row(j)[off..off + hd];
                        *dp = dot(d_oh, vj);
                    }
                    let p_row = &p.row(i)[..i + 1];
                    let mut ds_row = vec![0.0; i + 1];
                    softmax_backward_row(p_row, &dp_row, &mut ds_row);
                    // S[i,j] = (q_i . k_j) * scale
                    let qi = &bc.q.row(i)[off..off + hd];
                    for (j, &ds) in ds_row.iter().enumerate() {
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &bc.k.row(j)[off..off + hd];
                        let dqi = &mut d_q.row_mut(i)[off..off + hd];
                        for (dq, &kv) in dqi.iter_mut().zip(kj.iter()) {
                            *dq += ds * scale * kv;
                        }
                        let dkj = &mut d_k.row_mut(j)[off..off + hd];
                        for (dk, &qv) in dkj.iter_mut().zip(qi.iter()) {
                            *dk += ds * scale * qv;
                        }
                    }
                }
            }

            // q = n1 . w_q (+ adapter), k = n1 . w_k, v = n1 . w_v (+ adapter)
            gb.w_q.add_assign(&bc.n1.transpose_matmul(&d_q));
            gb.w_k.add_assign(&bc.n1.transpose_matmul(&d_k));
            gb.w_v.add_assign(&bc.n1.transpose_matmul(&d_v));
            let mut d_n1 = d_q.matmul_transpose_b(&block.w_q);
            d_n1.add_assign(&d_k.matmul_transpose_b(&block.w_k));
            d_n1.add_assign(&d_v.matmul_transpose_b(&block.w_v));

            if let (Some(ad), Some(gl)) = (adapters, grads.lora.as_mut()) {
                let s = ad.scaling();
                let ab = &ad.blocks[bi];
                let glb = &mut gl.blocks[bi];
                for (pair, gpair, u, d_out) in [
                    (&ab.q, &mut glb.q, bc.lora_q_u.as_ref().unwrap(), &d_q),
                    (&ab.v, &mut glb.v, bc.lora_v_u.as_ref().unwrap(), &d_v),
                ] {
                    // out += s * (n1 . A^T) . B^T
                    let d_u = d_out.matmul(&pair.b).scaled(s); // T x r
                    gpair.b.add_assign(&d_out.transpose_matmul(u).scaled(s));
                    gpair.a.add_assign(&d_u.transpose_matmul(&bc.n1));
                    d_n1.add_assign(&d_u.matmul(&pair.a));
                }
            }

            let d_x_in_ln = layer_norm_backward(
                &d_n1,
                &bc.ln1,
                &block.ln1_g,
                &mut gb.ln1_g,
                &mut gb.ln1_b,
            );
            dx = d_x_mid;
            dx.add_assign(&d_x_in_ln);
        }

        // x0 = embeddings + pos[0..t]
        for r in 0..t {
            axpy(grads.base.pos.row_mut(r), 1.0, dx.row(r));
        }
        grads.d_input = dx;
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Losses and decoding
// ---------------------------------------------------------------------------

/// Mean negative log-probability of the target tokens. `target_positions`
/// index rows of `logits` (all other positions contribute nothing).
pub fn answer_loss(logits: &Mat, target_ids: &[u32], target_positions: &[usize]) -> Result<f64> {
    if target_ids.len() != target_positions.len() {
        return Err(Error::Data(
            "target_ids and target_positions length mismatch".into(),
        ));
    }
    if target_ids.is_empty() {
        return Err(Error::Data("no target tokens".into()));
    }
    let mut total = 0.0;
    for (&id, &pos) in target_ids.iter().zip(target_positions.iter()) {
        if pos >= logits.rows {
            return Err(Error::Data(format!(
                "target position {pos} out of range for {} logit rows",
                logits.rows
            )));
        }
        if id as usize >= logits.cols {
            return Err(Error::Data(format!("target id {id} out of vocabulary")));
        }
        total += nll_row(logits.row(pos), id as usize);
    }
    Ok(total / target_ids.len() as f64)
}

fn nll_row(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    log_z - logits[target]
}

/// Loss plus dL/dlogits rows for a set of (row, target) pairs, sharing one
/// softmax per row. Gradient rows are scaled for the mean over targets.
pub fn answer_loss_and_grad(
    lm: &BaseLm,
    cache: &ForwardCache,
    targets: &[(usize, u32)],
) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
    if targets.is_empty() {
        return Err(Error::Data("no target tokens".into()));
    }
    let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
    let logits = lm.logits_rows(cache, &rows)?;
    let inv_n = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut grad_rows = Vec::with_capacity(targets.len());
    for (out_row, &(row, id)) in targets.iter().enumerate() {
        let lrow = logits.row(out_row);
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = lrow.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        loss += -(probs[id as usize].max(f64::MIN_POSITIVE)).ln();
        let mut dl = probs;
        dl[id as usize] -= 1.0;
        for g in dl.iter_mut() {
            *g *= inv_n;
        }
        grad_rows.push((row, dl));
    }
    Ok((loss * inv_n, grad_rows))
}

/// Greedy decoding from a prompt embedding sequence. Stops at EOS or after
/// `max_new_tokens`; returns the decoded text of the generated tokens.
pub fn generate_answer(
    lm: &BaseLm,
    vocab: &Vocabulary,
    prompt_embeddings: &Mat,
    adapters: Option<&LoraAdapters>,
    max_new_tokens: usize,
) -> Result<String> {
    let mut emb = prompt_embeddings.clone();
    let mut generated: Vec<u32> = Vec::new();
    for _ in 0..max_new_tokens {
        let cache = lm.forward(&emb, adapters)?;
        let logits = lm.logits_rows(&cache, &[cache.t - 1])?;
        let row = logits.row(0);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS_ID {
            break;
        }
        generated.push(tok);
        let mut next = Mat::zeros(emb.rows + 1, emb.cols);
        next.data[..emb.data.len()].copy_from_slice(&emb.data);
        next.row_mut(emb.rows)
            .copy_from_slice(lm.params.embed.row(tok as usize));
        emb = next;
    }
    Ok(vocab.decode(&generated))
}
