//! Multimodal fusion: three modality features are projected to a shared
//! width, mixed by stacked value-free self-attention layers (no value
//! projection, no residuals, no normalization), mean-pooled, and projected
//! into LM space as a single token.
//!
//! The same trainable MLP projector also maps a single modality feature to
//! one LM-space token for the prompt-style tokenization path.

use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::linalg::{axpy, dot, softmax_backward_row, softmax_inplace, Mat};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Media feature dimension.
    pub d_media: usize,
    /// Relational feature dimension (user-level and bundle-level).
    pub d_relational: usize,
    /// Shared fusion width.
    pub d: usize,
    /// Projector hidden width.
    pub d_hidden: usize,
    /// LM embedding width.
    pub d_lm: usize,
    /// Number of attention layers.
    pub k_layers: usize,
}

impl FusionConfig {
    pub fn desk_scale(d_media: usize, d_relational: usize, d_lm: usize) -> Self {
        FusionConfig {
            d_media,
            d_relational,
            d: 64,
            d_hidden: 64,
            d_lm,
            k_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub w_q: Mat,
    pub w_k: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub w_media: Mat,
    pub w_user: Mat,
    pub w_bundle: Mat,
    pub attention: Vec<AttentionLayer>,
    pub proj_w1: Mat,
    pub proj_b1: Mat,
    pub proj_w2: Mat,
    pub proj_b2: Mat,
    pub missing_media: Mat,
    pub missing_user: Mat,
    pub missing_bundle: Mat,
}

impl FusionParams {
    pub fn init(config: FusionConfig, rng: &mut Rng) -> Self {
        let sigma = 0.02;
        FusionParams {
            config,
            w_media: Mat::randn(config.d_media, config.d, sigma, rng),
            w_user: Mat::randn(config.d_relational, config.d, sigma, rng),
            w_bundle: Mat::randn(config.d_relational, config.d, sigma, rng),
            attention: (0..config.k_layers)
                .map(|_| AttentionLayer {
                    w_q: Mat::randn(config.d, config.d, sigma, rng),
                    w_k: Mat::randn(config.d, config.d, sigma, rng),
                })
                .collect(),
            proj_w1: Mat::randn(config.d, config.d_hidden, sigma, rng),
            proj_b1: Mat::zeros(1, config.d_hidden),
            proj_w2: Mat::randn(config.d_hidden, config.d_lm, sigma, rng),
            proj_b2: Mat::zeros(1, config.d_lm),
            missing_media: Mat::randn(1, config.d_media, sigma, rng),
            missing_user: Mat::randn(1, config.d_relational, sigma, rng),
            missing_bundle: Mat::randn(1, config.d_relational, sigma, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FusionParams {
            config: self.config,
            w_media: self.w_media.zeros_like(),
            w_user: self.w_user.zeros_like(),
            w_bundle: self.w_bundle.zeros_like(),
            attention: self
                .attention
                .iter()
                .map(|l| AttentionLayer {
                    w_q: l.w_q.zeros_like(),
                    w_k: l.w_k.zeros_like(),
                })
                .collect(),
            proj_w1: self.proj_w1.zeros_like(),
            proj_b1: self.proj_b1.zeros_like(),
            proj_w2: self.proj_w2.zeros_like(),
            proj_b2: self.proj_b2.zeros_like(),
            missing_media: self.missing_media.zeros_like(),
            missing_user: self.missing_user.zeros_like(),
            missing_bundle: self.missing_bundle.zeros_like(),
        }
    }

    fn projection(&self, modality: Modality) -> &Mat {
        match modality {
            Modality::Media => &self.w_media,
            Modality::UserLevel => &self.w_user,
            Modality::BundleLevel => &self.w_bundle,
        }
    }

    fn missing(&self, modality: Modality) -> &Mat {
        match modality {
            Modality::Media => &self.missing_media,
            Modality::UserLevel => &self.missing_user,
            Modality::BundleLevel => &self.missing_bundle,
        }
    }
}

impl NamedTensors for FusionParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("w_media".into(), &self.w_media),
            ("w_user".into(), &self.w_user),
            ("w_bundle".into(), &self.w_bundle),
        ];
        for (k, layer) in self.attention.iter().enumerate() {
            out.push((format!("attn{k}.w_q"), &layer.w_q));
            out.push((format!("attn{k}.w_k"), &layer.w_k));
        }
        out.push(("proj.w1".into(), &self.proj_w1));
        out.push(("proj.b1".into(), &self.proj_b1));
        out.push(("proj.w2".into(), &self.proj_w2));
        out.push(("proj.b2".into(), &self.proj_b2));
        out.push(("missing.media".into(), &self.missing_media));
        out.push(("missing.user".into(), &self.missing_user));
        out.push(("missing.bundle".into(), &self.missing_bundle));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("w_media".into(), &mut self.w_media),
            ("w_user".into(), &mut self.w_user),
            ("w_bundle".into(), &mut self.w_bundle),
        ];
        for (k, layer) in self.attention.iter_mut().enumerate() {
            out.push((format!("attn{k}.w_q"), &mut layer.w_q));
            out.push((format!("attn{k}.w_k"), &mut layer.w_k));
        }
        out.push(("proj.w1".into(), &mut self.proj_w1));
        out.push(("proj.b1".into(), &mut self.proj_b1));
        out.push(("proj.w2".into(), &mut self.proj_w2));
        out.push(("proj.b2".into(), &mut self.proj_b2));
        out.push(("missing.media".into(), &mut self.missing_media));
        out.push(("missing.user".into(), &mut self.missing_user));
        out.push(("missing.bundle".into(), &mut self.missing_bundle));
        out
    }
}

/// Raw modality features for one item, in fixed (media, user, bundle) order.
/// An exact-zero vector marks the modality as absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub media: Vec<f64>,
    pub user: Vec<f64>,
    pub bundle: Vec<f64>,
}

impl FusionInputs {
    fn by_modality(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Media => &self.media,
            Modality::UserLevel => &self.user,
            Modality::BundleLevel => &self.bundle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedToken {
    pub vec: Vec<f64>,
    pub item_id: u32,
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    used_missing: [bool; 3],
    /// Inputs after missing-modality substitution.
    effective: [Vec<f64>; 3],
    /// r[0] is the projected 3xd input; r[k] the output of layer k.
    r: Vec<Mat>,
    /// Row-softmaxed attention per layer (3x3).
    probs: Vec<Mat>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

fn check_input(inputs: &FusionInputs, cfg: &FusionConfig) -> Result<()> {
    if inputs.media.len() != cfg.d_media {
        return Err(Error::Shape(format!(
            "media input has {} entries, expected {}",
            inputs.media.len(),
            cfg.d_media
        )));
    }
    for (name, v) in [("user", &inputs.user), ("bundle", &inputs.bundle)] {
        if v.len() != cfg.d_relational {
            return Err(Error::Shape(format!(
                "{name} input has {} entries, expected {}",
                v.len(),
                cfg.d_relational
            )));
        }
    }
    Ok(())
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

fn project_row(input: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            axpy(&mut out, x, w.row(i));
        }
    }
    out
}

/// The projected 3xd input matrix, with missing-modality substitution.
pub fn project_inputs(inputs: &FusionInputs, params: &FusionParams) -> Result<Mat> {
    let (r0, _, _) = project_inputs_cached(inputs, params)?;
    Ok(r0)
}

fn project_inputs_cached(
    inputs: &FusionInputs,
    params: &FusionParams,
) -> Result<(Mat, [bool; 3], [Vec<f64>; 3])> {
    check_input(inputs, &params.config)?;
    let mut r0 = Mat::zeros(3, params.config.d);
    let mut used_missing = [false; 3];
    let mut effective: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (row, modality) in Modality::ALL.iter().enumerate() {
        let raw = inputs.by_modality(*modality);
        let eff = if is_zero(raw) {
            used_missing[row] = true;
            params.missing(*modality).row(0).to_vec()
        } else {
            raw.to_vec()
        };
        let projected = project_row(&eff, params.projection(*modality));
        r0.row_mut(row).copy_from_slice(&projected);
        effective[row] = eff;
    }
    Ok((r0, used_missing, effective))
}

/// One value-free attention layer: softmax((R Wq)(R Wk)^T / sqrt(d)) R.
/// Returns the mixed rows and the attention probabilities.
pub fn attention_layer(r: &Mat, layer: &AttentionLayer) -> Result<(Mat, Mat)> {
    let d = layer.w_q.rows;
    r.check_shape(3, d, "attention input")?;
    let q = r.matmul(&layer.w_q);
    let k = r.matmul(&layer.w_k);
    let mut logits = q.matmul_transpose_b(&k);
    logits.scale(1.0 / (d as f64).sqrt());
    for row in 0..3 {
        softmax_inplace(logits.row_mut(row))?;
    }
    let mixed = logits.matmul(r);
    Ok((mixed, logits))
}

fn mlp_forward(params: &FusionParams, input: &[f64]) -> MlpCache {
    let mut hidden = params.proj_b1.row(0).to_vec();
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            axpy(&mut hidden, x, params.proj_w1.row(i));
        }
    }
    for h in hidden.iter_mut() {
        *h = h.tanh();
    }
    let mut output = params.proj_b2.row(0).to_vec();
    for (i, &h) in hidden.iter().enumerate() {
        if h != 0.0 {
            axpy(&mut output, h, params.proj_w2.row(i));
        }
    }
    MlpCache {
        input: input.to_vec(),
        hidden,
        output,
    }
}

/// dL/d(mlp input), accumulating parameter gradients.
fn mlp_backward(
    params: &FusionParams,
    cache: &MlpCache,
    upstream: &[f64],
    grads: &mut FusionParams,
) -> Vec<f64> {
    for (g, &u) in grads.proj_b2.row_mut(0).iter_mut().zip(upstream) {
        *g += u;
    }
    let mut d_hidden = vec![0.0; cache.hidden.len()];
    for (i, &h) in cache.hidden.iter().enumerate() {
        axpy(grads.proj_w2.row_mut(i), h, upstream);
        d_hidden[i] = dot(params.proj_w2.row(i), upstream);
    }
    for (dh, &h) in d_hidden.iter_mut().zip(cache.hidden.iter()) {
        *dh *= 1.0 - h * h;
    }
    for (g, &dh) in grads.proj_b1.row_mut(0).iter_mut().zip(d_hidden.iter()) {
        *g += dh;
    }
    let mut d_input = vec![0.0; cache.input.len()];
    for (i, &x) in cache.input.iter().enumerate() {
        axpy(grads.proj_w1.row_mut(i), x, &d_hidden);
        d_input[i] = dot(params.proj_w1.row(i), &d_hidden);
    }
    d_input
}

/// Full fusion forward. The cache feeds `fuse_backward`.
pub fn fuse_forward(inputs: &FusionInputs, params: &FusionParams) -> Result<(Vec<f64>, FuseCache)> {
    let (r0, used_missing, effective) = project_inputs_cached(inputs, params)?;
    let mut r = vec![r0];
    let mut probs = Vec::with_capacity(params.config.k_layers);
    for layer in &params.attention {
        let (mixed, p) = attention_layer(r.last().unwrap(), layer)?;
        probs.push(p);
        r.push(mixed);
    }
    let last = r.last().unwrap();
    let mut pooled = vec![0.0; params.config.d];
    for row in 0..3 {
        axpy(&mut pooled, 1.0 / 3.0, last.row(row));
    }
    let mlp = mlp_forward(params, &pooled);
    let out = mlp.output.clone();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("fused token has non-finite entries".into()));
    }
    Ok((
        out,
        FuseCache {
            used_missing,
            effective,
            r,
            probs,
            mlp,
        },
    ))
}

/// Convenience wrapper producing a provenance-tagged token.
pub fn fuse(inputs: &FusionInputs, params: &FusionParams, item_id: u32) -> Result<FusedToken> {
    let (vec, _) = fuse_forward(inputs, params)?;
    Ok(FusedToken { vec, item_id })
}

/// Exact reverse-mode gradients of `fuse_forward`. Parameter gradients are
/// accumulated into `grads`; the return value is the gradient with respect
/// to the three raw inputs (zero rows where the missing-modality vector was
/// substituted).
pub fn fuse_backward(
    params: &FusionParams,
    cache: &FuseCache,
    upstream: &[f64],
    grads: &mut FusionParams,
) -> Result<FusionInputs> {
    if upstream.len() != params.config.d_lm {
        return Err(Error::Shape(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            params.config.d_lm
        )));
    }
    let d = params.config.d;
    let d_pooled = mlp_backward(params, &cache.mlp, upstream, grads);

    // Mean pooling spreads the gradient evenly over the three rows.
    let mut d_r = Mat::zeros(3, d);
    for row in 0..3 {
        for c in 0..d {
            d_r.data[row * d + c] = d_pooled[c] / 3.0;
        }
    }

    for k in (0..params.attention.len()).rev() {
        let layer = &params.attention[k];
        let r_prev = &cache.r[k];
        let p = &cache.probs[k];
        // mixed = P . R_prev
        let d_p = d_r.matmul_transpose_b(r_prev);
        let mut d_r_prev = p.transpose_matmul(&d_r);
        // P = softmax(A) rows; A = (R Wq)(R Wk)^T / sqrt(d)
        let mut d_a = Mat::zeros(3, 3);
        for row in 0..3 {
            softmax_backward_row(p.row(row), d_p.row(row), d_a.row_mut(row));
        }
        d_a.scale(1.0 / (d as f64).sqrt());
        let q = r_prev.matmul(&layer.w_q);
        let key = r_prev.matmul(&layer.w_k);
        let d_q = d_a.matmul(&key);
        let d_key = d_a.transpose_matmul(&q);
        grads.attention[k].w_q.add_assign(&r_prev.transpose_matmul(&d_q));
        grads.attention[k].w_k.add_assign(&r_prev.transpose_matmul(&d_key));
        d_r_prev.add_assign(&d_q.matmul_transpose_b(&layer.w_q));
        d_r_prev.add_assign(&d_key.matmul_transpose_b(&layer.w_k));
        d_r = d_r_prev;
    }

    // R^0 rows: row = effective_input . W_modality
    let mut input_grads = FusionInputs {
        media: vec![0.0; params.config.d_media],
        user: vec![0.0; params.config.d_relational],
        bundle: vec![0.0; params.config.d_relational],
    };
    for (row, modality) in Modality::ALL.iter().enumerate() {
        let effective = &cache.effective[row];
        let d_row = d_r.row(row);
        let w = params.projection(*modality);
        let gw = match modality {
            Modality::Media => &mut grads.w_media,
            Modality::UserLevel => &mut grads.w_user,
            Modality::BundleLevel => &mut grads.w_bundle,
        };
        for (i, &x) in effective.iter().enumerate() {
            axpy(gw.row_mut(i), x, d_row);
        }
        let mut d_eff = vec![0.0; effective.len()];
        for (i, de) in d_eff.iter_mut().enumerate() {
            *de = dot(w.row(i), d_row);
        }
        if cache.used_missing[row] {
            let gm = match modality {
                Modality::Media => &mut grads.missing_media,
                Modality::UserLevel => &mut grads.missing_user,
                Modality::BundleLevel => &mut grads.missing_bundle,
            };
            for (g, de) in gm.row_mut(0).iter_mut().zip(d_eff.iter()) {
                *g += de;
            }
        } else {
            match modality {
                Modality::Media => input_grads.media = d_eff,
                Modality::UserLevel => input_grads.user = d_eff,
                Modality::BundleLevel => input_grads.bundle = d_eff,
            }
        }
    }
    Ok(input_grads)
}

/// Prompt-style path: one modality feature through its input projection and
/// the shared MLP projector, yielding a single LM-space token.
#[derive(Debug, Clone)]
pub struct SingleCache {
    modality: Modality,
    used_missing: bool,
    effective: Vec<f64>,
    projected: Vec<f64>,
    mlp: MlpCache,
}

pub fn project_single_forward(
    modality: Modality,
    raw: &[f64],
    params: &FusionParams,
) -> Result<(Vec<f64>, SingleCache)> {
    let expected = match modality {
        Modality::Media => params.config.d_media,
        _ => params.config.d_relational,
    };
    if raw.len() != expected {
        return Err(Error::Shape(format!(
            "{} input has {} entries, expected {expected}",
            modality.short_name(),
            raw.len()
        )));
    }
    let (used_missing, effective) = if is_zero(raw) {
        (true, params.missing(modality).row(0).to_vec())
    } else {
        (false, raw.to_vec())
    };
    let projected = project_row(&effective, params.projection(modality));
    let mlp = mlp_forward(params, &projected);
    let out = mlp.output.clone();
    Ok((
        out,
        SingleCache {
            modality,
            used_missing,
            effective,
            projected,
            mlp,
        },
    ))
}

pub fn project_single_backward(
    params: &FusionParams,
    cache: &SingleCache,
    upstream: &[f64],
    grads: &mut FusionParams,
) -> Result<Vec<f64>> {
    if upstream.len() != params.config.d_lm {
        return Err(Error::Shape("upstream width mismatch".into()));
    }
    let d_projected = mlp_backward(params, &cache.mlp, upstream, grads);
    debug_assert_eq!(d_projected.len(), cache.projected.len());
    let w = params.projection(cache.modality);
    let gw = match cache.modality {
        Modality::Media => &mut grads.w_media,
        Modality::UserLevel => &mut grads.w_user,
        Modality::BundleLevel => &mut grads.w_bundle,
    };
    for (i, &x) in cache.effective.iter().enumerate() {
        axpy(gw.row_mut(i), x, &d_projected);
    }
    let mut d_eff = vec![0.0; cache.effective.len()];
    for (i, de) in d_eff.iter_mut().enumerate() {
        *de = dot(w.row(i), &d_projected);
    }
    if cache.used_missing {
        let gm = match cache.modality {
            Modality::Media => &mut grads.missing_media,
            Modality::UserLevel => &mut grads.missing_user,
            Modality::BundleLevel => &mut grads.missing_bundle,
        };
        for (g, de) in gm.row_mut(0).iter_mut().zip(d_eff.iter()) {
            *g += de;
        }
        Ok(vec![0.0; d_eff.len()])
    } else {
        Ok(d_eff)
    }
}
