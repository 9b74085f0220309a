//! Next-token pretraining of the base LM on a line corpus, with a held-out
//! perplexity log. The returned model is frozen.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::rng::substream;

use super::model::{answer_loss_and_grad, BaseLm, LmConfig};
use super::vocab::{Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub heldout_frac: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 24,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            heldout_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub heldout_ppl_before: f64,
    pub heldout_ppl_after: f64,
    pub steps: usize,
    pub n_train_lines: usize,
    pub n_heldout_lines: usize,
}

fn encode_line(vocab: &Vocabulary, line: &str, context: usize) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode(line));
    ids.push(EOS_ID);
    ids.truncate(context);
    ids
}

/// Mean next-token NLL over a set of encoded lines.
fn corpus_nll(lm: &BaseLm, lines: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in lines {
        if ids.len() < 2 {
            continue;
        }
        let emb = lm.embed_tokens(ids);
        let cache = lm.forward(&emb, None)?;
        let targets: Vec<(usize, u32)> = (1..ids.len()).map(|t| (t - 1, ids[t])).collect();
        let (loss, _) = answer_loss_and_grad(lm, &cache, &targets)?;
        total += loss * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Data("corpus has no scoreable tokens".into()));
    }
    Ok(total / count as f64)
}

pub fn heldout_perplexity(lm: &BaseLm, vocab: &Vocabulary, lines: &[String]) -> Result<f64> {
    let encoded: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| encode_line(vocab, l, lm.config.context))
        .collect();
    Ok(corpus_nll(lm, &encoded)?.exp())
}

/// Train a fresh base model on the corpus and freeze it.
pub fn pretrain_base(
    corpus: &[String],
    vocab: &Vocabulary,
    lm_config: LmConfig,
    cfg: &PretrainConfig,
) -> Result<(BaseLm, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let mut init_rng = substream(cfg.seed, "init");
    let mut lm = BaseLm::init(lm_config, &mut init_rng)?;

    let mut lines: Vec<Vec<u32>> = corpus
        .iter()
        .map(|l| encode_line(vocab, l, lm_config.context))
        .collect();
    let mut rng = substream(cfg.seed, "pretrain");
    lines.shuffle(&mut rng);
    let n_heldout = ((lines.len() as f64 * cfg.heldout_frac) as usize)
        .min(lines.len().saturating_sub(1))
        .max(1);
    let heldout: Vec<Vec<u32>> = lines[..n_heldout].to_vec();
    let train: Vec<Vec<u32>> = lines[n_heldout..].to_vec();
    if train.is_empty() {
        return Err(Error::Config("corpus too small to split off a held-out set".into()));
    }

    let ppl_before = corpus_nll(&lm, &heldout)?.exp();

    let shapes: Vec<(usize, usize)> = lm
        .params
        .tensors()
        .iter()
        .map(|(_, m)| (m.rows, m.cols))
        .collect();
    let mut adam = Adam::new(AdamConfig::default(), &shapes);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = ((total_steps as f64 * cfg.warmup_frac) as usize).max(1);

    let mut step = 0usize;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc = lm.params.zeros_like();
            let mut batch_loss = 0.0;
            let mut batch_targets = 0usize;
            for &li in chunk {
                let ids = &train[li];
                if ids.len() < 2 {
                    continue;
                }
                let emb = lm.embed_tokens(ids);
                let cache = lm.forward(&emb, None)?;
                let targets: Vec<(usize, u32)> =
                    (1..ids.len()).map(|t| (t - 1, ids[t])).collect();
                let (loss, grad_rows) = answer_loss_and_grad(&lm, &cache, &targets)?;
                let grads = lm.backward(&cache, None, &grad_rows)?;
                batch_loss += loss * targets.len() as f64;
                batch_targets += targets.len();
                // Input embeddings are table rows: scatter their gradient
                // back into the embedding table (position rows accumulate
                // inside backward already).
                let mut acc = grads.base;
                for (t, &id) in ids.iter().enumerate() {
                    crate::linalg::axpy(
                        acc.embed.row_mut(id as usize),
                        1.0,
                        grads.d_input.row(t),
                    );
                }
                // Weight each sequence by its target count so the batch
                // gradient matches the token-mean loss.
                let w = targets.len() as f64;
                for ((_, g), (_, a)) in acc.tensors().iter().zip(grad_acc.tensors_mut()) {
                    for (av, gv) in a.data.iter_mut().zip(g.data.iter()) {
                        *av += gv * w;
                    }
                }
            }
            if batch_targets == 0 {
                continue;
            }
            let scale = 1.0 / batch_targets as f64;
            // Per-sequence grads already carry a 1/len factor from the mean
            // loss; the reweighting above restores token sums.
            for (_, g) in grad_acc.tensors_mut() {
                g.scale(scale);
            }
            let mean_loss = batch_loss * scale;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("pretraining loss became {mean_loss}"),
                });
            }
            let lr = warmup_lr(step, warmup, cfg.peak_lr);
            let grad_mats: Vec<&Mat> = grad_acc.tensors().into_iter().map(|(_, m)| m).collect();
            let mut param_mats: Vec<&mut Mat> = lm
                .params
                .tensors_mut()
                .into_iter()
                .map(|(_, m)| m)
                .collect();
            adam.step(&mut param_mats, &grad_mats, lr);
            loss_sum += mean_loss;
            loss_batches += 1;
            step += 1;
        }
        if loss_batches > 0 {
            epoch_loss.push(loss_sum / loss_batches as f64);
        }
    }

    let ppl_after = corpus_nll(&lm, &heldout)?.exp();
    lm.freeze();
    Ok((
        lm,
        PretrainReport {
            epoch_loss,
            heldout_ppl_before: ppl_before,
            heldout_ppl_after: ppl_after,
            steps: step,
            n_train_lines: train.len(),
            n_heldout_lines: heldout.len(),
        },
    ))
}
