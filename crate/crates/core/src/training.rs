//! Progressive optimization over the three parameter groups.
//!
//! Stage 1 updates the low-rank adapters on text-only prompts with the
//! backbone frozen. Stage 2 freezes the adapters too and trains only the
//! fusion/projector/separator group on hybrid prompts. The joint variant
//! updates adapters and fusion together. Group isolation is enforced with
//! checksums and treated as a hard failure.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checksum, NamedTensors};
use crate::dataset::{
    generate_world, sample_instances, GenConfig, LearnabilityMode, PromptInstance, Splits, World,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ModelPredictor};
use crate::features::ModalityTables;
use crate::fusion::{fuse_backward, project_single_backward, FusionParams};
use crate::linalg::Mat;
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::prompting::{
    build_plan, materialize_with_caches, render_text_prompt, InjectionCache, MaterializeCtx,
    Position, PromptMode, PromptPlan, Tokenization,
};
use crate::rng::{derive_seed, substream};
use crate::tinylm::{BaseLm, LoraAdapters, SoftSeparator, Vocabulary, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S2,
    Joint,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::S1 => "S1",
            Stage::S2 => "S2",
            Stage::Joint => "JOINT",
        }
    }
}

/// The fusion-side trainable group: input projections, attention weights,
/// the MLP projector, missing-modality vectors, and the soft separator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaF {
    pub fusion: FusionParams,
    pub separator: SoftSeparator,
}

impl ThetaF {
    pub fn zeros_like(&self) -> Self {
        ThetaF {
            fusion: self.fusion.zeros_like(),
            separator: self.separator.zeros_like(),
        }
    }
}

impl NamedTensors for ThetaF {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = self
            .fusion
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("fusion.{n}"), m))
            .collect();
        out.push(("separator".into(), &self.separator.vec));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = self
            .fusion
            .tensors_mut()
            .into_iter()
            .map(|(n, m)| (format!("fusion.{n}"), m))
            .collect();
        out.push(("separator".into(), &mut self.separator.vec));
        out
    }
}

/// The three independently checksummable parameter groups.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub base: BaseLm,
    pub adapters: LoraAdapters,
    pub theta_f: ThetaF,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupChecksums {
    pub base: String,
    pub lora: String,
    pub theta_f: String,
}

impl ModelState {
    pub fn checksums(&self) -> GroupChecksums {
        GroupChecksums {
            base: checksum(&self.base.params),
            lora: checksum(&self.adapters),
            theta_f: checksum(&self.theta_f),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mode: PromptMode,
    pub sample_count: usize,
    pub valid_count: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub n_candidates: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn stage_defaults(stage: Stage, mode: PromptMode, seed: u64) -> Self {
        TrainConfig {
            stage,
            mode,
            sample_count: 1024,
            valid_count: 128,
            batch_size: 16,
            max_epochs: 10,
            peak_lr: 3e-4,
            warmup_frac: 0.1,
            n_candidates: 10,
            patience: 3,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 || self.batch_size == 0 {
            return Err(Error::Config("sample_count and batch_size must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.n_candidates < 2 || self.n_candidates > 26 {
            return Err(Error::Config("n_candidates must be in 2..=26".into()));
        }
        match self.stage {
            Stage::S1 => {
                if self.mode.tokenization != Tokenization::TextOnly {
                    return Err(Error::Config(
                        "stage S1 requires text-only prompts".into(),
                    ));
                }
            }
            Stage::S2 | Stage::Joint => {
                if self.mode.tokenization == Tokenization::TextOnly {
                    return Err(Error::Config(format!(
                        "stage {} needs a hybrid prompt mode",
                        self.stage.label()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub mode: String,
    pub loss_trace: Vec<LossPoint>,
    pub checksums_before: GroupChecksums,
    pub checksums_after: GroupChecksums,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub best_valid_hit_rate: Option<f64>,
    /// Wall-clock is reported separately from the deterministic artifacts.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Instances shared by the stages of one run.
#[derive(Debug, Clone)]
pub struct StageData {
    pub train: Vec<PromptInstance>,
    pub valid: Vec<PromptInstance>,
}

impl StageData {
    /// Training instances come from the train split, validation instances
    /// from the validation split; both derive from the run seed.
    pub fn sample(world: &World, splits: &Splits, cfg: &TrainConfig) -> Result<StageData> {
        let train = sample_instances(
            world,
            &splits.train,
            cfg.n_candidates,
            cfg.sample_count,
            derive_seed(cfg.seed, "train_instances"),
        )?;
        let valid = if cfg.valid_count > 0 && !splits.valid.is_empty() {
            sample_instances(
                world,
                &splits.valid,
                cfg.n_candidates,
                cfg.valid_count,
                derive_seed(cfg.seed, "valid_instances"),
            )?
        } else {
            Vec::new()
        };
        Ok(StageData { train, valid })
    }
}

struct UpdateMask {
    lora: bool,
    theta_f: bool,
}

/// Everything a stage needs besides the evolving parameters.
pub struct TrainEnv<'a> {
    pub world: &'a World,
    pub vocab: &'a Vocabulary,
    pub tables: &'a ModalityTables,
}

fn run_stage_inner(
    state: &ModelState,
    env: &TrainEnv,
    data: &StageData,
    cfg: &TrainConfig,
    mask: UpdateMask,
) -> Result<(LoraAdapters, ThetaF, StageReport)> {
    cfg.validate()?;
    if !state.base.frozen {
        return Err(Error::Config("the backbone must be frozen before staged training".into()));
    }
    let start = Instant::now();
    let checksums_before = state.checksums();

    let plans: Vec<PromptPlan> = data
        .train
        .iter()
        .map(|inst| build_plan(inst, env.world, env.vocab, &cfg.mode, state.base.config.context))
        .collect::<Result<_>>()?;
    if cfg.stage == Stage::S1 {
        // Stage-1 purity: multimodal and separator positions are banned.
        for (plan, inst) in plans.iter().zip(&data.train) {
            if !plan.is_pure_text() {
                return Err(Error::InvariantViolation(format!(
                    "stage S1 batch contains non-vocabulary positions (bundle {})",
                    inst.bundle_id
                )));
            }
        }
    }

    let mut adapters = state.adapters.clone();
    let mut theta = state.theta_f.clone();
    let train_separator = mask.theta_f && cfg.mode.separator == crate::prompting::Separator::Soft;

    let mut adam_lora = mask.lora.then(|| {
        let mats: Vec<&Mat> = adapters.tensors().into_iter().map(|(_, m)| m).collect();
        Adam::for_mats(cfg.adam, &mats)
    });
    let mut adam_theta = mask.theta_f.then(|| {
        let mut mats: Vec<&Mat> = theta.fusion.tensors().into_iter().map(|(_, m)| m).collect();
        if train_separator {
            mats.push(&theta.separator.vec);
        }
        Adam::for_mats(cfg.adam, &mats)
    });

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let warmup = ((total_steps as f64 * cfg.warmup_frac) as usize).max(1);

    let mut rng = substream(cfg.seed, "training");
    let mut trace = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut best: Option<(f64, LoraAdapters, ThetaF)> = None;
    let mut epochs_since_best = 0usize;

    let mut order: Vec<usize> = (0..plans.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut lora_grads = adapters.zeros_like();
            let mut theta_grads = theta.zeros_like();
            let mut batch_loss = 0.0;
            for &pi in chunk {
                let plan = &plans[pi];
                let ctx = MaterializeCtx {
                    lm: &state.base,
                    fusion: &theta.fusion,
                    separator: &theta.separator,
                    tables: env.tables,
                    mask: cfg.mode.modalities,
                };
                let (seq, caches) = materialize_with_caches(plan, &ctx)?;
                let prompt_len = seq.embeddings.rows;
                // Full sequence: prompt, answer letter, then EOS target.
                let letter = plan.target_ids[0];
                debug_assert_eq!(plan.target_ids[1], EOS_ID);
                let mut full = Mat::zeros(prompt_len + 1, seq.embeddings.cols);
                full.data[..seq.embeddings.data.len()].copy_from_slice(&seq.embeddings.data);
                full.row_mut(prompt_len)
                    .copy_from_slice(state.base.params.embed.row(letter as usize));
                let cache = state.base.forward(&full, Some(&adapters))?;
                let targets = [(prompt_len - 1, letter), (prompt_len, EOS_ID)];
                let (loss, grad_rows) =
                    crate::tinylm::answer_loss_and_grad(&state.base, &cache, &targets)?;
                let grads = state.base.backward(&cache, Some(&adapters), &grad_rows)?;
                batch_loss += loss;

                if mask.lora {
                    let gl = grads.lora.as_ref().expect("adapters were supplied");
                    for ((_, acc), (_, g)) in
                        lora_grads.tensors_mut().into_iter().zip(gl.tensors())
                    {
                        acc.add_assign(g);
                    }
                }
                if mask.theta_f {
                    for (t, cache_slot) in caches.iter().enumerate() {
                        match (&plan.positions[t], cache_slot) {
                            (Position::Sep, None) => {
                                crate::linalg::axpy(
                                    theta_grads.separator.vec.row_mut(0),
                                    1.0,
                                    grads.d_input.row(t),
                                );
                            }
                            (_, Some(InjectionCache::Fused(fc))) => {
                                fuse_backward(
                                    &theta.fusion,
                                    fc,
                                    grads.d_input.row(t),
                                    &mut theta_grads.fusion,
                                )?;
                            }
                            (_, Some(InjectionCache::Feature(sc))) => {
                                project_single_backward(
                                    &theta.fusion,
                                    sc,
                                    grads.d_input.row(t),
                                    &mut theta_grads.fusion,
                                )?;
                            }
                            _ => {}
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mean_loss = batch_loss * inv;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("stage {} loss became {mean_loss}", cfg.stage.label()),
                });
            }
            let lr = warmup_lr(step, warmup, cfg.peak_lr);
            if let Some(adam) = adam_lora.as_mut() {
                let mut grads_scaled = lora_grads;
                for (_, g) in grads_scaled.tensors_mut() {
                    g.scale(inv);
                }
                let gmats: Vec<&Mat> = grads_scaled.tensors().into_iter().map(|(_, m)| m).collect();
                let mut pmats: Vec<&mut Mat> =
                    adapters.tensors_mut().into_iter().map(|(_, m)| m).collect();
                adam.step(&mut pmats, &gmats, lr);
            }
            if let Some(adam) = adam_theta.as_mut() {
                let mut grads_scaled = theta_grads;
                for (_, g) in grads_scaled.tensors_mut() {
                    g.scale(inv);
                }
                let mut gmats: Vec<&Mat> = grads_scaled
                    .fusion
                    .tensors()
                    .into_iter()
                    .map(|(_, m)| m)
                    .collect();
                if train_separator {
                    gmats.push(&grads_scaled.separator.vec);
                }
                let mut pmats: Vec<&mut Mat> =
                    theta.fusion.tensors_mut().into_iter().map(|(_, m)| m).collect();
                if train_separator {
                    pmats.push(&mut theta.separator.vec);
                }
                adam.step(&mut pmats, &gmats, lr);
            }
            trace.push(LossPoint {
                step,
                epoch,
                loss: mean_loss,
                lr,
            });
            step += 1;
        }
        epochs_run += 1;

        if !data.valid.is_empty() {
            let hit = validation_hit_rate(state, &adapters, &theta, env, cfg, &data.valid)?;
            let improved = best.as_ref().map_or(true, |(b, _, _)| hit > *b);
            if improved {
                best = Some((hit, adapters.clone(), theta.clone()));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    let best_valid_hit_rate = best.as_ref().map(|(h, _, _)| *h);
    if let Some((_, a, t)) = best {
        adapters = a;
        theta = t;
    }

    let result_state = ModelState {
        base: state.base.clone(),
        adapters,
        theta_f: theta,
    };
    let checksums_after = result_state.checksums();
    enforce_frozen(cfg.stage, &checksums_before, &checksums_after)?;

    let report = StageReport {
        stage: cfg.stage.label().into(),
        mode: cfg.mode.label(),
        loss_trace: trace,
        checksums_before,
        checksums_after,
        epochs_run,
        steps_run: step,
        best_valid_hit_rate,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((result_state.adapters, result_state.theta_f, report))
}

fn enforce_frozen(
    stage: Stage,
    before: &GroupChecksums,
    after: &GroupChecksums,
) -> Result<()> {
    if before.base != after.base {
        return Err(Error::InvariantViolation(format!(
            "stage {} modified the frozen backbone",
            stage.label()
        )));
    }
    match stage {
        Stage::S1 => {
            if before.theta_f != after.theta_f {
                return Err(Error::InvariantViolation(
                    "stage S1 modified the fusion group".into(),
                ));
            }
        }
        Stage::S2 => {
            if before.lora != after.lora {
                return Err(Error::InvariantViolation(
                    "stage S2 modified the adapters".into(),
                ));
            }
        }
        Stage::Joint => {}
    }
    Ok(())
}

fn validation_hit_rate(
    state: &ModelState,
    adapters: &LoraAdapters,
    theta: &ThetaF,
    env: &TrainEnv,
    cfg: &TrainConfig,
    valid: &[PromptInstance],
) -> Result<f64> {
    let predictor = ModelPredictor {
        world: env.world,
        vocab: env.vocab,
        lm: &state.base,
        adapters: Some(adapters),
        fusion: &theta.fusion,
        separator: &theta.separator,
        tables: env.tables,
        mode: cfg.mode,
        max_new_tokens: 4,
    };
    Ok(evaluate(&predictor, valid)?.hit_rate_at_1)
}

/// Stage 1: adapter-only training on text-only prompts.
pub fn run_stage1(
    state: &ModelState,
    env: &TrainEnv,
    data: &StageData,
    cfg: &TrainConfig,
) -> Result<(LoraAdapters, StageReport)> {
    if cfg.stage != Stage::S1 {
        return Err(Error::Config("run_stage1 requires stage S1".into()));
    }
    let (adapters, _, report) = run_stage_inner(
        state,
        env,
        data,
        cfg,
        UpdateMask {
            lora: true,
            theta_f: false,
        },
    )?;
    Ok((adapters, report))
}

/// Stage 2: fusion-group training on hybrid prompts with adapters frozen.
pub fn run_stage2(
    state: &ModelState,
    env: &TrainEnv,
    data: &StageData,
    cfg: &TrainConfig,
) -> Result<(ThetaF, StageReport)> {
    if cfg.stage != Stage::S2 {
        return Err(Error::Config("run_stage2 requires stage S2".into()));
    }
    let (_, theta, report) = run_stage_inner(
        state,
        env,
        data,
        cfg,
        UpdateMask {
            lora: false,
            theta_f: true,
        },
    )?;
    Ok((theta, report))
}

/// Both groups at once on hybrid prompts; the backbone stays frozen.
pub fn run_joint(
    state: &ModelState,
    env: &TrainEnv,
    data: &StageData,
    cfg: &TrainConfig,
) -> Result<(LoraAdapters, ThetaF, StageReport)> {
    if cfg.stage != Stage::Joint {
        return Err(Error::Config("run_joint requires stage JOINT".into()));
    }
    run_stage_inner(
        state,
        env,
        data,
        cfg,
        UpdateMask {
            lora: true,
            theta_f: true,
        },
    )
}

// ---------------------------------------------------------------------------
// Pretraining corpus
// ---------------------------------------------------------------------------

/// Compact matching drill: the seed/candidate/answer skeleton without the
/// instruction sentence. Answer-dense lines like these are what teach the
/// backbone content-based matching; full-length renders alone bury the
/// answer token under template prediction.
fn render_drill(inst: &PromptInstance, world: &World) -> String {
    let mut out = String::from("seed items :");
    for (k, &id) in inst.seed_items.iter().enumerate() {
        out.push_str(&format!(" {} . {}", k + 1, world.item(id).text));
    }
    out.push_str(" candidate items :");
    for (j, &id) in inst.candidates.iter().enumerate() {
        out.push_str(&format!(
            " {} . {}",
            (b'A' + j as u8) as char,
            world.item(id).text
        ));
    }
    out.push_str(&format!(
        " answer : {}",
        (b'A' + inst.positive_index as u8) as char
    ));
    out
}

fn push_drills(
    corpus: &mut Vec<String>,
    world: &World,
    bundles: &[u32],
    n_drills: usize,
    seed: u64,
    tag: &str,
) -> Result<()> {
    let drill_counts = [2usize, 3, 4, 5];
    let per = n_drills / drill_counts.len();
    let extra = n_drills % drill_counts.len();
    for (k, &c) in drill_counts.iter().enumerate() {
        let take = per + usize::from(k < extra);
        if take == 0 {
            continue;
        }
        let instances = sample_instances(
            world,
            bundles,
            c,
            take,
            derive_seed(seed, &format!("{tag}_c{c}")),
        )?;
        for inst in &instances {
            corpus.push(render_drill(inst, world));
        }
    }
    Ok(())
}

/// Item description lines, compact matching drills, and fully rendered
/// multiple-choice examples (with answers). Full renders give the backbone
/// the exact prompt layout; drills concentrate gradient on the answer so
/// the content-matching circuit forms (it appears as a phase transition
/// well after the template is memorized); candidate counts vary so nothing
/// anchors on one prompt length. A quarter of the drills come from an
/// auxiliary text-sufficient world built from the same word pools, so the
/// backbone learns matching even when the target world withholds the
/// signal from its item text.
pub fn build_pretrain_corpus(
    world: &World,
    train_bundles: &[u32],
    n_task_examples: usize,
    candidate_counts: &[usize],
    seed: u64,
) -> Result<Vec<String>> {
    let mut corpus: Vec<String> = world.items.iter().map(|it| format!("{} .", it.text)).collect();
    if n_task_examples > 0 {
        if candidate_counts.is_empty() {
            return Err(Error::Config("candidate_counts must be non-empty".into()));
        }
        let n_full = n_task_examples / 4;
        let n_world_drills = n_task_examples / 2;
        let n_aux_drills = n_task_examples - n_full - n_world_drills;

        let per = n_full / candidate_counts.len();
        let extra = n_full % candidate_counts.len();
        for (k, &c) in candidate_counts.iter().enumerate() {
            let take = per + usize::from(k < extra);
            if take == 0 {
                continue;
            }
            let instances = sample_instances(
                world,
                train_bundles,
                c,
                take,
                derive_seed(seed, &format!("pretrain_instances_c{c}")),
            )?;
            for inst in &instances {
                let letter = (b'A' + inst.positive_index as u8) as char;
                corpus.push(format!("{} {letter}", render_text_prompt(inst, world)));
            }
        }
        push_drills(
            &mut corpus,
            world,
            train_bundles,
            n_world_drills,
            seed,
            "pretrain_drills",
        )?;

        if n_aux_drills > 0 {
            let aux_config = GenConfig {
                learnability_mode: LearnabilityMode::TextSufficient,
                ..world.gen_config.clone()
            };
            let aux_world = generate_world(&aux_config, derive_seed(seed, "aux_world"))?;
            let aux_bundles: Vec<u32> = (0..aux_world.bundles.len() as u32).collect();
            for item in &aux_world.items {
                corpus.push(format!("{} .", item.text));
            }
            push_drills(
                &mut corpus,
                &aux_world,
                &aux_bundles,
                n_aux_drills,
                seed,
                "pretrain_aux_drills",
            )?;
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{run_ablation_matrix, AblationAxes, StagePlan};
    use crate::dataset::{generate_world, split_bundles, GenConfig, SplitMode};
    use crate::features::{media_table, FeatureTable, ModalityTables};
    use crate::fusion::FusionConfig;
    use crate::prompting::{template_words, ModalityMask, Separator};
    use crate::tinylm::{LmConfig, LoraConfig};

    struct Fixture {
        world: World,
        splits: Splits,
        vocab: Vocabulary,
        tables: ModalityTables,
        state: ModelState,
    }

    fn fixture(seed: u64) -> Fixture {
        let world = generate_world(
            &GenConfig {
                n_items: 60,
                n_bundles: 40,
                n_users: 6,
                n_categories: 3,
                interactions_per_user: 8,
                ..GenConfig::default()
            },
            seed,
        )
        .unwrap();
        let splits = split_bundles(&world, (0.8, 0.1, 0.1), SplitMode::Random, seed).unwrap();
        let corpus: Vec<String> = world.items.iter().map(|i| i.text.clone()).collect();
        let vocab = Vocabulary::build(&corpus, &crate::prompting::vocab_reserved_words(), 1).unwrap();
        let mut rng = substream(seed, "init");
        let mut base = crate::tinylm::BaseLm::init(
            LmConfig {
                vocab_size: vocab.len(),
                d_model: 32,
                n_heads: 2,
                n_blocks: 2,
                ff_mult: 2,
                context: 256,
            },
            &mut rng,
        )
        .unwrap();
        base.freeze();
        let adapters =
            crate::tinylm::LoraAdapters::init(&base.config, LoraConfig::default(), &mut rng)
                .unwrap();
        let d_rel = 8;
        let fusion = FusionParams::init(
            FusionConfig {
                d_media: world.gen_config.d_m,
                d_relational: d_rel,
                d: 16,
                d_hidden: 16,
                d_lm: 32,
                k_layers: 2,
            },
            &mut rng,
        );
        let separator = SoftSeparator::init(32, &mut rng);
        let mut frng = substream(seed, "features");
        let n = world.n_items();
        let mut user_level = FeatureTable::zeros(n, d_rel);
        let mut bundle_level = FeatureTable::zeros(n, d_rel);
        for r in 0..n {
            user_level.rows[r] = Mat::randn(1, d_rel, 1.0, &mut frng).data;
            bundle_level.rows[r] = Mat::randn(1, d_rel, 1.0, &mut frng).data;
        }
        let tables = ModalityTables {
            media: media_table(&world),
            user_level,
            bundle_level,
        };
        Fixture {
            world,
            splits,
            vocab,
            tables,
            state: ModelState {
                base,
                adapters,
                theta_f: ThetaF { fusion, separator },
            },
        }
    }

    fn small_cfg(stage: Stage, mode: PromptMode, seed: u64) -> TrainConfig {
        TrainConfig {
            sample_count: 48,
            valid_count: 0,
            batch_size: 16,
            max_epochs: 2,
            n_candidates: 5,
            ..TrainConfig::stage_defaults(stage, mode, seed)
        }
    }

    fn env<'a>(f: &'a Fixture) -> TrainEnv<'a> {
        TrainEnv {
            world: &f.world,
            vocab: &f.vocab,
            tables: &f.tables,
        }
    }

    #[test]
    fn s1_freezes_backbone_and_fusion() {
        let f = fixture(41);
        let cfg = small_cfg(Stage::S1, PromptMode::text_only(), 7);
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let before = f.state.checksums();
        let (adapters, report) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(report.checksums_before, before);
        assert_eq!(report.checksums_after.base, before.base);
        assert_eq!(report.checksums_after.theta_f, before.theta_f);
        assert_ne!(report.checksums_after.lora, before.lora, "adapters must move");
        assert_eq!(report.checksums_after.lora, checksum(&adapters));
        assert!(report.steps_run > 0);
    }

    #[test]
    fn s1_with_zero_epochs_returns_adapters_unchanged() {
        let f = fixture(42);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..small_cfg(Stage::S1, PromptMode::text_only(), 7)
        };
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (adapters, report) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(checksum(&adapters), checksum(&f.state.adapters));
        assert_eq!(report.steps_run, 0);
    }

    #[test]
    fn s1_rejects_hybrid_modes() {
        let f = fixture(43);
        let cfg = small_cfg(
            Stage::S1,
            PromptMode::fusion(Separator::Soft, ModalityMask::all()),
            7,
        );
        let data = StageData {
            train: vec![],
            valid: vec![],
        };
        assert!(matches!(
            run_stage1(&f.state, &env(&f), &data, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn s1_loss_decreases() {
        let f = fixture(44);
        let cfg = TrainConfig {
            sample_count: 96,
            valid_count: 0,
            batch_size: 16,
            max_epochs: 6,
            peak_lr: 1e-3,
            n_candidates: 5,
            ..TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 3)
        };
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (_, report) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        let first_epoch: Vec<f64> = report
            .loss_trace
            .iter()
            .filter(|p| p.epoch == 0)
            .map(|p| p.loss)
            .collect();
        let last_epoch: Vec<f64> = report
            .loss_trace
            .iter()
            .filter(|p| p.epoch == report.epochs_run - 1)
            .map(|p| p.loss)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&last_epoch) < mean(&first_epoch),
            "loss did not decrease: {} -> {}",
            mean(&first_epoch),
            mean(&last_epoch)
        );
    }

    #[test]
    fn s2_freezes_backbone_and_adapters_and_moves_separator() {
        let f = fixture(45);
        let cfg = small_cfg(
            Stage::S2,
            PromptMode::fusion(Separator::Soft, ModalityMask::all()),
            9,
        );
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let before = f.state.checksums();
        let sep_before = f.state.theta_f.separator.vec.clone();
        let (theta, report) = run_stage2(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(report.checksums_after.base, before.base);
        assert_eq!(report.checksums_after.lora, before.lora);
        assert_ne!(report.checksums_after.theta_f, before.theta_f);
        assert_ne!(
            theta.separator.vec.data, sep_before.data,
            "soft separator must train in S2"
        );
    }

    #[test]
    fn s2_with_no_separator_leaves_separator_untouched() {
        let f = fixture(46);
        let cfg = small_cfg(
            Stage::S2,
            PromptMode::fusion(Separator::None, ModalityMask::all()),
            9,
        );
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (theta, _) = run_stage2(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(theta.separator.vec.data, f.state.theta_f.separator.vec.data);
        assert_ne!(checksum(&theta.fusion), checksum(&f.state.theta_f.fusion));
    }

    #[test]
    fn s2_trains_prompt_style_projector() {
        let f = fixture(47);
        let cfg = small_cfg(Stage::S2, PromptMode::prompt_style(ModalityMask::all()), 9);
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (theta, _) = run_stage2(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_ne!(checksum(&theta.fusion), checksum(&f.state.theta_f.fusion));
    }

    #[test]
    fn joint_moves_both_groups_and_keeps_backbone() {
        let f = fixture(48);
        let cfg = small_cfg(
            Stage::Joint,
            PromptMode::fusion(Separator::Soft, ModalityMask::all()),
            11,
        );
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let before = f.state.checksums();
        let (adapters, theta, report) = run_joint(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(report.stage, "JOINT");
        assert_eq!(report.checksums_after.base, before.base);
        assert_ne!(checksum(&adapters), before.lora);
        assert_ne!(checksum(&theta), before.theta_f);
    }

    #[test]
    fn training_is_deterministic() {
        let f = fixture(49);
        let cfg = small_cfg(Stage::S1, PromptMode::text_only(), 13);
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (a1, r1) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        let (a2, r2) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(checksum(&a1), checksum(&a2));
        assert_eq!(r1.loss_trace, r2.loss_trace);
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let mut f = fixture(50);
        f.state.base.frozen = false;
        let cfg = small_cfg(Stage::S1, PromptMode::text_only(), 7);
        let data = StageData {
            train: vec![],
            valid: vec![],
        };
        assert!(run_stage1(&f.state, &env(&f), &data, &cfg).is_err());
    }

    #[test]
    fn warmup_reaches_peak_and_starts_at_zero() {
        let f = fixture(51);
        let cfg = small_cfg(Stage::S1, PromptMode::text_only(), 7);
        let data = StageData::sample(&f.world, &f.splits, &cfg).unwrap();
        let (_, report) = run_stage1(&f.state, &env(&f), &data, &cfg).unwrap();
        assert_eq!(report.loss_trace[0].lr, 0.0);
        let max_lr = report
            .loss_trace
            .iter()
            .map(|p| p.lr)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_lr <= cfg.peak_lr + 1e-15);
    }

    #[test]
    fn ablation_matrix_row_count_is_axis_product() {
        let f = fixture(52);
        let axes = AblationAxes {
            modes: vec![
                PromptMode::fusion(Separator::Soft, ModalityMask::all()),
                PromptMode::prompt_style(ModalityMask::only(crate::features::Modality::Media)),
            ],
            stages: vec![StagePlan::S1, StagePlan::S1ThenS2, StagePlan::Joint],
        };
        let cfg = TrainConfig {
            sample_count: 32,
            valid_count: 0,
            batch_size: 16,
            max_epochs: 1,
            n_candidates: 4,
            ..TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 17)
        };
        let report =
            run_ablation_matrix(&f.state, &env(&f), &f.splits, &axes, &cfg, 12).unwrap();
        assert_eq!(report.rows.len(), 6);
        // S1 rows are mode-independent and share the same numbers.
        let s1_rows: Vec<_> = report.rows.iter().filter(|r| r.stage == "S1").collect();
        assert_eq!(s1_rows.len(), 2);
        assert_eq!(s1_rows[0].hit_rate_at_1, s1_rows[1].hit_rate_at_1);
        assert_eq!(report.seed, 17);
    }

    #[test]
    fn pretrain_corpus_mixes_descriptions_and_examples() {
        let f = fixture(53);
        let corpus =
            build_pretrain_corpus(&f.world, &f.splits.train, 12, &[3, 5], 3).unwrap();
        // items + full renders + world drills + aux items + aux drills
        assert_eq!(corpus.len(), 2 * f.world.n_items() + 12);
        let vocab = Vocabulary::build(&corpus, &crate::prompting::vocab_reserved_words(), 1).unwrap();
        for line in &corpus {
            assert!(!vocab.has_unknown(line), "UNK leaked into {line:?}");
        }
        // Task lines end with an option letter.
        let last = corpus.last().unwrap();
        let tail = last.trim_end().chars().last().unwrap();
        assert!(tail.is_ascii_uppercase());
    }
}
