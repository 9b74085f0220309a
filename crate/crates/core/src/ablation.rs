//! Ablation matrix driver: prompt-mode rows crossed with optimization
//! plans, all sharing one data sample and seed.

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_instances, Splits};
use crate::error::Result;
use crate::eval::{evaluate, Metrics, ModelPredictor};
use crate::prompting::{PromptMode, Tokenization};
use crate::rng::derive_seed;
use crate::training::{
    run_joint, run_stage1, run_stage2, ModelState, Stage, StageData, TrainConfig, TrainEnv,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePlan {
    /// Adapter stage only; evaluated with text-only prompts.
    S1,
    /// Progressive: adapter stage, then fusion stage, evaluated hybrid.
    S1ThenS2,
    /// Both groups optimized simultaneously from initialization.
    Joint,
}

impl StagePlan {
    pub fn label(self) -> &'static str {
        match self {
            StagePlan::S1 => "S1",
            StagePlan::S1ThenS2 => "S1->S2",
            StagePlan::Joint => "S1+S2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationAxes {
    pub modes: Vec<PromptMode>,
    pub stages: Vec<StagePlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub stage: String,
    pub eval_mode: String,
    pub hit_rate_at_1: f64,
    pub valid_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub n_test_instances: usize,
    pub seed: u64,
}

/// Run every (mode, stage-plan) cell. The S1 stage is identical across
/// cells, so it runs once; each cell then trains whatever else it needs.
/// All cells share the training sample, validation sample, and test
/// instances drawn from the run seed.
pub fn run_ablation_matrix(
    state: &ModelState,
    env: &TrainEnv,
    splits: &Splits,
    axes: &AblationAxes,
    base_cfg: &TrainConfig,
    eval_count: usize,
) -> Result<AblationReport> {
    let s1_cfg = TrainConfig {
        stage: Stage::S1,
        mode: PromptMode::text_only(),
        ..base_cfg.clone()
    };
    let data = StageData::sample(env.world, splits, &s1_cfg)?;
    let (s1_adapters, _) = run_stage1(state, env, &data, &s1_cfg)?;
    let s1_state = ModelState {
        base: state.base.clone(),
        adapters: s1_adapters,
        theta_f: state.theta_f.clone(),
    };

    let test = sample_instances(
        env.world,
        &splits.test,
        base_cfg.n_candidates,
        eval_count,
        derive_seed(base_cfg.seed, "ablation_test_instances"),
    )?;

    let eval_with = |st: &ModelState, mode: PromptMode| -> Result<Metrics> {
        let predictor = ModelPredictor {
            world: env.world,
            vocab: env.vocab,
            lm: &st.base,
            adapters: Some(&st.adapters),
            fusion: &st.theta_f.fusion,
            separator: &st.theta_f.separator,
            tables: env.tables,
            mode,
            max_new_tokens: 4,
        };
        evaluate(&predictor, &test)
    };

    let mut rows = Vec::with_capacity(axes.modes.len() * axes.stages.len());
    for mode in &axes.modes {
        for plan in &axes.stages {
            let (metrics, eval_mode) = match plan {
                StagePlan::S1 => {
                    let m = PromptMode::text_only();
                    (eval_with(&s1_state, m)?, m)
                }
                StagePlan::S1ThenS2 => {
                    if mode.tokenization == Tokenization::TextOnly {
                        (eval_with(&s1_state, *mode)?, *mode)
                    } else {
                        let s2_cfg = TrainConfig {
                            stage: Stage::S2,
                            mode: *mode,
                            ..base_cfg.clone()
                        };
                        let (theta, _) = run_stage2(&s1_state, env, &data, &s2_cfg)?;
                        let st = ModelState {
                            base: state.base.clone(),
                            adapters: s1_state.adapters.clone(),
                            theta_f: theta,
                        };
                        (eval_with(&st, *mode)?, *mode)
                    }
                }
                StagePlan::Joint => {
                    if mode.tokenization == Tokenization::TextOnly {
                        (eval_with(&s1_state, *mode)?, *mode)
                    } else {
                        let j_cfg = TrainConfig {
                            stage: Stage::Joint,
                            mode: *mode,
                            ..base_cfg.clone()
                        };
                        let (adapters, theta, _) = run_joint(state, env, &data, &j_cfg)?;
                        let st = ModelState {
                            base: state.base.clone(),
                            adapters,
                            theta_f: theta,
                        };
                        (eval_with(&st, *mode)?, *mode)
                    }
                }
            };
            rows.push(AblationRow {
                mode: mode.label(),
                stage: plan.label().into(),
                eval_mode: eval_mode.label(),
                hit_rate_at_1: metrics.hit_rate_at_1,
                valid_ratio: metrics.valid_ratio,
            });
        }
    }
    Ok(AblationReport {
        rows,
        n_test_instances: test.len(),
        seed: base_cfg.seed,
    })
}
