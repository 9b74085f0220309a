//! Command implementations. Each command resolves its run directory,
//! echoes the effective config, runs the work, and writes a report that
//! embeds the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bundle_forge_core::ablation::{run_ablation_matrix, AblationAxes, AblationReport, StagePlan};
use bundle_forge_core::dataset::{
    generate_world, load_world, sample_instances, split_bundles, validate_world, SplitMode,
    Splits, World,
};
use bundle_forge_core::eval::{
    candidate_size_sweep, evaluate, DotProductBaseline, InstancePredictor, Metrics,
    ModelPredictor, OracleBaseline, PopularityBaseline, RandomBaseline, SweepRow,
};
use bundle_forge_core::features::Modality;
use bundle_forge_core::fusion::{FusionConfig, FusionParams};
use bundle_forge_core::prompting::{
    build_plan, ModalityMask, PromptMode, Separator, Tokenization,
};
use bundle_forge_core::relational::{export_features, BipartiteGraph};
use bundle_forge_core::rng::{derive_seed, substream};
use bundle_forge_core::run::{
    resolve_out_dir, write_config_echo, write_losses_csv, write_report, write_timing, RunManifest,
};
use bundle_forge_core::tinylm::{
    pretrain_base, LmConfig, LoraAdapters, LoraConfig, SoftSeparator, Vocabulary,
};
use bundle_forge_core::training::{
    build_pretrain_corpus, run_joint, run_stage1, run_stage2, ModelState, Stage, StageData,
    StageReport, ThetaF, TrainEnv,
};

use crate::artifacts;
use crate::config::{load_config, AppConfig};
use crate::{
    AblatePreset, BaselineArg, CommonArgs, ModeArgs, SeparatorArg, SplitModeArg, StageArg,
    TokenizationArg,
};

fn parse_modalities(spec: &str) -> Result<ModalityMask> {
    let mut mask = ModalityMask::none();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match Modality::from_short_name(part) {
            Some(m) => mask.set(m, true),
            None => bail!("unknown modality {part:?} (expected media, ui, or bi)"),
        }
    }
    Ok(mask)
}

impl ModeArgs {
    fn prompt_mode(&self) -> Result<PromptMode> {
        let modalities = parse_modalities(&self.modalities)?;
        let separator = match self.separator {
            SeparatorArg::Textual => Separator::Textual,
            SeparatorArg::None => Separator::None,
            SeparatorArg::Soft => Separator::Soft,
        };
        let mut mode = match self.mode {
            TokenizationArg::Text => PromptMode::text_only(),
            TokenizationArg::Fusion => PromptMode::fusion(separator, modalities),
            TokenizationArg::Prompt => PromptMode::prompt_style(modalities),
        };
        if self.no_item_text {
            if mode.tokenization == Tokenization::TextOnly {
                bail!("--no-item-text makes no sense with --mode text");
            }
            mode.include_item_text = false;
        }
        Ok(mode)
    }
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    config: AppConfig,
    seed: u64,
}

fn start_run(common: &CommonArgs, command: &str) -> Result<Run> {
    let config = load_config(common.config.as_deref())?;
    let dir = resolve_out_dir(common.out_dir.as_deref(), command, common.force)?;
    let echoed = write_config_echo(&dir, &config)?;
    let manifest = RunManifest::new(command, common.config.as_deref(), &echoed, common.seed);
    Ok(Run {
        dir,
        manifest,
        config,
        seed: common.seed,
    })
}

fn load_world_splits(world: &Path, splits: &Path) -> Result<(World, Splits)> {
    let world = load_world(world)?;
    let splits = Splits::load(splits)?;
    for part in [&splits.train, &splits.valid, &splits.test] {
        for &b in part {
            if b as usize >= world.bundles.len() {
                bail!("splits reference bundle {b} outside the world");
            }
        }
    }
    Ok((world, splits))
}

// ---------------------------------------------------------------------------
// gen-world
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenWorldBody {
    world_file: String,
    n_items: usize,
    n_bundles: usize,
    n_users: usize,
    mean_bundle_size: f64,
    validation: String,
}

pub fn gen_world(common: CommonArgs) -> Result<()> {
    let run = start_run(&common, "gen-world")?;
    let world = generate_world(&run.config.world, run.seed)?;
    validate_world(&world)?;
    let world_path = run.dir.join("world.json");
    bundle_forge_core::dataset::save_world(&world, &world_path)?;
    let mean = world.bundles.iter().map(|b| b.len()).sum::<usize>() as f64
        / world.bundles.len() as f64;
    write_report(
        &run.dir,
        &run.manifest,
        &GenWorldBody {
            world_file: "world.json".into(),
            n_items: world.n_items(),
            n_bundles: world.bundles.len(),
            n_users: world.users,
            mean_bundle_size: mean,
            validation: "ok".into(),
        },
    )?;
    println!("world: {} ({} items, {} bundles)", world_path.display(), world.n_items(), world.bundles.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SplitBody {
    splits_file: String,
    mode: String,
    train: usize,
    valid: usize,
    test: usize,
    dropped: usize,
}

pub fn split(common: CommonArgs, world: PathBuf, ratios: String, mode: SplitModeArg) -> Result<()> {
    let run = start_run(&common, "split")?;
    let world = load_world(&world)?;
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|p| p.trim().parse::<f64>().context("parsing --ratios"))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("--ratios needs exactly three comma-separated values");
    }
    let mode = match mode {
        SplitModeArg::Random => SplitMode::Random,
        SplitModeArg::Cold => SplitMode::Cold,
    };
    let splits = split_bundles(&world, (parts[0], parts[1], parts[2]), mode, run.seed)?;
    let path = run.dir.join("splits.json");
    splits.save(&path)?;
    write_report(
        &run.dir,
        &run.manifest,
        &SplitBody {
            splits_file: "splits.json".into(),
            mode: format!("{mode:?}").to_lowercase(),
            train: splits.train.len(),
            valid: splits.valid.len(),
            test: splits.test.len(),
            dropped: splits.dropped,
        },
    )?;
    println!(
        "splits: {} (train {}, valid {}, test {}, dropped {})",
        path.display(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        splits.dropped
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-relational
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RelationalBody {
    dim: usize,
    k_layers: usize,
    include_layer0: bool,
    epochs: usize,
    ui_graph: GraphStats,
    bi_graph: GraphStats,
    ui_final_loss: Option<f64>,
    bi_final_loss: Option<f64>,
    ui_features: String,
    bi_features: String,
}

#[derive(Serialize)]
struct GraphStats {
    left: usize,
    right: usize,
    edges: usize,
}

pub fn train_relational(
    common: CommonArgs,
    world: PathBuf,
    splits: PathBuf,
    k: Option<usize>,
    dim: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    let run = start_run(&common, "train-relational")?;
    let (world, splits) = load_world_splits(&world, &splits)?;
    let mut section = run.config.relational.clone();
    if let Some(k) = k {
        section.k_layers = k;
    }
    if let Some(dim) = dim {
        section.dim = dim;
    }
    if let Some(epochs) = epochs {
        section.epochs = epochs;
    }

    let start = std::time::Instant::now();
    // User-item graph: item-level feedback, all edges.
    let ui_graph = BipartiteGraph::from_edges(
        world.users,
        world.n_items(),
        world.ui_edges.clone(),
    )?;
    let ui_table = train_relational_side(&ui_graph, &section, derive_seed(run.seed, "relational_ui"))?;
    let ui_features = export_features(&ui_graph, &ui_table)?;
    ui_features.save(&run.dir.join(artifacts::UI_FEATURES))?;

    // Bundle-item graph: training-split bundles only, so held-out bundles
    // never leak into the features.
    let bi_edges = world.bi_edges_for(&splits.train);
    let remap: std::collections::BTreeMap<u32, u32> = splits
        .train
        .iter()
        .enumerate()
        .map(|(pos, &b)| (b, pos as u32))
        .collect();
    let bi_edges: Vec<(u32, u32)> = bi_edges
        .into_iter()
        .map(|(b, i)| (remap[&b], i))
        .collect();
    let bi_graph = BipartiteGraph::from_edges(splits.train.len(), world.n_items(), bi_edges)?;
    let bi_table = train_relational_side(&bi_graph, &section, derive_seed(run.seed, "relational_bi"))?;
    let bi_features = export_features(&bi_graph, &bi_table)?;
    bi_features.save(&run.dir.join(artifacts::BI_FEATURES))?;

    write_report(
        &run.dir,
        &run.manifest,
        &RelationalBody {
            dim: section.dim,
            k_layers: section.k_layers,
            include_layer0: section.include_layer0,
            epochs: section.epochs,
            ui_graph: GraphStats {
                left: ui_graph.left_count,
                right: ui_graph.right_count,
                edges: ui_graph.edges.len(),
            },
            bi_graph: GraphStats {
                left: bi_graph.left_count,
                right: bi_graph.right_count,
                edges: bi_graph.edges.len(),
            },
            ui_final_loss: ui_table.log.epoch_loss.last().copied(),
            bi_final_loss: bi_table.log.epoch_loss.last().copied(),
            ui_features: artifacts::UI_FEATURES.into(),
            bi_features: artifacts::BI_FEATURES.into(),
        },
    )?;
    write_timing(&run.dir, &[("train-relational".into(), start.elapsed().as_secs_f64())])?;
    println!(
        "relational features: {} + {}",
        run.dir.join(artifacts::UI_FEATURES).display(),
        run.dir.join(artifacts::BI_FEATURES).display()
    );
    Ok(())
}

fn train_relational_side(
    graph: &BipartiteGraph,
    section: &crate::config::RelationalSection,
    seed: u64,
) -> Result<bundle_forge_core::relational::EmbeddingTable> {
    Ok(bundle_forge_core::relational::train_relational(
        graph,
        &section.hyper(seed),
    )?)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PretrainBody {
    vocab_size: usize,
    corpus_lines: usize,
    task_examples: usize,
    heldout_ppl_before: f64,
    heldout_ppl_after: f64,
    steps: usize,
    epoch_loss: Vec<f64>,
    base_checksum: String,
}

pub fn pretrain(common: CommonArgs, world: PathBuf, splits: PathBuf) -> Result<()> {
    let run = start_run(&common, "pretrain")?;
    let (world, splits) = load_world_splits(&world, &splits)?;
    let section = &run.config.pretrain;
    let lm_section = &run.config.lm;

    let start = std::time::Instant::now();
    let corpus = build_pretrain_corpus(
        &world,
        &splits.train,
        section.task_examples,
        &section.candidate_counts,
        run.seed,
    )?;
    let vocab = Vocabulary::build(
        &corpus,
        &bundle_forge_core::prompting::vocab_reserved_words(),
        section.min_word_freq,
    )?;
    let lm_config = LmConfig {
        vocab_size: vocab.len(),
        d_model: lm_section.d_model,
        n_heads: lm_section.n_heads,
        n_blocks: lm_section.n_blocks,
        ff_mult: lm_section.ff_mult,
        context: lm_section.context,
    };
    let (lm, report) = pretrain_base(
        &corpus,
        &vocab,
        lm_config,
        &section.pretrain_config(run.seed),
    )?;
    artifacts::save_pretrained(&run.dir, &lm, &vocab)?;
    write_report(
        &run.dir,
        &run.manifest,
        &PretrainBody {
            vocab_size: vocab.len(),
            corpus_lines: corpus.len(),
            task_examples: section.task_examples,
            heldout_ppl_before: report.heldout_ppl_before,
            heldout_ppl_after: report.heldout_ppl_after,
            steps: report.steps,
            epoch_loss: report.epoch_loss.clone(),
            base_checksum: bundle_forge_core::checkpoint::checksum(&lm.params),
        },
    )?;
    write_timing(&run.dir, &[("pretrain".into(), start.elapsed().as_secs_f64())])?;
    println!(
        "pretrained backbone: {} (vocab {}, heldout ppl {:.2} -> {:.2})",
        run.dir.display(),
        vocab.len(),
        report.heldout_ppl_before,
        report.heldout_ppl_after
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train (stages)
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub common: CommonArgs,
    pub stage: StageArg,
    pub world: PathBuf,
    pub splits: PathBuf,
    pub pretrained: PathBuf,
    pub s1: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub mode: ModeArgs,
    pub sample_count: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub peak_lr: Option<f64>,
    pub n_candidates: Option<usize>,
}

#[derive(Serialize)]
struct TrainBody {
    stage: StageReport,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let run = start_run(&args.common, "train")?;
    let (world, splits) = load_world_splits(&args.world, &args.splits)?;
    let (base, vocab) = artifacts::load_pretrained(&args.pretrained)?;

    let mut section = run.config.train.clone();
    if let Some(v) = args.sample_count {
        section.sample_count = v;
    }
    if let Some(v) = args.max_epochs {
        section.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        section.batch_size = v;
    }
    if let Some(v) = args.peak_lr {
        section.peak_lr = v;
    }
    if let Some(v) = args.n_candidates {
        section.n_candidates = v;
    }

    let tables = match args.features.as_deref() {
        Some(dir) => artifacts::load_tables(dir, &world)?,
        None => artifacts::placeholder_tables(&world, run.config.relational.dim),
    };

    let stage = match args.stage {
        StageArg::S1 => Stage::S1,
        StageArg::S2 => Stage::S2,
        StageArg::Joint => Stage::Joint,
    };
    let mode = match stage {
        Stage::S1 => PromptMode::text_only(),
        _ => args.mode.prompt_mode()?,
    };
    let cfg = section.train_config(stage, mode, run.seed);

    // Starting parameters: S2 continues from a stage-1 directory; S1 and
    // joint initialize fresh groups from the run seed.
    let mut rng = substream(derive_seed(run.seed, "init"), "init");
    let fresh_adapters = LoraAdapters::init(
        &base.config,
        LoraConfig {
            rank: section.lora_rank,
            alpha: section.lora_alpha,
        },
        &mut rng,
    )?;
    let fresh_theta = ThetaF {
        fusion: FusionParams::init(
            FusionConfig {
                d_media: world.gen_config.d_m,
                d_relational: tables.user_level.dim,
                d: run.config.fusion.d,
                d_hidden: run.config.fusion.d_hidden,
                d_lm: base.config.d_model,
                k_layers: run.config.fusion.k_layers,
            },
            &mut rng,
        ),
        separator: SoftSeparator::init(base.config.d_model, &mut rng),
    };
    let (adapters, theta) = match stage {
        Stage::S2 => {
            let s1_dir = args.s1.as_deref().ok_or_else(|| {
                anyhow::anyhow!("dependency error: --stage s2 needs --s1 <stage-1 run dir>")
            })?;
            artifacts::load_model_dir(s1_dir, &base.config)?
        }
        _ => (fresh_adapters, fresh_theta),
    };

    let state = ModelState {
        base,
        adapters,
        theta_f: theta,
    };
    let env = TrainEnv {
        world: &world,
        vocab: &vocab,
        tables: &tables,
    };
    let data = StageData::sample(&world, &splits, &cfg)?;

    let report = match stage {
        Stage::S1 => {
            let (adapters, report) = run_stage1(&state, &env, &data, &cfg)?;
            artifacts::save_model_dir(&run.dir, &adapters, &state.theta_f)?;
            report
        }
        Stage::S2 => {
            let (theta, report) = run_stage2(&state, &env, &data, &cfg)?;
            artifacts::save_model_dir(&run.dir, &state.adapters, &theta)?;
            report
        }
        Stage::Joint => {
            let (adapters, theta, report) = run_joint(&state, &env, &data, &cfg)?;
            artifacts::save_model_dir(&run.dir, &adapters, &theta)?;
            report
        }
    };
    write_losses_csv(&run.dir, &[&report])?;
    write_timing(&run.dir, &[(report.stage.clone(), report.wall_clock_secs)])?;
    println!(
        "stage {} done: {} steps, best valid hit rate {:?}",
        report.stage, report.steps_run, report.best_valid_hit_rate
    );
    write_report(&run.dir, &run.manifest, &TrainBody { stage: report })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub common: CommonArgs,
    pub world: PathBuf,
    pub splits: PathBuf,
    pub split: String,
    pub pretrained: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub baseline: Option<BaselineArg>,
    pub mode: ModeArgs,
    pub candidates: Option<usize>,
    pub count: Option<usize>,
    pub sweep: Option<String>,
    pub tokens: bool,
}

#[derive(Serialize)]
struct EvalBody {
    predictor: String,
    split: String,
    prompt_mode: Option<String>,
    n_candidates: usize,
    requested: usize,
    metrics: Option<Metrics>,
    sweep: Option<Vec<SweepRow>>,
    token_counts: Option<TokenSummary>,
}

#[derive(Serialize)]
pub struct TokenSummary {
    pub rows: Vec<TokenRow>,
    pub ordering_holds: bool,
}

#[derive(Serialize)]
pub struct TokenRow {
    pub mode: String,
    pub mean_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let run = start_run(&args.common, "eval")?;
    let (world, splits) = load_world_splits(&args.world, &args.splits)?;
    let bundle_ids = splits
        .part(&args.split)
        .ok_or_else(|| anyhow::anyhow!("unknown split {:?}", args.split))?
        .to_vec();
    if bundle_ids.is_empty() {
        bail!("split {:?} has no bundles", args.split);
    }
    let section = &run.config.eval;
    let n_candidates = args.candidates.unwrap_or(section.n_candidates);
    let count = args.count.unwrap_or(section.count);
    let eval_seed = derive_seed(run.seed, "eval_instances");
    let instances = sample_instances(&world, &bundle_ids, n_candidates, count, eval_seed)?;
    let sweep_sizes: Option<Vec<usize>> = match args.sweep.as_deref() {
        None => None,
        Some(spec) => Some(
            spec.split(',')
                .map(|p| p.trim().parse::<usize>().context("parsing --sweep"))
                .collect::<Result<_>>()?,
        ),
    };

    // Static context so predictors can borrow; dropped at process exit.
    let mode = args.mode.prompt_mode()?;
    let (name, metrics, sweep) = match args.baseline {
        Some(BaselineArg::Random) => {
            let p = RandomBaseline { seed: derive_seed(run.seed, "random_baseline") };
            run_predictor("baseline:random", &p, &instances, &world, &bundle_ids, &sweep_sizes, count, eval_seed)?
        }
        Some(BaselineArg::Oracle) => run_predictor(
            "baseline:oracle",
            &OracleBaseline,
            &instances,
            &world,
            &bundle_ids,
            &sweep_sizes,
            count,
            eval_seed,
        )?,
        Some(BaselineArg::Popularity) => {
            let p = PopularityBaseline::from_training_split(&world, &splits.train);
            run_predictor("baseline:popularity", &p, &instances, &world, &bundle_ids, &sweep_sizes, count, eval_seed)?
        }
        Some(BaselineArg::Dot) => {
            let dir = args.features.as_deref().ok_or_else(|| {
                anyhow::anyhow!("dependency error: --baseline dot needs --features")
            })?;
            let tables = artifacts::load_tables(dir, &world)?;
            let p = DotProductBaseline {
                features: &tables.bundle_level,
            };
            run_predictor("baseline:dot", &p, &instances, &world, &bundle_ids, &sweep_sizes, count, eval_seed)?
        }
        None => {
            let pretrained = args.pretrained.as_deref().ok_or_else(|| {
                anyhow::anyhow!("dependency error: model evaluation needs --pretrained")
            })?;
            let (base, vocab) = artifacts::load_pretrained(pretrained)?;
            let tables = match args.features.as_deref() {
                Some(dir) => artifacts::load_tables(dir, &world)?,
                None => artifacts::placeholder_tables(&world, run.config.relational.dim),
            };
            let (adapters, theta) = match args.model.as_deref() {
                Some(dir) => artifacts::load_model_dir(dir, &base.config)?,
                None => {
                    // Raw backbone: identity adapters, fresh fusion group.
                    let mut rng = substream(derive_seed(run.seed, "init"), "init");
                    let adapters = LoraAdapters::init(
                        &base.config,
                        LoraConfig {
                            rank: run.config.train.lora_rank,
                            alpha: run.config.train.lora_alpha,
                        },
                        &mut rng,
                    )?;
                    let theta = ThetaF {
                        fusion: FusionParams::init(
                            FusionConfig {
                                d_media: world.gen_config.d_m,
                                d_relational: tables.user_level.dim,
                                d: run.config.fusion.d,
                                d_hidden: run.config.fusion.d_hidden,
                                d_lm: base.config.d_model,
                                k_layers: run.config.fusion.k_layers,
                            },
                            &mut rng,
                        ),
                        separator: SoftSeparator::init(base.config.d_model, &mut rng),
                    };
                    (adapters, theta)
                }
            };
            let predictor = ModelPredictor {
                world: &world,
                vocab: &vocab,
                lm: &base,
                adapters: Some(&adapters),
                fusion: &theta.fusion,
                separator: &theta.separator,
                tables: &tables,
                mode,
                max_new_tokens: section.max_new_tokens,
            };
            run_predictor("model", &predictor, &instances, &world, &bundle_ids, &sweep_sizes, count, eval_seed)?
        }
    };

    let token_counts = if args.tokens {
        let loaded = match args.pretrained.as_deref() {
            Some(p) => Some(artifacts::load_pretrained(p)?),
            None => None,
        };
        Some(token_summary(
            &world,
            &instances,
            loaded.as_ref().map(|(lm, v)| (lm, v)),
        )?)
    } else {
        None
    };

    if let Some(m) = &metrics {
        println!(
            "{name}: hit_rate@1 {:.4}, valid_ratio {:.4} over {} instances",
            m.hit_rate_at_1, m.valid_ratio, m.n_instances
        );
    }
    if let Some(rows) = &sweep {
        for row in rows {
            println!(
                "C={}: hit_rate@1 {:.4}, valid_ratio {:.4}",
                row.n_candidates, row.metrics.hit_rate_at_1, row.metrics.valid_ratio
            );
        }
    }
    write_summary_csv(&run.dir, n_candidates, &metrics, &sweep)?;
    write_report(
        &run.dir,
        &run.manifest,
        &EvalBody {
            predictor: name,
            split: args.split.clone(),
            prompt_mode: Some(mode.label()),
            n_candidates,
            requested: count,
            metrics,
            sweep,
            token_counts,
        },
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_predictor<P: InstancePredictor>(
    name: &str,
    predictor: &P,
    instances: &[bundle_forge_core::dataset::PromptInstance],
    world: &World,
    bundle_ids: &[u32],
    sweep_sizes: &Option<Vec<usize>>,
    count: usize,
    seed: u64,
) -> Result<(String, Option<Metrics>, Option<Vec<SweepRow>>)> {
    match sweep_sizes {
        None => {
            let metrics = evaluate(predictor, instances)?;
            Ok((name.to_string(), Some(metrics), None))
        }
        Some(sizes) => {
            let rows = candidate_size_sweep(predictor, world, bundle_ids, sizes, count, seed)?;
            Ok((name.to_string(), None, Some(rows)))
        }
    }
}

fn write_summary_csv(
    dir: &Path,
    n_candidates: usize,
    metrics: &Option<Metrics>,
    sweep: &Option<Vec<SweepRow>>,
) -> Result<()> {
    let mut out = String::from("n_candidates,hit_rate_at_1,valid_ratio,n_instances\n");
    if let Some(m) = metrics {
        out.push_str(&format!(
            "{n_candidates},{},{},{}\n",
            m.hit_rate_at_1, m.valid_ratio, m.n_instances
        ));
    }
    if let Some(rows) = sweep {
        for row in rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.n_candidates,
                row.metrics.hit_rate_at_1,
                row.metrics.valid_ratio,
                row.metrics.n_instances
            ));
        }
    }
    std::fs::write(dir.join("summary.csv"), out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub struct AblateArgs {
    pub common: CommonArgs,
    pub world: PathBuf,
    pub splits: PathBuf,
    pub pretrained: PathBuf,
    pub features: PathBuf,
    pub preset: AblatePreset,
    pub eval_count: Option<usize>,
    pub sample_count: Option<usize>,
    pub max_epochs: Option<usize>,
    pub n_candidates: Option<usize>,
}

#[derive(Serialize)]
struct AblateBody {
    preset: String,
    report: AblationReport,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let run = start_run(&args.common, "ablate")?;
    let (world, splits) = load_world_splits(&args.world, &args.splits)?;
    let (base, vocab) = artifacts::load_pretrained(&args.pretrained)?;
    let tables = artifacts::load_tables(&args.features, &world)?;

    let mut section = run.config.train.clone();
    if let Some(v) = args.sample_count {
        section.sample_count = v;
    }
    if let Some(v) = args.max_epochs {
        section.max_epochs = v;
    }
    if let Some(v) = args.n_candidates {
        section.n_candidates = v;
    }

    let (preset_name, axes) = match args.preset {
        AblatePreset::Stages => (
            "stages",
            AblationAxes {
                modes: vec![PromptMode::fusion(Separator::Soft, ModalityMask::all())],
                stages: vec![StagePlan::S1, StagePlan::S1ThenS2, StagePlan::Joint],
            },
        ),
        AblatePreset::Separators => (
            "separators",
            AblationAxes {
                modes: vec![
                    PromptMode::fusion(Separator::Textual, ModalityMask::all()),
                    PromptMode::fusion(Separator::None, ModalityMask::all()),
                    PromptMode::fusion(Separator::Soft, ModalityMask::all()),
                    PromptMode::prompt_style(ModalityMask::all()),
                ],
                stages: vec![StagePlan::S1ThenS2],
            },
        ),
        AblatePreset::Modalities => {
            let mut modes = Vec::new();
            for m in Modality::ALL {
                let mut unimodal = PromptMode::prompt_style(ModalityMask::only(m));
                unimodal.include_item_text = false;
                modes.push(unimodal);
            }
            for m in Modality::ALL {
                modes.push(PromptMode::fusion(Separator::Soft, ModalityMask::only(m)));
            }
            modes.push(PromptMode::fusion(Separator::Soft, ModalityMask::all()));
            (
                "modalities",
                AblationAxes {
                    modes,
                    stages: vec![StagePlan::S1, StagePlan::S1ThenS2],
                },
            )
        }
    };

    let mut rng = substream(derive_seed(run.seed, "init"), "init");
    let state = ModelState {
        adapters: LoraAdapters::init(
            &base.config,
            LoraConfig {
                rank: section.lora_rank,
                alpha: section.lora_alpha,
            },
            &mut rng,
        )?,
        theta_f: ThetaF {
            fusion: FusionParams::init(
                FusionConfig {
                    d_media: world.gen_config.d_m,
                    d_relational: tables.user_level.dim,
                    d: run.config.fusion.d,
                    d_hidden: run.config.fusion.d_hidden,
                    d_lm: base.config.d_model,
                    k_layers: run.config.fusion.k_layers,
                },
                &mut rng,
            ),
            separator: SoftSeparator::init(base.config.d_model, &mut rng),
        },
        base,
    };
    let env = TrainEnv {
        world: &world,
        vocab: &vocab,
        tables: &tables,
    };
    let cfg = section.train_config(Stage::S1, PromptMode::text_only(), run.seed);
    let start = std::time::Instant::now();
    let report = run_ablation_matrix(
        &state,
        &env,
        &splits,
        &axes,
        &cfg,
        args.eval_count.unwrap_or(run.config.eval.count),
    )?;
    for row in &report.rows {
        println!(
            "{:<34} {:<8} hit_rate@1 {:.4}  valid {:.4}",
            row.mode, row.stage, row.hit_rate_at_1, row.valid_ratio
        );
    }
    write_timing(&run.dir, &[("ablate".into(), start.elapsed().as_secs_f64())])?;
    write_report(
        &run.dir,
        &run.manifest,
        &AblateBody {
            preset: preset_name.into(),
            report,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tokens
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TokensBody {
    n_instances: usize,
    n_candidates: usize,
    summary: TokenSummary,
}

pub fn tokens(
    common: CommonArgs,
    world: PathBuf,
    splits: PathBuf,
    count: Option<usize>,
    candidates: Option<usize>,
) -> Result<()> {
    let run = start_run(&common, "tokens")?;
    let (world, splits) = load_world_splits(&world, &splits)?;
    let n_candidates = candidates.unwrap_or(run.config.eval.n_candidates);
    let count = count.unwrap_or(200);
    let instances = sample_instances(
        &world,
        &splits.test,
        n_candidates,
        count,
        derive_seed(run.seed, "eval_instances"),
    )?;
    let summary = token_summary(&world, &instances, None)?;
    for row in &summary.rows {
        println!(
            "{:<28} mean {:>7.2}  min {:>4}  max {:>4}",
            row.mode, row.mean_tokens, row.min_tokens, row.max_tokens
        );
    }
    println!("ordering text < fusion <= prompt holds: {}", summary.ordering_holds);
    write_report(
        &run.dir,
        &run.manifest,
        &TokensBody {
            n_instances: instances.len(),
            n_candidates,
            summary,
        },
    )?;
    Ok(())
}

/// Position counts per tokenization strategy. Counting only needs a plan,
/// so a throwaway vocabulary over the world's texts suffices when no
/// pretrained backbone is at hand.
fn token_summary(
    world: &World,
    instances: &[bundle_forge_core::dataset::PromptInstance],
    pretrained: Option<(&bundle_forge_core::tinylm::BaseLm, &Vocabulary)>,
) -> Result<TokenSummary> {
    let local_vocab;
    let vocab = match pretrained {
        Some((_, v)) => v,
        None => {
            let corpus: Vec<String> = world.items.iter().map(|i| i.text.clone()).collect();
            local_vocab =
                Vocabulary::build(&corpus, &bundle_forge_core::prompting::vocab_reserved_words(), 1)?;
            &local_vocab
        }
    };
    let modes = [
        ("text_only", PromptMode::text_only()),
        (
            "fusion(sep=none)",
            PromptMode::fusion(Separator::None, ModalityMask::all()),
        ),
        (
            "fusion(sep=soft)",
            PromptMode::fusion(Separator::Soft, ModalityMask::all()),
        ),
        (
            "fusion(sep=textual)",
            PromptMode::fusion(Separator::Textual, ModalityMask::all()),
        ),
        (
            "prompt_style",
            PromptMode::prompt_style(ModalityMask::all()),
        ),
    ];
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for (_, mode) in &modes {
        let per_instance: Vec<usize> = instances
            .iter()
            .map(|inst| build_plan(inst, world, vocab, mode, usize::MAX).map(|p| p.len()))
            .collect::<bundle_forge_core::Result<_>>()?;
        counts.push(per_instance);
    }
    let mut ordering_holds = true;
    for i in 0..instances.len() {
        let text = counts[0][i];
        let fusion_soft = counts[2][i];
        let prompt = counts[4][i];
        if !(text < fusion_soft && fusion_soft <= prompt) {
            ordering_holds = false;
        }
    }
    let rows = modes
        .iter()
        .zip(counts.iter())
        .map(|((name, _), c)| TokenRow {
            mode: name.to_string(),
            mean_tokens: c.iter().sum::<usize>() as f64 / c.len() as f64,
            min_tokens: *c.iter().min().unwrap(),
            max_tokens: *c.iter().max().unwrap(),
        })
        .collect();
    Ok(TokenSummary {
        rows,
        ordering_holds,
    })
}
