//! System acceptance suite. Each numbered criterion runs end to end at its
//! stated tolerance and prints one PASS/FAIL line; the test fails if any
//! criterion fails. The end-to-end criteria train real models, so this
//! target takes several minutes:
//!
//! ```sh
//! cargo test -p bundle-forge-core --test acceptance -- --nocapture
//! ```

use std::time::Instant;

use bundle_forge_core::ablation::{run_ablation_matrix, AblationAxes, StagePlan};
use bundle_forge_core::checkpoint::{checksum, NamedTensors};
use bundle_forge_core::dataset::{
    generate_world, sample_instances, split_bundles, GenConfig, LearnabilityMode, SplitMode,
    Splits, World,
};
use bundle_forge_core::eval::{
    candidate_size_sweep, evaluate, ModelPredictor, OracleBaseline, RandomBaseline,
};
use bundle_forge_core::features::{media_table, FeatureTable, Modality, ModalityTables};
use bundle_forge_core::fusion::{
    fuse_forward, FusionConfig, FusionInputs, FusionParams,
};
use bundle_forge_core::linalg::{rel_err, Mat};
use bundle_forge_core::prompting::{
    build_plan, vocab_reserved_words, ModalityMask, Position, PromptMode, Separator,
};
use bundle_forge_core::relational::{propagate, BipartiteGraph};
use bundle_forge_core::rng::{derive_seed, substream, Rng};
use bundle_forge_core::run::{
    write_losses_csv, write_report, RunManifest,
};
use bundle_forge_core::tinylm::{
    answer_loss_and_grad, apply_lora, pretrain_base, BaseLm, LmConfig, LoraAdapters, LoraConfig,
    PretrainConfig, SoftSeparator, Vocabulary,
};
use bundle_forge_core::training::{
    build_pretrain_corpus, run_stage1, run_stage2, ModelState, Stage, StageData, ThetaF,
    TrainConfig, TrainEnv,
};

type CriterionResult = Result<String, String>;

struct Suite {
    results: Vec<(u32, &'static str, CriterionResult)>,
}

impl Suite {
    fn run(&mut self, id: u32, name: &'static str, f: impl FnOnce() -> CriterionResult) {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match &result {
            Ok(detail) => println!("criterion {id:>2} PASS [{secs:7.1}s] {name}: {detail}"),
            Err(detail) => println!("criterion {id:>2} FAIL [{secs:7.1}s] {name}: {detail}"),
        }
        self.results.push((id, name, result));
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// Oracles local to the acceptance suite (independent of the library paths
// they verify).
// ---------------------------------------------------------------------------

fn dense_normalized_adjacency(graph: &BipartiteGraph) -> Vec<Vec<f64>> {
    let n = graph.left_count + graph.right_count;
    let mut deg = vec![0usize; n];
    for &(l, r) in &graph.edges {
        deg[l as usize] += 1;
        deg[graph.left_count + r as usize] += 1;
    }
    let mut a = vec![vec![0.0; n]; n];
    for &(l, r) in &graph.edges {
        let (li, ri) = (l as usize, graph.left_count + r as usize);
        let w = 1.0 / ((deg[li] as f64).sqrt() * (deg[ri] as f64).sqrt());
        a[li][ri] = w;
        a[ri][li] = w;
    }
    a
}

fn dense_apply(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let d = x[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != 0.0 {
                for c in 0..d {
                    out[i][c] += a[i][j] * x[j][c];
                }
            }
        }
    }
    out
}

/// Plain-loop fusion recomputation sharing nothing with the library path.
fn fusion_scalar_oracle(inputs: &FusionInputs, params: &FusionParams) -> Vec<f64> {
    let cfg = &params.config;
    let pick = |raw: &[f64], missing: &Mat| -> Vec<f64> {
        if raw.iter().all(|&v| v == 0.0) {
            missing.row(0).to_vec()
        } else {
            raw.to_vec()
        }
    };
    let rows_in = [
        (pick(&inputs.media, &params.missing_media), &params.w_media),
        (pick(&inputs.user, &params.missing_user), &params.w_user),
        (pick(&inputs.bundle, &params.missing_bundle), &params.w_bundle),
    ];
    let mut r = vec![vec![0.0; cfg.d]; 3];
    for (row, (input, w)) in rows_in.iter().enumerate() {
        for c in 0..cfg.d {
            let mut s = 0.0;
            for (i, &x) in input.iter().enumerate() {
                s += x * w.at(i, c);
            }
            r[row][c] = s;
        }
    }
    for layer in &params.attention {
        let mut q = vec![vec![0.0; cfg.d]; 3];
        let mut k = vec![vec![0.0; cfg.d]; 3];
        for row in 0..3 {
            for c in 0..cfg.d {
                let mut sq = 0.0;
                let mut sk = 0.0;
                for i in 0..cfg.d {
                    sq += r[row][i] * layer.w_q.at(i, c);
                    sk += r[row][i] * layer.w_k.at(i, c);
                }
                q[row][c] = sq;
                k[row][c] = sk;
            }
        }
        let mut a = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..cfg.d {
                    s += q[i][c] * k[j][c];
                }
                a[i][j] = s / (cfg.d as f64).sqrt();
            }
        }
        for row in a.iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let mut mixed = vec![vec![0.0; cfg.d]; 3];
        for i in 0..3 {
            for c in 0..cfg.d {
                let mut s = 0.0;
                for j in 0..3 {
                    s += a[i][j] * r[j][c];
                }
                mixed[i][c] = s;
            }
        }
        r = mixed;
    }
    let mut pooled = vec![0.0; cfg.d];
    for c in 0..cfg.d {
        pooled[c] = (r[0][c] + r[1][c] + r[2][c]) / 3.0;
    }
    let mut hidden = vec![0.0; cfg.d_hidden];
    for j in 0..cfg.d_hidden {
        let mut s = params.proj_b1.at(0, j);
        for i in 0..cfg.d {
            s += pooled[i] * params.proj_w1.at(i, j);
        }
        hidden[j] = s.tanh();
    }
    let mut out = vec![0.0; cfg.d_lm];
    for j in 0..cfg.d_lm {
        let mut s = params.proj_b2.at(0, j);
        for i in 0..cfg.d_hidden {
            s += hidden[i] * params.proj_w2.at(i, j);
        }
        out[j] = s;
    }
    out
}

fn random_graph(left: usize, right: usize, density: f64, rng: &mut Rng) -> BipartiteGraph {
    use rand::Rng as _;
    let mut edges = Vec::new();
    for l in 0..left as u32 {
        for r in 0..right as u32 {
            if rng.gen_bool(density) {
                edges.push((l, r));
            }
        }
    }
    BipartiteGraph::from_edges(left, right, edges).unwrap()
}

// ---------------------------------------------------------------------------
// Shared pipeline helpers
// ---------------------------------------------------------------------------

struct Pipeline {
    world: World,
    splits: Splits,
    vocab: Vocabulary,
    state: ModelState,
    tables: ModalityTables,
}

/// Gen world + split + pretrain + fresh adapter/fusion groups, with the
/// relational tables trained on the training split.
fn build_pipeline(
    gen: &GenConfig,
    seed: u64,
    pretrain_epochs: usize,
    task_examples: usize,
    lm: LmConfig0,
) -> Result<Pipeline, String> {
    let world = generate_world(gen, seed).map_err(|e| e.to_string())?;
    let splits =
        split_bundles(&world, (0.8, 0.1, 0.1), SplitMode::Random, seed).map_err(|e| e.to_string())?;
    build_pipeline_on(world, splits, seed, pretrain_epochs, task_examples, lm)
}

/// Architecture knobs for the suite's pipelines.
#[derive(Clone, Copy)]
struct LmConfig0 {
    d_model: usize,
    n_heads: usize,
    n_blocks: usize,
    relational_dim: usize,
    fusion_d: usize,
}

const DESK: LmConfig0 = LmConfig0 {
    d_model: 64,
    n_heads: 4,
    n_blocks: 2,
    relational_dim: 64,
    fusion_d: 64,
};

fn build_pipeline_on(
    world: World,
    splits: Splits,
    seed: u64,
    pretrain_epochs: usize,
    task_examples: usize,
    lm0: LmConfig0,
) -> Result<Pipeline, String> {
    let corpus = build_pretrain_corpus(
        &world,
        &splits.train,
        task_examples,
        &[2, 2, 3, 3, 4, 5, 6, 8, 10, 12],
        seed,
    )
    .map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&corpus, &vocab_reserved_words(), 1).map_err(|e| e.to_string())?;
    let lm_config = LmConfig {
        vocab_size: vocab.len(),
        d_model: lm0.d_model,
        n_heads: lm0.n_heads,
        n_blocks: lm0.n_blocks,
        ff_mult: 4,
        context: 512,
    };
    let pcfg = PretrainConfig {
        epochs: pretrain_epochs,
        seed,
        ..PretrainConfig::default()
    };
    let (base, _report) =
        pretrain_base(&corpus, &vocab, lm_config, &pcfg).map_err(|e| e.to_string())?;

    // Relational features from the training split only.
    let ui_graph = BipartiteGraph::from_edges(world.users, world.n_items(), world.ui_edges.clone())
        .map_err(|e| e.to_string())?;
    let hyper = bundle_forge_core::relational::RelationalHyper {
        dim: lm0.relational_dim,
        seed: derive_seed(seed, "relational_ui"),
        ..Default::default()
    };
    let ui_table =
        bundle_forge_core::relational::train_relational(&ui_graph, &hyper).map_err(|e| e.to_string())?;
    let user_level =
        bundle_forge_core::relational::export_features(&ui_graph, &ui_table).map_err(|e| e.to_string())?;

    let remap: std::collections::BTreeMap<u32, u32> = splits
        .train
        .iter()
        .enumerate()
        .map(|(pos, &b)| (b, pos as u32))
        .collect();
    let bi_edges: Vec<(u32, u32)> = world
        .bi_edges_for(&splits.train)
        .into_iter()
        .map(|(b, i)| (remap[&b], i))
        .collect();
    let bi_graph = BipartiteGraph::from_edges(splits.train.len(), world.n_items(), bi_edges)
        .map_err(|e| e.to_string())?;
    let bi_hyper = bundle_forge_core::relational::RelationalHyper {
        dim: lm0.relational_dim,
        seed: derive_seed(seed, "relational_bi"),
        ..Default::default()
    };
    let bi_table = bundle_forge_core::relational::train_relational(&bi_graph, &bi_hyper)
        .map_err(|e| e.to_string())?;
    let bundle_level = bundle_forge_core::relational::export_features(&bi_graph, &bi_table)
        .map_err(|e| e.to_string())?;

    let tables = ModalityTables {
        media: media_table(&world),
        user_level,
        bundle_level,
    };

    let mut rng = substream(derive_seed(seed, "init"), "init");
    let adapters = LoraAdapters::init(&base.config, LoraConfig::default(), &mut rng)
        .map_err(|e| e.to_string())?;
    let theta = ThetaF {
        fusion: FusionParams::init(
            FusionConfig {
                d_media: world.gen_config.d_m,
                d_relational: lm0.relational_dim,
                d: lm0.fusion_d,
                d_hidden: lm0.fusion_d,
                d_lm: base.config.d_model,
                k_layers: 2,
            },
            &mut rng,
        ),
        separator: SoftSeparator::init(base.config.d_model, &mut rng),
    };
    Ok(Pipeline {
        world,
        splits,
        vocab,
        state: ModelState {
            base,
            adapters,
            theta_f: theta,
        },
        tables,
    })
}

fn model_predictor<'a>(p: &'a Pipeline, mode: PromptMode) -> ModelPredictor<'a> {
    ModelPredictor {
        world: &p.world,
        vocab: &p.vocab,
        lm: &p.state.base,
        adapters: Some(&p.state.adapters),
        fusion: &p.state.theta_f.fusion,
        separator: &p.state.theta_f.separator,
        tables: &p.tables,
        mode,
        max_new_tokens: 4,
    }
}

fn env<'a>(p: &'a Pipeline) -> TrainEnv<'a> {
    TrainEnv {
        world: &p.world,
        vocab: &p.vocab,
        tables: &p.tables,
    }
}

// ---------------------------------------------------------------------------
// The suite
// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    // The desk-scale budget is stated for a single core.
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .ok();

    let mut suite = Suite {
        results: Vec::new(),
    };

    suite.run(1, "oracle equivalence: graph propagation", criterion_1);
    suite.run(2, "oracle equivalence: fusion", criterion_2);
    suite.run(3, "finite-difference gradient checks", criterion_3);
    suite.run(4, "adapter identity and merge equivalence", criterion_4);
    suite.run(5, "stage isolation checksums", criterion_5);
    suite.run(6, "stage-1 batch purity", criterion_6);
    suite.run(7, "protocol exactness", criterion_7);

    // Criteria 8-11 share expensive pipelines; build once each.
    let desk = criterion_8_pipeline();
    match &desk {
        Ok((pipeline, s1_adapters, detail)) => {
            let d = detail.clone();
            suite.run(8, "desk-scale end-to-end", move || Ok(d));
            let p = pipeline;
            let a = s1_adapters;
            suite.run(10, "token efficiency", || criterion_10(p));
            suite.run(11, "cold-split evaluation", || criterion_11(p, a));
        }
        Err(e) => {
            let msg = e.clone();
            suite.run(8, "desk-scale end-to-end", move || Err(msg));
            suite.run(10, "token efficiency", || {
                Err("skipped: criterion 8 pipeline failed".into())
            });
            suite.run(11, "cold-split evaluation", || {
                Err("skipped: criterion 8 pipeline failed".into())
            });
        }
    }

    suite.run(9, "progressive optimization direction", criterion_9);
    suite.run(12, "bitwise run determinism", criterion_12);

    let failures: Vec<String> = suite
        .results
        .iter()
        .filter_map(|(id, name, r)| r.as_ref().err().map(|e| format!("criterion {id} ({name}): {e}")))
        .collect();
    assert!(
        failures.is_empty(),
        "{} criterion(s) failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

fn criterion_1() -> CriterionResult {
    use rand::Rng as _;
    let start = Instant::now();
    let mut rng = substream(101, "acceptance");
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let left = rng.gen_range(5..=25usize);
        let right = rng.gen_range(5..=(50 - left));
        let graph = random_graph(left, right, 0.3, &mut rng);
        let k = rng.gen_range(1..=3usize);
        let d = rng.gen_range(2..=8usize);
        let left0 = Mat::randn(left, d, 1.0, &mut rng);
        let right0 = Mat::randn(right, d, 1.0, &mut rng);
        let layers = propagate(&graph, &left0, &right0, k).map_err(|e| e.to_string())?;
        let a = dense_normalized_adjacency(&graph);
        let mut stacked: Vec<Vec<f64>> = (0..left)
            .map(|i| left0.row(i).to_vec())
            .chain((0..right).map(|i| right0.row(i).to_vec()))
            .collect();
        for (l, r) in &layers {
            stacked = dense_apply(&a, &stacked);
            for i in 0..left {
                for c in 0..d {
                    worst = worst.max(rel_err(l.at(i, c), stacked[i][c]));
                }
            }
            for i in 0..right {
                for c in 0..d {
                    worst = worst.max(rel_err(r.at(i, c), stacked[left + i][c]));
                }
            }
        }
        check(worst < 1e-10, format!("trial {trial}: rel err {worst:.3e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.1}s, budget 10s"))?;
    Ok(format!("20 graphs, worst rel err {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> CriterionResult {
    let mut rng = substream(102, "acceptance");
    let mut worst: f64 = 0.0;
    let mut draws = 0;
    for k_layers in 0..=3usize {
        for _ in 0..5 {
            let cfg = FusionConfig {
                d_media: 5,
                d_relational: 7,
                d: 6,
                d_hidden: 6,
                d_lm: 8,
                k_layers,
            };
            let params = FusionParams::init(cfg, &mut rng);
            let inputs = FusionInputs {
                media: Mat::randn(1, 5, 1.0, &mut rng).data,
                user: Mat::randn(1, 7, 1.0, &mut rng).data,
                bundle: Mat::randn(1, 7, 1.0, &mut rng).data,
            };
            let (out, _) = fuse_forward(&inputs, &params).map_err(|e| e.to_string())?;
            let oracle = fusion_scalar_oracle(&inputs, &params);
            for (a, b) in out.iter().zip(oracle.iter()) {
                worst = worst.max(rel_err(*a, *b));
            }
            draws += 1;
        }
    }
    check(
        worst < 1e-10,
        format!("worst rel err {worst:.3e} over {draws} draws"),
    )?;
    Ok(format!("{draws} draws over K' in 0..=3, worst rel err {worst:.2e}"))
}

fn criterion_3() -> CriterionResult {
    let start = Instant::now();
    let h = 1e-5;
    let tol = |num: f64, ana: f64| rel_err(num, ana) < 1e-4 || (num - ana).abs() < 1e-9;

    // Fusion: every tensor, every entry.
    let mut rng = substream(103, "acceptance");
    let cfg = FusionConfig {
        d_media: 3,
        d_relational: 4,
        d: 5,
        d_hidden: 6,
        d_lm: 7,
        k_layers: 2,
    };
    let params = FusionParams::init(cfg, &mut rng);
    let mut inputs = FusionInputs {
        media: Mat::randn(1, 3, 1.0, &mut rng).data,
        user: Mat::randn(1, 4, 1.0, &mut rng).data,
        bundle: Mat::randn(1, 4, 1.0, &mut rng).data,
    };
    inputs.user = vec![0.0; 4]; // exercise a missing-modality vector too
    let upstream: Vec<f64> = (0..7).map(|i| 0.3 + 0.2 * i as f64).collect();
    let objective = |p: &FusionParams| {
        let (out, _) = fuse_forward(&inputs, p).unwrap();
        out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = fuse_forward(&inputs, &params).map_err(|e| e.to_string())?;
    let mut grads = params.zeros_like();
    bundle_forge_core::fusion::fuse_backward(&params, &cache, &upstream, &mut grads)
        .map_err(|e| e.to_string())?;
    let mut n_checked = 0usize;
    let n_tensors = params.tensors().len();
    for t_idx in 0..n_tensors {
        let name = params.tensors()[t_idx].0.clone();
        for e in 0..params.tensors()[t_idx].1.data.len() {
            let mut pp = params.clone();
            pp.tensors_mut()[t_idx].1.data[e] += h;
            let mut pm = params.clone();
            pm.tensors_mut()[t_idx].1.data[e] -= h;
            let num = (objective(&pp) - objective(&pm)) / (2.0 * h);
            let ana = grads.tensors()[t_idx].1.data[e];
            check(tol(num, ana), format!("fusion {name}[{e}]: fd {num} vs {ana}"))?;
            n_checked += 1;
        }
    }

    // Tiny LM with adapters: every tensor, every entry (dims <= 16).
    let vocab = Vocabulary::build(
        &["red wool coat".into(), "blue hat scarf".into()],
        &["answer :"],
        1,
    )
    .map_err(|e| e.to_string())?;
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        ff_mult: 2,
        context: 16,
    };
    let lm = BaseLm::init(lm_cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut adapters = LoraAdapters::init(&lm_cfg, LoraConfig { rank: 2, alpha: 4.0 }, &mut rng)
        .map_err(|e| e.to_string())?;
    for block in adapters.blocks.iter_mut() {
        block.q.b = Mat::randn(8, 2, 0.05, &mut rng);
        block.v.b = Mat::randn(8, 2, 0.05, &mut rng);
    }
    let emb = Mat::randn(6, 8, 0.8, &mut rng);
    let targets = [(2usize, 1u32), (5usize, 4u32)];
    let loss_of = |lm: &BaseLm, ad: &LoraAdapters, emb: &Mat| {
        let cache = lm.forward(emb, Some(ad)).unwrap();
        answer_loss_and_grad(lm, &cache, &targets).unwrap().0
    };
    let cache = lm.forward(&emb, Some(&adapters)).map_err(|e| e.to_string())?;
    let (_, rows) = answer_loss_and_grad(&lm, &cache, &targets).map_err(|e| e.to_string())?;
    let grads = lm
        .backward(&cache, Some(&adapters), &rows)
        .map_err(|e| e.to_string())?;
    let n_base = lm.params.tensors().len();
    for t_idx in 0..n_base {
        let name = lm.params.tensors()[t_idx].0.clone();
        for e in 0..lm.params.tensors()[t_idx].1.data.len() {
            let mut p = lm.clone();
            p.params.tensors_mut()[t_idx].1.data[e] += h;
            let mut m = lm.clone();
            m.params.tensors_mut()[t_idx].1.data[e] -= h;
            let num = (loss_of(&p, &adapters, &emb) - loss_of(&m, &adapters, &emb)) / (2.0 * h);
            let ana = grads.base.tensors()[t_idx].1.data[e];
            check(tol(num, ana), format!("lm {name}[{e}]: fd {num} vs {ana}"))?;
            n_checked += 1;
        }
    }
    let lora_grads = grads.lora.as_ref().unwrap();
    let n_lora = adapters.tensors().len();
    for t_idx in 0..n_lora {
        let name = adapters.tensors()[t_idx].0.clone();
        for e in 0..adapters.tensors()[t_idx].1.data.len() {
            let mut p = adapters.clone();
            p.tensors_mut()[t_idx].1.data[e] += h;
            let mut m = adapters.clone();
            m.tensors_mut()[t_idx].1.data[e] -= h;
            let num = (loss_of(&lm, &p, &emb) - loss_of(&lm, &m, &emb)) / (2.0 * h);
            let ana = lora_grads.tensors()[t_idx].1.data[e];
            check(tol(num, ana), format!("lora {name}[{e}]: fd {num} vs {ana}"))?;
            n_checked += 1;
        }
    }
    // Soft separator: trained through the input-gradient path, which the
    // embedding check covers.
    for e in 0..emb.data.len() {
        let mut p = emb.clone();
        p.data[e] += h;
        let mut m = emb.clone();
        m.data[e] -= h;
        let num = (loss_of(&lm, &adapters, &p) - loss_of(&lm, &adapters, &m)) / (2.0 * h);
        let ana = grads.d_input.data[e];
        check(tol(num, ana), format!("input[{e}]: fd {num} vs {ana}"))?;
        n_checked += 1;
    }

    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s, budget 60s"))?;
    Ok(format!("{n_checked} gradient entries in {secs:.1}s"))
}

fn criterion_4() -> CriterionResult {
    let mut rng = substream(104, "acceptance");
    let vocab = Vocabulary::build(&["red wool coat hat".into()], &[], 1).map_err(|e| e.to_string())?;
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 4,
        n_blocks: 2,
        ff_mult: 2,
        context: 32,
    };
    let lm = BaseLm::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let zero_adapters =
        LoraAdapters::init(&cfg, LoraConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let emb = Mat::randn(9, 16, 0.7, &mut rng);
    let base_logits = lm.forward_logits(&emb, None).map_err(|e| e.to_string())?;
    let zero_logits = lm
        .forward_logits(&emb, Some(&zero_adapters))
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (a, b) in base_logits.data.iter().zip(zero_logits.data.iter()) {
        worst = worst.max((a - b).abs());
    }
    check(worst <= 1e-12, format!("zero-adapter drift {worst:.3e}"))?;

    let mut trained = zero_adapters.clone();
    for block in trained.blocks.iter_mut() {
        block.q.b = Mat::randn(16, 8, 0.1, &mut rng);
        block.v.b = Mat::randn(16, 8, 0.1, &mut rng);
    }
    let merged = apply_lora(&lm, &trained).map_err(|e| e.to_string())?;
    let adapter_logits = lm
        .forward_logits(&emb, Some(&trained))
        .map_err(|e| e.to_string())?;
    let merged_logits = merged.forward_logits(&emb, None).map_err(|e| e.to_string())?;
    let mut worst_merge: f64 = 0.0;
    for (a, b) in adapter_logits.data.iter().zip(merged_logits.data.iter()) {
        worst_merge = worst_merge.max((a - b).abs());
    }
    check(
        worst_merge <= 1e-12,
        format!("merge drift {worst_merge:.3e}"),
    )?;
    Ok(format!(
        "zero-adapter drift {worst:.1e}, merge drift {worst_merge:.1e}"
    ))
}

/// Small shared fixture for the checksum criteria.
fn small_pipeline(mode: LearnabilityMode, seed: u64) -> Result<Pipeline, String> {
    build_pipeline(
        &GenConfig {
            n_items: 60,
            n_bundles: 40,
            n_users: 10,
            n_categories: 3,
            interactions_per_user: 10,
            learnability_mode: mode,
            ..GenConfig::default()
        },
        seed,
        1,
        60,
        LmConfig0 {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            relational_dim: 16,
            fusion_d: 16,
        },
    )
}

fn criterion_5() -> CriterionResult {
    let p = small_pipeline(LearnabilityMode::TextSufficient, 105)?;
    let cfg = TrainConfig {
        sample_count: 48,
        valid_count: 0,
        max_epochs: 1,
        n_candidates: 5,
        ..TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 105)
    };
    let data = StageData::sample(&p.world, &p.splits, &cfg).map_err(|e| e.to_string())?;
    let before = p.state.checksums();
    let (s1_adapters, r1) = run_stage1(&p.state, &env(&p), &data, &cfg).map_err(|e| e.to_string())?;
    check(
        r1.checksums_after.base == before.base,
        "S1 changed the frozen backbone checksum",
    )?;
    check(
        r1.checksums_after.theta_f == before.theta_f,
        "S1 changed the fusion-group checksum",
    )?;
    check(
        r1.checksums_after.lora != before.lora,
        "S1 did not update the adapters",
    )?;

    let s1_state = ModelState {
        base: p.state.base.clone(),
        adapters: s1_adapters,
        theta_f: p.state.theta_f.clone(),
    };
    let cfg2 = TrainConfig {
        stage: Stage::S2,
        mode: PromptMode::fusion(Separator::Soft, ModalityMask::all()),
        ..cfg.clone()
    };
    let before2 = s1_state.checksums();
    let (_, r2) = run_stage2(&s1_state, &env(&p), &data, &cfg2).map_err(|e| e.to_string())?;
    check(
        r2.checksums_after.base == before2.base,
        "S2 changed the frozen backbone checksum",
    )?;
    check(
        r2.checksums_after.lora == before2.lora,
        "S2 changed the adapter checksum",
    )?;
    check(
        r2.checksums_after.theta_f != before2.theta_f,
        "S2 did not update the fusion group",
    )?;
    Ok("S1 froze {phi, theta_f}; S2 froze {phi, lora}; exact equality".into())
}

fn criterion_6() -> CriterionResult {
    let p = small_pipeline(LearnabilityMode::TextSufficient, 106)?;
    let cfg = TrainConfig {
        sample_count: 64,
        valid_count: 0,
        max_epochs: 1,
        n_candidates: 8,
        ..TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 106)
    };
    let data = StageData::sample(&p.world, &p.splits, &cfg).map_err(|e| e.to_string())?;
    let mut scanned = 0usize;
    for inst in &data.train {
        let plan = build_plan(inst, &p.world, &p.vocab, &cfg.mode, 512).map_err(|e| e.to_string())?;
        for pos in &plan.positions {
            match pos {
                Position::Vocab(_) => {}
                other => return Err(format!("non-vocab position {other:?} in an S1 batch")),
            }
        }
        scanned += plan.len();
    }
    Ok(format!(
        "scanned {scanned} positions over {} S1 sequences, zero non-vocab",
        data.train.len()
    ))
}

fn criterion_7() -> CriterionResult {
    let world = generate_world(&GenConfig::default(), 107).map_err(|e| e.to_string())?;
    let bundles: Vec<u32> = (0..world.bundles.len() as u32).collect();
    let instances =
        sample_instances(&world, &bundles, 10, 1000, 1070).map_err(|e| e.to_string())?;
    let random = evaluate(&RandomBaseline { seed: 17 }, &instances).map_err(|e| e.to_string())?;
    let sigma = (0.1f64 * 0.9 / 1000.0).sqrt();
    check(
        (random.hit_rate_at_1 - 0.1).abs() < 3.0 * sigma,
        format!(
            "random baseline hit rate {} outside 3 sigma of 0.100",
            random.hit_rate_at_1
        ),
    )?;
    let oracle = evaluate(&OracleBaseline, &instances).map_err(|e| e.to_string())?;
    check(
        oracle.hit_rate_at_1 == 1.0 && oracle.valid_ratio == 1.0,
        format!("oracle scored {}", oracle.hit_rate_at_1),
    )?;
    for metrics in [&random, &oracle] {
        check(
            metrics.hit_rate_at_1 <= metrics.valid_ratio,
            "hit rate exceeded valid ratio",
        )?;
    }
    Ok(format!(
        "random {:.3} (3 sigma band {:.3}), oracle 1.000, hit<=valid everywhere",
        random.hit_rate_at_1,
        3.0 * sigma
    ))
}

/// Criterion 8 returns its pipeline so later criteria can reuse it.
fn criterion_8_pipeline() -> Result<(Pipeline, LoraAdapters, String), String> {
    let start = Instant::now();
    let mut pipeline = build_pipeline(&GenConfig::default(), 108, 12, 4096, DESK)?;
    let cfg = TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 108);
    let data = StageData::sample(&pipeline.world, &pipeline.splits, &cfg).map_err(|e| e.to_string())?;
    let (adapters, report) =
        run_stage1(&pipeline.state, &env(&pipeline), &data, &cfg).map_err(|e| e.to_string())?;
    pipeline.state.adapters = adapters.clone();

    let test_instances = sample_instances(
        &pipeline.world,
        &pipeline.splits.test,
        10,
        1000,
        derive_seed(108, "eval_instances"),
    )
    .map_err(|e| e.to_string())?;
    let predictor = model_predictor(&pipeline, PromptMode::text_only());
    let metrics = evaluate(&predictor, &test_instances).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    check(
        secs < 1800.0,
        format!("end-to-end took {secs:.0}s, budget 1800s"),
    )?;
    check(
        metrics.valid_ratio >= 0.99,
        format!("post-S1 valid ratio {} < 0.99", metrics.valid_ratio),
    )?;
    check(
        metrics.hit_rate_at_1 >= 0.30,
        format!("post-S1 hit rate {} < 0.30", metrics.hit_rate_at_1),
    )?;
    check(
        metrics.hit_rate_at_1 <= metrics.valid_ratio,
        "hit rate exceeded valid ratio",
    )?;
    let detail = format!(
        "pretrain+S1 {secs:.0}s ({} S1 steps), hit {:.3}, valid {:.3} on 1000 held-out instances",
        report.steps_run, metrics.hit_rate_at_1, metrics.valid_ratio
    );
    Ok((pipeline, adapters, detail))
}

fn criterion_9() -> CriterionResult {
    // Expected margins calibrated across three seeds before freezing; see
    // docs/thresholds.md.
    let gen = GenConfig {
        learnability_mode: LearnabilityMode::MediaRequired,
        ..GenConfig::default()
    };
    let pipeline = build_pipeline(&gen, 109, 12, 4096, DESK)?;
    let cfg_s1 = TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 109);
    let data = StageData::sample(&pipeline.world, &pipeline.splits, &cfg_s1)
        .map_err(|e| e.to_string())?;
    let (s1_adapters, _) =
        run_stage1(&pipeline.state, &env(&pipeline), &data, &cfg_s1).map_err(|e| e.to_string())?;
    let s1_state = ModelState {
        base: pipeline.state.base.clone(),
        adapters: s1_adapters,
        theta_f: pipeline.state.theta_f.clone(),
    };

    let media_mode = PromptMode::fusion(Separator::Soft, ModalityMask::only(Modality::Media));
    let cfg_s2 = TrainConfig {
        stage: Stage::S2,
        mode: media_mode,
        ..cfg_s1.clone()
    };
    let (theta, _) =
        run_stage2(&s1_state, &env(&pipeline), &data, &cfg_s2).map_err(|e| e.to_string())?;
    let s2_state = ModelState {
        base: pipeline.state.base.clone(),
        adapters: s1_state.adapters.clone(),
        theta_f: theta,
    };

    let test_instances = sample_instances(
        &pipeline.world,
        &pipeline.splits.test,
        10,
        1000,
        derive_seed(109, "eval_instances"),
    )
    .map_err(|e| e.to_string())?;

    let eval_state = |state: &ModelState, mode: PromptMode| -> Result<f64, String> {
        let predictor = ModelPredictor {
            world: &pipeline.world,
            vocab: &pipeline.vocab,
            lm: &state.base,
            adapters: Some(&state.adapters),
            fusion: &state.theta_f.fusion,
            separator: &state.theta_f.separator,
            tables: &pipeline.tables,
            mode,
            max_new_tokens: 4,
        };
        Ok(evaluate(&predictor, &test_instances)
            .map_err(|e| e.to_string())?
            .hit_rate_at_1)
    };

    let s1_hit = eval_state(&s1_state, PromptMode::text_only())?;
    let s2_hit = eval_state(&s2_state, media_mode)?;
    let s2_text_hit = eval_state(&s2_state, PromptMode::text_only())?;

    check(
        s2_hit >= s1_hit + 0.05,
        format!("S1->S2 hit {s2_hit:.3} does not exceed S1 {s1_hit:.3} by 0.05"),
    )?;
    check(
        s2_hit > s2_text_hit,
        format!("S1->S2 hit {s2_hit:.3} not above text-only prompting {s2_text_hit:.3} of the same checkpoint"),
    )?;
    Ok(format!(
        "media-required world: S1 {s1_hit:.3} -> S1->S2 {s2_hit:.3} (text-only prompting of same checkpoint {s2_text_hit:.3})"
    ))
}

fn criterion_10(p: &Pipeline) -> CriterionResult {
    let instances = sample_instances(
        &p.world,
        &p.splits.test,
        10,
        200,
        derive_seed(110, "eval_instances"),
    )
    .map_err(|e| e.to_string())?;
    let count = |inst, mode: &PromptMode| -> Result<usize, String> {
        Ok(build_plan(inst, &p.world, &p.vocab, mode, usize::MAX)
            .map_err(|e| e.to_string())?
            .len())
    };
    let soft = PromptMode::fusion(Separator::Soft, ModalityMask::all());
    let none = PromptMode::fusion(Separator::None, ModalityMask::all());
    let text = PromptMode::text_only();
    let prompt = PromptMode::prompt_style(ModalityMask::all());
    for inst in &instances {
        let n_items = inst.seed_items.len() + inst.candidates.len();
        let c_text = count(inst, &text)?;
        let c_soft = count(inst, &soft)?;
        let c_none = count(inst, &none)?;
        let c_prompt = count(inst, &prompt)?;
        check(
            c_text < c_soft && c_soft <= c_prompt,
            format!("ordering violated: text {c_text}, fusion {c_soft}, prompt {c_prompt}"),
        )?;
        check(
            c_soft == c_text + 2 * n_items,
            format!("soft-separator overhead not exactly 2 per item: {c_text} -> {c_soft}"),
        )?;
        check(
            c_none == c_text + n_items,
            format!("no-separator overhead not exactly 1 per item: {c_text} -> {c_none}"),
        )?;
    }
    Ok(format!(
        "{} instances: text < fusion <= prompt everywhere; per-item overhead exactly 2 (soft) / 1 (none)",
        instances.len()
    ))
}

fn criterion_11(p: &Pipeline, s1_adapters: &LoraAdapters) -> CriterionResult {
    // Item-sparse world so a cold split is feasible.
    let gen = GenConfig {
        n_items: 600,
        n_bundles: 150,
        n_users: 30,
        n_categories: 6,
        interactions_per_user: 10,
        ..GenConfig::default()
    };
    let world = generate_world(&gen, 111).map_err(|e| e.to_string())?;
    let splits =
        split_bundles(&world, (0.7, 0.1, 0.2), SplitMode::Cold, 111).map_err(|e| e.to_string())?;
    let train_items: std::collections::BTreeSet<u32> = splits
        .train
        .iter()
        .flat_map(|&b| world.bundles[b as usize].iter().copied())
        .collect();
    let test_items: std::collections::BTreeSet<u32> = splits
        .test
        .iter()
        .flat_map(|&b| world.bundles[b as usize].iter().copied())
        .collect();
    check(
        train_items.intersection(&test_items).count() == 0,
        "cold split train/test item intersection is not empty",
    )?;

    // End-to-end on the cold world: the criterion-8 backbone and adapters
    // apply directly since the vocabulary pools are shared.
    let predictor = ModelPredictor {
        world: &world,
        vocab: &p.vocab,
        lm: &p.state.base,
        adapters: Some(s1_adapters),
        fusion: &p.state.theta_f.fusion,
        separator: &p.state.theta_f.separator,
        tables: &ModalityTables {
            media: media_table(&world),
            user_level: FeatureTable::zeros(world.n_items(), p.tables.user_level.dim),
            bundle_level: FeatureTable::zeros(world.n_items(), p.tables.bundle_level.dim),
        },
        mode: PromptMode::text_only(),
        max_new_tokens: 4,
    };
    let rows = candidate_size_sweep(
        &predictor,
        &world,
        &splits.test,
        &[2, 5, 10, 20],
        200,
        derive_seed(111, "eval_instances"),
    )
    .map_err(|e| e.to_string())?;
    check(rows.len() == 4, format!("{} sweep rows, expected 4", rows.len()))?;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("C={}: {:.3}", r.n_candidates, r.metrics.hit_rate_at_1))
        .collect();
    for r in &rows {
        check(
            r.metrics.hit_rate_at_1 <= r.metrics.valid_ratio,
            "hit rate exceeded valid ratio in a sweep row",
        )?;
    }
    Ok(format!(
        "disjoint split ({} bundles dropped); sweep {}",
        splits.dropped,
        summary.join(", ")
    ))
}

fn criterion_12() -> CriterionResult {
    let run_once = |dir: &std::path::Path| -> Result<(), String> {
        let p = small_pipeline(LearnabilityMode::TextSufficient, 112)?;
        let cfg = TrainConfig {
            sample_count: 48,
            valid_count: 8,
            max_epochs: 2,
            n_candidates: 5,
            ..TrainConfig::stage_defaults(Stage::S1, PromptMode::text_only(), 112)
        };
        let data = StageData::sample(&p.world, &p.splits, &cfg).map_err(|e| e.to_string())?;
        let (adapters, report) =
            run_stage1(&p.state, &env(&p), &data, &cfg).map_err(|e| e.to_string())?;
        let config_json = serde_json::to_string(&cfg).map_err(|e| e.to_string())?;
        let manifest = RunManifest::new("train", None, &config_json, 112);
        write_report(dir, &manifest, &report).map_err(|e| e.to_string())?;
        write_losses_csv(dir, &[&report]).map_err(|e| e.to_string())?;
        bundle_forge_core::checkpoint::save(&adapters, &dir.join("adapters.ckpt"))
            .map_err(|e| e.to_string())?;
        bundle_forge_core::checkpoint::save(&p.state.theta_f, &dir.join("theta_f.ckpt"))
            .map_err(|e| e.to_string())?;
        Ok(())
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir1 = tmp.path().join("run1");
    let dir2 = tmp.path().join("run2");
    std::fs::create_dir_all(&dir1).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&dir2).map_err(|e| e.to_string())?;
    run_once(&dir1)?;
    run_once(&dir2)?;
    for file in ["report.json", "losses.csv", "adapters.ckpt", "theta_f.ckpt"] {
        let a = std::fs::read(dir1.join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir2.join(file)).map_err(|e| e.to_string())?;
        check(a == b, format!("{file} differs between identical runs"))?;
    }
    // Checkpoint cross-check: reloading reproduces the exact checksum.
    let p = small_pipeline(LearnabilityMode::TextSufficient, 112)?;
    let mut theta = p.state.theta_f.clone();
    let original = checksum(&theta);
    bundle_forge_core::checkpoint::save(&theta, &tmp.path().join("t.ckpt"))
        .map_err(|e| e.to_string())?;
    for (_, m) in theta.tensors_mut() {
        m.fill(0.0);
    }
    bundle_forge_core::checkpoint::load_into(&mut theta, &tmp.path().join("t.ckpt"))
        .map_err(|e| e.to_string())?;
    check(
        checksum(&theta) == original,
        "checkpoint reload changed the checksum",
    )?;
    Ok("two identical-manifest runs produced byte-identical reports, losses, and checkpoints".into())
}
