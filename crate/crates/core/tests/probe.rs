//! Manual probe (ignored by default): minimal matching-task learnability.

use bundle_forge_core::dataset::{generate_world, GenConfig, World};
use bundle_forge_core::rng::substream;
use bundle_forge_core::tinylm::*;
use bundle_forge_core::linalg::Mat;
use rand::Rng as _;

fn probe_world(n_items: usize, n_categories: usize) -> World {
    generate_world(
        &GenConfig {
            n_items,
            n_bundles: 20,
            n_users: 2,
            n_categories,
            interactions_per_user: 2,
            ..GenConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
#[ignore]
fn minimal_matching_probe() {
    let world = probe_world(30, 3);
    // Drill generator: "seed items : 1 . <a> candidate items : A . <x> B . <y> answer : L"
    let mut rng = substream(2, "probe");
    let mut make_drill = |rng: &mut bundle_forge_core::rng::Rng| -> (String, usize) {
        let items = &world.items;
        let n = items.len();
        loop {
            let seed_item = rng.gen_range(0..n);
            let pos_cands: Vec<usize> = (0..n)
                .filter(|&i| {
                    i != seed_item
                        && items[i].latent_category == items[seed_item].latent_category
                })
                .collect();
            let neg_cands: Vec<usize> = (0..n)
                .filter(|&i| items[i].latent_category != items[seed_item].latent_category)
                .collect();
            if pos_cands.is_empty() || neg_cands.is_empty() {
                continue;
            }
            let pos = pos_cands[rng.gen_range(0..pos_cands.len())];
            let neg = neg_cands[rng.gen_range(0..neg_cands.len())];
            let pos_idx = rng.gen_range(0..2usize);
            let (a, b) = if pos_idx == 0 { (pos, neg) } else { (neg, pos) };
            let line = format!(
                "seed items : 1 . {} candidate items : A . {} B . {} answer : {}",
                items[seed_item].text,
                items[a].text,
                items[b].text,
                (b'A' + pos_idx as u8) as char
            );
            return (line, pos_idx);
        }
    };
    let corpus: Vec<String> = (0..1000).map(|_| make_drill(&mut rng).0).collect();
    let vocab = Vocabulary::build(&corpus, &["answer :"], 1).unwrap();
    println!("vocab {}", vocab.len());
    let config = LmConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        n_heads: 4,
        n_blocks: 2,
        ff_mult: 4,
        context: 64,
    };

    for epochs in [32usize] {
        let pcfg = PretrainConfig {
            epochs,
            peak_lr: 1e-3,
            seed: 3,
            ..PretrainConfig::default()
        };
        let (lm, report) = pretrain_base(&corpus, &vocab, config, &pcfg).unwrap();
        // Fresh eval drills.
        let mut eval_rng = substream(99, "probe_eval");
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..200 {
            let (line, pos_idx) = make_drill(&mut eval_rng);
            // Strip the trailing answer letter; ask the model.
            let cut = line.rfind(" : ").unwrap() + 3;
            let prompt = &line[..cut];
            let mut ids = vec![BOS_ID];
            ids.extend(vocab.encode(prompt));
            let emb = lm.embed_tokens(&ids);
            let out = generate_answer(&lm, &vocab, &emb, None, 2).unwrap();
            if let Some(idx) = bundle_forge_core::prompting::parse_answer(&out, 2) {
                if idx == pos_idx {
                    hits += 1;
                }
            }
            total += 1;
        }
        println!(
            "epochs {epochs:>2}: ppl {:.2} -> {:.2}, drill hit rate {:.3}",
            report.heldout_ppl_before,
            report.heldout_ppl_after,
            hits as f64 / total as f64
        );
    }
}


/// Scale variant: 200 items, uniform vs clean negatives.
#[test]
#[ignore]
fn scaled_matching_probe() {
    for (name, n_items, n_cats, clean) in [
        ("200 items, 10 cats, clean negatives", 200, 10, true),
        ("200 items, 10 cats, uniform negatives", 200, 10, false),
        ("200 items, 16 cats, uniform negatives", 200, 16, false),
    ] {
        let world = probe_world(n_items, n_cats);
        let mut rng = substream(2, "probe");
        let items = world.items.clone();
        let n = items.len();
        let mut make_drill = |rng: &mut bundle_forge_core::rng::Rng| -> (String, usize) {
            loop {
                let seed_item = rng.gen_range(0..n);
                let pos_cands: Vec<usize> = (0..n)
                    .filter(|&i| {
                        i != seed_item
                            && items[i].latent_category == items[seed_item].latent_category
                    })
                    .collect();
                let neg_pool: Vec<usize> = if clean {
                    (0..n)
                        .filter(|&i| items[i].latent_category != items[seed_item].latent_category)
                        .collect()
                } else {
                    (0..n).filter(|&i| i != seed_item).collect()
                };
                if pos_cands.is_empty() || neg_pool.is_empty() {
                    continue;
                }
                let pos = pos_cands[rng.gen_range(0..pos_cands.len())];
                let neg = neg_pool[rng.gen_range(0..neg_pool.len())];
                if neg == pos {
                    continue;
                }
                let pos_idx = rng.gen_range(0..2usize);
                let (a, b) = if pos_idx == 0 { (pos, neg) } else { (neg, pos) };
                let line = format!(
                    "seed items : 1 . {} candidate items : A . {} B . {} answer : {}",
                    items[seed_item].text,
                    items[a].text,
                    items[b].text,
                    (b'A' + pos_idx as u8) as char
                );
                return (line, pos_idx);
            }
        };
        let corpus: Vec<String> = (0..2000).map(|_| make_drill(&mut rng).0).collect();
        let vocab = Vocabulary::build(&corpus, &["answer :"], 1).unwrap();
        let config = LmConfig {
            vocab_size: vocab.len(),
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_mult: 4,
            context: 64,
        };
        let pcfg = PretrainConfig {
            epochs: 24,
            peak_lr: 1e-3,
            seed: 3,
            ..PretrainConfig::default()
        };
        let (lm, report) = pretrain_base(&corpus, &vocab, config, &pcfg).unwrap();
        let mut eval_rng = substream(99, "probe_eval");
        let mut hits = 0usize;
        for _ in 0..200 {
            let (line, pos_idx) = make_drill(&mut eval_rng);
            let cut = line.rfind(" : ").unwrap() + 3;
            let mut ids = vec![BOS_ID];
            ids.extend(vocab.encode(&line[..cut]));
            let emb = lm.embed_tokens(&ids);
            let out = generate_answer(&lm, &vocab, &emb, None, 2).unwrap();
            if bundle_forge_core::prompting::parse_answer(&out, 2) == Some(pos_idx) {
                hits += 1;
            }
        }
        println!(
            "{name}: ppl {:.2} -> {:.2}, drill hit {:.3}",
            report.heldout_ppl_before,
            report.heldout_ppl_after,
            hits as f64 / 200.0
        );
    }
}
