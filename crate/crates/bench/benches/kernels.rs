//! Benchmarks for the hot numeric paths: graph propagation, fusion
//! forward/backward, and the LM forward pass.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use bundle_forge_core::fusion::{
    fuse_backward, fuse_forward, FusionConfig, FusionInputs, FusionParams,
};
use bundle_forge_core::linalg::Mat;
use bundle_forge_core::relational::{propagate, BipartiteGraph};
use bundle_forge_core::rng::substream;
use bundle_forge_core::tinylm::{BaseLm, LmConfig, LoraAdapters, LoraConfig};

fn bench_propagate(c: &mut Criterion) {
    let mut rng = substream(1, "bench");
    let mut edges = Vec::new();
    for l in 0..100u32 {
        for r in 0..200u32 {
            if (l as u64 * 7 + r as u64 * 13) % 17 == 0 {
                edges.push((l, r));
            }
        }
    }
    let graph = BipartiteGraph::from_edges(100, 200, edges).unwrap();
    let left = Mat::randn(100, 64, 0.1, &mut rng);
    let right = Mat::randn(200, 64, 0.1, &mut rng);
    c.bench_function("propagate_k2_100x200_d64", |b| {
        b.iter(|| propagate(&graph, &left, &right, 2).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let mut rng = substream(2, "bench");
    let config = FusionConfig {
        d_media: 16,
        d_relational: 64,
        d: 64,
        d_hidden: 64,
        d_lm: 64,
        k_layers: 2,
    };
    let params = FusionParams::init(config, &mut rng);
    let inputs = FusionInputs {
        media: Mat::randn(1, 16, 1.0, &mut rng).data,
        user: Mat::randn(1, 64, 1.0, &mut rng).data,
        bundle: Mat::randn(1, 64, 1.0, &mut rng).data,
    };
    c.bench_function("fuse_forward_d64", |b| {
        b.iter(|| fuse_forward(&inputs, &params).unwrap())
    });
    let upstream = vec![0.5; 64];
    c.bench_function("fuse_backward_d64", |b| {
        b.iter_batched(
            || fuse_forward(&inputs, &params).unwrap().1,
            |cache| {
                let mut grads = params.zeros_like();
                fuse_backward(&params, &cache, &upstream, &mut grads).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_lm_forward(c: &mut Criterion) {
    let mut rng = substream(3, "bench");
    let config = LmConfig {
        vocab_size: 256,
        d_model: 64,
        n_heads: 4,
        n_blocks: 2,
        ff_mult: 4,
        context: 512,
    };
    let lm = BaseLm::init(config, &mut rng).unwrap();
    let adapters = LoraAdapters::init(&config, LoraConfig::default(), &mut rng).unwrap();
    let emb = Mat::randn(128, 64, 0.1, &mut rng);
    c.bench_function("lm_forward_t128_d64", |b| {
        b.iter(|| lm.forward(&emb, Some(&adapters)).unwrap())
    });
    c.bench_function("lm_forward_backward_t128_d64", |b| {
        b.iter(|| {
            let cache = lm.forward(&emb, Some(&adapters)).unwrap();
            let targets = [(126usize, 5u32), (127usize, 3u32)];
            let (_, rows) =
                bundle_forge_core::tinylm::answer_loss_and_grad(&lm, &cache, &targets).unwrap();
            lm.backward(&cache, Some(&adapters), &rows).unwrap()
        })
    });
}

criterion_group!(benches, bench_propagate, bench_fusion, bench_lm_forward);
criterion_main!(benches);
