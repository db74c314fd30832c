use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ragr_core::decode::{build_trie, recommend_top_k};
use ragr_core::genrec::{GenRecModel, ModelConfig};
use ragr_core::rqvae::{quantize, Codebook, RqVaeConfig, RqVaeModel, SemanticId, SidMap};
use ragr_core::sequence::{TokenId, TokenVocabulary};
use ragr_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEVELS: usize = 3;
const K: usize = 32;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

fn desk_model(vocab: usize) -> GenRecModel {
    GenRecModel::new(ModelConfig {
        vocab_size: vocab,
        d_model: 64,
        n_heads: 4,
        n_layers_enc: 2,
        n_layers_dec: 2,
        d_ff: 128,
        max_positions: 200,
        dropout: 0.0,
        seed: 1,
    })
    .unwrap()
}

fn catalog(rng: &mut ChaCha8Rng, n: usize) -> SidMap {
    let mut codes = BTreeSet::new();
    while codes.len() < n {
        codes.insert(
            (0..LEVELS)
                .map(|_| rng.random_range(0..K))
                .collect::<Vec<_>>(),
        );
    }
    codes
        .into_iter()
        .enumerate()
        .map(|(i, c)| (format!("i{i:04}"), SemanticId::with_disambig(c, 0)))
        .collect()
}

fn context(rng: &mut ChaCha8Rng, vocab: &TokenVocabulary, items: usize) -> Vec<TokenId> {
    let mut ctx = vec![1];
    for _ in 0..items {
        let sid =
            SemanticId::with_disambig((0..LEVELS).map(|_| rng.random_range(0..K)).collect(), 0);
        ctx.extend(vocab.item_tokens(&sid).unwrap());
    }
    ctx
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let books: Vec<Codebook> = (1..=LEVELS)
        .map(|l| Codebook::new(l, random_mat(&mut rng, K, 16)))
        .collect();
    let h: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("quantize M=3 K=32 d=16", |b| {
        b.iter(|| quantize(black_box(&books), black_box(&h)).unwrap())
    });
}

fn bench_tokenizer_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = RqVaeModel::new(
        RqVaeConfig {
            hidden: vec![64, 32],
            code_dim: 16,
            levels: LEVELS,
            codebook_size: K,
            ..RqVaeConfig::full_scale(32)
        },
        2,
    )
    .unwrap();
    let x = random_mat(&mut rng, 256, 32);
    c.bench_function("tokenizer loss+grad batch 256", |b| {
        b.iter(|| model.loss_and_grad(black_box(&x)).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = TokenVocabulary::new(LEVELS, K, 0).unwrap();
    let model = desk_model(vocab.vocab_size());
    let ctxs: Vec<Vec<TokenId>> = (0..32).map(|_| context(&mut rng, &vocab, 6)).collect();
    let target: Vec<TokenId> = vec![3, 40, 70, 99, 2];
    let batch: Vec<(&[TokenId], &[TokenId])> = ctxs
        .iter()
        .map(|c| (c.as_slice(), target.as_slice()))
        .collect();
    c.bench_function("sequence log-probs batch 32", |b| {
        b.iter(|| model.sequence_log_probs(black_box(&batch)).unwrap())
    });
}

fn bench_beam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vocab = TokenVocabulary::new(LEVELS, K, 0).unwrap();
    let trie = build_trie(&catalog(&mut rng, 500), &vocab).unwrap();
    let model = desk_model(vocab.vocab_size());
    let ctx = context(&mut rng, &vocab, 6);
    c.bench_function("constrained top-10 over 500 items", |b| {
        b.iter(|| recommend_top_k(&model, &trie, black_box(&ctx), 10).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_quantize, bench_tokenizer_step, bench_forward, bench_beam
}
criterion_main!(benches);
