//! Finite-difference checks of the tokenizer gradient against a surrogate
//! objective evaluated by a separate, loop-based implementation.

#[path = "support/rq_oracle.rs"]
mod rq_oracle;

use ragr_core::nn::Activation;
use ragr_core::rqvae::{RecTarget, RqVaeConfig, RqVaeModel};
use ragr_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(rec_target: RecTarget, activation: Activation, seed: u64) {
    let cfg = RqVaeConfig {
        input_dim: 5,
        hidden: vec![6, 4],
        code_dim: 3,
        levels: 3,
        codebook_size: 4,
        beta_commit: 0.25,
        rec_target,
        activation,
    };
    let mut model = RqVaeModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        for v in model.store.get_mut(id).value.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = Mat::from_vec(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (worst, gap) = rq_oracle::gradient_error(&mut model, &x, 1e-4, 1e-6);
    assert!(
        gap < 1e-10,
        "surrogate value differs from the loss by {gap}"
    );
    assert!(worst < 1e-4, "relative gradient error {worst}");
}

#[test]
fn input_target_gradient_matches_finite_differences() {
    for seed in 0..3 {
        check(RecTarget::Input, Activation::Silu, seed);
        check(RecTarget::Input, Activation::Gelu, seed + 10);
    }
}

#[test]
fn latent_target_gradient_matches_finite_differences() {
    for seed in 0..3 {
        check(RecTarget::Latent, Activation::Silu, seed);
    }
}

#[test]
fn codewords_without_selection_get_no_gradient() {
    let cfg = RqVaeConfig {
        input_dim: 4,
        hidden: vec![],
        code_dim: 2,
        levels: 2,
        codebook_size: 8,
        beta_commit: 0.25,
        rec_target: RecTarget::Input,
        activation: Activation::Relu,
    };
    let model = RqVaeModel::new(cfg, 3).unwrap();
    let x = Mat::from_vec(1, 4, vec![0.3, -0.2, 0.9, 0.1]);
    let h = model.encode(x.row(0)).unwrap();
    let q = model.quantize(&h).unwrap();
    let (_, grads) = model.loss_and_grad(&x).unwrap();
    for level in 1..=2 {
        let id = model.codebook_param(level);
        let p = model.store.ids().position(|i| i == id).unwrap();
        for k in 0..8 {
            let g = &grads.data[p][k * 2..k * 2 + 2];
            if k != q.codes[level - 1] {
                assert_eq!(g, &[0.0, 0.0], "level {level} codeword {k}");
            }
        }
    }
}
