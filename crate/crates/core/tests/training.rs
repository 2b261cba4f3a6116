mod common;

use common::toy::{worst_rel_err, Policy};
use common::*;
use dtnet_core::training::{
    advantages, ce_loss, clip_grad_norm, scst_surrogate, sequence_log_probs, token_accuracy, Adam, Phase, Schedule,
};
use dtnet_core::vocab::{CaptionBatch, EOS};
use dtnet_tensor::gradcheck::check_params;
use dtnet_tensor::{Graph, ParamStore, RngState, Tensor};
use proptest::prelude::*;

fn random_captions(rng: &mut RngState, n: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..rng.below(5)).map(|_| 4 + rng.below(vocab - 4)).collect())
        .collect()
}

fn ce_value(logits: &Tensor<f64>, batch: &CaptionBatch) -> f64 {
    let g = Graph::no_grad();
    ce_loss(g.constant(logits.clone()), batch).unwrap().item()
}

#[test]
fn uniform_logits_cost_log_vocab_per_token() {
    let batch = CaptionBatch::from_captions(&[vec![0, 1]]);
    let loss = ce_value(&Tensor::zeros(&[1, 3, 4]), &batch);
    assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let v = 9;
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let mut caps = random_captions(&mut rng, 4, v);
        caps[0] = vec![5, 6, 7, 8];
        let batch = CaptionBatch::from_captions(&caps);
        let raw = random(&mut rng, &[4, batch.steps, v]);
        let logits = Tensor::new(raw.shape(), raw.data().iter().map(|x| 3.0 * x).collect()).unwrap();
        let mut want = 0.0;
        for (b, cap) in caps.iter().enumerate() {
            let targets: Vec<usize> = cap.iter().copied().chain([EOS]).collect();
            for (t, &y) in targets.iter().enumerate() {
                let row = &logits.data()[(b * batch.steps + t) * v..][..v];
                want -= softmax(row)[y].ln();
            }
        }
        want /= caps.len() as f64;
        assert!((ce_value(&logits, &batch) - want).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn all_padding_batch_is_rejected() {
    let batch = CaptionBatch {
        inputs: vec![0; 2],
        targets: vec![0; 2],
        lengths: vec![0],
        batch: 1,
        steps: 2,
    };
    let g = Graph::no_grad();
    assert!(ce_loss(g.constant(Tensor::<f64>::zeros(&[1, 2, 4])), &batch).is_err());
}

#[test]
fn token_accuracy_counts_only_valid_positions() {
    let batch = CaptionBatch::from_captions(&[vec![3], vec![]]);
    // Row 0 predicts token 3 then EOS; row 1 predicts 0 at its only valid step.
    let mut data = vec![0.0; 2 * 2 * 4];
    data[3] = 1.0;
    data[4 + EOS] = 1.0;
    data[8] = 1.0;
    let logits = Tensor::new(&[2, 2, 4], data).unwrap();
    assert_eq!(token_accuracy(&logits, &batch), (2, 3));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let v = 6;
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let caps = random_captions(&mut rng, 4, v);
        let batch = CaptionBatch::from_captions(&caps);
        let rewards: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 2.0)).collect();
        let mut store = ParamStore::new();
        let id = store.add("logits", random(&mut rng, &[4, batch.steps, v])).unwrap();

        let ce = check_params(&mut store, None, |g, s| ce_loss(g.param(s, id), &batch).map_err(te)).unwrap();
        assert_grad(ce, &format!("cross-entropy seed {seed}"));

        let seq = check_params(&mut store, None, |g, s| {
            let lp = sequence_log_probs(g.param(s, id), &batch).map_err(te)?;
            Ok(lp.mul(g.constant(Tensor::from_f64(&[4], &rewards)?))?.sum())
        })
        .unwrap();
        assert_grad(seq, &format!("sequence log-prob seed {seed}"));

        let scst = check_params(&mut store, None, |g, s| {
            let lp = sequence_log_probs(g.param(s, id), &batch).map_err(te)?;
            scst_surrogate(lp, &rewards, 2).map_err(te)
        })
        .unwrap();
        assert_grad(scst, &format!("scst surrogate seed {seed}"));
    }
}

fn surrogate_grad(logits: &Tensor<f64>, batch: &CaptionBatch, rewards: &[f64], k: usize) -> Vec<f64> {
    let g = Graph::new();
    let x = g.leaf(logits.clone());
    let lp = sequence_log_probs(x, batch).unwrap();
    g.backward(scst_surrogate(lp, rewards, k).unwrap()).unwrap();
    g.grad(x).unwrap().data().to_vec()
}

#[test]
fn two_sequence_advantages_are_plus_minus_half() {
    assert_eq!(advantages(&[1.0, 0.0], 2).unwrap(), [0.5, -0.5]);
    assert!(advantages(&[1.0], 1).is_err());
    assert!(advantages(&[1.0, 2.0, 3.0], 2).is_err());
}

#[test]
fn surrogate_rejects_mismatched_rewards() {
    let g = Graph::<f64>::no_grad();
    let lp = g.constant(Tensor::zeros(&[4]));
    assert!(scst_surrogate(lp, &[1.0, 2.0], 2).is_err());
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = ParamStore::new();
    let id = store.add("x", random(&mut RngState::new(1), &[5])).unwrap();
    let before = store.value(id).clone();
    let mut opt = Adam::new(&store);
    for _ in 0..3 {
        opt.update(&mut store, 0.1).unwrap();
    }
    assert_eq!(store.value(id), &before);
}

#[test]
fn first_adam_step_moves_by_learning_rate_against_the_sign() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[4], vec![0.5, -0.5, 2.0, 0.0]).unwrap()).unwrap();
    let grad: [f64; 4] = [3.0, -0.01, -7.0, 1e-3];
    store.iter_mut().next().unwrap().grad = Tensor::new(&[4], grad.to_vec()).unwrap();
    let before = store.value(id).data().to_vec();
    let mut opt = Adam::new(&store);
    let lr = 1e-2;
    opt.update(&mut store, lr).unwrap();
    for ((a, b), g) in store.value(id).data().iter().zip(&before).zip(grad) {
        assert!((a - b + lr * g.signum()).abs() < 1e-6 * lr.max(1.0), "{a} from {b}");
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let id = store.add("x", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
    let mut opt = Adam::new(&store);
    for _ in 0..100 {
        let x = store.value(id).data()[0];
        store.iter_mut().next().unwrap().grad = Tensor::new(&[1], vec![2.0 * x]).unwrap();
        opt.update(&mut store, 0.1).unwrap();
    }
    let x = store.value(id).data()[0];
    assert!(x.abs() < 1e-2, "x = {x}");
}

#[test]
fn adam_rejects_non_finite_gradients_and_foreign_stores() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
    let mut opt = Adam::new(&store);
    store.iter_mut().next().unwrap().grad = Tensor::new(&[1], vec![f64::NAN]).unwrap();
    assert!(opt.update(&mut store, 0.1).is_err());
    let mut other: ParamStore<f64> = ParamStore::new();
    assert!(opt.update(&mut other, 0.1).is_err());
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    store.add("b", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
    let grads = [vec![3.0, 0.0], vec![4.0]];
    for (p, g) in store.iter_mut().zip(&grads) {
        p.grad = Tensor::new(&[g.len()], g.clone()).unwrap();
    }
    assert!((clip_grad_norm(&mut store, 10.0) - 5.0).abs() < 1e-12);
    assert!((clip_grad_norm(&mut store, 1.0) - 5.0).abs() < 1e-12);
    let after: f64 = store.iter().flat_map(|(_, p)| p.grad.data().to_vec()).map(|g| g * g).sum();
    assert!((after.sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn schedule_milestones() {
    let s = Schedule::default();
    let ce: Vec<f64> = [0, 3, 4, 9, 10, 11, 12, 30].iter().map(|&e| s.lr(Phase::Ce, e)).collect();
    assert_close(&ce, &[2.5e-5, 1e-4, 1e-4, 1e-4, 2e-5, 2e-5, 4e-6, 4e-6], 1e-18);
    let scst: Vec<f64> = [0, 34, 35, 40, 45, 50].iter().map(|&e| s.lr(Phase::Scst, e)).collect();
    assert_close(&scst, &[5e-6, 5e-6, 2.5e-6, 5e-7, 2.5e-7, 5e-8], 1e-20);
    let scaled = Schedule { scale: 10.0, ..s };
    assert!((scaled.lr(Phase::Ce, 5) - 1e-3).abs() < 1e-15);
}

#[test]
fn self_critical_estimate_has_the_baseline_bias_and_nothing_else() {
    // The mean baseline includes each sequence's own reward, so the estimate
    // is (k-1)/k times the policy gradient in expectation.
    let policy = Policy::new(11);
    let exact = policy.exact_gradient();
    let k = 4;
    let mean = policy.mean_estimate(k, 20_000, &mut RngState::new(5));
    let rescaled: Vec<f64> = mean.iter().map(|m| m * k as f64 / (k - 1) as f64).collect();
    let (err, checked) = worst_rel_err(&rescaled, &exact, 1e-2);
    assert!(checked > 3);
    assert!(err < 0.1, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn advantages_sum_to_zero_per_group(rewards in prop::collection::vec(-5.0f64..5.0, 1..5), k in 2usize..5) {
        let r: Vec<f64> = rewards.iter().cycle().take(k * rewards.len()).copied().collect();
        for group in advantages(&r, k).unwrap().chunks(k) {
            prop_assert!(group.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn surrogate_gradient_ignores_a_shared_reward_shift(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = RngState::new(seed);
        let caps = random_captions(&mut rng, 6, 7);
        let batch = CaptionBatch::from_captions(&caps);
        let logits = random(&mut rng, &[6, batch.steps, 7]);
        let rewards: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let a = surrogate_grad(&logits, &batch, &rewards, 3);
        let b = surrogate_grad(&logits, &batch, &shifted, 3);
        prop_assert!(max_abs_diff(&a, &b) < 1e-6);
    }
}
