use std::sync::Arc;

use rand::Rng;

use mmib::datasets::{sample_batch, Scenario, World, WorldConfig};
use mmib::encoders::{EncoderStack, Mlp, MlpConfig};
use mmib::losses::LossConfig;
use mmib::metrics::{cka, Kernel};
use mmib::seed::rng;
use mmib::training::{
    adam_step, evaluate, loss_and_grads, train, train_with_log, AdamParams, AdamState, EvalOptions, TrainConfig,
};
use mmib::Error;

fn codebook() -> Arc<World> {
    Arc::new(World::build(&WorldConfig::default_codebook(0)).unwrap())
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        samples_per_epoch: 2560,
        eval_samples: 512,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut w = vec![0.3, -1.2];
    let mut state = AdamState::new([2]);
    adam_step(&mut [&mut w[..]], &[&[0.0, 0.0][..]], &mut state, 0.1, &AdamParams::default()).unwrap();
    assert_eq!(w, vec![0.3, -1.2]);
}

#[test]
fn adam_first_step_on_a_square() {
    // f(w) = w², w = 1: m̂ = 2, v̂ = 4, Δ = 0.1 · 2 / (2 + ε)
    let mut w = vec![1.0f64];
    let mut state = AdamState::new([1]);
    adam_step(&mut [&mut w[..]], &[&[2.0][..]], &mut state, 0.1, &AdamParams::default()).unwrap();
    assert!((w[0] - (1.0 - 0.2 / (2.0 + 1e-8))).abs() < 1e-15);
    assert!((w[0] - 0.9).abs() < 1e-8);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut w = vec![1.0f64];
    let mut state = AdamState::new([1]);
    let r = adam_step(&mut [&mut w[..]], &[&[f64::NAN][..]], &mut state, 0.1, &AdamParams::default());
    assert!(matches!(r, Err(Error::Numeric { .. })));
    assert_eq!(w, vec![1.0]);
}

#[test]
fn learning_rate_decays_in_steps() {
    let cfg = TrainConfig::default();
    for epoch in 0..70 {
        let expected = 1e-3 * 0.3f64.powi((epoch / 20) as i32);
        assert_eq!(cfg.learning_rate_at(epoch), expected);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let scenario = Scenario::withholding(codebook(), &["f0"]).unwrap();
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { loss: LossConfig { beta: -1.0, ..LossConfig::default() }, ..TrainConfig::default() },
        TrainConfig { loss: LossConfig { temperature_init: 0.0, ..LossConfig::default() }, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(train::<f64>(&cfg, &scenario), Err(Error::Config(_))));
    }
}

#[test]
fn loss_decreases_over_early_epochs() {
    let scenario = Scenario::withholding(codebook(), &[]).unwrap();
    let histories: Vec<Vec<f64>> = (0..3)
        .map(|seed| {
            let mut cfg = quick(5, seed);
            cfg.loss.beta = 0.0;
            let mut losses = Vec::new();
            train_with_log::<f64>(&cfg, &scenario, |r| losses.push(r.mean_loss)).unwrap();
            losses
        })
        .collect();
    let median: Vec<f64> = (0..5)
        .map(|e| {
            let mut v: Vec<f64> = histories.iter().map(|h| h[e]).collect();
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    assert!(median.windows(2).all(|w| w[1] < w[0]), "{median:?}");
}

#[test]
fn identical_runs_are_bit_identical() {
    let scenario = Scenario::withholding(codebook(), &["f2"]).unwrap();
    let cfg = quick(2, 5);
    let a = train::<f64>(&cfg, &scenario).unwrap();
    let b = train::<f64>(&cfg, &scenario).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.report, b.report);
    assert!(a.report.in_range());
}

#[test]
fn trainable_temperature_drifts() {
    let scenario = Scenario::withholding(codebook(), &["f0"]).unwrap();
    let mut cfg = quick(50, 0);
    cfg.loss.beta = 0.0;
    cfg.loss.temperature_trainable = true;
    let run = train::<f64>(&cfg, &scenario).unwrap();
    assert!(run.temperature_history.iter().all(|&t| t > 0.0));
    let last = *run.temperature_history.last().unwrap();
    assert!((last - 0.07).abs() > 1e-4, "final temperature {last}");
}

#[test]
fn fixed_temperature_does_not_move() {
    let scenario = Scenario::withholding(codebook(), &["f0"]).unwrap();
    let mut cfg = quick(2, 0);
    cfg.loss.temperature_trainable = false;
    let run = train::<f64>(&cfg, &scenario).unwrap();
    assert!(run.temperature_history.iter().all(|&t| (t - 0.07).abs() < 1e-15));
}

#[test]
fn full_step_gradient_matches_finite_differences() {
    let world = Arc::new(World::build(&WorldConfig::minisprites(0)).unwrap());
    let scenario = Scenario::withholding(world, &["posX"]).unwrap();
    let cfg = TrainConfig { repr_dim: 8, alpha_hidden: vec![16, 16], beta_hidden: vec![16], ..TrainConfig::default() };
    let mut stack = EncoderStack::<f64>::init(
        &cfg.alpha_config(&scenario),
        &cfg.beta_config(&scenario),
        0.2,
        true,
        3,
    )
    .unwrap();
    let batch = sample_batch(&scenario, 32, 4).unwrap();
    let loss = LossConfig { beta: 0.3, temperature_init: 0.2, temperature_trainable: true, ..LossConfig::default() };
    let analytic = loss_and_grads(&stack, &batch, &loss).unwrap().grads;

    let mut r = rng(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let tensors = analytic.len();
    for (t, grad) in analytic.iter().enumerate() {
        for _ in 0..5 {
            let k = r.random_range(0..grad.len());
            let at = |delta: f64, stack: &mut EncoderStack<f64>| {
                *param(stack, t, tensors, k) += delta;
                let v = loss_and_grads(stack, &batch, &loss).unwrap().loss;
                *param(stack, t, tensors, k) -= delta;
                v
            };
            let fd = (at(h, &mut stack) - at(-h, &mut stack)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()) + 1e-3);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "{worst:e}");
}

/// Element `k` of trainable tensor `t`, in gradient order.
fn param(stack: &mut EncoderStack<f64>, t: usize, tensors: usize, k: usize) -> &mut f64 {
    if t == tensors - 1 {
        return &mut stack.log_temperature;
    }
    let na = 2 * stack.alpha.layers().len();
    let (mlp, t) = if t < na { (&mut stack.alpha, t) } else { (&mut stack.beta, t - na) };
    let layer = &mut mlp.layers_mut()[t / 2];
    if t % 2 == 0 {
        &mut layer.weight.data_mut()[k]
    } else {
        &mut layer.bias.data_mut()[k]
    }
}

#[test]
fn untrained_encoders_are_barely_aligned() {
    let scenario = Scenario::withholding(codebook(), &["f1"]).unwrap();
    let cfg = TrainConfig::default();
    let stack =
        EncoderStack::<f64>::init(&cfg.alpha_config(&scenario), &cfg.beta_config(&scenario), 0.07, false, 1).unwrap();
    let report = evaluate(&stack, &scenario, &EvalOptions { n: 1024, ..EvalOptions::default() }).unwrap();
    assert!(report.cka < 0.3, "{}", report.cka);
    assert!(report.in_range());
}

#[test]
fn identical_encoders_on_identical_inputs_align_perfectly() {
    let mlp = Mlp::<f64>::init(&MlpConfig::with_depth(6, 3, 16, 4), 2).unwrap();
    let mut r = rng(3);
    let x = mmib::autodiff::Tensor::matrix(200, 6, (0..1200).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let z = mlp.encode(&x).unwrap();
    assert!((cka(&z, &mlp.encode(&x).unwrap(), Kernel::Linear).unwrap() - 1.0).abs() < 1e-12);
}
