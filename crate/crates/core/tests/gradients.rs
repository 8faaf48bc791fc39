use dra_core::model::{Head, Model, ModelConfig};
use dra_core::tasks::Example;
use dra_core::trainer::example_loss;
use dra_core::{Graph, Mode, PreservationPolicy, PruneMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(head: Head) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_seq_len: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 12,
        head,
        seed: 3,
    }
}

fn loss(m: &Model<f64>, ex: &Example, policy: &PreservationPolicy) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, loss, _) = example_loss(m, &mut g, ex, policy, Mode::Eval, 0.0, &mut rng).unwrap();
    let loss = loss.unwrap();
    let value = g.value(loss)[0];
    g.backward(loss).unwrap();
    let mut grads: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
    for (id, gr) in g.param_grads() {
        grads[id].copy_from_slice(gr);
    }
    (value, grads)
}

/// Worst relative error between backprop and central differences over a
/// few random entries of every parameter.
fn worst_error(config: ModelConfig, ex: &Example, policy: &PreservationPolicy) -> f64 {
    let mut m = Model::<f64>::init(config).unwrap();
    // Move gains and biases off their init values so every path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in m.params_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (_, analytic) = loss(&m, ex, policy);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for pi in 0..m.params().len() {
        for _ in 0..4 {
            let j = rng.random_range(0..m.params()[pi].data.len());
            let orig = m.params()[pi].data[j];
            m.params_mut()[pi].data[j] = orig + h;
            let up = loss(&m, ex, policy).0;
            m.params_mut()[pi].data[j] = orig - h;
            let down = loss(&m, ex, policy).0;
            m.params_mut()[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn language_model_gradient_full_rate() {
    let ex = Example::Lm {
        tokens: vec![1, 4, 2, 7, 3, 9, 0, 5, 6, 10],
        prompt_len: None,
        loss_start: 1,
    };
    let err = worst_error(micro(Head::LanguageModel), &ex, &PreservationPolicy::identity());
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn language_model_gradient_with_pruning_and_decode_tail() {
    let ex = Example::Lm {
        tokens: vec![1, 4, 2, 7, 3, 9, 0, 5, 6, 10, 2, 2],
        prompt_len: Some(9),
        loss_start: 3,
    };
    for mode in [PruneMode::Monotonic, PruneMode::Rescoring] {
        let policy = PreservationPolicy::new(0.6, 2).unwrap().with_mode(mode);
        let err = worst_error(micro(Head::LanguageModel), &ex, &policy);
        assert!(err < 1e-4, "{mode:?}: relative error {err}");
    }
}

#[test]
fn classifier_gradient() {
    let ex = Example::Class {
        tokens: vec![3, 1, 4, 1, 5, 9, 2, 6],
        label: 1,
    };
    let policy = PreservationPolicy::new(0.5, 2).unwrap();
    let err = worst_error(micro(Head::Classifier { n_classes: 3 }), &ex, &policy);
    assert!(err < 1e-4, "relative error {err}");
}
