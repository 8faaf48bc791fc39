mod common;

use common::{closed_form_param_count, Reference};
use dra_core::model::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Head, Model, ModelConfig};
use dra_core::policy::{planned_counts, Pins};
use dra_core::{Error, ForwardOptions, PreservationPolicy, PruneMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(head: Head) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        max_seq_len: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_mlp: 128,
        head,
        seed: 3,
    }
}

fn six_layer() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        max_seq_len: 128,
        d_model: 16,
        n_layers: 6,
        n_heads: 2,
        d_mlp: 32,
        head: Head::LanguageModel,
        seed: 1,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn alpha(a: f64) -> PreservationPolicy {
    PreservationPolicy::new(a, 5).unwrap()
}

#[test]
fn parameter_count_matches_closed_form() {
    let m = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    assert_eq!(m.param_count(), closed_form_param_count(64, 64, 32, 2, 128, None));
    assert_eq!(m.param_count(), 29568);
    let m = Model::<f32>::init(micro(Head::Classifier { n_classes: 3 })).unwrap();
    assert_eq!(m.param_count(), closed_form_param_count(64, 64, 32, 2, 128, Some(3)));
}

#[test]
fn init_is_seeded() {
    let a = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    let b = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    let c = Model::<f32>::init(micro(Head::LanguageModel).with_seed(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.checksum(), c.checksum());
    let ln = a.params().iter().find(|p| p.name == "ln_f.b").unwrap();
    assert!(ln.data.iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = micro(Head::LanguageModel);
    c.n_heads = 5;
    assert!(matches!(Model::<f32>::init(c), Err(Error::Config { .. })));
    let mut c = micro(Head::LanguageModel);
    c.d_model = 0;
    assert!(Model::<f32>::init(c).is_err());
}

#[test]
fn full_rate_matches_reference_f64() {
    let m = Model::<f64>::init(micro(Head::LanguageModel)).unwrap();
    let r = Reference::new(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [1, 2, 7, 30] {
        let t = random_tokens(&mut rng, n, 64);
        let out = m.forward(&t, &PreservationPolicy::identity(), &ForwardOptions::eval()).unwrap();
        let want = r.logits(&t);
        assert_eq!(out.positions, (0..n).collect::<Vec<_>>());
        for (row, w) in want.iter().enumerate() {
            for (k, &v) in w.iter().enumerate() {
                assert!((out.logits[row * 64 + k] - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn classifier_matches_reference_and_handles_one_token() {
    let m = Model::<f64>::init(micro(Head::Classifier { n_classes: 3 })).unwrap();
    let r = Reference::new(&m);
    let t = [5, 9, 11, 2];
    let out = m.forward(&t, &PreservationPolicy::identity(), &ForwardOptions::eval()).unwrap();
    for (a, b) in out.logits.iter().zip(&r.logits(&t)[0]) {
        assert!((a - b).abs() < 1e-12);
    }
    for a in [0.02, 0.3, 1.0] {
        let out = m.forward(&[7], &alpha(a), &ForwardOptions::eval()).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.trace.counts(), vec![1, 1, 1]);
    }
}

#[test]
fn trace_counts_follow_plan() {
    let m = Model::<f32>::init(six_layer()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_tokens(&mut rng, 100, 50);
    let out = m.forward(&t, &alpha(0.3), &ForwardOptions::eval()).unwrap();
    let counts = out.trace.counts();
    assert_eq!(&counts[..6], &[100, 30, 9, 5, 5, 5]);
    assert_eq!(counts, planned_counts(100, 6, &alpha(0.3)));
    assert_eq!(out.trace.n_layers(), 6);
    assert!(out.trace.is_subset_chain());
    // LM logits cover exactly the survivors, first and last pinned
    assert_eq!(out.logits.len(), 5 * 50);
    assert_eq!(out.positions[0], 0);
    assert_eq!(*out.positions.last().unwrap(), 99);
}

#[test]
fn classifier_pins_only_last() {
    let mut c = six_layer();
    c.head = Head::Classifier { n_classes: 2 };
    let m = Model::<f32>::init(c).unwrap();
    let t: Vec<u32> = (0..40).map(|i| i % 50).collect();
    let out = m.forward(&t, &alpha(0.1), &ForwardOptions::eval()).unwrap();
    assert!(out.trace.rows()[6][39]);
    let with_first = m
        .forward(&t, &alpha(0.1).with_pins(Pins { first: true, last: true }), &ForwardOptions::eval())
        .unwrap();
    assert!(with_first.trace.rows()[6][0]);
}

#[test]
fn over_length_input_rejected() {
    let m = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    let t = vec![1u32; 65];
    assert!(matches!(
        m.forward(&t, &alpha(1.0), &ForwardOptions::eval()),
        Err(Error::SequenceTooLong { len: 65, max: 64 })
    ));
    assert!(m.forward(&[], &alpha(1.0), &ForwardOptions::eval()).is_err());
    assert!(m.forward(&[64], &alpha(1.0), &ForwardOptions::eval()).is_err());
}

#[test]
fn tight_tau_with_pins_surfaces_select_error() {
    let m = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    let p = PreservationPolicy::new(0.02, 1).unwrap();
    let t: Vec<u32> = (0..20).collect();
    assert!(matches!(
        m.forward(&t, &p, &ForwardOptions::eval()),
        Err(Error::BudgetTooSmall { n_keep: 1, pinned: 2 })
    ));
}

#[test]
fn counted_macs_equal_analytic() {
    let m = Model::<f32>::init(six_layer()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for a in [0.02, 0.3, 0.77, 1.0] {
        let t = random_tokens(&mut rng, 57, 50);
        let out = m.forward(&t, &alpha(a), &ForwardOptions::eval()).unwrap();
        assert_eq!(out.cost.macs_counted, out.cost.macs_analytic);
        let planned = dra_core::cost::analytic_macs(&m.config().arch(), 57, &alpha(a));
        assert_eq!(out.cost.macs_counted, planned);
    }
}

#[test]
fn rescoring_keeps_budgets_and_can_reactivate() {
    let mut m = Model::<f32>::init(six_layer()).unwrap();
    // peaky attention so rankings differ between layers
    for p in m.params_mut().iter_mut().filter(|p| p.name.ends_with("w_qkv")) {
        p.data.iter_mut().for_each(|v| *v *= 40.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reactivated = false;
    for _ in 0..20 {
        let t = random_tokens(&mut rng, 60, 50);
        let p = alpha(0.5).with_mode(PruneMode::Rescoring);
        let out = m.forward(&t, &p, &ForwardOptions::eval()).unwrap();
        assert_eq!(out.trace.counts(), planned_counts(60, 6, &p));
        assert_eq!(out.cost.macs_counted, out.cost.macs_analytic);
        reactivated |= !out.trace.is_subset_chain();
    }
    assert!(reactivated, "random weights never re-selected a pruned position");
    let t = random_tokens(&mut rng, 30, 50);
    let full = m.forward(&t, &PreservationPolicy::identity(), &ForwardOptions::eval()).unwrap();
    let res = m
        .forward(&t, &PreservationPolicy::identity().with_mode(PruneMode::Rescoring), &ForwardOptions::eval())
        .unwrap();
    assert_eq!(full.logits, res.logits);
}

#[test]
fn generation_at_full_rate_matches_reference() {
    let m = Model::<f64>::init(micro(Head::LanguageModel)).unwrap();
    let r = Reference::new(&m);
    let prompt = [3, 14, 15, 9, 2, 6];
    let g = m.generate(&prompt, 8, &PreservationPolicy::identity()).unwrap();
    assert_eq!(g.tokens, r.greedy(&prompt, 8));
    assert_eq!(m.generate(&prompt, 0, &alpha(0.3)).unwrap().tokens, prompt);
}

#[test]
fn decode_active_set_grows_by_one() {
    let m = Model::<f32>::init(six_layer()).unwrap();
    let prompt: Vec<u32> = (0..40).map(|i| (i * 7 % 50) as u32).collect();
    let g = m.generate(&prompt, 6, &alpha(0.2)).unwrap();
    let base = planned_counts(40, 6, &alpha(0.2))[6];
    assert_eq!(g.final_active, (0..6).map(|k| base + k).collect::<Vec<_>>());
    assert!(matches!(m.generate(&prompt, 200, &alpha(0.2)), Err(Error::SequenceTooLong { .. })));
}

/// Teacher-forced decode rows equal step-by-step generation: decode
/// positions never change which prompt rows survive.
#[test]
fn prefix_mode_is_causal_in_the_tail() {
    let m = Model::<f64>::init(six_layer()).unwrap();
    let prompt: Vec<u32> = (0..30).map(|i| (i * 11 % 50) as u32).collect();
    let p = alpha(0.3);
    let g = m.generate(&prompt, 5, &p).unwrap();
    let opts = ForwardOptions::eval().with_prompt_len(prompt.len());
    let full = m.forward(&g.tokens[..g.tokens.len() - 1], &p, &opts).unwrap();
    let rows = full.positions.len();
    for k in 0..5 {
        let row = rows - 5 + k;
        let logits = &full.logits[row * 50..(row + 1) * 50];
        assert_eq!(dra_core::model::argmax(logits) as u32, g.tokens[prompt.len() + k]);
    }
    let prefill = m.forward(&prompt, &p, &ForwardOptions::eval()).unwrap();
    for l in 0..=6 {
        assert_eq!(&full.trace.rows()[l][..30], &prefill.trace.rows()[l][..]);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::<f32>::init(micro(Head::Classifier { n_classes: 2 })).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dra");
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DRA1");
}

#[test]
fn checkpoint_corruption_detected() {
    let m = Model::<f32>::init(micro(Head::LanguageModel)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::Checkpoint(_))));
    assert!(matches!(read_checkpoint::<f32, _>(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
    let mut long = buf.clone();
    long.push(0);
    assert!(read_checkpoint::<f32, _>(&long[..]).is_err());
    let len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let json = String::from_utf8(buf[8..8 + len].to_vec()).unwrap();
    let tampered = json.replace("\"n_heads\":4", "\"n_heads\":3");
    assert_ne!(tampered, json);
    let mut bad = b"DRA1".to_vec();
    bad.extend((tampered.len() as u32).to_le_bytes());
    bad.extend(tampered.as_bytes());
    bad.extend(&buf[8 + len..]);
    assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::Config { .. })));
}

#[test]
fn initial_loss_near_uniform() {
    let m = Model::<f32>::init(ModelConfig::gpt2_nano()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_tokens(&mut rng, 64, 256);
    let out = m.forward(&t, &PreservationPolicy::identity(), &ForwardOptions::eval()).unwrap();
    let mut nll = 0.0;
    for r in 0..63 {
        let row: Vec<f64> = out.logits[r * 256..(r + 1) * 256].iter().map(|&v| v as f64).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        nll += lse - row[t[r + 1] as usize];
    }
    let mean = nll / 63.0;
    let ln_v = (256f64).ln();
    assert!((mean - ln_v).abs() / ln_v < 0.05, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_finite(a in 0.02f64..=1.0, n in 1usize..=64, seed in any::<u64>()) {
        let m = Model::<f32>::init(six_layer()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tokens(&mut rng, n, 50);
        let out = m.forward(&t, &alpha(a), &ForwardOptions::eval()).unwrap();
        prop_assert!(out.logits.iter().all(|v| v.is_finite()));
        prop_assert!(out.trace.counts().iter().all(|&c| c >= 1));
        prop_assert_eq!(out.trace.counts(), planned_counts(n, 6, &alpha(a)));
    }
}
