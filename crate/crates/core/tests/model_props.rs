use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repsim_core::nn::encoder::FEATURE_DIM;
use repsim_core::nn::{
    encoder_forward, BlockKind, Encoder, EncoderSpec, Initializer, PaddedBatch, ParamStore, SeqLayout, Tape,
};
use repsim_core::pretrain::objectives::{mpc_loss_with_targets, mpc_mask};
use repsim_core::pretrain::{Model, ModelConfig, SeqBatch, MODEL_NAMES};
use repsim_core::probe::{error_rate, eval_utterance_probe, mean_pool, LinearClassifier};
use repsim_core::RealMatrix;

const KINDS: [BlockKind; 6] = [
    BlockKind::Gru,
    BlockKind::BiGru,
    BlockKind::CausalAttention,
    BlockKind::BidirectionalAttention,
    BlockKind::CausalConv,
    BlockKind::Conv,
];

fn frames(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn encoder(kind: BlockKind, seed: u64) -> (EncoderSpec, ParamStore) {
    let spec = EncoderSpec { kind, layers: 2, hidden: 8, input_dim: 6 };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Encoder::new(spec, &mut Initializer { store: &mut store, rng: &mut rng }, "").unwrap();
    (spec, store)
}

fn run(spec: &EncoderSpec, store: &ParamStore, seqs: &[&RealMatrix]) -> Vec<RealMatrix> {
    encoder_forward(spec, store, &PaddedBatch::from_sequences(seqs).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_blocks_ignore_the_future(seed in any::<u64>(), len in 2usize..14, cut in 0usize..13, kind in 0usize..6) {
        let kind = KINDS[kind];
        let cut = cut % (len - 1);
        let (spec, store) = encoder(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = frames(len, 6, &mut rng);
        let mut y = x.clone();
        for t in cut + 1..len {
            y.row_mut(t).iter_mut().for_each(|v| *v += 1.0);
        }
        let (a, b) = (&run(&spec, &store, &[&x])[0], &run(&spec, &store, &[&y])[0]);
        if kind.is_causal() {
            prop_assert_eq!(a.slice_rows(0, cut + 1), b.slice_rows(0, cut + 1));
        } else {
            prop_assert!(a.slice_rows(0, cut + 1) != b.slice_rows(0, cut + 1), "{:?} should see the future", kind);
        }
    }

    #[test]
    fn batch_neighbours_and_padding_do_not_leak(seed in any::<u64>(), la in 1usize..10, lb in 1usize..16, kind in 0usize..6) {
        let (spec, store) = encoder(KINDS[kind], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (a, b) = (frames(la, 6, &mut rng), frames(lb, 6, &mut rng));
        let alone = &run(&spec, &store, &[&a])[0];
        let together = run(&spec, &store, &[&b, &a]);
        let diff = alone.data().iter().zip(together[1].slice_rows(0, la).data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12, "{:?}: {}", KINDS[kind], diff);
        for t in la..together[1].rows() {
            prop_assert!(together[1].row(t).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unmasked_targets_do_not_move_the_mpc_loss(seed in any::<u64>(), lens in prop::collection::vec(8usize..30, 1..4)) {
        let layout = SeqLayout::new(lens.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = mpc_mask(&layout, 7, 0.15, &mut rng);
        prop_assume!(mask.iter().any(|m| !m));
        let preds = frames(layout.total(), 5, &mut rng);
        let targets = frames(layout.total(), 5, &mut rng);
        let mut changed = targets.clone();
        for (r, m) in mask.iter().enumerate() {
            if !m {
                changed.row_mut(r).iter_mut().for_each(|v| *v = rng.random_range(-9.0..9.0));
            }
        }
        let store = ParamStore::new();
        let loss = |tg: &RealMatrix| {
            let mut t = Tape::new(&store);
            let p = t.constant(preds.clone());
            let l = mpc_loss_with_targets(&mut t, p, tg, &mask).unwrap();
            t.scalar(l)
        };
        let base = loss(&targets);
        prop_assert_eq!(base, loss(&changed));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn mean_pooled_predictions_ignore_frame_order(seed in any::<u64>(), len in 1usize..20, classes in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = frames(len, 4, &mut rng);
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = rep.select_rows(&order);
        let pooled = mean_pool(&rep);
        for (a, b) in pooled.iter().zip(mean_pool(&permuted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut clf = LinearClassifier::zeros(4, classes);
        clf.w = frames(4, classes, &mut rng);
        let label = vec![rng.random_range(0..classes as u32)];
        prop_assert_eq!(eval_utterance_probe(&clf, &[&rep], &label).unwrap(), eval_utterance_probe(&clf, &[&permuted], &label).unwrap());
    }

    #[test]
    fn error_rates_are_fractions(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..50)) {
        let (p, l): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let e = error_rate(&p, &l);
        let wrong = p.iter().zip(&l).filter(|(a, b)| a != b).count();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, wrong as f64 / l.len() as f64);
    }
}

fn batch(seed: u64, lengths: &[usize]) -> SeqBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats: Vec<RealMatrix> = lengths.iter().map(|&l| frames(l, FEATURE_DIM, &mut rng)).collect();
    SeqBatch::from_matrices(&mats.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn every_objective_gives_a_finite_non_negative_loss() {
    for name in MODEL_NAMES {
        let model = Model::new(&ModelConfig::from_name(name, 8).unwrap(), 3).unwrap();
        for seed in 0..4 {
            let l = model.loss_value(&batch(seed, &[20, 17, 24]), seed).unwrap();
            assert!(l.is_finite() && l >= 0.0, "{name}: {l}");
        }
    }
}

#[test]
fn forward_models_are_causal_end_to_end() {
    let forward = ["apc-fw-rnn", "apc-fw-trf", "cpc-mixed_spk-rnn", "cpc-within_spk-rnn"];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = frames(16, FEATURE_DIM, &mut rng);
    let mut y = x.clone();
    for t in 9..16 {
        y.row_mut(t).iter_mut().for_each(|v| *v = -*v);
    }
    for name in forward {
        let model = Model::new(&ModelConfig::from_name(name, 8).unwrap(), 5).unwrap();
        let a = model.extract(&[&x], 4).unwrap();
        let b = model.extract(&[&y], 4).unwrap();
        assert_eq!(a[0].slice_rows(0, 9), b[0].slice_rows(0, 9), "{name}");
        assert_ne!(a[0].slice_rows(9, 7), b[0].slice_rows(9, 7), "{name}");
    }
}

#[test]
fn equal_seeds_give_identical_models_and_losses() {
    let b = batch(1, &[18, 22]);
    for name in MODEL_NAMES {
        let cfg = ModelConfig::from_name(name, 8).unwrap();
        let (m1, m2) = (Model::new(&cfg, 11).unwrap(), Model::new(&cfg, 11).unwrap());
        let (l1, g1) = m1.loss_and_gradients(&b, 4).unwrap();
        let (l2, g2) = m2.loss_and_gradients(&b, 4).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits(), "{name}");
        for (x, y) in g1.iter().zip(g2.iter()) {
            assert_eq!(x, y, "{name}");
        }
    }
}
