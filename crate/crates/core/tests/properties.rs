//! Property tests over masking, the optimizer, metrics and the corpus.

use proptest::prelude::*;
use simu_core::data::{generate_corpus, Split, VOCAB_SIZE};
use simu_core::eval::{exact_match, mia_auc, rouge_l};
use simu_core::masking::{merge_masks, threshold_layers, MaskMeta, MaskStrategy, NeuronMask};
use simu_core::model::{ModelParams, ParamGroup, TransformerConfig};
use simu_core::numerics::Tensor;
use simu_core::optim::{masked_sophia_step, sophia_step, SophiaConfig, SophiaState};

fn scores_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 1usize..12).prop_flat_map(|(l, w)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, w), l))
}

fn mask(layers: Vec<Vec<bool>>) -> NeuronMask {
    NeuronMask::from_layers(layers, MaskMeta::default()).unwrap()
}

fn count(layers: &[Vec<bool>]) -> usize {
    layers.iter().flatten().filter(|&&b| b).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn raising_t_never_adds_neurons(scores in scores_strategy(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = mask(threshold_layers(&scores, lo).unwrap());
        let tight = mask(threshold_layers(&scores, hi).unwrap());
        prop_assert!(tight.is_subset_of(&loose));
        prop_assert!(count(tight.layers()) <= count(loose.layers()));
    }

    #[test]
    fn positive_layer_scaling_keeps_mask(scores in scores_strategy(), t in 0.01f64..1.0, k in -20i32..20, layer in 0usize..5) {
        let l = layer % scores.len();
        let c = 2f64.powi(k);
        let mut scaled = scores.clone();
        for v in &mut scaled[l] {
            *v *= c;
        }
        prop_assert_eq!(threshold_layers(&scores, t).unwrap(), threshold_layers(&scaled, t).unwrap());
    }

    #[test]
    fn forget_only_is_subset_of_dual(f in scores_strategy(), seed in any::<u64>(), t in 0.01f64..1.0) {
        let r: Vec<Vec<f64>> = f
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, v)| ((seed >> ((i * 7 + j) % 60)) as f64 % 7.0) - 3.0 + v * 0.1).collect())
            .collect();
        let fm = mask(threshold_layers(&f, t).unwrap());
        let rm = mask(threshold_layers(&r, t).unwrap());
        let dual = merge_masks(&fm, &rm, MaskStrategy::Dual).unwrap();
        let only = merge_masks(&fm, &rm, MaskStrategy::ForgetOnly).unwrap();
        prop_assert!(only.is_subset_of(&dual));
        prop_assert_eq!(dual.layers(), fm.layers());
    }

    #[test]
    fn empty_layers_select_nothing(w in 1usize..10, t in 0.01f64..1.0, neg in -3.0f64..=0.0) {
        let scores = vec![vec![neg; w], vec![0.0; w]];
        prop_assert_eq!(count(&threshold_layers(&scores, t).unwrap()), 0);
    }

    #[test]
    fn mask_bytes_roundtrip(scores in scores_strategy(), t in 0.01f64..1.0) {
        let m = mask(threshold_layers(&scores, t).unwrap());
        let back = NeuronMask::from_bytes(&m.to_bytes().unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, m);
    }
}

fn tiny_params(seed: u64) -> ModelParams {
    let cfg = TransformerConfig { n_layers: 2, d_model: 4, n_heads: 2, d_ff: 6, vocab_size: VOCAB_SIZE, max_seq_len: 8 };
    ModelParams::init(cfg, seed, 0.5).unwrap()
}

fn grads_from(params: &ModelParams, seed: u64, scale: f64) -> Vec<Option<Tensor>> {
    let mut s = seed | 1;
    params
        .tensors()
        .iter()
        .map(|t| {
            let data = (0..t.len())
                .map(|_| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    ((s % 20001) as f64 / 10000.0 - 1.0) * scale
                })
                .collect();
            Some(Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sophia_moves_each_weight_at_most_lr(seed in any::<u64>(), lr in 1e-5f64..1e-1, wd in 0.0f64..0.1, scale in 1e-6f64..1e3, steps in 1usize..4) {
        let mut p = tiny_params(seed);
        let mut st = SophiaState::new(&p);
        let cfg = SophiaConfig { lr, weight_decay: wd, ..Default::default() };
        for k in 0..steps {
            let before = p.clone();
            let g = grads_from(&p, seed.wrapping_add(k as u64), scale);
            sophia_step(&mut p, &g, &mut st, &cfg).unwrap();
            for (a, b) in before.tensors().iter().zip(p.tensors()) {
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    let decayed = x * (1.0 - lr * wd);
                    prop_assert!((y - decayed).abs() <= lr * (1.0 + 1e-12) + 4.0 * f64::EPSILON * x.abs());
                }
            }
        }
    }

    #[test]
    fn masked_step_leaves_zero_rows_untouched(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 8), steps in 1usize..4) {
        let mut p = tiny_params(seed);
        let m = mask(bits.chunks(4).map(|c| c.to_vec()).collect());
        let mut st = SophiaState::new(&p);
        let orig = p.clone();
        for k in 0..steps {
            let g = grads_from(&p, seed.wrapping_add(k as u64), 1.0);
            masked_sophia_step(&mut p, &g, &mut st, &SophiaConfig::default(), &m).unwrap();
        }
        for (i, info) in p.infos().iter().enumerate() {
            if info.group != ParamGroup::MlpDown {
                continue;
            }
            let l = info.layer.unwrap();
            let (now, was) = (p.tensors()[i], orig.tensors()[i]);
            let row = now.len() / 4;
            for k in 0..4 {
                let a = &now.data()[k * row..(k + 1) * row];
                let b = &was.data()[k * row..(k + 1) * row];
                if !m.get(l, k) {
                    prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn all_ones_mask_equals_unmasked(seed in any::<u64>(), steps in 1usize..4) {
        let mut a = tiny_params(seed);
        let mut b = a.clone();
        let (mut sa, mut sb) = (SophiaState::new(&a), SophiaState::new(&b));
        let ones = NeuronMask::all_ones(2, 4);
        for k in 0..steps {
            let g = grads_from(&a, seed.wrapping_add(k as u64), 0.3);
            sophia_step(&mut a, &g, &mut sa, &SophiaConfig::default()).unwrap();
            masked_sophia_step(&mut b, &g, &mut sb, &SophiaConfig::default(), &ones).unwrap();
        }
        prop_assert_eq!(a, b);
    }
}

fn naive_auc(members: &[f64], non: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in members {
        for &y in non {
            wins += if x < y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        }
    }
    wins / (members.len() * non.len()) as f64
}

fn losses() -> impl Strategy<Value = Vec<f64>> {
    // Coarse grid so ties occur often.
    prop::collection::vec((0u32..12).prop_map(|v| v as f64 * 0.25), 1..20)
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "red", "blue", "Oslo"]), 0..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pairwise_count(m in losses(), n in losses()) {
        let fast = mia_auc(&m, &n).unwrap();
        prop_assert!((fast - naive_auc(&m, &n)).abs() <= 1e-12);
    }

    #[test]
    fn auc_of_identical_sets_is_half(m in losses()) {
        prop_assert_eq!(mia_auc(&m, &m).unwrap(), 0.5);
    }

    #[test]
    fn rouge_is_symmetric(a in words(), b in words()) {
        prop_assert_eq!(rouge_l(&a, &b), rouge_l(&b, &a));
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn identical_strings_match(a in words()) {
        prop_assert!(exact_match(&a, &a));
        if !a.is_empty() {
            prop_assert_eq!(rouge_l(&a, &a), 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_splits_are_entity_disjoint(seed in any::<u64>(), n in 4usize..30, facts in 1usize..=10, frac in 0.05f64..0.5) {
        let c = generate_corpus(seed, n, facts, frac).unwrap();
        prop_assert_eq!(c.pairs.len(), n * facts);
        let ids = |s| c.split(s).iter().map(|p| p.entity_id).collect::<std::collections::BTreeSet<_>>();
        let (f, r, h) = (ids(Split::Forget), ids(Split::Retain), ids(Split::Holdout));
        prop_assert!(!f.is_empty() && !r.is_empty());
        prop_assert!(f.is_disjoint(&r) && f.is_disjoint(&h) && r.is_disjoint(&h));
        prop_assert_eq!(c.content_hash().unwrap(), generate_corpus(seed, n, facts, frac).unwrap().content_hash().unwrap());
    }
}
