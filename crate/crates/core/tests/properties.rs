use std::collections::HashSet;

use mmsum::image::{encode_and_pool, patchify, unpatchify, ImageGrid};
use mmsum::metrics::{image_precision, mmae, rouge_l, rouge_n};
use mmsum::model::{LossWeights, Model, ModelConfig, ModelInput, Targets, TaskFlags};
use mmsum::optim::{AdamConfig, AdamState};
use mmsum::params::ParamStore;
use mmsum::tape::{AttnMask, Tape};
use mmsum::tensor::Tensor;
use mmsum::text::{encode_document, encode_paragraphs, Vocab, END, START};
use mmsum::training::{build_selection_labels, prepare_example, shuffle_for_reorder};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> (Model, ParamStore<f64>) {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        vocab_size: 12,
        max_tokens: 16,
        max_summary_tokens: 8,
        patch_size: 4,
        image_size: 8,
        tokenizer_layers: 1,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store, seed).unwrap();
    (model, store)
}

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(
        prop_oneof![Just("ab"), Just("cd"), Just("ef"), Just("gh"), Just("ij")],
        0..12,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -10.0f64..10.0,
    ) {
        let t = Tensor::<f64>::randn(vec![rows, cols], 3.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = t.softmax(1).unwrap();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::new(vec![rows, cols], t.data().iter().map(|x| x + shift).collect()).unwrap();
        for (a, b) in shifted.softmax(1).unwrap().data().iter().zip(s.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weights_normalize_over_visible_keys(
        nk in 1usize..6,
        nq in 1usize..5,
        seed in any::<u64>(),
        pad in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&Tensor::randn(vec![nq, 4], 1.0, &mut rng).unwrap());
        let k = tape.constant(&Tensor::randn(vec![nk, 4], 1.0, &mut rng).unwrap());
        let v = tape.constant(&Tensor::randn(vec![nk, 4], 1.0, &mut rng).unwrap());
        let mask: Vec<bool> = pad[..nk].to_vec();
        let out = tape.attention(q, k, v, 2, &AttnMask::padding(mask.clone())).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for row in probs.chunks(nk) {
            let visible: f64 = row.iter().zip(&mask).filter(|(_, &m)| !m).map(|(p, _)| p).sum();
            let hidden: Vec<f64> = row.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            prop_assert!(hidden.iter().all(|&p| p == 0.0));
            if mask.iter().any(|&m| !m) {
                prop_assert!((visible - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_without_gradient_or_decay_is_identity(seed in any::<u64>(), steps in 1u64..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        store.add_normal("w", &[3, 4], &mut rng).unwrap();
        let before = store.get(store.id("w").unwrap()).data().to_vec();
        let mut adam = AdamState::new(&store, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for _ in 0..steps {
            store.zero_grad();
            adam.step(&mut store).unwrap();
        }
        prop_assert_eq!(store.get(store.id("w").unwrap()).data(), &before[..]);
        prop_assert_eq!(adam.step, steps);
    }

    #[test]
    fn forward_is_finite_on_bounded_inputs(seed in 0u64..1000, m in 1usize..4, scale in 0.0f64..10.0) {
        let (model, store) = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..m)
            .map(|_| {
                let t = Tensor::<f64>::randn(vec![4, 16], 1.0, &mut rng).unwrap();
                Tensor::new(vec![4, 16], t.data().iter().map(|x| (x * scale).clamp(-10.0, 10.0)).collect()).unwrap()
            })
            .collect();
        let input = ModelInput { patches, text: vec![START, 5, 6, 7, END] };
        let targets = Targets {
            summary: vec![START, 8, 9, END],
            selection: (0..m).map(|i| i == 0).collect(),
            reorder: (0..m).collect(),
        };
        let mut tape = Tape::new();
        let l = model.losses(&mut tape, &store, &input, &targets, TaskFlags::ALL, &LossWeights::default()).unwrap();
        prop_assert!(tape.scalar_value(l.total).unwrap().is_finite());
    }

    #[test]
    fn total_gradient_is_sum_of_task_gradients(seed in 0u64..1000) {
        let (model, store) = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..3).map(|_| Tensor::<f64>::randn(vec![4, 16], 1.0, &mut rng).unwrap()).collect();
        let input = ModelInput { patches, text: vec![START, 5, 6, 7, 8, END] };
        let targets = Targets { summary: vec![START, 9, 10, END], selection: vec![true, false, true], reorder: vec![2, 0, 1] };
        let mut tape = Tape::new();
        let l = model.losses(&mut tape, &store, &input, &targets, TaskFlags::ALL, &LossWeights::default()).unwrap();
        let params: Vec<_> = store.ids().map(|id| tape.param(&store, id)).collect();
        let total = tape.grad(l.total, &params).unwrap();
        let parts: Vec<_> = [l.generation, l.selection, l.reordering]
            .into_iter()
            .map(|v| tape.grad(v.unwrap(), &params).unwrap())
            .collect();
        for (i, t) in total.iter().enumerate() {
            for (j, &g) in t.iter().enumerate() {
                let sum: f64 = parts.iter().map(|p| p[i][j]).sum();
                prop_assert!((g - sum).abs() <= 1e-3 * g.abs().max(sum.abs()).max(1e-9));
            }
        }
    }

    #[test]
    fn encoded_documents_respect_length_and_sentinels(text in words(), max in 2usize..10) {
        let vocab = Vocab::build(["ab cd ef gh"], 64).unwrap();
        let ids = encode_document(&text.join(" "), &vocab, max).ids;
        prop_assert!(ids.len() <= max);
        prop_assert_eq!(ids.iter().filter(|&&i| i == START).count(), 1);
        prop_assert_eq!(ids.iter().filter(|&&i| i == END).count(), 1);
        prop_assert_eq!(ids[0], START);
        prop_assert_eq!(*ids.last().unwrap(), END);
        prop_assert!(ids.iter().all(|&i| (i as usize) < vocab.len()));
        let paras = encode_paragraphs(&[text.join(" "), text.join(" ")], &vocab, max).ids;
        prop_assert!(paras.len() <= max);
    }

    #[test]
    fn vocabulary_tsv_round_trips(text in words()) {
        let vocab = Vocab::build([text.join(" ")], 64).unwrap();
        let back = Vocab::from_tsv(&vocab.to_tsv()).unwrap();
        prop_assert_eq!(back.tokens(), vocab.tokens());
        for (i, t) in vocab.tokens().iter().enumerate() {
            prop_assert_eq!(back.id(t), i as u32);
        }
    }

    #[test]
    fn patchify_is_lossless(seed in any::<u64>(), side in 1usize..5, patch in 1usize..5, channels in 1usize..3) {
        let n = side * patch;
        let t = Tensor::<f32>::randn(vec![n * n * channels], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let px: Vec<f32> = t.data().iter().map(|x| x.abs().fract()).collect();
        let img = ImageGrid::new(n, n, channels, px).unwrap();
        let patches = patchify(&img, patch).unwrap();
        prop_assert_eq!(patches.shape(), &[side * side, patch * patch * channels][..]);
        prop_assert_eq!(unpatchify(&patches, n, n, channels, patch).unwrap(), img);
    }

    #[test]
    fn pooling_ignores_row_order(seed in any::<u64>(), rows in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::randn(vec![rows, 6], 1.0, &mut rng).unwrap();
        let perm = shuffle_for_reorder(rows, &mut rng);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&r| z.row(r).to_vec()).collect();
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let a = tape.constant(&z);
        let b = tape.constant(&Tensor::from_rows(&permuted).unwrap());
        let va = encode_and_pool(&mut tape, &store, a, &[]).unwrap();
        let vb = encode_and_pool(&mut tape, &store, b, &[]).unwrap();
        prop_assert_eq!(tape.value(va), tape.value(vb));
    }

    #[test]
    fn visual_tokens_have_one_row_per_image(m in 1usize..=10, seed in 0u64..100) {
        let (model, store) = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<_> = (0..m).map(|_| Tensor::<f64>::randn(vec![4, 16], 1.0, &mut rng).unwrap()).collect();
        let mut tape = Tape::new();
        let v = model.visual_tokens(&mut tape, &store, &patches).unwrap().unwrap();
        prop_assert_eq!(tape.shape(v), &[m, 8][..]);
    }

    #[test]
    fn selection_labels_have_min_k_positives(n in 1usize..12, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = ["ab", "cd", "ef", "gh", "ij", "kl"];
        let captions: Vec<String> = (0..n)
            .map(|_| (0..2).map(|_| pool[rand::Rng::gen_range(&mut rng, 0..pool.len())]).collect::<Vec<_>>().join(" "))
            .collect();
        let labels = build_selection_labels(&captions, "ab cd . ef gh .", k).unwrap();
        prop_assert_eq!(labels.iter().filter(|&&l| l).count(), k.min(n));
    }

    #[test]
    fn reorder_targets_are_permutations(m in 0usize..12, seed in any::<u64>()) {
        let perm = shuffle_for_reorder(m, &mut ChaCha8Rng::seed_from_u64(seed));
        let set: HashSet<usize> = perm.iter().copied().collect();
        prop_assert_eq!(perm.len(), m);
        prop_assert_eq!(set, (0..m).collect::<HashSet<_>>());
    }

    #[test]
    fn rouge_is_bounded_and_exact_on_identity(a in words(), b in words()) {
        let (a, b) = (a.join(" "), b.join(" "));
        for s in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
            prop_assert!((0.0..=1.0).contains(&s.f1));
            if s.precision + s.recall > 0.0 {
                let h = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                prop_assert!((s.f1 - h).abs() < 1e-12);
            } else {
                prop_assert_eq!(s.f1, 0.0);
            }
        }
        if !a.is_empty() {
            prop_assert_eq!(rouge_n(&a, &a, 1).f1, 1.0);
            prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
        }
    }

    #[test]
    fn image_precision_is_one_exactly_when_all_hits(
        reference in proptest::collection::hash_set(0u8..10, 0..6),
        recommended in proptest::collection::vec(0u8..10, 1..6),
    ) {
        let ip = image_precision(&reference, &recommended);
        prop_assert!((0.0..=1.0).contains(&ip));
        prop_assert_eq!(ip == 1.0, recommended.iter().all(|r| reference.contains(r)));
    }

    #[test]
    fn mmae_increases_in_each_argument(r in 0.0f64..1.0, s in 0.0f64..1.0, p in 0.0f64..1.0, d in 1e-6f64..0.5) {
        let base = mmae(r, s, p);
        prop_assert!(mmae(r + d, s, p) > base);
        prop_assert!(mmae(r, s + d, p) > base);
        prop_assert!(mmae(r, s, p + d) > base);
    }
}

#[test]
fn prepared_examples_truncate_images_and_text() {
    let corpus = mmsum::synth::generate_corpus(&mmsum::synth::SynthConfig {
        n_docs: 40,
        max_paragraphs: 14,
        salient_per_paragraph: 1,
        ..Default::default()
    })
    .unwrap();
    let docs: Vec<_> = corpus.all().map(|d| d.example.clone()).collect();
    let vocab = Vocab::build(docs.iter().flat_map(|d| d.paragraphs.iter()), 512).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_tokens: 20,
        ..ModelConfig::default()
    };
    let mut saw_truncation = false;
    for d in &docs {
        let p = prepare_example(d, &vocab, &cfg, 3).unwrap();
        assert!(p.n_images() <= 10);
        assert!(p.text.len() <= 20);
        assert_eq!(p.selection.iter().filter(|&&l| l).count(), p.n_images().min(3));
        saw_truncation |= d.images.len() > 10;
    }
    assert!(saw_truncation);
}

#[test]
fn synthetic_splits_are_disjoint() {
    let corpus = mmsum::synth::generate_corpus(&mmsum::synth::SynthConfig::default()).unwrap();
    let mut seen = HashSet::new();
    for d in corpus.all() {
        assert!(seen.insert(d.example.doc_id.clone()));
    }
    assert_eq!(seen.len(), 1000);
}
