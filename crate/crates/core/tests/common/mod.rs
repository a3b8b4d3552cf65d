//! Oracles and training harnesses shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use mmsum::config::RunConfig;
use mmsum::dataset::MultiModalExample;
use mmsum::decode::{log_softmax, BeamConfig, Hypothesis, StepScorer};
use mmsum::eval::{alignment, infer_all, score_outputs, DocOutput, InferenceConfig, SelectionSource};
use mmsum::metrics::{rouge_n, MetricReport, RetrievalScorer};
use mmsum::model::{LossWeights, Mode, Model, ModelConfig, ModelInput, Targets, TaskFlags};
use mmsum::params::ParamStore;
use mmsum::synth::{generate_corpus, SynthConfig, SynthCorpus, SynthDoc};
use mmsum::tape::Tape;
use mmsum::tensor::Tensor;
use mmsum::text::Vocab;
use mmsum::training::{epoch_permutation, prepare_example, PreparedExample, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const LOSS_NAMES: [&str; 4] = ["generation", "reordering", "selection", "total"];

fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        vocab_size: 14,
        max_tokens: 16,
        max_summary_tokens: 8,
        patch_size: 4,
        image_size: 8,
        tokenizer_layers: 1,
        mode: Mode::Joint,
    }
}

fn toy_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> (ModelInput<f64>, Targets) {
    let m = 3;
    let patches = (0..m)
        .map(|_| {
            let data = (0..4 * 16).map(|_| rng.gen::<f64>()).collect();
            Tensor::new(vec![4, 16], data).unwrap()
        })
        .collect();
    let vocab = cfg.vocab_size as u32;
    let mut text = vec![1];
    text.extend((0..9).map(|_| rng.gen_range(5..vocab)));
    text.push(2);
    let mut summary = vec![1];
    summary.extend((0..5).map(|_| rng.gen_range(5..vocab)));
    summary.push(2);
    let mut reorder: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(reorder.as_mut_slice(), rng);
    let targets = Targets {
        summary,
        selection: vec![true, false, true],
        reorder,
    };
    (ModelInput { patches, text }, targets)
}

fn all_losses(
    model: &Model,
    store: &ParamStore<f64>,
    input: &ModelInput<f64>,
    targets: &Targets,
) -> (Tape<f64>, [mmsum::tape::Var; 4]) {
    let mut tape = Tape::new();
    let l = model
        .losses(
            &mut tape,
            store,
            input,
            targets,
            TaskFlags::ALL,
            &LossWeights::default(),
        )
        .unwrap();
    let vars = [
        l.generation.unwrap(),
        l.reordering.unwrap(),
        l.selection.unwrap(),
        l.total,
    ];
    (tape, vars)
}

pub struct GradientCheck {
    /// Relative error per loss, in `LOSS_NAMES` order.
    pub errors: [f64; 4],
    pub checked: usize,
    /// Coordinates whose ±h probes land on different max-pool winners.
    pub straddling: usize,
}

fn loss_values(
    model: &Model,
    store: &ParamStore<f64>,
    input: &ModelInput<f64>,
    targets: &Targets,
) -> ([f64; 4], Vec<usize>) {
    let (tape, vars) = all_losses(model, store, input, targets);
    (vars.map(|v| tape.scalar_value(v).unwrap()), tape.max_pool_signature())
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// difference gradients over sampled coordinates of every parameter.
/// Coordinates whose probes cross a max-pool switch are left out, since
/// the loss is not differentiable across them.
pub fn gradient_check(seed: u64) -> GradientCheck {
    let cfg = toy_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(cfg.clone(), &mut store, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let (input, targets) = toy_batch(&mut rng, &cfg);

    let (mut tape, losses) = all_losses(&model, &store, &input, &targets);
    let base_signature = tape.max_pool_signature();
    let ids: Vec<_> = store.ids().collect();
    let param_vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let analytic: Vec<Vec<Vec<f64>>> = losses.iter().map(|&l| tape.grad(l, &param_vars).unwrap()).collect();

    let mut a = vec![Vec::new(); 4];
    let mut n = vec![Vec::new(); 4];
    let mut straddling = 0;
    for (pi, &id) in ids.iter().enumerate() {
        let len = store.get(id).numel();
        for _ in 0..len.min(4) {
            let c = rng.gen_range(0..len);
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + FD_STEP;
            let (plus, sig_plus) = loss_values(&model, &store, &input, &targets);
            store.get_mut(id).data_mut()[c] = orig - FD_STEP;
            let (minus, sig_minus) = loss_values(&model, &store, &input, &targets);
            store.get_mut(id).data_mut()[c] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                straddling += 1;
                continue;
            }
            for k in 0..4 {
                a[k].push(analytic[k][pi][c]);
                n[k].push((plus[k] - minus[k]) / (2.0 * FD_STEP));
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    GradientCheck {
        errors: std::array::from_fn(|k| {
            let diff: Vec<f64> = a[k].iter().zip(&n[k]).map(|(x, y)| x - y).collect();
            norm(&diff) / norm(&a[k]).max(norm(&n[k])).max(1e-300)
        }),
        checked: a[0].len(),
        straddling,
    }
}

// ------------------------------------------------------------------ oracles

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    out
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_force_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let is_subsequence = |mask: u32| {
        let mut j = 0;
        for (i, x) in a.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            while j < b.len() && b[j] != *x {
                j += 1;
            }
            if j == b.len() {
                return false;
            }
            j += 1;
        }
        true
    };
    (0u32..1 << a.len())
        .filter(|&m| is_subsequence(m))
        .map(|m| m.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

pub const TOY_VOCAB: usize = 5;
pub const TOY_END: u32 = 0;

/// Next-token distributions depending only on the position, each putting
/// `top` of its mass on one random token.
pub struct PositionToy {
    table: Vec<Vec<f64>>,
}

impl PositionToy {
    pub fn new(seed: u64, top: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..16)
            .map(|_| {
                let winner = rng.gen_range(0..TOY_VOCAB);
                let w: Vec<f64> = (0..TOY_VOCAB).map(|_| rng.gen::<f64>() + 0.1).collect();
                let rest: f64 = w.iter().enumerate().filter(|&(i, _)| i != winner).map(|(_, x)| x).sum();
                let logits: Vec<f32> = w
                    .iter()
                    .enumerate()
                    .map(|(i, x)| if i == winner { top } else { x / rest * (1.0 - top) })
                    .map(|p| p.ln() as f32)
                    .collect();
                log_softmax(&logits)
            })
            .collect();
        PositionToy { table }
    }
}

impl StepScorer for PositionToy {
    fn log_probs(&mut self, prefix: &[u32]) -> mmsum::Result<Vec<f64>> {
        Ok(self.table[prefix.len()].clone())
    }
}

/// Best length-normalized sequence by enumerating all of them.
pub fn exhaustive_search<S: StepScorer>(scorer: &mut S, cfg: &BeamConfig, vocab: usize) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((tokens, lp)) = stack.pop() {
        let dist = scorer.log_probs(&tokens).unwrap();
        if tokens.len() >= cfg.min_len {
            let h = Hypothesis {
                tokens: tokens.clone(),
                log_prob: lp + dist[cfg.end as usize],
            };
            if best.as_ref().is_none_or(|b| h.normalized() > b.normalized()) {
                best = Some(h);
            }
        }
        if tokens.len() < cfg.max_len {
            for t in (0..vocab as u32).filter(|&t| t != cfg.end) {
                let mut next = tokens.clone();
                next.push(t);
                stack.push((next, lp + dist[t as usize]));
            }
        }
    }
    best.unwrap()
}

// ------------------------------------------------------------ learnability

pub const CORPUS_DOCS: usize = 1000;

/// The learnability configuration: d_model 64 with a single-layer image
/// tokenizer and batches of four.
pub fn learn_config(mode: Mode, tasks: TaskFlags, seed: u64, epochs: u64) -> RunConfig {
    RunConfig {
        d_model: 64,
        n_heads: 4,
        enc_layers: 2,
        dec_layers: 2,
        tokenizer_layers: 1,
        max_tokens: 64,
        max_summary_tokens: 16,
        lr: 1e-3,
        warmup_steps: 100,
        batch_size: 4,
        epochs,
        seed,
        beam_size: 3,
        min_len: 5,
        max_len: 15,
        k_select: 3,
        mode,
        tasks,
        ..RunConfig::default()
    }
}

pub struct Corpus {
    pub synth: SynthCorpus,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn new() -> Self {
        let synth = generate_corpus(&SynthConfig {
            n_docs: CORPUS_DOCS,
            ..SynthConfig::default()
        })
        .unwrap();
        let texts = synth
            .train
            .iter()
            .flat_map(|d| d.example.paragraphs.iter().chain([&d.example.summary]));
        let vocab = Vocab::build(texts, 512).unwrap();
        Corpus { synth, vocab }
    }

    pub fn prepare(&self, docs: &[SynthDoc], run: &RunConfig) -> Vec<PreparedExample> {
        let cfg = run.model_config(self.vocab.len());
        docs.iter()
            .map(|d| prepare_example(&d.example, &self.vocab, &cfg, run.k_select).unwrap())
            .collect()
    }

    pub fn examples(docs: &[SynthDoc]) -> Vec<MultiModalExample> {
        docs.iter().map(|d| d.example.clone()).collect()
    }
}

pub fn untrained(corpus: &Corpus, run: &RunConfig) -> Trainer {
    Trainer::new(run.model_config(corpus.vocab.len()), run.train_config()).unwrap()
}

pub fn train(corpus: &Corpus, run: &RunConfig) -> Trainer {
    let data = corpus.prepare(&corpus.synth.train, run);
    let mut trainer = untrained(corpus, run);
    while trainer.progress.epoch < run.epochs {
        trainer.step(&data).unwrap();
    }
    trainer
}

/// Fraction of test images whose reorder head recovers the original slot
/// under a fixed random shuffle.
pub fn reorder_accuracy(trainer: &Trainer, test: &[PreparedExample]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (i, ex) in test.iter().enumerate() {
        let perm = epoch_permutation(0x7e57, 0, i, ex.n_images());
        let (input, targets) = ex.view(&perm);
        let mut tape = Tape::new();
        let enc = trainer.model.encode(&mut tape, &trainer.store, &input).unwrap();
        let v = enc.visual_states(&mut tape).unwrap().unwrap();
        let logits = trainer.model.reorder_logits(&mut tape, &trainer.store, v).unwrap();
        let classes = tape.shape(logits)[1];
        for (j, row) in tape.value(logits).chunks(classes).enumerate() {
            let guess = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            correct += usize::from(guess == targets.reorder[j]);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

pub fn inference_config(run: &RunConfig) -> InferenceConfig {
    InferenceConfig {
        beam: run.beam(),
        k: run.k_select,
        selection: if run.tasks.selection {
            SelectionSource::Head
        } else {
            SelectionSource::Similarity
        },
    }
}

pub fn outputs(corpus: &Corpus, trainer: &Trainer, run: &RunConfig, docs: &[SynthDoc]) -> Vec<DocOutput> {
    let prepared = corpus.prepare(docs, run);
    infer_all(
        &trainer.model,
        &trainer.store,
        &corpus.vocab,
        &prepared,
        &inference_config(run),
    )
    .unwrap()
}

/// Micro-averaged F1 of the selected images against construction-time
/// importance.
pub fn selection_f1(docs: &[SynthDoc], outs: &[DocOutput]) -> f64 {
    let (mut tp, mut selected, mut relevant) = (0usize, 0usize, 0usize);
    for (d, o) in docs.iter().zip(outs) {
        let important: HashSet<usize> = (0..d.important.len()).filter(|&i| d.important[i]).collect();
        tp += o.selection.indices.iter().filter(|i| important.contains(i)).count();
        selected += o.selection.indices.len();
        relevant += important.len();
    }
    let p = tp as f64 / selected.max(1) as f64;
    let r = tp as f64 / relevant.max(1) as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn mean_rouge1(docs: &[SynthDoc], outs: &[DocOutput]) -> f64 {
    let total: f64 = docs
        .iter()
        .zip(outs)
        .map(|(d, o)| rouge_n(&o.summary, &d.example.summary, 1).f1)
        .sum();
    total / docs.len() as f64
}

pub fn report(
    _corpus: &Corpus,
    docs: &[SynthDoc],
    outs: &[DocOutput],
    scorer: &RetrievalScorer,
    k: usize,
) -> MetricReport {
    score_outputs(&Corpus::examples(docs), outs, scorer, k).unwrap()
}

/// Mean diagonal-minus-off-diagonal gap of the image/paragraph block of
/// the relevance matrix over `docs`.
pub fn alignment_gap(corpus: &Corpus, trainer: &Trainer, docs: &[SynthDoc]) -> f64 {
    let gaps: Vec<f64> = docs
        .iter()
        .filter_map(|d| {
            alignment(&trainer.model, &trainer.store, &corpus.vocab, &d.example)
                .unwrap()
                .diagonal_gap()
        })
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}
