//! Summary and image-selection metrics: ROUGE-1/2/L, image precision, the
//! max-margin image-text relevance scorer behind MAX_sim, and MMAE.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::image::ImageGrid;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{cosine, Tensor};
use crate::text::{tokenize, Vocab};

/// MMAE regression weights for ROUGE-L, MAX_sim and IP, and its intercept.
pub const MMAE_WEIGHTS: [f64; 3] = [1.641, 0.854, 0.806];
pub const MMAE_INTERCEPT: f64 = 1.978;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        if candidate == 0 || reference == 0 {
            return RougeScore::default();
        }
        let p = overlap as f64 / candidate as f64;
        let r = overlap as f64 / reference as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        RougeScore {
            precision: p,
            recall: r,
            f1,
        }
    }
}

/// Lowercased word tokens with punctuation dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().all(char::is_alphanumeric))
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_counts(overlap, cc.values().sum(), rc.values().sum())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence precision, recall and F1.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L F1.
pub fn rouge_mean_f1(candidate: &str, reference: &str) -> f64 {
    (rouge_n(candidate, reference, 1).f1 + rouge_n(candidate, reference, 2).f1 + rouge_l(candidate, reference).f1) / 3.0
}

/// `|reference ∩ recommended| / |recommended|`; an empty recommendation
/// scores 0.
pub fn image_precision<T: Eq + Hash>(reference: &HashSet<T>, recommended: &[T]) -> f64 {
    if recommended.is_empty() {
        log::warn!("image precision of an empty recommendation is defined as 0");
        return 0.0;
    }
    let hits = recommended.iter().filter(|r| reference.contains(r)).count();
    hits as f64 / recommended.len() as f64
}

pub fn mmae(rouge_l_f1: f64, max_sim: f64, ip: f64) -> f64 {
    MMAE_WEIGHTS[0] * rouge_l_f1 + MMAE_WEIGHTS[1] * max_sim + MMAE_WEIGHTS[2] * ip + MMAE_INTERCEPT
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub max_sim: f64,
    pub ip: f64,
    pub mmae: f64,
}

const REPORT_KEYS: [&str; 12] = [
    "rouge1",
    "rouge2",
    "rougeL",
    "max_sim",
    "ip",
    "mmae",
    "rouge1_precision",
    "rouge1_recall",
    "rouge2_precision",
    "rouge2_recall",
    "rougeL_precision",
    "rougeL_recall",
];

impl MetricReport {
    pub fn new(rouge1: RougeScore, rouge2: RougeScore, rouge_l: RougeScore, max_sim: f64, ip: f64) -> Self {
        MetricReport {
            rouge1,
            rouge2,
            rouge_l,
            max_sim,
            ip,
            mmae: mmae(rouge_l.f1, max_sim, ip),
        }
    }

    fn values(&self) -> [f64; 12] {
        [
            self.rouge1.f1,
            self.rouge2.f1,
            self.rouge_l.f1,
            self.max_sim,
            self.ip,
            self.mmae,
            self.rouge1.precision,
            self.rouge1.recall,
            self.rouge2.precision,
            self.rouge2.recall,
            self.rouge_l.precision,
            self.rouge_l.recall,
        ]
    }

    /// Flat `key=value` lines in canonical order, four decimals.
    pub fn to_report_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k}={v:.4}");
        }
        out
    }

    pub fn from_report_text(text: &str) -> Result<Self> {
        let mut found: HashMap<&str, f64> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Record {
                line: n + 1,
                message: "expected key=value".into(),
            })?;
            let Some(key) = REPORT_KEYS.iter().find(|&&rk| rk == k) else {
                return Err(Error::Record {
                    line: n + 1,
                    message: format!("unknown report key {k:?}"),
                });
            };
            let v: f64 = v.parse().map_err(|_| Error::Record {
                line: n + 1,
                message: format!("bad number {v:?}"),
            })?;
            if found.insert(key, v).is_some() {
                return Err(Error::Record {
                    line: n + 1,
                    message: format!("duplicate key {k}"),
                });
            }
        }
        let get = |k: &str| {
            found
                .get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("report lacks key {k}")))
        };
        let score = |p: &str, r: &str, f: &str| -> Result<RougeScore> {
            Ok(RougeScore {
                precision: get(p)?,
                recall: get(r)?,
                f1: get(f)?,
            })
        };
        Ok(MetricReport {
            rouge1: score("rouge1_precision", "rouge1_recall", "rouge1")?,
            rouge2: score("rouge2_precision", "rouge2_recall", "rouge2")?,
            rouge_l: score("rougeL_precision", "rougeL_recall", "rougeL")?,
            max_sim: get("max_sim")?,
            ip: get("ip")?,
            mmae: get("mmae")?,
        })
    }
}

/// Averages per-example ROUGE scores component-wise.
pub fn mean_rouge(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerConfig {
    pub dim: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub min_gap: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            dim: 32,
            margin: 0.2,
            batch_size: 32,
            max_epochs: 60,
            lr: 1e-2,
            seed: 17,
            min_gap: 0.2,
        }
    }
}

/// One training pair; `group` marks pairs sharing a summary so they are
/// never used as each other's negatives.
#[derive(Clone, Debug)]
pub struct RelevancePair {
    pub image: ImageGrid,
    pub text: String,
    pub group: usize,
}

/// Linear projections of pixels and bag-of-words into a shared space,
/// scored by cosine similarity.
#[derive(Clone, Debug)]
pub struct RetrievalScorer {
    vocab: Vocab,
    store: ParamStore<f32>,
    image_proj: ParamId,
    text_proj: ParamId,
    pixels: usize,
    pub margin: f64,
    pub heldout_gap: f64,
}

impl RetrievalScorer {
    fn text_features(&self, text: &str) -> Vec<f32> {
        bag_of_words(&self.vocab, text)
    }

    fn embed(&self, features: &[f32], proj: ParamId) -> Vec<f32> {
        let w = self.store.get(proj);
        let k = w.shape()[1];
        let mut out = vec![0.0f32; k];
        for (i, &x) in features.iter().enumerate() {
            if x != 0.0 {
                for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                    *o += x * wv;
                }
            }
        }
        out
    }

    /// Cosine similarity in `[-1, 1]`.
    pub fn similarity(&self, image: &ImageGrid, text: &str) -> f64 {
        if image.pixels().len() != self.pixels {
            return 0.0;
        }
        let a = self.embed(image.pixels(), self.image_proj);
        let b = self.embed(&self.text_features(text), self.text_proj);
        cosine(&a, &b) as f64
    }

    /// Similarity clamped to `[0, 1]` for reporting.
    pub fn score(&self, image: &ImageGrid, text: &str) -> f64 {
        self.similarity(image, text).clamp(0.0, 1.0)
    }
}

fn bag_of_words(vocab: &Vocab, text: &str) -> Vec<f32> {
    let mut f = vec![0.0f32; vocab.len()];
    for t in rouge_tokens(text) {
        if vocab.contains(&t) {
            f[vocab.id(&t) as usize] = 1.0;
        }
    }
    f
}

/// Mean matched-pair similarity minus mean mismatched similarity.
fn separation_gap(scorer: &RetrievalScorer, pairs: &[RelevancePair]) -> f64 {
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    let mut n_mis = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        matched += scorer.similarity(&p.image, &p.text);
        if let Some(q) = (1..pairs.len())
            .map(|o| &pairs[(i + o) % pairs.len()])
            .find(|q| q.group != p.group)
        {
            mismatched += scorer.similarity(&p.image, &q.text);
            n_mis += 1;
        }
    }
    matched / pairs.len() as f64 - mismatched / n_mis.max(1) as f64
}

/// Trains the scorer with a bidirectional triplet hinge over in-batch
/// negatives until the held-out matched/mismatched gap reaches
/// `config.min_gap`.
pub fn train_retrieval_scorer(pairs: &[RelevancePair], config: &ScorerConfig) -> Result<RetrievalScorer> {
    if pairs.len() < 50 {
        return Err(contract_err!(
            "retrieval scorer needs at least 50 pairs, got {}",
            pairs.len()
        ));
    }
    let pixels = pairs[0].image.pixels().len();
    if pairs.iter().any(|p| p.image.pixels().len() != pixels) {
        return Err(contract_err!("retrieval pairs mix image sizes"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let n_held = (pairs.len() / 10).max(5);
    let heldout: Vec<RelevancePair> = order[..n_held].iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<&RelevancePair> = order[n_held..].iter().map(|&i| &pairs[i]).collect();

    let vocab = Vocab::build(train.iter().map(|p| p.text.as_str()), usize::MAX)?;
    let mut store = ParamStore::<f32>::new();
    let image_proj = store.add_normal("scorer.image", &[pixels, config.dim], &mut rng)?;
    let text_proj = store.add_normal("scorer.text", &[vocab.len(), config.dim], &mut rng)?;
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            base_lr: config.lr,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    let mut scorer = RetrievalScorer {
        vocab,
        store: ParamStore::new(),
        image_proj,
        text_proj,
        pixels,
        margin: config.margin,
        heldout_gap: f64::NAN,
    };
    let features: Vec<(Vec<f32>, Vec<f32>)> = train
        .iter()
        .map(|p| (p.image.pixels().to_vec(), bag_of_words(&scorer.vocab, &p.text)))
        .collect();

    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut gap = f64::NEG_INFINITY;
    for _ in 0..config.max_epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            store.zero_grad();
            let groups: Vec<usize> = batch.iter().map(|&i| train[i].group).collect();
            let img: Vec<f32> = batch.iter().flat_map(|&i| features[i].0.iter().copied()).collect();
            let txt: Vec<f32> = batch.iter().flat_map(|&i| features[i].1.iter().copied()).collect();
            let (tape, loss) = triplet_loss(&store, (image_proj, text_proj), (img, txt), &groups, config.margin)?;
            tape.backward(loss, &mut store)?;
            adam.step(&mut store)?;
        }
        scorer.store = store.clone();
        gap = separation_gap(&scorer, &heldout);
        if gap >= config.min_gap {
            scorer.heldout_gap = gap;
            return Ok(scorer);
        }
    }
    Err(Error::Separation(format!(
        "held-out gap {gap:.4} below {} after {} epochs on {} pairs",
        config.min_gap,
        config.max_epochs,
        pairs.len()
    )))
}

fn triplet_loss(
    store: &ParamStore<f32>,
    (image_proj, text_proj): (ParamId, ParamId),
    (img, txt): (Vec<f32>, Vec<f32>),
    groups: &[usize],
    margin: f64,
) -> Result<(Tape<f32>, Var)> {
    let b = groups.len();
    let pixels = store.get(image_proj).shape()[0];
    let vocab_len = store.get(text_proj).shape()[0];
    let mut tape = Tape::new();
    let wi = tape.param(store, image_proj);
    let wt = tape.param(store, text_proj);
    let x = tape.constant_raw(vec![b, pixels], img)?;
    let t = tape.constant_raw(vec![b, vocab_len], txt)?;
    let ei = tape.matmul(x, wi)?;
    let ei = tape.l2_normalize_rows(ei)?;
    let et = tape.matmul(t, wt)?;
    let et = tape.l2_normalize_rows(et)?;
    let sims = tape.matmul_bt(ei, et)?;
    let dim = tape.shape(ei)[1];
    let prod = tape.mul(ei, et)?;
    let ones_d = tape.constant_raw(vec![dim, 1], vec![1.0; dim])?;
    let pos = tape.matmul(prod, ones_d)?;
    let ones_row = tape.constant_raw(vec![1, b], vec![1.0; b])?;
    let ones_col = tape.constant_raw(vec![b, 1], vec![1.0; b])?;
    let pos_rows = tape.matmul(pos, ones_row)?;
    let pos_t = tape.reshape(pos, vec![1, b])?;
    let pos_cols = tape.matmul(ones_col, pos_t)?;
    let mut mask = vec![0.0f32; b * b];
    for i in 0..b {
        for j in 0..b {
            if groups[i] != groups[j] {
                mask[i * b + j] = 1.0;
            }
        }
    }
    let mask = tape.constant_raw(vec![b, b], mask)?;
    let m = tape.constant_raw(vec![b, b], vec![margin as f32; b * b])?;
    let mut total = None;
    for anchor in [pos_rows, pos_cols] {
        let diff = tape.sub(sims, anchor)?;
        let hinge = tape.add(diff, m)?;
        let hinge = tape.relu(hinge);
        let hinge = tape.mul(hinge, mask)?;
        let s = tape.sum(hinge);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let loss = tape.scale(total.expect("two directions"), 1.0 / b as f32);
    Ok((tape, loss))
}

/// Per-example MAX_sim: the best clamped similarity among the selected
/// images.
pub fn max_sim(selected: &[&ImageGrid], summary: &str, scorer: &RetrievalScorer) -> Result<f64> {
    if selected.is_empty() {
        return Err(contract_err!("MAX_sim needs at least one selected image"));
    }
    Ok(selected
        .iter()
        .map(|img| scorer.score(img, summary))
        .fold(0.0, f64::max))
}

/// Corpus MAX_sim: mean of the per-example maxima.
pub fn corpus_max_sim(per_example: &[f64]) -> f64 {
    if per_example.is_empty() {
        return 0.0;
    }
    per_example.iter().sum::<f64>() / per_example.len() as f64
}

/// Builds a scorer directly from given projections; used by tests that
/// need exact similarity values.
pub fn scorer_from_projections(
    vocab: Vocab,
    image_proj: Tensor<f32>,
    text_proj: Tensor<f32>,
) -> Result<RetrievalScorer> {
    let mut store = ParamStore::new();
    let pixels = image_proj.shape()[0];
    if text_proj.shape()[0] != vocab.len() || text_proj.shape()[1] != image_proj.shape()[1] {
        return Err(contract_err!("projection shapes disagree with vocabulary"));
    }
    let image_id = store.add("scorer.image", image_proj)?;
    let text_id = store.add("scorer.text", text_proj)?;
    Ok(RetrievalScorer {
        vocab,
        store,
        image_proj: image_id,
        text_proj: text_id,
        pixels,
        margin: 0.2,
        heldout_gap: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn identical_strings_score_one() {
        let s = "the quick brown fox";
        for score in [rouge_n(s, s, 1), rouge_n(s, s, 2), rouge_l(s, s)] {
            assert_eq!((score.precision, score.recall, score.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn disjoint_strings_score_zero() {
        assert_eq!(rouge_n("a b c", "d e f", 1), RougeScore::default());
        assert_eq!(rouge_l("a b c", "d e f").f1, 0.0);
    }

    #[test]
    fn unigram_hand_count() {
        let s = rouge_n("the cat sat", "the cat ate", 1);
        assert!(close(s.precision, 2.0 / 3.0) && close(s.recall, 2.0 / 3.0) && close(s.f1, 2.0 / 3.0));
    }

    #[test]
    fn bigram_clipping() {
        // candidate repeats "a b" twice; the reference holds it once
        let s = rouge_n("a b a b", "a b c", 2);
        assert!(close(s.precision, 1.0 / 3.0));
        assert!(close(s.recall, 1.0 / 2.0));
    }

    #[test]
    fn reversed_sequence_lcs() {
        let s = rouge_l("a b c", "c b a");
        assert!(close(s.precision, 1.0 / 3.0) && close(s.recall, 1.0 / 3.0));
    }

    #[test]
    fn empty_inputs_score_zero() {
        assert_eq!(rouge_n("", "a b", 1), RougeScore::default());
        assert_eq!(rouge_l("a b", ""), RougeScore::default());
        assert_eq!(rouge_n("a", "a", 2), RougeScore::default());
    }

    #[test]
    fn punctuation_is_ignored() {
        assert_eq!(rouge_n("cat, sat.", "cat sat", 1).f1, 1.0);
    }

    #[test]
    fn image_precision_examples() {
        let reference: HashSet<&str> = ["a", "b", "c"].into();
        assert!(close(image_precision(&reference, &["a", "b", "d"]), 2.0 / 3.0));
        assert_eq!(image_precision(&reference, &["c", "a"]), 1.0);
        assert_eq!(image_precision(&reference, &["x"]), 0.0);
        assert_eq!(image_precision(&reference, &[]), 0.0);
    }

    #[test]
    fn mmae_examples() {
        assert!((mmae(0.3021, 0.2660, 0.6170) - 3.198).abs() < 1e-3);
        assert!(close(mmae(0.0, 0.0, 0.0), 1.978));
        assert!(close(mmae(1.0, 1.0, 1.0), 5.279));
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricReport::new(
            RougeScore::from_counts(3, 4, 5),
            RougeScore::from_counts(1, 3, 4),
            RougeScore::from_counts(2, 4, 5),
            0.5,
            0.75,
        );
        let text = r.to_report_text();
        assert!(text.starts_with("rouge1=0.6667\nrouge2=0.2857\nrougeL=0.4444\nmax_sim=0.5000\nip=0.7500\nmmae="));
        let back = MetricReport::from_report_text(&text).unwrap();
        assert!((back.mmae - r.mmae).abs() < 1e-4);
        assert!(MetricReport::from_report_text("bogus=1").is_err());
        assert!(MetricReport::from_report_text("rouge1=1").is_err());
    }

    fn toy_scorer() -> (RetrievalScorer, Vec<ImageGrid>) {
        let vocab = Vocab::build(["red green blue"], 100).unwrap();
        let mut img_proj = vec![0.0f32; 4 * 3];
        let mut txt_proj = vec![0.0f32; vocab.len() * 3];
        for k in 0..3 {
            img_proj[k * 3 + k] = 1.0;
        }
        for (k, w) in ["red", "green", "blue"].iter().enumerate() {
            txt_proj[vocab.id(w) as usize * 3 + k] = 1.0;
        }
        let scorer = scorer_from_projections(
            vocab,
            Tensor::new([4, 3], img_proj).unwrap(),
            Tensor::new([8, 3], txt_proj).unwrap(),
        )
        .unwrap();
        let imgs = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.6, 0.8, 0.0, 0.0]]
            .iter()
            .map(|p| ImageGrid::new(2, 2, 1, p.to_vec()).unwrap())
            .collect();
        (scorer, imgs)
    }

    #[test]
    fn max_sim_takes_best_image() {
        let (scorer, imgs) = toy_scorer();
        let one = max_sim(&[&imgs[0]], "red", &scorer).unwrap();
        assert!(close(one, 1.0));
        let best = max_sim(&[&imgs[1], &imgs[2]], "red", &scorer).unwrap();
        assert!((best - 0.6).abs() < 1e-6);
        let dup = max_sim(&[&imgs[1], &imgs[2], &imgs[2]], "red", &scorer).unwrap();
        assert_eq!(best, dup);
        assert!(max_sim(&[], "red", &scorer).is_err());
    }

    proptest! {
        #[test]
        fn rouge_bounded_and_f1_harmonic(a in proptest::collection::vec(0u8..5, 0..12), b in proptest::collection::vec(0u8..5, 0..12)) {
            let words = ["w0", "w1", "w2", "w3", "w4"];
            let ca = a.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" ");
            let cb = b.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" ");
            for s in [rouge_n(&ca, &cb, 1), rouge_n(&ca, &cb, 2), rouge_l(&ca, &cb)] {
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let h = if s.precision + s.recall > 0.0 { 2.0 * s.precision * s.recall / (s.precision + s.recall) } else { 0.0 };
                prop_assert!((s.f1 - h).abs() < 1e-12);
            }
        }

        #[test]
        fn mmae_increases_in_each_argument(x in 0.0f64..0.9, y in 0.0f64..0.9, z in 0.0f64..0.9, d in 0.01f64..0.1) {
            let base = mmae(x, y, z);
            prop_assert!(mmae(x + d, y, z) > base);
            prop_assert!(mmae(x, y + d, z) > base);
            prop_assert!(mmae(x, y, z + d) > base);
        }
    }
}
