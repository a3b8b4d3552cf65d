//! Inference and evaluation: beam-search summaries, image selection,
//! corpus metrics, and image/text relevance matrices.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::MultiModalExample;
use crate::decode::{beam_search, BeamConfig, ModelScorer};
use crate::error::{contract_err, Result};
use crate::metrics::{
    corpus_max_sim, max_sim, mean_rouge, rouge_l, rouge_n, train_retrieval_scorer, MetricReport, RelevancePair,
    RetrievalScorer, ScorerConfig,
};
use crate::model::{select_by_similarity, select_images, sigmoid, Model, Selection};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::cosine;
use crate::text::{decode_tokens, encode_document, Vocab, SEP, START};
use crate::training::{prepare_example, PreparedExample};

/// How images are ranked at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionSource {
    /// Sigmoid of the trained selection head.
    Head,
    /// Cosine between each visual state and the mean decoder state of the
    /// generated summary.
    Similarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub beam: BeamConfig,
    pub k: usize,
    pub selection: SelectionSource,
}

/// One document's generated summary and selected images.
#[derive(Clone, Debug, PartialEq)]
pub struct DocOutput {
    pub doc_id: String,
    pub summary_ids: Vec<u32>,
    pub summary: String,
    pub selection: Selection,
}

fn rows(tape: &Tape<f32>, v: Var) -> Vec<Vec<f64>> {
    let width = tape.shape(v)[1];
    tape.value(v)
        .chunks(width)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

/// Decoder states for `START + content`, one row per input position.
fn decoder_rows(
    model: &Model,
    store: &ParamStore<f32>,
    tape: &mut Tape<f32>,
    hidden: Var,
    mask: &crate::tape::AttnMask,
    content: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let mut ids = Vec::with_capacity(content.len() + 1);
    ids.push(START);
    ids.extend_from_slice(content);
    let states = model.decoder_states(tape, store, hidden, mask, &ids)?;
    Ok(rows(tape, states))
}

/// Generates a summary and picks images for one prepared document, images
/// in their original order.
pub fn infer(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    ex: &PreparedExample,
    cfg: &InferenceConfig,
) -> Result<DocOutput> {
    let (input, _) = ex.view(&ex.identity());
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, store, &input)?;
    let hyp = {
        let mut scorer = ModelScorer::new(model, store, &tape, &enc)?;
        beam_search(&mut scorer, &cfg.beam)?
    };
    let visual = enc
        .visual_states(&mut tape)?
        .ok_or_else(|| contract_err!("document {} has no images", ex.doc_id))?;
    let selection = match cfg.selection {
        SelectionSource::Head => {
            let logits = model.select_logits(&mut tape, store, visual)?;
            let probs: Vec<f64> = tape.value(logits).iter().map(|&x| sigmoid(x as f64)).collect();
            select_images(&probs, cfg.k)
        }
        SelectionSource::Similarity => {
            let dec = decoder_rows(model, store, &mut tape, enc.hidden, &enc.mask(), &hyp.tokens)?;
            select_by_similarity(&rows(&tape, visual), &mean_of(&dec[1..]), cfg.k)
        }
    };
    Ok(DocOutput {
        doc_id: ex.doc_id.clone(),
        summary: decode_tokens(&hyp.tokens, vocab)?,
        summary_ids: hyp.tokens,
        selection,
    })
}

/// Runs inference over documents in parallel, preserving order.
pub fn infer_all(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    examples: &[PreparedExample],
    cfg: &InferenceConfig,
) -> Result<Vec<DocOutput>> {
    examples
        .par_iter()
        .map(|ex| infer(model, store, vocab, ex, cfg))
        .collect()
}

/// Image/summary pairs for the relevance scorer: every pseudo-labelled
/// image of a document paired with its gold summary.
pub fn relevance_pairs(examples: &[MultiModalExample], k: usize) -> Result<Vec<RelevancePair>> {
    let mut pairs = Vec::new();
    for (group, ex) in examples.iter().enumerate() {
        let labels = crate::training::build_selection_labels(&ex.captions, &ex.summary, k)?;
        for (img, _) in ex.images.iter().zip(labels).filter(|(_, l)| *l) {
            pairs.push(RelevancePair {
                image: img.clone(),
                text: ex.summary.clone(),
                group,
            });
        }
    }
    Ok(pairs)
}

pub fn fit_scorer(train: &[MultiModalExample], k: usize) -> Result<RetrievalScorer> {
    train_retrieval_scorer(&relevance_pairs(train, k)?, &ScorerConfig::default())
}

/// Scores outputs against their documents. The reference image set is
/// the top-`k` caption pseudo-labels.
pub fn score_outputs(
    examples: &[MultiModalExample],
    outputs: &[DocOutput],
    scorer: &RetrievalScorer,
    k: usize,
) -> Result<MetricReport> {
    if examples.len() != outputs.len() || examples.is_empty() {
        return Err(contract_err!(
            "{} outputs for {} documents",
            outputs.len(),
            examples.len()
        ));
    }
    let (mut r1, mut r2, mut rl, mut sims, mut ips) = (vec![], vec![], vec![], vec![], vec![]);
    for (ex, out) in examples.iter().zip(outputs) {
        if ex.doc_id != out.doc_id {
            return Err(contract_err!(
                "output {} does not match document {}",
                out.doc_id,
                ex.doc_id
            ));
        }
        r1.push(rouge_n(&out.summary, &ex.summary, 1));
        r2.push(rouge_n(&out.summary, &ex.summary, 2));
        rl.push(rouge_l(&out.summary, &ex.summary));
        let labels = crate::training::build_selection_labels(&ex.captions, &ex.summary, k)?;
        let reference: HashSet<usize> = labels.iter().enumerate().filter(|(_, l)| **l).map(|(i, _)| i).collect();
        ips.push(crate::metrics::image_precision(&reference, &out.selection.indices));
        let selected: Vec<_> = out.selection.indices.iter().map(|&i| &ex.images[i]).collect();
        sims.push(if selected.is_empty() {
            0.0
        } else {
            max_sim(&selected, &out.summary, scorer)?
        });
    }
    let ip = ips.iter().sum::<f64>() / ips.len() as f64;
    Ok(MetricReport::new(
        mean_rouge(&r1),
        mean_rouge(&r2),
        mean_rouge(&rl),
        corpus_max_sim(&sims),
        ip,
    ))
}

/// Cosine similarities between each visual state and each paragraph's
/// mean text state, then each summary sentence's mean decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub image_ids: Vec<String>,
    pub columns: Vec<String>,
    pub n_paragraphs: usize,
    pub values: Vec<Vec<f64>>,
}

impl AlignmentMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (id, row) in self.image_ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }

    /// Mean of image `i` vs paragraph `i` minus the mean of the other
    /// image/paragraph cells; `None` without at least two of each.
    pub fn diagonal_gap(&self) -> Option<f64> {
        let n = self.values.len().min(self.n_paragraphs);
        if n < 2 {
            return None;
        }
        let (mut diag, mut off) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    diag += self.values[i][j];
                } else {
                    off += self.values[i][j];
                }
            }
        }
        Some(diag / n as f64 - off / (n * (n - 1)) as f64)
    }
}

/// Splits ids at `sep`, dropping the separators.
fn segments(ids: &[u32], is_sep: impl Fn(u32) -> bool) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for (i, &id) in ids.iter().enumerate() {
        if is_sep(id) {
            out.push(Vec::new());
        } else {
            out.last_mut().expect("nonempty").push(i);
        }
    }
    out
}

/// Relevance matrix for one document against its gold summary.
pub fn alignment(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    ex: &MultiModalExample,
) -> Result<AlignmentMatrix> {
    let prepared = prepare_example(ex, vocab, &model.config, 1)?;
    let (input, _) = prepared.view(&prepared.identity());
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, store, &input)?;
    let visual = enc
        .visual_states(&mut tape)?
        .ok_or_else(|| contract_err!("document {} has no images", ex.doc_id))?;
    let visual = rows(&tape, visual);
    let text_states = enc.text_states(&mut tape)?;
    let text_rows = rows(&tape, text_states);

    // Drop START and END; truncated paragraphs keep an empty column.
    let body = &prepared.text[1..prepared.text.len() - 1];
    let mut paragraphs: Vec<Vec<f64>> = segments(body, |id| id == SEP)
        .into_iter()
        .map(|seg| mean_of(&seg.iter().map(|&i| text_rows[i + 1].clone()).collect::<Vec<_>>()))
        .collect();
    paragraphs.resize(ex.paragraphs.len(), Vec::new());
    paragraphs.truncate(ex.paragraphs.len());

    let summary = encode_document(&ex.summary, vocab, model.config.max_summary_tokens).ids;
    let content = &summary[1..summary.len() - 1];
    let dec = decoder_rows(model, store, &mut tape, enc.hidden, &enc.mask(), content)?;
    let full_stop = vocab.id(".");
    let sentences: Vec<Vec<f64>> = segments(content, |id| id == full_stop)
        .into_iter()
        .filter(|seg| !seg.is_empty())
        .map(|seg| mean_of(&seg.iter().map(|&i| dec[i + 1].clone()).collect::<Vec<_>>()))
        .collect();

    let mut columns: Vec<String> = (0..paragraphs.len()).map(|i| format!("paragraph_{i}")).collect();
    columns.extend((0..sentences.len()).map(|i| format!("sentence_{i}")));
    let values = visual
        .iter()
        .map(|v| {
            paragraphs
                .iter()
                .chain(&sentences)
                .map(|t| if t.is_empty() { 0.0 } else { cosine(v, t) })
                .collect()
        })
        .collect();
    let image_ids = (0..visual.len())
        .map(|i| ex.image_paths.get(i).cloned().unwrap_or_else(|| format!("image_{i}")))
        .collect();
    Ok(AlignmentMatrix {
        image_ids,
        columns,
        n_paragraphs: paragraphs.len(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_corpus, SynthConfig};

    fn setup() -> (Model, ParamStore<f32>, Vocab, Vec<MultiModalExample>) {
        let corpus = generate_corpus(&SynthConfig {
            n_docs: 60,
            ..SynthConfig::default()
        })
        .unwrap();
        let docs: Vec<MultiModalExample> = corpus.all().map(|d| d.example.clone()).collect();
        let vocab = Vocab::build(docs.iter().flat_map(|d| d.paragraphs.iter().chain([&d.summary])), 512).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            tokenizer_layers: 1,
            vocab_size: vocab.len(),
            max_tokens: 64,
            max_summary_tokens: 16,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, 3).unwrap();
        (model, store, vocab, docs)
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let (model, store, vocab, docs) = setup();
        let cfg = InferenceConfig {
            beam: BeamConfig {
                beam: 3,
                min_len: 2,
                max_len: 8,
                end: crate::text::END,
            },
            k: 3,
            selection: SelectionSource::Head,
        };
        let prepared: Vec<_> = docs[..4]
            .iter()
            .map(|d| prepare_example(d, &vocab, &model.config, 3).unwrap())
            .collect();
        let a = infer_all(&model, &store, &vocab, &prepared, &cfg).unwrap();
        let b = infer_all(&model, &store, &vocab, &prepared, &cfg).unwrap();
        assert_eq!(a, b);
        for (o, p) in a.iter().zip(&prepared) {
            assert!((2..=8).contains(&o.summary_ids.len()), "{:?}", o.summary_ids);
            assert_eq!(o.selection.indices.len(), 3.min(p.n_images()));
        }
        let sim = InferenceConfig {
            selection: SelectionSource::Similarity,
            ..cfg
        };
        let c = infer(&model, &store, &vocab, &prepared[0], &sim).unwrap();
        assert_eq!(c.summary_ids, a[0].summary_ids);
    }

    #[test]
    fn gold_outputs_score_perfect_rouge() {
        let (_, _, _, docs) = setup();
        let scorer = fit_scorer(&docs, 3).unwrap();
        let outputs: Vec<DocOutput> = docs
            .iter()
            .map(|d| {
                let labels = crate::training::build_selection_labels(&d.captions, &d.summary, 3).unwrap();
                DocOutput {
                    doc_id: d.doc_id.clone(),
                    summary_ids: vec![],
                    summary: d.summary.clone(),
                    selection: Selection {
                        indices: (0..labels.len()).filter(|&i| labels[i]).collect(),
                        short: false,
                    },
                }
            })
            .collect();
        let report = score_outputs(&docs, &outputs, &scorer, 3).unwrap();
        assert_eq!(report.rouge1.f1, 1.0);
        assert_eq!(report.rouge_l.f1, 1.0);
        assert_eq!(report.ip, 1.0);
        assert!((0.0..=1.0).contains(&report.max_sim));
    }

    #[test]
    fn alignment_shape_and_bounds() {
        let (model, store, vocab, docs) = setup();
        let doc = &docs[0];
        let m = alignment(&model, &store, &vocab, doc).unwrap();
        let sentences = doc.summary.matches('.').count();
        assert_eq!(m.values.len(), doc.images.len());
        assert_eq!(m.columns.len(), doc.paragraphs.len() + sentences);
        assert!(m.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let csv = m.to_csv();
        assert!(csv.starts_with("image_id,paragraph_0,"));
        assert_eq!(csv.lines().count(), doc.images.len() + 1);
        assert!(m.diagonal_gap().is_some());
    }
}
