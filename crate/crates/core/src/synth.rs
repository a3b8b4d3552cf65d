//! Synthetic multimodal corpus with known paragraph-image alignment.
//!
//! Every paragraph carries a few salient words. Each salient word owns one
//! 8×8 block of the 32×32 image grid, so a paragraph's image lights up
//! exactly the blocks of its salient words over a faint background noise
//! drawn from the whole paragraph text. Important paragraphs open with a cue word, and the gold
//! summary lists the salient words of the important paragraphs in order.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::MultiModalExample;
use crate::error::{contract_err, Error, Result};
use crate::image::ImageGrid;
use crate::text::tokenize;

pub const IMAGE_SIDE: usize = 32;
pub const BLOCK: usize = 8;
/// One salient word per block of the grid.
pub const SALIENT_WORDS: usize = (IMAGE_SIDE / BLOCK) * (IMAGE_SIDE / BLOCK);
pub const CUE: &str = "key";
const NOISE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Salient words, the cue word and filler words together.
    pub vocab_pool: usize,
    pub min_paragraphs: usize,
    pub max_paragraphs: usize,
    pub salient_per_paragraph: usize,
    pub important_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 1000,
            vocab_pool: 200,
            min_paragraphs: 3,
            max_paragraphs: 8,
            salient_per_paragraph: 2,
            important_per_doc: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs < 10 {
            return Err(Error::Config(format!("n_docs ≥ 10 required, got {}", self.n_docs)));
        }
        if self.min_paragraphs == 0 || self.min_paragraphs > self.max_paragraphs {
            return Err(Error::Config(format!(
                "paragraph range {}..={} is empty or starts at zero",
                self.min_paragraphs, self.max_paragraphs
            )));
        }
        if self.salient_per_paragraph == 0 || self.max_paragraphs * self.salient_per_paragraph > SALIENT_WORDS {
            return Err(Error::Config(format!(
                "{} paragraphs of {} salient words exceed the {SALIENT_WORDS} image blocks",
                self.max_paragraphs, self.salient_per_paragraph
            )));
        }
        if self.vocab_pool < SALIENT_WORDS + 2 {
            return Err(Error::Config(format!(
                "vocab_pool {} leaves no filler words beside {SALIENT_WORDS} salient words and the cue",
                self.vocab_pool
            )));
        }
        if self.important_per_doc == 0 {
            return Err(Error::Config("important_per_doc must be positive".into()));
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The fixed word inventory and its word-to-block layout.
#[derive(Clone, Debug)]
pub struct WordPool {
    salient: Vec<String>,
    filler: Vec<String>,
    /// Block index and intensity of each salient word.
    blocks: Vec<(usize, f32)>,
}

impl WordPool {
    pub fn new(size: usize) -> Result<Self> {
        if size < SALIENT_WORDS + 2 {
            return Err(Error::Config(format!("word pool of {size} is too small")));
        }
        const CONS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let syllables: Vec<String> = CONS
            .iter()
            .flat_map(|&c| VOWELS.iter().map(move |&v| String::from_utf8(vec![c, v]).unwrap()))
            .collect();
        let n = syllables.len() * syllables.len();
        let words: Vec<String> = (0..size - 1)
            .map(|i| {
                let k = (i * 37 + 11) % n;
                format!("{}{}", syllables[k / syllables.len()], syllables[k % syllables.len()])
            })
            .collect();
        let salient = words[..SALIENT_WORDS].to_vec();
        let filler = words[SALIENT_WORDS..].to_vec();
        let mut order: Vec<usize> = (0..SALIENT_WORDS).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
        let blocks = salient
            .iter()
            .zip(order)
            .map(|(w, b)| {
                let u = (fnv1a(w.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64;
                (b, (0.6 + 0.4 * u) as f32)
            })
            .collect();
        Ok(WordPool {
            salient,
            filler,
            blocks,
        })
    }

    pub fn salient(&self) -> &[String] {
        &self.salient
    }

    pub fn filler(&self) -> &[String] {
        &self.filler
    }

    pub fn salient_index(&self, word: &str) -> Option<usize> {
        self.salient.iter().position(|w| w == word)
    }

    /// Top-left pixel of a salient word's block.
    pub fn block_origin(&self, word: &str) -> Option<(usize, usize)> {
        let (b, _) = self.blocks[self.salient_index(word)?];
        let per_row = IMAGE_SIDE / BLOCK;
        Some(((b / per_row) * BLOCK, (b % per_row) * BLOCK))
    }

    /// Deterministic 32×32 image of a paragraph: salient words light their
    /// blocks over a faint noise seeded by the full token sequence.
    pub fn render_image(&self, paragraph: &str) -> Result<ImageGrid> {
        let tokens = tokenize(paragraph);
        let mut pixels = vec![0.0f64; IMAGE_SIDE * IMAGE_SIDE];
        let mut salient = 0;
        for i in tokens.iter().filter_map(|t| self.salient_index(t)) {
            salient += 1;
            let (b, level) = self.blocks[i];
            let per_row = IMAGE_SIDE / BLOCK;
            let (r0, c0) = ((b / per_row) * BLOCK, (b % per_row) * BLOCK);
            for r in r0..r0 + BLOCK {
                for c in c0..c0 + BLOCK {
                    pixels[r * IMAGE_SIDE + c] = level as f64;
                }
            }
        }
        if salient == 0 {
            return Err(contract_err!("paragraph {paragraph:?} has no salient word"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tokens.join(" ").as_bytes()));
        for p in pixels.iter_mut() {
            let noise = rng.gen::<f64>() * NOISE;
            *p = ((*p + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        ImageGrid::new(
            IMAGE_SIDE,
            IMAGE_SIDE,
            1,
            pixels.into_iter().map(|p| p as f32).collect(),
        )
    }
}

/// A generated document plus its construction-time importance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDoc {
    pub example: MultiModalExample,
    pub important: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthDoc>,
    pub valid: Vec<SynthDoc>,
    pub test: Vec<SynthDoc>,
}

impl SynthCorpus {
    pub fn all(&self) -> impl Iterator<Item = &SynthDoc> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Whether a paragraph opens with the cue word.
pub fn is_important(paragraph: &str) -> bool {
    tokenize(paragraph).first().is_some_and(|t| t == CUE)
}

fn generate_doc(cfg: &SynthConfig, pool: &WordPool, idx: usize) -> Result<SynthDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(&(idx as u64).to_le_bytes()));
    let n = rng.gen_range(cfg.min_paragraphs..=cfg.max_paragraphs);
    let k = cfg.salient_per_paragraph;
    let salient = index::sample(&mut rng, SALIENT_WORDS, n * k).into_vec();
    let important_idx = index::sample(&mut rng, n, cfg.important_per_doc.min(n)).into_vec();
    let important: Vec<bool> = (0..n).map(|i| important_idx.contains(&i)).collect();
    let filler = pool.filler();
    let mut paragraphs = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut summary = Vec::new();
    for (i, &imp) in important.iter().enumerate() {
        let words: Vec<&str> = salient[i * k..(i + 1) * k]
            .iter()
            .map(|&s| pool.salient()[s].as_str())
            .collect();
        let lead = if imp {
            CUE
        } else {
            filler[rng.gen_range(0..filler.len())].as_str()
        };
        let extra = filler[rng.gen_range(0..filler.len())].as_str();
        let caption = words.join(" ");
        let paragraph = format!("{lead} {extra} {caption}.");
        images.push(pool.render_image(&paragraph)?);
        if imp {
            summary.push(format!("{caption}."));
        }
        paragraphs.push(paragraph);
        captions.push(caption);
    }
    Ok(SynthDoc {
        example: MultiModalExample {
            doc_id: format!("doc{idx:05}"),
            paragraphs,
            images,
            captions,
            summary: summary.join(" "),
            image_paths: Vec::new(),
        },
        important,
    })
}

/// Generates `n_docs` documents split 80/10/10 by document order.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let pool = WordPool::new(cfg.vocab_pool)?;
    let docs = (0..cfg.n_docs)
        .map(|i| generate_doc(cfg, &pool, i))
        .collect::<Result<Vec<_>>>()?;
    let n_train = cfg.n_docs * 8 / 10;
    let n_valid = cfg.n_docs / 10;
    let mut it = docs.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let valid = it.by_ref().take(n_valid).collect();
    let test = it.collect();
    Ok(SynthCorpus { train, valid, test })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub docs: usize,
    pub avg_tokens: f64,
    pub avg_images: f64,
    pub avg_summary_tokens: f64,
}

pub fn corpus_stats<'a>(examples: impl IntoIterator<Item = &'a MultiModalExample>) -> CorpusStats {
    let (mut docs, mut tokens, mut images, mut summary) = (0usize, 0usize, 0usize, 0usize);
    for ex in examples {
        docs += 1;
        tokens += ex.paragraphs.iter().map(|p| tokenize(p).len()).sum::<usize>();
        images += ex.images.len();
        summary += tokenize(&ex.summary).len();
    }
    let per = |x: usize| if docs == 0 { 0.0 } else { x as f64 / docs as f64 };
    CorpusStats {
        docs,
        avg_tokens: per(tokens),
        avg_images: per(images),
        avg_summary_tokens: per(summary),
    }
}

/// Pearson correlation of two equally sized pixel arrays.
pub fn pixel_correlation(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let (x, y) = (a.pixels(), b.pixels());
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &q) in x.iter().zip(y) {
        let (dx, dy) = (p as f64 - mx, q as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Mean brightness of the blocks a paragraph's salient words own.
pub fn block_evidence(pool: &WordPool, paragraph: &str, image: &ImageGrid) -> f64 {
    let origins: Vec<(usize, usize)> = tokenize(paragraph)
        .iter()
        .filter_map(|t| pool.block_origin(t))
        .collect();
    if origins.is_empty() {
        return 0.0;
    }
    let px = image.pixels();
    let w = image.width();
    let mut total = 0.0;
    for (r0, c0) in &origins {
        for r in *r0..r0 + BLOCK {
            for c in *c0..c0 + BLOCK {
                total += px[r * w + c] as f64;
            }
        }
    }
    total / (origins.len() * BLOCK * BLOCK) as f64
}
