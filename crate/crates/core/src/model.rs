//! The joint vision-language encoder-decoder with its reordering and
//! selection heads, plus the separate-encoder cross-attention baseline.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::image::{ImageTokenizer, TokenizerConfig};
use crate::nn::{DecoderBlock, EncoderBlock, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnMask, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::text::PAD;

/// Number of reorder classes; documents keep at most this many images.
pub const MAX_IMAGES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One encoder over the concatenated visual and text tokens.
    Joint,
    /// Text-only encoder fused with the images by one cross-attention block.
    Cross,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Cross => "cross",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "cross" => Ok(Mode::Cross),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected joint or cross"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskFlags {
    pub generation: bool,
    pub selection: bool,
    pub reordering: bool,
}

pub const TASK_NAMES: [&str; 3] = ["gen", "sel", "reo"];

impl TaskFlags {
    pub const ALL: TaskFlags = TaskFlags {
        generation: true,
        selection: true,
        reordering: true,
    };
    pub const GEN_ONLY: TaskFlags = TaskFlags {
        generation: true,
        selection: false,
        reordering: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.generation || self.selection || self.reordering) {
            return Err(Error::Config("no training task enabled".into()));
        }
        if !self.generation {
            return Err(Error::Config("the generation task must be enabled".into()));
        }
        Ok(())
    }
}

impl fmt::Display for TaskFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [self.generation, self.selection, self.reordering]
            .iter()
            .zip(TASK_NAMES)
            .filter(|(on, _)| **on)
            .map(|(_, n)| n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for TaskFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = TaskFlags {
            generation: false,
            selection: false,
            reordering: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "gen" => flags.generation = true,
                "sel" => flags.selection = true,
                "reo" => flags.reordering = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown task {other:?}; valid tasks are {}",
                        TASK_NAMES.join(", ")
                    )))
                }
            }
        }
        flags.validate()?;
        Ok(flags)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub generation: f64,
    pub selection: f64,
    pub reordering: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            generation: 1.0,
            selection: 1.0,
            reordering: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_summary_tokens: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub tokenizer_layers: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: 512,
            max_tokens: 128,
            max_summary_tokens: 48,
            patch_size: 8,
            image_size: 32,
            tokenizer_layers: 2,
            mode: Mode::Joint,
        }
    }
}

impl ModelConfig {
    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            patch: self.patch_size,
            dim: self.d_model,
            layers: self.tokenizer_layers,
            heads: self.n_heads,
            image_size: self.image_size,
            channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.max_tokens < 2 || self.max_summary_tokens < 2 {
            return Err(Error::Config(
                "sequence limits must leave room for the sentinels".into(),
            ));
        }
        if self.vocab_size < crate::text::RESERVED.len() {
            return Err(Error::Config("vocabulary smaller than the reserved tokens".into()));
        }
        self.tokenizer().validate()
    }
}

/// Inputs for one document: patches per image (in slot order) and the
/// encoded text including its sentinels.
#[derive(Clone, Debug)]
pub struct ModelInput<S = f32> {
    pub patches: Vec<Tensor<S>>,
    pub text: Vec<u32>,
}

impl<S: Scalar> ModelInput<S> {
    pub fn cast<T: Scalar>(&self) -> ModelInput<T> {
        ModelInput {
            patches: self.patches.iter().map(Tensor::cast).collect(),
            text: self.text.clone(),
        }
    }
}

/// `H_L` with the visual rows first, then the text rows.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub n_visual: usize,
    pub n_text: usize,
    /// `true` marks padded rows; unbatched documents have none.
    pub padding: Vec<bool>,
    /// Self-attention node of every encoder layer.
    pub attention: Vec<Var>,
}

impl EncoderOutput {
    pub fn visual_states<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Option<Var>> {
        if self.n_visual == 0 {
            return Ok(None);
        }
        tape.slice_rows(self.hidden, 0, self.n_visual).map(Some)
    }

    pub fn text_states<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var> {
        tape.slice_rows(self.hidden, self.n_visual, self.n_text)
    }

    pub fn mask(&self) -> AttnMask {
        if self.padding.iter().any(|&p| p) {
            AttnMask::padding(self.padding.clone())
        } else {
            AttnMask::none()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    /// Shared reorder classifier: `[d_model, C]` weight and `[C]` bias.
    pub reorder: Linear,
    /// Selection scorer: `[d_model, 1]` weight and `[1]` bias.
    pub select: Linear,
}

#[derive(Clone, Debug)]
struct CrossFusion {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

/// Loss nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub generation: Option<Var>,
    pub selection: Option<Var>,
    pub reordering: Option<Var>,
    pub total: Var,
}

/// Per-document supervision in slot order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Targets {
    pub summary: Vec<u32>,
    pub selection: Vec<bool>,
    pub reorder: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: ParamId,
    pub text_positions: ParamId,
    pub image_positions: ParamId,
    pub summary_positions: ParamId,
    pub tokenizer: ImageTokenizer,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_norm: LayerNorm,
    pub heads: Heads,
    fusion: Option<CrossFusion>,
}

impl Model {
    /// Registers every parameter in `store` with seeded normal(0, 0.02)
    /// weights. The cross-mode fusion block is created last, so joint and
    /// cross models built from one seed share all other initial values.
    pub fn new<S: Scalar>(config: ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let h = config.n_heads;
        let token_embedding = store.add_normal("embed.tokens", &[config.vocab_size, d], &mut rng)?;
        let text_positions = store.add_normal("embed.text_positions", &[config.max_tokens, d], &mut rng)?;
        let image_positions = store.add_normal("embed.image_positions", &[MAX_IMAGES, d], &mut rng)?;
        let summary_positions =
            store.add_normal("embed.summary_positions", &[config.max_summary_tokens, d], &mut rng)?;
        let tokenizer = ImageTokenizer::new(store, "image", config.tokenizer(), &mut rng)?;
        let encoder = (0..config.enc_layers)
            .map(|l| EncoderBlock::new(store, &format!("encoder.block{l}"), d, h, &mut rng))
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d)?;
        let decoder = (0..config.dec_layers)
            .map(|l| DecoderBlock::new(store, &format!("decoder.block{l}"), d, h, &mut rng))
            .collect::<Result<_>>()?;
        let decoder_norm = LayerNorm::new(store, "decoder.norm", d)?;
        let heads = Heads {
            reorder: Linear::new(store, "head.reorder", d, MAX_IMAGES, true, &mut rng)?,
            select: Linear::new(store, "head.select", d, 1, true, &mut rng)?,
        };
        let fusion = match config.mode {
            Mode::Joint => None,
            Mode::Cross => Some(CrossFusion {
                norm: LayerNorm::new(store, "fusion.norm", d)?,
                attn: MultiHeadAttention::new(store, "fusion.attn", d, h, &mut rng)?,
            }),
        };
        Ok(Model {
            config,
            token_embedding,
            text_positions,
            image_positions,
            summary_positions,
            tokenizer,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            heads,
            fusion,
        })
    }

    pub fn reorder_head_params(&self) -> [ParamId; 2] {
        [
            self.heads.reorder.weight,
            self.heads.reorder.bias.expect("reorder head has a bias"),
        ]
    }

    pub fn select_head_params(&self) -> [ParamId; 2] {
        [
            self.heads.select.weight,
            self.heads.select.bias.expect("select head has a bias"),
        ]
    }

    /// Freezes the heads of disabled tasks so training never updates them.
    pub fn apply_task_flags<S: Scalar>(&self, store: &mut ParamStore<S>, flags: TaskFlags) {
        for id in self.reorder_head_params() {
            store.set_trainable(id, flags.reordering);
        }
        for id in self.select_head_params() {
            store.set_trainable(id, flags.selection);
        }
    }

    /// `E_v`: one visual token per image, or `None` without images.
    pub fn visual_tokens<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        patches: &[Tensor<S>],
    ) -> Result<Option<Var>> {
        if patches.is_empty() {
            return Ok(None);
        }
        self.tokenizer.forward(tape, store, patches).map(Some)
    }

    /// `E_D`: token embeddings of the sentinel-wrapped document.
    pub fn text_embeddings<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, ids: &[u32]) -> Result<Var> {
        if ids.len() > self.config.max_tokens {
            return Err(contract_err!(
                "document of {} ids exceeds max_tokens {}",
                ids.len(),
                self.config.max_tokens
            ));
        }
        let table = tape.param(store, self.token_embedding);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather(table, &ids)
    }

    fn add_positions<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        table: ParamId,
    ) -> Result<Var> {
        let rows = tape.rows(x);
        let table = tape.param(store, table);
        let pos = tape.slice_rows(table, 0, rows)?;
        tape.add(x, pos)
    }

    fn check_visual<S: Scalar>(&self, tape: &Tape<S>, visual: Option<Var>) -> Result<usize> {
        let m = visual.map_or(0, |v| tape.rows(v));
        if m > MAX_IMAGES {
            return Err(contract_err!(
                "{m} images exceed the limit of {MAX_IMAGES}; truncate first"
            ));
        }
        Ok(m)
    }

    /// Joint encoding: `H₀ = [E_v; E_D]` through full bidirectional
    /// self-attention across both modalities.
    pub fn encode_joint<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        visual: Option<Var>,
        text: Var,
        padding: &[bool],
    ) -> Result<EncoderOutput> {
        let m = self.check_visual(tape, visual)?;
        let n_text = tape.rows(text);
        let text = self.add_positions(tape, store, text, self.text_positions)?;
        let h0 = match visual {
            Some(v) => {
                let v = self.add_positions(tape, store, v, self.image_positions)?;
                tape.concat_rows(&[v, text])?
            }
            None => text,
        };
        let padding = full_padding(padding, m + n_text)?;
        let mask = if padding.iter().any(|&p| p) {
            AttnMask::padding(padding.clone())
        } else {
            AttnMask::none()
        };
        let mut h = h0;
        let mut attention = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (out, att) = block.forward(tape, store, h, &mask)?;
            h = out;
            attention.push(att);
        }
        let hidden = self.encoder_norm.forward(tape, store, h)?;
        Ok(EncoderOutput {
            hidden,
            n_visual: m,
            n_text,
            padding,
            attention,
        })
    }

    /// Separate-encoder baseline: text encoded alone, then one residual
    /// cross-attention block from text queries to image keys/values. The
    /// visual rows of the output are the image embeddings themselves.
    pub fn encode_cross<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        visual: Option<Var>,
        text: Var,
        padding: &[bool],
    ) -> Result<EncoderOutput> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Config("cross encoding needs a model built in cross mode".into()))?;
        let m = self.check_visual(tape, visual)?;
        let n_text = tape.rows(text);
        let padding = full_padding(padding, m + n_text)?;
        let text_pad = &padding[m..];
        let text_mask = if text_pad.iter().any(|&p| p) {
            AttnMask::padding(text_pad.to_vec())
        } else {
            AttnMask::none()
        };
        let mut h = self.add_positions(tape, store, text, self.text_positions)?;
        let mut attention = Vec::with_capacity(self.encoder.len() + 1);
        for block in &self.encoder {
            let (out, att) = block.forward(tape, store, h, &text_mask)?;
            h = out;
            attention.push(att);
        }
        let hidden = match visual {
            Some(v) => {
                let v = self.add_positions(tape, store, v, self.image_positions)?;
                let q = fusion.norm.forward(tape, store, h)?;
                let image_mask = AttnMask::padding(padding[..m].to_vec());
                let (fused, att) = fusion.attn.forward(tape, store, q, v, &image_mask)?;
                attention.push(att);
                let h = tape.add(h, fused)?;
                let stacked = tape.concat_rows(&[v, h])?;
                self.encoder_norm.forward(tape, store, stacked)?
            }
            None => self.encoder_norm.forward(tape, store, h)?,
        };
        Ok(EncoderOutput {
            hidden,
            n_visual: m,
            n_text,
            padding,
            attention,
        })
    }

    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: &ModelInput<S>,
    ) -> Result<EncoderOutput> {
        if input.patches.len() > MAX_IMAGES {
            return Err(contract_err!(
                "{} images exceed the limit of {MAX_IMAGES}; truncate first",
                input.patches.len()
            ));
        }
        let visual = self.visual_tokens(tape, store, &input.patches)?;
        let text = self.text_embeddings(tape, store, &input.text)?;
        match self.config.mode {
            Mode::Joint => self.encode_joint(tape, store, visual, text, &[]),
            Mode::Cross => self.encode_cross(tape, store, visual, text, &[]),
        }
    }

    /// Final decoder states `[len, d]` for a prefix of summary ids,
    /// cross-attending to all of `memory`.
    pub fn decoder_states<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        memory: Var,
        memory_mask: &AttnMask,
        prefix: &[u32],
    ) -> Result<Var> {
        if prefix.is_empty() || prefix.len() > self.config.max_summary_tokens {
            return Err(contract_err!(
                "decoder prefix of {} ids outside 1..={}",
                prefix.len(),
                self.config.max_summary_tokens
            ));
        }
        let table = tape.param(store, self.token_embedding);
        let ids: Vec<usize> = prefix.iter().map(|&i| i as usize).collect();
        let x = tape.gather(table, &ids)?;
        let mut h = self.add_positions(tape, store, x, self.summary_positions)?;
        for block in &self.decoder {
            h = block.forward(tape, store, h, memory, memory_mask)?;
        }
        self.decoder_norm.forward(tape, store, h)
    }

    /// Vocabulary logits through the tied token embedding.
    pub fn vocab_logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, states: Var) -> Result<Var> {
        let table = tape.param(store, self.token_embedding);
        tape.matmul_bt(states, table)
    }

    /// Teacher-forced mean negative log-likelihood over the non-PAD target
    /// tokens of a START…END summary.
    pub fn generation_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        enc: &EncoderOutput,
        summary: &[u32],
    ) -> Result<Var> {
        if summary.len() < 2 {
            return Err(contract_err!("summary target needs at least one token after START"));
        }
        let n = summary.len().min(self.config.max_summary_tokens + 1);
        let inputs = &summary[..n - 1];
        let targets: Vec<Option<usize>> = summary[1..n]
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let states = self.decoder_states(tape, store, enc.hidden, &enc.mask(), inputs)?;
        let logits = self.vocab_logits(tape, store, states)?;
        tape.cross_entropy(logits, &targets)
    }

    pub fn reorder_logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, visual: Var) -> Result<Var> {
        self.heads.reorder.forward(tape, store, visual)
    }

    /// Mean cross-entropy of the shared reorder head against each slot's
    /// original position.
    pub fn reorder_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        visual: Var,
        original_positions: &[usize],
    ) -> Result<Var> {
        if original_positions.len() != tape.rows(visual) {
            return Err(shape_err!(
                "{} reorder labels for {} visual states",
                original_positions.len(),
                tape.rows(visual)
            ));
        }
        if let Some(bad) = original_positions.iter().find(|&&p| p >= MAX_IMAGES) {
            return Err(contract_err!("reorder label {bad} is not below {MAX_IMAGES}"));
        }
        let logits = self.reorder_logits(tape, store, visual)?;
        let targets: Vec<Option<usize>> = original_positions.iter().map(|&p| Some(p)).collect();
        tape.cross_entropy(logits, &targets)
    }

    pub fn select_logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, visual: Var) -> Result<Var> {
        self.heads.select.forward(tape, store, visual)
    }

    /// Mean binary cross-entropy of the per-image selection probability.
    pub fn select_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        visual: Var,
        labels: &[bool],
    ) -> Result<Var> {
        let logits = self.select_logits(tape, store, visual)?;
        let targets: Vec<S> = labels.iter().map(|&l| if l { S::one() } else { S::zero() }).collect();
        tape.bce_with_logits(logits, &targets)
    }

    /// Forward pass of every enabled task and their weighted sum.
    pub fn losses<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: &ModelInput<S>,
        targets: &Targets,
        flags: TaskFlags,
        weights: &LossWeights,
    ) -> Result<LossVars> {
        flags.validate()?;
        let enc = self.encode(tape, store, input)?;
        let generation = self.generation_loss(tape, store, &enc, &targets.summary)?;
        let visual = enc.visual_states(tape)?;
        let selection = match (flags.selection, visual) {
            (true, Some(v)) => Some(self.select_loss(tape, store, v, &targets.selection)?),
            _ => None,
        };
        let reordering = match (flags.reordering, visual) {
            (true, Some(v)) => Some(self.reorder_loss(tape, store, v, &targets.reorder)?),
            _ => None,
        };
        let total = total_loss(tape, Some(generation), selection, reordering, flags, weights)?;
        Ok(LossVars {
            generation: Some(generation),
            selection,
            reordering,
            total,
        })
    }
}

fn full_padding(padding: &[bool], rows: usize) -> Result<Vec<bool>> {
    match padding.len() {
        0 => Ok(vec![false; rows]),
        n if n == rows => Ok(padding.to_vec()),
        n => Err(shape_err!("padding mask of {n} entries for {rows} rows")),
    }
}

/// Weighted sum of the enabled losses; a task without a loss node (for
/// instance selection on an image-free document) contributes nothing.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    generation: Option<Var>,
    selection: Option<Var>,
    reordering: Option<Var>,
    flags: TaskFlags,
    weights: &LossWeights,
) -> Result<Var> {
    flags.validate()?;
    let parts = [
        (flags.generation, generation, weights.generation),
        (flags.selection, selection, weights.selection),
        (flags.reordering, reordering, weights.reordering),
    ];
    let mut total: Option<Var> = None;
    for (on, var, w) in parts {
        let (true, Some(v)) = (on, var) else { continue };
        let v = if w == 1.0 { v } else { tape.scale(v, S::lit(w)) };
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    total.ok_or_else(|| contract_err!("no enabled task produced a loss"))
}

/// Images chosen for the multimodal summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Fewer than the requested number of images were available.
    pub short: bool,
}

fn top_k(scores: &[f64], k: usize) -> Selection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let short = k > scores.len();
    order.truncate(k.min(scores.len()));
    Selection { indices: order, short }
}

/// Top-`k` images by selection probability, ties to the lower index.
pub fn select_images(probabilities: &[f64], k: usize) -> Selection {
    top_k(probabilities, k)
}

/// Selection without a trained head: cosine similarity between each
/// visual state and a summary vector.
pub fn select_by_similarity(visual_states: &[Vec<f64>], summary: &[f64], k: usize) -> Selection {
    let scores: Vec<f64> = visual_states
        .iter()
        .map(|v| crate::tensor::cosine(v, summary))
        .collect();
    top_k(&scores, k)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_flags_parse_and_print() {
        let all: TaskFlags = "gen,sel,reo".parse().unwrap();
        assert_eq!(all, TaskFlags::ALL);
        assert_eq!(all.to_string(), "gen,sel,reo");
        assert_eq!("gen".parse::<TaskFlags>().unwrap(), TaskFlags::GEN_ONLY);
        let err = "gen,foo".parse::<TaskFlags>().unwrap_err().to_string();
        assert!(err.contains("gen, sel, reo"), "{err}");
        assert!("".parse::<TaskFlags>().is_err());
        assert!("sel".parse::<TaskFlags>().is_err());
    }

    #[test]
    fn total_is_plain_sum() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant_raw(vec![], vec![1.0]).unwrap();
        let s = tape.constant_raw(vec![], vec![2.0]).unwrap();
        let r = tape.constant_raw(vec![], vec![3.0]).unwrap();
        let w = LossWeights::default();
        let t = total_loss(&mut tape, Some(g), Some(s), Some(r), TaskFlags::ALL, &w).unwrap();
        assert_eq!(tape.scalar_value(t).unwrap(), 6.0);
        let t = total_loss(&mut tape, Some(g), Some(s), Some(r), TaskFlags::GEN_ONLY, &w).unwrap();
        assert_eq!(t, g);
        let none = TaskFlags {
            generation: false,
            selection: false,
            reordering: false,
        };
        assert!(total_loss(&mut tape, Some(g), None, None, none, &w).is_err());
    }

    #[test]
    fn selection_ranking() {
        assert_eq!(select_images(&[0.9, 0.1, 0.5], 2).indices, vec![0, 2]);
        assert_eq!(select_images(&[0.4, 0.4, 0.4], 1).indices, vec![0]);
        let s = select_images(&[0.2, 0.8], 3);
        assert_eq!(s.indices, vec![1, 0]);
        assert!(s.short);
    }

    #[test]
    fn similarity_fallback_ranks_by_cosine() {
        let states = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]];
        assert_eq!(select_by_similarity(&states, &[0.0, 2.0], 2).indices, vec![1, 2]);
    }

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab_size: 30,
            max_tokens: 64,
            max_summary_tokens: 16,
            patch_size: 8,
            image_size: 16,
            tokenizer_layers: 1,
            mode,
        }
    }

    fn build(mode: Mode, seed: u64) -> (Model, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let model = Model::new(tiny(mode), &mut store, seed).unwrap();
        (model, store)
    }

    fn random_input(m: usize, t: usize, seed: u64) -> ModelInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..m)
            .map(|_| Tensor::randn(vec![4, 64], 1.0, &mut rng).unwrap())
            .collect();
        let mut text = vec![crate::text::START];
        text.extend((0..t).map(|i| 5 + (i as u32 * 7 + seed as u32) % 25));
        text.push(crate::text::END);
        ModelInput { patches, text }
    }

    fn encode(model: &Model, store: &ParamStore<f64>, input: &ModelInput<f64>) -> (Tape<f64>, EncoderOutput) {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, store, input).unwrap();
        (tape, enc)
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    #[test]
    fn joint_row_count() {
        let (model, store) = build(Mode::Joint, 1);
        let (tape, enc) = encode(&model, &store, &random_input(3, 50, 2));
        assert_eq!(tape.rows(enc.hidden), 55);
        assert_eq!((enc.n_visual, enc.n_text), (3, 52));
    }

    #[test]
    fn too_many_images_rejected() {
        let (model, store) = build(Mode::Joint, 1);
        let mut tape = Tape::new();
        assert!(matches!(
            model.encode(&mut tape, &store, &random_input(11, 3, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn modes_agree_without_images() {
        let (joint, js) = build(Mode::Joint, 4);
        let (cross, cs) = build(Mode::Cross, 4);
        let input = random_input(0, 12, 5);
        let (jt, je) = encode(&joint, &js, &input);
        let (ct, ce) = encode(&cross, &cs, &input);
        assert_eq!(jt.value(je.hidden), ct.value(ce.hidden));
    }

    #[test]
    fn modes_differ_with_images() {
        let (joint, js) = build(Mode::Joint, 4);
        let (cross, cs) = build(Mode::Cross, 4);
        let input = random_input(3, 12, 5);
        let (jt, je) = encode(&joint, &js, &input);
        let (ct, ce) = encode(&cross, &cs, &input);
        let diff: f64 = jt
            .value(je.hidden)
            .iter()
            .zip(ct.value(ce.hidden))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn text_attends_to_images_in_joint_mode() {
        let (model, store) = build(Mode::Joint, 6);
        let (tape, enc) = encode(&model, &store, &random_input(3, 10, 7));
        let n = enc.n_visual + enc.n_text;
        let probs = tape.attention_probs(enc.attention[0]).unwrap();
        for h in 0..2 {
            for q in enc.n_visual..n {
                let row = &probs[(h * n + q) * n..(h * n + q + 1) * n];
                assert!(row[..enc.n_visual].iter().sum::<f64>() > 1e-3);
            }
        }
    }

    #[test]
    fn cross_text_attention_ignores_images() {
        let (model, store) = build(Mode::Cross, 6);
        let a = random_input(3, 10, 7);
        let mut b = random_input(2, 10, 9);
        b.text = a.text.clone();
        let (ta, ea) = encode(&model, &store, &a);
        let (tb, eb) = encode(&model, &store, &b);
        assert_eq!(ta.attention_probs(ea.attention[0]), tb.attention_probs(eb.attention[0]));
    }

    #[test]
    fn uniform_decoder_gives_ln_v() {
        let (model, mut store) = build(Mode::Joint, 8);
        store
            .get_mut(model.token_embedding)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let input = random_input(2, 6, 1);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let loss = model
            .generation_loss(&mut tape, &store, &enc, &[1, 7, 8, 9, 2])
            .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 30f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn generation_loss_matches_log_softmax_oracle() {
        let (model, store) = build(Mode::Joint, 9);
        let input = random_input(2, 6, 3);
        let summary = [1, 7, 8, 0, 9, 2];
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let loss = model.generation_loss(&mut tape, &store, &enc, &summary).unwrap();
        let states = model
            .decoder_states(&mut tape, &store, enc.hidden, &enc.mask(), &summary[..5])
            .unwrap();
        let logits = model.vocab_logits(&mut tape, &store, states).unwrap();
        let vals = tape.value(logits);
        let mut nll = 0.0;
        let mut count = 0;
        for (j, &t) in summary[1..].iter().enumerate() {
            if t == PAD {
                continue;
            }
            nll -= log_softmax(&vals[j * 30..(j + 1) * 30])[t as usize];
            count += 1;
        }
        assert!((tape.scalar_value(loss).unwrap() - nll / count as f64).abs() < 1e-5);
        assert!(model.generation_loss(&mut tape, &store, &enc, &[1]).is_err());
    }

    #[test]
    fn reorder_loss_uniform_and_oracle() {
        let (model, mut store) = build(Mode::Joint, 10);
        let input = random_input(3, 5, 4);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let v = enc.visual_states(&mut tape).unwrap().unwrap();
        let loss = model.reorder_loss(&mut tape, &store, v, &[2, 0, 1]).unwrap();
        let logits = model.reorder_logits(&mut tape, &store, v).unwrap();
        let vals = tape.value(logits).to_vec();
        let oracle = -[2usize, 0, 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| log_softmax(&vals[i * 10..(i + 1) * 10])[c])
            .sum::<f64>()
            / 3.0;
        assert!((tape.scalar_value(loss).unwrap() - oracle).abs() < 1e-6);
        assert!(model.reorder_loss(&mut tape, &store, v, &[10, 0, 1]).is_err());

        store
            .get_mut(model.heads.reorder.weight)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let v = enc.visual_states(&mut tape).unwrap().unwrap();
        let loss = model.reorder_loss(&mut tape, &store, v, &[1, 2, 0]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn select_loss_matches_bce_oracle() {
        let (model, store) = build(Mode::Joint, 11);
        let input = random_input(4, 5, 6);
        let labels = [true, false, false, true];
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let v = enc.visual_states(&mut tape).unwrap().unwrap();
        let loss = model.select_loss(&mut tape, &store, v, &labels).unwrap();
        let logits = model.select_logits(&mut tape, &store, v).unwrap();
        let oracle = -tape
            .value(logits)
            .iter()
            .zip(labels)
            .map(|(&z, y)| {
                let p = sigmoid(z);
                if y {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 4.0;
        assert!((tape.scalar_value(loss).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn generation_only_leaves_heads_untouched() {
        let (model, mut store) = build(Mode::Joint, 12);
        model.apply_task_flags(&mut store, TaskFlags::GEN_ONLY);
        let input = random_input(3, 5, 6);
        let targets = Targets {
            summary: vec![1, 6, 7, 2],
            selection: vec![true, false, true],
            reorder: vec![1, 0, 2],
        };
        store.zero_grad();
        let mut tape = Tape::new();
        let out = model
            .losses(
                &mut tape,
                &store,
                &input,
                &targets,
                TaskFlags::GEN_ONLY,
                &LossWeights::default(),
            )
            .unwrap();
        assert!(out.selection.is_none() && out.reordering.is_none());
        tape.backward(out.total, &mut store).unwrap();
        for id in model
            .reorder_head_params()
            .into_iter()
            .chain(model.select_head_params())
        {
            assert!(store.get(id).grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn reorder_argmax_shift_invariant() {
        let (model, store) = build(Mode::Joint, 13);
        let input = random_input(3, 5, 8);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &input).unwrap();
        let v = enc.visual_states(&mut tape).unwrap().unwrap();
        let logits = model.reorder_logits(&mut tape, &store, v).unwrap();
        let shift = tape.constant_raw(vec![10], (0..10).map(|_| 3.7).collect()).unwrap();
        let shifted = tape.add_bias(logits, shift).unwrap();
        let a = tape.softmax(logits, 1).unwrap();
        let b = tape.softmax(shifted, 1).unwrap();
        let argmax = |row: &[f64]| (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        for i in 0..3 {
            let (ra, rb) = (
                &tape.value(a)[i * 10..(i + 1) * 10],
                &tape.value(b)[i * 10..(i + 1) * 10],
            );
            assert_eq!(argmax(ra), argmax(rb));
            assert!(ra.iter().zip(rb).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
