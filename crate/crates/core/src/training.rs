//! Pseudo-labels, per-epoch image shuffling, example preparation and the
//! multi-task training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::MultiModalExample;
use crate::error::{contract_err, Error, Result};
use crate::image::patchify;
use crate::metrics::rouge_mean_f1;
use crate::model::{LossWeights, Model, ModelConfig, ModelInput, Targets, TaskFlags, MAX_IMAGES};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{encode_document, encode_paragraphs, Vocab};

/// Number of images labelled for the summary.
pub const DEFAULT_K: usize = 3;

/// Marks the `k` captions closest to the summary by mean ROUGE-1/2/L F1,
/// ties to the lower index; every caption when there are at most `k`.
pub fn build_selection_labels<T: AsRef<str>>(captions: &[T], summary: &str, k: usize) -> Result<Vec<bool>> {
    if captions.is_empty() {
        return Err(contract_err!("selection labels need at least one caption"));
    }
    if summary.trim().is_empty() {
        log::warn!("empty summary: selecting the first {} images", k.min(captions.len()));
    }
    let scores: Vec<f64> = captions.iter().map(|c| rouge_mean_f1(c.as_ref(), summary)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![false; captions.len()];
    for &i in order.iter().take(k) {
        labels[i] = true;
    }
    Ok(labels)
}

/// A uniformly random slot order: slot `j` shows original image `perm[j]`,
/// which is also the reorder label of slot `j`.
pub fn shuffle_for_reorder<R: rand::Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    perm
}

pub fn apply_permutation<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i].clone()).collect()
}

/// An example encoded once; only the image order changes between epochs.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub doc_id: String,
    /// Patches of the kept images, original order.
    pub patches: Vec<Tensor<f32>>,
    pub text: Vec<u32>,
    pub summary: Vec<u32>,
    /// Selection pseudo-labels, original order.
    pub selection: Vec<bool>,
}

impl PreparedExample {
    pub fn n_images(&self) -> usize {
        self.patches.len()
    }

    /// Model input and targets with images in `perm` order.
    pub fn view(&self, perm: &[usize]) -> (ModelInput<f32>, Targets) {
        let input = ModelInput {
            patches: apply_permutation(&self.patches, perm),
            text: self.text.clone(),
        };
        let targets = Targets {
            summary: self.summary.clone(),
            selection: apply_permutation(&self.selection, perm),
            reorder: perm.to_vec(),
        };
        (input, targets)
    }

    pub fn identity(&self) -> Vec<usize> {
        (0..self.n_images()).collect()
    }
}

/// Keeps the first ten images, joins paragraphs with the separator token
/// and computes selection labels from the kept captions.
pub fn prepare_example(ex: &MultiModalExample, vocab: &Vocab, cfg: &ModelConfig, k: usize) -> Result<PreparedExample> {
    ex.validate()?;
    let m = ex.images.len().min(MAX_IMAGES);
    let patches = ex.images[..m]
        .iter()
        .map(|img| {
            if img.height() != cfg.image_size || img.width() != cfg.image_size {
                return Err(Error::Shape(format!(
                    "document {}: image of {}x{} but the model expects {}x{}",
                    ex.doc_id,
                    img.height(),
                    img.width(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            patchify(img, cfg.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let text = encode_paragraphs(&ex.paragraphs, vocab, cfg.max_tokens).ids;
    let summary = encode_document(&ex.summary, vocab, cfg.max_summary_tokens + 1).ids;
    let selection = build_selection_labels(&ex.captions[..m], &ex.summary, k)?;
    Ok(PreparedExample {
        doc_id: ex.doc_id.clone(),
        patches,
        text,
        summary,
        selection,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub flags: TaskFlags,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            seed: 1,
            flags: TaskFlags::ALL,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// Where training stands: the next batch is `cursor..` of `epoch`'s order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u64,
    pub cursor: usize,
    pub step: u64,
}

/// Batch-mean loss components of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub generation: f64,
    pub selection: Option<f64>,
    pub reordering: Option<f64>,
    pub total: f64,
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, &p| {
        (h ^ p).wrapping_mul(0x0100_0000_01b3).rotate_left(29)
    })
}

/// Document order of an epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch])));
    order
}

/// Image order of document `doc` in `epoch`.
pub fn epoch_permutation(seed: u64, epoch: u64, doc: usize, m: usize) -> Vec<usize> {
    shuffle_for_reorder(
        m,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, doc as u64, 1])),
    )
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.flags.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::new(model_config, &mut store, config.seed)?;
        model.apply_task_flags(&mut store, config.flags);
        let adam = AdamState::new(&store, config.adam.clone());
        Ok(Trainer {
            model,
            store,
            adam,
            config,
            progress: Progress::default(),
        })
    }

    /// Forward and backward over the batch, then one Adam update.
    pub fn train_step(&mut self, batch: &[(ModelInput<f32>, Targets)]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let flags = self.config.flags;
        let scale = 1.0 / batch.len() as f32;
        self.store.zero_grad();
        let (mut gen, mut sel, mut reo, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_sel, mut n_reo) = (0usize, 0usize);
        for (input, targets) in batch {
            let mut tape = Tape::new();
            let out = self
                .model
                .losses(&mut tape, &self.store, input, targets, flags, &self.config.weights)?;
            let value = |v| tape.scalar_value(v).map(|x| x as f64);
            if let Some(g) = out.generation {
                gen += value(g)?;
            }
            if let Some(s) = out.selection {
                sel += value(s)?;
                n_sel += 1;
            }
            if let Some(r) = out.reordering {
                reo += value(r)?;
                n_reo += 1;
            }
            let t = value(out.total)?;
            total += t;
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    step: self.progress.step + 1,
                    components: format!("doc total {t}, generation {gen}, selection {sel}, reordering {reo}"),
                });
            }
            let scaled = tape.scale(out.total, scale);
            tape.backward(scaled, &mut self.store)?;
        }
        let b = batch.len() as f64;
        let losses = StepLosses {
            generation: gen / b,
            selection: (flags.selection && n_sel > 0).then(|| sel / n_sel as f64),
            reordering: (flags.reordering && n_reo > 0).then(|| reo / n_reo as f64),
            total: total / b,
        };
        self.adam.step(&mut self.store)?;
        self.progress.step += 1;
        Ok(losses)
    }

    /// Trains on the next batch of `data`; returns the losses and whether
    /// the batch closed an epoch.
    pub fn step(&mut self, data: &[PreparedExample]) -> Result<(StepLosses, bool)> {
        if data.is_empty() {
            return Err(contract_err!("no training data"));
        }
        let Progress { epoch, cursor, .. } = self.progress;
        let order = epoch_order(self.config.seed, epoch, data.len());
        let end = (cursor + self.config.batch_size).min(data.len());
        let batch: Vec<_> = order[cursor..end]
            .iter()
            .map(|&d| {
                let perm = epoch_permutation(self.config.seed, epoch, d, data[d].n_images());
                data[d].view(&perm)
            })
            .collect();
        let losses = self.train_step(&batch)?;
        let done = end == data.len();
        self.progress.cursor = if done { 0 } else { end };
        if done {
            self.progress.epoch += 1;
        }
        Ok((losses, done))
    }
}

/// Mean of step losses, component-wise.
pub fn mean_losses(steps: &[StepLosses]) -> Option<StepLosses> {
    if steps.is_empty() {
        return None;
    }
    let n = steps.len() as f64;
    let opt_mean = |f: fn(&StepLosses) -> Option<f64>| {
        let vals: Vec<f64> = steps.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(StepLosses {
        generation: steps.iter().map(|s| s.generation).sum::<f64>() / n,
        selection: opt_mean(|s| s.selection),
        reordering: opt_mean(|s| s.reordering),
        total: steps.iter().map(|s| s.total).sum::<f64>() / n,
    })
}
