//! Teacher-forced training with AdamW and early stopping on validation WER.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, TrainingState};
use crate::corpus::{districts_of, Example};
use crate::decoding::{batch_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::corpus_wer;
use crate::model::{ModelConfig, TranscriptionModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BASE_VOCAB_SIZE};

const DROPOUT_STREAM_SALT: u64 = 0x6472_6f70_6f75_7421;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation WER.
    pub patience: usize,
    /// Prepend the district token to every source sequence.
    pub use_district_tokens: bool,
    /// Batches are length-sorted inside windows of this many batches.
    pub sort_window: usize,
    /// Generation cap for validation decoding.
    pub val_max_gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            seed: 0,
            max_epochs: 30,
            patience: 5,
            use_district_tokens: true,
            sort_window: 32,
            val_max_gen_len: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::contract(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.sort_window == 0
            || self.val_max_gen_len == 0
        {
            return Err(Error::contract(
                "batch_size, max_epochs, sort_window and val_max_gen_len must be positive",
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Seeded shuffle followed by a cut: the first `round(val_fraction · N)`
/// shuffled rows are validation, the rest training.
pub fn split_train_val(
    examples: &[Example],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if examples.len() < 10 {
        return Err(Error::contract(format!(
            "need at least 10 examples to split, got {}",
            examples.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let n_val = (val_fraction * examples.len() as f64).round() as usize;
    if n_val == 0 || n_val == examples.len() {
        return Err(Error::contract("split leaves one side empty"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order[..n_val]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let train = order[n_val..]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((train, val))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_wer: f64,
    pub best: bool,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Encoded `(source, target)` pair.
pub type Pair = (Vec<usize>, Vec<usize>);

pub struct Trainer {
    config: TrainConfig,
    model: TranscriptionModel<f32>,
    vocab: Vocabulary,
    optimizer: AdamW<f32>,
    state: TrainingState,
    best: Option<Vec<Tensor<f32>>>,
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM_SALT);
    rng.set_stream(step);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl Trainer {
    /// Fresh model over the byte vocabulary, grown by one embedding row per
    /// district when district tokens are on.
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        districts: &[String],
    ) -> Result<Self> {
        config.validate()?;
        let vocab = if config.use_district_tokens {
            Vocabulary::with_districts(districts)?
        } else {
            Vocabulary::new()
        };
        let mut model = TranscriptionModel::new(
            ModelConfig {
                vocab_size: BASE_VOCAB_SIZE,
                ..model_config
            },
            config.seed,
        )?;
        model.resize_embeddings(vocab.size(), config.seed.wrapping_add(1))?;
        let optimizer = AdamW::for_params(config.adamw(), model.params())?;
        let state = TrainingState {
            epoch: 0,
            best_val_wer: None,
            best_epoch: None,
            epochs_since_best: 0,
            use_district_tokens: config.use_district_tokens,
        };
        Ok(Trainer {
            config,
            model,
            vocab,
            optimizer,
            state,
            best: None,
        })
    }

    /// Continues a run saved with [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let Checkpoint {
            header,
            model,
            vocab,
            mut state,
        } = checkpoint;
        let training = header
            .training
            .ok_or_else(|| Error::contract("checkpoint holds no training state"))?;
        if training.use_district_tokens != config.use_district_tokens {
            return Err(Error::contract(
                "use_district_tokens differs from the checkpointed run",
            ));
        }
        let mut take = |key: String, like: &Tensor<f32>| -> Result<Vec<f32>> {
            let t = state
                .remove(&key)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::contract(format!("{key} has the wrong shape")));
            }
            Ok(t.into_data())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut best = Vec::new();
        for p in model.params() {
            m.push(take(format!("adamw.m.{}", p.name), &p.tensor)?);
            v.push(take(format!("adamw.v.{}", p.name), &p.tensor)?);
            if training.best_epoch.is_some() {
                best.push(Tensor::new(
                    p.tensor.shape().to_vec(),
                    take(format!("best.{}", p.name), &p.tensor)?,
                )?);
            }
        }
        let optimizer = AdamW::from_state(config.adamw(), header.step, m, v)?;
        Ok(Trainer {
            config,
            model,
            vocab,
            optimizer,
            best: training.best_epoch.map(|_| best),
            state: training,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TranscriptionModel<f32> {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Source and target ids; the district token is attached only when the
    /// run uses district tokens.
    pub fn encode_examples(&self, examples: &[Example]) -> Result<Vec<Pair>> {
        examples
            .iter()
            .map(|e| {
                let ipa = e.ipa.as_deref().ok_or_else(|| {
                    Error::contract(format!("example {} has no ipa target", e.index))
                })?;
                let district = self
                    .config
                    .use_district_tokens
                    .then_some(e.district.as_str());
                Ok((
                    self.vocab.encode(&e.contents, district)?,
                    self.vocab.encode(ipa, None)?,
                ))
            })
            .collect()
    }

    /// Batches for one epoch: shuffle, sort by source length inside each
    /// window, cut into batches and shuffle the batch order.
    pub fn epoch_batches(&self, n: usize, epoch: usize, lengths: &[usize]) -> Vec<Vec<usize>> {
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let window = self.config.sort_window * self.config.batch_size;
        let mut batches = Vec::with_capacity(n.div_ceil(self.config.batch_size));
        for chunk in order.chunks_mut(window) {
            chunk.sort_by_key(|&i| lengths[i]);
            batches.extend(chunk.chunks(self.config.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches
    }

    /// Forward, backward and one optimizer update. Returns the batch loss.
    pub fn train_step(&mut self, batch: &[&Pair]) -> Result<f64> {
        let mut rng = dropout_rng(self.config.seed, self.optimizer.step_count());
        let (loss, grads) = {
            let mut g = Graph::new();
            let vars = self.model.bind(&mut g, true);
            let sources: Vec<&[usize]> = batch.iter().map(|p| p.0.as_slice()).collect();
            let targets: Vec<&[usize]> = batch.iter().map(|p| p.1.as_slice()).collect();
            let loss = self
                .model
                .batch_loss(&mut g, &vars, &sources, &targets, Some(&mut rng))?;
            g.backward(loss)?;
            let value = f64::from(g.value(loss).data()[0]);
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(self.model.params())
                .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
                .collect();
            (value, grads)
        };
        self.optimizer.step(self.model.params_mut(), &grads)?;
        Ok(loss)
    }

    /// One pass over `pairs`; returns the mean batch loss.
    pub fn train_epoch(&mut self, pairs: &[Pair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let lengths: Vec<usize> = pairs.iter().map(|p| p.0.len()).collect();
        let batches = self.epoch_batches(pairs.len(), self.state.epoch, &lengths);
        let mut total = 0.0;
        for batch in &batches {
            let rows: Vec<&Pair> = batch.iter().map(|&i| &pairs[i]).collect();
            total += self.train_step(&rows)?;
        }
        self.state.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Greedy transcriptions of `examples` with the current weights.
    pub fn transcribe(&self, examples: &[Example]) -> Vec<Result<String>> {
        self.transcribe_capped(examples, self.config.val_max_gen_len)
    }

    fn transcribe_capped(&self, examples: &[Example], cap: usize) -> Vec<Result<String>> {
        let rows: Vec<(&str, Option<&str>)> = examples
            .iter()
            .map(|e| {
                let district = self
                    .config
                    .use_district_tokens
                    .then_some(e.district.as_str());
                (e.contents.as_str(), district)
            })
            .collect();
        let cap = cap.min(self.model.config().max_gen_len);
        batch_decode(&self.model, &self.vocab, &rows, &DecodeConfig::greedy(cap))
    }

    /// Micro-averaged WER of greedy decoding against the `ipa` targets.
    /// Generation stops at twice the longest reference plus 16 tokens, so an
    /// undertrained model cannot spend the full generation budget per row.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        let longest = examples
            .iter()
            .map(|e| e.ipa.as_deref().map_or(0, str::len))
            .max()
            .unwrap_or(0);
        let hyps =
            self.transcribe_capped(examples, self.config.val_max_gen_len.min(2 * longest + 16));
        let mut pairs = Vec::with_capacity(examples.len());
        for (e, h) in examples.iter().zip(hyps) {
            let reference = e
                .ipa
                .as_deref()
                .ok_or_else(|| Error::contract(format!("example {} has no ipa target", e.index)))?;
            pairs.push((reference, h?));
        }
        Ok(corpus_wer(pairs)?.wer)
    }

    /// Trains until `max_epochs` or until validation WER has not improved for
    /// `patience` epochs. `on_epoch` sees every record right after it is
    /// made, with the trainer in its post-epoch state.
    pub fn fit<F>(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut on_epoch: F,
    ) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&EpochRecord, &Trainer) -> Result<()>,
    {
        if train.is_empty() || val.is_empty() {
            return Err(Error::contract(
                "training and validation sets must be nonempty",
            ));
        }
        let pairs = self.encode_examples(train)?;
        self.encode_examples(val)?;
        let mut log = Vec::new();
        while self.state.epoch < self.config.max_epochs && !self.stopped() {
            let train_loss = self.train_epoch(&pairs)?;
            let val_wer = self.evaluate(val)?;
            let improved = self.state.best_val_wer.is_none_or(|b| val_wer < b);
            if improved {
                self.state.best_val_wer = Some(val_wer);
                self.state.best_epoch = Some(self.state.epoch);
                self.state.epochs_since_best = 0;
                self.best = Some(
                    self.model
                        .params()
                        .iter()
                        .map(|p| p.tensor.clone())
                        .collect(),
                );
            } else {
                self.state.epochs_since_best += 1;
            }
            let record = EpochRecord {
                epoch: self.state.epoch,
                step: self.step_count(),
                train_loss,
                val_wer,
                best: improved,
            };
            log::info!("{}", record.to_json_line());
            on_epoch(&record, self)?;
            log.push(record);
        }
        Ok(log)
    }

    fn stopped(&self) -> bool {
        self.state.best_epoch.is_some()
            && self.state.epochs_since_best >= self.config.patience.max(1)
    }

    /// The weights with the lowest validation WER so far (the current weights
    /// before any validation has run).
    pub fn best_model(&self) -> TranscriptionModel<f32> {
        let mut model = self.model.clone();
        if let Some(best) = &self.best {
            for (p, t) in model.params_mut().iter_mut().zip(best) {
                p.tensor = t.clone();
            }
        }
        model
    }

    /// Inference checkpoint of the best weights.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            self.best_model(),
            self.vocab.clone(),
            self.config.seed,
            self.step_count(),
        )?;
        ck.header.training = Some(self.state.clone());
        Ok(ck)
    }

    /// Full state for [`Trainer::resume`]: current weights, optimizer moments
    /// and the best weights.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            self.model.clone(),
            self.vocab.clone(),
            self.config.seed,
            self.step_count(),
        )?;
        ck.header.training = Some(self.state.clone());
        let mut state = BTreeMap::new();
        let moments = self
            .optimizer
            .first_moments()
            .iter()
            .zip(self.optimizer.second_moments());
        for (p, (m, v)) in self.model.params().iter().zip(moments) {
            let shape = p.tensor.shape().to_vec();
            state.insert(
                format!("adamw.m.{}", p.name),
                Tensor::new(shape.clone(), m.clone())?,
            );
            state.insert(
                format!("adamw.v.{}", p.name),
                Tensor::new(shape, v.clone())?,
            );
        }
        if let Some(best) = &self.best {
            for (p, t) in self.model.params().iter().zip(best) {
                state.insert(format!("best.{}", p.name), t.clone());
            }
        }
        ck.state = state;
        Ok(ck)
    }
}

/// Outcome of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Splits `examples`, trains and returns the best checkpoint and the log.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    examples: &[Example],
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let (train_set, val_set) = split_train_val(examples, config.val_fraction, config.seed)?;
    let mut trainer = Trainer::new(model_config, config, &districts_of(examples))?;
    let log = trainer.fit(&train_set, &val_set, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.best_checkpoint()?,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example::new(i as i64, "d1", &format!("w{i}"), Some("x")))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let (train, val) = split_train_val(&rows(100), 0.1, 0).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let (train, val) = split_train_val(&rows(8941), 0.1, 0).unwrap();
        assert_eq!((train.len(), val.len()), (8047, 894));
        assert!(split_train_val(&rows(9), 0.1, 0).is_err());
        assert!(split_train_val(&rows(10), 0.0, 0).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let data = rows(1000);
        let (a_train, a_val) = split_train_val(&data, 0.1, 7).unwrap();
        let (b_train, b_val) = split_train_val(&data, 0.1, 7).unwrap();
        assert_eq!(a_val, b_val);
        assert_eq!(a_train, b_train);
        let (_, c_val) = split_train_val(&data, 0.1, 8).unwrap();
        assert_ne!(a_val, c_val);
        let mut all: Vec<i64> = a_train.iter().chain(&a_val).map(|e| e.index).collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                val_fraction: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn batches_cover_every_row_once() {
        let config = TrainConfig {
            batch_size: 3,
            sort_window: 2,
            ..TrainConfig::default()
        };
        let t = Trainer::new(
            ModelConfig::with_width(8, 2, 1),
            config,
            &["d1".to_string()],
        )
        .unwrap();
        let lengths: Vec<usize> = (0..20).map(|i| (i * 7) % 5).collect();
        let batches = t.epoch_batches(20, 0, &lengths);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 3));
        assert_eq!(batches, t.epoch_batches(20, 0, &lengths));
        assert_ne!(batches, t.epoch_batches(20, 1, &lengths));
    }

    #[test]
    fn district_rows_follow_the_flag() {
        let districts = vec!["d1".to_string(), "d2".to_string()];
        let on = Trainer::new(
            ModelConfig::with_width(8, 2, 1),
            TrainConfig::default(),
            &districts,
        )
        .unwrap();
        assert_eq!(on.model().embedding_rows(), 261);
        let off = Trainer::new(
            ModelConfig::with_width(8, 2, 1),
            TrainConfig {
                use_district_tokens: false,
                ..TrainConfig::default()
            },
            &districts,
        )
        .unwrap();
        assert_eq!(off.model().embedding_rows(), 259);
        let ex = vec![Example::new(0, "d2", "ab", Some("c"))];
        assert_eq!(on.encode_examples(&ex).unwrap()[0].0[0], 260);
        assert_eq!(off.encode_examples(&ex).unwrap()[0].0[0], 3 + b'a' as usize);
    }
}
