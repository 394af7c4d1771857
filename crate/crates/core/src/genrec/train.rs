use std::fs;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::beam::recommend;
use super::examples::{pack_examples, ExampleMode, SequenceExample, TokenStream, HISTORY_CAP};
use super::model::{RecommenderArch, RecommenderModel};
use super::trie::IdentifierTrie;
use crate::autograd::Tape;
use crate::error::{param_err, Error, Result};
use crate::metrics::{ndcg_at_k, recall_at_k, RankingResult};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecTrainingConfig {
    pub arch: RecommenderArch,
    /// Softmax temperature of the training loss.
    pub tau: f64,
    pub epochs: usize,
    /// Examples per minibatch.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub history_cap: usize,
    pub example_mode: ExampleMode,
    pub beam_width: usize,
    /// Temperature applied to beam scores; 1 scores with plain log-probabilities.
    pub inference_tau: f64,
    /// Validate every this many epochs (the last epoch always validates).
    pub val_every: usize,
    /// Validate on at most this many users, spread evenly; 0 means all.
    pub val_users: usize,
    /// Restore the weights of the best validation epoch at the end.
    pub keep_best: bool,
    /// Start each training stream at a random position so every position
    /// embedding is trained, not only those short of the longest history.
    pub position_jitter: bool,
    pub seed: u64,
}

impl Default for RecTrainingConfig {
    fn default() -> Self {
        RecTrainingConfig {
            arch: RecommenderArch::default(),
            tau: 1.0,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            history_cap: HISTORY_CAP,
            example_mode: ExampleMode::SlidingWindow,
            beam_width: 20,
            inference_tau: 1.0,
            val_every: 1,
            val_users: 0,
            keep_best: true,
            position_jitter: true,
            seed: 0,
        }
    }
}

impl RecTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.tau > 0.0) || !(self.inference_tau > 0.0) {
            return Err(param_err("temperatures must be positive"));
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.history_cap == 0 || self.val_every == 0 {
            return Err(param_err("batch_size, beam_width, history_cap and val_every must be positive"));
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Positions needed for a capped history plus one generated item.
    pub fn max_positions(&self, max_item_len: usize) -> usize {
        1 + (self.history_cap + 1) * max_item_len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecEpochRecord {
    pub epoch: usize,
    /// Example-weighted mean training loss.
    pub loss: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecTrainingLog {
    pub records: Vec<RecEpochRecord>,
    /// Epoch whose weights were kept (0 = initialization).
    pub best_epoch: usize,
}

impl RecTrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "val_recall@10", "val_ndcg@10", "kept"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                opt(r.val_recall),
                opt(r.val_ndcg),
                u8::from(r.epoch == self.best_epoch).to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Recall@10 and NDCG@10 of beam-search recommendations.
pub fn evaluate_examples(
    model: &RecommenderModel,
    trie: &IdentifierTrie,
    item_tokens: &[Vec<usize>],
    examples: &[SequenceExample],
    config: &RecTrainingConfig,
) -> Result<(f64, f64)> {
    let recs = recommend(model, trie, item_tokens, examples, config.beam_width, config.inference_tau)?;
    let results: Vec<RankingResult> = recs
        .iter()
        .zip(examples)
        .map(|(r, ex)| {
            let list: Vec<usize> = r.iter().map(|x| x.item).collect();
            RankingResult::from_list(&list, ex.target)
        })
        .collect();
    Ok((recall_at_k(&results, 10)?, ndcg_at_k(&results, 10)?))
}

fn batches(streams: &[TokenStream], order: &[usize], batch_size: usize) -> Vec<Vec<TokenStream>> {
    let mut out = Vec::new();
    let mut cur: Vec<TokenStream> = Vec::new();
    let mut count = 0;
    for &i in order {
        let s = &streams[i];
        if !cur.is_empty() && count + s.examples > batch_size {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
        count += s.examples;
        cur.push(s.clone());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Minibatch AdamW on the ranking-guided generation loss.
///
/// Examples sharing a user's growing history are packed into one causal
/// stream; a minibatch holds whole streams up to `batch_size` examples.
/// Validation Recall@10 is logged per epoch and, with `keep_best`, the
/// best epoch's weights are returned.
pub fn train_recommender(
    mut model: RecommenderModel,
    train: &[SequenceExample],
    validation: &[SequenceExample],
    item_tokens: &[Vec<usize>],
    trie: &IdentifierTrie,
    config: &RecTrainingConfig,
) -> Result<(RecommenderModel, RecTrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mut log = RecTrainingLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    let streams = pack_examples(train, item_tokens);
    let total_examples: usize = streams.iter().map(|s| s.examples).sum();
    let val: Vec<SequenceExample> = if config.val_users == 0 || config.val_users >= validation.len() {
        validation.to_vec()
    } else {
        (0..config.val_users)
            .map(|i| validation[i * validation.len() / config.val_users].clone())
            .collect()
    };
    let mut opt = AdamW::new(config.optimizer())?;
    let mut rng = SeededRng::new(derive_seed(config.seed, "rec-batches"));
    let mut jitter = SeededRng::new(derive_seed(config.seed, "rec-positions"));
    let mut order: Vec<usize> = (0..streams.len()).collect();
    let mut best: Option<(f64, crate::autograd::ParamStore)> = None;
    info!(
        "training recommender: {} examples in {} streams, {} validation users",
        total_examples,
        streams.len(),
        val.len()
    );
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in batches(&streams, &order, config.batch_size) {
            let offsets: Option<Vec<usize>> = config.position_jitter.then(|| {
                batch
                    .iter()
                    .map(|s| jitter.below(model.max_positions.saturating_sub(s.tokens.len()) + 1))
                    .collect()
            });
            let mut tape = Tape::new();
            let loss = model.batch_loss_at(&mut tape, &batch, offsets.as_deref(), config.tau)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("recommender loss {value} at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&tape, &grads);
            opt.step(&mut model.store);
            epoch_loss += value * batch.iter().map(|s| s.examples).sum::<usize>() as f64;
        }
        if !model.store.all_finite() {
            return Err(Error::Numeric(format!("non-finite recommender weights at epoch {epoch}")));
        }
        let mut record = RecEpochRecord {
            epoch,
            loss: epoch_loss / total_examples as f64,
            val_recall: None,
            val_ndcg: None,
        };
        if !val.is_empty() && (epoch % config.val_every == 0 || epoch == config.epochs) {
            let (r, n) = evaluate_examples(&model, trie, item_tokens, &val, config)?;
            record.val_recall = Some(r);
            record.val_ndcg = Some(n);
            if best.as_ref().map_or(true, |(b, _)| r > *b) {
                best = Some((r, model.store.clone()));
                log.best_epoch = epoch;
            }
        }
        debug!(
            "epoch {epoch}: loss {:.5} val R@10 {:?}",
            record.loss, record.val_recall
        );
        log.records.push(record);
    }
    match best {
        Some((_, store)) if config.keep_best => model.store = store,
        _ => log.best_epoch = config.epochs,
    }
    Ok((model, log))
}
