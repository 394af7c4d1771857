use std::cmp::Ordering;

use super::examples::{history_tokens, SequenceExample};
use super::model::{KvCache, RecommenderModel};
use super::trie::{IdentifierTrie, ROOT};
use crate::autograd::log_softmax_with_temperature;
use crate::error::{param_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recommendation {
    pub item: usize,
    /// Summed token log-probabilities of the item's identifier.
    pub score: f64,
}

struct Hypothesis {
    node: usize,
    score: f64,
    cache: KvCache,
    log_probs: Vec<f64>,
}

struct Candidate {
    score: f64,
    /// Smallest item reachable, the tie-break key.
    key: usize,
    /// `None` for an already finished item.
    expansion: Option<(usize, usize, usize)>,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.key.cmp(&b.key))
}

/// Beam search restricted to Trie-valid continuations, scoring with
/// untempered log-probabilities.
pub fn constrained_beam_search(
    model: &RecommenderModel,
    prefix: &[usize],
    trie: &IdentifierTrie,
    beam_width: usize,
) -> Result<Vec<Recommendation>> {
    constrained_beam_search_with_tau(model, prefix, trie, beam_width, 1.0)
}

/// As [`constrained_beam_search`] with token log-probabilities taken from a
/// temperature-`tau` softmax.
///
/// `prefix` is the tokenized history starting with `BOS`. Finished items
/// are returned best first, ties by lowest item id.
pub fn constrained_beam_search_with_tau(
    model: &RecommenderModel,
    prefix: &[usize],
    trie: &IdentifierTrie,
    beam_width: usize,
    tau: f64,
) -> Result<Vec<Recommendation>> {
    if beam_width == 0 {
        return Err(param_err("beam width must be at least 1"));
    }
    if !(tau > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {tau}")));
    }
    let mut base = KvCache::default();
    let h = model.extend_cache(None, &mut base, prefix)?;
    let log_probs = |h: &[f64]| -> Result<Vec<f64>> {
        let lp = log_softmax_with_temperature(&model.logits_from_hidden(h), tau);
        if lp.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN in decoder log-probabilities".into()));
        }
        Ok(lp)
    };
    let mut live = vec![Hypothesis {
        node: ROOT,
        score: 0.0,
        cache: KvCache::default(),
        log_probs: log_probs(&h)?,
    }];
    let mut finished: Vec<Recommendation> = Vec::new();
    while !live.is_empty() {
        let mut pool: Vec<Candidate> = finished
            .iter()
            .map(|r| Candidate {
                score: r.score,
                key: r.item,
                expansion: None,
            })
            .collect();
        for (p, hyp) in live.iter().enumerate() {
            for &(tok, child) in trie.children(hyp.node) {
                pool.push(Candidate {
                    score: hyp.score + hyp.log_probs[tok],
                    key: trie.min_item(child),
                    expansion: Some((p, tok, child)),
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(beam_width);
        let mut next = Vec::new();
        for c in pool {
            let Some((p, tok, child)) = c.expansion else { continue };
            if let Some(item) = trie.item_at(child) {
                finished.push(Recommendation { item, score: c.score });
                continue;
            }
            let parent = &live[p];
            let mut cache = parent.cache.clone();
            let h = model.extend_cache(Some(&base), &mut cache, &[tok])?;
            next.push(Hypothesis {
                node: child,
                score: c.score,
                cache,
                log_probs: log_probs(&h)?,
            });
        }
        live = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    finished.truncate(beam_width);
    Ok(finished)
}

/// Top-`beam_width` recommendations for each example's history.
pub fn recommend(
    model: &RecommenderModel,
    trie: &IdentifierTrie,
    item_tokens: &[Vec<usize>],
    examples: &[SequenceExample],
    beam_width: usize,
    tau: f64,
) -> Result<Vec<Vec<Recommendation>>> {
    examples
        .iter()
        .map(|ex| {
            let prefix = history_tokens(&ex.history, item_tokens);
            constrained_beam_search_with_tau(model, &prefix, trie, beam_width, tau)
        })
        .collect()
}
