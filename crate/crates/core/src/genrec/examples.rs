use serde::{Deserialize, Serialize};

use super::vocab::BOS;
use crate::data::InteractionDataset;
use crate::error::{param_err, Error, Result};
use crate::tokenizer::IdentifierAssignment;

/// Default cap on history length, in items.
pub const HISTORY_CAP: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleMode {
    /// One example per prefix of length at least 2.
    #[default]
    SlidingWindow,
    /// Only the last item is a target.
    LastTarget,
}

/// Predict `target` from the items in `history` (oldest first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceExample {
    /// Index into the dataset's users.
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// `(history, target)` pairs of one item sequence.
pub fn examples_from_sequence(items: &[usize], mode: ExampleMode, cap: usize) -> Vec<(Vec<usize>, usize)> {
    let window = |t: usize| (items[t.saturating_sub(cap)..t].to_vec(), items[t]);
    match mode {
        _ if items.len() < 2 => Vec::new(),
        ExampleMode::SlidingWindow => (1..items.len()).map(window).collect(),
        ExampleMode::LastTarget => vec![window(items.len() - 1)],
    }
}

fn check_coverage(dataset: &InteractionDataset, assignment: &IdentifierAssignment) -> Result<()> {
    let n = dataset.catalog.len();
    let mut missing = Vec::new();
    for i in 0..n {
        match assignment.identifiers.get(i) {
            Some(id) if id.item == i => {}
            _ => missing.push(dataset.catalog.name(i).to_string()),
        }
    }
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<_> = missing.iter().take(10).cloned().collect();
    Err(Error::Data(format!(
        "{} items have no identifier: {}{}",
        missing.len(),
        shown.join(", "),
        if missing.len() > 10 { ", ..." } else { "" }
    )))
}

/// Training examples from every user's training portion (the items before
/// the validation target).
pub fn build_examples(
    dataset: &InteractionDataset,
    assignment: &IdentifierAssignment,
    mode: ExampleMode,
    cap: usize,
) -> Result<Vec<SequenceExample>> {
    if cap == 0 {
        return Err(param_err("history cap must be positive"));
    }
    check_coverage(dataset, assignment)?;
    let mut out = Vec::new();
    for (u, seq) in dataset.users.iter().enumerate() {
        for (history, target) in examples_from_sequence(seq.train(), mode, cap) {
            out.push(SequenceExample {
                user: u,
                history,
                target,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

/// One held-out example per user.
pub fn eval_examples(
    dataset: &InteractionDataset,
    assignment: &IdentifierAssignment,
    split: EvalSplit,
    cap: usize,
) -> Result<Vec<SequenceExample>> {
    if cap == 0 {
        return Err(param_err("history cap must be positive"));
    }
    check_coverage(dataset, assignment)?;
    Ok(dataset
        .users
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            let (history, target) = match split {
                EvalSplit::Validation => (seq.validation_history(), seq.validation_target()),
                EvalSplit::Test => (seq.test_history(), seq.test_target()),
            };
            SequenceExample {
                user: u,
                history: history[history.len().saturating_sub(cap)..].to_vec(),
                target,
            }
        })
        .collect())
}

/// `BOS` followed by the identifier tokens of each history item.
pub fn history_tokens(history: &[usize], item_tokens: &[Vec<usize>]) -> Vec<usize> {
    let mut out = vec![BOS];
    for &i in history {
        out.extend_from_slice(&item_tokens[i]);
    }
    out
}

/// Several examples sharing one causal token sequence.
///
/// Output row `predict_rows[j]` is trained to emit `targets[j]`. An example
/// whose history is exactly the items already in the stream is appended to
/// it, so every target sees the same context it would see on its own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<usize>,
    pub predict_rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub examples: usize,
}

pub fn pack_examples(examples: &[SequenceExample], item_tokens: &[Vec<usize>]) -> Vec<TokenStream> {
    let mut streams: Vec<TokenStream> = Vec::new();
    let mut open: Option<(usize, Vec<usize>)> = None;
    for ex in examples {
        let extends = matches!(&open, Some((u, items)) if *u == ex.user && *items == ex.history);
        if !extends {
            streams.push(TokenStream {
                tokens: history_tokens(&ex.history, item_tokens),
                predict_rows: Vec::new(),
                targets: Vec::new(),
                examples: 0,
            });
            open = Some((ex.user, ex.history.clone()));
        }
        let s = streams.last_mut().unwrap();
        for &t in &item_tokens[ex.target] {
            s.predict_rows.push(s.tokens.len() - 1);
            s.targets.push(t);
            s.tokens.push(t);
        }
        s.examples += 1;
        open.as_mut().unwrap().1.push(ex.target);
    }
    streams
}
