//! Single-positive ranking metrics.

use crate::error::{param_err, Error, Result};

/// Where the held-out item landed in one user's ranked list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankingResult {
    /// 1-based position, `None` when the item is absent from the list.
    pub rank: Option<usize>,
    pub list_len: usize,
}

impl RankingResult {
    pub fn from_list(list: &[usize], target: usize) -> Self {
        RankingResult {
            rank: list.iter().position(|&i| i == target).map(|p| p + 1),
            list_len: list.len(),
        }
    }

    fn in_top(&self, k: usize) -> Option<usize> {
        self.rank.filter(|&r| r <= k)
    }
}

fn check(results: &[RankingResult], k: usize) -> Result<()> {
    if k == 0 {
        return Err(param_err("K must be at least 1"));
    }
    if results.is_empty() {
        return Err(Error::Data("no ranking results".into()));
    }
    Ok(())
}

/// Fraction of users whose held-out item is among the first `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let hits = results.iter().filter(|r| r.in_top(k).is_some()).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over users with the item in the top `k`.
pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let total: f64 = results
        .iter()
        .filter_map(|r| r.in_top(k))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / results.len() as f64)
}

/// One-way partial AUC up to false-positive rate `K / (|V| - 1)` for a
/// single positive at 1-based rank `rank`: `(K - rank) / (K - 1)` when
/// `rank < K`, else 0.
pub fn opauc_single_positive(rank: usize, k: usize, vocab_size: usize) -> Result<f64> {
    if k <= 1 {
        return Err(param_err(format!("OPAUC needs K > 1, got {k}")));
    }
    if rank == 0 {
        return Err(param_err("ranks are 1-based"));
    }
    if vocab_size < 2 || k > vocab_size - 1 {
        return Err(param_err(format!("K = {k} exceeds the {} negatives", vocab_size.saturating_sub(1))));
    }
    Ok(if rank < k {
        (k - rank) as f64 / (k - 1) as f64
    } else {
        0.0
    })
}
