//! Collaborative-filtering embeddings used as alignment targets.
//!
//! [`train_cf`] fits pairwise-ranking matrix factorization (BPR) on the
//! training part of each user's sequence and returns the item factors.
//! Precomputed embeddings from any other model load through
//! [`load_cf_embeddings`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CfEmbeddingTable, EmbeddingTable, InteractionDataset};
use crate::error::{data_err, param_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{cosine, dot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the factors touched by each update.
    pub reg: f64,
    pub init_std: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            dim: 32,
            epochs: 30,
            lr: 0.05,
            reg: 1e-3,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BprMfModel {
    pub user_factors: Tensor,
    pub item_factors: Tensor,
    /// Mean BPR loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl BprMfModel {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.user_factors.row(user), self.item_factors.row(item))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fit BPR-MF on every user's training items. Negatives are drawn
/// uniformly from items the user never interacted with.
pub fn train_bpr(dataset: &InteractionDataset, config: &CfConfig, seed: u64) -> Result<BprMfModel> {
    if config.dim == 0 {
        return Err(param_err("CF dimension must be positive"));
    }
    if !(config.lr > 0.0) || config.reg < 0.0 {
        return Err(param_err("CF learning rate must be positive and reg nonnegative"));
    }
    if dataset.users.is_empty() || dataset.catalog.is_empty() {
        return Err(data_err("empty dataset"));
    }
    let (nu, ni, d) = (dataset.users.len(), dataset.catalog.len(), config.dim);
    let mut rng = SeededRng::new(seed);
    let mut users = rng.normal_tensor(&[nu, d], config.init_std);
    let mut items = rng.normal_tensor(&[ni, d], config.init_std);

    let seen: Vec<Vec<bool>> = dataset
        .users
        .iter()
        .map(|u| {
            let mut s = vec![false; ni];
            for &i in &u.items {
                s[i] = true;
            }
            s
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = dataset
        .users
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| seq.train().iter().map(move |&i| (u, i)))
        .collect();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut pu = vec![0.0; d];
    for _ in 0..config.epochs {
        rng.shuffle(&mut pairs);
        let mut total = 0.0;
        for &(u, i) in &pairs {
            if seen[u].iter().all(|&s| s) {
                continue;
            }
            let j = loop {
                let j = rng.below(ni);
                if !seen[u][j] {
                    break j;
                }
            };
            pu.copy_from_slice(users.row(u));
            let x = dot(&pu, items.row(i)) - dot(&pu, items.row(j));
            total += -sigmoid(x).ln();
            let g = 1.0 - sigmoid(x);
            let (lr, reg) = (config.lr, config.reg);
            for f in 0..d {
                let (qi, qj) = (items.get(i, f), items.get(j, f));
                users.row_mut(u)[f] += lr * (g * (qi - qj) - reg * pu[f]);
                items.row_mut(i)[f] += lr * (g * pu[f] - reg * qi);
                items.row_mut(j)[f] += lr * (-g * pu[f] - reg * qj);
            }
        }
        let mean = total / pairs.len().max(1) as f64;
        if !mean.is_finite() || !items.is_finite() {
            return Err(Error::Numeric("BPR training diverged".into()));
        }
        epoch_losses.push(mean);
    }
    Ok(BprMfModel {
        user_factors: users,
        item_factors: items,
        epoch_losses,
    })
}

/// Train BPR-MF and return its item embedding table.
pub fn train_cf(dataset: &InteractionDataset, config: &CfConfig, seed: u64) -> Result<(CfEmbeddingTable, BprMfModel)> {
    let model = train_bpr(dataset, config, seed)?;
    let table = EmbeddingTable::from_catalog(&dataset.catalog, &model.item_factors)?;
    Ok((table, model))
}

pub fn load_cf_embeddings(path: &Path) -> Result<CfEmbeddingTable> {
    EmbeddingTable::read(path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => cosine(a, b),
        }
    }
}

/// For every row, the most similar other row (ties to the lowest index).
pub fn nearest_cf_pairs(embeddings: &Tensor, similarity: Similarity) -> Result<Vec<(usize, usize)>> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(data_err("need at least two items to pair"));
    }
    let normalized;
    let table = match similarity {
        Similarity::Dot => embeddings,
        Similarity::Cosine => {
            let mut t = embeddings.clone();
            for i in 0..n {
                let norm = crate::tensor::norm(t.row(i));
                if norm > 0.0 {
                    t.row_mut(i).iter_mut().for_each(|x| *x /= norm);
                }
            }
            normalized = t;
            &normalized
        }
    };
    let mut out = Vec::with_capacity(n);
    const BLOCK: usize = 256;
    for start in (0..n).step_by(BLOCK) {
        let idx: Vec<usize> = (start..(start + BLOCK).min(n)).collect();
        let block = table.gather_rows(&idx);
        let sims = block.matmul_t(table)?;
        for (r, &i) in idx.iter().enumerate() {
            let row = sims.row(r);
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (j, &s) in row.iter().enumerate() {
                if j != i && s > best.1 {
                    best = (j, s);
                }
            }
            out.push((i, best.0));
        }
    }
    Ok(out)
}
