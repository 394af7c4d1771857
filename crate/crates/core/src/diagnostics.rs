//! Diagnostics of code assignments, code embeddings and identifier overlap.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cf::BprMfModel;
use crate::data::InteractionDataset;
use crate::error::{param_err, Error, Result};
use crate::genrec::Recommendation;
use crate::metrics::{ndcg_at_k, recall_at_k, RankingResult};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::{CodebookSet, IdentifierAssignment, RqTokenizer};

/// Items per code at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeHistogram {
    /// 1-based level.
    pub level: usize,
    pub counts: Vec<usize>,
    pub utilization: usize,
    /// Natural-log entropy of the normalized counts.
    pub entropy: f64,
}

pub const FREQUENCY_GROUP: usize = 15;

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn to_csv_string<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Histogram of the codes at `level` (1-based) over all items.
pub fn code_histogram(assignment: &IdentifierAssignment, codebook_size: usize, level: usize) -> Result<CodeHistogram> {
    let levels = assignment.levels();
    if level == 0 || level > levels {
        return Err(param_err(format!("level {level} outside 1..={levels}")));
    }
    let mut counts = vec![0; codebook_size];
    for id in &assignment.identifiers {
        let c = id.codes[level - 1];
        if c >= codebook_size {
            return Err(Error::Data(format!("code {c} outside codebook of {codebook_size}")));
        }
        counts[c] += 1;
    }
    Ok(CodeHistogram {
        level,
        utilization: counts.iter().filter(|&&c| c > 0).count(),
        entropy: entropy(&counts),
        counts,
    })
}

impl CodeHistogram {
    /// Counts sorted descending, cut into consecutive groups of `group`
    /// codes; returns `(group_index, mean count)` per group.
    pub fn grouped_frequencies(&self, group: usize) -> Vec<(usize, f64)> {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted
            .chunks(group.max(1))
            .enumerate()
            .map(|(g, c)| (g, c.iter().sum::<usize>() as f64 / c.len() as f64))
            .collect()
    }

    pub fn write_grouped_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .grouped_frequencies(FREQUENCY_GROUP)
            .into_iter()
            .map(|(g, f)| vec![g.to_string(), f.to_string()])
            .collect();
        write(path, to_csv_string(&["group_index", "mean_frequency"], &rows)?)
    }

    pub fn write_counts_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .counts
            .iter()
            .enumerate()
            .map(|(c, n)| vec![c.to_string(), n.to_string()])
            .collect();
        write(path, to_csv_string(&["code", "count"], &rows)?)
    }
}

/// Principal components of a point set.
#[derive(Clone, Debug)]
pub struct Pca {
    /// `[n, components]` projections of the centered points.
    pub coords: Tensor,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit principal axes, one per kept component.
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl Pca {
    pub fn components(&self) -> usize {
        self.axes.len()
    }

    /// Mean squared distance between each centered point and its projection
    /// onto the kept axes.
    pub fn reconstruction_error(&self, points: &Tensor) -> f64 {
        let n = points.rows();
        let mut total = 0.0;
        for i in 0..n {
            let x: Vec<f64> = points.row(i).iter().zip(&self.mean).map(|(a, m)| a - m).collect();
            let mut r = x.clone();
            for (k, axis) in self.axes.iter().enumerate() {
                let c = self.coords.get(i, k);
                for (rj, aj) in r.iter_mut().zip(axis) {
                    *rj -= c * aj;
                }
            }
            total += dot(&r, &r);
        }
        total / n as f64
    }
}

/// Centered PCA from the eigendecomposition of the (1/n) covariance.
///
/// Each axis is oriented so that the coordinate of largest magnitude along
/// it is positive. Fewer than `k` components are returned, with a warning,
/// when the covariance rank is below `k`.
pub fn pca(points: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = (points.rows(), points.cols());
    if n == 0 || k == 0 {
        return Err(param_err("PCA needs points and at least one component"));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| points.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = eigenvalues[0].abs().max(f64::MIN_POSITIVE);
    let rank = eigenvalues.iter().filter(|&&l| l > top * 1e-12).count();
    let kept = k.min(rank).min(d);
    if kept < k {
        warn!("covariance rank {rank} is below {k}; exporting {kept} components");
    }
    let mut axes = Vec::with_capacity(kept);
    let mut coords = Tensor::zeros(&[n, kept]);
    for (c, &i) in order.iter().take(kept).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let proj: Vec<f64> = (0..n).map(|r| centered.row(r).iter().zip(&axis).map(|(a, b)| a * b).sum()).collect();
        let mut lead = 0;
        for r in 1..n {
            if proj[r].abs() > proj[lead].abs() {
                lead = r;
            }
        }
        let sign = if proj[lead] < 0.0 { -1.0 } else { 1.0 };
        axis.iter_mut().for_each(|a| *a *= sign);
        for r in 0..n {
            coords.set(r, c, proj[r] * sign);
        }
        axes.push(axis);
    }
    Ok(Pca {
        coords,
        eigenvalues,
        axes,
        mean,
    })
}

/// 3-d PCA of one level's code embeddings with per-code assignment counts.
#[derive(Clone, Debug)]
pub struct CodeEmbeddingPca {
    pub level: usize,
    pub pca: Pca,
    pub counts: Vec<usize>,
}

pub fn export_code_embedding_pca(
    codebooks: &CodebookSet,
    assignment: &IdentifierAssignment,
    level: usize,
) -> Result<CodeEmbeddingPca> {
    if level == 0 || level > codebooks.num_levels() {
        return Err(param_err(format!("level {level} outside 1..={}", codebooks.num_levels())));
    }
    let cb = &codebooks.levels[level - 1];
    if cb.rows() < 3 {
        return Err(param_err("PCA export needs at least 3 codes"));
    }
    let hist = code_histogram(assignment, cb.rows(), level)?;
    Ok(CodeEmbeddingPca {
        level,
        pca: pca(cb, 3)?,
        counts: hist.counts,
    })
}

impl CodeEmbeddingPca {
    /// `code,pc1..pcK,count` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.pca.components();
        let mut header = vec!["code".to_string()];
        header.extend((1..=k).map(|c| format!("pc{c}")));
        header.push("count".into());
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..self.counts.len())
            .map(|c| {
                let mut r = vec![c.to_string()];
                r.extend((0..k).map(|j| self.pca.coords.get(c, j).to_string()));
                r.push(self.counts[c].to_string());
                r
            })
            .collect();
        write(path, to_csv_string(&h, &rows)?)
    }
}

/// Recall and NDCG at several cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub users: usize,
    /// `(K, Recall@K, NDCG@K)`.
    pub at: Vec<(usize, f64, f64)>,
}

impl RankingMetrics {
    pub fn from_results(results: &[RankingResult], ks: &[usize]) -> Result<Self> {
        let at = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(results, k)?, ndcg_at_k(results, k)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RankingMetrics {
            users: results.len(),
            at,
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|a| a.0 == k).map(|a| a.1)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|a| a.0 == k).map(|a| a.2)
    }

    /// `metric,K,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for &(k, r, n) in &self.at {
            rows.push(vec!["recall".to_string(), k.to_string(), r.to_string()]);
            rows.push(vec!["ndcg".to_string(), k.to_string(), n.to_string()]);
        }
        to_csv_string(&["metric", "k", "value"], &rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write(path, self.to_csv()?)
    }
}

/// Full-catalog ranking of each user's test item by `user · item` scores.
/// The rank counts items scoring strictly higher, so ties favour the target.
pub fn embedding_ranking(
    user_factors: &Tensor,
    item_embeddings: &Tensor,
    dataset: &InteractionDataset,
    ks: &[usize],
) -> Result<RankingMetrics> {
    if user_factors.rows() != dataset.users.len() {
        return Err(Error::Data(format!(
            "{} user factors for {} users",
            user_factors.rows(),
            dataset.users.len()
        )));
    }
    if item_embeddings.rows() != dataset.catalog.len() {
        return Err(Error::Data(format!(
            "{} item embeddings for {} items",
            item_embeddings.rows(),
            dataset.catalog.len()
        )));
    }
    if user_factors.cols() != item_embeddings.cols() {
        return Err(Error::Dimension(format!(
            "user width {} vs item width {}",
            user_factors.cols(),
            item_embeddings.cols()
        )));
    }
    let scores = user_factors.matmul_t(item_embeddings)?;
    let results: Vec<RankingResult> = dataset
        .users
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            let row = scores.row(u);
            let s = row[seq.test_target()];
            let above = row.iter().filter(|&&x| x > s).count();
            RankingResult {
                rank: Some(above + 1),
                list_len: row.len(),
            }
        })
        .collect();
    RankingMetrics::from_results(&results, ks)
}

/// Least-squares map `W` minimising `||source · W - target||`.
pub fn least_squares_map(source: &Tensor, target: &Tensor) -> Result<Tensor> {
    if source.rows() != target.rows() {
        return Err(Error::Dimension("least squares needs matching row counts".into()));
    }
    let a = DMatrix::from_row_slice(source.rows(), source.cols(), source.data());
    let b = DMatrix::from_row_slice(target.rows(), target.cols(), target.data());
    let w = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    let mut out = Tensor::zeros(&[source.cols(), target.cols()]);
    for i in 0..source.cols() {
        for j in 0..target.cols() {
            out.set(i, j, w[(i, j)]);
        }
    }
    Ok(out)
}

/// Rank test items with the CF model's user factors but `quantized` item
/// embeddings in place of its own, projected by least squares onto the CF
/// item factors when the widths differ.
pub fn substituted_ranking(
    quantized: &Tensor,
    cf: &BprMfModel,
    dataset: &InteractionDataset,
    ks: &[usize],
) -> Result<RankingMetrics> {
    let (user_factors, item_factors) = (&cf.user_factors, &cf.item_factors);
    if quantized.rows() != dataset.catalog.len() {
        return Err(Error::Data(format!(
            "{} quantized embeddings for {} items",
            quantized.rows(),
            dataset.catalog.len()
        )));
    }
    let items = if quantized.cols() == user_factors.cols() {
        quantized.clone()
    } else {
        quantized.matmul(&least_squares_map(quantized, item_factors)?)?
    };
    embedding_ranking(user_factors, &items, dataset, ks)
}

/// [`substituted_ranking`] with the tokenizer's quantized embeddings of the
/// catalog-aligned `semantic` rows.
pub fn quantized_embedding_ranking(
    tokenizer: &RqTokenizer,
    semantic: &Tensor,
    cf: &BprMfModel,
    dataset: &InteractionDataset,
    ks: &[usize],
) -> Result<RankingMetrics> {
    let q = tokenizer.quantized_embeddings(semantic)?;
    substituted_ranking(&q, cf, dataset, ks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    /// Fraction of levels with the same code.
    #[default]
    Positionwise,
    /// Size of the multiset intersection of the codes over L, ignoring level.
    Set,
}

/// Mean code overlap over item pairs.
pub fn code_overlap_similarity(
    assignment: &IdentifierAssignment,
    pairs: &[(usize, usize)],
    mode: OverlapMode,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to compare".into()));
    }
    let n = assignment.identifiers.len();
    let mut total = 0.0;
    for &(a, b) in pairs {
        if a >= n || b >= n {
            return Err(Error::Data(format!("pair ({a}, {b}) has an item without identifier")));
        }
        let (x, y) = (&assignment.identifiers[a].codes, &assignment.identifiers[b].codes);
        let l = x.len().max(1) as f64;
        let shared = match mode {
            OverlapMode::Positionwise => x.iter().zip(y).filter(|(p, q)| p == q).count(),
            OverlapMode::Set => {
                let mut rest = y.clone();
                x.iter()
                    .filter(|c| match rest.iter().position(|r| r == *c) {
                        Some(k) => {
                            rest.swap_remove(k);
                            true
                        }
                        None => false,
                    })
                    .count()
            }
        };
        total += shared as f64 / l;
    }
    Ok(total / pairs.len() as f64)
}

/// How often each item appears among the generated recommendation lists.
pub fn generation_frequency(lists: &[Vec<Recommendation>], num_items: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_items];
    for r in lists.iter().flatten() {
        *counts
            .get_mut(r.item)
            .ok_or_else(|| Error::Data(format!("generated item {} outside catalog", r.item)))? += 1;
    }
    Ok(counts)
}

/// Generation counts summed per level-1 code, alongside the number of items
/// holding that code: `(code, items, generations)`.
pub fn generation_by_first_code(
    counts: &[usize],
    assignment: &IdentifierAssignment,
    codebook_size: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let hist = code_histogram(assignment, codebook_size, 1)?;
    let mut gens = vec![0; codebook_size];
    for (item, &c) in counts.iter().enumerate() {
        let id = assignment
            .identifiers
            .get(item)
            .ok_or_else(|| Error::Data(format!("item {item} has no identifier")))?;
        gens[id.codes[0]] += c;
    }
    Ok((0..codebook_size).map(|c| (c, hist.counts[c], gens[c])).collect())
}

pub fn write_generation_csv(path: &Path, rows: &[(usize, usize, usize)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|&(c, i, g)| vec![c.to_string(), i.to_string(), g.to_string()])
        .collect();
    write(path, to_csv_string(&["code", "items", "generations"], &rows)?)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Data("labelings must be non-empty and of equal length".into()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let expected = rows * cols / c2(a.len());
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
