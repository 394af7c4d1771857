//! Collaborative alignment, codebook diversity and the combined tokenizer
//! objective.
//!
//! Both contrastive losses come in two forms. [`ContrastiveMode::Infonce`]
//! takes `−log` of the softmax ratio; [`ContrastiveMode::RatioOnly`]
//! negates the ratio itself.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{RatioMode, Tape, Var};
use crate::cf::Similarity;
use crate::cluster::kmeans_pp_init;
use crate::error::{dim_err, param_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveMode {
    #[default]
    Infonce,
    RatioOnly,
}

impl ContrastiveMode {
    pub fn ratio_mode(self) -> RatioMode {
        match self {
            ContrastiveMode::Infonce => RatioMode::NegLog,
            ContrastiveMode::RatioOnly => RatioMode::Neg,
        }
    }
}

fn similarity_rows(tape: &mut Tape, x: Var, similarity: Similarity) -> Var {
    match similarity {
        Similarity::Dot => x,
        Similarity::Cosine => tape.normalize_rows(x),
    }
}

/// In-batch contrastive alignment of quantized latents `zhat` `[B, d]` with
/// CF vectors `h` `[B, d]`; row `i` of `h` is the positive for row `i` of
/// `zhat`, the other rows are negatives. Mean over the batch. `h` is
/// treated as a frozen target.
///
/// A batch of one is accepted (its softmax has a single entry) but logged,
/// since it carries no contrastive signal.
pub fn cf_alignment_loss(
    tape: &mut Tape,
    zhat: Var,
    h: Var,
    mode: ContrastiveMode,
    similarity: Similarity,
) -> Result<Var> {
    let (b, d) = (tape.value(zhat).rows(), tape.value(zhat).cols());
    let hv = tape.value(h);
    if hv.rows() != b || hv.cols() != d {
        return Err(dim_err(format!(
            "CF batch {:?} does not match quantized batch [{b}, {d}]",
            hv.shape()
        )));
    }
    if b == 0 {
        return Err(param_err("CF alignment needs a nonempty batch"));
    }
    if b == 1 {
        warn!("CF alignment on a batch of one: no in-batch negatives");
    }
    let h = tape.stop_gradient(h);
    let zn = similarity_rows(tape, zhat, similarity);
    let hn = similarity_rows(tape, h, similarity);
    let logits = tape.matmul_t(zn, hn)?;
    let targets: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy_rows(logits, &targets, None, 1.0, mode.ratio_mode())?;
    Ok(tape.mean(rows))
}

/// Balanced clustering of code embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster of every point.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub centroids: Tensor,
    /// Within-cluster sum of squares of the final assignment.
    pub objective: f64,
    /// Objective after every accepted alternation of the best restart.
    pub history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    /// Points of cluster `c` in ascending index order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == c)
            .collect()
    }

    /// Members of every cluster.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            g[c].push(i);
        }
        g
    }
}

pub const CONSTRAINED_KMEANS_RESTARTS: usize = 5;
pub const CONSTRAINED_KMEANS_MAX_ITER: usize = 50;

/// Assign points to centroids greedily by ascending distance with the
/// capacities of a balanced partition: `n mod k` clusters may hold
/// `⌈n/k⌉` points, the rest `⌊n/k⌋`.
pub fn balanced_assign(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    let (n, k) = (points.rows(), centroids.rows());
    let (lo, extra) = (n / k, n % k);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for i in 0..n {
        for c in 0..k {
            pairs.push((squared_distance(points.row(i), centroids.row(c)), i, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assignment = vec![usize::MAX; n];
    let mut counts = vec![0usize; k];
    let mut big = 0usize;
    let mut remaining = n;
    for (_, i, c) in pairs {
        if remaining == 0 {
            break;
        }
        if assignment[i] != usize::MAX {
            continue;
        }
        let open = counts[c] < lo || (counts[c] == lo && big < extra);
        if open {
            if counts[c] == lo {
                big += 1;
            }
            counts[c] += 1;
            assignment[i] = c;
            remaining -= 1;
        }
    }
    assignment
}

fn cluster_means(points: &Tensor, assignment: &[usize], k: usize) -> Tensor {
    let d = points.cols();
    let mut sums = Tensor::zeros(&[k, d]);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= count as f64);
        }
    }
    sums
}

fn wcss(points: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    crate::cluster::objective(points, centroids, assignment)
}

/// K-means under the balanced size constraint. Alternates mean updates with
/// [`balanced_assign`] (kept only when it does not raise the objective)
/// followed by cross-cluster swaps. Best of [`CONSTRAINED_KMEANS_RESTARTS`] seeded
/// restarts.
pub fn constrained_kmeans(points: &Tensor, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(param_err(format!(
            "constrained K-means needs 0 < K <= N, got K={k}, N={n}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..CONSTRAINED_KMEANS_RESTARTS {
        let init = kmeans_pp_init(points, k, &mut rng);
        let mut assignment = balanced_assign(points, &init);
        let mut centroids = cluster_means(points, &assignment, k);
        let mut current = wcss(points, &centroids, &assignment);
        let mut history = vec![current];
        for _ in 0..CONSTRAINED_KMEANS_MAX_ITER {
            let mut next = balanced_assign(points, &centroids);
            if wcss(points, &centroids, &next) > current {
                next = assignment.clone();
            }
            improve_by_swaps(points, &centroids, &mut next);
            if next == assignment {
                break;
            }
            assignment = next;
            centroids = cluster_means(points, &assignment, k);
            current = wcss(points, &centroids, &assignment);
            history.push(current);
        }
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        let candidate = ClusterAssignment {
            assignment,
            sizes,
            centroids,
            objective: current,
            history,
        };
        if best.as_ref().is_none_or(|b| candidate.objective < b.objective) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Exchange pairs of points across clusters while that lowers their summed
/// distance to the fixed centroids. Sizes are unchanged.
fn improve_by_swaps(points: &Tensor, centroids: &Tensor, assignment: &mut [usize]) {
    let n = points.rows();
    let dist = |i: usize, c: usize| squared_distance(points.row(i), centroids.row(c));
    let mut improved = true;
    let mut passes = 0;
    while improved && passes < CONSTRAINED_KMEANS_MAX_ITER {
        improved = false;
        passes += 1;
        for i in 0..n {
            for j in i + 1..n {
                let (ci, cj) = (assignment[i], assignment[j]);
                if ci == cj {
                    continue;
                }
                let delta = dist(i, cj) + dist(j, ci) - dist(i, ci) - dist(j, cj);
                if delta < -1e-12 {
                    assignment.swap(i, j);
                    improved = true;
                }
            }
        }
    }
}

/// Result of [`diversity_loss`].
pub struct DiversityOutput {
    /// Mean contrastive term over the (item, level) pairs that had a
    /// positive; a zero constant when none had.
    pub loss: Var,
    pub terms: usize,
    /// Pairs skipped because the anchor's cluster has a single code.
    pub skipped: usize,
}

/// Codebook diversity term. For every item and level in `levels`, the
/// anchor is the item's code, the positive a uniformly drawn other code of
/// the anchor's cluster, and the softmax runs over all codes but the anchor.
///
/// `codebooks[l]` is the level-`l` codebook on the tape, `codes[i][l]` the
/// level-`l` code of item `i`, `clusters[l]` the clustering of level `l`.
#[allow(clippy::too_many_arguments)]
pub fn diversity_loss(
    tape: &mut Tape,
    codebooks: &[Var],
    codes: &[Vec<usize>],
    clusters: &[ClusterAssignment],
    levels: &[usize],
    mode: ContrastiveMode,
    similarity: Similarity,
    rng: &mut SeededRng,
) -> Result<DiversityOutput> {
    let mut sums = Vec::new();
    let mut terms = 0usize;
    let mut skipped = 0usize;
    for &l in levels {
        let (Some(&cb), Some(clustering)) = (codebooks.get(l), clusters.get(l)) else {
            return Err(dim_err(format!("no codebook or clustering for level {l}")));
        };
        let n = tape.value(cb).rows();
        if clustering.assignment.len() != n {
            return Err(dim_err(format!(
                "level {l}: clustering covers {} codes, codebook has {n}",
                clustering.assignment.len()
            )));
        }
        let groups = clustering.groups();
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        for item_codes in codes {
            let anchor = item_codes[l];
            let group = &groups[clustering.assignment[anchor]];
            if group.len() < 2 {
                skipped += 1;
                continue;
            }
            let at = group.iter().position(|&g| g == anchor).expect("anchor in its cluster");
            let mut pick = rng.below(group.len() - 1);
            if pick >= at {
                pick += 1;
            }
            anchors.push(anchor);
            positives.push(group[pick]);
        }
        if anchors.is_empty() {
            continue;
        }
        let table = similarity_rows(tape, cb, similarity);
        let a = tape.gather_rows(table, &anchors)?;
        let logits = tape.matmul_t(a, table)?;
        let rows = tape.cross_entropy_rows(logits, &positives, Some(&anchors), 1.0, mode.ratio_mode())?;
        terms += anchors.len();
        sums.push(tape.sum(rows));
    }
    let loss = match sums.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &s in rest {
                acc = tape.add(acc, s)?;
            }
            tape.scale(acc, 1.0 / terms as f64)
        }
    };
    Ok(DiversityOutput {
        loss,
        terms,
        skipped,
    })
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(param_err(format!(
            "loss weights must be nonnegative, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

/// `sem + alpha·cf + beta·div`.
pub fn total_loss_value(sem: f64, cf: f64, div: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    Ok(sem + alpha * cf + beta * div)
}

/// Taped `sem + alpha·cf + beta·div`; absent components count as zero.
pub fn total_loss(
    tape: &mut Tape,
    sem: Var,
    cf: Option<Var>,
    div: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    check_weights(alpha, beta)?;
    let mut total = sem;
    for (term, w) in [(cf, alpha), (div, beta)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, w);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_sizes_for_uneven_split() {
        let mut rng = SeededRng::new(1);
        let pts = rng.normal_tensor(&[23, 3], 1.0);
        let r = constrained_kmeans(&pts, 5, 7).unwrap();
        let mut sizes = r.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![4, 4, 5, 5, 5]);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let mut rng = SeededRng::new(2);
        let pts = rng.normal_tensor(&[6, 2], 1.0);
        let r = constrained_kmeans(&pts, 6, 0).unwrap();
        assert!(r.objective.abs() < 1e-24);
        assert!(r.sizes.iter().all(|&s| s == 1));
    }

    #[test]
    fn rejects_bad_k() {
        let pts = Tensor::zeros(&[4, 2]);
        assert!(constrained_kmeans(&pts, 0, 0).is_err());
        assert!(constrained_kmeans(&pts, 5, 0).is_err());
    }

    #[test]
    fn arithmetic_total() {
        assert!((total_loss_value(1.0, 2.0, 3.0, 0.5, 0.1).unwrap() - 2.3).abs() < 1e-15);
        assert!(total_loss_value(1.0, 2.0, 3.0, -0.5, 0.1).is_err());
        assert!(total_loss_value(1.0, 2.0, 3.0, 0.5, -0.1).is_err());
    }
}
