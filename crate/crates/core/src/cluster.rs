//! Lloyd's K-means with k-means++ seeding.

use crate::error::{param_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
    /// Objective after every assignment step.
    pub history: Vec<f64>,
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn objective(points: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    (0..points.rows())
        .map(|i| squared_distance(points.row(i), centroids.row(assignment[i])))
        .sum()
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_pp_init(points: &Tensor, k: usize, rng: &mut SeededRng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = rng.weighted_index(&d2);
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.gather_rows(&chosen)
}

/// Lloyd iterations until the assignment stops changing or `max_iter`.
pub fn kmeans(points: &Tensor, k: usize, max_iter: usize, rng: &mut SeededRng) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(param_err(format!("cannot form {k} clusters from {n} points")));
    }
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            if c != assignment[i] {
                changed = true;
                assignment[i] = c;
            }
            dist[i] = d;
        }
        history.push(dist.iter().sum());
        if !changed {
            break;
        }
        update_centroids(points, &assignment, &mut centroids, &dist);
    }
    let objective = objective(points, &centroids, &assignment);
    Ok(KMeansResult {
        centroids,
        assignment,
        objective,
        history,
    })
}

/// Best of several seeded restarts by objective.
pub fn kmeans_restarts(
    points: &Tensor,
    k: usize,
    max_iter: usize,
    restarts: usize,
    rng: &mut SeededRng,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let r = kmeans(points, k, max_iter, rng)?;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    Ok(best.unwrap())
}

/// Means of assigned points; an empty cluster takes the point currently
/// farthest from its centre.
fn update_centroids(points: &Tensor, assignment: &[usize], centroids: &mut Tensor, dist: &[f64]) {
    let (k, d) = (centroids.rows(), centroids.cols());
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut taken = vec![false; points.rows()];
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = s / counts[c] as f64;
            }
        } else {
            let far = (0..points.rows())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            taken[far] = true;
            centroids.row_mut(c).copy_from_slice(points.row(far));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_points_n_clusters_reproduces_points() {
        let mut rng = SeededRng::new(2);
        let pts = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
        let r = kmeans(&pts, 6, 20, &mut rng).unwrap();
        assert!(r.objective.abs() < 1e-24);
        for i in 0..6 {
            assert_eq!(r.centroids.row(r.assignment[i]), pts.row(i));
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = SeededRng::new(4);
        let pts = rng.normal_tensor(&[200, 4], 1.0);
        let r = kmeans(&pts, 8, 100, &mut rng).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", r.history);
        }
    }

    #[test]
    fn too_many_clusters_is_rejected() {
        let mut rng = SeededRng::new(0);
        let pts = Tensor::zeros(&[3, 2]);
        assert!(kmeans(&pts, 4, 10, &mut rng).is_err());
        assert!(kmeans(&pts, 0, 10, &mut rng).is_err());
    }
}
