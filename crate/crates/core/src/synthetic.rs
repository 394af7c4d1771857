//! Synthetic catalogs with controllable semantic and collaborative structure.
//!
//! Every item belongs to a semantic topic (its semantic vector is the topic
//! centroid plus Gaussian noise) and to a behaviour group. With probability
//! `group_agreement` the behaviour group equals the topic; otherwise it is
//! drawn uniformly, so collaborative and semantic signals only partially
//! agree. Within a group the items form a random ring. A user prefers one
//! or two groups and walks their rings: the next item is the ring successor
//! of the previous one with probability `successor_prob`, otherwise a
//! uniformly drawn item of a preferred group.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, Interaction};
use crate::error::{param_err, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub items: usize,
    pub users: usize,
    pub topics: usize,
    pub semantic_dim: usize,
    /// Standard deviation of topic centroids.
    pub centroid_scale: f64,
    /// Standard deviation of per-item noise around the centroid.
    pub noise_scale: f64,
    pub group_agreement: f64,
    pub successor_prob: f64,
    /// Probability that a user also prefers a second group.
    pub second_group_prob: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            items: 2000,
            users: 1600,
            topics: 20,
            semantic_dim: 64,
            centroid_scale: 1.0,
            noise_scale: 0.35,
            group_agreement: 0.5,
            successor_prob: 0.7,
            second_group_prob: 0.3,
            min_length: 8,
            max_length: 17,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.items == 0 || self.users == 0 || self.topics == 0 || self.semantic_dim == 0 {
            return Err(param_err("items, users, topics and semantic_dim must be positive"));
        }
        if self.topics > self.items {
            return Err(param_err(format!(
                "{} topics for {} items",
                self.topics, self.items
            )));
        }
        if self.min_length < 5 || self.min_length > self.max_length {
            return Err(param_err("need 5 <= min_length <= max_length"));
        }
        for (name, p) in [
            ("group_agreement", self.group_agreement),
            ("successor_prob", self.successor_prob),
            ("second_group_prob", self.second_group_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(param_err(format!("{name} must be a probability")));
            }
        }
        if self.noise_scale < 0.0 || self.centroid_scale < 0.0 {
            return Err(param_err("scales must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub semantic: EmbeddingTable,
    pub interactions: Vec<Interaction>,
    /// Semantic topic of item `i` (item id is `i.to_string()`).
    pub topics: Vec<usize>,
    /// Behaviour group of item `i`.
    pub groups: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut rng = root.fork("semantic");

    let centroids: Vec<Vec<f64>> = (0..spec.topics)
        .map(|_| (0..spec.semantic_dim).map(|_| spec.centroid_scale * rng.normal()).collect())
        .collect();
    // round-robin topics keep every topic populated
    let mut topics: Vec<usize> = (0..spec.items).map(|i| i % spec.topics).collect();
    rng.shuffle(&mut topics);
    let mut semantic = EmbeddingTable::new(spec.semantic_dim);
    for (i, &t) in topics.iter().enumerate() {
        let v: Vec<f64> = centroids[t]
            .iter()
            .map(|c| c + spec.noise_scale * rng.normal())
            .collect();
        semantic.insert(&i.to_string(), &v)?;
    }

    let mut rng = root.fork("groups");
    let groups: Vec<usize> = topics
        .iter()
        .map(|&t| {
            if rng.bernoulli(spec.group_agreement) {
                t
            } else {
                rng.below(spec.topics)
            }
        })
        .collect();
    let mut rings: Vec<Vec<usize>> = vec![Vec::new(); spec.topics];
    for (i, &g) in groups.iter().enumerate() {
        rings[g].push(i);
    }
    for ring in rings.iter_mut() {
        rng.shuffle(ring);
    }
    let mut successor = vec![0usize; spec.items];
    for ring in &rings {
        for (k, &it) in ring.iter().enumerate() {
            successor[it] = ring[(k + 1) % ring.len()];
        }
    }
    let populated: Vec<usize> = (0..spec.topics).filter(|&g| !rings[g].is_empty()).collect();

    let mut rng = root.fork("sequences");
    let mut interactions = Vec::new();
    for u in 0..spec.users {
        let mut prefs = vec![populated[rng.below(populated.len())]];
        if rng.bernoulli(spec.second_group_prob) && populated.len() > 1 {
            loop {
                let g = populated[rng.below(populated.len())];
                if g != prefs[0] {
                    prefs.push(g);
                    break;
                }
            }
        }
        let len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        while seq.len() < len {
            let next = match seq.last() {
                Some(&prev) if rng.bernoulli(spec.successor_prob) => successor[prev],
                _ => {
                    let ring = &rings[prefs[rng.below(prefs.len())]];
                    ring[rng.below(ring.len())]
                }
            };
            seq.push(next);
        }
        for (t, it) in seq.into_iter().enumerate() {
            interactions.push(Interaction {
                user: u.to_string(),
                item: it.to_string(),
                timestamp: t as i64,
            });
        }
    }
    Ok(SyntheticData {
        semantic,
        interactions,
        topics,
        groups,
    })
}
