use rand_distr::{Distribution, StandardNormal};

use super::{split_train_test, FederatedData, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::numkit::Rng;

/// Minimum gap between the winning and runner-up score of a group's labeling
/// function, as a multiple of sqrt(feature dim).
const MARGIN: f64 = 0.1;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random linear labeling function `x -> argmax_k <w_k, x>`.
#[derive(Debug, Clone)]
struct LinearLabeler {
    weights: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl LinearLabeler {
    fn random(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        LinearLabeler {
            weights: (0..dim * classes).map(|_| normal(rng)).collect(),
            dim,
            classes,
        }
    }

    /// Winning class and its score gap over the runner-up.
    fn label(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for k in 0..self.classes {
            let s: f64 = self.weights[k * self.dim..(k + 1) * self.dim]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum();
            if s > best.1 {
                second = best.1;
                best = (k, s);
            } else if s > second {
                second = s;
            }
        }
        (best.0, best.1 - second)
    }

    /// Draws a standard-normal point whose label is `target`, respecting the margin.
    fn sample_with_label(&self, target: usize, rng: &mut Rng) -> Vec<f64> {
        let margin = MARGIN * (self.dim as f64).sqrt();
        loop {
            let x: Vec<f64> = (0..self.dim).map(|_| normal(rng)).collect();
            let (y, gap) = self.label(&x);
            if self.classes == 1 || (y == target && gap >= margin) {
                return x;
            }
        }
    }
}

/// Clients grouped by a ground-truth labeling function.
///
/// Each of `num_groups` groups gets its own random linear labeling rule. Every client
/// in a group draws `n_per_client` class-balanced samples from that rule, then each
/// label is flipped to a different random class with probability `noise`. Clients are
/// indexed group by group, so `group_truth` reads `[0,0,..,1,1,..]`.
pub fn synth_clusters(
    num_groups: usize,
    clients_per_group: usize,
    dim: usize,
    num_classes: usize,
    n_per_client: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<FederatedData> {
    synth_clusters_with_rules(
        num_groups,
        clients_per_group,
        dim,
        num_classes,
        n_per_client,
        noise,
        rng,
    )
    .map(|(fd, _)| fd)
}

fn synth_clusters_with_rules(
    num_groups: usize,
    clients_per_group: usize,
    dim: usize,
    num_classes: usize,
    n_per_client: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<(FederatedData, Vec<LinearLabeler>)> {
    if num_groups == 0 || clients_per_group == 0 || dim == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument(
            "synth_clusters counts must be positive".into(),
        ));
    }
    if n_per_client < 2 {
        return Err(Error::InvalidArgument(
            "synth_clusters needs at least 2 samples per client".into(),
        ));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!(
            "label noise must lie in [0, 1], got {noise}"
        )));
    }
    let labelers: Vec<LinearLabeler> = (0..num_groups)
        .map(|_| LinearLabeler::random(dim, num_classes, rng))
        .collect();

    let mut shards = Vec::with_capacity(num_groups * clients_per_group);
    let mut class_map = Vec::with_capacity(shards.capacity());
    let mut group_truth = Vec::with_capacity(shards.capacity());
    for (g, labeler) in labelers.iter().enumerate() {
        for _ in 0..clients_per_group {
            let mut features = Vec::with_capacity(n_per_client * dim);
            let mut labels = Vec::with_capacity(n_per_client);
            for s in 0..n_per_client {
                let target = s % num_classes;
                features.extend(labeler.sample_with_label(target, rng));
                let mut y = target;
                if num_classes > 1 && noise > 0.0 && rng.uniform() < noise {
                    y = (target + 1 + rng.below(num_classes - 1)) % num_classes;
                }
                labels.push(y);
            }
            let local = Dataset::new(features, labels, dim, num_classes)?;
            class_map.push(local.class_counts());
            let all: Vec<usize> = (0..local.len()).collect();
            shards.push(split_train_test(&local, &all, DEFAULT_TEST_FRACTION, rng)?);
            group_truth.push(g);
        }
    }
    let fd = FederatedData {
        shards,
        class_map,
        group_truth: Some(group_truth),
        source_rows: None,
    };
    Ok((fd, labelers))
}

/// Single pooled dataset of Gaussian class blobs, used as the base for partitioners.
///
/// Class means are standard normal scaled by `separation`; samples add isotropic
/// unit noise. Labels cycle through the classes so supply is balanced.
pub fn synth_blobs(
    n: usize,
    dim: usize,
    num_classes: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if n == 0 || dim == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument("synth_blobs sizes must be positive".into()));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| separation * normal(rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        features.extend(means[y].iter().map(|m| m + normal(rng)));
        labels.push(y);
    }
    Dataset::new(features, labels, dim, num_classes)
}
