//! Synthetic task generation, CSV loading and non-IID client partitioning.

mod csv_load;
mod partition;
mod synth;

use std::path::Path;

use serde::Serialize;

pub use csv_load::{load_csv, CsvSchema};
pub use partition::{
    dominant_class_sets, partition, partition_dirichlet, partition_dominant,
    partition_pathological, PartitionSetting, PartitionSpec,
};
pub use synth::{synth_blobs, synth_clusters};

use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::numkit::Rng;

/// Share of each client's allocation held out for testing.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Maximum total-variation distance tolerated between a client's train and test
/// class histograms.
pub const DEFAULT_TV_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-client train/test shards plus bookkeeping about how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub shards: Vec<ClientShard>,
    /// Class histogram of each client's full allocation (train and test together).
    pub class_map: Vec<Vec<usize>>,
    /// Ground-truth group of each client when the construction has one.
    pub group_truth: Option<Vec<usize>>,
    /// Rows of the base dataset allocated to each client, when partitioned from one.
    pub source_rows: Option<Vec<Vec<usize>>>,
}

#[derive(Serialize)]
struct ManifestClient<'a> {
    client: usize,
    train_size: usize,
    test_size: usize,
    class_histogram: &'a [usize],
    group: Option<usize>,
}

impl FederatedData {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn num_classes(&self) -> usize {
        self.shards.first().map_or(0, |s| s.train.num_classes())
    }

    pub fn dim(&self) -> usize {
        self.shards.first().map_or(0, |s| s.train.dim())
    }

    /// Largest train/test total-variation distance over all clients.
    pub fn max_train_test_tv(&self) -> f64 {
        self.shards
            .iter()
            .map(|s| total_variation(&s.train.class_counts(), &s.test.class_counts()))
            .fold(0.0, f64::max)
    }

    /// JSON manifest with per-client sizes, class histograms and group ids.
    pub fn manifest_json(&self) -> Result<String> {
        let clients: Vec<ManifestClient> = self
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestClient {
                client: i,
                train_size: s.train.len(),
                test_size: s.test.len(),
                class_histogram: &self.class_map[i],
                group: self.group_truth.as_ref().map(|g| g[i]),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&clients)?)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.manifest_json()?.as_bytes())
    }
}

/// Total-variation distance between two histograms after normalization.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let sa: usize = a.iter().sum();
    let sb: usize = b.iter().sum();
    if sa == 0 || sb == 0 {
        return if sa == sb { 0.0 } else { 1.0 };
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa as f64 - y as f64 / sb as f64).abs())
        .sum::<f64>()
}

/// Splits the rows `indices` of `base` into train/test, stratified by class.
///
/// The test size is `round(test_fraction * n)` (at least one) and is apportioned over
/// classes by largest remainder, so the test histogram tracks the train histogram.
pub(crate) fn split_train_test(
    base: &Dataset,
    indices: &[usize],
    test_fraction: f64,
    rng: &mut Rng,
) -> Result<ClientShard> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::Infeasible(format!(
            "a client needs at least 2 samples for a train/test split, got {n}"
        )));
    }
    let c = base.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in indices {
        by_class[base.label(i)].push(i);
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let exact: Vec<f64> = by_class
        .iter()
        .map(|rows| rows.len() as f64 * n_test as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n_test - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // Terminates: total capacity n exceeds n_test.
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if take[k] < by_class[k].len() {
            take[k] += 1;
            left -= 1;
        }
    }

    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (k, rows) in by_class.iter_mut().enumerate() {
        rng.shuffle(rows);
        test.extend_from_slice(&rows[..take[k]]);
        train.extend_from_slice(&rows[take[k]..]);
    }
    Ok(ClientShard {
        train: base.subset(&train)?,
        test: base.subset(&test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_basics() {
        assert_eq!(total_variation(&[1, 1], &[2, 2]), 0.0);
        assert_eq!(total_variation(&[1, 0], &[0, 1]), 1.0);
        assert!((total_variation(&[3, 1], &[1, 1]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn stratified_split_matches_histogram() {
        let labels: Vec<usize> = (0..50).map(|i| if i < 40 { 0 } else { 1 }).collect();
        let base = Dataset::new(vec![0.0; 50], labels, 1, 2).unwrap();
        let all: Vec<usize> = (0..50).collect();
        let s = split_train_test(&base, &all, 0.2, &mut Rng::new(1)).unwrap();
        assert_eq!(s.test.class_counts(), vec![8, 2]);
        assert_eq!(s.train.class_counts(), vec![32, 8]);
    }

    #[test]
    fn split_needs_two_samples() {
        let base = Dataset::new(vec![0.0], vec![0], 1, 1).unwrap();
        assert!(matches!(
            split_train_test(&base, &[0], 0.2, &mut Rng::new(1)),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn manifest_lists_clients() {
        let fd = synth_clusters(2, 2, 2, 2, 10, 0.0, &mut Rng::new(1)).unwrap();
        let json: serde_json::Value = serde_json::from_str(&fd.manifest_json().unwrap()).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 4);
        assert_eq!(json[3]["group"], 1);
    }
}
