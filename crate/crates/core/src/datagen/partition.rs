use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{split_train_test, FederatedData, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::numkit::{Purpose, Rng};

/// Redraws allowed before a Dirichlet allocation is declared infeasible.
const DIRICHLET_MAX_ATTEMPTS: usize = 100;

/// Which heterogeneity setting to simulate, with exactly that setting's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "snake_case")]
pub enum PartitionSetting {
    /// Each client holds `classes_per_client` classes with equal counts per class.
    Pathological {
        classes_per_client: usize,
        /// Samples per (client, class); defaults to the largest feasible count.
        samples_per_class: Option<usize>,
    },
    /// Clients in a group share dominant classes holding a `dominant_fraction` share of
    /// their data; the rest is drawn uniformly over all classes.
    DominantClass {
        num_groups: usize,
        dominant_fraction: f64,
        /// Dominant classes per group; defaults to `C / num_groups`.
        dominant_per_group: Option<usize>,
        /// Allocation size of every client; defaults to a feasible share of the data.
        samples_per_client: Option<usize>,
    },
    /// Class proportions over clients drawn from a symmetric Dirichlet.
    Dirichlet {
        alpha: f64,
        /// Redraw the allocation while any client has fewer samples than this.
        min_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    #[serde(flatten)]
    pub setting: PartitionSetting,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::config("clients", "partitioning needs at least 2 clients"));
        }
        match self.setting {
            PartitionSetting::Pathological {
                classes_per_client,
                samples_per_class,
            } => {
                if classes_per_client == 0 || classes_per_client > num_classes {
                    return Err(Error::config(
                        "partition.classes_per_client",
                        format!("must lie in 1..={num_classes}, got {classes_per_client}"),
                    ));
                }
                if samples_per_class == Some(0) {
                    return Err(Error::config("partition.samples_per_class", "must be positive"));
                }
            }
            PartitionSetting::DominantClass {
                num_groups,
                dominant_fraction,
                dominant_per_group,
                samples_per_client,
            } => {
                if num_groups == 0 || num_groups > num_classes {
                    return Err(Error::config(
                        "partition.groups",
                        format!("must lie in 1..={num_classes}, got {num_groups}"),
                    ));
                }
                if !self.num_clients.is_multiple_of(num_groups) {
                    return Err(Error::config(
                        "partition.groups",
                        format!("{} clients do not divide into {num_groups} groups", self.num_clients),
                    ));
                }
                if !(dominant_fraction > 0.0 && dominant_fraction <= 1.0) {
                    return Err(Error::config(
                        "s",
                        format!("dominant fraction must lie in (0, 1], got {dominant_fraction}"),
                    ));
                }
                if let Some(b) = dominant_per_group {
                    if b == 0 || b > num_classes {
                        return Err(Error::config(
                            "partition.dominant_per_group",
                            format!("must lie in 1..={num_classes}, got {b}"),
                        ));
                    }
                }
                if matches!(samples_per_client, Some(n) if n < 2) {
                    return Err(Error::config("partition.samples_per_client", "must be at least 2"));
                }
                dominant_class_sets(num_groups, num_classes, dominant_per_group)?;
            }
            PartitionSetting::Dirichlet { alpha, min_samples } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config("alpha", format!("must be > 0, got {alpha}")));
                }
                if min_samples < 2 {
                    return Err(Error::config("partition.min_samples", "must be at least 2"));
                }
            }
        }
        Ok(())
    }
}

/// Dispatches on the setting using the spec's own seed.
pub fn partition(base: &Dataset, spec: &PartitionSpec) -> Result<FederatedData> {
    let mut rng = Rng::stream(spec.seed, Purpose::Partition, &[]);
    match spec.setting {
        PartitionSetting::Pathological { .. } => partition_pathological(base, spec, &mut rng),
        PartitionSetting::DominantClass { .. } => partition_dominant(base, spec, &mut rng),
        PartitionSetting::Dirichlet { .. } => partition_dirichlet(base, spec, &mut rng),
    }
}

fn class_pools(base: &Dataset, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); base.num_classes()];
    for i in 0..base.len() {
        pools[base.label(i)].push(i);
    }
    for p in &mut pools {
        rng.shuffle(p);
    }
    pools
}

fn finish(
    base: &Dataset,
    allocations: Vec<Vec<usize>>,
    group_truth: Option<Vec<usize>>,
    rng: &mut Rng,
) -> Result<FederatedData> {
    let mut shards = Vec::with_capacity(allocations.len());
    let mut class_map = Vec::with_capacity(allocations.len());
    for rows in &allocations {
        let mut hist = vec![0; base.num_classes()];
        for &i in rows {
            hist[base.label(i)] += 1;
        }
        class_map.push(hist);
        shards.push(split_train_test(base, rows, DEFAULT_TEST_FRACTION, rng)?);
    }
    Ok(FederatedData {
        shards,
        class_map,
        group_truth,
        source_rows: Some(allocations),
    })
}

/// Every client receives `classes_per_client` random distinct classes and the same
/// number of samples from each of them.
pub fn partition_pathological(
    base: &Dataset,
    spec: &PartitionSpec,
    rng: &mut Rng,
) -> Result<FederatedData> {
    let c = base.num_classes();
    spec.validate(c)?;
    let PartitionSetting::Pathological {
        classes_per_client,
        samples_per_class,
    } = spec.setting
    else {
        return Err(Error::InvalidArgument("expected a pathological partition spec".into()));
    };
    let n = spec.num_clients;
    let assigned: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut cls = rng.sample_indices(c, classes_per_client);
            cls.sort_unstable();
            cls
        })
        .collect();
    let mut demand = vec![0usize; c];
    for cls in &assigned {
        for &k in cls {
            demand[k] += 1;
        }
    }
    let supply = base.class_counts();
    let feasible = (0..c)
        .filter(|&k| demand[k] > 0)
        .map(|k| supply[k] / demand[k])
        .min()
        .unwrap_or(0);
    let per_class = samples_per_class.unwrap_or(feasible);
    if per_class == 0 || per_class > feasible || per_class * classes_per_client < 2 {
        return Err(Error::Infeasible(format!(
            "class supply allows {feasible} samples per client-class, {per_class} requested"
        )));
    }
    let mut pools = class_pools(base, rng);
    let allocations = assigned
        .iter()
        .map(|cls| {
            cls.iter()
                .flat_map(|&k| {
                    let at = pools[k].len() - per_class;
                    pools[k].split_off(at)
                })
                .collect()
        })
        .collect();
    finish(base, allocations, None, rng)
}

/// Dominant-class sets of each group as contiguous class blocks.
///
/// Blocks are disjoint when `num_groups * block <= C`. Otherwise block starts are
/// spread evenly around the class ring (`floor(g * C / G)`) and neighbouring groups
/// overlap; sets must still be pairwise distinct.
pub fn dominant_class_sets(
    num_groups: usize,
    num_classes: usize,
    per_group: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let block = per_group.unwrap_or(num_classes / num_groups.max(1)).max(1);
    if block > num_classes {
        return Err(Error::config(
            "partition.dominant_per_group",
            format!("{block} dominant classes exceed {num_classes} classes"),
        ));
    }
    let sets: Vec<Vec<usize>> = if num_groups * block <= num_classes {
        (0..num_groups)
            .map(|g| (g * block..(g + 1) * block).collect())
            .collect()
    } else {
        (0..num_groups)
            .map(|g| {
                let start = g * num_classes / num_groups;
                let mut s: Vec<usize> = (0..block).map(|j| (start + j) % num_classes).collect();
                s.sort_unstable();
                s
            })
            .collect()
    };
    for a in 0..sets.len() {
        for b in 0..a {
            if sets[a] == sets[b] {
                return Err(Error::config(
                    "partition.dominant_per_group",
                    format!("groups {b} and {a} would share the same dominant classes"),
                ));
            }
        }
    }
    Ok(sets)
}

/// Group-structured skew: a share `s` of every client's data comes from its group's
/// dominant classes, the remainder uniformly from all classes. Clients are assigned to
/// groups in contiguous index blocks.
pub fn partition_dominant(
    base: &Dataset,
    spec: &PartitionSpec,
    rng: &mut Rng,
) -> Result<FederatedData> {
    let c = base.num_classes();
    spec.validate(c)?;
    let PartitionSetting::DominantClass {
        num_groups,
        dominant_fraction: s,
        dominant_per_group,
        samples_per_client,
    } = spec.setting
    else {
        return Err(Error::InvalidArgument("expected a dominant-class partition spec".into()));
    };
    let n_clients = spec.num_clients;
    let per_group = n_clients / num_groups;
    let sets = dominant_class_sets(num_groups, c, dominant_per_group)?;
    let group_of: Vec<usize> = (0..n_clients).map(|i| i / per_group).collect();
    let supply = base.class_counts();

    // Expected per-sample demand for each class, summed over clients.
    let mut unit_demand = vec![(1.0 - s) / c as f64 * n_clients as f64; c];
    for &g in &group_of {
        for &k in &sets[g] {
            unit_demand[k] += s / sets[g].len() as f64;
        }
    }
    let size = match samples_per_client {
        Some(n) => n,
        None => {
            let cap = (0..c)
                .filter(|&k| unit_demand[k] > 0.0)
                .map(|k| supply[k] as f64 / unit_demand[k])
                .fold(f64::INFINITY, f64::min);
            (0.9 * cap).floor() as usize
        }
    };
    if size < 2 {
        return Err(Error::Infeasible(format!(
            "dataset too small for {n_clients} equal dominant-class shards"
        )));
    }

    let quotas: Vec<Vec<usize>> = group_of
        .iter()
        .map(|&g| {
            let dom = &sets[g];
            let mut q = vec![0usize; c];
            let n_dom = ((s * size as f64).round() as usize).min(size);
            for (j, &k) in dom.iter().enumerate() {
                q[k] += n_dom / dom.len() + usize::from(j < n_dom % dom.len());
            }
            for _ in n_dom..size {
                q[rng.below(c)] += 1;
            }
            q
        })
        .collect();
    for k in 0..c {
        let need: usize = quotas.iter().map(|q| q[k]).sum();
        if need > supply[k] {
            return Err(Error::Infeasible(format!(
                "class {k} needs {need} samples but only {} exist",
                supply[k]
            )));
        }
    }
    let mut pools = class_pools(base, rng);
    let allocations = quotas
        .iter()
        .map(|q| {
            (0..c)
                .flat_map(|k| {
                    let at = pools[k].len() - q[k];
                    pools[k].split_off(at)
                })
                .collect()
        })
        .collect();
    finish(base, allocations, Some(group_of), rng)
}

/// Draws a point from a symmetric Dirichlet via normalized Gamma variates.
fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// For each class, splits its rows across clients in proportions drawn from
/// `Dir(alpha * 1_N)`. The full allocation is redrawn while any client falls below
/// `min_samples`.
pub fn partition_dirichlet(
    base: &Dataset,
    spec: &PartitionSpec,
    rng: &mut Rng,
) -> Result<FederatedData> {
    let c = base.num_classes();
    spec.validate(c)?;
    let PartitionSetting::Dirichlet { alpha, min_samples } = spec.setting else {
        return Err(Error::InvalidArgument("expected a Dirichlet partition spec".into()));
    };
    let n = spec.num_clients;
    if base.len() < n * min_samples {
        return Err(Error::Infeasible(format!(
            "{} samples cannot give {n} clients {min_samples} each",
            base.len()
        )));
    }
    for attempt in 0..DIRICHLET_MAX_ATTEMPTS {
        let pools = class_pools(base, rng);
        let mut allocations: Vec<Vec<usize>> = vec![Vec::new(); n];
        for pool in &pools {
            let props = dirichlet(alpha, n, rng);
            let total = pool.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (m, p) in props.iter().enumerate() {
                cum += p;
                let end = if m + 1 == n {
                    total
                } else {
                    ((cum * total as f64).floor() as usize).clamp(start, total)
                };
                allocations[m].extend_from_slice(&pool[start..end]);
                start = end;
            }
        }
        if allocations.iter().all(|a| a.len() >= min_samples) {
            log::debug!("dirichlet allocation accepted on attempt {}", attempt + 1);
            return finish(base, allocations, None, rng);
        }
    }
    Err(Error::Infeasible(format!(
        "no Dirichlet(alpha={alpha}) allocation gave every client {min_samples} samples \
         in {DIRICHLET_MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_blobs;

    fn base(n: usize, c: usize) -> Dataset {
        synth_blobs(n, 2, c, 1.0, &mut Rng::new(99)).unwrap()
    }

    fn dir_spec(n: usize, alpha: f64) -> PartitionSpec {
        PartitionSpec {
            num_clients: n,
            setting: PartitionSetting::Dirichlet {
                alpha,
                min_samples: 20,
            },
            seed: 5,
        }
    }

    #[test]
    fn pathological_two_classes_each() {
        let spec = PartitionSpec {
            num_clients: 20,
            setting: PartitionSetting::Pathological {
                classes_per_client: 2,
                samples_per_class: None,
            },
            seed: 1,
        };
        let fd = partition(&base(4000, 10), &spec).unwrap();
        for hist in &fd.class_map {
            let nz: Vec<usize> = hist.iter().copied().filter(|&v| v > 0).collect();
            assert_eq!(nz.len(), 2);
            assert_eq!(nz[0], nz[1]);
        }
        assert!(fd.group_truth.is_none());
    }

    #[test]
    fn pathological_all_classes() {
        let spec = PartitionSpec {
            num_clients: 5,
            setting: PartitionSetting::Pathological {
                classes_per_client: 4,
                samples_per_class: None,
            },
            seed: 1,
        };
        let fd = partition(&base(400, 4), &spec).unwrap();
        assert!(fd.class_map.iter().all(|h| h.iter().all(|&v| v == 20)));
    }

    #[test]
    fn pathological_infeasible_request() {
        let spec = PartitionSpec {
            num_clients: 10,
            setting: PartitionSetting::Pathological {
                classes_per_client: 2,
                samples_per_class: Some(1000),
            },
            seed: 1,
        };
        assert!(matches!(
            partition(&base(200, 4), &spec),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn dominant_sets_match_reference_layout() {
        // 10 classes, 4 groups of 3 dominant classes.
        let sets = dominant_class_sets(4, 10, Some(3)).unwrap();
        assert_eq!(sets, vec![vec![0, 1, 2], vec![2, 3, 4], vec![5, 6, 7], vec![7, 8, 9]]);
        let disjoint = dominant_class_sets(4, 12, None).unwrap();
        assert_eq!(disjoint[3], vec![9, 10, 11]);
        assert!(dominant_class_sets(4, 4, Some(4)).is_err());
    }

    #[test]
    fn dominant_pure_groups() {
        let spec = PartitionSpec {
            num_clients: 8,
            setting: PartitionSetting::DominantClass {
                num_groups: 4,
                dominant_fraction: 1.0,
                dominant_per_group: None,
                samples_per_client: Some(50),
            },
            seed: 2,
        };
        let fd = partition(&base(2000, 8), &spec).unwrap();
        let truth = fd.group_truth.as_ref().unwrap();
        assert_eq!(truth, &vec![0, 0, 1, 1, 2, 2, 3, 3]);
        for (i, hist) in fd.class_map.iter().enumerate() {
            let g = truth[i];
            for (k, &v) in hist.iter().enumerate() {
                assert_eq!(v > 0, k / 2 == g, "client {i} class {k}");
            }
            assert_eq!(hist.iter().sum::<usize>(), 50);
        }
    }

    #[test]
    fn dominant_rejects_indivisible_clients() {
        let spec = PartitionSpec {
            num_clients: 10,
            setting: PartitionSetting::DominantClass {
                num_groups: 4,
                dominant_fraction: 0.8,
                dominant_per_group: Some(3),
                samples_per_client: None,
            },
            seed: 2,
        };
        assert!(matches!(spec.validate(10), Err(Error::Config { .. })));
    }

    #[test]
    fn dirichlet_conserves_class_supply() {
        let b = base(3000, 10);
        let fd = partition(&b, &dir_spec(20, 0.5)).unwrap();
        let supply = b.class_counts();
        for k in 0..10 {
            let got: usize = fd.class_map.iter().map(|h| h[k]).sum();
            assert_eq!(got, supply[k]);
        }
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        assert!(matches!(
            partition(&base(300, 3), &dir_spec(3, -1.0)),
            Err(Error::Config { ref key, .. }) if key == "alpha"
        ));
    }

    #[test]
    fn dirichlet_gives_up_when_impossible() {
        let b = base(100, 2);
        let spec = PartitionSpec {
            num_clients: 4,
            setting: PartitionSetting::Dirichlet {
                alpha: 0.01,
                min_samples: 25,
            },
            seed: 1,
        };
        assert!(matches!(partition(&b, &spec), Err(Error::Infeasible(_))));
    }
}
