//! Checks against independently computed reference values and desk-scale runs.

mod common;

use std::sync::Arc;

use feddwa::baselines::MethodConfig;
use feddwa::datagen::{partition, synth_blobs, synth_clusters, PartitionSetting, PartitionSpec};
use feddwa::experiment::run_experiment;
use feddwa::fedcore::{local_train, ClientState};
use feddwa::models::{accuracy, grad, init_params, loss, Dataset, ModelSpec};
use feddwa::numkit::{sq_dist, Layout, ParamVector, Rng};

use common::{best, clusters, config, config_in, mean, outcome};

// Error-free transformations for a double-double reference sum.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn dd_add(hi: f64, lo: f64, x: f64, xlo: f64) -> (f64, f64) {
    let (s, e) = two_sum(hi, x);
    let e = e + lo + xlo;
    two_sum(s, e)
}

/// Sum of squared differences carried in double-double precision.
fn reference_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (d, dlo) = two_sum(*x, -*y);
        let (p, plo) = two_prod(d, d);
        let cross = 2.0 * d * dlo + dlo * dlo;
        (hi, lo) = dd_add(hi, lo, p, plo + cross);
    }
    hi + lo
}

#[test]
fn sq_dist_matches_double_double_reference() {
    let mut rng = Rng::new(17);
    for _ in 0..20 {
        let a: Vec<f64> = (0..1000).map(|_| rng.uniform_range(-1e3, 1e3)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.uniform_range(-1e3, 1e3)).collect();
        let got = sq_dist(
            &ParamVector::from_flat(a.clone()).unwrap(),
            &ParamVector::from_flat(b.clone()).unwrap(),
        )
        .unwrap();
        let want = reference_sq_dist(&a, &b);
        assert!(((got - want) / want).abs() <= 1e-12, "{got} vs {want}");
    }
}

fn random_batch(n: usize, f: usize, c: usize, rng: &mut Rng) -> Dataset {
    let x = (0..n * f).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let y = (0..n).map(|_| rng.below(c)).collect();
    Dataset::new(x, y, f, c).unwrap()
}

/// Straightforward per-sample forward pass, read through named segments.
fn reference_loss(p: &ParamVector, data: &Dataset, spec: &ModelSpec) -> f64 {
    let (f, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let logits: Vec<f64> = if let Some(w) = p.segment("weight") {
            let b = p.segment("bias").unwrap();
            (0..c)
                .map(|k| b[k] + (0..f).map(|j| w[k * f + j] * x[j]).sum::<f64>())
                .collect()
        } else {
            let w1 = p.segment("hidden.weight").unwrap();
            let b1 = p.segment("hidden.bias").unwrap();
            let w2 = p.segment("out.weight").unwrap();
            let b2 = p.segment("out.bias").unwrap();
            let a: Vec<f64> = (0..h)
                .map(|m| (b1[m] + (0..f).map(|j| w1[m * f + j] * x[j]).sum::<f64>()).tanh())
                .collect();
            (0..c)
                .map(|k| b2[k] + (0..h).map(|m| w2[k * h + m] * a[m]).sum::<f64>())
                .collect()
        };
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        total += z.ln() - logits[data.label(i)];
    }
    total / data.len() as f64
}

#[test]
fn loss_matches_reference_forward_pass() {
    let mut rng = Rng::new(5);
    for spec in [ModelSpec::softmax(6, 4), ModelSpec::mlp(6, 5, 4)] {
        let spec = spec.with_init_scale(0.8);
        for _ in 0..10 {
            let p = init_params(&spec, &mut rng).unwrap();
            let data = random_batch(15, 6, 4, &mut rng);
            let got = loss(&p, &data, &spec).unwrap();
            let want = reference_loss(&p, &data, &spec);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn single_sample_softmax_gradient_closed_form() {
    let mut rng = Rng::new(8);
    let spec = ModelSpec::softmax(3, 4).with_init_scale(1.0);
    for _ in 0..10 {
        let p = init_params(&spec, &mut rng).unwrap();
        let data = random_batch(1, 3, 4, &mut rng);
        let g = grad(&p, &data, &spec).unwrap();
        let (w, b, x, y) = (p.segment("weight").unwrap(), p.segment("bias").unwrap(), data.row(0), data.label(0));
        let logits: Vec<f64> = (0..4).map(|k| b[k] + (0..3).map(|j| w[k * 3 + j] * x[j]).sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..4 {
            let delta = logits[k].exp() / z - if k == y { 1.0 } else { 0.0 };
            assert!((g.segment("bias").unwrap()[k] - delta).abs() < 1e-14);
            for j in 0..3 {
                assert!((g.segment("weight").unwrap()[k * 3 + j] - delta * x[j]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn known_separator_has_full_accuracy() {
    let mut rng = Rng::new(2);
    let (w, b0) = ([1.0, -2.0], 0.5);
    let mut x = Vec::new();
    let mut y = Vec::new();
    while y.len() < 200 {
        let p = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)];
        let s = w[0] * p[0] + w[1] * p[1] + b0;
        if s.abs() < 0.1 {
            continue;
        }
        x.extend(p);
        y.push(usize::from(s > 0.0));
    }
    let data = Dataset::new(x, y, 2, 2).unwrap();
    let spec = ModelSpec::softmax(2, 2);
    let layout = Arc::new(Layout::clone(&spec.layout()));
    // Class 1 scores w.x + b, class 0 scores zero.
    let params = ParamVector::new(vec![0.0, 0.0, w[0], w[1], 0.0, b0], layout).unwrap();
    assert_eq!(accuracy(&params, &data, &spec).unwrap(), 1.0);
}

fn pooled(shards: &[&Dataset]) -> Dataset {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for d in shards {
        x.extend_from_slice(d.features());
        y.extend_from_slice(d.labels());
    }
    Dataset::new(x, y, shards[0].dim(), shards[0].num_classes()).unwrap()
}

fn trainer(id: usize, train: Dataset, spec: &ModelSpec, lr: f64, batch: usize, epochs: usize) -> ClientState {
    ClientState {
        id,
        test: train.clone(),
        model: init_params(spec, &mut Rng::new(id as u64)).unwrap(),
        train,
        lr,
        batch_size: batch,
        local_epochs: epochs,
        last_trained: None,
    }
}

#[test]
fn noiseless_group_is_linearly_separable() {
    let fd = synth_clusters(2, 3, 5, 3, 60, 0.0, &mut Rng::new(21)).unwrap();
    let spec = ModelSpec::softmax(5, 3);
    for g in 0..2 {
        let shards: Vec<&Dataset> = (0..3).map(|c| &fd.shards[g * 3 + c].train).collect();
        let data = pooled(&shards);
        let c = trainer(g, data.clone(), &spec, 2.0, data.len(), 20_000);
        let w = local_train(&c, &c.model, &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(accuracy(&w, &data, &spec).unwrap(), 1.0, "group {g}");
    }
}

#[test]
fn local_training_fits_separable_client() {
    let fd = synth_clusters(1, 1, 5, 3, 100, 0.0, &mut Rng::new(4)).unwrap();
    let spec = ModelSpec::softmax(5, 3);
    let c = trainer(0, fd.shards[0].train.clone(), &spec, 0.5, 20, 50);
    let w = local_train(&c, &c.model, &spec, &mut Rng::new(3)).unwrap();
    let acc = accuracy(&w, &c.train, &spec).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn small_alpha_concentrates_clients_on_few_classes() {
    for seed in 0..20 {
        let base = synth_blobs(4000, 10, 10, 1.0, &mut Rng::new(seed)).unwrap();
        let spec = PartitionSpec {
            num_clients: 20,
            setting: PartitionSetting::Dirichlet {
                alpha: 0.07,
                min_samples: 20,
            },
            seed,
        };
        let fd = partition(&base, &spec).unwrap();
        let skewed = fd.class_map.iter().any(|h| {
            let mut h = h.clone();
            h.sort_unstable_by(|a, b| b.cmp(a));
            let total: usize = h.iter().sum();
            (h[0] + h[1]) as f64 > 0.9 * total as f64
        });
        assert!(skewed, "seed {seed}");
    }
}

#[test]
fn iid_converged_feddwa_close_to_fedavg() {
    for seed in [1, 2] {
        let text = |m: &str| {
            format!(
                "seed = {seed}\nrounds = 30\nclients = 20\n[method]\nname = \"{m}\"\n\
                 [training]\nlr = 1.0\n[data]\nsource = \"clusters\"\ngroups = 1\nsamples_per_client = 500\n"
            )
        };
        let avg = best(&outcome(&config(&text("fedavg"))));
        let dwa = best(&outcome(&config(&text("feddwa"))));
        assert!((avg - dwa).abs() <= 0.02, "seed {seed}: fedavg {avg}, feddwa {dwa}");
    }
}

fn ft_pair(groups: usize, seed: u64) -> (f64, f64) {
    let text = |m: &str| {
        format!(
            "seed = {seed}\nrounds = 20\nclients = 10\n[method]\nname = \"{m}\"\n\
             [training]\nlr = 0.3\n[data]\nsource = \"clusters\"\ngroups = {groups}\nsamples_per_client = 200\n"
        )
    };
    let f = |m: &str| {
        outcome(&config(&text(m)))
            .summary
            .final_mean_accuracy
            .unwrap()
    };
    (f("fedavg"), f("fedavg_ft"))
}

#[test]
fn fine_tuning_helps_on_clustered_clients() {
    for seed in 1..=5 {
        let (global, tuned) = ft_pair(2, seed);
        assert!(tuned > global, "seed {seed}: global {global}, tuned {tuned}");
    }
}

#[test]
fn fine_tuning_is_neutral_on_iid_clients() {
    let diffs: Vec<f64> = (1..=5)
        .map(|seed| {
            let (global, tuned) = ft_pair(1, seed);
            tuned - global
        })
        .collect();
    assert!(mean(&diffs).abs() <= 0.01, "paired differences {diffs:?}");
}

#[test]
fn pathological_split_favours_local_training() {
    let text = |m: &str| {
        format!(
            "rounds = 20\nclients = 20\n[method]\nname = \"{m}\"\n[training]\nlr = 0.3\n\
             [data]\nsource = \"blobs\"\nsamples = 4000\nseparation = 1.0\n\
             [partition]\nsetting = \"pathological\"\nclasses_per_client = 2\n"
        )
    };
    let local = best(&outcome(&config(&text("local"))));
    let avg = best(&outcome(&config(&text("fedavg"))));
    assert!(local >= 0.9, "local accuracy {local}");
    assert!(local > avg, "local {local} vs fedavg {avg}");
}

#[test]
fn exported_weights_concentrate_on_true_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_in(&clusters("feddwa", 1, 10), dir.path());
    cfg.export_weights = true;
    run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("weights_10.csv")).unwrap();
    let mut lines = text.lines();
    let ids: Vec<usize> = lines.next().unwrap().split(',').skip(1).map(|s| s.parse().unwrap()).collect();
    for line in lines {
        let mut cells = line.split(',');
        let i: usize = cells.next().unwrap().parse().unwrap();
        let inside: f64 = cells
            .zip(&ids)
            .filter(|(_, &j)| j / 5 == i / 5)
            .map(|(v, _)| v.parse::<f64>().unwrap())
            .sum();
        assert!(inside >= 0.8, "client {i}: {inside}");
    }
}

#[test]
fn adapt_steps_barely_move_seed_averaged_accuracy() {
    // Final mean accuracy per step count, averaged over three seeds.
    let accs: Vec<f64> = [1, 2, 5]
        .iter()
        .map(|&steps| {
            let per_seed: Vec<f64> = (1..=3)
                .map(|seed| {
                    let mut cfg = config(&clusters("feddwa", seed, 30));
                    if let MethodConfig::FedDwa { guidance, .. } = &mut cfg.method {
                        guidance.adapt_steps = steps;
                    }
                    outcome(&cfg).summary.final_mean_accuracy.unwrap()
                })
                .collect();
            mean(&per_seed)
        })
        .collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.02, "final accuracies {accs:?}");
}
