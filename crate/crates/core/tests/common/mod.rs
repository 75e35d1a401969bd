#![allow(dead_code)]

use std::path::Path;

use feddwa::config::{parse_raw, resolve, Overrides, RunConfig};
use feddwa::fedcore::{run, RunOutcome};

/// Resolves TOML text with no command-line overrides.
pub fn config(text: &str) -> RunConfig {
    resolve(parse_raw(text).expect("test config parses"), &Overrides::default())
        .expect("test config validates")
}

pub fn config_in(text: &str, out: &Path) -> RunConfig {
    let mut c = config(text);
    c.out = out.to_path_buf();
    c
}

/// Runs the engine without writing any files.
pub fn outcome(cfg: &RunConfig) -> RunOutcome {
    let data = cfg.build_data().expect("data builds");
    run(&cfg.engine_config(&data), &data).expect("run succeeds")
}

/// 4 groups x 5 clients of linearly labeled data; the desk-scale grouping task.
pub fn clusters(method: &str, seed: u64, rounds: usize) -> String {
    format!(
        "seed = {seed}\nrounds = {rounds}\nclients = 20\n\
         [method]\nname = \"{method}\"\n\
         [training]\nlr = 1.0\nbatch_size = 20\n\
         [data]\nsource = \"clusters\"\ngroups = 4\ndim = 10\nclasses = 5\nsamples_per_client = 100\nnoise = 0.05\n"
    )
}

pub fn best(o: &RunOutcome) -> f64 {
    o.summary.best_mean_accuracy.expect("at least one round")
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
