//! Run configuration: a TOML file plus command-line overrides, validated into a
//! [`RunConfig`].
//!
//! ```toml
//! seed = 1
//! rounds = 30
//! clients = 20
//!
//! [method]
//! name = "feddwa"
//! k = 5
//!
//! [data]
//! source = "blobs"
//!
//! [partition]
//! setting = "dirichlet"
//! alpha = 0.07
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{MethodConfig, Weighting, DEFAULT_K};
use crate::datagen::{load_csv, partition, synth_blobs, synth_clusters, CsvSchema, FederatedData};
use crate::datagen::{PartitionSetting, PartitionSpec};
use crate::dwa::{AdaptBatch, GuidanceConfig, GuidanceMode};
use crate::error::{Error, Result};
use crate::fedcore::EngineConfig;
use crate::models::{ModelKind, ModelSpec, DEFAULT_INIT_SCALE};
use crate::numkit::{Purpose, Rng};

pub const DEFAULT_ROUNDS: usize = 100;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 20;
pub const DEFAULT_LOCAL_EPOCHS: usize = 1;
pub const DEFAULT_FRACTION: f64 = 1.0;
pub const DEFAULT_CLIENTS: usize = 20;
pub const DEFAULT_DOMINANT_FRACTION: f64 = 0.8;
pub const DEFAULT_ALPHA: f64 = 0.07;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_OUT: &str = "runs/default";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub frac: Option<f64>,
    pub out: Option<PathBuf>,
    pub export_weights: Option<bool>,
    #[serde(default)]
    pub method: RawMethod,
    pub guidance: Option<RawGuidance>,
    #[serde(default)]
    pub training: RawTraining,
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub data: RawData,
    pub partition: Option<RawPartition>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMethod {
    pub name: Option<String>,
    pub k: Option<usize>,
    pub mu: Option<f64>,
    pub ft_epochs: Option<usize>,
    pub first_round_uniform: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGuidance {
    pub mode: Option<String>,
    pub adapt_steps: Option<usize>,
    pub adapt_batch: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTraining {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub local_epochs: Option<usize>,
    pub weighting: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub kind: Option<String>,
    pub hidden: Option<usize>,
    pub init_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    pub source: Option<String>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    // clusters
    pub groups: Option<usize>,
    pub samples_per_client: Option<usize>,
    pub noise: Option<f64>,
    // blobs
    pub samples: Option<usize>,
    pub separation: Option<f64>,
    // csv
    pub path: Option<PathBuf>,
    pub header: Option<bool>,
    pub scale: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPartition {
    pub setting: Option<String>,
    pub alpha: Option<f64>,
    pub min_samples: Option<usize>,
    pub classes_per_client: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub groups: Option<usize>,
    pub s: Option<f64>,
    pub dominant_per_group: Option<usize>,
    pub samples_per_client: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<String>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub frac: Option<f64>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub s: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub export_weights: bool,
    pub guidance: Option<String>,
    pub adapt_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Groups of clients sharing a labeling rule.
    Clusters {
        groups: usize,
        dim: usize,
        classes: usize,
        samples_per_client: usize,
        noise: f64,
    },
    /// Gaussian class blobs split across clients by a partitioner.
    Blobs {
        samples: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        partition: PartitionSetting,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        partition: PartitionSetting,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub hidden: usize,
    pub init_scale: f64,
}

/// A fully validated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub fraction: f64,
    pub out: PathBuf,
    pub export_weights: bool,
    pub method: MethodConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub weighting: Weighting,
    pub model: ModelChoice,
    pub data: DataSource,
}

impl RunConfig {
    /// Builds the federated dataset described by the config.
    pub fn build_data(&self) -> Result<FederatedData> {
        let mut rng = Rng::stream(self.data_seed, Purpose::Data, &[]);
        match &self.data {
            DataSource::Clusters {
                groups,
                dim,
                classes,
                samples_per_client,
                noise,
            } => synth_clusters(
                *groups,
                self.clients / groups,
                *dim,
                *classes,
                *samples_per_client,
                *noise,
                &mut rng,
            ),
            DataSource::Blobs {
                samples,
                dim,
                classes,
                separation,
                partition: setting,
            } => {
                let base = synth_blobs(*samples, *dim, *classes, *separation, &mut rng)?;
                partition(&base, &self.partition_spec(setting))
            }
            DataSource::Csv {
                path,
                schema,
                partition: setting,
            } => {
                let base = load_csv(path, schema)?;
                partition(&base, &self.partition_spec(setting))
            }
        }
    }

    fn partition_spec(&self, setting: &PartitionSetting) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.clients,
            setting: setting.clone(),
            seed: self.data_seed,
        }
    }

    pub fn model_spec(&self, data: &FederatedData) -> ModelSpec {
        let spec = match self.model.kind {
            ModelKind::Softmax => ModelSpec::softmax(data.dim(), data.num_classes()),
            ModelKind::Mlp => ModelSpec::mlp(data.dim(), self.model.hidden, data.num_classes()),
        };
        spec.with_init_scale(self.model.init_scale)
    }

    pub fn engine_config(&self, data: &FederatedData) -> EngineConfig {
        EngineConfig {
            spec: self.model_spec(data),
            method: self.method.clone(),
            rounds: self.rounds,
            fraction: self.fraction,
            lr: self.lr,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            seed: self.seed,
            weighting: self.weighting,
        }
    }
}

/// Parses TOML text. Errors name the offending key where it can be located.
pub fn parse_raw(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| {
        let key = offending_key(text, &e).unwrap_or_else(|| "<config>".to_string());
        Error::config(key, e.message().to_string())
    })
}

fn offending_key(text: &str, e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let name = rest.split('`').next()?;
        return Some(with_section(text, e.span().map(|s| s.start), name));
    }
    let start = e.span()?.start;
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let (name, _) = line.split_once('=')?;
    Some(with_section(text, Some(start), name.trim()))
}

fn with_section(text: &str, pos: Option<usize>, name: &str) -> String {
    let upto = pos.map_or(text, |p| &text[..p.min(text.len())]);
    let section = upto
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(['[', ']']).trim().to_string())
        });
    match section {
        Some(s) if !s.is_empty() && s != name => format!("{s}.{name}"),
        _ => name.to_string(),
    }
}

pub fn load_raw(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config("config", format!("cannot read {}: {e}", path.display()))
    })?;
    parse_raw(&text)
}

/// Applies overrides (flags win) and validates.
pub fn resolve(mut raw: RawConfig, ov: &Overrides) -> Result<RunConfig> {
    if let Some(m) = &ov.method {
        raw.method.name = Some(m.clone());
    }
    raw.clients = ov.clients.or(raw.clients);
    raw.rounds = ov.rounds.or(raw.rounds);
    raw.frac = ov.frac.or(raw.frac);
    raw.seed = ov.seed.or(raw.seed);
    raw.out = ov.out.clone().or(raw.out);
    if ov.export_weights {
        raw.export_weights = Some(true);
    }
    if let Some(k) = ov.k {
        raw.method.k = Some(k);
    }
    if ov.guidance.is_some() || ov.adapt_steps.is_some() {
        let g = raw.guidance.get_or_insert_with(RawGuidance::default);
        g.mode = ov.guidance.clone().or(g.mode.take());
        g.adapt_steps = ov.adapt_steps.or(g.adapt_steps);
    }
    if ov.alpha.is_some() || ov.s.is_some() {
        let p = raw.partition.get_or_insert_with(RawPartition::default);
        p.alpha = ov.alpha.or(p.alpha);
        p.s = ov.s.or(p.s);
        if p.setting.is_none() {
            p.setting = Some(if ov.alpha.is_some() { "dirichlet" } else { "dominant_class" }.into());
        }
        if raw.data.source.is_none() {
            raw.data.source = Some("blobs".into());
        }
    }
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<RunConfig> {
    let seed = raw.seed.unwrap_or(0);
    let rounds = raw.rounds.unwrap_or(DEFAULT_ROUNDS);
    let clients = raw.clients.unwrap_or(DEFAULT_CLIENTS);
    if clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    let fraction = raw.frac.unwrap_or(DEFAULT_FRACTION);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("frac", format!("must lie in (0, 1], got {fraction}")));
    }

    let t = &raw.training;
    let lr = t.lr.unwrap_or(DEFAULT_LR);
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("training.lr", format!("must be finite and >= 0, got {lr}")));
    }
    let batch_size = t.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    if batch_size == 0 {
        return Err(Error::config("training.batch_size", "must be at least 1"));
    }
    let local_epochs = t.local_epochs.unwrap_or(DEFAULT_LOCAL_EPOCHS);
    if local_epochs == 0 {
        return Err(Error::config("training.local_epochs", "must be at least 1"));
    }
    let weighting = match t.weighting.as_deref() {
        None | Some("uniform") => Weighting::Uniform,
        Some("data_size") => Weighting::DataSize,
        Some(other) => {
            return Err(Error::config(
                "training.weighting",
                format!("expected uniform or data_size, got `{other}`"),
            ))
        }
    };

    let method = method_config(&raw.method, raw.guidance.as_ref(), clients)?;
    let model = model_choice(&raw.model)?;
    let data = data_source(&raw.data, raw.partition.as_ref(), clients, batch_size)?;

    Ok(RunConfig {
        seed,
        data_seed: raw.data.seed.unwrap_or(seed),
        rounds,
        clients,
        fraction,
        out: raw.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        export_weights: raw.export_weights.unwrap_or(false),
        method,
        lr,
        batch_size,
        local_epochs,
        weighting,
        model,
        data,
    })
}

fn reject_if(present: bool, key: &str, method: &str) -> Result<()> {
    if present {
        return Err(Error::config(key, format!("does not apply to method `{method}`")));
    }
    Ok(())
}

fn method_config(m: &RawMethod, g: Option<&RawGuidance>, clients: usize) -> Result<MethodConfig> {
    let name = m.name.as_deref().unwrap_or("feddwa");
    if name != "feddwa" {
        reject_if(m.k.is_some(), "method.k", name)?;
        reject_if(m.first_round_uniform.is_some(), "method.first_round_uniform", name)?;
        reject_if(g.is_some(), "guidance", name)?;
    }
    if name != "fedprox" {
        reject_if(m.mu.is_some(), "method.mu", name)?;
    }
    if name != "fedavg_ft" {
        reject_if(m.ft_epochs.is_some(), "method.ft_epochs", name)?;
    }
    let method = match name {
        "fedavg" => MethodConfig::FedAvg,
        "local" => MethodConfig::Local,
        "fedprox" => MethodConfig::FedProx {
            mu: m.mu.unwrap_or(1.0),
        },
        "fedavg_ft" => MethodConfig::FedAvgFt {
            ft_epochs: m.ft_epochs.unwrap_or(1),
        },
        "feddwa" => {
            let k = m.k.unwrap_or(DEFAULT_K.min(clients));
            if k == 0 || k > clients {
                return Err(Error::config("method.k", format!("must lie in 1..={clients}, got {k}")));
            }
            MethodConfig::FedDwa {
                k,
                guidance: guidance_config(g)?,
                first_round_uniform: m.first_round_uniform.unwrap_or(true),
            }
        }
        other => {
            return Err(Error::config(
                "method.name",
                format!("expected one of fedavg, fedprox, local, fedavg_ft, feddwa, got `{other}`"),
            ))
        }
    };
    method.validate()?;
    Ok(method)
}

fn guidance_config(g: Option<&RawGuidance>) -> Result<GuidanceConfig> {
    let mut cfg = GuidanceConfig::default();
    let Some(g) = g else { return Ok(cfg) };
    cfg.mode = match g.mode.as_deref() {
        None | Some("one_step_ahead" | "onestep") => GuidanceMode::OneStepAhead,
        Some("last_iteration" | "last") => GuidanceMode::LastIteration,
        Some("current") => GuidanceMode::Current,
        Some(other) => {
            return Err(Error::config(
                "guidance.mode",
                format!("expected one_step_ahead, last_iteration or current, got `{other}`"),
            ))
        }
    };
    cfg.adapt_batch = match g.adapt_batch.as_deref() {
        None | Some("full") => AdaptBatch::Full,
        Some("minibatch") => AdaptBatch::Minibatch,
        Some(other) => {
            return Err(Error::config(
                "guidance.adapt_batch",
                format!("expected full or minibatch, got `{other}`"),
            ))
        }
    };
    if let Some(steps) = g.adapt_steps {
        cfg.adapt_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_choice(m: &RawModel) -> Result<ModelChoice> {
    let kind = match m.kind.as_deref() {
        None | Some("softmax") => ModelKind::Softmax,
        Some("mlp") => ModelKind::Mlp,
        Some(other) => {
            return Err(Error::config("model.kind", format!("expected softmax or mlp, got `{other}`")))
        }
    };
    if kind == ModelKind::Softmax && m.hidden.is_some() {
        return Err(Error::config("model.hidden", "only applies to the mlp model"));
    }
    let hidden = m.hidden.unwrap_or(DEFAULT_HIDDEN);
    if hidden == 0 {
        return Err(Error::config("model.hidden", "must be at least 1"));
    }
    let init_scale = m.init_scale.unwrap_or(DEFAULT_INIT_SCALE);
    if !(init_scale >= 0.0 && init_scale.is_finite()) {
        return Err(Error::config("model.init_scale", format!("must be finite and >= 0, got {init_scale}")));
    }
    Ok(ModelChoice {
        kind,
        hidden,
        init_scale,
    })
}

fn positive(v: Option<usize>, default: usize, key: &str) -> Result<usize> {
    let v = v.unwrap_or(default);
    if v == 0 {
        return Err(Error::config(key, "must be at least 1"));
    }
    Ok(v)
}

fn data_source(
    d: &RawData,
    p: Option<&RawPartition>,
    clients: usize,
    batch_size: usize,
) -> Result<DataSource> {
    let source = d.source.as_deref().unwrap_or("clusters");
    let only = |present: bool, key: &str, which: &str| -> Result<()> {
        if present {
            return Err(Error::config(key, format!("only applies to data source `{which}`")));
        }
        Ok(())
    };
    if source != "clusters" {
        only(d.groups.is_some(), "data.groups", "clusters")?;
        only(d.samples_per_client.is_some(), "data.samples_per_client", "clusters")?;
        only(d.noise.is_some(), "data.noise", "clusters")?;
    }
    if source != "blobs" {
        only(d.samples.is_some(), "data.samples", "blobs")?;
        only(d.separation.is_some(), "data.separation", "blobs")?;
    }
    if source != "csv" {
        only(d.path.is_some(), "data.path", "csv")?;
        only(d.header.is_some(), "data.header", "csv")?;
        only(d.scale.is_some(), "data.scale", "csv")?;
    } else {
        only(d.dim.is_some(), "data.dim", "clusters or blobs")?;
    }
    match source {
        "clusters" => {
            if p.is_some() {
                return Err(Error::config(
                    "partition",
                    "synthetic clusters are generated per client and take no partition",
                ));
            }
            let groups = positive(d.groups, 4, "data.groups")?;
            if !clients.is_multiple_of(groups) {
                return Err(Error::config(
                    "data.groups",
                    format!("{clients} clients do not divide into {groups} groups"),
                ));
            }
            let noise = d.noise.unwrap_or(0.0);
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::config("data.noise", format!("must lie in [0, 1], got {noise}")));
            }
            Ok(DataSource::Clusters {
                groups,
                dim: positive(d.dim, 10, "data.dim")?,
                classes: positive(d.classes, 5, "data.classes")?,
                samples_per_client: positive(d.samples_per_client, 100, "data.samples_per_client")?,
                noise,
            })
        }
        "blobs" => {
            let classes = positive(d.classes, 10, "data.classes")?;
            let separation = d.separation.unwrap_or(3.0);
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::config("data.separation", format!("must be finite and >= 0, got {separation}")));
            }
            Ok(DataSource::Blobs {
                samples: positive(d.samples, 4000, "data.samples")?,
                dim: positive(d.dim, 10, "data.dim")?,
                classes,
                separation,
                partition: partition_setting(p, clients, Some(classes), batch_size)?,
            })
        }
        "csv" => {
            let path = d
                .path
                .clone()
                .ok_or_else(|| Error::config("data.path", "required for the csv source"))?;
            if !path.is_file() {
                return Err(Error::config("data.path", format!("{} does not exist", path.display())));
            }
            let schema = CsvSchema {
                has_header: d.header.unwrap_or(false),
                num_classes: d.classes,
                scale: d.scale.unwrap_or(false),
            };
            Ok(DataSource::Csv {
                path,
                schema,
                partition: partition_setting(p, clients, d.classes, batch_size)?,
            })
        }
        other => Err(Error::config(
            "data.source",
            format!("expected clusters, blobs or csv, got `{other}`"),
        )),
    }
}

fn partition_setting(
    p: Option<&RawPartition>,
    clients: usize,
    classes: Option<usize>,
    batch_size: usize,
) -> Result<PartitionSetting> {
    let empty = RawPartition::default();
    let p = p.unwrap_or(&empty);
    let setting = p.setting.as_deref().unwrap_or("dirichlet");
    let only = |present: bool, key: &str, which: &str| -> Result<()> {
        if present {
            return Err(Error::config(key, format!("only applies to the `{which}` setting")));
        }
        Ok(())
    };
    if setting != "dirichlet" {
        only(p.alpha.is_some(), "alpha", "dirichlet")?;
        only(p.min_samples.is_some(), "partition.min_samples", "dirichlet")?;
    }
    if setting != "pathological" {
        only(p.classes_per_client.is_some(), "partition.classes_per_client", "pathological")?;
        only(p.samples_per_class.is_some(), "partition.samples_per_class", "pathological")?;
    }
    if setting != "dominant_class" {
        only(p.groups.is_some(), "partition.groups", "dominant_class")?;
        only(p.s.is_some(), "s", "dominant_class")?;
        only(p.dominant_per_group.is_some(), "partition.dominant_per_group", "dominant_class")?;
        only(p.samples_per_client.is_some(), "partition.samples_per_client", "dominant_class")?;
    }
    let setting = match setting {
        "dirichlet" => PartitionSetting::Dirichlet {
            alpha: p.alpha.unwrap_or(DEFAULT_ALPHA),
            min_samples: p.min_samples.unwrap_or(batch_size.max(2)),
        },
        "pathological" => PartitionSetting::Pathological {
            classes_per_client: p.classes_per_client.unwrap_or(2),
            samples_per_class: p.samples_per_class,
        },
        "dominant_class" => PartitionSetting::DominantClass {
            num_groups: p.groups.unwrap_or(4),
            dominant_fraction: p.s.unwrap_or(DEFAULT_DOMINANT_FRACTION),
            dominant_per_group: p.dominant_per_group,
            samples_per_client: p.samples_per_client,
        },
        other => {
            return Err(Error::config(
                "partition.setting",
                format!("expected dirichlet, pathological or dominant_class, got `{other}`"),
            ))
        }
    };
    if let Some(c) = classes {
        PartitionSpec {
            num_clients: clients,
            setting: setting.clone(),
            seed: 0,
        }
        .validate(c)?;
    }
    Ok(setting)
}
