//! Experiment configuration, end-to-end runs, result files and ablation
//! sweeps.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_synthetic, load_idx, partition_exdir, Dataset, PartitionSpec};
use crate::distill::Metric;
use crate::engine::{
    run_round, FederationState, Granularity, Mode, Monitor, RoundRecord, TrainConfig,
};
use crate::error::{arg, positive, Error, Result};
use crate::model::{init_params, ModelParams};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Separate IDX test files; when absent the test set is split off.
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_per_class: 300,
            classes: 10,
            dim: 10,
            spread: 2.5,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(rename = "N")]
    pub clients: usize,
    #[serde(rename = "C")]
    pub classes_per_client: usize,
    pub alpha: f64,
    /// Derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            classes_per_client: 2,
            alpha: 0.5,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Held-out global test set.
    #[default]
    Test,
    /// Union of all client training data.
    Train,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub granularity: Granularity,
    pub set: EvalSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub jsonl: bool,
    pub csv: bool,
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            jsonl: true,
            csv: true,
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Master seeds each sweep cell is run with.
    pub seeds: Vec<u64>,
    /// Teacher counts for the `teachers` axis.
    pub k_values: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            k_values: vec![1, 3, 5],
        }
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    pub ablate: AblateConfig,
}

fn config_err<T>(path: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        path: path.to_string(),
        msg: msg.into(),
    })
}

impl ExperimentConfig {
    /// Parses JSON (`.json`) or TOML (anything else).
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let value: Value = if json {
            serde_json::from_str(text).map_err(|e| Error::Config {
                path: "<root>".into(),
                msg: e.to_string(),
            })?
        } else {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
                path: "<root>".into(),
                msg: e.to_string(),
            })?;
            serde_json::to_value(table).map_err(|e| Error::Config {
                path: "<root>".into(),
                msg: e.to_string(),
            })?
        };
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config {
            path: "<root>".into(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::from_str_with_format(&text, json)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Sets the field at a dotted path (`train.K`, `train.kd.metric`). The
    /// raw value is read as JSON when possible and as a string otherwise.
    pub fn apply_override(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = self.to_value();
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => match map.get_mut(key) {
                    Some(v) => v,
                    None => return config_err(path, "no such field"),
                },
                _ => return config_err(path, "no such field"),
            };
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    /// Parses `path=value`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        match assignment.split_once('=') {
            Some((p, v)) => self.apply_override(p.trim(), v.trim()),
            None => config_err(assignment, "override must look like `path=value`"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                if d.n_per_class == 0 {
                    return config_err("dataset.n_per_class", "must be at least 1");
                }
                if d.classes < 2 {
                    return config_err("dataset.classes", "must be at least 2");
                }
                if d.dim < 2 {
                    return config_err("dataset.dim", "must be at least 2");
                }
                if !positive(d.spread) {
                    return config_err("dataset.spread", "must be positive");
                }
            }
            DataSource::Idx => {
                if d.images.is_none() {
                    return config_err("dataset.images", "required for idx source");
                }
                if d.labels.is_none() {
                    return config_err("dataset.labels", "required for idx source");
                }
                if d.test_images.is_some() != d.test_labels.is_some() {
                    return config_err("dataset.test_labels", "test images and labels go together");
                }
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return config_err("dataset.test_fraction", "must lie in [0, 1)");
        }
        let p = &self.partition;
        if p.clients == 0 {
            return config_err("partition.N", "must be at least 1");
        }
        if p.classes_per_client == 0 {
            return config_err("partition.C", "must be at least 1");
        }
        if d.source == DataSource::Synthetic {
            if p.classes_per_client > d.classes {
                return config_err("partition.C", format!("exceeds the {} classes", d.classes));
            }
            if p.clients * p.classes_per_client < d.classes {
                return config_err("partition.C", "N·C cannot cover every class");
            }
        }
        if !positive(p.alpha) {
            return config_err("partition.alpha", "must be positive");
        }
        if self.model.hidden.contains(&0) {
            return config_err("model.hidden", "layer widths must be positive");
        }
        self.train.validate("train.")?;
        if self.train.clients_per_round > p.clients {
            return config_err(
                "train.M",
                format!(
                    "cannot sample {} of N = {} clients",
                    self.train.clients_per_round, p.clients
                ),
            );
        }
        if self.ablate.seeds.is_empty() {
            return config_err("ablate.seeds", "at least one seed");
        }
        if self
            .ablate
            .k_values
            .iter()
            .any(|&k| k == 0 || k > self.train.clients_per_round)
        {
            return config_err("ablate.k_values", "each K must lie in [1, M]");
        }
        Ok(())
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition
            .seed
            .unwrap_or_else(|| derive_seed(self.master_seed, Stream::Partition, &[]))
    }

    /// Copy with every default written out, e.g. for `config.resolved.json`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.partition.seed = Some(self.partition_seed());
        c
    }
}

/// Train/test data and the client partition of an experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<Dataset>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let split_seed = derive_seed(cfg.master_seed, Stream::Split, &[]);
    let (train, test) = match d.source {
        DataSource::Synthetic => {
            let data_seed = derive_seed(cfg.master_seed, Stream::Data, &[]);
            let full = generate_synthetic(d.n_per_class, d.classes, d.dim, d.spread, data_seed)?;
            full.split(d.test_fraction, split_seed)?
        }
        DataSource::Idx => {
            let images = d.images.as_ref().ok_or_else(|| Error::Config {
                path: "dataset.images".into(),
                msg: "required".into(),
            })?;
            let labels = d.labels.as_ref().ok_or_else(|| Error::Config {
                path: "dataset.labels".into(),
                msg: "required".into(),
            })?;
            let full = load_idx(images, labels)?;
            match (&d.test_images, &d.test_labels) {
                (Some(ti), Some(tl)) => (full, load_idx(ti, tl)?),
                _ => full.split(d.test_fraction, split_seed)?,
            }
        }
    };
    if test.is_empty() && cfg.eval.set == EvalSet::Test {
        return config_err("dataset.test_fraction", "test set is empty");
    }
    let spec = PartitionSpec {
        clients: cfg.partition.clients,
        classes_per_client: cfg.partition.classes_per_client,
        alpha: cfg.partition.alpha,
        seed: cfg.partition_seed(),
    };
    let clients = partition_exdir(&train, &spec)?;
    Ok(PreparedData {
        train,
        test,
        clients,
    })
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub master_seed: u64,
    pub rounds: usize,
    pub final_top1: f64,
    pub best_top1: f64,
    pub forgetting: Option<f64>,
    pub mean_consistency: Option<f64>,
}

impl Summary {
    pub const CSV_HEADER: &'static str =
        "mode,master_seed,rounds,final_top1,best_top1,forgetting,mean_consistency";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.mode,
            self.master_seed,
            self.rounds,
            self.final_top1,
            self.best_top1,
            opt(self.forgetting),
            opt(self.mean_consistency)
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub summary: Summary,
}

/// Builds the initial federation state for a config.
pub fn initial_state(cfg: &ExperimentConfig, data: &PreparedData) -> Result<FederationState> {
    let mut dims = vec![data.train.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(data.train.num_classes());
    let model = init_params(&dims, derive_seed(cfg.master_seed, Stream::Init, &[]))?;
    FederationState::new(model, data.clients.clone(), cfg.master_seed)
}

/// Runs every round of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut state = initial_state(cfg, &data)?;
    let eval_set = match cfg.eval.set {
        EvalSet::Test => data.test.clone(),
        EvalSet::Train => data.train.clone(),
    };
    let mut monitor = Monitor::new(Some(eval_set), cfg.eval.granularity);
    let mut records = Vec::with_capacity(cfg.train.rounds);
    for _ in 0..cfg.train.rounds {
        let rec = run_round(&mut state, &cfg.train, &mut monitor)?;
        log::debug!("round {} top1 {:?}", rec.round, rec.top1);
        records.push(rec);
    }
    let top1s: Vec<f64> = records.iter().filter_map(|r| r.top1).collect();
    let consistencies: Vec<f64> = records.iter().filter_map(|r| r.consistency).collect();
    let summary = Summary {
        mode: cfg.train.mode,
        master_seed: cfg.master_seed,
        rounds: records.len(),
        final_top1: top1s.last().copied().unwrap_or(0.0),
        best_top1: top1s.iter().copied().fold(0.0, f64::max),
        forgetting: records.last().and_then(|r| r.forgetting),
        mean_consistency: (!consistencies.is_empty())
            .then(|| consistencies.iter().sum::<f64>() / consistencies.len() as f64),
    };
    Ok(ExperimentResult {
        records,
        final_model: state.global_model,
        summary,
    })
}

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Writes the configured result files into `cfg.output.dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let resolved = serde_json::to_string_pretty(&cfg.resolved()).expect("config serializes");
    fs::write(dir.join(RESOLVED_CONFIG_FILE), resolved + "\n")?;
    if cfg.output.jsonl {
        let mut w = BufWriter::new(fs::File::create(dir.join(ROUNDS_FILE))?);
        for rec in &result.records {
            serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if cfg.output.csv {
        fs::write(
            dir.join(SUMMARY_FILE),
            format!("{}\n{}\n", Summary::CSV_HEADER, result.summary.csv_row()),
        )?;
    }
    if cfg.output.checkpoint {
        result.final_model.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(())
}

/// Sweep dimension for [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// `{g off, on} × {h off, on}`.
    Weights,
    /// L1, L2, JS, KL.
    Metric,
    /// Each K in `ablate.k_values`, greedy vs random teachers.
    Teachers,
    /// sfedkd, fedseq, fedavg.
    Mode,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Axis::Weights),
            "metric" => Ok(Axis::Metric),
            "teachers" => Ok(Axis::Teachers),
            "mode" => Ok(Axis::Mode),
            other => arg(format!("unknown axis `{other}`")),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Weights => "weights",
            Axis::Metric => "metric",
            Axis::Teachers => "teachers",
            Axis::Mode => "mode",
        })
    }
}

/// One sweep cell: a label and the config it runs.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cells of a sweep over `axis`, in table order.
pub fn sweep_cells(base: &ExperimentConfig, axis: Axis) -> Vec<Cell> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { label, config }
    };
    match axis {
        Axis::Weights => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(g, h)| {
                with(format!("g={} h={}", on_off(g), on_off(h)), &|c| {
                    c.train.mode = Mode::Sfedkd;
                    c.train.kd.use_g = g;
                    c.train.kd.use_h = h;
                })
            })
            .collect(),
        Axis::Metric => [Metric::L1, Metric::L2, Metric::JS, Metric::KL]
            .into_iter()
            .map(|m| {
                with(m.to_string(), &|c| {
                    c.train.mode = Mode::Sfedkd;
                    c.train.kd.metric = m;
                })
            })
            .collect(),
        Axis::Teachers => base
            .ablate
            .k_values
            .iter()
            .flat_map(|&k| {
                [Mode::Sfedkd, Mode::SfedkdRandomTeachers].map(|mode| {
                    let kind = if mode == Mode::Sfedkd {
                        "greedy"
                    } else {
                        "random"
                    };
                    with(format!("K={k} {kind}"), &|c| {
                        c.train.mode = mode;
                        c.train.teachers = k;
                    })
                })
            })
            .collect(),
        Axis::Mode => [Mode::Sfedkd, Mode::Fedseq, Mode::Fedavg]
            .into_iter()
            .map(|mode| with(mode.to_string(), &|c| c.train.mode = mode))
            .collect(),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Aggregated outcome of one sweep cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub cell: String,
    pub seeds: usize,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_forgetting: f64,
    pub std_forgetting: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "axis,cell,seeds,mean_top1,std_top1,mean_forgetting,std_forgetting";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.axis,
            self.cell,
            self.seeds,
            self.mean_top1,
            self.std_top1,
            self.mean_forgetting,
            self.std_forgetting
        )
    }
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `config` once per seed; cells are independent and run in parallel.
pub fn run_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<Summary>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.master_seed = seed;
            run_experiment(&c).map(|r| r.summary)
        })
        .collect()
}

/// Runs the sweep for `axis` over `base.ablate.seeds`.
pub fn ablate(base: &ExperimentConfig, axis: Axis) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let cells = sweep_cells(base, axis);
    for cell in &cells {
        cell.config.validate()?;
    }
    cells
        .par_iter()
        .map(|cell| {
            let runs = run_seeds(&cell.config, &base.ablate.seeds)?;
            let top1: Vec<f64> = runs.iter().map(|s| s.final_top1).collect();
            let fm: Vec<f64> = runs.iter().map(|s| s.forgetting.unwrap_or(0.0)).collect();
            let (mean_top1, std_top1) = mean_std(&top1);
            let (mean_forgetting, std_forgetting) = mean_std(&fm);
            Ok(AblationRow {
                axis,
                cell: cell.label.clone(),
                seeds: runs.len(),
                mean_top1,
                std_top1,
                mean_forgetting,
                std_forgetting,
            })
        })
        .collect()
}
