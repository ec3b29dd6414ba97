//! Experiment specs, orchestration and result files.
//!
//! A spec is a TOML file with four sections:
//!
//! ```toml
//! [stream]
//! kind = "gaussian"   # gaussian | idx | rotated_idx | csv
//! classes = 10
//! tasks = 5
//!
//! [aux]
//! kind = "gaussian"   # none | gaussian | idx | csv
//!
//! [train]
//! epochs_per_task = 5
//!
//! [experiment]
//! methods = ["ft", "pfcl"]
//! seeds = [0, 1, 2]
//! output = "runs/demo"
//! ```
//!
//! Relative paths resolve against the directory holding the spec.
//!
//! `run_experiment` writes, under the output directory:
//!
//! * `matrices/{method}_s{seed}.csv`: the accuracy matrix under the stream's
//!   native protocol (class-IL or domain-IL)
//! * `matrices_task_il/{method}_s{seed}.csv`: task-IL matrix, class-IL streams only
//! * `summaries/{method}_s{seed}.json`
//! * `manifests/{method}_s{seed}.json`: config, seed and data digests
//! * `progress/{method}_s{seed}.csv`: per-epoch loss and learning rate
//! * `summary.csv`: mean and population standard deviation across seeds
//! * `curves.csv`: running accuracy after each task, per method

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{avg_accuracy, forgetting, running_accuracy, EvalMatrix};
use crate::io::{fmt_real, write_atomic};
use crate::linalg::Rng;
use crate::losses::Hyperparams;
use crate::trainer::{run_continual, EpochRecord, Method, RunOutput, TrainConfig};
use crate::tasks::{
    load_csv_dataset, load_csv_pool, load_idx, make_gaussian_dataset, make_gaussian_pool,
    rotated_stream, split_class_stream, AuxiliaryPool, Dataset, TaskStream,
};

/// Environment variable bounding the number of concurrent runs.
pub const WORKERS_ENV: &str = "PFCL_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSpec {
    Gaussian {
        classes: usize,
        tasks: usize,
        dim: usize,
        separation: f64,
        per_class: usize,
        seed: u64,
    },
    /// Class-incremental split of an IDX digit file.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        tasks: usize,
        classes: Option<Vec<usize>>,
    },
    /// Domain-incremental stream of rotated IDX images.
    RotatedIdx {
        images: PathBuf,
        labels: PathBuf,
        tasks: usize,
        classes: Option<Vec<usize>>,
        angle_seed: u64,
    },
    /// Class-incremental split of a labeled CSV.
    Csv {
        path: PathBuf,
        tasks: usize,
        class_count: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxSpec {
    None,
    Gaussian {
        size: usize,
        clusters: usize,
        separation: f64,
        seed: u64,
    },
    /// Images from an IDX file with labels discarded, optionally keeping
    /// only some classes.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: Option<Vec<usize>>,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub stream: StreamSpec,
    pub aux: AuxSpec,
    /// Shared training settings; `method` and `seed` are set per run.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

const SECTIONS: [&str; 4] = ["stream", "aux", "train", "experiment"];

/// A parsed spec section that tracks which keys were read.
struct Section<'a> {
    name: &'static str,
    table: toml::Table,
    used: BTreeSet<String>,
    src: &'a str,
}

fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = "";
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl<'a> Section<'a> {
    fn new(name: &'static str, table: toml::Table, src: &'a str) -> Self {
        Self {
            name,
            table,
            used: BTreeSet::new(),
            src,
        }
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            key: Some(format!("{}.{key}", self.name)),
            line: key_line(self.src, self.name, key),
            msg: msg.into(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<toml::Value> {
        self.used.insert(key.to_string());
        self.table.get(key).cloned()
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if v >= 0 => Ok(Some(v as u64)),
            Some(v) => Err(self.err(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.opt_u64(key)?.map(|v| v as usize))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    fn need_usize(&mut self, key: &str) -> Result<usize> {
        self.opt_usize(key)?
            .ok_or_else(|| self.err(key, "required key is missing"))
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(v)),
            Some(toml::Value::Integer(v)) => Ok(Some(v as f64)),
            Some(v) => Err(self.err(key, format!("expected a number, got {v}"))),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(b),
            Some(v) => Err(self.err(key, format!("expected true or false, got {v}"))),
        }
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(self.err(key, format!("expected a string, got {v}"))),
        }
    }

    fn need_str(&mut self, key: &str) -> Result<String> {
        self.opt_str(key)?
            .ok_or_else(|| self.err(key, "required key is missing"))
    }

    fn opt_list_u64(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    toml::Value::Integer(i) if i >= 0 => Ok(i as u64),
                    other => Err(self.err(
                        key,
                        format!("expected non-negative integers, found {other}"),
                    )),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(self.err(key, format!("expected a list, got {v}"))),
        }
    }

    fn opt_list_usize(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        Ok(self
            .opt_list_u64(key)?
            .map(|v| v.into_iter().map(|x| x as usize).collect()))
    }

    fn opt_list_str(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s),
                    other => Err(self.err(key, format!("expected strings, found {other}"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(self.err(key, format!("expected a list, got {v}"))),
        }
    }

    /// Fails on any key that was never read.
    fn finish(self) -> Result<()> {
        if let Some(k) = self.table.keys().find(|k| !self.used.contains(*k)) {
            return Err(self.err(k, format!("unknown key `{k}` in [{}]", self.name)));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a `key=value` override. The value is read as TOML, falling back to
/// a bare string.
fn parse_override(assign: &str) -> Result<(String, String, toml::Value)> {
    let (path, value) = assign
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assign}` is not key=value")))?;
    let (section, key) = path.trim().split_once('.').ok_or_else(|| {
        Error::config(format!("override key `{path}` must be section.key"))
    })?;
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((section.to_string(), key.to_string(), parsed))
}

/// Reads and validates a spec file.
pub fn parse_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    parse_spec_with(path, &[])
}

/// Like [`parse_spec`], applying `section.key=value` overrides first.
pub fn parse_spec_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::config(format!("spec file {} not found", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_spec_str(&src, base, overrides)
}

/// Parses spec text; relative paths resolve against `base`.
pub fn parse_spec_str(src: &str, base: &Path, overrides: &[String]) -> Result<ExperimentSpec> {
    let mut doc: toml::Table = toml::from_str(src).map_err(|e| {
        let line = e
            .span()
            .map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
        Error::Config {
            key: None,
            line,
            msg: e.message().to_string(),
        }
    })?;
    for assign in overrides {
        let (section, key, value) = parse_override(assign)?;
        match doc
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => {
                t.insert(key, value);
            }
            _ => return Err(Error::config_key(section, "not a section")),
        }
    }
    if let Some(k) = doc.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(Error::Config {
            key: Some(k.clone()),
            line: src
                .lines()
                .position(|l| l.trim() == format!("[{k}]") || l.trim_start().starts_with(&format!("{k} ")))
                .map(|i| i + 1),
            msg: format!("unknown section `{k}`; expected one of {}", SECTIONS.join(", ")),
        });
    }
    let mut section = |name: &'static str| -> Result<Section<'_>> {
        match doc.remove(name) {
            None => Ok(Section::new(name, toml::Table::new(), src)),
            Some(toml::Value::Table(t)) => Ok(Section::new(name, t, src)),
            Some(_) => Err(Error::config_key(name, "expected a section")),
        }
    };
    let mut stream_sec = section("stream")?;
    let mut aux_sec = section("aux")?;
    let mut train_sec = section("train")?;
    let mut exp_sec = section("experiment")?;

    if stream_sec.table.is_empty() {
        return Err(Error::config_key("stream", "missing [stream] section"));
    }
    let stream = parse_stream(&mut stream_sec, base)?;
    stream_sec.finish()?;
    let aux = parse_aux(&mut aux_sec, base)?;
    aux_sec.finish()?;
    let train = parse_train(&mut train_sec)?;
    train_sec.finish()?;

    let methods = match exp_sec.opt_list_str("methods")? {
        Some(names) => names
            .iter()
            .map(|n| {
                n.parse::<Method>().map_err(|e| match e {
                    Error::Config { msg, .. } => exp_sec.err("methods", msg),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![Method::Pfcl],
    };
    if methods.is_empty() {
        return Err(exp_sec.err("methods", "at least one method is required"));
    }
    let seeds = exp_sec.opt_list_u64("seeds")?.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(exp_sec.err("seeds", "at least one seed is required"));
    }
    let output = resolve(
        base,
        &exp_sec.opt_str("output")?.unwrap_or_else(|| "runs".to_string()),
    );
    let spec = ExperimentSpec {
        stream,
        aux,
        train,
        methods,
        seeds,
        output,
    };
    // Method-specific constraints are checked against the shared settings.
    for &m in &spec.methods {
        spec.train.with_method(m).validate().map_err(|e| match e {
            Error::Config { key: Some(k), msg, .. } => {
                let (sec, key) = match k.as_str() {
                    "alpha" | "tau" => ("train", k.as_str()),
                    "methods" => ("experiment", "methods"),
                    other => ("train", other),
                };
                Error::Config {
                    key: Some(format!("{sec}.{key}")),
                    line: key_line(src, sec, key),
                    msg,
                }
            }
            other => other,
        })?;
        if m == Method::Pfcl && spec.aux == AuxSpec::None {
            return Err(exp_sec.err("methods", "method pfcl needs an [aux] pool"));
        }
    }
    exp_sec.finish()?;
    check_files(&spec)?;
    Ok(spec)
}

fn parse_stream(s: &mut Section<'_>, base: &Path) -> Result<StreamSpec> {
    let kind = s.need_str("kind")?;
    let stream = match kind.as_str() {
        "gaussian" => StreamSpec::Gaussian {
            classes: s.usize_or("classes", 10)?,
            tasks: s.usize_or("tasks", 5)?,
            dim: s.usize_or("dim", 20)?,
            separation: s.f64_or("separation", 4.0)?,
            per_class: s.usize_or("per_class", 500)?,
            seed: s.opt_u64("seed")?.unwrap_or(0),
        },
        "idx" => StreamSpec::Idx {
            images: resolve(base, &s.need_str("images")?),
            labels: resolve(base, &s.need_str("labels")?),
            tasks: s.need_usize("tasks")?,
            classes: s.opt_list_usize("classes")?,
        },
        "rotated_idx" => StreamSpec::RotatedIdx {
            images: resolve(base, &s.need_str("images")?),
            labels: resolve(base, &s.need_str("labels")?),
            tasks: s.need_usize("tasks")?,
            classes: s.opt_list_usize("classes")?,
            angle_seed: s.opt_u64("angle_seed")?.unwrap_or(0),
        },
        "csv" => StreamSpec::Csv {
            path: resolve(base, &s.need_str("path")?),
            tasks: s.need_usize("tasks")?,
            class_count: s.opt_usize("class_count")?,
        },
        other => {
            return Err(s.err(
                "kind",
                format!("unknown stream kind `{other}`; valid kinds: gaussian, idx, rotated_idx, csv"),
            ))
        }
    };
    match &stream {
        StreamSpec::Gaussian {
            classes,
            tasks,
            separation,
            ..
        } => {
            if *tasks == 0 || classes % tasks != 0 {
                return Err(s.err("tasks", format!("{classes} classes do not split into {tasks} tasks")));
            }
            if !(separation.is_finite() && *separation >= 0.0) {
                return Err(s.err("separation", "separation must be >= 0"));
            }
        }
        StreamSpec::Idx { tasks, .. }
        | StreamSpec::RotatedIdx { tasks, .. }
        | StreamSpec::Csv { tasks, .. } => {
            if *tasks == 0 {
                return Err(s.err("tasks", "tasks must be >= 1"));
            }
        }
    }
    Ok(stream)
}

fn parse_aux(s: &mut Section<'_>, base: &Path) -> Result<AuxSpec> {
    let kind = s.opt_str("kind")?.unwrap_or_else(|| "none".to_string());
    Ok(match kind.as_str() {
        "none" => AuxSpec::None,
        "gaussian" => {
            let aux = AuxSpec::Gaussian {
                size: s.usize_or("size", 5000)?,
                clusters: s.usize_or("clusters", 10)?,
                separation: s.f64_or("separation", 4.0)?,
                seed: s.opt_u64("seed")?.unwrap_or(1),
            };
            if let AuxSpec::Gaussian { size: 0, .. } | AuxSpec::Gaussian { clusters: 0, .. } = aux {
                return Err(s.err("size", "size and clusters must be >= 1"));
            }
            aux
        }
        "idx" => AuxSpec::Idx {
            images: resolve(base, &s.need_str("images")?),
            labels: resolve(base, &s.need_str("labels")?),
            classes: s.opt_list_usize("classes")?,
        },
        "csv" => AuxSpec::Csv {
            path: resolve(base, &s.need_str("path")?),
        },
        other => {
            return Err(s.err(
                "kind",
                format!("unknown aux kind `{other}`; valid kinds: none, gaussian, idx, csv"),
            ))
        }
    })
}

fn parse_train(s: &mut Section<'_>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let batch_n = s.usize_or("batch_n", d.batch_n)?;
    let alpha = s.f64_or("alpha", d.hp.alpha)?;
    let tau = s.f64_or("tau", d.hp.tau)?;
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(s.err("alpha", format!("alpha must be >= 0, got {alpha}")));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(s.err("tau", format!("tau must be > 0, got {tau}")));
    }
    let cfg = TrainConfig {
        epochs_per_task: s.usize_or("epochs_per_task", d.epochs_per_task)?,
        batch_n,
        lr: s.f64_or("lr", d.lr)?,
        lr_drop_epochs: s.opt_list_usize("lr_drop_epochs")?.unwrap_or_default(),
        hp: Hyperparams { alpha, tau },
        k_select: s.usize_or("k_select", batch_n)?,
        kd_stop_last_batches: s.usize_or("kd_stop_last_batches", d.kd_stop_last_batches)?,
        method: d.method,
        er_buffer: s.usize_or("er_buffer", d.er_buffer)?,
        seed: 0,
        rss: s.bool_or("rss", d.rss)?,
        regularize_all_current: s.bool_or("regularize_all_current", d.regularize_all_current)?,
        hidden: s.opt_list_usize("hidden")?.unwrap_or(d.hidden),
    };
    // Constraints that do not depend on the method.
    cfg.with_method(Method::Ft).validate().map_err(|e| match e {
        Error::Config { key: Some(k), msg, .. } => s.err(&k, msg),
        other => other,
    })?;
    Ok(cfg)
}

fn check_files(spec: &ExperimentSpec) -> Result<()> {
    let mut files: Vec<(&str, &Path)> = Vec::new();
    match &spec.stream {
        StreamSpec::Idx { images, labels, .. } | StreamSpec::RotatedIdx { images, labels, .. } => {
            files.push(("stream.images", images));
            files.push(("stream.labels", labels));
        }
        StreamSpec::Csv { path, .. } => files.push(("stream.path", path)),
        StreamSpec::Gaussian { .. } => {}
    }
    match &spec.aux {
        AuxSpec::Idx { images, labels, .. } => {
            files.push(("aux.images", images));
            files.push(("aux.labels", labels));
        }
        AuxSpec::Csv { path } => files.push(("aux.path", path)),
        _ => {}
    }
    for (key, path) in files {
        if !path.is_file() {
            return Err(Error::config_key(
                key,
                format!("file {} does not exist", path.display()),
            ));
        }
    }
    if let (
        StreamSpec::Idx { images, classes: sc, .. } | StreamSpec::RotatedIdx { images, classes: sc, .. },
        AuxSpec::Idx { images: ai, classes: ac, .. },
    ) = (&spec.stream, &spec.aux)
    {
        if images == ai {
            let disjoint = match (sc, ac) {
                (Some(s), Some(a)) => s.iter().all(|c| !a.contains(c)),
                _ => false,
            };
            if !disjoint {
                return Err(Error::config_key(
                    "aux.classes",
                    "auxiliary classes must be disjoint from the stream's classes",
                ));
            }
        }
    }
    Ok(())
}

fn class_filter(ds: Dataset, classes: &Option<Vec<usize>>) -> Result<Dataset> {
    match classes {
        Some(c) => ds.restrict_classes(c),
        None => Ok(ds),
    }
}

/// Builds the task stream described by a spec.
pub fn build_stream(spec: &StreamSpec) -> Result<TaskStream> {
    match spec {
        StreamSpec::Gaussian {
            classes,
            tasks,
            dim,
            separation,
            per_class,
            seed,
        } => {
            let base =
                make_gaussian_dataset(*classes, *dim, *separation, *per_class, &mut Rng::new(*seed))?;
            split_class_stream(&base, *tasks)
        }
        StreamSpec::Idx {
            images,
            labels,
            tasks,
            classes,
        } => split_class_stream(&class_filter(load_idx(images, labels)?, classes)?, *tasks),
        StreamSpec::RotatedIdx {
            images,
            labels,
            tasks,
            classes,
            angle_seed,
        } => {
            let base = class_filter(load_idx(images, labels)?, classes)?;
            rotated_stream(&base, *tasks, &mut Rng::new(*angle_seed))
        }
        StreamSpec::Csv {
            path,
            tasks,
            class_count,
        } => split_class_stream(&load_csv_dataset(path, *class_count)?, *tasks),
    }
}

/// Builds the auxiliary pool, matched to the stream's input shape.
pub fn build_aux(spec: &AuxSpec, stream: &TaskStream) -> Result<Option<AuxiliaryPool>> {
    let pool = match spec {
        AuxSpec::None => return Ok(None),
        AuxSpec::Gaussian {
            size,
            clusters,
            separation,
            seed,
        } => make_gaussian_pool(*size, *clusters, stream.dim(), *separation, &mut Rng::new(*seed))?,
        AuxSpec::Idx {
            images,
            labels,
            classes,
        } => {
            let ds = load_idx(images, labels)?;
            let ds = match classes {
                Some(keep) => {
                    let idx: Vec<usize> = (0..ds.len())
                        .filter(|&i| keep.contains(&ds.y()[i]))
                        .collect();
                    ds.subset(&idx)?
                }
                None => ds,
            };
            AuxiliaryPool::from_dataset(&ds, format!("idx:{}", images.display()))?
        }
        AuxSpec::Csv { path } => load_csv_pool(path, format!("csv:{}", path.display()))?,
    };
    Ok(Some(pool.matched_to(stream.dim(), stream.image_shape())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub protocol: String,
    pub acc: f64,
    /// Undefined for single-task streams and for joint training.
    pub forget: Option<f64>,
    pub task_il_acc: Option<f64>,
    pub task_il_forget: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    method: Method,
    seed: u64,
    config: &'a TrainConfig,
    stream: &'a StreamSpec,
    stream_digest: String,
    scenario: String,
    tasks: usize,
    total_classes: usize,
    dim: usize,
    aux: &'a AuxSpec,
    aux_tag: Option<String>,
    aux_size: Option<usize>,
    aux_digest: Option<String>,
}

fn run_name(method: Method, seed: u64) -> String {
    format!("{method}_s{seed}")
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

fn progress_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("task,epoch,mean_loss,lr\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.task,
            r.epoch,
            fmt_real(r.mean_loss),
            fmt_real(r.lr)
        )
        .unwrap();
    }
    out
}

fn summarize_run(out: &RunOutput, method: Method, seed: u64, wall: f64) -> Result<RunSummary> {
    Ok(RunSummary {
        method,
        seed,
        protocol: out.protocol.name().to_string(),
        acc: avg_accuracy(&out.matrix)?,
        forget: forgetting(&out.matrix).ok(),
        task_il_acc: out.task_il.as_ref().map(avg_accuracy).transpose()?,
        task_il_forget: out.task_il.as_ref().and_then(|m| forgetting(m).ok()),
        wall_time_s: wall,
    })
}

/// Number of concurrent runs: `PFCL_WORKERS` if set, otherwise the
/// machine's available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::config_key(WORKERS_ENV, format!("expected a positive integer, got `{v}`"))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub struct ExperimentReport {
    pub summaries: Vec<RunSummary>,
    pub matrices: Vec<(Method, u64, EvalMatrix)>,
}

/// Trains every (method, seed) pair and writes the result files.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let stream = build_stream(&spec.stream)?;
    let aux = build_aux(&spec.aux, &stream)?;
    let out_dir = &spec.output;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let jobs: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let stream_digest = stream.digest();
    let results: Vec<Result<(RunSummary, EvalMatrix)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let cfg = spec.train.with_method(method).with_seed(seed);
                let start = Instant::now();
                let out = run_continual(&stream, aux.as_ref(), &cfg)?;
                let summary = summarize_run(&out, method, seed, start.elapsed().as_secs_f64())?;
                let name = run_name(method, seed);
                out.matrix
                    .save(out_dir.join("matrices").join(format!("{name}.csv")))?;
                if let Some(m) = &out.task_il {
                    m.save(out_dir.join("matrices_task_il").join(format!("{name}.csv")))?;
                }
                write_atomic(
                    &out_dir.join("progress").join(format!("{name}.csv")),
                    progress_csv(&out.records).as_bytes(),
                )?;
                let manifest = Manifest {
                    method,
                    seed,
                    config: &cfg,
                    stream: &spec.stream,
                    stream_digest: stream_digest.clone(),
                    scenario: format!("{:?}", stream.scenario()),
                    tasks: stream.len(),
                    total_classes: stream.total_classes(),
                    dim: stream.dim(),
                    aux: &spec.aux,
                    aux_tag: aux.as_ref().map(|a| a.source_tag().to_string()),
                    aux_size: aux.as_ref().map(|a| a.len()),
                    aux_digest: aux.as_ref().map(|a| a.digest()),
                };
                write_atomic(
                    &out_dir.join("manifests").join(format!("{name}.json")),
                    &json_bytes(&manifest),
                )?;
                write_atomic(
                    &out_dir.join("summaries").join(format!("{name}.json")),
                    &json_bytes(&summary),
                )?;
                log::info!(
                    "{name}: acc {:.4} forget {}",
                    summary.acc,
                    summary.forget.map_or("n/a".to_string(), |f| format!("{f:.4}"))
                );
                Ok((summary, out.matrix))
            })
            .collect()
    });

    let mut summaries = Vec::new();
    let mut matrices = Vec::new();
    for r in results {
        let (s, m) = r?;
        matrices.push((s.method, s.seed, m));
        summaries.push(s);
    }
    let mut ordered = summaries.clone();
    ordered.sort_by_key(|s| (s.method, s.seed));
    write_atomic(&out_dir.join("summary.csv"), aggregate_csv(&ordered).as_bytes())?;
    let labeled: Vec<(String, EvalMatrix)> = matrices
        .iter()
        .map(|(m, _, mat)| (m.name().to_string(), mat.clone()))
        .collect();
    write_atomic(&out_dir.join("curves.csv"), emit_curves(&labeled)?.as_bytes())?;
    Ok(ExperimentReport {
        summaries,
        matrices,
    })
}

/// Mean and population standard deviation; `None` when no value exists.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodAggregate {
    pub method: Method,
    pub runs: usize,
    pub acc: (f64, f64),
    pub forget: Option<(f64, f64)>,
    pub task_il_acc: Option<(f64, f64)>,
    pub task_il_forget: Option<(f64, f64)>,
}

/// Groups per-run summaries by method, in order of first appearance.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<MethodAggregate> {
    let mut order: Vec<Method> = Vec::new();
    let mut groups: BTreeMap<Method, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        if !groups.contains_key(&s.method) {
            order.push(s.method);
        }
        groups.entry(s.method).or_default().push(s);
    }
    order
        .into_iter()
        .map(|method| {
            let g = &groups[&method];
            let collect = |f: fn(&RunSummary) -> Option<f64>| -> Option<(f64, f64)> {
                let vals: Vec<f64> = g.iter().filter_map(|s| f(s)).collect();
                if vals.len() == g.len() {
                    mean_std(&vals)
                } else {
                    None
                }
            };
            MethodAggregate {
                method,
                runs: g.len(),
                acc: collect(|s| Some(s.acc)).expect("every run has an accuracy"),
                forget: collect(|s| s.forget),
                task_il_acc: collect(|s| s.task_il_acc),
                task_il_forget: collect(|s| s.task_il_forget),
            }
        })
        .collect()
}

pub fn aggregate_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from(
        "method,runs,acc_mean,acc_std,forget_mean,forget_std,\
         task_il_acc_mean,task_il_acc_std,task_il_forget_mean,task_il_forget_std\n",
    );
    let cell = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => format!("{},{}", fmt_real(m), fmt_real(s)),
        None => ",".to_string(),
    };
    for a in aggregate(summaries) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            a.method,
            a.runs,
            cell(Some(a.acc)),
            cell(a.forget),
            cell(a.task_il_acc),
            cell(a.task_il_forget)
        )
        .unwrap();
    }
    out
}

/// Running-accuracy curves: one row per training step, a mean and standard
/// deviation column per label (in order of first appearance). Steps with no
/// evaluation leave empty cells.
pub fn emit_curves(matrices: &[(String, EvalMatrix)]) -> Result<String> {
    let t = match matrices.first() {
        Some((_, m)) => m.tasks(),
        None => return Err(Error::domain("no matrices to plot")),
    };
    if let Some((label, m)) = matrices.iter().find(|(_, m)| m.tasks() != t) {
        return Err(Error::domain(format!(
            "matrix for `{label}` has {} tasks, expected {t}",
            m.tasks()
        )));
    }
    let mut labels: Vec<&str> = Vec::new();
    for (l, _) in matrices {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    let curves: Vec<(&str, Vec<Option<f64>>)> = matrices
        .iter()
        .map(|(l, m)| (l.as_str(), running_accuracy(m)))
        .collect();
    let mut out = String::from("step");
    for l in &labels {
        write!(out, ",{l}_mean,{l}_std").unwrap();
    }
    out.push('\n');
    for step in 0..t {
        write!(out, "{}", step + 1).unwrap();
        for l in &labels {
            let vals: Vec<Option<f64>> = curves
                .iter()
                .filter(|(cl, _)| cl == l)
                .map(|(_, c)| c[step])
                .collect();
            match vals.iter().copied().collect::<Option<Vec<f64>>>().and_then(|v| mean_std(&v)) {
                Some((m, s)) => write!(out, ",{},{}", fmt_real(m), fmt_real(s)).unwrap(),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Label for a matrix file: the stem with any `_s{seed}` suffix removed.
pub fn curve_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.rsplit_once("_s") {
        Some((head, tail)) if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) => {
            head.to_string()
        }
        _ => stem,
    }
}

/// Curves from matrix CSV files, grouped by [`curve_label`].
pub fn curves_from_files(paths: &[PathBuf]) -> Result<String> {
    let matrices = paths
        .iter()
        .map(|p| Ok((curve_label(p), EvalMatrix::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    emit_curves(&matrices)
}

/// Rebuilds the aggregate table from `dir/summaries/*.json`, rewrites
/// `dir/summary.csv` and returns its contents.
pub fn summarize(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let sdir = dir.join("summaries");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&sdir)
        .map_err(|e| Error::io(&sdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::domain(format!("no run summaries in {}", sdir.display())));
    }
    let mut summaries = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<RunSummary>(&text).map_err(|e| Error::Format {
                path: p.display().to_string(),
                offset: text
                    .lines()
                    .take(e.line().saturating_sub(1))
                    .map(|l| l.len() as u64 + 1)
                    .sum::<u64>()
                    + e.column().saturating_sub(1) as u64,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summaries.sort_by_key(|s| (s.method, s.seed));
    let csv = aggregate_csv(&summaries);
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;
    Ok(csv)
}
