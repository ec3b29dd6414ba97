//! Continual training loops.
//!
//! Every method trains one single-head model task after task. Each
//! mini-batch is one SGD step on:
//!
//! * `ft`: cross-entropy on the labeled batch.
//! * `kd_only`: cross-entropy plus `α·KD` against the previous task's frozen
//!   model on the same labeled rows.
//! * `pfcl`: the labeled batch is concatenated with an equal number of
//!   unlabeled auxiliary rows. Both models see the whole batch. Rows are
//!   ranked by L1 logit discrepancy, and the top `k` carry the distillation
//!   term. Cross-entropy covers the labeled rows only.
//! * `er`: cross-entropy on the labeled batch joined with rows replayed
//!   from a reservoir-sampled memory.
//! * `jt`: one model trained on the union of all tasks.
//!
//! Distillation is switched off for the final `kd_stop_last_batches`
//! mini-batches of every task and is never applied during the first task.
//!
//! Independent random streams derived from the seed drive initialization,
//! batch shuffling, auxiliary draws and replay. Methods that ignore a
//! stream therefore still see the same initialization and batch order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_scenario, native_protocol, EvalMatrix, Protocol};
use crate::linalg::{Matrix, Rng};
use crate::losses::{combined_loss, cross_entropy, CombinedLoss, Hyperparams, Regularization};
use crate::nn::MlpModel;
use crate::selection::{l1_discrepancy, select_top_k};
use crate::tasks::{AuxSampler, AuxiliaryPool, Dataset, TaskStream};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUX: u64 = 2;
const STREAM_REPLAY: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pfcl,
    KdOnly,
    Ft,
    Jt,
    Er,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pfcl,
        Method::KdOnly,
        Method::Ft,
        Method::Jt,
        Method::Er,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pfcl => "pfcl",
            Method::KdOnly => "kd_only",
            Method::Ft => "ft",
            Method::Jt => "jt",
            Method::Er => "er",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config_key(
                    "methods",
                    format!("unknown method `{s}`; valid methods: {}", valid.join(", ")),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    /// Labeled samples per mini-batch.
    pub batch_n: usize,
    pub lr: f64,
    /// Epochs (within a task) at which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub hp: Hyperparams,
    /// Rows kept by reliable sample selection per full mini-batch.
    pub k_select: usize,
    pub kd_stop_last_batches: usize,
    pub method: Method,
    pub er_buffer: usize,
    pub seed: u64,
    /// Rank candidates by discrepancy. When off, every row is regularized and
    /// the labeled and auxiliary halves each carry weight `α`.
    pub rss: bool,
    /// Always regularize all labeled rows, with selection applied on top.
    pub regularize_all_current: bool,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_n: 32,
            lr: 0.03,
            lr_drop_epochs: Vec::new(),
            hp: Hyperparams::default(),
            k_select: 32,
            kd_stop_last_batches: 5,
            method: Method::Pfcl,
            er_buffer: 0,
            seed: 0,
            rss: true,
            regularize_all_current: false,
            hidden: vec![100, 100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_n == 0 {
            return Err(Error::config_key("batch_n", "batch_n must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config_key(
                "lr",
                format!("learning rate must be > 0, got {}", self.lr),
            ));
        }
        self.hp.validate()?;
        if self.k_select == 0 || self.k_select > 2 * self.batch_n {
            return Err(Error::config_key(
                "k_select",
                format!(
                    "k_select must be in [1, 2*batch_n = {}], got {}",
                    2 * self.batch_n,
                    self.k_select
                ),
            ));
        }
        if self.method == Method::Er && self.er_buffer == 0 {
            return Err(Error::config_key(
                "er_buffer",
                "method er needs er_buffer > 0",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config_key("hidden", "hidden widths must be >= 1"));
        }
        Ok(())
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Learning rate for an epoch within a task.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_drop_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .fold(cfg.lr, |lr, _| lr / 10.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    seen: usize,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            x: Vec::with_capacity(capacity),
            y: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.x[i], self.y[i])
    }

    /// `n` stored samples: without replacement when the buffer holds at
    /// least `n`, with replacement otherwise.
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        let idx: Vec<usize> = if self.len() >= n {
            let mut p = rng.permutation(self.len());
            p.truncate(n);
            p
        } else {
            (0..n).map(|_| rng.below(self.len())).collect()
        };
        let dim = self.x[0].len();
        let mut data = Vec::with_capacity(n * dim);
        for &i in &idx {
            data.extend_from_slice(&self.x[i]);
        }
        Ok((
            Matrix::new(n, dim, data)?,
            idx.iter().map(|&i| self.y[i]).collect(),
        ))
    }
}

/// Classic reservoir sampling: the first `capacity` items are stored, then
/// item `i` (1-based) overwrites a uniformly chosen slot with probability
/// `capacity / i`.
pub fn reservoir_update(buffer: &mut MemoryBuffer, sample: (&[f64], usize), rng: &mut Rng) {
    buffer.seen += 1;
    if buffer.capacity == 0 {
        return;
    }
    if buffer.len() < buffer.capacity {
        buffer.x.push(sample.0.to_vec());
        buffer.y.push(sample.1);
        return;
    }
    let j = rng.below(buffer.seen);
    if j < buffer.capacity {
        buffer.x[j] = sample.0.to_vec();
        buffer.y[j] = sample.1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub task: usize,
    /// 0-based within the task.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Per-run training state: the random streams, the auxiliary cursor and the
/// replay memory persist across tasks.
pub struct Session<'a> {
    cfg: TrainConfig,
    shuffle_rng: Rng,
    aux_rng: Rng,
    replay_rng: Rng,
    aux: Option<AuxSampler<'a>>,
    buffer: MemoryBuffer,
    records: Vec<EpochRecord>,
    tasks_done: usize,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &TrainConfig, aux: Option<&'a AuxiliaryPool>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            shuffle_rng: Rng::substream(cfg.seed, STREAM_SHUFFLE),
            aux_rng: Rng::substream(cfg.seed, STREAM_AUX),
            replay_rng: Rng::substream(cfg.seed, STREAM_REPLAY),
            aux: aux.map(AuxSampler::new),
            buffer: MemoryBuffer::new(if cfg.method == Method::Er {
                cfg.er_buffer
            } else {
                0
            }),
            records: Vec::new(),
            tasks_done: 0,
        })
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EpochRecord> {
        self.records
    }

    pub fn buffer(&self) -> &MemoryBuffer {
        &self.buffer
    }

    /// Model with topology `dim → hidden… → classes`, initialized from the
    /// seed's initialization stream.
    pub fn init_model(&self, dim: usize, classes: usize) -> Result<MlpModel> {
        let mut dims = vec![dim];
        dims.extend_from_slice(&self.cfg.hidden);
        dims.push(classes);
        MlpModel::new(&dims, &mut Rng::substream(self.cfg.seed, STREAM_INIT))
    }

    /// Trains on one task with the configured method. `old` is the frozen
    /// model from the previous task boundary, if any.
    pub fn train_task(
        &mut self,
        model: &mut MlpModel,
        old: Option<&MlpModel>,
        data: &Dataset,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::domain("task has no training samples"));
        }
        if data.dim() != model.in_dim() {
            return Err(Error::shape(format!(
                "task has {} features, model expects {}",
                data.dim(),
                model.in_dim()
            )));
        }
        if let Some(old) = old {
            if old.dims() != model.dims() {
                return Err(Error::shape("old model topology differs from the new model"));
            }
        }
        let method = self.cfg.method;
        if method == Method::Pfcl && old.is_some() && self.aux.is_none() {
            return Err(Error::domain("pfcl needs an auxiliary pool"));
        }

        let task_no = self.tasks_done + 1;
        let n = data.len();
        let per_epoch = n.div_ceil(self.cfg.batch_n);
        let total = per_epoch * self.cfg.epochs_per_task;
        let kd_until = total.saturating_sub(self.cfg.kd_stop_last_batches);
        let mut step = 0;

        for epoch in 0..self.cfg.epochs_per_task {
            let lr = lr_at(epoch, &self.cfg);
            let order = self.shuffle_rng.permutation(n);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_n) {
                let x = data.x().select_rows(chunk)?;
                let y: Vec<usize> = chunk.iter().map(|&i| data.y()[i]).collect();
                let teacher = old.filter(|_| step < kd_until);
                let loss = match (method, teacher) {
                    (Method::Pfcl, Some(t)) => self.pfcl_step(model, t, &x, &y, lr)?,
                    (Method::KdOnly, Some(t)) => self.kd_step(model, t, &x, &y, lr)?,
                    (Method::Er, _) => self.er_step(model, &x, &y, lr, epoch == 0)?,
                    _ => ce_step(model, &x, &y, lr)?,
                };
                loss_sum += loss;
                step += 1;
            }
            let rec = EpochRecord {
                task: task_no,
                epoch,
                mean_loss: loss_sum / per_epoch as f64,
                lr,
            };
            log::info!(
                "task {} epoch {} loss {:.6} lr {}",
                rec.task,
                rec.epoch,
                rec.mean_loss,
                rec.lr
            );
            self.records.push(rec);
        }
        self.tasks_done += 1;
        Ok(())
    }

    fn selection_size(&self, labeled: usize) -> usize {
        if labeled == self.cfg.batch_n {
            self.cfg.k_select
        } else {
            // Short final batch: keep the same proportion.
            ((self.cfg.k_select * labeled) as f64 / self.cfg.batch_n as f64)
                .round()
                .max(1.0) as usize
        }
    }

    fn pfcl_step(
        &mut self,
        model: &mut MlpModel,
        old: &MlpModel,
        x: &Matrix,
        y: &[usize],
        lr: f64,
    ) -> Result<f64> {
        let m = y.len();
        let sampler = self
            .aux
            .as_mut()
            .ok_or_else(|| Error::domain("pfcl needs an auxiliary pool"))?;
        let aux_x = sampler.sample(m, &mut self.aux_rng)?;
        if aux_x.cols() != x.cols() {
            return Err(Error::shape(format!(
                "auxiliary samples have {} features, task has {}",
                aux_x.cols(),
                x.cols()
            )));
        }
        let batch = Matrix::vstack(x, &aux_x)?;
        let (z_new, cache) = model.forward(&batch)?;
        let z_old = old.logits(&batch)?;

        let k = self.selection_size(m);
        let loss = pfcl_loss(&z_new, &z_old, y, k, &self.cfg)?;
        let grads = model.backward(&cache, &loss.dlogits)?;
        model.sgd_step(&grads, lr)?;
        Ok(loss.value)
    }

    fn kd_step(
        &mut self,
        model: &mut MlpModel,
        old: &MlpModel,
        x: &Matrix,
        y: &[usize],
        lr: f64,
    ) -> Result<f64> {
        let (z_new, cache) = model.forward(x)?;
        let z_old = old.logits(x)?;
        let rows: Vec<usize> = (0..y.len()).collect();
        let loss = combined_loss(
            &z_new,
            y,
            Some(Regularization {
                old_logits: &z_old,
                rows: &rows,
            }),
            &self.cfg.hp,
        )?;
        let grads = model.backward(&cache, &loss.dlogits)?;
        model.sgd_step(&grads, lr)?;
        Ok(loss.value)
    }

    fn er_step(
        &mut self,
        model: &mut MlpModel,
        x: &Matrix,
        y: &[usize],
        lr: f64,
        observe: bool,
    ) -> Result<f64> {
        let (batch, labels) = if self.buffer.is_empty() {
            (x.clone(), y.to_vec())
        } else {
            let (bx, by) = self.buffer.draw(self.cfg.batch_n, &mut self.replay_rng)?;
            let mut labels = y.to_vec();
            labels.extend(by);
            (Matrix::vstack(x, &bx)?, labels)
        };
        let loss = ce_step(model, &batch, &labels, lr)?;
        if observe {
            for (r, &label) in y.iter().enumerate() {
                reservoir_update(&mut self.buffer, (x.row(r), label), &mut self.replay_rng);
            }
        }
        Ok(loss)
    }
}

/// Loss for one concatenated batch: rows `0..labels.len()` are labeled and
/// the rest are auxiliary. `k` rows are kept when selection is on.
pub fn pfcl_loss(
    z_new: &Matrix,
    z_old: &Matrix,
    labels: &[usize],
    k: usize,
    cfg: &TrainConfig,
) -> Result<CombinedLoss> {
    let m = labels.len();
    let mut rows: Vec<usize> = if cfg.rss {
        select_top_k(&l1_discrepancy(z_new, z_old)?, k)?
    } else {
        (0..z_new.rows()).collect()
    };
    if cfg.regularize_all_current {
        let union: BTreeSet<usize> = rows.iter().copied().chain(0..m).collect();
        rows = union.into_iter().collect();
    }
    // Without selection the labeled and auxiliary halves are separate
    // expectations, each weighted by α: twice α on the mean over both.
    let hp = if cfg.rss {
        cfg.hp
    } else {
        Hyperparams {
            alpha: 2.0 * cfg.hp.alpha,
            ..cfg.hp
        }
    };
    combined_loss(
        z_new,
        labels,
        Some(Regularization {
            old_logits: z_old,
            rows: &rows,
        }),
        &hp,
    )
}

fn ce_step(model: &mut MlpModel, x: &Matrix, y: &[usize], lr: f64) -> Result<f64> {
    let (z, cache) = model.forward(x)?;
    let loss = cross_entropy(&z, y)?;
    let grads = model.backward(&cache, &loss.dlogits)?;
    model.sgd_step(&grads, lr)?;
    Ok(loss.value)
}

/// Plain cross-entropy training on a first task, where no old model exists.
pub fn train_first_task(model: &mut MlpModel, task: &Dataset, cfg: &TrainConfig) -> Result<()> {
    Session::new(&cfg.with_method(Method::Ft), None)?.train_task(model, None, task)
}

/// One task of the full pipeline against a frozen `old_model`.
pub fn train_task_pfcl(
    model: &mut MlpModel,
    old_model: &MlpModel,
    task: &Dataset,
    aux: &AuxiliaryPool,
    cfg: &TrainConfig,
) -> Result<()> {
    Session::new(&cfg.with_method(Method::Pfcl), Some(aux))?.train_task(
        model,
        Some(old_model),
        task,
    )
}

/// One task with distillation on the labeled rows only.
pub fn train_task_kd_only(
    model: &mut MlpModel,
    old_model: &MlpModel,
    task: &Dataset,
    cfg: &TrainConfig,
) -> Result<()> {
    Session::new(&cfg.with_method(Method::KdOnly), None)?.train_task(model, Some(old_model), task)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Protocol of `matrix`: class-IL or domain-IL, following the stream.
    pub protocol: Protocol,
    pub matrix: EvalMatrix,
    /// Task-IL matrix from the same predictions, for class-incremental streams.
    pub task_il: Option<EvalMatrix>,
    pub model: MlpModel,
    pub records: Vec<EpochRecord>,
}

/// Trains through the whole stream and fills the accuracy matrices.
pub fn run_continual(
    stream: &TaskStream,
    aux: Option<&AuxiliaryPool>,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::domain("empty task stream"));
    }
    if cfg.method == Method::Pfcl {
        let pool = aux.ok_or_else(|| Error::config_key("aux", "method pfcl needs an auxiliary pool"))?;
        if pool.is_empty() {
            return Err(Error::domain("auxiliary pool is empty"));
        }
        if pool.dim() != stream.dim() {
            return Err(Error::shape(format!(
                "auxiliary pool has {} features, stream has {}",
                pool.dim(),
                stream.dim()
            )));
        }
    }
    let aux = aux.filter(|_| cfg.method == Method::Pfcl);
    let t_count = stream.len();
    let mut session = Session::new(cfg, aux)?;
    let mut model = session.init_model(stream.dim(), stream.total_classes())?;
    let mut matrix = EvalMatrix::new(t_count);
    let mut task_il = (stream.scenario() == crate::tasks::Scenario::ClassIl)
        .then(|| EvalMatrix::new(t_count));

    if cfg.method == Method::Jt {
        let pooled = stream.pooled_train()?;
        session.train_task(&mut model, None, &pooled)?;
        record_row(&model, stream, t_count - 1, &mut matrix, task_il.as_mut())?;
    } else {
        let mut old: Option<MlpModel> = None;
        for (i, task) in stream.tasks().iter().enumerate() {
            session.train_task(&mut model, old.as_ref(), &task.train)?;
            old = Some(model.snapshot());
            record_row(&model, stream, i, &mut matrix, task_il.as_mut())?;
        }
    }

    Ok(RunOutput {
        protocol: native_protocol(stream.scenario()),
        matrix,
        task_il,
        model,
        records: session.into_records(),
    })
}

fn record_row(
    model: &MlpModel,
    stream: &TaskStream,
    step: usize,
    matrix: &mut EvalMatrix,
    task_il: Option<&mut EvalMatrix>,
) -> Result<()> {
    let (primary, masked) = evaluate_scenario(model, stream)?;
    matrix.set_row(step, primary)?;
    if let (Some(m), Some(row)) = (task_il, masked) {
        m.set_row(step, row)?;
    }
    Ok(())
}
