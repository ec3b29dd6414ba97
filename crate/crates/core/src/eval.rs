//! Accuracy under the three evaluation protocols and the two summary
//! metrics computed from the accuracy matrix.
//!
//! `a[i][t]` is the accuracy on task `t`'s test set after training through
//! task `i` (both 1-based in formulas, 0-based in code). Final average
//! accuracy is the mean of the last row. Forgetting averages, over every task
//! but the last, the drop from its best accuracy in rows `1..T-1` to its
//! final accuracy. The last row is left out of the maximum, so a task can
//! show negative forgetting if it improved at the end. Entries `a[i][t]` with
//! `t > i` (a task measured before it was trained) are diagnostics only and
//! never enter either metric.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_real, write_atomic};
use crate::linalg::Matrix;
use crate::nn::MlpModel;
use crate::tasks::{Dataset, Scenario, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ClassIl,
    TaskIl,
    DomainIl,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::ClassIl => "class_il",
            Protocol::TaskIl => "task_il",
            Protocol::DomainIl => "domain_il",
        }
    }
}

/// Argmax over the allowed columns; ties resolve to the lowest class index.
fn predict(row: &[f64], mask: Option<&BTreeSet<usize>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &v) in row.iter().enumerate() {
        if mask.is_some_and(|m| !m.contains(&c)) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Fraction of rows whose (masked) argmax equals the label.
pub fn accuracy_from_logits(
    logits: &Matrix,
    labels: &[usize],
    mask: Option<&BTreeSet<usize>>,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("accuracy over an empty test set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(m) = mask {
        if let Some(y) = labels.iter().find(|y| !m.contains(y)) {
            return Err(Error::domain(format!("label {y} is outside the mask")));
        }
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| predict(logits.row(r), mask) == Some(y))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn accuracy(model: &MlpModel, test: &Dataset, mask: Option<&BTreeSet<usize>>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::domain("accuracy over an empty test set"));
    }
    accuracy_from_logits(&model.logits(test.x())?, test.y(), mask)
}

/// Accuracy on every test set of the stream under `protocol`.
pub fn evaluate_all(model: &MlpModel, stream: &TaskStream, protocol: Protocol) -> Result<Vec<f64>> {
    check_protocol(stream.scenario(), protocol)?;
    stream
        .tasks()
        .iter()
        .map(|t| {
            let mask = (protocol == Protocol::TaskIl).then_some(&t.classes);
            accuracy(model, &t.test, mask)
        })
        .collect()
}

/// The scenario's native protocol and, for class-incremental streams, the
/// task-incremental one, both from a single forward pass per task.
pub fn evaluate_scenario(model: &MlpModel, stream: &TaskStream) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut primary = Vec::with_capacity(stream.len());
    let mut masked = Vec::with_capacity(stream.len());
    for t in stream.tasks() {
        let logits = model.logits(t.test.x())?;
        primary.push(accuracy_from_logits(&logits, t.test.y(), None)?);
        if stream.scenario() == Scenario::ClassIl {
            masked.push(accuracy_from_logits(&logits, t.test.y(), Some(&t.classes))?);
        }
    }
    let masked = (stream.scenario() == Scenario::ClassIl).then_some(masked);
    Ok((primary, masked))
}

pub fn native_protocol(scenario: Scenario) -> Protocol {
    match scenario {
        Scenario::ClassIl => Protocol::ClassIl,
        Scenario::DomainIl => Protocol::DomainIl,
    }
}

fn check_protocol(scenario: Scenario, protocol: Protocol) -> Result<()> {
    let ok = matches!(
        (scenario, protocol),
        (Scenario::ClassIl, Protocol::ClassIl | Protocol::TaskIl)
            | (Scenario::DomainIl, Protocol::DomainIl)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::config_key(
            "protocol",
            format!(
                "protocol {} does not apply to a {scenario:?} stream",
                protocol.name()
            ),
        ))
    }
}

/// Square accuracy matrix. A row is `None` when the model was not evaluated
/// after that step (joint training only evaluates once, at the end).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    rows: Vec<Option<Vec<f64>>>,
}

impl EvalMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            rows: vec![None; t],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            m.set_row(i, r)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set_row(&mut self, step: usize, row: Vec<f64>) -> Result<()> {
        let t = self.tasks();
        if step >= t || row.len() != t {
            return Err(Error::shape(format!(
                "row {step} of length {} for a {t}x{t} matrix",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows[step] = Some(row);
        Ok(())
    }

    pub fn row(&self, step: usize) -> Option<&[f64]> {
        self.rows.get(step).and_then(|r| r.as_deref())
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.row(step).and_then(|r| r.get(task).copied())
    }

    fn require_row(&self, step: usize) -> Result<&[f64]> {
        self.row(step)
            .ok_or_else(|| Error::domain(format!("row {} was not evaluated", step + 1)))
    }

    /// Header `step,task_1,...,task_T`; one line per training step; missing
    /// rows have empty cells.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("step");
        for j in 1..=t {
            write!(out, ",task_{j}").unwrap();
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for j in 0..t {
                out.push(',');
                if let Some(r) = r {
                    out.push_str(&fmt_real(r[j]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::Format {
            path: source.to_string(),
            offset: text.lines().take(line).map(|l| l.len() as u64 + 1).sum(),
            msg: format!("line {}: {msg}", line + 1),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fail(0, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let t = cols.len() - 1;
        if cols[0] != "step" || t == 0 {
            return Err(fail(0, format!("bad header `{header}`")));
        }
        let mut m = Self::new(t);
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != t + 1 {
                return Err(fail(i + 1, format!("expected {} fields", t + 1)));
            }
            if fields[0] != (i + 1).to_string() {
                return Err(fail(i + 1, format!("expected step {}", i + 1)));
            }
            if i >= t {
                return Err(fail(i + 1, "more rows than tasks".into()));
            }
            if fields[1..].iter().all(|f| f.is_empty()) {
                count += 1;
                continue;
            }
            let row = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| fail(i + 1, format!("bad value `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            m.set_row(i, row).map_err(|e| fail(i + 1, e.to_string()))?;
            count += 1;
        }
        if count != t {
            return Err(fail(count, format!("expected {t} rows, found {count}")));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Mean of the final row.
pub fn avg_accuracy(m: &EvalMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::domain("empty accuracy matrix"));
    }
    let last = m.require_row(t - 1)?;
    Ok(last.iter().sum::<f64>() / t as f64)
}

/// Mean over tasks `1..T-1` of the best accuracy seen in rows `t..T-1`
/// minus the final accuracy.
pub fn forgetting(m: &EvalMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::domain("forgetting needs at least two tasks"));
    }
    let last = m.require_row(t - 1)?;
    let earlier = (0..t - 1)
        .map(|i| m.require_row(i))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = (0..t - 1)
        .map(|task| {
            let best = earlier[task..]
                .iter()
                .map(|r| r[task])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[task]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Running average accuracy after each step: `(1/i) Σ_{t≤i} a[i][t]`.
pub fn running_accuracy(m: &EvalMatrix) -> Vec<Option<f64>> {
    (0..m.tasks())
        .map(|i| {
            m.row(i)
                .map(|r| r[..=i].iter().sum::<f64>() / (i + 1) as f64)
        })
        .collect()
}
