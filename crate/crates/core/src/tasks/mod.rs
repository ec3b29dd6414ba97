//! Task streams and auxiliary pools.
//!
//! A [`TaskStream`] is an ordered list of tasks, each with its own train and
//! test split. Class-incremental streams partition the label space into
//! disjoint subsets; domain-incremental streams keep every label and change
//! the input distribution (image rotation). An [`AuxiliaryPool`] holds
//! unlabeled samples from outside the stream and is only ever consumed by the
//! distillation term.

mod csv_io;
mod idx;
mod rotate;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub use csv_io::{load_csv_dataset, load_csv_pool, write_csv_dataset, write_csv_pool};
pub use idx::{
    load_idx, load_idx_with_classes, parse_images, parse_labels, write_idx, DIGIT_CLASSES,
    IMAGES_MAGIC, LABELS_MAGIC,
};
pub use rotate::{resize_nearest, rotate_image};

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<usize>,
    class_count: usize,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, class_count: usize) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} samples",
                y.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(Error::domain(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            x,
            y,
            class_count,
            image_shape: None,
        })
    }

    /// Declares rows to be `h × w` images.
    pub fn with_image_shape(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.x.cols() {
            return Err(Error::shape(format!(
                "image shape {h}x{w} does not match {} features",
                self.x.cols()
            )));
        }
        self.image_shape = Some((h, w));
        Ok(self)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels_present(&self) -> BTreeSet<usize> {
        self.y.iter().copied().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_rows(indices)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            class_count: self.class_count,
            image_shape: self.image_shape,
        })
    }

    /// Keeps samples of the listed classes and relabels them `0..classes.len()`
    /// in the listed order.
    pub fn restrict_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let distinct: BTreeSet<usize> = classes.iter().copied().collect();
        if distinct.len() != classes.len() || classes.is_empty() {
            return Err(Error::domain(format!(
                "class list {classes:?} must be nonempty and without repeats"
            )));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| distinct.contains(&self.y[i]))
            .collect();
        let mut out = self.subset(&keep)?;
        for label in &mut out.y {
            *label = classes.iter().position(|c| c == label).unwrap();
        }
        out.class_count = classes.len();
        Ok(out)
    }

    /// Stacks datasets with a shared feature dimension and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("nothing to concatenate"))?;
        let mut x = first.x.clone();
        let mut y = first.y.clone();
        for p in &parts[1..] {
            if p.class_count != first.class_count {
                return Err(Error::shape("class counts differ"));
            }
            x = Matrix::vstack(&x, &p.x)?;
            y.extend_from_slice(&p.y);
        }
        Ok(Dataset {
            x,
            y,
            class_count: first.class_count,
            image_shape: first.image_shape,
        })
    }

    /// Hex SHA-256 over dimensions, feature bits and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.x.rows() as u64).to_le_bytes());
        h.update((self.x.cols() as u64).to_le_bytes());
        h.update((self.class_count as u64).to_le_bytes());
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.y {
            h.update((y as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Per-class split keeping the first [`TRAIN_FRACTION`] of each class (in
    /// dataset order) for training and the rest for testing. Every class with
    /// at least two samples contributes to both sides.
    pub fn stratified_split(&self) -> Result<(Dataset, Dataset)> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, &y) in self.y.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for idx in by_class.iter().filter(|v| !v.is_empty()) {
            let n = idx.len();
            let n_train = if n < 2 {
                n
            } else {
                ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1)
            };
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIl,
    DomainIl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Global class indices this task covers.
    pub classes: BTreeSet<usize>,
    /// Rotation applied to every image of a domain-incremental task.
    pub angle: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    scenario: Scenario,
    tasks: Vec<Task>,
    total_classes: usize,
}

impl TaskStream {
    pub fn new(scenario: Scenario, tasks: Vec<Task>, total_classes: usize) -> Result<Self> {
        let stream = Self {
            scenario,
            tasks,
            total_classes,
        };
        stream.validate()?;
        Ok(stream)
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::domain("a stream needs at least one task"));
        }
        let dim = self.tasks[0].train.dim();
        let full: BTreeSet<usize> = (0..self.total_classes).collect();
        let mut seen = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.train.is_empty() || t.test.is_empty() {
                return Err(Error::domain(format!("task {i} has an empty split")));
            }
            if t.train.dim() != dim || t.test.dim() != dim {
                return Err(Error::shape(format!("task {i} feature dimension differs")));
            }
            if t.train.class_count() != self.total_classes
                || t.test.class_count() != self.total_classes
            {
                return Err(Error::domain(format!(
                    "task {i} datasets must use the global class count {}",
                    self.total_classes
                )));
            }
            let labels: BTreeSet<usize> = t
                .train
                .labels_present()
                .union(&t.test.labels_present())
                .copied()
                .collect();
            if !labels.is_subset(&t.classes) {
                return Err(Error::domain(format!(
                    "task {i} holds labels outside its class subset"
                )));
            }
            match self.scenario {
                Scenario::ClassIl => {
                    if !t.classes.is_subset(&full) {
                        return Err(Error::domain(format!(
                            "task {i} classes exceed total {}",
                            self.total_classes
                        )));
                    }
                    if !seen.is_disjoint(&t.classes) {
                        return Err(Error::domain(format!(
                            "task {i} classes overlap an earlier task"
                        )));
                    }
                    seen.extend(t.classes.iter().copied());
                }
                Scenario::DomainIl => {
                    if t.classes != full {
                        return Err(Error::domain(format!(
                            "domain-incremental task {i} must cover every class"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.tasks[0].train.image_shape()
    }

    /// Union of all training splits, for joint training.
    pub fn pooled_train(&self) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.tasks.iter().map(|t| &t.train).collect();
        Dataset::concat(&parts)
    }

    /// Digest over every split of every task.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}:{}", self.scenario, self.total_classes));
        for t in &self.tasks {
            h.update(t.train.digest());
            h.update(t.test.digest());
        }
        hex(&h.finalize())
    }
}

/// Isotropic unit-variance Gaussian classes centered on random unit
/// directions scaled by `separation`. Samples are ordered class by class.
pub fn make_gaussian_dataset(
    class_count: usize,
    dim: usize,
    separation: f64,
    per_class: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if class_count < 2 || dim < 2 || per_class < 2 {
        return Err(Error::domain(format!(
            "need class_count >= 2, dim >= 2, per_class >= 2; got {class_count}, {dim}, {per_class}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::domain(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    let means = random_directions(class_count, dim, rng)
        .into_iter()
        .map(|d| d.into_iter().map(|v| v * separation).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + rng.normal()));
            y.push(c);
        }
    }
    Dataset::new(Matrix::new(n, dim, data)?, y, class_count)
}

fn random_directions(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|a| a / norm).collect();
            }
        })
        .collect()
}

/// Splits `base` into `t_count` class-incremental tasks of consecutive,
/// equally sized class blocks, each divided 80/20 by class.
pub fn split_class_stream(base: &Dataset, t_count: usize) -> Result<TaskStream> {
    let c = base.class_count();
    if t_count == 0 || !c.is_multiple_of(t_count) {
        return Err(Error::domain(format!(
            "{c} classes cannot be split evenly into {t_count} tasks"
        )));
    }
    let per_task = c / t_count;
    let tasks = (0..t_count)
        .map(|i| {
            let classes: BTreeSet<usize> = (i * per_task..(i + 1) * per_task).collect();
            let idx: Vec<usize> = (0..base.len())
                .filter(|&j| classes.contains(&base.y()[j]))
                .collect();
            let (train, test) = base.subset(&idx)?.stratified_split()?;
            Ok(Task {
                train,
                test,
                classes,
                angle: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(Scenario::ClassIl, tasks, c)
}

/// Domain-incremental stream: task `i` rotates every image by one angle drawn
/// uniformly from `[0, π)`.
pub fn rotated_stream(base: &Dataset, t_count: usize, rng: &mut Rng) -> Result<TaskStream> {
    let angles: Vec<f64> = (0..t_count).map(|_| rng.unit() * PI).collect();
    rotated_stream_with_angles(base, &angles)
}

pub fn rotated_stream_with_angles(base: &Dataset, angles: &[f64]) -> Result<TaskStream> {
    let (h, w) = base
        .image_shape()
        .ok_or_else(|| Error::domain("rotation needs a declared image shape"))?;
    if h != w {
        return Err(Error::domain(format!("rotation needs square images, got {h}x{w}")));
    }
    if h < 2 {
        return Err(Error::domain("images must be at least 2x2"));
    }
    let (train, test) = base.stratified_split()?;
    let classes: BTreeSet<usize> = (0..base.class_count()).collect();
    let tasks = angles
        .iter()
        .map(|&theta| {
            Ok(Task {
                train: rotate_dataset(&train, theta)?,
                test: rotate_dataset(&test, theta)?,
                classes: classes.clone(),
                angle: Some(theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(Scenario::DomainIl, tasks, base.class_count())
}

fn rotate_dataset(ds: &Dataset, theta: f64) -> Result<Dataset> {
    let (h, w) = ds.image_shape().expect("checked by caller");
    let mut data = Vec::with_capacity(ds.x().data().len());
    for r in 0..ds.len() {
        let img = Matrix::new(h, w, ds.x().row(r).to_vec())?;
        data.extend_from_slice(rotate_image(&img, theta).data());
    }
    Dataset::new(Matrix::new(ds.len(), h * w, data)?, ds.y().to_vec(), ds.class_count())?
        .with_image_shape(h, w)
}

/// Unlabeled samples from outside the task stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryPool {
    x: Matrix,
    source_tag: String,
    image_shape: Option<(usize, usize)>,
}

impl AuxiliaryPool {
    pub fn new(x: Matrix, source_tag: impl Into<String>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::domain("auxiliary pool is empty"));
        }
        Ok(Self {
            x,
            source_tag: source_tag.into(),
            image_shape: None,
        })
    }

    /// Drops the labels of `ds`.
    pub fn from_dataset(ds: &Dataset, source_tag: impl Into<String>) -> Result<Self> {
        let mut pool = Self::new(ds.x().clone(), source_tag)?;
        pool.image_shape = ds.image_shape();
        Ok(pool)
    }

    pub fn with_image_shape(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.x.cols() {
            return Err(Error::shape(format!(
                "image shape {h}x{w} does not match {} features",
                self.x.cols()
            )));
        }
        self.image_shape = Some((h, w));
        Ok(self)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// Brings samples to `dim` features. Images are resized by nearest
    /// neighbor when both shapes are known; otherwise vectors are truncated
    /// or zero-padded.
    pub fn matched_to(&self, dim: usize, image_shape: Option<(usize, usize)>) -> Result<Self> {
        if let (Some((sh, sw)), Some((th, tw))) = (self.image_shape, image_shape) {
            if th * tw != dim {
                return Err(Error::shape(format!(
                    "target image {th}x{tw} does not match dim {dim}"
                )));
            }
            if (sh, sw) == (th, tw) {
                return Ok(self.clone());
            }
            let mut data = Vec::with_capacity(self.len() * dim);
            for r in 0..self.len() {
                let img = Matrix::new(sh, sw, self.x.row(r).to_vec())?;
                data.extend_from_slice(resize_nearest(&img, th, tw).data());
            }
            return Ok(Self {
                x: Matrix::new(self.len(), dim, data)?,
                source_tag: self.source_tag.clone(),
                image_shape: Some((th, tw)),
            });
        }
        if self.dim() == dim {
            let mut same = self.clone();
            same.image_shape = image_shape;
            return Ok(same);
        }
        let mut data = Vec::with_capacity(self.len() * dim);
        for r in 0..self.len() {
            let row = self.x.row(r);
            data.extend((0..dim).map(|c| row.get(c).copied().unwrap_or(0.0)));
        }
        Ok(Self {
            x: Matrix::new(self.len(), dim, data)?,
            source_tag: self.source_tag.clone(),
            image_shape,
        })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.x.rows() as u64).to_le_bytes());
        h.update((self.x.cols() as u64).to_le_bytes());
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Gaussian blobs around fresh random directions: unlabeled, and centered
/// away from any stream class drawn from an independent generator.
pub fn make_gaussian_pool(
    size: usize,
    clusters: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<AuxiliaryPool> {
    if size == 0 || clusters == 0 {
        return Err(Error::domain("auxiliary pool needs size and clusters >= 1"));
    }
    let means = random_directions(clusters, dim, rng);
    let mut data = Vec::with_capacity(size * dim);
    for i in 0..size {
        let m = &means[i % clusters];
        data.extend(m.iter().map(|v| v * separation + rng.normal()));
    }
    AuxiliaryPool::new(Matrix::new(size, dim, data)?, format!("gauss-{clusters}x{size}"))
}

/// Draws auxiliary rows without replacement, reshuffling once every sample
/// has been served.
#[derive(Clone, Debug)]
pub struct AuxSampler<'a> {
    pool: &'a AuxiliaryPool,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> AuxSampler<'a> {
    pub fn new(pool: &'a AuxiliaryPool) -> Self {
        Self {
            pool,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_indices(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.pool.is_empty() {
            return Err(Error::domain("auxiliary pool is empty"));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order = rng.permutation(self.pool.len());
                self.cursor = 0;
            }
            let take = (n - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Ok(out)
    }

    pub fn sample(&mut self, n: usize, rng: &mut Rng) -> Result<Matrix> {
        let idx = self.next_indices(n, rng)?;
        self.pool.x.select_rows(&idx)
    }
}

/// One draw of `n` rows from a fresh pass over the pool.
pub fn sample_auxiliary(pool: &AuxiliaryPool, n: usize, rng: &mut Rng) -> Result<Matrix> {
    AuxSampler::new(pool).sample(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(seed: u64) -> Dataset {
        make_gaussian_dataset(10, 8, 3.0, 20, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn gaussian_dataset_is_deterministic() {
        let a = gauss(1);
        let b = gauss(1);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), gauss(2).digest());
        assert_eq!(a.len(), 200);
        assert!(make_gaussian_dataset(1, 8, 1.0, 5, &mut Rng::new(0)).is_err());
        assert!(make_gaussian_dataset(3, 1, 1.0, 5, &mut Rng::new(0)).is_err());
        assert!(make_gaussian_dataset(3, 4, 1.0, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn class_split_is_disjoint_and_covering() {
        let s = split_class_stream(&gauss(3), 5).unwrap();
        assert_eq!(s.scenario(), Scenario::ClassIl);
        let subsets: Vec<Vec<usize>> = s
            .tasks()
            .iter()
            .map(|t| t.classes.iter().copied().collect())
            .collect();
        assert_eq!(
            subsets,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        let mut union = BTreeSet::new();
        for t in s.tasks() {
            assert!(union.is_disjoint(&t.classes));
            union.extend(t.classes.iter().copied());
            assert_eq!(t.train.len(), 32);
            assert_eq!(t.test.len(), 8);
            assert_eq!(t.train.labels_present(), t.classes);
        }
        assert_eq!(union, (0..10).collect());
        assert!(matches!(split_class_stream(&gauss(3), 3), Err(Error::Domain(_))));
    }

    fn tiny_images() -> Dataset {
        let mut rng = Rng::new(4);
        let x = Matrix::new(20, 16, (0..320).map(|_| rng.unit()).collect()).unwrap();
        let y = (0..20).map(|i| i % 2).collect();
        Dataset::new(x, y, 2).unwrap().with_image_shape(4, 4).unwrap()
    }

    #[test]
    fn rotated_stream_protocol() {
        let base = tiny_images();
        let identity = rotated_stream_with_angles(&base, &[0.0]).unwrap();
        let (train, test) = base.stratified_split().unwrap();
        assert_eq!(identity.tasks()[0].train, train);
        assert_eq!(identity.tasks()[0].test, test);

        let s = rotated_stream(&base, 20, &mut Rng::new(9)).unwrap();
        let angles: Vec<f64> = s.tasks().iter().map(|t| t.angle.unwrap()).collect();
        let distinct: BTreeSet<u64> = angles.iter().map(|a| a.to_bits()).collect();
        assert_eq!(distinct.len(), 20);
        assert!(angles.iter().all(|&a| (0.0..PI).contains(&a)));
        let again = rotated_stream(&base, 20, &mut Rng::new(9)).unwrap();
        assert_eq!(s.digest(), again.digest());
        for t in s.tasks() {
            assert_eq!(t.train.y(), train.y());
            assert_eq!(t.test.y(), test.y());
            let rot = rotate_dataset(&test, t.angle.unwrap()).unwrap();
            assert_eq!(rot.x(), t.test.x());
            assert_ne!(t.train.x(), train.x());
        }
    }

    #[test]
    fn rotated_stream_needs_square_image_shape() {
        let ds = gauss(0);
        assert!(matches!(
            rotated_stream(&ds, 2, &mut Rng::new(0)),
            Err(Error::Domain(_))
        ));
        let x = Matrix::zeros(4, 6);
        let rect = Dataset::new(x, vec![0, 1, 0, 1], 2)
            .unwrap()
            .with_image_shape(2, 3)
            .unwrap();
        assert!(matches!(
            rotated_stream(&rect, 2, &mut Rng::new(0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampler_is_without_replacement_per_pass() {
        let pool = AuxiliaryPool::new(
            Matrix::new(10, 1, (0..10).map(|v| v as f64).collect()).unwrap(),
            "ten",
        )
        .unwrap();
        let mut rng = Rng::new(6);
        let all = sample_auxiliary(&pool, 10, &mut rng).unwrap();
        let mut seen: Vec<u64> = all.data().iter().map(|&v| v as u64).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        let mut counts = [0usize; 10];
        let mut sampler = AuxSampler::new(&pool);
        let mut rng = Rng::new(2);
        for _ in 0..4 {
            for v in sampler.sample(5, &mut rng).unwrap().data() {
                counts[*v as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 2));

        let a = sample_auxiliary(&pool, 7, &mut Rng::new(1)).unwrap();
        let b = sample_auxiliary(&pool, 7, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(matches!(
            AuxiliaryPool::new(Matrix::zeros(0, 3), "none"),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pool_dimension_matching() {
        let pool = AuxiliaryPool::new(Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(), "v").unwrap();
        assert_eq!(pool.matched_to(2, None).unwrap().x().row(0), &[1.0, 2.0]);
        assert_eq!(pool.matched_to(5, None).unwrap().x().row(0), &[1.0, 2.0, 3.0, 0.0, 0.0]);

        let img = AuxiliaryPool::new(Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap(), "i")
            .unwrap()
            .with_image_shape(2, 2)
            .unwrap();
        let up = img.matched_to(16, Some((4, 4))).unwrap();
        assert_eq!(up.dim(), 16);
        assert_eq!(&up.x().row(0)[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn restrict_relabels_in_order() {
        let ds = gauss(5);
        let r = ds.restrict_classes(&[7, 2]).unwrap();
        assert_eq!(r.class_count(), 2);
        assert_eq!(r.len(), 40);
        assert_eq!(r.labels_present(), [0, 1].into_iter().collect());
        assert_eq!(r.x().row(0), ds.x().row(40));
    }
}
