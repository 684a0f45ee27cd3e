//! Task environments: Gaussian classes on hypercube vertices, and finite
//! labelled datasets (MNIST via the IDX format) split into per-class tasks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// A feature vector with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("{classes} classes do not fit on the {vertices} vertices of a {dim}-cube")]
    TooManyClasses {
        classes: usize,
        dim: usize,
        vertices: u128,
    },

    #[error("standard deviation must be positive and finite, got {0}")]
    InvalidStd(f64),

    #[error("mode {mode} needs at least {needed} classes, environment has {available}")]
    InsufficientClasses {
        mode: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("requested {requested} distinct tasks, environment offers {available}")]
    NotEnoughTasks { requested: usize, available: usize },

    #[error("class {class} has {available} samples, {requested} requested")]
    ClassCapacity {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("images and labels disagree: {images} images, {labels} labels")]
    LengthMismatch { images: usize, labels: usize },

    #[error("expected {expected} tensor")]
    WrongTensorKind { expected: &'static str },
}

/// How a task turns classes into a binary prediction problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskMode {
    /// Binary classification between two distinct classes.
    #[default]
    ClassPair,
    /// Class `c` against a uniform mixture of all other classes.
    OneVsRest,
}

impl TaskMode {
    pub fn name(self) -> &'static str {
        match self {
            TaskMode::ClassPair => "class-pair",
            TaskMode::OneVsRest => "one-vs-rest",
        }
    }

    fn min_classes(self) -> usize {
        2
    }
}

impl std::str::FromStr for TaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class-pair" => Ok(TaskMode::ClassPair),
            "one-vs-rest" => Ok(TaskMode::OneVsRest),
            other => Err(format!("unknown task mode `{other}`")),
        }
    }
}

/// What a task asks the learner to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Label 0 for `negative`, label 1 for `positive`.
    Pair { negative: usize, positive: usize },
    /// Label 1 for `target`, label 0 for any other class.
    OneVsRest { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub id: usize,
    pub kind: TaskKind,
}

impl Task {
    pub fn classes(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::Pair { negative, positive } => vec![negative, positive],
            TaskKind::OneVsRest { target } => vec![target],
        }
    }
}

/// Enumerates every task a mode admits over `classes` classes, in id order.
fn all_tasks(classes: usize, mode: TaskMode) -> Vec<Task> {
    match mode {
        TaskMode::ClassPair => {
            let mut out = Vec::new();
            for a in 0..classes {
                for b in (a + 1)..classes {
                    out.push(TaskKind::Pair {
                        negative: a,
                        positive: b,
                    });
                }
            }
            out.into_iter()
                .enumerate()
                .map(|(id, kind)| Task { id, kind })
                .collect()
        }
        TaskMode::OneVsRest => (0..classes)
            .map(|c| Task {
                id: c,
                kind: TaskKind::OneVsRest { target: c },
            })
            .collect(),
    }
}

/// Draws `count` distinct tasks uniformly at random.
fn draw_distinct_tasks<R: Rng + ?Sized>(
    classes: usize,
    mode: TaskMode,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Task>, TaskError> {
    if classes < mode.min_classes() {
        return Err(TaskError::InsufficientClasses {
            mode: mode.name(),
            needed: mode.min_classes(),
            available: classes,
        });
    }
    let pool = all_tasks(classes, mode);
    if count > pool.len() {
        return Err(TaskError::NotEnoughTasks {
            requested: count,
            available: pool.len(),
        });
    }
    let mut tasks: Vec<Task> = pool.choose_multiple(rng, count).copied().collect();
    // Orientation of a class pair is part of the task: flip half of them.
    for t in &mut tasks {
        if let TaskKind::Pair { negative, positive } = t.kind {
            if rng.random_bool(0.5) {
                t.kind = TaskKind::Pair {
                    negative: positive,
                    positive: negative,
                };
            }
        }
    }
    Ok(tasks)
}

/// Draws the class for one in-task sample together with its binary label.
fn draw_class<R: Rng + ?Sized>(kind: TaskKind, classes: usize, rng: &mut R) -> (usize, usize) {
    match kind {
        TaskKind::Pair { negative, positive } => {
            if rng.random_bool(0.5) {
                (positive, 1)
            } else {
                (negative, 0)
            }
        }
        TaskKind::OneVsRest { target } => {
            if rng.random_bool(0.5) {
                (target, 1)
            } else {
                let k = rng.random_range(0..classes - 1);
                (if k >= target { k + 1 } else { k }, 0)
            }
        }
    }
}

/// A source of tasks and in-task data.
pub trait TaskEnvironment: Sync {
    fn feature_dim(&self) -> usize;

    /// Number of labels a task's predictor must output (always binary here).
    fn num_labels(&self) -> usize {
        2
    }

    fn mode(&self) -> TaskMode;

    /// Short description recorded in run metadata.
    fn describe(&self) -> String;

    /// Draws `count` distinct tasks.
    fn sample_tasks(&self, count: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Task>, TaskError>;

    /// Draws `per_task` i.i.d. samples for every task. Finite environments
    /// never hand out the same underlying sample twice within one call.
    fn draw_task_data(
        &self,
        tasks: &[Task],
        per_task: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<Vec<LabeledExample>>, TaskError>;
}

/// Isotropic Gaussian classes centred on vertices of `{-1, +1}^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnv {
    pub dim: usize,
    pub num_classes: usize,
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub seed: u64,
    pub mode: TaskMode,
}

pub const DEFAULT_STD: f64 = 0.25;

/// Class `k` sits on the vertex given by the `k`-th Gray code.
pub fn make_gaussian_env(num_classes: usize, dim: usize, std: f64, seed: u64) -> Result<GaussianEnv, TaskError> {
    let vertices: u128 = if dim >= 127 { u128::MAX } else { 1u128 << dim };
    if num_classes as u128 > vertices {
        return Err(TaskError::TooManyClasses {
            classes: num_classes,
            dim,
            vertices,
        });
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(TaskError::InvalidStd(std));
    }
    let centers = (0..num_classes)
        .map(|k| {
            let gray = (k ^ (k >> 1)) as u128;
            (0..dim)
                .map(|bit| if (gray >> bit) & 1 == 1 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    Ok(GaussianEnv {
        dim,
        num_classes,
        centers,
        std,
        seed,
        mode: TaskMode::ClassPair,
    })
}

impl GaussianEnv {
    pub fn with_mode(mut self, mode: TaskMode) -> Self {
        self.mode = mode;
        self
    }

    /// One draw from class `class`.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.std).expect("validated std");
        self.centers[class]
            .iter()
            .map(|c| c + noise.sample(rng))
            .collect()
    }

    pub fn sample_example<R: Rng + ?Sized>(&self, task: &Task, rng: &mut R) -> LabeledExample {
        let (class, label) = draw_class(task.kind, self.num_classes, rng);
        LabeledExample {
            features: self.sample_class(class, rng),
            label,
        }
    }
}

/// Draws `count` distinct tasks from `env` in the given mode.
pub fn sample_tasks<R: Rng + ?Sized>(
    env: &GaussianEnv,
    count: usize,
    mode: TaskMode,
    rng: &mut R,
) -> Result<Vec<Task>, TaskError> {
    draw_distinct_tasks(env.num_classes, mode, count, rng)
}

impl TaskEnvironment for GaussianEnv {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> TaskMode {
        self.mode
    }

    fn describe(&self) -> String {
        format!(
            "gaussian(dim={}, classes={}, std={}, mode={})",
            self.dim,
            self.num_classes,
            self.std,
            self.mode.name()
        )
    }

    fn sample_tasks(&self, count: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Task>, TaskError> {
        draw_distinct_tasks(self.num_classes, self.mode, count, rng)
    }

    fn draw_task_data(
        &self,
        tasks: &[Task],
        per_task: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<Vec<LabeledExample>>, TaskError> {
        Ok(tasks
            .iter()
            .map(|t| (0..per_task).map(|_| self.sample_example(t, rng)).collect())
            .collect())
    }
}

/// Tasks carved out of a labelled dataset, one class (or class pair) per task.
#[derive(Debug, Clone)]
pub struct FiniteEnv {
    dim: usize,
    /// Sample features grouped by class.
    by_class: Vec<Vec<Vec<f64>>>,
    mode: TaskMode,
    centered: bool,
}

impl FiniteEnv {
    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.by_class[class].len()
    }

    pub fn possible_tasks(&self) -> usize {
        all_tasks(self.num_classes(), self.mode).len()
    }
}

impl TaskEnvironment for FiniteEnv {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> TaskMode {
        self.mode
    }

    fn describe(&self) -> String {
        format!(
            "dataset(dim={}, classes={}, mode={}, centered={})",
            self.dim,
            self.num_classes(),
            self.mode.name(),
            self.centered
        )
    }

    fn sample_tasks(&self, count: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Task>, TaskError> {
        draw_distinct_tasks(self.num_classes(), self.mode, count, rng)
    }

    fn draw_task_data(
        &self,
        tasks: &[Task],
        per_task: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<Vec<LabeledExample>>, TaskError> {
        for t in tasks {
            for c in t.classes() {
                if self.by_class[c].len() < per_task {
                    return Err(TaskError::ClassCapacity {
                        class: c,
                        requested: per_task,
                        available: self.by_class[c].len(),
                    });
                }
            }
        }
        // One shuffled pool per class, consumed front to back: no reuse.
        let mut order: Vec<Vec<usize>> = self
            .by_class
            .iter()
            .map(|items| {
                let mut idx: Vec<usize> = (0..items.len()).collect();
                idx.shuffle(rng);
                idx
            })
            .collect();
        let mut out = Vec::with_capacity(tasks.len());
        for t in tasks {
            let mut samples = Vec::with_capacity(per_task);
            for _ in 0..per_task {
                let (class, label) = draw_class(t.kind, self.num_classes(), rng);
                let idx = order[class].pop().ok_or(TaskError::ClassCapacity {
                    class,
                    requested: per_task,
                    available: self.by_class[class].len(),
                })?;
                samples.push(LabeledExample {
                    features: self.by_class[class][idx].clone(),
                    label,
                });
            }
            out.push(samples);
        }
        Ok(out)
    }
}

/// Builds a finite-data environment from image and label tensors. Pixels are
/// rescaled to `[0, 1]`; with `center` the global pixel mean is subtracted.
pub fn class_tasks_from_dataset(
    images: &IdxTensor,
    labels: &IdxTensor,
    mode: TaskMode,
    center: bool,
) -> Result<FiniteEnv, TaskError> {
    let IdxTensor::Images {
        count,
        rows,
        cols,
        data,
    } = images
    else {
        return Err(TaskError::WrongTensorKind { expected: "image" });
    };
    let IdxTensor::Labels(label_data) = labels else {
        return Err(TaskError::WrongTensorKind { expected: "label" });
    };
    if *count != label_data.len() {
        return Err(TaskError::LengthMismatch {
            images: *count,
            labels: label_data.len(),
        });
    }
    let dim = rows * cols;
    let mean = if center && !data.is_empty() {
        data.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / data.len() as f64
    } else {
        0.0
    };
    let classes = label_data.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); classes];
    for (img, &label) in data.chunks(dim.max(1)).zip(label_data) {
        by_class[label as usize].push(img.iter().map(|&b| b as f64 / 255.0 - mean).collect());
    }
    // Drop label values that never occur so every class index is populated.
    by_class.retain(|c: &Vec<Vec<f64>>| !c.is_empty());
    if by_class.len() < mode.min_classes() {
        return Err(TaskError::InsufficientClasses {
            mode: mode.name(),
            needed: mode.min_classes(),
            available: by_class.len(),
        });
    }
    Ok(FiniteEnv {
        dim,
        by_class,
        mode,
        centered: center,
    })
}

/// Errors from reading IDX streams. Each malformation has its own variant.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("unsupported IDX magic 0x{0:08x}")]
    WrongMagic(u32),

    #[error("IDX stream truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("IDX dimensions overflow the addressable size")]
    DimensionOverflow,

    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Unsigned-byte IDX payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxTensor {
    /// `count x rows x cols`, row-major.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        data: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxTensor {
    /// Pixel at `(item, row, col)` for image tensors.
    pub fn pixel(&self, item: usize, row: usize, col: usize) -> Option<u8> {
        match self {
            IdxTensor::Images {
                count,
                rows,
                cols,
                data,
            } if item < *count && row < *rows && col < *cols => {
                Some(data[(item * rows + row) * cols + col])
            }
            _ => None,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let chunk = bytes.get(offset..offset + 4).ok_or(IdxError::Truncated {
        needed: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
}

/// Parses a big-endian IDX stream of unsigned bytes (images or labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => return Err(IdxError::WrongMagic(other)),
    };
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * k)? as usize);
    }
    let header = 4 + 4 * ndims;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(header))
        .ok_or(IdxError::DimensionOverflow)?
        - header;
    let needed = header + payload;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let data = bytes[header..needed].to_vec();
    Ok(match ndims {
        3 => IdxTensor::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            data,
        },
        _ => IdxTensor::Labels(data),
    })
}

/// Reads and parses an IDX file.
pub fn load_idx(path: &Path) -> Result<IdxTensor, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx(&bytes)
}
