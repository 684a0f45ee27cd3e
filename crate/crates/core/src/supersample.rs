//! The meta-supersample: `2n` tasks x `2m` samples, carved into training and
//! test partitions by `n + m` membership bits.
//!
//! Cell `(i, a, j, b)` holds sample `j` slot `b` of task pair `i` slot `a`.
//! Membership bit `s_tilde[i]` picks the training task of pair `i`, bit
//! `s[j]` picks the training sample of sample pair `j` (shared by all tasks).

use rand::Rng;
use thiserror::Error;

use crate::tasks::{LabeledExample, Task, TaskEnvironment, TaskError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupersampleError {
    #[error("task and sample pair counts must be positive (n={n}, m={m})")]
    EmptyShape { n: usize, m: usize },

    #[error("environment exhausted: {0}")]
    Capacity(#[from] TaskError),

    #[error("shape mismatch: supersample is {n}x{m}, masks are {mask_n}x{mask_m}")]
    ShapeMismatch {
        n: usize,
        m: usize,
        mask_n: usize,
        mask_m: usize,
    },

    #[error("adaptation failed on task pair {task_pair}: {reason}")]
    Adaptation { task_pair: usize, reason: String },

    #[error("loss {value} at cell ({i}, {j}) is outside [0, 1]")]
    InvalidLoss { i: usize, j: usize, value: f64 },
}

/// Coordinates of one supersample cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellRef {
    pub task_pair: usize,
    pub task_slot: u8,
    pub sample_pair: usize,
    pub sample_slot: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperSample {
    n: usize,
    m: usize,
    /// Flattened `[i][a][j][b]`.
    cells: Vec<LabeledExample>,
    /// Task `(i, a)` at index `2 i + a`.
    tasks: Vec<Task>,
}

impl SuperSample {
    /// Assembles a supersample from per-task sample lists laid out as
    /// `tasks[2 i + a]` with samples `[2 j + b]`.
    pub fn from_task_data(
        n: usize,
        m: usize,
        tasks: Vec<Task>,
        data: Vec<Vec<LabeledExample>>,
    ) -> Result<Self, SupersampleError> {
        if n == 0 || m == 0 {
            return Err(SupersampleError::EmptyShape { n, m });
        }
        assert_eq!(tasks.len(), 2 * n, "need 2n tasks");
        assert_eq!(data.len(), 2 * n, "need data for 2n tasks");
        let mut cells = Vec::with_capacity(4 * n * m);
        for samples in data {
            assert_eq!(samples.len(), 2 * m, "need 2m samples per task");
            cells.extend(samples);
        }
        Ok(Self { n, m, cells, tasks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, i: usize, a: u8) -> &Task {
        &self.tasks[2 * i + a as usize]
    }

    fn offset(&self, i: usize, a: u8, j: usize, b: u8) -> usize {
        ((2 * i + a as usize) * self.m + j) * 2 + b as usize
    }

    pub fn get(&self, i: usize, a: u8, j: usize, b: u8) -> &LabeledExample {
        &self.cells[self.offset(i, a, j, b)]
    }

    pub fn cell(&self, c: CellRef) -> &LabeledExample {
        self.get(c.task_pair, c.task_slot, c.sample_pair, c.sample_slot)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Clones the examples of a split, grouped per task pair.
    pub fn gather(&self, split: &Split) -> Vec<Vec<LabeledExample>> {
        split
            .cells
            .iter()
            .map(|row| row.iter().map(|&c| self.cell(c).clone()).collect())
            .collect()
    }
}

/// Draws `2n` distinct tasks and `2m` i.i.d. samples for each.
pub fn build_supersample<E, R>(env: &E, n: usize, m: usize, rng: &mut R) -> Result<SuperSample, SupersampleError>
where
    E: TaskEnvironment + ?Sized,
    R: Rng,
{
    if n == 0 || m == 0 {
        return Err(SupersampleError::EmptyShape { n, m });
    }
    let tasks = env.sample_tasks(2 * n, rng)?;
    let data = env.draw_task_data(&tasks, 2 * m, rng)?;
    SuperSample::from_task_data(n, m, tasks, data)
}

/// The `n + m` membership bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipVectors {
    pub s_tilde: Vec<u8>,
    pub s: Vec<u8>,
}

impl MembershipVectors {
    pub fn new(s_tilde: Vec<u8>, s: Vec<u8>) -> Self {
        assert!(
            s_tilde.iter().chain(&s).all(|&b| b <= 1),
            "membership bits must be 0 or 1"
        );
        Self { s_tilde, s }
    }

    pub fn n(&self) -> usize {
        self.s_tilde.len()
    }

    pub fn m(&self) -> usize {
        self.s.len()
    }

    pub fn s_tilde_bar(&self, i: usize) -> u8 {
        1 - self.s_tilde[i]
    }

    pub fn s_bar(&self, j: usize) -> u8 {
        1 - self.s[j]
    }

    /// `s_tilde[i] xor s[j]`.
    pub fn psi(&self, i: usize, j: usize) -> u8 {
        self.s_tilde[i] ^ self.s[j]
    }
}

/// Independent fair bits, drawn without looking at any data.
pub fn draw_memberships<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> MembershipVectors {
    let s_tilde = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    let s = (0..m).map(|_| rng.random_range(0..2u8)).collect();
    MembershipVectors { s_tilde, s }
}

/// Cells of one partition, grouped by task pair and ordered by sample pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub cells: Vec<Vec<CellRef>>,
}

impl Split {
    pub fn iter(&self) -> impl Iterator<Item = &CellRef> {
        self.cells.iter().flatten()
    }
}

/// The four disjoint partitions selected by a membership draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitions {
    pub meta_train: Split,
    pub meta_test: Split,
    /// Training samples of the held-out (meta-test) tasks.
    pub heldout_train: Split,
    /// Test samples of the meta-training tasks.
    pub train_task_test: Split,
}

fn check_shape(ss: &SuperSample, mv: &MembershipVectors) -> Result<(), SupersampleError> {
    if ss.n != mv.n() || ss.m != mv.m() {
        return Err(SupersampleError::ShapeMismatch {
            n: ss.n,
            m: ss.m,
            mask_n: mv.n(),
            mask_m: mv.m(),
        });
    }
    Ok(())
}

pub fn select_partitions(ss: &SuperSample, mv: &MembershipVectors) -> Result<Partitions, SupersampleError> {
    check_shape(ss, mv)?;
    let pick = |task_bar: bool, sample_bar: bool| Split {
        cells: (0..ss.n)
            .map(|i| {
                let a = mv.s_tilde[i] ^ task_bar as u8;
                (0..ss.m)
                    .map(|j| CellRef {
                        task_pair: i,
                        task_slot: a,
                        sample_pair: j,
                        sample_slot: mv.s[j] ^ sample_bar as u8,
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(Partitions {
        meta_train: pick(false, false),
        meta_test: pick(true, true),
        heldout_train: pick(true, false),
        train_task_test: pick(false, true),
    })
}

/// Losses of one cell `(i, j)` over all four slot combinations;
/// `lab` is the loss on sample `(i, a, j, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossQuad {
    pub l00: f64,
    pub l11: f64,
    pub l10: f64,
    pub l01: f64,
}

impl LossQuad {
    pub fn new(l00: f64, l11: f64, l10: f64, l01: f64) -> Self {
        Self { l00, l11, l10, l01 }
    }

    pub fn get(&self, task_slot: u8, sample_slot: u8) -> f64 {
        match (task_slot, sample_slot) {
            (0, 0) => self.l00,
            (1, 1) => self.l11,
            (1, 0) => self.l10,
            (0, 1) => self.l01,
            _ => panic!("slot index out of range"),
        }
    }

    pub fn set(&mut self, task_slot: u8, sample_slot: u8, value: f64) {
        let slot = match (task_slot, sample_slot) {
            (0, 0) => &mut self.l00,
            (1, 1) => &mut self.l11,
            (1, 0) => &mut self.l10,
            (0, 1) => &mut self.l01,
            _ => panic!("slot index out of range"),
        };
        *slot = value;
    }

    pub fn values(&self) -> [f64; 4] {
        [self.l00, self.l11, self.l10, self.l01]
    }

    pub fn is_binary(&self) -> bool {
        self.values().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// The Psi-selected loss pair of a cell and its difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiPair {
    pub plus: f64,
    pub minus: f64,
    pub delta: f64,
}

/// With `psi = s_tilde_i xor s_j`, picks the two entries whose task slot xor
/// sample slot equals `psi`: `plus = l[1 ^ psi][1]`, `minus = l[psi][0]`.
pub fn loss_pair_delta(quad: &LossQuad, s_tilde_i: u8, s_j: u8) -> PsiPair {
    let psi = s_tilde_i ^ s_j;
    let plus = quad.get(1 ^ psi, 1);
    let minus = quad.get(psi, 0);
    PsiPair {
        plus,
        minus,
        delta: plus - minus,
    }
}

/// Losses of one run over the whole supersample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub run_id: usize,
    pub t1_index: usize,
    pub t2_index: usize,
    pub n: usize,
    pub m: usize,
    /// Row-major `n x m`.
    pub quads: Vec<LossQuad>,
    pub masks: MembershipVectors,
}

impl LossTable {
    pub fn quad(&self, i: usize, j: usize) -> &LossQuad {
        &self.quads[i * self.m + j]
    }

    pub fn pair(&self, i: usize, j: usize) -> PsiPair {
        loss_pair_delta(self.quad(i, j), self.masks.s_tilde[i], self.masks.s[j])
    }

    pub fn train_loss(&self, i: usize, j: usize) -> f64 {
        self.quad(i, j).get(self.masks.s_tilde[i], self.masks.s[j])
    }

    pub fn test_loss(&self, i: usize, j: usize) -> f64 {
        self.quad(i, j)
            .get(self.masks.s_tilde_bar(i), self.masks.s_bar(j))
    }

    fn mean_over_cells(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            for j in 0..self.m {
                total += f(i, j);
            }
        }
        total / (self.n * self.m) as f64
    }

    /// Empirical meta-risk of this run.
    pub fn empirical_risk(&self) -> f64 {
        self.mean_over_cells(|i, j| self.train_loss(i, j))
    }

    /// Meta-test risk of this run.
    pub fn test_risk(&self) -> f64 {
        self.mean_over_cells(|i, j| self.test_loss(i, j))
    }

    /// Mean of `(-1)^{s_j} delta` over cells: this run's gap estimate.
    pub fn gap(&self) -> f64 {
        self.mean_over_cells(|i, j| sign(self.masks.s[j]) * self.pair(i, j).delta)
    }

    pub fn is_binary(&self) -> bool {
        self.quads.iter().all(LossQuad::is_binary)
    }
}

/// `(-1)^bit`.
pub fn sign(bit: u8) -> f64 {
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Fills a loss table for a trained meta-state.
///
/// For each task pair, `adapt` is called twice from the meta-state: once on
/// the meta-training task's training samples and once on the held-out task's
/// training samples. Each adapted model is scored on all `2m` samples of its
/// own task. `adapt` receives the task-pair index and the task slot so callers
/// can derive independent noise streams.
pub fn fill_loss_table<P, A, L, E>(
    meta: &P,
    mut adapt: A,
    ss: &SuperSample,
    mv: &MembershipVectors,
    mut loss: L,
    ids: (usize, usize, usize),
) -> Result<LossTable, SupersampleError>
where
    A: FnMut(&P, &[LabeledExample], usize, u8) -> Result<P, E>,
    L: FnMut(&P, &LabeledExample) -> f64,
    E: std::fmt::Display,
{
    let parts = select_partitions(ss, mv)?;
    let (n, m) = (ss.n, ss.m);
    let mut quads = vec![LossQuad::default(); n * m];
    let sources = [
        (&parts.meta_train, mv.s_tilde.clone()),
        (&parts.heldout_train, (0..n).map(|i| mv.s_tilde_bar(i)).collect()),
    ];
    for (split, slots) in sources {
        let data = ss.gather(split);
        for (i, train) in data.iter().enumerate() {
            let a = slots[i];
            let w = adapt(meta, train, i, a).map_err(|e| SupersampleError::Adaptation {
                task_pair: i,
                reason: e.to_string(),
            })?;
            for j in 0..m {
                for b in 0..2u8 {
                    let value = loss(&w, ss.get(i, a, j, b));
                    if !(0.0..=1.0).contains(&value) {
                        return Err(SupersampleError::InvalidLoss { i, j, value });
                    }
                    quads[i * m + j].set(a, b, value);
                }
            }
        }
    }
    Ok(LossTable {
        run_id: ids.0,
        t1_index: ids.1,
        t2_index: ids.2,
        n,
        m,
        quads,
        masks: mv.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_gaussian_env, TaskKind, DEFAULT_STD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    /// A supersample whose features encode their own coordinates.
    fn labelled_grid(n: usize, m: usize) -> SuperSample {
        let tasks = (0..2 * n)
            .map(|id| Task {
                id,
                kind: TaskKind::Pair {
                    negative: 0,
                    positive: 1,
                },
            })
            .collect();
        let data = (0..2 * n)
            .map(|t| {
                (0..2 * m)
                    .map(|s| LabeledExample {
                        features: vec![(t / 2) as f64, (t % 2) as f64, (s / 2) as f64, (s % 2) as f64],
                        label: 0,
                    })
                    .collect()
            })
            .collect();
        SuperSample::from_task_data(n, m, tasks, data).unwrap()
    }

    fn coords(ss: &SuperSample, split: &Split) -> BTreeSet<(usize, u8, usize, u8)> {
        split
            .iter()
            .map(|c| {
                let f = &ss.cell(*c).features;
                (f[0] as usize, f[1] as u8, f[2] as usize, f[3] as u8)
            })
            .collect()
    }

    #[test]
    fn supersample_layout_shape() {
        let env = make_gaussian_env(4, 2, DEFAULT_STD, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ss = build_supersample(&env, 2, 3, &mut rng).unwrap();
        assert_eq!(ss.tasks().len(), 4);
        assert_eq!(ss.len(), 24);
        let small = build_supersample(&env, 1, 1, &mut rng).unwrap();
        assert_eq!((small.tasks().len(), small.len()), (2, 4));
    }

    #[test]
    fn same_seed_same_supersample() {
        let env = make_gaussian_env(8, 3, DEFAULT_STD, 0).unwrap();
        let a = build_supersample(&env, 2, 4, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let b = build_supersample(&env, 2, 4, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhausted_environment_is_a_capacity_error() {
        let env = make_gaussian_env(3, 2, DEFAULT_STD, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_supersample(&env, 2, 1, &mut rng),
            Err(SupersampleError::Capacity(TaskError::NotEnoughTasks { .. }))
        ));
        assert!(matches!(
            build_supersample(&env, 0, 1, &mut rng),
            Err(SupersampleError::EmptyShape { .. })
        ));
    }

    #[test]
    fn membership_bits_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mut ones = [0usize; 5];
        for _ in 0..draws {
            let mv = draw_memberships(2, 3, &mut rng);
            assert_eq!((mv.n(), mv.m()), (2, 3));
            for (k, &b) in mv.s_tilde.iter().chain(&mv.s).enumerate() {
                assert!(b <= 1);
                ones[k] += b as usize;
            }
            for j in 0..3 {
                assert_eq!(mv.s_bar(j), 1 - mv.s[j]);
            }
        }
        for c in ones {
            assert!((c as f64 / draws as f64 - 0.5).abs() <= 0.015);
        }
    }

    #[test]
    fn meta_train_worked_example() {
        let ss = labelled_grid(2, 3);
        let mv = MembershipVectors::new(vec![0, 1], vec![0, 1, 1]);
        let p = select_partitions(&ss, &mv).unwrap();
        // One-based cells Z^{i,a}_{j,b} as zero-based (i, a, j, b) tuples.
        let expected: BTreeSet<_> = [
            (0, 0, 0, 0),
            (0, 0, 1, 1),
            (0, 0, 2, 1),
            (1, 1, 0, 0),
            (1, 1, 1, 1),
            (1, 1, 2, 1),
        ]
        .into_iter()
        .collect();
        assert_eq!(coords(&ss, &p.meta_train), expected);
    }

    #[test]
    fn all_zero_masks() {
        let ss = labelled_grid(2, 2);
        let p = select_partitions(&ss, &MembershipVectors::new(vec![0, 0], vec![0, 0])).unwrap();
        assert!(p.meta_train.iter().all(|c| c.task_slot == 0 && c.sample_slot == 0));
        assert!(p.meta_test.iter().all(|c| c.task_slot == 1 && c.sample_slot == 1));
        assert!(p.heldout_train.iter().all(|c| c.task_slot == 1 && c.sample_slot == 0));
        assert!(p.train_task_test.iter().all(|c| c.task_slot == 0 && c.sample_slot == 1));
    }

    #[test]
    fn partitions_cover_all_cells_for_every_mask() {
        let (n, m) = (2, 2);
        let ss = labelled_grid(n, m);
        for bits in 0u32..(1 << (n + m)) {
            let s_tilde = (0..n).map(|k| ((bits >> k) & 1) as u8).collect();
            let s = (0..m).map(|k| ((bits >> (n + k)) & 1) as u8).collect();
            let p = select_partitions(&ss, &MembershipVectors::new(s_tilde, s)).unwrap();
            let sets = [&p.meta_train, &p.meta_test, &p.heldout_train, &p.train_task_test]
                .map(|split| coords(&ss, split));
            let mut union = BTreeSet::new();
            for s in &sets {
                assert_eq!(s.len(), n * m);
                union.extend(s.iter().copied());
            }
            assert_eq!(union.len(), 4 * n * m);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ss = labelled_grid(2, 2);
        let mv = MembershipVectors::new(vec![0], vec![0, 1]);
        assert!(matches!(
            select_partitions(&ss, &mv),
            Err(SupersampleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn psi_pair_cases() {
        let q = LossQuad::new(0.0, 1.0, 1.0, 0.0);
        assert_eq!(
            loss_pair_delta(&q, 0, 0),
            PsiPair {
                plus: 1.0,
                minus: 0.0,
                delta: 1.0
            }
        );
        assert_eq!(
            loss_pair_delta(&q, 0, 1),
            PsiPair {
                plus: 0.0,
                minus: 1.0,
                delta: -1.0
            }
        );
    }

    #[test]
    fn gap_identity_and_xor_consistency_for_all_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = LossQuad::new(rng.random(), rng.random(), rng.random(), rng.random());
            for st in 0..2u8 {
                for s in 0..2u8 {
                    let p = loss_pair_delta(&q, st, s);
                    let test = q.get(1 - st, 1 - s);
                    let train = q.get(st, s);
                    assert_eq!(test - train, sign(s) * p.delta);
                    let psi = st ^ s;
                    // Both selected entries sit on the psi diagonal.
                    assert_eq!(q.get(1 ^ psi, 1), p.plus);
                    assert_eq!(q.get(psi, 0), p.minus);
                    assert_eq!((1 ^ psi) ^ 1, psi);
                }
            }
        }
    }

    fn table_with_constant_model(correct: bool) -> LossTable {
        let env = make_gaussian_env(4, 2, DEFAULT_STD, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ss = build_supersample(&env, 2, 3, &mut rng).unwrap();
        let mv = draw_memberships(2, 3, &mut rng);
        fill_loss_table(
            &(),
            |_, _, _, _| Ok::<(), String>(()),
            &ss,
            &mv,
            |_, _| if correct { 0.0 } else { 1.0 },
            (0, 0, 0),
        )
        .unwrap()
    }

    #[test]
    fn oracle_and_constant_wrong_models() {
        let good = table_with_constant_model(true);
        assert!(good.quads.iter().all(|q| q.values() == [0.0; 4]));
        let bad = table_with_constant_model(false);
        assert!(bad.quads.iter().all(|q| q.values() == [1.0; 4]));
        assert_eq!(bad.empirical_risk(), 1.0);
        assert_eq!(bad.gap(), 0.0);
    }

    #[test]
    fn fill_uses_the_right_adapted_model_per_slot() {
        let ss = labelled_grid(2, 3);
        let mv = MembershipVectors::new(vec![1, 0], vec![0, 1, 0]);
        // The "model" is the (task pair, slot) it was adapted for; the loss
        // checks the example belongs to that task and was trained on the
        // right samples.
        let table = fill_loss_table(
            &(usize::MAX, u8::MAX),
            |_, train: &[LabeledExample], i, a| {
                for (j, ex) in train.iter().enumerate() {
                    assert_eq!(ex.features[0] as usize, i);
                    assert_eq!(ex.features[1] as u8, a);
                    assert_eq!(ex.features[3] as u8, mv.s[j]);
                }
                Ok::<_, String>((i, a))
            },
            &ss,
            &mv,
            |&(i, a), ex| {
                assert_eq!(ex.features[0] as usize, i);
                assert_eq!(ex.features[1] as u8, a);
                ex.features[3]
            },
            (4, 1, 2),
        )
        .unwrap();
        assert_eq!((table.run_id, table.t1_index, table.t2_index), (4, 1, 2));
        for i in 0..2 {
            for j in 0..3 {
                let q = table.quad(i, j);
                assert_eq!(q.values(), [0.0, 1.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn adaptation_failure_is_reported() {
        let ss = labelled_grid(1, 1);
        let mv = MembershipVectors::new(vec![0], vec![0]);
        let err = fill_loss_table(
            &(),
            |_, _, _, _| Err::<(), _>("diverged"),
            &ss,
            &mv,
            |_, _| 0.0,
            (0, 0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, SupersampleError::Adaptation { task_pair: 0, .. }));
    }
}
