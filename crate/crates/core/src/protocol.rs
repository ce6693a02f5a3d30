//! Task streams, the incremental run loop, metrics and multi-seed aggregation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{train_base, BranchMask, DualBranchModel, ModelConfig, TrainLog};
use crate::nn::SgdConfig;
use crate::prototype::{PrototypeConfig, PrototypeState};
use crate::rng::Rng;
use crate::tensor::Tensor;

// Sub-stream indices for `Rng::derive` so every consumer of a run seed gets
// an independent, stable stream.
const STREAM_ORDER: u64 = 1;
const STREAM_SHOTS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_PROJECTION: u64 = 5;
const STREAM_LAMBDA: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Increments of `n` new classes, `k` shots each.
    NWayKShot,
    /// One increment holding every non-base class, `k` shots each.
    OneStepKShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n: usize,
    pub k: usize,
    pub base_classes: usize,
    /// Classes used from the dataset; all of them when absent.
    pub total_classes: Option<usize>,
    /// Explicit class order; a seeded permutation when absent.
    pub class_order: Option<Vec<usize>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::NWayKShot,
            n: 1,
            k: 5,
            base_classes: 4,
            total_classes: None,
            class_order: None,
        }
    }
}

impl ScenarioConfig {
    pub fn name(&self) -> String {
        match self.kind {
            ScenarioKind::NWayKShot => format!("{}-way {}-shot", self.n, self.k),
            ScenarioKind::OneStepKShot => format!("1-step {}-shot", self.k),
        }
    }

    /// Class counts of every task, base first (omitted when `base_classes == 0`).
    pub fn task_sizes(&self, total: usize) -> Result<Vec<usize>> {
        if self.k == 0 {
            return Err(Error::Config("scenario.k must be positive".into()));
        }
        if self.base_classes > total {
            return Err(Error::Config(format!(
                "scenario: {} base classes but only {total} classes",
                self.base_classes
            )));
        }
        let rest = total - self.base_classes;
        let mut sizes = Vec::new();
        if self.base_classes > 0 {
            sizes.push(self.base_classes);
        }
        match self.kind {
            ScenarioKind::NWayKShot => {
                if self.n == 0 || rest % self.n != 0 {
                    return Err(Error::Config(format!(
                        "scenario: {rest} incremental classes do not split into {}-way tasks",
                        self.n
                    )));
                }
                sizes.extend(std::iter::repeat_n(self.n, rest / self.n));
            }
            ScenarioKind::OneStepKShot => {
                if rest > 0 {
                    sizes.push(rest);
                }
            }
        }
        if sizes.is_empty() {
            return Err(Error::Config("scenario has no tasks".into()));
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Base,
    Incremental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub kind: TaskKind,
    pub classes: Vec<usize>,
    /// Pool indices of this task's training samples.
    pub train: Vec<usize>,
    /// Pool indices of the test samples of every class seen up to this task.
    pub test: Vec<usize>,
}

/// A sequence of tasks over an owned pool of images.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub is_test: Vec<bool>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    fn push(&mut self, image: Tensor, label: usize, test: bool) -> usize {
        self.images.push(image);
        self.labels.push(label);
        self.is_test.push(test);
        self.images.len() - 1
    }

    /// Recomputes every task's test pool from the classes seen so far.
    fn rebuild_test_pools(&mut self) {
        let mut seen = BTreeSet::new();
        for task in &mut self.tasks {
            seen.extend(task.classes.iter().copied());
            task.test = (0..self.labels.len())
                .filter(|&i| self.is_test[i] && seen.contains(&self.labels[i]))
                .collect();
        }
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Checks the structural guarantees of a stream: disjoint class lists,
    /// `k` shots per incremental class, no sample of a class before its task,
    /// strictly growing test pools.
    pub fn check_invariants(&self, k: Option<usize>) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("stream invariant: {msg}")));
        let mut seen = BTreeSet::new();
        let mut prev_test: Option<&Vec<usize>> = None;
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return fail(format!("class {c} introduced twice"));
                }
            }
            for &i in &task.train {
                if !task.classes.contains(&self.labels[i]) || self.is_test[i] {
                    return fail(format!("task {} trains on sample {i} of class {}", task.index, self.labels[i]));
                }
            }
            if let (TaskKind::Incremental, Some(k)) = (task.kind, k) {
                if task.train.len() != k * task.classes.len() {
                    return fail(format!("task {} has {} samples, expected {}", task.index, task.train.len(), k * task.classes.len()));
                }
            }
            if task.test.iter().any(|&i| !seen.contains(&self.labels[i]) || !self.is_test[i]) {
                return fail(format!("task {} tests on unseen classes", task.index));
            }
            if let Some(prev) = prev_test {
                let cur: BTreeSet<_> = task.test.iter().collect();
                if cur.len() <= prev.len() || !prev.iter().all(|i| cur.contains(i)) {
                    return fail(format!("test pool of task {} does not strictly grow", task.index));
                }
            }
            prev_test = Some(&task.test);
        }
        Ok(())
    }
}

/// Splits a dataset into a base task and few-shot increments.
pub fn build_stream(data: &Dataset, cfg: &ScenarioConfig, seed: u64) -> Result<TaskStream> {
    let root = Rng::new(seed);
    let total = cfg.total_classes.unwrap_or(data.num_classes);
    if total > data.num_classes {
        return Err(Error::Config(format!("scenario asks for {total} classes, dataset has {}", data.num_classes)));
    }
    let order = match &cfg.class_order {
        Some(order) => {
            let distinct: BTreeSet<_> = order.iter().collect();
            if order.len() != total || distinct.len() != total || order.iter().any(|&c| c >= data.num_classes) {
                return Err(Error::Config(format!(
                    "class_order must list {total} distinct classes below {}",
                    data.num_classes
                )));
            }
            order.clone()
        }
        None => {
            let mut p = root.derive(STREAM_ORDER).permutation(data.num_classes);
            p.truncate(total);
            p
        }
    };
    let sizes = cfg.task_sizes(total)?;
    let mut shot_rng = root.derive(STREAM_SHOTS);
    let mut stream = TaskStream {
        images: Vec::new(),
        labels: Vec::new(),
        is_test: Vec::new(),
        tasks: Vec::new(),
    };
    let mut offset = 0;
    for (t, &size) in sizes.iter().enumerate() {
        let classes = order[offset..offset + size].to_vec();
        offset += size;
        let kind = if t == 0 && cfg.base_classes > 0 { TaskKind::Base } else { TaskKind::Incremental };
        let mut train = Vec::new();
        for &c in &classes {
            let mut idx = data.indices(c, Split::Train);
            if kind == TaskKind::Incremental {
                if idx.len() < cfg.k {
                    return Err(Error::Data(format!(
                        "class {c} has {} training samples, {}-shot needs {}",
                        idx.len(),
                        cfg.k,
                        cfg.k
                    )));
                }
                shot_rng.shuffle(&mut idx);
                idx.truncate(cfg.k);
            } else if idx.is_empty() {
                return Err(Error::Data(format!("base class {c} has no training samples")));
            }
            for i in idx {
                train.push(stream.push(data.samples[i].image.clone(), c, false));
            }
        }
        for &c in &classes {
            let test = data.indices(c, Split::Test);
            if test.is_empty() {
                return Err(Error::Data(format!("class {c} has no test samples")));
            }
            for i in test {
                stream.push(data.samples[i].image.clone(), c, true);
            }
        }
        stream.tasks.push(Task {
            index: t,
            kind,
            classes,
            train,
            test: Vec::new(),
        });
    }
    stream.rebuild_test_pools();
    Ok(stream)
}

/// Concatenates streams from different sources into one.
///
/// The first source supplies the base task; later sources must be
/// incremental-only. Class ids must not overlap between sources and are
/// renumbered `0..K` in order of introduction. A single stream is returned
/// unchanged.
pub fn compose_cross_domain(sources: Vec<TaskStream>) -> Result<TaskStream> {
    if sources.is_empty() {
        return Err(Error::Config("cross-domain composition needs at least one stream".into()));
    }
    if sources.len() == 1 {
        return Ok(sources.into_iter().next().expect("one source"));
    }
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (s, src) in sources.iter().enumerate() {
        if s > 0 && src.tasks.first().is_some_and(|t| t.kind == TaskKind::Base) {
            return Err(Error::Config(format!("source {s} has a base task; only the first source may")));
        }
        for c in src.all_classes() {
            if let Some(prev) = owner.insert(c, s) {
                if prev != s {
                    return Err(Error::Data(format!("class id {c} appears in sources {prev} and {s}")));
                }
            }
        }
    }
    let mut remap: HashMap<usize, usize> = HashMap::new();
    for src in &sources {
        for c in src.all_classes() {
            let next = remap.len();
            remap.entry(c).or_insert(next);
        }
    }
    let mut out = TaskStream {
        images: Vec::new(),
        labels: Vec::new(),
        is_test: Vec::new(),
        tasks: Vec::new(),
    };
    for src in sources {
        let base = out.images.len();
        for task in src.tasks {
            out.tasks.push(Task {
                index: out.tasks.len(),
                kind: task.kind,
                classes: task.classes.iter().map(|c| remap[c]).collect(),
                train: task.train.iter().map(|i| i + base).collect(),
                test: Vec::new(),
            });
        }
        for ((img, label), test) in src.images.into_iter().zip(src.labels).zip(src.is_test) {
            out.push(img, remap[&label], test);
        }
    }
    out.rebuild_test_pools();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics

/// Mean of the per-task accuracies, base task included.
pub fn avg_incremental_accuracy(acc: &[f64]) -> f64 {
    acc.iter().sum::<f64>() / acc.len() as f64
}

/// First-task accuracy minus last-task accuracy.
pub fn performance_drop(acc: &[f64]) -> f64 {
    acc[0] - acc[acc.len() - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    /// Accuracy after each task on the test samples of all classes seen so far, in `[0, 1]`.
    pub per_task_accuracy: Vec<f64>,
    pub avg_inc_accuracy: f64,
    pub performance_drop: f64,
    pub lambda: f64,
    pub config_hash: String,
}

impl RunReport {
    pub fn new(scenario: &str, variant: &str, seed: u64, acc: Vec<f64>, lambda: f64, config_hash: &str) -> Self {
        RunReport {
            scenario: scenario.to_string(),
            variant: variant.to_string(),
            seed,
            avg_inc_accuracy: avg_incremental_accuracy(&acc),
            performance_drop: performance_drop(&acc),
            per_task_accuracy: acc,
            lambda,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Per-variant mean over seeds, with the per-seed reports kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean_per_task_accuracy: Vec<f64>,
    pub mean_avg_inc_accuracy: f64,
    pub mean_performance_drop: f64,
    pub runs: Vec<RunReport>,
}

pub fn aggregate(runs: Vec<RunReport>) -> Result<Aggregate> {
    let first = runs.first().ok_or_else(|| Error::Config("aggregate over zero runs".into()))?;
    let tasks = first.per_task_accuracy.len();
    if runs.iter().any(|r| r.per_task_accuracy.len() != tasks || r.variant != first.variant) {
        return Err(Error::Data("aggregated runs disagree on variant or task count".into()));
    }
    let n = runs.len() as f64;
    let mean_per_task_accuracy =
        (0..tasks).map(|t| runs.iter().map(|r| r.per_task_accuracy[t]).sum::<f64>() / n).collect();
    Ok(Aggregate {
        variant: first.variant.clone(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_per_task_accuracy,
        mean_avg_inc_accuracy: runs.iter().map(|r| r.avg_inc_accuracy).sum::<f64>() / n,
        mean_performance_drop: runs.iter().map(|r| r.performance_drop).sum::<f64>() / n,
        runs,
    })
}

/// Runs `run` for every seed (in parallel) and aggregates each variant.
/// `run` returns one report per variant, in a fixed variant order.
pub fn repeat_with_seeds<F>(seeds: &[u64], run: F) -> Result<Vec<Aggregate>>
where
    F: Fn(u64) -> Result<Vec<RunReport>> + Sync,
{
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let per_seed: Vec<Vec<RunReport>> = seeds
        .par_iter()
        .map(|&seed| run(seed).map_err(|e| Error::Seed { seed, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let variants = per_seed[0].len();
    (0..variants)
        .map(|v| aggregate(per_seed.iter().map(|runs| runs[v].clone()).collect()))
        .collect()
}

// ---------------------------------------------------------------------------
// Run loop

#[derive(Debug, Clone, Copy)]
pub struct RunSettings<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub sgd: &'a SgdConfig,
    pub prototype: &'a PrototypeConfig,
    pub scenario: &'a str,
    pub config_hash: &'a str,
}

pub fn variant_name(mask: BranchMask) -> &'static str {
    match mask {
        BranchMask::Both => "dual_branch",
        BranchMask::SpatialOnly => "spatial_only",
        BranchMask::SpectralOnly => "spectral_only",
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One report per requested mask, in request order.
    pub reports: Vec<RunReport>,
    pub train_log: TrainLog,
    pub model: DualBranchModel,
    /// Classifier state after the last task, per mask.
    pub classifiers: Vec<PrototypeState>,
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Prototype pipeline over precomputed features: lambda on the base task,
/// then ingest/solve/evaluate after every task. Returns `(A_t, lambda, state)`.
pub fn evaluate_stream(
    stream: &TaskStream,
    features: &Tensor,
    cfg: &PrototypeConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, PrototypeState)> {
    let root = Rng::new(seed);
    let base = stream
        .tasks
        .first()
        .filter(|t| t.kind == TaskKind::Base)
        .ok_or_else(|| Error::Config("stream has no base task".into()))?;
    let mut state = PrototypeState::init_projection(root.derive(STREAM_PROJECTION).next_u64(), features.cols(), cfg)?;
    for &c in &base.classes {
        state.register(c);
    }
    let labels_of = |idx: &[usize]| idx.iter().map(|&i| stream.labels[i]).collect::<Vec<_>>();
    let h_base = state.embed(&features.select_rows(&base.train)?)?;
    let base_labels = labels_of(&base.train);
    let lambda = state.select_lambda(&h_base, &base_labels, root.derive(STREAM_LAMBDA).next_u64())?;
    let mut acc = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        if t == 0 {
            state.ingest(&h_base, &base_labels)?;
        } else {
            for &c in &task.classes {
                state.register(c);
            }
            let h = state.embed(&features.select_rows(&task.train)?)?;
            state.ingest(&h, &labels_of(&task.train))?;
        }
        let p = state.compute_prototypes()?;
        let h_test = state.embed(&features.select_rows(&task.test)?)?;
        let pred = state.predict(&p, &h_test)?;
        acc.push(accuracy(&pred, &labels_of(&task.test)));
    }
    Ok((acc, lambda, state))
}

/// Base training, freezing, feature extraction and the incremental classifier,
/// evaluated once per branch mask on the same trained network.
pub fn run_fscil(settings: &RunSettings, stream: &TaskStream, seed: u64, masks: &[BranchMask]) -> Result<RunOutcome> {
    let root = Rng::new(seed);
    let base = stream
        .tasks
        .first()
        .filter(|t| t.kind == TaskKind::Base)
        .ok_or_else(|| Error::Config("stream has no base task".into()))?;
    let local: HashMap<usize, usize> = base.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let images: Vec<Tensor> = base.train.iter().map(|&i| stream.images[i].clone()).collect();
    let labels: Vec<usize> = base.train.iter().map(|&i| local[&stream.labels[i]]).collect();

    let mut model = DualBranchModel::new(settings.model, root.derive(STREAM_INIT).next_u64())?;
    let train_log = train_base(
        &mut model,
        &images,
        &labels,
        settings.loss,
        settings.sgd,
        root.derive(STREAM_TRAIN).next_u64(),
    )?;
    model.freeze_all();

    let mut reports = Vec::with_capacity(masks.len());
    let mut classifiers = Vec::with_capacity(masks.len());
    for &mask in masks {
        let features = model.extract(&stream.images, mask)?;
        if !features.is_finite() {
            return Err(Error::Numeric("non-finite features".into()));
        }
        let (acc, lambda, state) = evaluate_stream(stream, &features, settings.prototype, seed)?;
        reports.push(RunReport::new(
            settings.scenario,
            variant_name(mask),
            seed,
            acc,
            lambda,
            settings.config_hash,
        ));
        classifiers.push(state);
    }
    Ok(RunOutcome {
        reports,
        train_log,
        model,
        classifiers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    /// Dataset whose images are constant fields, `per_class` train and 2 test per class.
    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        let mut samples = Vec::new();
        for c in 0..classes {
            for i in 0..per_class + 2 {
                samples.push(Sample {
                    image: Tensor::full(&[1, 4, 4], c as f64 + i as f64 / 100.0),
                    class: c,
                    split: if i < per_class { Split::Train } else { Split::Test },
                });
            }
        }
        Dataset { size: 4, num_classes: classes, samples }
    }

    #[test]
    fn scenario_task_counts() {
        let one_way = ScenarioConfig::default();
        assert_eq!(one_way.task_sizes(10).unwrap(), vec![4, 1, 1, 1, 1, 1, 1]);
        let two_way = ScenarioConfig { n: 2, ..ScenarioConfig::default() };
        assert_eq!(two_way.task_sizes(10).unwrap().len(), 4);
        let one_step = ScenarioConfig { kind: ScenarioKind::OneStepKShot, base_classes: 5, ..ScenarioConfig::default() };
        assert_eq!(one_step.task_sizes(10).unwrap(), vec![5, 5]);
        let bad = ScenarioConfig { n: 4, ..ScenarioConfig::default() };
        assert!(matches!(bad.task_sizes(10), Err(Error::Config(_))));
        assert_eq!(one_way.name(), "1-way 5-shot");
    }

    #[test]
    fn stream_sizes_and_invariants() {
        let data = toy_dataset(10, 8);
        let stream = build_stream(&data, &ScenarioConfig::default(), 3).unwrap();
        let sizes: Vec<usize> = stream.tasks.iter().map(|t| t.train.len()).collect();
        assert_eq!(sizes, vec![32, 5, 5, 5, 5, 5, 5]);
        stream.check_invariants(Some(5)).unwrap();
        assert_eq!(stream.tasks.last().unwrap().test.len(), 20);
        let again = build_stream(&data, &ScenarioConfig::default(), 3).unwrap();
        assert_eq!(stream, again);
        let other = build_stream(&data, &ScenarioConfig::default(), 4).unwrap();
        assert_ne!(stream.all_classes(), other.all_classes());
    }

    #[test]
    fn insufficient_shots_name_the_class() {
        let data = toy_dataset(6, 3);
        let cfg = ScenarioConfig { class_order: Some(vec![0, 1, 2, 3, 4, 5]), ..ScenarioConfig::default() };
        match build_stream(&data, &cfg, 1) {
            Err(Error::Data(msg)) => assert!(msg.contains("class 4"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn explicit_order_is_used() {
        let data = toy_dataset(6, 6);
        let order = vec![5, 4, 3, 2, 1, 0];
        let cfg = ScenarioConfig { class_order: Some(order.clone()), ..ScenarioConfig::default() };
        let stream = build_stream(&data, &cfg, 1).unwrap();
        assert_eq!(stream.all_classes(), order);
        let bad = ScenarioConfig { class_order: Some(vec![0, 0, 1, 2, 3, 4]), ..ScenarioConfig::default() };
        assert!(matches!(build_stream(&data, &bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn composition() {
        let data = toy_dataset(14, 6);
        let a_cfg = ScenarioConfig { n: 3, base_classes: 4, total_classes: Some(10), class_order: Some((0..10).collect()), ..ScenarioConfig::default() };
        let a = build_stream(&data, &a_cfg, 1).unwrap();
        let inc = |order: Vec<usize>| ScenarioConfig {
            n: 3,
            base_classes: 0,
            total_classes: Some(3),
            class_order: Some(order),
            ..ScenarioConfig::default()
        };
        // Two incremental-only sources drawn from disjoint class ranges.
        let b = build_stream(&data, &inc(vec![10, 11, 12]), 2).unwrap();
        let c_data = toy_dataset(3, 6);
        let mut c = build_stream(&c_data, &inc(vec![0, 1, 2]), 3).unwrap();
        c.labels.iter_mut().for_each(|l| *l += 100);
        c.tasks.iter_mut().for_each(|t| t.classes.iter_mut().for_each(|x| *x += 100));

        let single = compose_cross_domain(vec![a.clone()]).unwrap();
        assert_eq!(single, a);

        let all = compose_cross_domain(vec![a.clone(), b.clone(), c.clone()]).unwrap();
        let sizes: Vec<usize> = all.tasks.iter().map(|t| t.classes.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3, 3, 3]);
        assert_eq!(all.all_classes(), (0..16).collect::<Vec<_>>());
        all.check_invariants(Some(5)).unwrap();

        assert!(matches!(compose_cross_domain(vec![a.clone(), b.clone(), b]), Err(Error::Data(_))));
        assert!(matches!(compose_cross_domain(vec![a.clone(), a]), Err(Error::Config(_))));
    }

    #[test]
    fn metric_identities() {
        let acc = vec![0.9454, 0.8021, 0.8410, 0.8508, 0.7898, 0.8193, 0.8360];
        let r = RunReport::new("s", "v", 0, acc.clone(), 1.0, "h");
        assert_eq!(r.performance_drop, acc[0] - acc[6]);
        assert_eq!(r.avg_inc_accuracy, acc.iter().sum::<f64>() / 7.0);
    }

    #[test]
    fn aggregation() {
        let r1 = RunReport::new("s", "v", 1, vec![0.8, 0.6], 1.0, "h");
        let r2 = RunReport::new("s", "v", 2, vec![1.0, 0.8], 1.0, "h");
        let single = aggregate(vec![r1.clone()]).unwrap();
        assert_eq!(single.mean_per_task_accuracy, r1.per_task_accuracy);
        assert_eq!(single.mean_avg_inc_accuracy, r1.avg_inc_accuracy);
        let agg = aggregate(vec![r1.clone(), r2.clone()]).unwrap();
        assert_eq!(agg.mean_per_task_accuracy, vec![(0.8 + 1.0) / 2.0, (0.6 + 0.8) / 2.0]);
        assert_eq!(agg.mean_avg_inc_accuracy, (r1.avg_inc_accuracy + r2.avg_inc_accuracy) / 2.0);
        let failing = repeat_with_seeds(&[1, 7], |s| {
            if s == 7 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok(vec![r1.clone()])
            }
        });
        assert!(matches!(failing, Err(Error::Seed { seed: 7, .. })));
    }

    #[test]
    fn evaluation_on_separable_features() {
        // Features are the class id one-hot plus noise; every task should be near perfect.
        let data = toy_dataset(10, 8);
        let stream = build_stream(&data, &ScenarioConfig::default(), 5).unwrap();
        let mut rng = Rng::new(6);
        let mut f = Tensor::zeros(&[stream.labels.len(), 10]);
        for (i, &l) in stream.labels.iter().enumerate() {
            for j in 0..10 {
                f.set(i, j, if j == l { 5.0 } else { 0.0 } + 0.1 * rng.standard_normal());
            }
        }
        let cfg = PrototypeConfig { m: 200, ..PrototypeConfig::default() };
        let (acc, lambda, state) = evaluate_stream(&stream, &f, &cfg, 7).unwrap();
        assert_eq!(acc.len(), 7);
        assert!(acc.iter().all(|&a| a >= 0.95), "{acc:?}");
        assert!(cfg.lambda_grid().contains(&lambda));
        assert_eq!(state.classes(), stream.all_classes().as_slice());
    }
}
