//! Patient-stratified cross-validation, the optimization loop, patient
//! aggregation and the λ sweep.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bagdata::{Cohort, Task, TaskCohort};
use crate::grad::Matrix;
use crate::losses::{self, ExpertPairSet, LossConfig, LossMode, LossTerms, MemoryQueue};
use crate::metrics::{self, Aggregate, GeometryReport, MeanStd, MetricsBundle, MetricsError};
use crate::model::{Head, ModelSettings};
use crate::objective::{step_objective, StepError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot split cohort: {0}")]
    Split(String),
    #[error("patient leakage in split plan: {0}")]
    Leakage(String),
    #[error(
        "fold {fold} diverged at epoch {epoch}, step {step} (loss {loss}, lambda {lambda}, lr {lr})"
    )]
    Diverged {
        fold: usize,
        epoch: usize,
        step: usize,
        loss: f64,
        lambda: f64,
        lr: f64,
    },
    #[error("fold {fold}, epoch {epoch}, step {step}: {source}")]
    Step {
        fold: usize,
        epoch: usize,
        step: usize,
        #[source]
        source: StepError,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("output: {0}")]
    Output(String),
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// dataset

#[derive(Debug, Clone)]
pub struct DataSlide {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    pub x: Matrix,
}

/// A task cohort materialised as f64 matrices, shared read-only by folds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub class_names: Vec<String>,
    pub slides: Vec<DataSlide>,
}

impl Dataset {
    pub fn new(cohort: &Cohort, task: &TaskCohort) -> Self {
        let slides = task
            .slides
            .iter()
            .map(|s| {
                let bag = &cohort.bags[s.index];
                DataSlide {
                    slide_id: bag.slide_id.clone(),
                    patient_id: bag.patient_id.clone(),
                    label: s.label,
                    x: bag.to_matrix(),
                }
            })
            .collect();
        Self {
            task: task.task,
            class_names: task.class_names.clone(),
            slides,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn in_dim(&self) -> usize {
        self.slides.first().map_or(0, |s| s.x.cols())
    }

    /// Slide indices per patient, patients sorted by id.
    pub fn patients(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.slides.iter().enumerate() {
            out.entry(s.patient_id.as_str()).or_default().push(i);
        }
        out
    }

    /// Majority slide label per patient; ties go to the lowest class.
    pub fn patient_labels(&self) -> BTreeMap<&str, usize> {
        self.patients()
            .into_iter()
            .map(|(p, idx)| {
                let mut counts = vec![0usize; self.n_classes()];
                for &i in &idx {
                    counts[self.slides[i].label] += 1;
                }
                (p, argmax_first(&counts))
            })
            .collect()
    }
}

fn argmax_first(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// splitting

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub folds: Vec<FoldSplit>,
    /// Val/test representation that could not be satisfied.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Val,
    Test,
}

fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(TrainError::Config(format!(
            "split fractions must lie in [0, 1], got {fractions:?}"
        )));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    if fractions[1] <= 0.0 || fractions[2] <= 0.0 {
        return Err(TrainError::Config(
            "val and test fractions must be positive".into(),
        ));
    }
    Ok(())
}

/// Number of fold slots given to validation.
fn val_slots(n_folds: usize, val_fraction: f64) -> usize {
    ((val_fraction * n_folds as f64).round() as usize).max(1)
}

/// Patient-level stratified k-fold plan.
///
/// Within each class, patients are shuffled and dealt round-robin to fold
/// slots, continuing the slot offset from the previous class. Fold `f`
/// tests on slot `f`, validates on the next `round(val·n)` slots and trains
/// on the rest. A class missing from a fold's test or val then borrows one
/// of its train patients, provided at least one stays in train.
pub fn stratified_patient_kfold(
    ds: &Dataset,
    n_folds: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitPlan> {
    validate_fractions(fractions)?;
    let v = val_slots(n_folds, fractions[1]);
    if n_folds < v + 2 {
        return Err(TrainError::Config(format!(
            "{n_folds} folds leave no training slot (need at least {})",
            v + 2
        )));
    }
    if ds.slides.is_empty() {
        return Err(TrainError::Split("cohort has no slides".into()));
    }
    let labels = ds.patient_labels();
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); ds.n_classes()];
    for (&p, &l) in &labels {
        by_class[l].push(p);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(TrainError::Split(format!(
            "class {:?} has no patients",
            ds.class_names[c]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut offset = 0usize;
    for patients in by_class.iter_mut() {
        patients.shuffle(&mut rng);
        for (i, &p) in patients.iter().enumerate() {
            slot.insert(p, (offset + i) % n_folds);
        }
        offset += patients.len();
    }

    let mut warnings = Vec::new();
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let part_of = |s: usize| {
            let d = (s + n_folds - f) % n_folds;
            match d {
                0 => Part::Test,
                d if d <= v => Part::Val,
                _ => Part::Train,
            }
        };
        let mut assign: HashMap<&str, Part> =
            slot.iter().map(|(&p, &s)| (p, part_of(s))).collect();
        for (c, patients) in by_class.iter().enumerate() {
            for target in [Part::Test, Part::Val] {
                if patients.iter().any(|p| assign[p] == target) {
                    continue;
                }
                let in_train: Vec<&str> = patients
                    .iter()
                    .copied()
                    .filter(|p| assign[p] == Part::Train)
                    .collect();
                if in_train.len() >= 2 {
                    assign.insert(in_train[0], target);
                } else {
                    warnings.push(format!(
                        "fold {f}: class {:?} ({} patient{}) is not represented in {}",
                        ds.class_names[c],
                        patients.len(),
                        if patients.len() == 1 { "" } else { "s" },
                        if target == Part::Test { "test" } else { "val" },
                    ));
                }
            }
        }
        let collect = |part: Part| {
            let mut v: Vec<String> = assign
                .iter()
                .filter(|(_, &a)| a == part)
                .map(|(p, _)| p.to_string())
                .collect();
            v.sort();
            v
        };
        folds.push(FoldSplit {
            fold: f,
            train: collect(Part::Train),
            val: collect(Part::Val),
            test: collect(Part::Test),
        });
    }
    let plan = SplitPlan {
        n_folds,
        seed,
        fractions,
        folds,
        warnings,
    };
    check_leakage(&plan, ds)?;
    Ok(plan)
}

/// Every patient sits in exactly one partition of every fold.
pub fn check_leakage(plan: &SplitPlan, ds: &Dataset) -> Result<()> {
    let all: HashSet<&str> = ds.slides.iter().map(|s| s.patient_id.as_str()).collect();
    if plan.folds.len() != plan.n_folds {
        return Err(TrainError::Leakage(format!(
            "plan lists {} folds, expected {}",
            plan.folds.len(),
            plan.n_folds
        )));
    }
    for fold in &plan.folds {
        let mut seen: HashSet<&str> = HashSet::new();
        for p in fold.train.iter().chain(&fold.val).chain(&fold.test) {
            if !seen.insert(p) {
                return Err(TrainError::Leakage(format!(
                    "fold {}: patient {p:?} appears in more than one partition",
                    fold.fold
                )));
            }
            if !all.contains(p.as_str()) {
                return Err(TrainError::Leakage(format!(
                    "fold {}: unknown patient {p:?}",
                    fold.fold
                )));
            }
        }
        if seen.len() != all.len() {
            return Err(TrainError::Leakage(format!(
                "fold {}: {} of {} patients assigned",
                fold.fold,
                seen.len(),
                all.len()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping; `None`
    /// trains for the full budget and keeps the best epoch.
    pub patience: Option<usize>,
    pub seed: u64,
    pub n_folds: usize,
    /// Train / val / test.
    pub fractions: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: Some(10),
            seed: 42,
            n_folds: 10,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config("eps must be > 0".into()));
        }
        if self.patience == Some(0) {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        validate_fractions(self.fractions)?;
        let v = val_slots(self.n_folds, self.fractions[1]);
        if self.n_folds < v + 2 {
            return Err(TrainError::Config(format!(
                "n_folds must be >= {} for the val fraction",
                v + 2
            )));
        }
        Ok(())
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: TrainConfig,
    pub model: ModelSettings,
    pub loss: LossConfig,
    /// Expert pairs for EGCL; its gamma is replaced by `loss.gamma`.
    pub pairs: Option<ExpertPairSet>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.loss.mode == LossMode::Egcl && self.pairs.is_none() {
            return Err(TrainError::Config("egcl mode needs expert pairs".into()));
        }
        Ok(())
    }

    fn effective_pairs(&self) -> Result<Option<ExpertPairSet>> {
        match (&self.pairs, self.loss.mode) {
            (Some(p), LossMode::Egcl) => Ok(Some(
                p.with_gamma(self.loss.gamma)
                    .map_err(|e| TrainError::Config(e.to_string()))?,
            )),
            _ => Ok(None),
        }
    }
}

// ---------------------------------------------------------------------------
// events

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step {
        fold: usize,
        epoch: usize,
        step: usize,
        slide_id: String,
        terms: LossTerms,
        queue_len: usize,
        n_positives: usize,
        contrastive_skipped: bool,
    },
    Epoch {
        fold: usize,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_macro_f1: f64,
        queue_len: usize,
        improved: bool,
    },
    FoldDone {
        fold: usize,
        best_epoch: usize,
        epochs_run: usize,
        test_macro_f1: f64,
    },
    FoldFailed {
        fold: usize,
        message: String,
    },
}

pub type EventSink<'a> = &'a (dyn Fn(&TrainEvent) + Sync);

pub fn no_events(_: &TrainEvent) {}

// ---------------------------------------------------------------------------
// fold training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bag: f64,
    pub train_instance: f64,
    pub train_contrastive: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub queue_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub label: usize,
    pub predicted: usize,
    pub n_slides: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub slide_predictions: Vec<SlidePrediction>,
    pub patient_predictions: Vec<PatientPrediction>,
    pub slide_metrics: MetricsBundle,
    pub patient_metrics: MetricsBundle,
    /// Test-set embeddings on the true-class branch.
    pub geometry: GeometryReport,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub head: Head,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One slide's vote: its predicted class and probabilities.
#[derive(Debug, Clone, Copy)]
pub struct SlideVote<'a> {
    pub predicted: usize,
    pub probs: &'a [f64],
}

/// Modal class among the votes; ties go to the highest mean probability,
/// then to the lowest class index.
pub fn majority_vote(votes: &[SlideVote], n_classes: usize) -> usize {
    assert!(!votes.is_empty(), "majority vote over no slides");
    let mut counts = vec![0usize; n_classes];
    let mut mean = vec![0.0; n_classes];
    for v in votes {
        counts[v.predicted] += 1;
        for (m, p) in mean.iter_mut().zip(v.probs) {
            *m += p / votes.len() as f64;
        }
    }
    let top = *counts.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for c in 0..n_classes {
        if counts[c] != top {
            continue;
        }
        match best {
            Some(b) if mean[c] <= mean[b] => {}
            _ => best = Some(c),
        }
    }
    best.unwrap()
}

/// Patient-level predictions from slide predictions, patients sorted by id.
/// The patient's true label is the majority of its slide labels.
pub fn majority_vote_patient(
    slides: &[SlidePrediction],
    n_classes: usize,
) -> Vec<PatientPrediction> {
    let mut groups: BTreeMap<&str, Vec<&SlidePrediction>> = BTreeMap::new();
    for s in slides {
        groups.entry(s.patient_id.as_str()).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(patient, preds)| {
            let votes: Vec<SlideVote> = preds
                .iter()
                .map(|s| SlideVote {
                    predicted: s.predicted,
                    probs: &s.probs,
                })
                .collect();
            let mut label_counts = vec![0usize; n_classes];
            for s in &preds {
                label_counts[s.label] += 1;
            }
            PatientPrediction {
                patient_id: patient.to_string(),
                label: argmax_first(&label_counts),
                predicted: majority_vote(&votes, n_classes),
                n_slides: preds.len(),
            }
        })
        .collect()
}

fn slide_indices(ds: &Dataset, patients: &[String]) -> Vec<usize> {
    let wanted: HashSet<&str> = patients.iter().map(|s| s.as_str()).collect();
    (0..ds.slides.len())
        .filter(|&i| wanted.contains(ds.slides[i].patient_id.as_str()))
        .collect()
}

struct Evaluation {
    predictions: Vec<SlidePrediction>,
    mean_ce: f64,
}

fn evaluate(head: &Head, ds: &Dataset, idx: &[usize]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(idx.len());
    let mut ce = 0.0;
    for &i in idx {
        let s = &ds.slides[i];
        let probs = head.predict(&s.x)?;
        ce += losses::bag_ce(&probs, s.label).0;
        predictions.push(SlidePrediction {
            slide_id: s.slide_id.clone(),
            patient_id: s.patient_id.clone(),
            label: s.label,
            predicted: argmax(&probs),
            probs,
        });
    }
    let mean_ce = if idx.is_empty() {
        0.0
    } else {
        ce / idx.len() as f64
    };
    Ok(Evaluation {
        predictions,
        mean_ce,
    })
}

fn bundle(preds: &[SlidePrediction], n_classes: usize) -> Result<MetricsBundle> {
    let truth: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    Ok(MetricsBundle::from_predictions(&truth, &pred, n_classes)?)
}

/// Trains one fold and evaluates the restored best-validation parameters
/// on its test patients.
pub fn train_fold(
    ds: &Dataset,
    split: &FoldSplit,
    exp: &Experiment,
    events: EventSink,
) -> Result<FoldOutcome> {
    exp.validate()?;
    let fold = split.fold;
    let cfg = &exp.train;
    let loss_cfg = &exp.loss;
    let pairs = exp.effective_pairs()?;
    let n_classes = ds.n_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64);
    let head_cfg = exp.model.head_config(ds.in_dim(), n_classes);
    let mut head = Head::init(&head_cfg, &mut rng)?;
    let mut theta = head.params().flatten();
    let mut adam = Adam::new(theta.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut queue = MemoryQueue::new(loss_cfg.queue_capacity);

    let train_idx = slide_indices(ds, &split.train);
    let val_idx = slide_indices(ds, &split.val);
    let test_idx = slide_indices(ds, &split.test);
    if train_idx.is_empty() {
        return Err(TrainError::Split(format!("fold {fold} has no training slides")));
    }

    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    let mut since_best = 0usize;
    let mut curve = Vec::new();
    let mut order = train_idx.clone();
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        for &i in &order {
            let slide = &ds.slides[i];
            let out = step_objective(&head, &slide.x, slide.label, &queue, loss_cfg, pairs.as_ref())
                .map_err(|source| TrainError::Step {
                    fold,
                    epoch,
                    step: global_step,
                    source,
                })?;
            if !out.terms.total.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    fold,
                    epoch,
                    step: global_step,
                    loss: out.terms.total,
                    lambda: loss_cfg.lambda,
                    lr: cfg.lr,
                });
            }
            // the anchor joins the queue only after its own loss
            if let Some(z) = &out.z {
                queue.push(z, slide.label).map_err(|e| TrainError::Step {
                    fold,
                    epoch,
                    step: global_step,
                    source: e.into(),
                })?;
            }
            adam.step(&mut theta, &out.grads);
            head.params_mut().assign_flat(&theta);
            sums.bag += out.terms.bag;
            sums.instance += out.terms.instance;
            sums.contrastive += out.terms.contrastive;
            sums.total += out.terms.total;
            events(&TrainEvent::Step {
                fold,
                epoch,
                step: global_step,
                slide_id: slide.slide_id.clone(),
                terms: out.terms,
                queue_len: queue.len(),
                n_positives: out.n_positives,
                contrastive_skipped: out.contrastive_skipped,
            });
            global_step += 1;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(TrainError::Diverged {
                fold,
                epoch,
                step: global_step,
                loss: f64::NAN,
                lambda: loss_cfg.lambda,
                lr: cfg.lr,
            });
        }

        let n = order.len() as f64;
        let val = evaluate(&head, ds, &val_idx)?;
        let val_f1 = bundle(&val.predictions, n_classes)?.macro_f1;
        // without validation patients the latest epoch is the best guess
        let improved = match &best {
            _ if val_idx.is_empty() => true,
            None => true,
            Some((f1, loss, _, _)) => val_f1 > *f1 || (val_f1 == *f1 && val.mean_ce < *loss),
        };
        if improved {
            best = Some((val_f1, val.mean_ce, epoch, theta.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: sums.total / n,
            train_bag: sums.bag / n,
            train_instance: sums.instance / n,
            train_contrastive: sums.contrastive / n,
            val_loss: val.mean_ce,
            val_macro_f1: val_f1,
            queue_len: queue.len(),
        });
        events(&TrainEvent::Epoch {
            fold,
            epoch,
            train_loss: sums.total / n,
            val_loss: val.mean_ce,
            val_macro_f1: val_f1,
            queue_len: queue.len(),
            improved,
        });
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let epochs_run = curve.len();
    let (_, _, best_epoch, best_theta) = best.expect("at least one epoch ran");
    head.params_mut().assign_flat(&best_theta);

    let test = evaluate(&head, ds, &test_idx)?;
    let slide_metrics = bundle(&test.predictions, n_classes)?;
    let patient_predictions = majority_vote_patient(&test.predictions, n_classes);
    let patient_metrics = MetricsBundle::from_predictions(
        &patient_predictions.iter().map(|p| p.label).collect::<Vec<_>>(),
        &patient_predictions.iter().map(|p| p.predicted).collect::<Vec<_>>(),
        n_classes,
    )?;
    let mut z = Vec::new();
    let mut z_labels = Vec::new();
    for &i in &test_idx {
        let s = &ds.slides[i];
        // a zero bag feature has no direction and is left out
        if let Ok((_, emb)) = head.predict_with_embedding(&s.x, s.label) {
            z.push(emb);
            z_labels.push(s.label);
        }
    }
    let geometry = metrics::geometry(&z, &z_labels, n_classes)?;
    events(&TrainEvent::FoldDone {
        fold,
        best_epoch,
        epochs_run,
        test_macro_f1: slide_metrics.macro_f1,
    });
    Ok(FoldOutcome {
        result: FoldResult {
            fold,
            best_epoch,
            epochs_run,
            slide_predictions: test.predictions,
            patient_predictions,
            slide_metrics,
            patient_metrics,
            geometry,
            curve,
        },
        head,
    })
}

/// Replays a fold's test evaluation with a trained head.
pub fn evaluate_patients(
    head: &Head,
    ds: &Dataset,
    patients: &[String],
) -> Result<(Vec<SlidePrediction>, MetricsBundle)> {
    let idx = slide_indices(ds, patients);
    let eval = evaluate(head, ds, &idx)?;
    let m = bundle(&eval.predictions, ds.n_classes())?;
    Ok((eval.predictions, m))
}

// ---------------------------------------------------------------------------
// cross-validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub message: String,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub a: usize,
    pub b: usize,
    pub separation: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    /// Per class, over folds where it is defined.
    pub compactness: Vec<Option<MeanStd>>,
    /// Per fold: mean compactness over classes, then across folds.
    pub mean_compactness: MeanStd,
    pub separation: Vec<PairGeometry>,
}

impl GeometrySummary {
    pub fn separation_of(&self, a: usize, b: usize) -> Option<MeanStd> {
        let (a, b) = (a.min(b), a.max(b));
        self.separation
            .iter()
            .find(|p| p.a == a && p.b == b)
            .map(|p| p.separation)
    }
}

fn summarize_geometry(reports: &[&GeometryReport], n_classes: usize) -> GeometrySummary {
    let compactness = (0..n_classes)
        .map(|c| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.compactness[c]).collect();
            (!v.is_empty()).then(|| metrics::mean_std(&v))
        })
        .collect();
    let means: Vec<f64> = reports.iter().filter_map(|r| r.mean_compactness()).collect();
    let mut separation = Vec::new();
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.separation_of(a, b)).collect();
            if !v.is_empty() {
                separation.push(PairGeometry {
                    a,
                    b,
                    separation: metrics::mean_std(&v),
                });
            }
        }
    }
    GeometrySummary {
        compactness,
        mean_compactness: metrics::mean_std(&means),
        separation,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub n_folds: usize,
    pub completed_folds: Vec<usize>,
    pub failures: Vec<FoldFailure>,
    /// Set when any fold failed; the aggregates cover completed folds only.
    pub partial: bool,
    pub slide: Aggregate,
    pub patient: Aggregate,
    pub geometry: GeometrySummary,
}

#[derive(Debug)]
pub struct CvReport {
    pub folds: Vec<std::result::Result<FoldOutcome, FoldFailure>>,
    pub summary: CvSummary,
}

impl CvReport {
    pub fn any_divergence(&self) -> bool {
        self.summary.failures.iter().any(|f| f.diverged)
    }
}

pub fn summarize(
    folds: &[std::result::Result<FoldOutcome, FoldFailure>],
    n_classes: usize,
) -> CvSummary {
    let ok: Vec<&FoldResult> = folds
        .iter()
        .filter_map(|f| f.as_ref().ok().map(|o| &o.result))
        .collect();
    let failures: Vec<FoldFailure> = folds.iter().filter_map(|f| f.as_ref().err().cloned()).collect();
    let slide: Vec<&MetricsBundle> = ok.iter().map(|r| &r.slide_metrics).collect();
    let patient: Vec<&MetricsBundle> = ok.iter().map(|r| &r.patient_metrics).collect();
    let geo: Vec<&GeometryReport> = ok.iter().map(|r| &r.geometry).collect();
    CvSummary {
        n_folds: folds.len(),
        completed_folds: ok.iter().map(|r| r.fold).collect(),
        partial: !failures.is_empty(),
        failures,
        slide: metrics::aggregate(&slide, n_classes),
        patient: metrics::aggregate(&patient, n_classes),
        geometry: summarize_geometry(&geo, n_classes),
    }
}

/// Runs every fold of `plan`, `jobs` folds at a time. A failing fold is
/// recorded and the remaining folds still run.
pub fn run_cv(
    ds: &Dataset,
    plan: &SplitPlan,
    exp: &Experiment,
    jobs: usize,
    events: EventSink,
) -> Result<CvReport> {
    exp.validate()?;
    check_leakage(plan, ds)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    let folds: Vec<std::result::Result<FoldOutcome, FoldFailure>> = pool.install(|| {
        plan.folds
            .par_iter()
            .map(|split| {
                train_fold(ds, split, exp, events).map_err(|e| {
                    events(&TrainEvent::FoldFailed {
                        fold: split.fold,
                        message: e.to_string(),
                    });
                    FoldFailure {
                        fold: split.fold,
                        message: e.to_string(),
                        diverged: e.is_divergence(),
                    }
                })
            })
            .collect()
    });
    let summary = summarize(&folds, ds.n_classes());
    Ok(CvReport { folds, summary })
}

// ---------------------------------------------------------------------------
// λ sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRun {
    pub lambda: f64,
    pub mode: LossMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mode: LossMode,
    pub n_runs: usize,
    pub failed_runs: usize,
    /// Across repeats of each run's fold-mean.
    pub macro_recall: MeanStd,
    pub macro_f1: MeanStd,
    pub argmax: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn argmax_row(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.argmax)
    }

    pub fn row(&self, lambda: f64, mode: LossMode) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.lambda == lambda && r.mode == mode)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let out = |e: csv::Error| TrainError::Output(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(out)?;
        w.write_record([
            "lambda",
            "mode",
            "n_runs",
            "failed_runs",
            "mean_macro_recall",
            "std_macro_recall",
            "mean_macro_f1",
            "std_macro_f1",
            "argmax",
        ])
        .map_err(out)?;
        for r in &self.rows {
            w.write_record([
                r.lambda.to_string(),
                r.mode.to_string(),
                r.n_runs.to_string(),
                r.failed_runs.to_string(),
                format!("{:.6}", r.macro_recall.mean),
                format!("{:.6}", r.macro_recall.std),
                format!("{:.6}", r.macro_f1.mean),
                format!("{:.6}", r.macro_f1.std),
                r.argmax.to_string(),
            ])
            .map_err(out)?;
        }
        w.flush()
            .map_err(|e| TrainError::Output(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Full cross-validation per (λ, mode, seed). The split plan follows each
/// seed. `on_run` sees each finished run, e.g. to persist it.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    ds: &Dataset,
    base: &Experiment,
    grid: &[f64],
    modes: &[LossMode],
    seeds: &[u64],
    jobs: usize,
    events: EventSink,
    on_run: &mut dyn FnMut(&SweepRun, &CvReport) -> Result<()>,
) -> Result<SweepReport> {
    if grid.is_empty() || modes.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config(
            "sweep needs a nonempty grid, mode list and seed list".into(),
        ));
    }
    let mut rows = Vec::new();
    for &lambda in grid {
        for &mode in modes {
            let mut recalls = Vec::new();
            let mut f1s = Vec::new();
            let mut failed = 0;
            for &seed in seeds {
                let mut exp = base.clone();
                exp.loss.lambda = lambda;
                exp.loss.mode = mode;
                exp.train.seed = seed;
                let plan = stratified_patient_kfold(ds, exp.train.n_folds, exp.train.fractions, seed)?;
                let report = run_cv(ds, &plan, &exp, jobs, events)?;
                on_run(&SweepRun { lambda, mode, seed }, &report)?;
                if report.summary.completed_folds.is_empty() {
                    failed += 1;
                    continue;
                }
                if report.summary.partial {
                    failed += 1;
                }
                recalls.push(report.summary.slide.macro_recall.mean);
                f1s.push(report.summary.slide.macro_f1.mean);
            }
            rows.push(SweepRow {
                lambda,
                mode,
                n_runs: seeds.len(),
                failed_runs: failed,
                macro_recall: metrics::mean_std(&recalls),
                macro_f1: metrics::mean_std(&f1s),
                argmax: false,
            });
        }
    }
    let best = (0..rows.len()).fold(0, |b, i| {
        if rows[i].macro_f1.mean > rows[b].macro_f1.mean {
            i
        } else {
            b
        }
    });
    rows[best].argmax = true;
    Ok(SweepReport { rows })
}
