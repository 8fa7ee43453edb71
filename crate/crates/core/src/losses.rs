//! Training objectives: bag cross-entropy, instance hinge, queue-based
//! supervised contrastive loss with optional expert-pair weighting, and the
//! weighted total.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bagdata::SEVEN_CLASS_NAMES;
use crate::grad;

const UNIT_TOL: f64 = 1e-9;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("embedding norm {norm} is not 1")]
    NotUnit { norm: f64 },
    #[error("embedding has {got} entries, queue holds {expected}")]
    Dim { expected: usize, got: usize },
    #[error("scores and targets differ in length ({scores} vs {targets})")]
    Length { scores: usize, targets: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("expert pair file {path}: {msg}")]
    PairFile { path: String, msg: String },
    #[error("unknown class name {0:?} in expert pairs")]
    UnknownClass(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Cross-entropy `−log p[label]` and its gradient with respect to the logits.
pub fn bag_ce(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    // NaN must survive the floor so divergence stays visible
    let p = probs[label];
    let loss = -(if p.is_nan() { p } else { p.max(PROB_FLOOR) }).ln();
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    (loss, g)
}

/// Mean hinge `max(0, 1 − t·s)` over the selection, with its gradient.
pub fn instance_hinge(scores: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != targets.len() {
        return Err(LossError::Length {
            scores: scores.len(),
            targets: targets.len(),
        });
    }
    if scores.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let grads = scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let margin = 1.0 - t * s;
            if margin > 0.0 {
                loss += margin;
                -t / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grads))
}

fn check_unit(z: &[f64]) -> Result<()> {
    let norm = grad::norm(z);
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(LossError::NotUnit { norm });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub z: Vec<f64>,
    pub label: usize,
}

/// FIFO of detached unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl MemoryQueue {
    pub const DEFAULT_CAPACITY: usize = 256;

    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Append, evicting the oldest entry when full.
    pub fn push(&mut self, z: &[f64], label: usize) -> Result<()> {
        check_unit(z)?;
        if let Some(first) = self.entries.front() {
            if first.z.len() != z.len() {
                return Err(LossError::Dim {
                    expected: first.z.len(),
                    got: z.len(),
                });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry {
            z: z.to_vec(),
            label,
        });
        Ok(())
    }
}

impl Default for MemoryQueue {
    fn default() -> Self {
        Self::new(Self::DEFAULT_CAPACITY)
    }
}

/// Confusable class pairs, stored unordered, with the negative weight gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPairSet {
    pairs: BTreeSet<(usize, usize)>,
    n_classes: usize,
    gamma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairFile {
    pairs: Vec<(String, String)>,
    #[serde(default = "default_gamma")]
    gamma: f64,
}

fn default_gamma() -> f64 {
    2.0
}

/// Default pairs under the 7-class schema, by class name.
pub const DEFAULT_EXPERT_PAIRS: [(&str, &str); 6] = [
    ("Normal brain", "Non-neoplastic brain lesions"),
    ("Non-neoplastic brain lesions", "Other low-grade glial tumors"),
    ("Non-neoplastic brain lesions", "Non-glial brain tumors"),
    ("Other low-grade glial tumors", "Pilocytic astrocytoma"),
    ("Pilocytic astrocytoma", "Ependymal tumors"),
    ("Ependymal tumors", "High-grade brain tumors"),
];

impl ExpertPairSet {
    pub fn new(pairs: &[(usize, usize)], n_classes: usize, gamma: f64) -> Result<Self> {
        if !(gamma >= 1.0 && gamma.is_finite()) {
            return Err(LossError::Config(format!("gamma must be >= 1, got {gamma}")));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in pairs {
            if a >= n_classes || b >= n_classes {
                return Err(LossError::Config(format!(
                    "pair ({a}, {b}) out of range for {n_classes} classes"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            pairs: set,
            n_classes,
            gamma,
        })
    }

    /// Pairs given by name, resolved against `class_names`. Pairs whose
    /// classes are absent from the schema are dropped when `skip_missing`.
    pub fn from_names(
        pairs: &[(&str, &str)],
        class_names: &[String],
        gamma: f64,
        skip_missing: bool,
    ) -> Result<Self> {
        let find = |n: &str| class_names.iter().position(|c| c == n);
        let mut idx = Vec::new();
        for &(a, b) in pairs {
            match (find(a), find(b)) {
                (Some(i), Some(j)) => idx.push((i, j)),
                _ if skip_missing => {}
                (None, _) => return Err(LossError::UnknownClass(a.to_string())),
                (_, None) => return Err(LossError::UnknownClass(b.to_string())),
            }
        }
        Self::new(&idx, class_names.len(), gamma)
    }

    /// The six default pairs, mapped onto `class_names` where both exist.
    pub fn default_for(class_names: &[String], gamma: f64) -> Result<Self> {
        Self::from_names(&DEFAULT_EXPERT_PAIRS, class_names, gamma, true)
    }

    /// Seven-class default.
    pub fn default_seven(gamma: f64) -> Self {
        let names: Vec<String> = SEVEN_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        Self::default_for(&names, gamma).expect("default pairs resolve")
    }

    /// JSON `{"pairs": [[name, name], ...], "gamma": g}`.
    pub fn load(path: &Path, class_names: &[String]) -> Result<Self> {
        let err = |msg: String| LossError::PairFile {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: PairFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let pairs: Vec<(&str, &str)> = file
            .pairs
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        Self::from_names(&pairs, class_names, file.gamma, false)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let pairs: Vec<_> = self.pairs.iter().copied().collect();
        Self::new(&pairs, self.n_classes, gamma)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    /// Weight for a queue entry of class `other` against an anchor of `anchor`.
    pub fn weight(&self, anchor: usize, other: usize) -> f64 {
        if self.contains(anchor, other) {
            self.gamma
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to the anchor `z`.
    pub grad: Vec<f64>,
    pub n_positives: usize,
    pub skipped: bool,
}

/// Supervised InfoNCE of anchor `z` against the queue:
/// `−(1/|P|) Σ_{j∈P} log[ exp(s_j/τ) / Σ_k w_k exp(s_k/τ) ]`.
/// The denominator runs over every queue entry, positives included.
pub fn contrastive_loss(
    z: &[f64],
    label: usize,
    queue: &MemoryQueue,
    tau: f64,
    weighting: Option<&ExpertPairSet>,
) -> Result<ContrastiveOutput> {
    check_unit(z)?;
    let n_positives = queue.entries().filter(|e| e.label == label).count();
    if n_positives == 0 {
        return Ok(ContrastiveOutput {
            loss: 0.0,
            grad: vec![0.0; z.len()],
            n_positives: 0,
            skipped: true,
        });
    }
    let mut logits = Vec::with_capacity(queue.len());
    let mut log_w = Vec::with_capacity(queue.len());
    for e in queue.entries() {
        if e.z.len() != z.len() {
            return Err(LossError::Dim {
                expected: e.z.len(),
                got: z.len(),
            });
        }
        logits.push(grad::dot(z, &e.z) / tau);
        // gamma = 1 gives log weight 0.0 exactly, so the weighted path
        // reduces to plain CL bit for bit
        log_w.push(weighting.map_or(0.0, |w| w.weight(label, e.label).ln()));
    }
    let shifted: Vec<f64> = logits.iter().zip(&log_w).map(|(l, w)| l + w).collect();
    let (arg_max, m) = shifted
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    // log Σ exp(s_k) = m + ln(1 + Σ_{k≠max} exp(s_k − m)); ln_1p keeps
    // near-zero losses accurate
    let rest: f64 = shifted
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg_max)
        .map(|(_, s)| (s - m).exp())
        .sum();
    let log1p_rest = rest.ln_1p();
    let log_denom = m + log1p_rest;

    let inv_p = 1.0 / n_positives as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; z.len()];
    for (e, (&l, &s)) in queue.entries().zip(logits.iter().zip(&shifted)) {
        let softmax = (s - log_denom).exp();
        let mut coeff = softmax;
        if e.label == label {
            loss += inv_p * ((m - l) + log1p_rest);
            coeff -= inv_p;
        }
        let c = coeff / tau;
        for (gi, ei) in g.iter_mut().zip(&e.z) {
            *gi += c * ei;
        }
    }
    Ok(ContrastiveOutput {
        loss,
        grad: g,
        n_positives,
        skipped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Baseline,
    Cl,
    Egcl,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Baseline => "baseline",
            LossMode::Cl => "cl",
            LossMode::Egcl => "egcl",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(LossMode::Baseline),
            "cl" => Ok(LossMode::Cl),
            "egcl" => Ok(LossMode::Egcl),
            _ => Err(format!("unknown mode {s:?} (expected baseline, cl or egcl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub instance_weight: f64,
    pub mode: LossMode,
    pub queue_capacity: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.1,
            alpha: 1e-5,
            gamma: 2.0,
            instance_weight: 1.0,
            mode: LossMode::Baseline,
            queue_capacity: MemoryQueue::DEFAULT_CAPACITY,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LossError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 1, got {}", self.gamma));
        }
        if !(self.instance_weight >= 0.0 && self.instance_weight.is_finite()) {
            return bad(format!(
                "instance_weight must be >= 0, got {}",
                self.instance_weight
            ));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be >= 1".into());
        }
        Ok(())
    }

    /// Contrastive term is live: a contrastive mode with non-zero weight.
    pub fn contrastive_active(&self) -> bool {
        self.mode != LossMode::Baseline && self.lambda > 0.0
    }
}

/// The per-term values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub bag: f64,
    pub instance: f64,
    pub contrastive: f64,
    pub l2: f64,
    pub total: f64,
}

/// `L_bag + w_inst·L_inst + λ·L_CL + α‖θ‖²`; also returns the L2 gradient
/// `2αθ` over the flattened parameters.
pub fn total_loss(
    bag: f64,
    instance: f64,
    contrastive: f64,
    params_flat: &[f64],
    cfg: &LossConfig,
) -> (LossTerms, Vec<f64>) {
    let sq: f64 = params_flat.iter().map(|v| v * v).sum();
    let l2 = cfg.alpha * sq;
    let lambda = if cfg.mode == LossMode::Baseline {
        0.0
    } else {
        cfg.lambda
    };
    let total = bag + cfg.instance_weight * instance + lambda * contrastive + l2;
    let grad = params_flat.iter().map(|v| 2.0 * cfg.alpha * v).collect();
    (
        LossTerms {
            bag,
            instance,
            contrastive,
            l2,
            total,
        },
        grad,
    )
}
