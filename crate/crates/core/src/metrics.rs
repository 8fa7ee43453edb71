//! Classification metrics, confusion matrices, embedding geometry and
//! report files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("{truth} true labels but {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(MetricsError::Length {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        for label in [t, p] {
            if label >= n_classes {
                return Err(MetricsError::Label { label, n_classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Precision, recall and F1 per class; undefined ratios are 0.
pub fn per_class_prf(cm: &ConfusionMatrix) -> ClassReport {
    let classes = (0..cm.n_classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let support = cm.support(c);
            let predicted = cm.predicted(c);
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
                predicted,
            }
        })
        .collect();
    ClassReport { classes }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted mean over classes that occur in the truth or the predictions.
pub fn macro_avg(report: &ClassReport) -> MacroAverage {
    let active: Vec<&ClassMetrics> = report
        .classes
        .iter()
        .filter(|c| c.support > 0 || c.predicted > 0)
        .collect();
    if active.is_empty() {
        return MacroAverage {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let n = active.len() as f64;
    MacroAverage {
        precision: active.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: active.iter().map(|c| c.recall).sum::<f64>() / n,
        f1: active.iter().map(|c| c.f1).sum::<f64>() / n,
    }
}

/// Support-weighted mean F1.
pub fn weighted_f1(report: &ClassReport) -> f64 {
    let total: u64 = report.classes.iter().map(|c| c.support).sum();
    if total == 0 {
        return 0.0;
    }
    report
        .classes
        .iter()
        .map(|c| c.f1 * c.support as f64)
        .sum::<f64>()
        / total as f64
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let trace: u64 = (0..cm.n_classes()).map(|c| cm.counts[c][c]).sum();
    ratio(trace, cm.total())
}

/// Row-stochastic version of `cm`; empty rows stay zero.
pub fn normalized(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&v| ratio(v, s)).collect()
        })
        .collect()
}

/// Metrics of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub n: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: ClassReport,
    pub confusion: ConfusionMatrix,
}

impl MetricsBundle {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let per_class = per_class_prf(&cm);
        let m = macro_avg(&per_class);
        Self {
            n: cm.total(),
            accuracy: accuracy(&cm),
            macro_precision: m.precision,
            macro_recall: m.recall,
            macro_f1: m.f1,
            weighted_f1: weighted_f1(&per_class),
            per_class,
            confusion: cm,
        }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        Ok(Self::from_confusion(confusion(truth, pred, n_classes)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

/// Across-fold summary with the pooled confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_folds: usize,
    pub accuracy: MeanStd,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_f1: MeanStd,
    pub per_class: Vec<ClassAggregate>,
    pub pooled_confusion: ConfusionMatrix,
}

pub fn aggregate(bundles: &[&MetricsBundle], n_classes: usize) -> Aggregate {
    let collect = |f: &dyn Fn(&MetricsBundle) -> f64| {
        mean_std(&bundles.iter().map(|b| f(b)).collect::<Vec<_>>())
    };
    let per_class = (0..n_classes)
        .map(|c| {
            let pick = |f: &dyn Fn(&ClassMetrics) -> f64| {
                mean_std(
                    &bundles
                        .iter()
                        .map(|b| f(&b.per_class.classes[c]))
                        .collect::<Vec<_>>(),
                )
            };
            ClassAggregate {
                precision: pick(&|m| m.precision),
                recall: pick(&|m| m.recall),
                f1: pick(&|m| m.f1),
            }
        })
        .collect();
    let mut pooled = ConfusionMatrix::zeros(n_classes);
    for b in bundles {
        pooled.add(&b.confusion);
    }
    Aggregate {
        n_folds: bundles.len(),
        accuracy: collect(&|b| b.accuracy),
        macro_precision: collect(&|b| b.macro_precision),
        macro_recall: collect(&|b| b.macro_recall),
        macro_f1: collect(&|b| b.macro_f1),
        weighted_f1: collect(&|b| b.weighted_f1),
        per_class,
        pooled_confusion: pooled,
    }
}

// ---------------------------------------------------------------------------
// embedding geometry

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub a: usize,
    pub b: usize,
    /// `1 − cos` between the renormalized class centroids.
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// Mean within-class pairwise cosine; absent below two embeddings.
    pub compactness: Vec<Option<f64>>,
    /// Every class pair `a < b` whose centroids are both defined.
    pub separation: Vec<PairSeparation>,
}

impl GeometryReport {
    pub fn separation_of(&self, a: usize, b: usize) -> Option<f64> {
        let (a, b) = (a.min(b), a.max(b));
        self.separation
            .iter()
            .find(|p| p.a == a && p.b == b)
            .map(|p| p.separation)
    }

    /// Mean over the classes whose compactness is defined.
    pub fn mean_compactness(&self) -> Option<f64> {
        let v: Vec<f64> = self.compactness.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn geometry(z: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<GeometryReport> {
    if z.len() != labels.len() {
        return Err(MetricsError::Length {
            truth: labels.len(),
            pred: z.len(),
        });
    }
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_classes];
    for (v, &l) in z.iter().zip(labels) {
        if l >= n_classes {
            return Err(MetricsError::Label { label: l, n_classes });
        }
        if let Ok(u) = grad::l2_normalize(v) {
            members[l].push(u);
        }
    }
    let compactness = members
        .iter()
        .map(|m| {
            let n = m.len();
            if n < 2 {
                return None;
            }
            // Σ_{i<j} uᵢ·uⱼ = (‖Σu‖² − n) / 2 for unit u
            let dim = m[0].len();
            let mut sum = vec![0.0; dim];
            for u in m {
                for (s, x) in sum.iter_mut().zip(u) {
                    *s += x;
                }
            }
            let pairs = (n * (n - 1) / 2) as f64;
            Some(((grad::dot(&sum, &sum) - n as f64) / 2.0 / pairs).clamp(-1.0, 1.0))
        })
        .collect();
    let centroids: Vec<Option<Vec<f64>>> = members
        .iter()
        .map(|m| {
            let first = m.first()?;
            let mut c = vec![0.0; first.len()];
            for u in m {
                for (s, x) in c.iter_mut().zip(u) {
                    *s += x;
                }
            }
            grad::l2_normalize(&c).ok()
        })
        .collect();
    let mut separation = Vec::new();
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            if let (Some(ca), Some(cb)) = (&centroids[a], &centroids[b]) {
                separation.push(PairSeparation {
                    a,
                    b,
                    separation: (1.0 - grad::dot(ca, cb)).clamp(0.0, 2.0),
                });
            }
        }
    }
    Ok(GeometryReport {
        compactness,
        separation,
    })
}

// ---------------------------------------------------------------------------
// report files

/// Which report files `emit_report` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

/// Labels for the class-table rows.
#[derive(Debug, Clone)]
pub struct ReportLabels<'a> {
    pub task: &'a str,
    pub method: &'a str,
    pub model: &'a str,
    pub class_names: &'a [String],
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-class table with columns `task, method, model, class, precision,
/// recall, f1`; fold means per class, then `macro avg` and `weighted avg`
/// rows.
pub fn write_class_table(path: &Path, labels: &ReportLabels, agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "method", "model", "class", "precision", "recall", "f1"])?;
    let row = |class: &str, p: f64, r: f64, f: f64| -> Vec<String> {
        vec![
            labels.task.to_string(),
            labels.method.to_string(),
            labels.model.to_string(),
            class.to_string(),
            format!("{p:.4}"),
            format!("{r:.4}"),
            format!("{f:.4}"),
        ]
    };
    for (name, c) in labels.class_names.iter().zip(&agg.per_class) {
        w.write_record(row(name, c.precision.mean, c.recall.mean, c.f1.mean))?;
    }
    w.write_record(row(
        "macro avg",
        agg.macro_precision.mean,
        agg.macro_recall.mean,
        agg.macro_f1.mean,
    ))?;
    w.write_record(vec![
        labels.task.to_string(),
        labels.method.to_string(),
        labels.model.to_string(),
        "weighted avg".to_string(),
        String::new(),
        String::new(),
        format!("{:.4}", agg.weighted_f1.mean),
    ])?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Row-normalized confusion matrix, 4 decimals, header `true\pred` then
/// class names.
pub fn write_normalized_confusion(
    path: &Path,
    cm: &ConfusionMatrix,
    class_names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in class_names.iter().zip(normalized(cm)) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `classes.csv`, `aggregate.json` and `fold_<k>_confusion.csv`
/// into `dir`. Returns the paths written.
pub fn emit_report(
    dir: &Path,
    labels: &ReportLabels,
    folds: &[(usize, &MetricsBundle)],
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bundles: Vec<&MetricsBundle> = folds.iter().map(|(_, b)| *b).collect();
    let agg = aggregate(&bundles, labels.class_names.len());
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let path = dir.join("classes.csv");
        write_class_table(&path, labels, &agg)?;
        written.push(path);
        for (k, b) in folds {
            let path = dir.join(format!("fold_{k}_confusion.csv"));
            write_normalized_confusion(&path, &b.confusion, labels.class_names)?;
            written.push(path);
        }
    }
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let path = dir.join("aggregate.json");
        write_json(&path, &agg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn confusion_counts_by_hand() {
        let m = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m, cm(&[&[1, 1], &[0, 1]]));
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        let perfect = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(perfect, cm(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 2]]));
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn two_class_hand_values() {
        let b = MetricsBundle::from_confusion(cm(&[&[2, 1], &[0, 3]]));
        let c = &b.per_class.classes;
        assert!((c[0].precision - 1.0).abs() < 1e-12);
        assert!((c[0].recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[0].f1 - 0.8).abs() < 1e-12);
        assert!((c[1].precision - 0.75).abs() < 1e-12);
        assert!((c[1].recall - 1.0).abs() < 1e-12);
        assert!((c[1].f1 - 6.0 / 7.0).abs() < 1e-12);
        assert!((b.macro_f1 - (0.8 + 6.0 / 7.0) / 2.0).abs() < 1e-12);
        assert!((b.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((b.weighted_f1 - (3.0 * 0.8 + 3.0 * 6.0 / 7.0) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_perfect() {
        let b = MetricsBundle::from_confusion(cm(&[&[4, 0, 0], &[0, 2, 0], &[0, 0, 1]]));
        for v in [b.accuracy, b.macro_precision, b.macro_recall, b.macro_f1, b.weighted_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_division_gives_zero() {
        // class 2 never occurs and is never predicted; class 1 is never predicted
        let b = MetricsBundle::from_confusion(cm(&[&[2, 0, 0], &[1, 0, 0], &[0, 0, 0]]));
        let c = &b.per_class.classes;
        assert_eq!(c[1].precision, 0.0);
        assert_eq!(c[1].f1, 0.0);
        assert_eq!(c[2].f1, 0.0);
        // mean over classes 0 and 1 only
        assert!((b.macro_recall - 0.5).abs() < 1e-12);
        let n = normalized(&cm(&[&[2, 0, 0], &[1, 0, 0], &[0, 0, 0]]));
        assert_eq!(n[2], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn macro_mean_of_reference_row() {
        let f1s = [0.778, 0.850, 0.733, 0.654, 0.971, 0.691, 0.756];
        let report = ClassReport {
            classes: f1s
                .iter()
                .map(|&f1| ClassMetrics {
                    precision: 0.0,
                    recall: 0.0,
                    f1,
                    support: 1,
                    predicted: 1,
                })
                .collect(),
        };
        assert!((macro_avg(&report).f1 - 0.776).abs() <= 0.0005);
    }

    #[test]
    fn geometry_simple_cases() {
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 1.0]];
        let g = geometry(&z, &[0, 0, 1, 1], 2).unwrap();
        assert!((g.compactness[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((g.separation_of(0, 1).unwrap() - 1.0).abs() < 1e-12);
        let single = geometry(&z[..1], &[0], 2).unwrap();
        assert_eq!(single.compactness, vec![None, None]);
        assert!(single.separation.is_empty());
    }

    #[test]
    fn compactness_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let z: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                    grad::l2_normalize(&v).unwrap()
                })
                .collect();
            let mut brute = 0.0;
            let mut count = 0.0;
            for i in 0..4 {
                for j in i + 1..4 {
                    brute += grad::dot(&z[i], &z[j]);
                    count += 1.0;
                }
            }
            let g = geometry(&z, &[0; 4], 1).unwrap();
            assert!((g.compactness[0].unwrap() - brute / count).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = MetricsBundle::from_confusion(cm(&[&[1, 0], &[0, 1]]));
        let b = MetricsBundle::from_confusion(cm(&[&[0, 1], &[1, 0]]));
        let agg = aggregate(&[&a, &b], 2);
        assert_eq!(agg.accuracy.mean, 0.5);
        assert!((agg.accuracy.std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.pooled_confusion, cm(&[&[1, 1], &[1, 1]]));
    }

    #[test]
    fn emit_report_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let b = MetricsBundle::from_confusion(cm(&[&[2, 1], &[0, 3]]));
        let names = vec!["A, with comma".to_string(), "B".to_string()];
        let labels = ReportLabels {
            task: "2",
            method: "cl",
            model: "clam",
            class_names: &names,
        };
        let written = emit_report(dir.path(), &labels, &[(0, &b)], ReportFormat::Both).unwrap();
        assert_eq!(written.len(), 3);
        let table = fs::read_to_string(dir.path().join("classes.csv")).unwrap();
        assert!(table.starts_with("task,method,model,class,precision,recall,f1\n"));
        assert!(table.contains("\"A, with comma\",1.0000,0.6667,0.8000"));
        let conf = fs::read_to_string(dir.path().join("fold_0_confusion.csv")).unwrap();
        assert!(conf.contains("0.6667,0.3333"));
    }

    proptest! {
        #[test]
        fn invariants_on_random_matrices(
            counts in proptest::collection::vec(0u64..20, 16),
            perm_seed in 0u64..1000,
        ) {
            let m = ConfusionMatrix { counts: counts.chunks(4).map(|c| c.to_vec()).collect() };
            let b = MetricsBundle::from_confusion(m.clone());
            for (c, row) in m.counts.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<u64>(), b.per_class.classes[c].support);
            }
            for row in normalized(&m) {
                let s: f64 = row.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
            // relabel classes by a permutation
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut pm = ConfusionMatrix::zeros(4);
            for i in 0..4 {
                for j in 0..4 {
                    pm.counts[perm[i]][perm[j]] = m.counts[i][j];
                }
            }
            let pb = MetricsBundle::from_confusion(pm);
            prop_assert!((pb.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((pb.accuracy - b.accuracy).abs() < 1e-12);
        }

        #[test]
        fn weighted_equals_macro_for_equal_support(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..5, 3), 3),
        ) {
            // force equal row sums by topping up the diagonal
            let target = rows.iter().map(|r| r.iter().sum::<u64>()).max().unwrap().max(1);
            let mut m = ConfusionMatrix { counts: rows };
            for c in 0..3 {
                let s: u64 = m.counts[c].iter().sum();
                m.counts[c][c] += target - s;
            }
            let b = MetricsBundle::from_confusion(m);
            prop_assert!((b.weighted_f1 - b.macro_f1).abs() < 1e-12);
        }
    }
}
