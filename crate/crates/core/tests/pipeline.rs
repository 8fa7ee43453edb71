use egclmil::bagdata::{self, ConfusablePair, SyntheticSpec, Task, TaskSchema};
use egclmil::losses::{ExpertPairSet, LossConfig, LossMode};
use egclmil::model::{ModelKind, ModelSettings};
use egclmil::train::{self, Dataset, Experiment, TrainConfig};
use std::collections::HashMap;

fn separable_cohort() -> (bagdata::Cohort, Dataset) {
    let spec = SyntheticSpec {
        n_classes: 7,
        n_patients_per_class: 4,
        slides_per_patient: 1,
        patches_per_slide: (6, 10),
        embedding_dim: 16,
        class_centroid_separation: 8.0,
        confusable_pairs: vec![ConfusablePair { a: 3, b: 4, separation: 6.0 }],
        background_fraction: 0.3,
        seed: 11,
        patch_std: 0.5,
        slide_std: 0.0,
        class_names: None,
    };
    let cohort = bagdata::generate_synthetic_cohort(&spec).unwrap();
    let schema = TaskSchema::new(Task::SevenClass, &cohort.manifest.class_names).unwrap();
    let task = bagdata::remap_labels(&cohort.manifest, &schema).unwrap();
    let ds = Dataset::new(&cohort, &task);
    (cohort, ds)
}

fn experiment(ds: &Dataset, mode: LossMode) -> Experiment {
    Experiment {
        train: TrainConfig {
            epochs: 40,
            lr: 2e-3,
            patience: None,
            n_folds: 4,
            fractions: [0.5, 0.25, 0.25],
            ..TrainConfig::default()
        },
        model: ModelSettings {
            kind: ModelKind::Clam,
            proj_dim: 16,
            attn_hidden: 8,
            gated: true,
            k_instance: 2,
            mlp_hidden: 16,
        },
        loss: LossConfig {
            mode,
            lambda: if mode == LossMode::Baseline { 0.0 } else { 0.5 },
            queue_capacity: 16,
            ..LossConfig::default()
        },
        pairs: Some(ExpertPairSet::default_for(&ds.class_names, 2.0).unwrap()),
    }
}

/// Nearest train centroid of mean-pooled patches; the cohort is built so this
/// classifies every test slide correctly.
fn centroid_oracle_accuracy(cohort: &bagdata::Cohort, ds: &Dataset, train: &[String], test: &[String]) -> f64 {
    let pooled: HashMap<&str, Vec<f64>> = cohort
        .bags
        .iter()
        .map(|b| (b.slide_id.as_str(), b.mean_pooled()))
        .collect();
    let dim = ds.in_dim();
    let mut sums = vec![vec![0.0; dim]; ds.n_classes()];
    let mut counts = vec![0usize; ds.n_classes()];
    for s in ds.slides.iter().filter(|s| train.contains(&s.patient_id)) {
        for (acc, v) in sums[s.label].iter_mut().zip(&pooled[s.slide_id.as_str()]) {
            *acc += v;
        }
        counts[s.label] += 1;
    }
    let test_slides: Vec<_> = ds.slides.iter().filter(|s| test.contains(&s.patient_id)).collect();
    let correct = test_slides
        .iter()
        .filter(|s| {
            let x = &pooled[s.slide_id.as_str()];
            let dist = |c: usize| -> f64 {
                sums[c]
                    .iter()
                    .zip(x)
                    .map(|(m, v)| (m / counts[c] as f64 - v).powi(2))
                    .sum()
            };
            let best = (0..ds.n_classes())
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test_slides.len() as f64
}

#[test]
fn separable_cohort_is_learned_in_every_mode() {
    let (cohort, ds) = separable_cohort();
    let plan = train::stratified_patient_kfold(&ds, 4, [0.5, 0.25, 0.25], 42).unwrap();
    assert!(plan.warnings.is_empty());
    for fold in &plan.folds {
        assert_eq!(centroid_oracle_accuracy(&cohort, &ds, &fold.train, &fold.test), 1.0);
    }
    for mode in [LossMode::Baseline, LossMode::Cl, LossMode::Egcl] {
        let report = train::run_cv(&ds, &plan, &experiment(&ds, mode), 1, &train::no_events).unwrap();
        assert!(!report.summary.partial, "{mode:?}: {:?}", report.summary.failures);
        assert_eq!(report.summary.slide.accuracy.mean, 1.0, "{mode:?}");
        assert_eq!(report.summary.patient.accuracy.mean, 1.0, "{mode:?}");
    }
}

#[test]
fn cross_validation_is_reproducible_across_job_counts() {
    let (_, ds) = separable_cohort();
    let plan = train::stratified_patient_kfold(&ds, 4, [0.5, 0.25, 0.25], 7).unwrap();
    let exp = experiment(&ds, LossMode::Egcl);
    let serial = train::run_cv(&ds, &plan, &exp, 1, &train::no_events).unwrap();
    let parallel = train::run_cv(&ds, &plan, &exp, 4, &train::no_events).unwrap();
    assert_eq!(serial.summary, parallel.summary);
}
