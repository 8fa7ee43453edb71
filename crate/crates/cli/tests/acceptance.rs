//! Acceptance criteria 1-9. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use egclmil::bagdata::Task;
use egclmil::grad::{self, Matrix};
use egclmil::losses::{self, ExpertPairSet, LossConfig, LossMode, MemoryQueue};
use egclmil::metrics::{self, ClassMetrics, ClassReport, ConfusionMatrix};
use egclmil::model::{self, ClamConfig, Head, HeadConfig, MeanMilConfig, MeanMilVariant};
use egclmil::objective::step_objective;
use egclmil::stain::{self, MacenkoParams, RgbPatch, StainBasis};
use egclmil::train::{self, CvSummary, DataSlide, Dataset, SweepReport};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if grad::norm(&v) > 1e-3 {
            return grad::l2_normalize(&v).unwrap();
        }
    }
}

fn random_bag(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Matrix {
    Matrix::from_fn(p, d, |_, _| rng.random_range(-1.5..1.5))
}

// ---------------------------------------------------------------------------
// 1. gradient soundness

fn models(c: usize) -> Vec<(&'static str, HeadConfig)> {
    let clam = |gated| {
        HeadConfig::Clam(ClamConfig {
            in_dim: 8,
            proj_dim: 8,
            attn_hidden: 4,
            n_classes: c,
            gated,
            k_instance: 2,
        })
    };
    let meanmil = |variant| {
        HeadConfig::MeanMil(MeanMilConfig {
            in_dim: 8,
            n_classes: c,
            variant,
            hidden: 8,
        })
    };
    vec![
        ("clam-gated", clam(true)),
        ("clam-ungated", clam(false)),
        ("meanmil-linear", meanmil(MeanMilVariant::Linear)),
        ("meanmil-mlp", meanmil(MeanMilVariant::Mlp)),
    ]
}

fn embedding_dim(hc: &HeadConfig) -> usize {
    match hc {
        HeadConfig::Clam(c) => c.proj_dim,
        HeadConfig::MeanMil(c) => match c.variant {
            MeanMilVariant::Linear => c.in_dim,
            MeanMilVariant::Mlp => c.hidden,
        },
    }
}

/// Largest `|a − n| / max(|a|, |n|, 1e-6)` over coordinates, with `n` the
/// central difference at step `h`.
fn finite_difference_error(
    f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    theta: &[f64],
    h: f64,
) -> f64 {
    let (_, analytic) = f(theta);
    let mut probe = theta.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe).0;
        probe[i] = theta[i] - h;
        let down = f(&probe).0;
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut checks = 0;
    let mut worst = 0.0_f64;
    for mode in [LossMode::Baseline, LossMode::Cl, LossMode::Egcl] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let c = rng.random_range(2..=4);
            for (name, hc) in models(c) {
                let head = Head::init(&hc, &mut rng).map_err(|e| e.to_string())?;
                let p = rng.random_range(1..=16);
                let x = random_bag(&mut rng, p, 8);
                let label = rng.random_range(0..c);
                let d = embedding_dim(&hc);
                let mut queue = MemoryQueue::new(8);
                for _ in 0..rng.random_range(0..=8) {
                    let z = unit_vec(&mut rng, d);
                    queue.push(&z, rng.random_range(0..c)).unwrap();
                }
                let pairs = ExpertPairSet::new(&[(0, 1), (1, c - 1)], c, 2.0).unwrap();
                let cfg = LossConfig {
                    mode,
                    lambda: 0.5,
                    ..Default::default()
                };
                let mut probe = head.clone();
                let mut f = |theta: &[f64]| {
                    probe.params_mut().assign_flat(theta);
                    let out = step_objective(&probe, &x, label, &queue, &cfg, Some(&pairs)).unwrap();
                    (out.terms.total, out.grads)
                };
                let err = finite_difference_error(&mut f, &head.params().flatten(), 1e-5);
                ensure(err < 1e-4, || {
                    format!("{name} {mode} seed {seed}: relative error {err:.3e}")
                })?;
                worst = worst.max(err);
                checks += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{checks} checks, worst relative error {worst:.2e}, {elapsed:.1?}"))
}

// ---------------------------------------------------------------------------
// 2. contrastive oracle

/// Direct evaluation: for each positive j, −log(exp(s_j/τ) / Σ_k w_k
/// exp(s_k/τ)), averaged; w_k = gamma for expert-paired classes.
fn brute_force_contrastive(
    z: &[f64],
    label: usize,
    queue: &[(Vec<f64>, usize)],
    tau: f64,
    pairs: Option<(&[(usize, usize)], f64)>,
) -> Option<(f64, Vec<f64>)> {
    let weight = |other: usize| -> f64 {
        match pairs {
            Some((list, gamma)) if list.iter().any(|&(a, b)| (a == label && b == other) || (b == label && a == other)) => gamma,
            _ => 1.0,
        }
    };
    let sim = |v: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..z.len() {
            s += z[i] * v[i];
        }
        s / tau
    };
    let mut denom = 0.0;
    for (v, l) in queue {
        denom += weight(*l) * sim(v).exp();
    }
    let positives: Vec<&(Vec<f64>, usize)> = queue.iter().filter(|(_, l)| *l == label).collect();
    if positives.is_empty() {
        return None;
    }
    let mut loss = 0.0;
    for (v, _) in &positives {
        loss -= (sim(v).exp() / denom).ln();
    }
    loss /= positives.len() as f64;
    // dL/dz = (1/τ) [Σ_k q_k v_k − mean_j v_j], q_k the weighted softmax
    let mut g = vec![0.0; z.len()];
    for (v, l) in queue {
        let q = weight(*l) * sim(v).exp() / denom;
        for i in 0..z.len() {
            g[i] += q * v[i] / tau;
        }
    }
    for (v, _) in &positives {
        for i in 0..z.len() {
            g[i] -= v[i] / (tau * positives.len() as f64);
        }
    }
    Some((loss, g))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut skipped, mut identity, mut worst) = (0, 0, 0.0_f64);
    for case in 0..1000 {
        let c = rng.random_range(2..=7);
        let d = *[4usize, 8, 16].choose(&mut rng).unwrap();
        let n = rng.random_range(0..=16);
        let label = rng.random_range(0..c);
        let tau = rng.random_range(0.05..1.0);
        let entries: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| (unit_vec(&mut rng, d), rng.random_range(0..c)))
            .collect();
        let mut queue = MemoryQueue::new(16);
        for (v, l) in &entries {
            queue.push(v, *l).unwrap();
        }
        let mut pair_list = Vec::new();
        for a in 0..c {
            for b in a + 1..c {
                if rng.random_bool(0.3) {
                    pair_list.push((a, b));
                }
            }
        }
        let gamma = if case % 4 == 0 { 1.0 } else { rng.random_range(1.0..5.0) };
        let z = unit_vec(&mut rng, d);
        let set = ExpertPairSet::new(&pair_list, c, gamma).unwrap();
        let got = losses::contrastive_loss(&z, label, &queue, tau, Some(&set)).map_err(|e| e.to_string())?;
        match brute_force_contrastive(&z, label, &entries, tau, Some((&pair_list, gamma))) {
            None => {
                ensure(got.skipped && got.loss == 0.0 && got.grad.iter().all(|g| *g == 0.0), || {
                    format!("case {case}: no positives but not skipped")
                })?;
                skipped += 1;
            }
            Some((loss, g)) => {
                ensure(!got.skipped, || format!("case {case}: skipped with positives"))?;
                let mut err = (got.loss - loss).abs();
                for (a, b) in got.grad.iter().zip(&g) {
                    err = err.max((a - b).abs());
                }
                ensure(err <= 1e-9, || format!("case {case}: |diff| {err:.3e}"))?;
                worst = worst.max(err);
            }
        }
        if gamma == 1.0 {
            let plain = losses::contrastive_loss(&z, label, &queue, tau, None).map_err(|e| e.to_string())?;
            ensure(plain == got, || format!("case {case}: gamma = 1 differs from CL"))?;
            identity += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 cases ({skipped} skipped, {identity} gamma=1 identities), max |diff| {worst:.2e}, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// 3. attention and normalization invariants

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut col_err, mut prob_err, mut z_err, mut perm_err) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..1000 {
        let c = rng.random_range(2..=7);
        let d = rng.random_range(2..=12);
        let cfg = ClamConfig {
            in_dim: d,
            proj_dim: rng.random_range(2..=16),
            attn_hidden: rng.random_range(1..=8),
            n_classes: c,
            gated: i % 2 == 0,
            k_instance: 2,
        };
        let params = model::ClamParams::init(&cfg, &mut rng);
        let p = rng.random_range(1..=40);
        let x = random_bag(&mut rng, p, d);
        let label = rng.random_range(0..c);
        let Ok(cache) = model::clam_forward(&x, &params, &cfg, Some(label)) else {
            return Err(format!("forward {i} failed"));
        };
        for s in cache.attention.column_sums() {
            col_err = col_err.max((s - 1.0).abs());
        }
        prob_err = prob_err.max((cache.probs.iter().sum::<f64>() - 1.0).abs());
        let z = cache.z.as_ref().ok_or("no embedding")?;
        z_err = z_err.max((grad::norm(z) - 1.0).abs());

        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rng);
        let permuted = Matrix::from_fn(p, d, |r, j| x[(order[r], j)]);
        let pc = model::clam_forward(&permuted, &params, &cfg, Some(label)).map_err(|e| e.to_string())?;
        for (a, b) in cache.probs.iter().zip(&pc.probs) {
            perm_err = perm_err.max((a - b).abs());
        }
        for (a, b) in z.iter().zip(pc.z.as_ref().unwrap()) {
            perm_err = perm_err.max((a - b).abs());
        }
        for r in 0..p {
            for k in 0..c {
                perm_err = perm_err.max((pc.attention[(r, k)] - cache.attention[(order[r], k)]).abs());
            }
        }
    }
    ensure(col_err <= 1e-9, || format!("attention column sum error {col_err:.3e}"))?;
    ensure(prob_err <= 1e-12, || format!("probability sum error {prob_err:.3e}"))?;
    ensure(z_err <= 1e-9, || format!("embedding norm error {z_err:.3e}"))?;
    ensure(perm_err <= 1e-10, || format!("permutation error {perm_err:.3e}"))?;
    Ok(format!(
        "1000 forwards: column {col_err:.1e}, probs {prob_err:.1e}, |z| {z_err:.1e}, permutation {perm_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. split integrity

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let c = rng.random_range(2..=7);
    let mut slides = Vec::new();
    for class in 0..c {
        let patients = rng.random_range(1..=12);
        for p in 0..patients {
            for s in 0..rng.random_range(1..=3) {
                slides.push(DataSlide {
                    slide_id: format!("c{class}p{p}s{s}"),
                    patient_id: format!("c{class}p{p}"),
                    label: class,
                    x: Matrix::filled(1, 2, 0.0),
                });
            }
        }
    }
    Dataset {
        task: Task::SevenClass,
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
        slides,
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut warned = 0;
    for cohort in 0..100 {
        let ds = random_dataset(&mut rng);
        let n_folds = rng.random_range(3..=10);
        let fractions = [0.8, 0.1, 0.1];
        let plan = train::stratified_patient_kfold(&ds, n_folds, fractions, 42).map_err(|e| e.to_string())?;
        let again = train::stratified_patient_kfold(&ds, n_folds, fractions, 42).map_err(|e| e.to_string())?;
        ensure(
            serde_json::to_vec(&plan).unwrap() == serde_json::to_vec(&again).unwrap(),
            || format!("cohort {cohort}: plan not reproducible"),
        )?;

        let mut patient_class: BTreeMap<String, usize> = BTreeMap::new();
        for s in &ds.slides {
            patient_class.insert(s.patient_id.clone(), s.label);
        }
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for c in patient_class.values() {
            *per_class.entry(*c).or_default() += 1;
        }
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        for fold in &plan.folds {
            let mut seen = BTreeMap::new();
            for (part, ids) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
                for id in ids {
                    ensure(seen.insert(id.as_str(), part).is_none(), || {
                        format!("cohort {cohort} fold {}: patient {id} in two partitions", fold.fold)
                    })?;
                }
            }
            ensure(seen.len() == patient_class.len(), || {
                format!("cohort {cohort} fold {}: partitions miss patients", fold.fold)
            })?;
            for id in &fold.test {
                *tested.entry(id.as_str()).or_default() += 1;
            }
            for (&class, &n) in &per_class {
                if n >= 3 {
                    for (part, ids) in [("val", &fold.val), ("test", &fold.test)] {
                        ensure(ids.iter().any(|id| patient_class[id] == class), || {
                            format!("cohort {cohort} fold {}: class {class} ({n} patients) missing from {part}", fold.fold)
                        })?;
                    }
                }
            }
        }
        if per_class.values().all(|&n| n >= 3) {
            ensure(plan.warnings.is_empty(), || format!("cohort {cohort}: spurious warnings"))?;
        } else if !plan.warnings.is_empty() {
            warned += 1;
        }
        let _ = tested;
    }
    Ok(format!("100 cohorts, no leakage, representation held where feasible ({warned} with warnings)"))
}

// ---------------------------------------------------------------------------
// 5. metrics arithmetic

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix {
        counts: rows.iter().map(|r| r.to_vec()).collect(),
    }
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= 1e-12, || format!("{what}: {a} vs {b}"))
}

fn criterion_5() -> Outcome {
    let m = cm(&[&[2, 1], &[0, 3]]);
    let r = metrics::per_class_prf(&m);
    close(r.classes[0].precision, 1.0, "P0")?;
    close(r.classes[0].recall, 2.0 / 3.0, "R0")?;
    close(r.classes[0].f1, 0.8, "F0")?;
    close(r.classes[1].precision, 0.75, "P1")?;
    close(r.classes[1].recall, 1.0, "R1")?;
    close(r.classes[1].f1, 6.0 / 7.0, "F1")?;
    close(metrics::macro_avg(&r).f1, (0.8 + 6.0 / 7.0) / 2.0, "macro F1")?;
    close(metrics::weighted_f1(&r), (3.0 * 0.8 + 3.0 * 6.0 / 7.0) / 6.0, "weighted F1")?;
    close(metrics::accuracy(&m), 5.0 / 6.0, "accuracy")?;

    // 3 classes, unequal support, one class never predicted
    let m = cm(&[&[3, 1, 0], &[1, 4, 0], &[2, 0, 0]]);
    let r = metrics::per_class_prf(&m);
    let (p0, r0) = (3.0 / 6.0, 3.0 / 4.0);
    let (p1, r1) = (4.0 / 5.0, 4.0 / 5.0);
    let f0 = 2.0 * p0 * r0 / (p0 + r0);
    let f1 = 2.0 * p1 * r1 / (p1 + r1);
    close(r.classes[2].f1, 0.0, "zero-division F1")?;
    close(metrics::macro_avg(&r).precision, (p0 + p1) / 3.0, "macro P")?;
    close(metrics::macro_avg(&r).recall, (r0 + r1) / 3.0, "macro R")?;
    close(metrics::macro_avg(&r).f1, (f0 + f1) / 3.0, "macro F1 3-class")?;
    close(metrics::weighted_f1(&r), (4.0 * f0 + 5.0 * f1) / 11.0, "weighted F1 3-class")?;
    close(metrics::accuracy(&m), 7.0 / 11.0, "accuracy 3-class")?;
    let n = metrics::normalized(&m);
    close(n[2][0], 1.0, "normalized row")?;

    let row = [0.778, 0.850, 0.733, 0.654, 0.971, 0.691, 0.756];
    let report = ClassReport {
        classes: row
            .iter()
            .map(|&f1| ClassMetrics {
                precision: f1,
                recall: f1,
                f1,
                support: 1,
                predicted: 1,
            })
            .collect(),
    };
    let macro_f1 = metrics::macro_avg(&report).f1;
    ensure((macro_f1 - 0.776).abs() <= 0.0005, || format!("reference row macro F1 {macro_f1}"))?;
    Ok(format!("hand-computed matrices exact to 1e-12; reference 7-class row macro F1 {macro_f1:.5}"))
}

// ---------------------------------------------------------------------------
// 6. Macenko

fn phantom(rng: &mut ChaCha8Rng, basis: &StainBasis, side: usize) -> RgbPatch {
    let conc: Vec<[f64; 2]> = (0..side * side)
        .map(|i| match i % 10 {
            0..=2 => [rng.random_range(0.4..1.2), 0.0],
            3..=5 => [0.0, rng.random_range(0.4..1.2)],
            _ => [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)],
        })
        .collect();
    stain::synthesize_patch(&conc, basis, side, side).unwrap()
}

fn max_diff(a: &RgbPatch, b: &RgbPatch) -> u8 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = MacenkoParams::default();
    let reference = StainBasis::reference();
    let source = StainBasis {
        h: unit3([0.68, 0.66, 0.32]),
        e: unit3([0.30, 0.80, 0.52]),
        max_c: [1.2, 0.9],
    };
    let mut worst_angle = 0.0_f64;
    for truth in [&reference, &source] {
        let patch = phantom(&mut rng, truth, 64);
        let est = stain::estimate_patch_basis(&patch, &params).map_err(|e| e.to_string())?;
        worst_angle = worst_angle
            .max(stain::angle_degrees(&est.h, &truth.h))
            .max(stain::angle_degrees(&est.e, &truth.e));
    }
    ensure(worst_angle < 1.0, || format!("basis recovered within {worst_angle:.3} degrees"))?;

    let white = RgbPatch::filled(8, 8, [255, 255, 255]);
    let out = stain::normalize_patch(&white, &source, &reference).map_err(|e| e.to_string())?;
    let white_diff = max_diff(&white, &out);
    ensure(white_diff <= 2, || format!("white patch moved a channel by {white_diff}"))?;

    let patch = phantom(&mut rng, &reference, 32);
    let own = stain::estimate_patch_basis(&patch, &params).map_err(|e| e.to_string())?;
    let self_norm = stain::normalize_patch(&patch, &own, &own).map_err(|e| e.to_string())?;
    let self_diff = max_diff(&patch, &self_norm);
    ensure(self_diff <= 2, || format!("self-normalization moved a channel by {self_diff}"))?;

    let src = phantom(&mut rng, &source, 32);
    let b1 = stain::estimate_patch_basis(&src, &params).map_err(|e| e.to_string())?;
    let once = stain::normalize_patch(&src, &b1, &reference).map_err(|e| e.to_string())?;
    let b2 = stain::estimate_patch_basis(&once, &params).map_err(|e| e.to_string())?;
    let twice = stain::normalize_patch(&once, &b2, &reference).map_err(|e| e.to_string())?;
    let idem = max_diff(&once, &twice);
    ensure(idem <= 2, || format!("second application moved a channel by {idem}"))?;
    Ok(format!(
        "basis within {worst_angle:.3} deg, white ±{white_diff}, self-identity ±{self_diff}, idempotent ±{idem}"
    ))
}

// ---------------------------------------------------------------------------
// CLI-driven experiments on the shipped synthetic cohort

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn egclmil(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_egclmil"))
        .args(args)
        .env("EGCLMIL_LOG", "info")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        let err = String::from_utf8_lossy(&out.stderr);
        let tail: Vec<&str> = err.lines().rev().take(3).collect();
        Err(format!("egclmil {} failed: {}", args.join(" "), tail.join(" | ")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
/// Planted confusable pairs of the shipped spec.
const PLANTED: [(usize, usize); 3] = [(3, 4), (5, 6), (0, 1)];

/// Generates the shipped cohort and a run config pointing at it.
fn workspace() -> Result<Workspace, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().to_path_buf();
    let cohort = root.join("cohort");
    let spec = configs_dir().join("synthetic_confusable.json");
    egclmil(&["synth", "--config", spec.to_str().unwrap(), "--out", cohort.to_str().unwrap()])?;
    let mut cfg: Value = read_json(&configs_dir().join("synthetic_run.json"))?;
    cfg["paths"]["cohort"] = Value::String(cohort.join("manifest.json").display().to_string());
    cfg["paths"]["runs_dir"] = Value::String(root.join("runs").display().to_string());
    let config = root.join("run.json");
    fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
    Ok(Workspace {
        _dir: dir,
        root,
        config,
    })
}

fn train_run(ws: &Workspace, mode: &str, lambda: &str, seed: u64, out: &Path) -> Result<PathBuf, String> {
    let seed_s = seed.to_string();
    egclmil(&[
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--mode",
        mode,
        "--lambda",
        lambda,
        "--gamma",
        "2",
        "--seed",
        &seed_s,
        "--out",
        out.to_str().unwrap(),
    ])?;
    Ok(out.join(format!("task7_clam_{mode}_lambda{lambda}_seed{seed}")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn pooled_sd(a: &[f64], b: &[f64]) -> f64 {
    ((sample_sd(a).powi(2) + sample_sd(b).powi(2)) / 2.0).sqrt()
}

struct ArmStats {
    f1: Vec<f64>,
    compactness: Vec<f64>,
    separation: Vec<f64>,
}

fn arm(ws: &Workspace, mode: &str, lambda: &str) -> Result<ArmStats, String> {
    let mut s = ArmStats {
        f1: Vec::new(),
        compactness: Vec::new(),
        separation: Vec::new(),
    };
    for seed in SEEDS {
        let run = train_run(ws, mode, lambda, seed, &ws.root.join("c7"))?;
        let summary: CvSummary = read_json(&run.join("aggregate.json"))?;
        s.f1.push(summary.slide.macro_f1.mean);
        s.compactness.push(summary.geometry.mean_compactness.mean);
        let mut sep = 0.0;
        for (a, b) in PLANTED {
            sep += summary
                .geometry
                .separation_of(a, b)
                .ok_or_else(|| format!("no separation for pair ({a}, {b})"))?
                .mean;
        }
        s.separation.push(sep / PLANTED.len() as f64);
    }
    Ok(s)
}

fn criterion_7(ws: &Workspace) -> Outcome {
    let start = Instant::now();
    let base = arm(ws, "baseline", "0")?;
    let cl = arm(ws, "cl", "0.5")?;
    let egcl = arm(ws, "egcl", "0.5")?;
    let (f1_base, f1_cl) = (mean(&base.f1), mean(&cl.f1));
    let comp_gap = mean(&egcl.compactness) - mean(&base.compactness);
    let comp_sd = pooled_sd(&egcl.compactness, &base.compactness);
    let sep_gap = mean(&egcl.separation) - mean(&base.separation);
    let sep_sd = pooled_sd(&egcl.separation, &base.separation);
    let detail = format!(
        "macro F1 cl {f1_cl:.4} vs baseline {f1_base:.4}; compactness gap {comp_gap:.4} (pooled sd {comp_sd:.4}); \
         planted-pair separation gap {sep_gap:.4} (pooled sd {sep_sd:.4})"
    );
    ensure(f1_cl >= f1_base, || format!("CL below baseline: {detail}"))?;
    ensure(comp_gap > comp_sd, || format!("compactness margin too small: {detail}"))?;
    ensure(sep_gap > sep_sd, || format!("separation margin too small: {detail}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(20 * 60), || format!("took {elapsed:?}"))?;
    Ok(format!("{detail}; {elapsed:.0?}"))
}

const SWEEP_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0, 2.0];
const SWEEP_REPEATS: u64 = 3;

fn criterion_8(ws: &Workspace) -> Outcome {
    let out = ws.root.join("sweeps");
    let grid: Vec<String> = SWEEP_GRID.iter().map(|l| l.to_string()).collect();
    egclmil(&[
        "sweep",
        "--config",
        ws.config.to_str().unwrap(),
        "--grid",
        &grid.join(","),
        "--modes",
        "cl",
        "--repeats",
        &SWEEP_REPEATS.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let dir = out.join("sweep_task7_clam_seed42");
    let csv = fs::read_to_string(dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 1 + SWEEP_GRID.len(), || format!("sweep.csv has {} lines", lines.len()))?;
    let report: SweepReport = read_json(&dir.join("sweep.json"))?;
    ensure(report.rows.iter().all(|r| r.n_runs == 3 && r.failed_runs == 0), || {
        "incomplete sweep rows".into()
    })?;
    let flagged: Vec<&&str> = lines.iter().filter(|l| l.ends_with(",true")).collect();
    ensure(flagged.len() == 1, || format!("{} rows flagged as arg-max", flagged.len()))?;
    let best = report.argmax_row().ok_or("no arg-max row")?;
    let top = report.rows.iter().map(|r| r.macro_f1.mean).fold(f64::NEG_INFINITY, f64::max);
    ensure(best.macro_f1.mean == top, || "arg-max flag is not on the best row".into())?;

    // independent baseline runs against the λ = 0 row
    let mut baseline_f1 = Vec::new();
    for seed in SEEDS.iter().take(SWEEP_REPEATS as usize) {
        let run = train_run(ws, "baseline", "0", *seed, &ws.root.join("c8"))?;
        let swept = dir.join(format!("lambda0_cl_seed{seed}"));
        let summary: CvSummary = read_json(&run.join("aggregate.json"))?;
        for k in &summary.completed_folds {
            let a = fs::read(run.join(format!("fold_{k}/result.json"))).map_err(|e| e.to_string())?;
            let b = fs::read(swept.join(format!("fold_{k}/result.json"))).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("seed {seed} fold {k}: λ=0 sweep result differs from baseline"))?;
        }
        baseline_f1.push(summary.slide.macro_f1.mean);
    }
    let row0 = report.row(0.0, LossMode::Cl).ok_or("no λ=0 row")?;
    let expected = metrics::mean_std(&baseline_f1);
    ensure(row0.macro_f1 == expected, || {
        format!("λ=0 row {:?} vs baseline {:?}", row0.macro_f1, expected)
    })?;
    let csv_row0 = lines[1].split(',').collect::<Vec<_>>();
    ensure(csv_row0[6] == format!("{:.6}", expected.mean), || "λ=0 csv row disagrees".into())?;

    let interior: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.lambda > 0.0 && r.lambda < 2.0)
        .map(|r| r.macro_f1.mean)
        .collect();
    let at_two = report.row(2.0, LossMode::Cl).ok_or("no λ=2 row")?.macro_f1.mean;
    let interior_mean = mean(&interior);
    ensure(interior_mean > at_two, || {
        format!("interior mean F1 {interior_mean:.4} does not beat λ=2.0 {at_two:.4}")
    })?;
    Ok(format!(
        "7 rows, λ=0 row equals baseline runs exactly, arg-max λ={} (F1 {:.4}), interior mean {interior_mean:.4} > λ=2.0 {at_two:.4}",
        best.lambda, best.macro_f1.mean
    ))
}

fn criterion_9(ws: &Workspace) -> Outcome {
    let first = train_run(ws, "egcl", "0.5", 42, &ws.root.join("c9a"))?;
    let effective = first.join("effective_config.json");
    let rerun_root = ws.root.join("c9b");
    egclmil(&[
        "train",
        "--config",
        effective.to_str().unwrap(),
        "--out",
        rerun_root.to_str().unwrap(),
        "--jobs",
        "1",
    ])?;
    let rerun = rerun_root.join(first.file_name().unwrap());
    let summary: CvSummary = read_json(&first.join("aggregate.json"))?;
    for k in &summary.completed_folds {
        let a = fs::read(first.join(format!("fold_{k}/result.json"))).map_err(|e| e.to_string())?;
        let b = fs::read(rerun.join(format!("fold_{k}/result.json"))).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("fold {k}: result.json differs"))?;
    }
    let a = fs::read(first.join("aggregate.json")).map_err(|e| e.to_string())?;
    let b = fs::read(rerun.join("aggregate.json")).map_err(|e| e.to_string())?;
    ensure(a == b, || "aggregate.json differs".into())?;
    Ok(format!("{} fold results byte-identical on rerun", summary.completed_folds.len()))
}

fn report(n: usize, name: &str, outcome: &Outcome, elapsed: Duration) {
    let line = match outcome {
        Ok(detail) => format!("criterion {n} ({name}): PASS - {detail} [{elapsed:.1?}]"),
        Err(reason) => format!("criterion {n} ({name}): FAIL - {reason} [{elapsed:.1?}]"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn main() {
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        report(n, name, &outcome, start.elapsed());
        if outcome.is_err() {
            failed += 1;
        }
    };
    run(1, "gradient soundness", &criterion_1);
    run(2, "contrastive oracle", &criterion_2);
    run(3, "attention and normalization invariants", &criterion_3);
    run(4, "split integrity", &criterion_4);
    run(5, "metrics arithmetic", &criterion_5);
    run(6, "Macenko correctness", &criterion_6);
    match workspace() {
        Ok(ws) => {
            run(7, "synthetic contrastive benefit", &|| criterion_7(&ws));
            run(8, "lambda sweep shape", &|| criterion_8(&ws));
            run(9, "determinism", &|| criterion_9(&ws));
        }
        Err(e) => {
            for (n, name) in [(7, "synthetic contrastive benefit"), (8, "lambda sweep shape"), (9, "determinism")] {
                run(n, name, &|| Err(format!("cohort setup failed: {e}")));
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
