//! Slide-level heads: multi-branch gated-attention CLAM and the two
//! mean-pooling baselines, each with a hand-chained backward pass.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, GradError, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("input has {got} columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("bag has no patches")]
    EmptyBag,
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("bag feature for the embedding is the zero vector")]
    DegenerateFeature,
    #[error("embedding gradient supplied but the forward pass produced no embedding")]
    NoEmbedding,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named parameter tensors, in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_squares()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn check_input(x: &Matrix, in_dim: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyBag);
    }
    if x.cols() != in_dim {
        return Err(ModelError::InputDim {
            expected: in_dim,
            got: x.cols(),
        });
    }
    Ok(())
}

/// `dW = Gᵀ X`, `db = colsum(G)` for a row-wise affine map, skipping `dX`.
fn linear_param_grads(x: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    let dw = grad::matmul_at(upstream, x)?;
    let db = Matrix::row_vector(&upstream.column_sums());
    Ok((dw, db))
}

// ---------------------------------------------------------------------------
// CLAM

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClamConfig {
    pub in_dim: usize,
    pub proj_dim: usize,
    pub attn_hidden: usize,
    pub n_classes: usize,
    pub gated: bool,
    pub k_instance: usize,
}

impl ClamConfig {
    pub fn new(in_dim: usize, n_classes: usize) -> Self {
        Self {
            in_dim,
            proj_dim: 512,
            attn_hidden: 256,
            n_classes,
            gated: true,
            k_instance: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_dim", self.in_dim),
            ("proj_dim", self.proj_dim),
            ("attn_hidden", self.attn_hidden),
            ("n_classes", self.n_classes),
            ("k_instance", self.k_instance),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClamParams {
    /// Projection, `proj_dim × in_dim`.
    pub w_proj: Matrix,
    pub b_proj: Matrix,
    /// tanh branch of the attention net, `attn_hidden × proj_dim`.
    pub attn_v: Matrix,
    pub attn_v_b: Matrix,
    /// sigmoid gate branch, same shape as `attn_v`. Unused when not gated.
    pub attn_u: Matrix,
    pub attn_u_b: Matrix,
    /// Per-class attention scorers, `n_classes × attn_hidden`.
    pub attn_w: Matrix,
    /// Per-class bag classifiers, `n_classes × proj_dim`.
    pub head_w: Matrix,
    pub head_b: Matrix,
    /// Per-class binary instance probes, `n_classes × proj_dim`.
    pub inst_w: Matrix,
    pub inst_b: Matrix,
}

impl ParamSet for ClamParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
            ("attn_v", &self.attn_v),
            ("attn_v_b", &self.attn_v_b),
            ("attn_u", &self.attn_u),
            ("attn_u_b", &self.attn_u_b),
            ("attn_w", &self.attn_w),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
            ("inst_w", &self.inst_w),
            ("inst_b", &self.inst_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
            ("attn_v", &mut self.attn_v),
            ("attn_v_b", &mut self.attn_v_b),
            ("attn_u", &mut self.attn_u),
            ("attn_u_b", &mut self.attn_u_b),
            ("attn_w", &mut self.attn_w),
            ("head_w", &mut self.head_w),
            ("head_b", &mut self.head_b),
            ("inst_w", &mut self.inst_w),
            ("inst_b", &mut self.inst_b),
        ]
    }
}

impl ClamParams {
    pub fn zeros(cfg: &ClamConfig) -> Self {
        let (d, h, c) = (cfg.proj_dim, cfg.attn_hidden, cfg.n_classes);
        Self {
            w_proj: Matrix::zeros(d, cfg.in_dim),
            b_proj: Matrix::zeros(1, d),
            attn_v: Matrix::zeros(h, d),
            attn_v_b: Matrix::zeros(1, h),
            attn_u: Matrix::zeros(h, d),
            attn_u_b: Matrix::zeros(1, h),
            attn_w: Matrix::zeros(c, h),
            head_w: Matrix::zeros(c, d),
            head_b: Matrix::zeros(1, c),
            inst_w: Matrix::zeros(c, d),
            inst_b: Matrix::zeros(1, c),
        }
    }

    /// Uniform in `±1/√fan_in` per layer.
    pub fn init(cfg: &ClamConfig, rng: &mut impl Rng) -> Self {
        let (d, h, c) = (cfg.proj_dim, cfg.attn_hidden, cfg.n_classes);
        Self {
            w_proj: uniform(rng, d, cfg.in_dim, cfg.in_dim),
            b_proj: uniform(rng, 1, d, cfg.in_dim),
            attn_v: uniform(rng, h, d, d),
            attn_v_b: uniform(rng, 1, h, d),
            attn_u: uniform(rng, h, d, d),
            attn_u_b: uniform(rng, 1, h, d),
            attn_w: uniform(rng, c, h, h),
            head_w: uniform(rng, c, d, d),
            head_b: uniform(rng, 1, c, d),
            inst_w: uniform(rng, c, d, d),
            inst_b: uniform(rng, 1, c, d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Projected patches, `P × proj_dim`.
    pub h: Matrix,
    tanh_branch: Matrix,
    gate_branch: Option<Matrix>,
    gated_hidden: Matrix,
    /// Raw attention scores, `P × C`.
    pub scores: Matrix,
    /// Attention weights, `P × C`; each column sums to 1.
    pub attention: Matrix,
    /// Class-specific bag features, `C × proj_dim`.
    pub bag_features: Matrix,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: Option<usize>,
    /// ℓ2-normalized bag feature of `label`.
    pub z: Option<Vec<f64>>,
}

/// Column-wise softmax: each column of the result sums to 1.
fn column_softmax(x: &Matrix) -> Matrix {
    grad::row_softmax(&x.transpose()).transpose()
}

pub fn clam_forward(
    x: &Matrix,
    params: &ClamParams,
    cfg: &ClamConfig,
    label: Option<usize>,
) -> Result<ForwardCache> {
    check_input(x, cfg.in_dim)?;
    if let Some(l) = label {
        if l >= cfg.n_classes {
            return Err(ModelError::Label {
                label: l,
                n_classes: cfg.n_classes,
            });
        }
    }
    let h = grad::linear(x, &params.w_proj, params.b_proj.data())?;
    let tanh_branch = grad::tanh(&grad::linear(&h, &params.attn_v, params.attn_v_b.data())?);
    let (gate_branch, gated_hidden) = if cfg.gated {
        let gate = grad::sigmoid(&grad::linear(&h, &params.attn_u, params.attn_u_b.data())?);
        let prod = grad::hadamard(&tanh_branch, &gate)?;
        (Some(gate), prod)
    } else {
        (None, tanh_branch.clone())
    };
    let scores = grad::matmul_bt(&gated_hidden, &params.attn_w)?;
    let attention = column_softmax(&scores);
    let bag_features = grad::matmul_at(&attention, &h)?;
    let logits: Vec<f64> = (0..cfg.n_classes)
        .map(|c| grad::dot(params.head_w.row(c), bag_features.row(c)) + params.head_b.data()[c])
        .collect();
    let probs = grad::softmax(&logits);
    let z = match label {
        Some(l) => Some(
            grad::l2_normalize(bag_features.row(l)).map_err(|_| ModelError::DegenerateFeature)?,
        ),
        None => None,
    };
    Ok(ForwardCache {
        h,
        tanh_branch,
        gate_branch,
        gated_hidden,
        scores,
        attention,
        bag_features,
        logits,
        probs,
        label,
        z,
    })
}

/// One attention-selected patch for the instance loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSelection {
    pub branch: usize,
    pub patch: usize,
    /// `+1` or `-1`.
    pub target: f64,
}

/// Patch indices ordered by attention for one branch, highest first; ties
/// go to the lower patch index.
fn attention_order(cache: &ForwardCache, branch: usize) -> Vec<usize> {
    let col = cache.attention.column(branch);
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    idx
}

/// Top-k / bottom-k patches on the true branch (targets +1 / −1) and the
/// top-k of every other branch (target −1). `k` shrinks to `P/2` for small
/// bags; a single-patch bag yields no selection.
pub fn instance_targets(cache: &ForwardCache, label: usize, k: usize) -> Vec<InstanceSelection> {
    let n_patches = cache.attention.rows();
    let k = k.min(n_patches / 2);
    if k == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for branch in 0..cache.attention.cols() {
        let order = attention_order(cache, branch);
        if branch == label {
            out.extend(order[..k].iter().map(|&patch| InstanceSelection {
                branch,
                patch,
                target: 1.0,
            }));
            out.extend(order[n_patches - k..].iter().map(|&patch| InstanceSelection {
                branch,
                patch,
                target: -1.0,
            }));
        } else {
            out.extend(order[..k].iter().map(|&patch| InstanceSelection {
                branch,
                patch,
                target: -1.0,
            }));
        }
    }
    out
}

/// Probe scores `inst_w[branch] · h[patch] + inst_b[branch]` for a selection.
pub fn instance_scores(
    cache: &ForwardCache,
    params: &ClamParams,
    selection: &[InstanceSelection],
) -> Vec<f64> {
    selection
        .iter()
        .map(|s| grad::dot(params.inst_w.row(s.branch), cache.h.row(s.patch)) + params.inst_b.data()[s.branch])
        .collect()
}

/// Loss gradients arriving at the CLAM outputs.
#[derive(Debug, Clone, Default)]
pub struct ClamUpstream {
    pub logits: Vec<f64>,
    pub z: Option<Vec<f64>>,
    /// Gradient per selected instance score, aligned with `selection`.
    pub instance: Vec<f64>,
    pub selection: Vec<InstanceSelection>,
}

pub fn clam_backward(
    x: &Matrix,
    cache: &ForwardCache,
    params: &ClamParams,
    cfg: &ClamConfig,
    upstream: &ClamUpstream,
) -> Result<ClamParams> {
    let c_count = cfg.n_classes;
    let mut grads = ClamParams::zeros(cfg);

    let mut d_bag = Matrix::zeros(c_count, cfg.proj_dim);
    for c in 0..c_count {
        let g = upstream.logits.get(c).copied().unwrap_or(0.0);
        if g == 0.0 {
            continue;
        }
        for (dw, r) in grads.head_w.row_mut(c).iter_mut().zip(cache.bag_features.row(c)) {
            *dw = g * r;
        }
        grads.head_b.data_mut()[c] = g;
        for (dr, w) in d_bag.row_mut(c).iter_mut().zip(params.head_w.row(c)) {
            *dr += g * w;
        }
    }
    if let Some(dz) = &upstream.z {
        let label = cache.label.ok_or(ModelError::NoEmbedding)?;
        let dr = grad::l2_normalize_backward(cache.bag_features.row(label), dz)
            .map_err(|_| ModelError::DegenerateFeature)?;
        for (acc, v) in d_bag.row_mut(label).iter_mut().zip(dr) {
            *acc += v;
        }
    }

    // R = Aᵀ H
    let d_attention = grad::matmul_bt(&cache.h, &d_bag)?;
    let mut d_h = grad::matmul(&cache.attention, &d_bag)?;

    // attention softmax runs over patches, i.e. down each column
    let d_scores = grad::row_softmax_backward(&cache.attention.transpose(), &d_attention.transpose())?
        .transpose();
    grads.attn_w = grad::matmul_at(&d_scores, &cache.gated_hidden)?;
    let d_hidden = grad::matmul(&d_scores, &params.attn_w)?;

    let d_tanh = match &cache.gate_branch {
        Some(gate) => {
            let (d_t, d_g) = grad::hadamard_backward(&cache.tanh_branch, gate, &d_hidden)?;
            let d_pre_u = grad::sigmoid_backward(gate, &d_g)?;
            let (dw, db) = linear_param_grads(&cache.h, &d_pre_u)?;
            grads.attn_u = dw;
            grads.attn_u_b = db;
            d_h.add_assign(&grad::matmul(&d_pre_u, &params.attn_u)?)?;
            d_t
        }
        None => d_hidden,
    };
    let d_pre_v = grad::tanh_backward(&cache.tanh_branch, &d_tanh)?;
    let (dw, db) = linear_param_grads(&cache.h, &d_pre_v)?;
    grads.attn_v = dw;
    grads.attn_v_b = db;
    d_h.add_assign(&grad::matmul(&d_pre_v, &params.attn_v)?)?;

    for (sel, &g) in upstream.selection.iter().zip(&upstream.instance) {
        if g == 0.0 {
            continue;
        }
        let hp = cache.h.row(sel.patch);
        for (dw, v) in grads.inst_w.row_mut(sel.branch).iter_mut().zip(hp) {
            *dw += g * v;
        }
        grads.inst_b.data_mut()[sel.branch] += g;
        let w = params.inst_w.row(sel.branch).to_vec();
        for (dh, wv) in d_h.row_mut(sel.patch).iter_mut().zip(w) {
            *dh += g * wv;
        }
    }

    let (dw, db) = linear_param_grads(x, &d_h)?;
    grads.w_proj = dw;
    grads.b_proj = db;
    Ok(grads)
}

// ---------------------------------------------------------------------------
// MeanMIL

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMilVariant {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanMilConfig {
    pub in_dim: usize,
    pub n_classes: usize,
    pub variant: MeanMilVariant,
    /// Hidden width of the MLP variant.
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanMilParams {
    /// MLP first layer, `hidden × in_dim`; absent for the linear variant.
    pub w1: Option<Matrix>,
    pub b1: Option<Matrix>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ParamSet for MeanMilParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w1), Some(b1)) = (&self.w1, &self.b1) {
            out.push(("w1", w1));
            out.push(("b1", b1));
        }
        out.push(("head_w", &self.head_w));
        out.push(("head_b", &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w1), Some(b1)) = (&mut self.w1, &mut self.b1) {
            out.push(("w1", w1));
            out.push(("b1", b1));
        }
        out.push(("head_w", &mut self.head_w));
        out.push(("head_b", &mut self.head_b));
        out
    }
}

impl MeanMilConfig {
    fn feature_dim(&self) -> usize {
        match self.variant {
            MeanMilVariant::Linear => self.in_dim,
            MeanMilVariant::Mlp => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.n_classes == 0 || self.hidden == 0 {
            return Err(ModelError::Config("meanmil dims must be >= 1".into()));
        }
        Ok(())
    }
}

impl MeanMilParams {
    pub fn zeros(cfg: &MeanMilConfig) -> Self {
        let (w1, b1) = match cfg.variant {
            MeanMilVariant::Linear => (None, None),
            MeanMilVariant::Mlp => (
                Some(Matrix::zeros(cfg.hidden, cfg.in_dim)),
                Some(Matrix::zeros(1, cfg.hidden)),
            ),
        };
        Self {
            w1,
            b1,
            head_w: Matrix::zeros(cfg.n_classes, cfg.feature_dim()),
            head_b: Matrix::zeros(1, cfg.n_classes),
        }
    }

    pub fn init(cfg: &MeanMilConfig, rng: &mut impl Rng) -> Self {
        let (w1, b1) = match cfg.variant {
            MeanMilVariant::Linear => (None, None),
            MeanMilVariant::Mlp => (
                Some(uniform(rng, cfg.hidden, cfg.in_dim, cfg.in_dim)),
                Some(uniform(rng, 1, cfg.hidden, cfg.in_dim)),
            ),
        };
        let f = cfg.feature_dim();
        Self {
            w1,
            b1,
            head_w: uniform(rng, cfg.n_classes, f, f),
            head_b: uniform(rng, 1, cfg.n_classes, f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanMilCache {
    pub pooled: Vec<f64>,
    pre_activation: Option<Vec<f64>>,
    /// Representation feeding the head: `pooled` or the MLP hidden layer.
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// ℓ2-normalized `feature`, when requested.
    pub z: Option<Vec<f64>>,
}

pub fn meanmil_forward(
    x: &Matrix,
    params: &MeanMilParams,
    cfg: &MeanMilConfig,
    with_embedding: bool,
) -> Result<MeanMilCache> {
    check_input(x, cfg.in_dim)?;
    let pooled: Vec<f64> = x
        .column_sums()
        .into_iter()
        .map(|v| v / x.rows() as f64)
        .collect();
    let (pre_activation, feature) = match (&params.w1, &params.b1) {
        (Some(w1), Some(b1)) => {
            let pre = grad::linear(&Matrix::row_vector(&pooled), w1, b1.data())?;
            let hidden = grad::relu(&pre);
            (Some(pre.into_data()), hidden.into_data())
        }
        _ => (None, pooled.clone()),
    };
    let logits = grad::linear(&Matrix::row_vector(&feature), &params.head_w, params.head_b.data())?
        .into_data();
    let probs = grad::softmax(&logits);
    let z = if with_embedding {
        Some(grad::l2_normalize(&feature).map_err(|_| ModelError::DegenerateFeature)?)
    } else {
        None
    };
    Ok(MeanMilCache {
        pooled,
        pre_activation,
        feature,
        logits,
        probs,
        z,
    })
}

pub fn meanmil_backward(
    cache: &MeanMilCache,
    params: &MeanMilParams,
    cfg: &MeanMilConfig,
    d_logits: &[f64],
    d_z: Option<&[f64]>,
) -> Result<MeanMilParams> {
    let mut grads = MeanMilParams::zeros(cfg);
    let feature = Matrix::row_vector(&cache.feature);
    let (d_feature, dw, db) =
        grad::linear_backward(&feature, &params.head_w, &Matrix::row_vector(d_logits))?;
    grads.head_w = dw;
    grads.head_b = Matrix::row_vector(&db);
    let mut d_feature = d_feature.into_data();
    if let Some(dz) = d_z {
        if cache.z.is_none() {
            return Err(ModelError::NoEmbedding);
        }
        let extra = grad::l2_normalize_backward(&cache.feature, dz)
            .map_err(|_| ModelError::DegenerateFeature)?;
        for (a, b) in d_feature.iter_mut().zip(extra) {
            *a += b;
        }
    }
    if let (Some(pre), Some(w1)) = (&cache.pre_activation, &params.w1) {
        let d_pre = grad::relu_backward(
            &Matrix::row_vector(pre),
            &Matrix::row_vector(&d_feature),
        )?;
        let (_, dw1, db1) = grad::linear_backward(&Matrix::row_vector(&cache.pooled), w1, &d_pre)?;
        grads.w1 = Some(dw1);
        grads.b1 = Some(Matrix::row_vector(&db1));
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// model selection and checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Clam,
    MeanmilLinear,
    MeanmilMlp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Clam => "clam",
            ModelKind::MeanmilLinear => "meanmil_linear",
            ModelKind::MeanmilMlp => "meanmil_mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    Clam(ClamConfig),
    #[serde(rename = "meanmil")]
    MeanMil(MeanMilConfig),
}

impl HeadConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            HeadConfig::Clam(_) => ModelKind::Clam,
            HeadConfig::MeanMil(c) => match c.variant {
                MeanMilVariant::Linear => ModelKind::MeanmilLinear,
                MeanMilVariant::Mlp => ModelKind::MeanmilMlp,
            },
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            HeadConfig::Clam(c) => c.n_classes,
            HeadConfig::MeanMil(c) => c.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HeadConfig::Clam(c) => c.validate(),
            HeadConfig::MeanMil(c) => c.validate(),
        }
    }
}

/// Architecture settings independent of the cohort's dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub kind: ModelKind,
    pub proj_dim: usize,
    pub attn_hidden: usize,
    pub gated: bool,
    pub k_instance: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            kind: ModelKind::Clam,
            proj_dim: 512,
            attn_hidden: 256,
            gated: true,
            k_instance: 8,
            mlp_hidden: 256,
        }
    }
}

impl ModelSettings {
    pub fn head_config(&self, in_dim: usize, n_classes: usize) -> HeadConfig {
        let meanmil = |variant| {
            HeadConfig::MeanMil(MeanMilConfig {
                in_dim,
                n_classes,
                variant,
                hidden: self.mlp_hidden,
            })
        };
        match self.kind {
            ModelKind::Clam => HeadConfig::Clam(ClamConfig {
                in_dim,
                proj_dim: self.proj_dim,
                attn_hidden: self.attn_hidden,
                n_classes,
                gated: self.gated,
                k_instance: self.k_instance,
            }),
            ModelKind::MeanmilLinear => meanmil(MeanMilVariant::Linear),
            ModelKind::MeanmilMlp => meanmil(MeanMilVariant::Mlp),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clam" => Ok(ModelKind::Clam),
            "meanmil_linear" => Ok(ModelKind::MeanmilLinear),
            "meanmil_mlp" => Ok(ModelKind::MeanmilMlp),
            _ => Err(format!("unknown model {s:?}")),
        }
    }
}

/// A configured head with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Clam { cfg: ClamConfig, params: ClamParams },
    MeanMil { cfg: MeanMilConfig, params: MeanMilParams },
}

impl Head {
    pub fn init(cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg {
            HeadConfig::Clam(c) => Head::Clam {
                cfg: *c,
                params: ClamParams::init(c, rng),
            },
            HeadConfig::MeanMil(c) => Head::MeanMil {
                cfg: *c,
                params: MeanMilParams::init(c, rng),
            },
        })
    }

    pub fn config(&self) -> HeadConfig {
        match self {
            Head::Clam { cfg, .. } => HeadConfig::Clam(*cfg),
            Head::MeanMil { cfg, .. } => HeadConfig::MeanMil(*cfg),
        }
    }

    pub fn params(&self) -> &dyn ParamSet {
        match self {
            Head::Clam { params, .. } => params,
            Head::MeanMil { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut dyn ParamSet {
        match self {
            Head::Clam { params, .. } => params,
            Head::MeanMil { params, .. } => params,
        }
    }

    /// Class probabilities for one bag.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Head::Clam { cfg, params } => Ok(clam_forward(x, params, cfg, None)?.probs),
            Head::MeanMil { cfg, params } => Ok(meanmil_forward(x, params, cfg, false)?.probs),
        }
    }

    /// Probabilities and the contrastive embedding for a labelled bag.
    pub fn predict_with_embedding(&self, x: &Matrix, label: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Head::Clam { cfg, params } => {
                let cache = clam_forward(x, params, cfg, Some(label))?;
                Ok((cache.probs, cache.z.expect("label supplied")))
            }
            Head::MeanMil { cfg, params } => {
                let cache = meanmil_forward(x, params, cfg, true)?;
                Ok((cache.probs, cache.z.expect("embedding requested")))
            }
        }
    }

    /// Checkpoint bytes: `"EGCK"` | u16 version | u32-length config JSON |
    /// u16 section count | per section: u16-length name, u32 rows, u32 cols,
    /// rows×cols f64 little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config()).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let tensors = self.params().tensors();
        out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(out)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: HeadConfig = serde_json::from_slice(take(len)?)
            .map_err(|e| bad(&format!("config json: {e}")))?;
        config.validate()?;
        let mut head = match &config {
            HeadConfig::Clam(c) => Head::Clam {
                cfg: *c,
                params: ClamParams::zeros(c),
            },
            HeadConfig::MeanMil(c) => Head::MeanMil {
                cfg: *c,
                params: MeanMilParams::zeros(c),
            },
        };
        let n_sections = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let mut tensors = head.params_mut().tensors_mut();
        if n_sections != tensors.len() {
            return Err(bad("section count does not match config"));
        }
        for (expected_name, m) in tensors.iter_mut() {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = take(name_len)?;
            if name != expected_name.as_bytes() {
                return Err(bad(&format!("expected section {expected_name}")));
            }
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if (rows, cols) != m.shape() {
                return Err(bad(&format!("section {expected_name} has wrong shape")));
            }
            let raw = take(rows * cols * 8)?;
            for (dst, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        drop(tensors);
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCK";
pub const CHECKPOINT_VERSION: u16 = 1;
