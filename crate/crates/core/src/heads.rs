//! Classification output layers.
//!
//! Three heads over a shared d-dimensional feature vector:
//!
//! - [`CapsuleHead`]: one capsule subspace per class, scored by projection
//!   length; the class with the longest capsule wins.
//! - [`LinearHead`]: plain softmax logits `w_l^T x`.
//! - [`GroupNeuronHead`]: groups an unconstrained linear map's outputs into
//!   c-sized capsules and scores them by Euclidean length, with no
//!   orthogonal projection — the ablation that isolates what the projection
//!   itself contributes.
//!
//! All three train against the same negative log softmax over their scores,
//! computed with max subtraction so large scores cannot overflow.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsule::{length_guard, CapsuleError, CapsuleSubspace, ProjectionResult, SigmaMode};
use crate::linalg::{outer, LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("class {class}: {source}")]
    Subspace { class: usize, source: CapsuleError },
    #[error("head needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("subspace {index} has shape ({d}, {c}), expected ({expected_d}, {expected_c})")]
    MixedShapes {
        index: usize,
        d: usize,
        c: usize,
        expected_d: usize,
        expected_c: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("forward state does not belong to this head kind")]
    StateMismatch,
    #[error("group-neuron output dimension {dim} is not divisible by group size {group}")]
    BadGrouping { dim: usize, group: usize },
}

/// Scores plus cached forward intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    scores: Vec<f64>,
    predicted: usize,
    state: ForwardState,
}

#[derive(Debug, Clone)]
enum ForwardState {
    Capsule(Vec<ProjectionResult>),
    Linear,
    Group { grouped: Vector, input_norm: f64 },
}

impl HeadOutput {
    /// One score per class: capsule lengths or logits.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Argmax class, lowest index on ties.
    pub fn predicted(&self) -> usize {
        self.predicted
    }

    /// Cached per-class projections (capsule heads only).
    pub fn projections(&self) -> Option<&[ProjectionResult]> {
        match &self.state {
            ForwardState::Capsule(p) => Some(p),
            _ => None,
        }
    }
}

/// Gradients wrt a head's parameters, shaped like the head itself.
#[derive(Debug, Clone)]
pub enum HeadGrads {
    /// One d×c matrix per class.
    Capsule(Vec<Matrix>),
    /// d×L.
    Linear(Matrix),
    /// d×(L*c).
    GroupNeuron(Matrix),
}

impl HeadGrads {
    pub fn zeros_like(head: &Head) -> Self {
        match head {
            Head::Capsule(h) => HeadGrads::Capsule(
                (0..h.num_classes())
                    .map(|_| Matrix::zeros(h.feature_dim(), h.capsule_dim()))
                    .collect(),
            ),
            Head::Linear(h) => {
                HeadGrads::Linear(Matrix::zeros(h.feature_dim(), h.num_classes()))
            }
            Head::GroupNeuron(h) => HeadGrads::GroupNeuron(Matrix::zeros(
                h.feature_dim(),
                h.num_classes() * h.group_dim(),
            )),
        }
    }

    /// `self += scale * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &HeadGrads, scale: f64) -> Result<(), HeadError> {
        match (self, other) {
            (HeadGrads::Capsule(a), HeadGrads::Capsule(b)) if a.len() == b.len() => {
                for (m, g) in a.iter_mut().zip(b) {
                    m.add_scaled(g, scale)?;
                }
                Ok(())
            }
            (HeadGrads::Linear(a), HeadGrads::Linear(b)) => {
                a.add_scaled(b, scale)?;
                Ok(())
            }
            (HeadGrads::GroupNeuron(a), HeadGrads::GroupNeuron(b)) => {
                a.add_scaled(b, scale)?;
                Ok(())
            }
            _ => Err(HeadError::StateMismatch),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        match self {
            HeadGrads::Capsule(ms) => ms.iter_mut().for_each(|m| m.scale_in_place(s)),
            HeadGrads::Linear(m) | HeadGrads::GroupNeuron(m) => m.scale_in_place(s),
        }
    }
}

/// Result of a backward pass through a head.
#[derive(Debug, Clone)]
pub struct HeadBackward {
    pub weights: HeadGrads,
    /// Gradient wrt the input feature vector, for the backbone.
    pub input: Vector,
}

/// Numerically stable softmax probabilities (max subtraction).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Negative log softmax of the true class's score.
pub fn softmax_loss(scores: &[f64], label: usize) -> Result<f64, HeadError> {
    if label >= scores.len() {
        return Err(HeadError::BadLabel {
            label,
            num_classes: scores.len(),
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(max + log_sum - scores[label])
}

/// `softmax - onehot(label)`: the back-propagated error per class.
fn softmax_error(scores: &[f64], label: usize) -> Result<Vec<f64>, HeadError> {
    if label >= scores.len() {
        return Err(HeadError::BadLabel {
            label,
            num_classes: scores.len(),
        });
    }
    let mut err = softmax(scores);
    err[label] -= 1.0;
    Ok(err)
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Capsule projection head: L subspaces sharing (d, c).
#[derive(Debug, Clone)]
pub struct CapsuleHead {
    subspaces: Vec<CapsuleSubspace>,
}

impl CapsuleHead {
    pub fn new(subspaces: Vec<CapsuleSubspace>) -> Result<Self, HeadError> {
        if subspaces.len() < 2 {
            return Err(HeadError::TooFewClasses(subspaces.len()));
        }
        let d = subspaces[0].input_dim();
        let c = subspaces[0].capsule_dim();
        for (i, s) in subspaces.iter().enumerate() {
            if s.input_dim() != d || s.capsule_dim() != c {
                return Err(HeadError::MixedShapes {
                    index: i,
                    d: s.input_dim(),
                    c: s.capsule_dim(),
                    expected_d: d,
                    expected_c: c,
                });
            }
        }
        Ok(Self { subspaces })
    }

    pub fn random<R: Rng>(
        num_classes: usize,
        d: usize,
        c: usize,
        sigma_mode: SigmaMode,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self, HeadError> {
        let subspaces = (0..num_classes)
            .map(|class| {
                CapsuleSubspace::random(d, c, sigma_mode, eps, rng)
                    .map_err(|source| HeadError::Subspace { class, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(subspaces)
    }

    pub fn num_classes(&self) -> usize {
        self.subspaces.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.subspaces[0].input_dim()
    }

    pub fn capsule_dim(&self) -> usize {
        self.subspaces[0].capsule_dim()
    }

    pub fn subspaces(&self) -> &[CapsuleSubspace] {
        &self.subspaces
    }

    pub(crate) fn subspaces_mut(&mut self) -> &mut [CapsuleSubspace] {
        &mut self.subspaces
    }

    /// Scores are the L capsule lengths.
    pub fn forward(&self, x: &Vector) -> Result<HeadOutput, HeadError> {
        let mut projections = Vec::with_capacity(self.subspaces.len());
        for (class, s) in self.subspaces.iter().enumerate() {
            projections
                .push(s.project(x).map_err(|source| HeadError::Subspace { class, source })?);
        }
        let scores: Vec<f64> = projections.iter().map(|p| p.length()).collect();
        Ok(HeadOutput {
            predicted: argmax_lowest(&scores),
            scores,
            state: ForwardState::Capsule(projections),
        })
    }

    pub fn loss(&self, x: &Vector, label: usize) -> Result<f64, HeadError> {
        let out = self.forward(x)?;
        softmax_loss(out.scores(), label)
    }

    /// Chain rule through the softmax loss: class l's basis receives
    /// `(softmax_l - 1[l = y])` times the length gradient; the input gradient
    /// sums `err_l * v_l / |v_l|` over classes. Classes whose capsule length
    /// is under the guard threshold contribute zero.
    pub fn backward(
        &self,
        x: &Vector,
        label: usize,
        out: &HeadOutput,
    ) -> Result<HeadBackward, HeadError> {
        let projections = match &out.state {
            ForwardState::Capsule(p) => p,
            _ => return Err(HeadError::StateMismatch),
        };
        let err = softmax_error(out.scores(), label)?;
        let mut grads = Vec::with_capacity(self.subspaces.len());
        let mut grad_x = Vector::zeros(x.dim());
        for ((s, proj), &e) in self.subspaces.iter().zip(projections).zip(&err) {
            let g = s.length_gradient_from(proj);
            let mut gw = g.weight;
            gw.scale_in_place(e);
            grads.push(gw);
            grad_x.add_scaled(&g.input, e)?;
        }
        Ok(HeadBackward {
            weights: HeadGrads::Capsule(grads),
            input: grad_x,
        })
    }
}

/// Softmax logits `W^T x`; the conventional output layer.
#[derive(Debug, Clone)]
pub struct LinearHead {
    /// d×L; column l scores class l.
    weight: Matrix,
}

impl LinearHead {
    pub fn new(weight: Matrix) -> Result<Self, HeadError> {
        if weight.cols() < 2 {
            return Err(HeadError::TooFewClasses(weight.cols()));
        }
        Ok(Self { weight })
    }

    pub fn random<R: Rng>(num_classes: usize, d: usize, rng: &mut R) -> Result<Self, HeadError> {
        Self::new(random_weight(d, num_classes, rng))
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn forward(&self, x: &Vector) -> Result<HeadOutput, HeadError> {
        let logits = self.weight.tmatvec(x)?;
        let scores = logits.as_slice().to_vec();
        Ok(HeadOutput {
            predicted: argmax_lowest(&scores),
            scores,
            state: ForwardState::Linear,
        })
    }

    pub fn loss(&self, x: &Vector, label: usize) -> Result<f64, HeadError> {
        let out = self.forward(x)?;
        softmax_loss(out.scores(), label)
    }

    /// Standard softmax cross-entropy: `grad_W = x (softmax - onehot)^T`.
    pub fn backward(
        &self,
        x: &Vector,
        label: usize,
        out: &HeadOutput,
    ) -> Result<HeadBackward, HeadError> {
        if !matches!(out.state, ForwardState::Linear) {
            return Err(HeadError::StateMismatch);
        }
        let err = Vector::from_vec(softmax_error(out.scores(), label)?);
        let grad_w = outer(x, &err);
        let grad_x = self.weight.matvec(&err)?;
        Ok(HeadBackward {
            weights: HeadGrads::Linear(grad_w),
            input: grad_x,
        })
    }
}

/// Length-scored groups of plain linear outputs: capsules without projection.
#[derive(Debug, Clone)]
pub struct GroupNeuronHead {
    /// d×(L*c); group l occupies columns l*c..(l+1)*c.
    weight: Matrix,
    group_dim: usize,
}

impl GroupNeuronHead {
    pub fn new(weight: Matrix, group_dim: usize) -> Result<Self, HeadError> {
        if group_dim == 0 || weight.cols() % group_dim != 0 {
            return Err(HeadError::BadGrouping {
                dim: weight.cols(),
                group: group_dim,
            });
        }
        let classes = weight.cols() / group_dim;
        if classes < 2 {
            return Err(HeadError::TooFewClasses(classes));
        }
        Ok(Self { weight, group_dim })
    }

    pub fn random<R: Rng>(
        num_classes: usize,
        d: usize,
        group_dim: usize,
        rng: &mut R,
    ) -> Result<Self, HeadError> {
        Self::new(random_weight(d, num_classes * group_dim, rng), group_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols() / self.group_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn group_dim(&self) -> usize {
        self.group_dim
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    /// Scores are the Euclidean lengths of the grouped outputs `W^T x`.
    pub fn forward(&self, x: &Vector) -> Result<HeadOutput, HeadError> {
        let grouped = self.weight.tmatvec(x)?;
        let scores: Vec<f64> = grouped
            .as_slice()
            .chunks(self.group_dim)
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(HeadOutput {
            predicted: argmax_lowest(&scores),
            scores,
            state: ForwardState::Group {
                grouped,
                input_norm: x.norm2(),
            },
        })
    }

    pub fn loss(&self, x: &Vector, label: usize) -> Result<f64, HeadError> {
        let out = self.forward(x)?;
        softmax_loss(out.scores(), label)
    }

    /// Per-group length gradient is the normalized group output; groups under
    /// the same guard threshold as capsule lengths contribute zero.
    pub fn backward(
        &self,
        x: &Vector,
        label: usize,
        out: &HeadOutput,
    ) -> Result<HeadBackward, HeadError> {
        let (grouped, input_norm) = match &out.state {
            ForwardState::Group {
                grouped,
                input_norm,
            } => (grouped, *input_norm),
            _ => return Err(HeadError::StateMismatch),
        };
        let err = softmax_error(out.scores(), label)?;
        let guard = length_guard(input_norm);
        let mut grad_t = Vector::zeros(grouped.dim());
        for (l, &e) in err.iter().enumerate() {
            let len = out.scores[l];
            if len <= guard {
                continue;
            }
            let scale = e / len;
            for k in 0..self.group_dim {
                let idx = l * self.group_dim + k;
                grad_t.set(idx, scale * grouped.get(idx));
            }
        }
        let grad_w = outer(x, &grad_t);
        let grad_x = self.weight.matvec(&grad_t)?;
        Ok(HeadBackward {
            weights: HeadGrads::GroupNeuron(grad_w),
            input: grad_x,
        })
    }
}

fn random_weight<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    Matrix::new(rows, cols, data).expect("consistent dims")
}

/// Which head a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Capsule,
    Linear,
    GroupNeuron,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Capsule => write!(f, "capsule"),
            HeadKind::Linear => write!(f, "linear"),
            HeadKind::GroupNeuron => write!(f, "group_neuron"),
        }
    }
}

/// Any of the three heads, with uniform dispatch.
#[derive(Debug, Clone)]
pub enum Head {
    Capsule(CapsuleHead),
    Linear(LinearHead),
    GroupNeuron(GroupNeuronHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Capsule(_) => HeadKind::Capsule,
            Head::Linear(_) => HeadKind::Linear,
            Head::GroupNeuron(_) => HeadKind::GroupNeuron,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Head::Capsule(h) => h.num_classes(),
            Head::Linear(h) => h.num_classes(),
            Head::GroupNeuron(h) => h.num_classes(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Head::Capsule(h) => h.feature_dim(),
            Head::Linear(h) => h.feature_dim(),
            Head::GroupNeuron(h) => h.feature_dim(),
        }
    }

    pub fn forward(&self, x: &Vector) -> Result<HeadOutput, HeadError> {
        match self {
            Head::Capsule(h) => h.forward(x),
            Head::Linear(h) => h.forward(x),
            Head::GroupNeuron(h) => h.forward(x),
        }
    }

    pub fn loss(&self, x: &Vector, label: usize) -> Result<f64, HeadError> {
        match self {
            Head::Capsule(h) => h.loss(x, label),
            Head::Linear(h) => h.loss(x, label),
            Head::GroupNeuron(h) => h.loss(x, label),
        }
    }

    pub fn backward(
        &self,
        x: &Vector,
        label: usize,
        out: &HeadOutput,
    ) -> Result<HeadBackward, HeadError> {
        match self {
            Head::Capsule(h) => h.backward(x, label, out),
            Head::Linear(h) => h.backward(x, label, out),
            Head::GroupNeuron(h) => h.backward(x, label, out),
        }
    }

    /// `params += scale * grads`, without sigma maintenance.
    pub fn apply_update(&mut self, grads: &HeadGrads, scale: f64) -> Result<(), HeadError> {
        match (self, grads) {
            (Head::Capsule(h), HeadGrads::Capsule(gs)) if gs.len() == h.num_classes() => {
                for (class, (s, g)) in h.subspaces_mut().iter_mut().zip(gs).enumerate() {
                    s.update_weight(g, scale)
                        .map_err(|source| HeadError::Subspace { class, source })?;
                }
                Ok(())
            }
            (Head::Linear(h), HeadGrads::Linear(g)) => {
                h.weight.add_scaled(g, scale)?;
                Ok(())
            }
            (Head::GroupNeuron(h), HeadGrads::GroupNeuron(g)) => {
                h.weight.add_scaled(g, scale)?;
                Ok(())
            }
            _ => Err(HeadError::StateMismatch),
        }
    }

    /// Exact sigma refresh on every subspace; errors name the class.
    /// Returns how many classes needed the eps fallback.
    pub fn refresh_sigmas(&mut self) -> Result<usize, HeadError> {
        match self {
            Head::Capsule(h) => {
                let mut fallbacks = 0;
                for (class, s) in h.subspaces_mut().iter_mut().enumerate() {
                    let r = s
                        .refresh_sigma()
                        .map_err(|source| HeadError::Subspace { class, source })?;
                    if r.used_eps_fallback {
                        fallbacks += 1;
                    }
                }
                Ok(fallbacks)
            }
            _ => Ok(0),
        }
    }

    /// One hyper-power step on every subspace, falling back to an exact
    /// refresh for any subspace whose step diverged. Errors name the class.
    pub fn hyperpower_sigmas(&mut self) -> Result<(), HeadError> {
        match self {
            Head::Capsule(h) => {
                for (class, s) in h.subspaces_mut().iter_mut().enumerate() {
                    match s.hyperpower_step() {
                        Ok(()) => {}
                        Err(CapsuleError::SigmaDiverged) => {
                            s.refresh_sigma()
                                .map_err(|source| HeadError::Subspace { class, source })?;
                        }
                        Err(source) => return Err(HeadError::Subspace { class, source }),
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
