//! Finite-difference verification of every analytical gradient.
//!
//! Four suites: the capsule length gradient (wrt basis and input), the loss
//! gradients of all three heads, end-to-end backbone+head gradients, and the
//! c = 1 equivalence between the capsule length and weight normalization.
//!
//! Central differences use a per-entry step `1e-6 * max(1, |theta|)`. The
//! reported relative error is `|a - n| / (max(|a|, |n|) + 1e-3)`; the additive
//! floor keeps finite-difference roundoff (~1e-9 absolute on these scales)
//! from dominating entries whose true gradient is near zero, while leaving
//! the check strict for every entry of ordinary size.

use crate::backbone::Mlp;
use crate::capsule::{weight_norm_length, CapsuleSubspace, SigmaMode, DEFAULT_EPS};
use crate::heads::{
    CapsuleHead, GroupNeuronHead, Head, HeadGrads, LinearHead,
};
use crate::linalg::{Matrix, Vector};
use crate::seed::{child_seed, stream_rng};
use crate::train::TrainError;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Scale-floored relative error between an analytical and a numerical value.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-3)
}

/// Central difference of `f` at `x0` with step `1e-6 * max(1, |x0|)`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    let h = 1e-6 * x0.abs().max(1.0);
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCase {
    pub d: usize,
    pub c: usize,
    pub seed: u64,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub comparisons: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst: Option<WorstCase>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// (d, c) grid the capsule suite cycles through.
    pub dims: Vec<(usize, usize)>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            tolerance: 1e-5,
            dims: vec![(8, 1), (8, 2), (8, 4), (64, 1), (64, 2), (64, 4), (64, 8)],
        }
    }
}

struct Tracker {
    max_rel_err: f64,
    comparisons: usize,
    worst: Option<WorstCase>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            comparisons: 0,
            worst: None,
        }
    }

    fn observe(&mut self, d: usize, c: usize, seed: u64, param: String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.comparisons += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some(WorstCase {
                d,
                c,
                seed,
                param,
                analytic,
                numeric,
            });
        }
    }

    fn report(self, suite: &str, cases: usize, tolerance: f64) -> SuiteReport {
        SuiteReport {
            suite: suite.to_string(),
            cases,
            comparisons: self.comparisons,
            max_rel_err: self.max_rel_err,
            tolerance,
            worst: self.worst,
        }
    }
}

fn random_vector<R: Rng>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_vec((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Capsule length under a perturbed basis entry, recomputing sigma exactly so
/// the derivative of the Gram inverse is part of what gets differentiated.
fn length_with_weight(weight: &Matrix, x: &Vector, i: usize, j: usize, v: f64) -> f64 {
    let mut w = weight.clone();
    w.set(i, j, v);
    let s = CapsuleSubspace::new(w, SigmaMode::Exact, DEFAULT_EPS).expect("perturbed basis");
    s.project(x).expect("projection").length()
}

/// Checks the analytical capsule length gradient against central differences
/// over the configured (d, c) grid.
pub fn capsule_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, TrainError> {
    let mut tracker = Tracker::new();
    for trial in 0..cfg.trials {
        let (d, c) = cfg.dims[trial % cfg.dims.len()];
        let case_seed = child_seed(cfg.seed, &format!("gradcheck/capsule/{trial}"));
        let mut rng = stream_rng(case_seed, "case");
        let subspace = CapsuleSubspace::random(d, c, SigmaMode::Exact, DEFAULT_EPS, &mut rng)?;
        let x = random_vector(d, &mut rng);
        let grad = subspace.length_gradient(&x)?;
        for i in 0..d {
            for j in 0..c {
                let numeric = central_diff(
                    |v| length_with_weight(subspace.weight(), &x, i, j, v),
                    subspace.weight().get(i, j),
                );
                tracker.observe(d, c, case_seed, format!("w[{i},{j}]"), grad.weight.get(i, j), numeric);
            }
        }
        for k in 0..d {
            let numeric = central_diff(
                |v| {
                    let mut xp = x.clone();
                    xp.set(k, v);
                    subspace.project(&xp).expect("projection").length()
                },
                x.get(k),
            );
            tracker.observe(d, c, case_seed, format!("x[{k}]"), grad.input.get(k), numeric);
        }
    }
    Ok(tracker.report("capsule-length", cfg.trials, cfg.tolerance))
}

fn head_loss(head: &Head, x: &Vector, y: usize) -> f64 {
    head.loss(x, y).expect("head loss")
}

fn rebuild_capsule_head(head: &CapsuleHead, class: usize, weight: Matrix) -> Head {
    let mut subspaces = head.subspaces().to_vec();
    let template = &subspaces[class];
    subspaces[class] =
        CapsuleSubspace::new(weight, template.sigma_mode(), template.eps()).expect("rebuilt");
    Head::Capsule(CapsuleHead::new(subspaces).expect("rebuilt head"))
}

/// Checks loss gradients of all three head types (weights and input) against
/// central differences on small random instances.
pub fn head_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, TrainError> {
    let (l, d, c) = (4, 16, 2);
    let mut tracker = Tracker::new();
    for trial in 0..cfg.trials {
        let case_seed = child_seed(cfg.seed, &format!("gradcheck/head/{trial}"));
        let mut rng = stream_rng(case_seed, "case");
        let x = random_vector(d, &mut rng);
        let y = rng.random_range(0..l);
        let heads = [
            Head::Capsule(CapsuleHead::random(l, d, c, SigmaMode::Exact, DEFAULT_EPS, &mut rng)?),
            Head::Linear(LinearHead::random(l, d, &mut rng)?),
            Head::GroupNeuron(GroupNeuronHead::random(l, d, c, &mut rng)?),
        ];
        for head in &heads {
            let out = head.forward(&x)?;
            let back = head.backward(&x, y, &out)?;
            let tag = head.kind().to_string();
            match (&back.weights, head) {
                (HeadGrads::Capsule(grads), Head::Capsule(h)) => {
                    for (class, g) in grads.iter().enumerate() {
                        let weight = h.subspaces()[class].weight().clone();
                        for i in 0..d {
                            for j in 0..c {
                                let numeric = central_diff(
                                    |v| {
                                        let mut w = weight.clone();
                                        w.set(i, j, v);
                                        head_loss(&rebuild_capsule_head(h, class, w), &x, y)
                                    },
                                    weight.get(i, j),
                                );
                                tracker.observe(
                                    d,
                                    c,
                                    case_seed,
                                    format!("{tag}/w{class}[{i},{j}]"),
                                    g.get(i, j),
                                    numeric,
                                );
                            }
                        }
                    }
                }
                (HeadGrads::Linear(g), Head::Linear(h)) => {
                    let weight = h.weight().clone();
                    for i in 0..weight.rows() {
                        for j in 0..weight.cols() {
                            let numeric = central_diff(
                                |v| {
                                    let mut w = weight.clone();
                                    w.set(i, j, v);
                                    head_loss(
                                        &Head::Linear(LinearHead::new(w).expect("rebuilt")),
                                        &x,
                                        y,
                                    )
                                },
                                weight.get(i, j),
                            );
                            tracker.observe(
                                d,
                                c,
                                case_seed,
                                format!("{tag}/w[{i},{j}]"),
                                g.get(i, j),
                                numeric,
                            );
                        }
                    }
                }
                (HeadGrads::GroupNeuron(g), Head::GroupNeuron(h)) => {
                    let weight = h.weight().clone();
                    for i in 0..weight.rows() {
                        for j in 0..weight.cols() {
                            let numeric = central_diff(
                                |v| {
                                    let mut w = weight.clone();
                                    w.set(i, j, v);
                                    head_loss(
                                        &Head::GroupNeuron(
                                            GroupNeuronHead::new(w, c).expect("rebuilt"),
                                        ),
                                        &x,
                                        y,
                                    )
                                },
                                weight.get(i, j),
                            );
                            tracker.observe(
                                d,
                                c,
                                case_seed,
                                format!("{tag}/w[{i},{j}]"),
                                g.get(i, j),
                                numeric,
                            );
                        }
                    }
                }
                _ => unreachable!("grads kind always matches head kind"),
            }
            for k in 0..d {
                let numeric = central_diff(
                    |v| {
                        let mut xp = x.clone();
                        xp.set(k, v);
                        head_loss(head, &xp, y)
                    },
                    x.get(k),
                );
                tracker.observe(d, c, case_seed, format!("{tag}/x[{k}]"), back.input.get(k), numeric);
            }
        }
    }
    Ok(tracker.report("head-loss", cfg.trials, cfg.tolerance))
}

fn end_to_end_loss(backbone: &Mlp, head: &Head, input: &Vector, y: usize) -> f64 {
    let features = backbone.features(input).expect("forward");
    head.loss(&features, y).expect("loss")
}

/// Checks the full backbone + capsule-head loss gradient on every parameter
/// and on the raw input.
pub fn end_to_end_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, TrainError> {
    let (input_dim, hidden, d, l, c) = (6, 10, 8, 3, 2);
    let mut tracker = Tracker::new();
    for trial in 0..cfg.trials {
        let case_seed = child_seed(cfg.seed, &format!("gradcheck/endtoend/{trial}"));
        let mut rng = stream_rng(case_seed, "case");
        let backbone = Mlp::random(&[input_dim, hidden, d], &mut rng)?;
        let head = Head::Capsule(CapsuleHead::random(
            l,
            d,
            c,
            SigmaMode::Exact,
            DEFAULT_EPS,
            &mut rng,
        )?);
        let input = random_vector(input_dim, &mut rng);
        let y = rng.random_range(0..l);

        let (features, tape) = backbone.forward(&input)?;
        let out = head.forward(&features)?;
        let hb = head.backward(&features, y, &out)?;
        let (layer_grads, grad_input) = backbone.backward(&tape, &hb.input)?;

        for (li, g) in layer_grads.iter().enumerate() {
            let layer = &backbone.layers()[li];
            for i in 0..layer.weight.rows() {
                for j in 0..layer.weight.cols() {
                    let numeric = central_diff(
                        |v| {
                            let mut net = backbone.clone();
                            net.layers_mut()[li].weight.set(i, j, v);
                            end_to_end_loss(&net, &head, &input, y)
                        },
                        layer.weight.get(i, j),
                    );
                    tracker.observe(
                        d,
                        c,
                        case_seed,
                        format!("layer{li}.w[{i},{j}]"),
                        g.weight.get(i, j),
                        numeric,
                    );
                }
            }
            for i in 0..layer.bias.dim() {
                let numeric = central_diff(
                    |v| {
                        let mut net = backbone.clone();
                        net.layers_mut()[li].bias.set(i, v);
                        end_to_end_loss(&net, &head, &input, y)
                    },
                    layer.bias.get(i),
                );
                tracker.observe(
                    d,
                    c,
                    case_seed,
                    format!("layer{li}.b[{i}]"),
                    g.bias.get(i),
                    numeric,
                );
            }
        }
        if let (HeadGrads::Capsule(grads), Head::Capsule(h)) = (&hb.weights, &head) {
            for (class, g) in grads.iter().enumerate() {
                let weight = h.subspaces()[class].weight().clone();
                for i in 0..d {
                    for j in 0..c {
                        let numeric = central_diff(
                            |v| {
                                let mut w = weight.clone();
                                w.set(i, j, v);
                                end_to_end_loss(
                                    &backbone,
                                    &rebuild_capsule_head(h, class, w),
                                    &input,
                                    y,
                                )
                            },
                            weight.get(i, j),
                        );
                        tracker.observe(
                            d,
                            c,
                            case_seed,
                            format!("head.w{class}[{i},{j}]"),
                            g.get(i, j),
                            numeric,
                        );
                    }
                }
            }
        }
        for k in 0..input_dim {
            let numeric = central_diff(
                |v| {
                    let mut xp = input.clone();
                    xp.set(k, v);
                    end_to_end_loss(&backbone, &head, &xp, y)
                },
                input.get(k),
            );
            tracker.observe(d, c, case_seed, format!("input[{k}]"), grad_input.get(k), numeric);
        }
    }
    Ok(tracker.report("end-to-end", cfg.trials, cfg.tolerance))
}

/// Checks that `|w^T x| / |w|` equals the c = 1 capsule length. The two
/// routes agree to roundoff, so this suite uses a 1e-12 tolerance on
/// `|a - b| / max(|a|, |b|, 1)` regardless of the configured one.
pub fn weight_norm_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, TrainError> {
    let d = 64;
    let mut tracker = Tracker::new();
    for trial in 0..cfg.trials {
        let case_seed = child_seed(cfg.seed, &format!("gradcheck/weightnorm/{trial}"));
        let mut rng = stream_rng(case_seed, "case");
        let w = random_vector(d, &mut rng);
        let x = random_vector(d, &mut rng);
        let via_norm = weight_norm_length(&w, &x)?;
        let weight = Matrix::new(d, 1, w.as_slice().to_vec()).expect("column");
        let subspace = CapsuleSubspace::new(weight, SigmaMode::Exact, 0.0)?;
        let via_projection = subspace.project(&x)?.length();
        let err = (via_norm - via_projection).abs() / via_norm.abs().max(via_projection.abs()).max(1.0);
        tracker.comparisons += 1;
        if err > tracker.max_rel_err {
            tracker.max_rel_err = err;
            tracker.worst = Some(WorstCase {
                d,
                c: 1,
                seed: case_seed,
                param: "length".into(),
                analytic: via_norm,
                numeric: via_projection,
            });
        }
    }
    Ok(tracker.report("weight-norm-equivalence", cfg.trials, 1e-12))
}

/// Runs all four suites.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<SuiteReport>, TrainError> {
    Ok(vec![
        capsule_suite(cfg)?,
        head_suite(cfg)?,
        end_to_end_suite(cfg)?,
        weight_norm_suite(cfg)?,
    ])
}
