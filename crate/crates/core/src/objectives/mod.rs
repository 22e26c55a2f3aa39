//! Feature-level domain-adversarial objectives.
//!
//! Three objective families share one notation:
//!
//! * **DANN**: an `N`-way classifier `C` and a separate discriminator `D`
//!   giving the probability that a feature came from the target domain.
//! * **DANN-SS**: a single `(N+1)`-way classifier `C̃` whose last entry is
//!   the target-domain class.
//! * **DANN-EM**: DANN-SS with an entropy term on target predictions.
//!
//! All builders return the objectives in the form they are *maximized*
//! (log-likelihoods, hence non-positive). Training minimizes their
//! negations; see [`step::alternating_step`].
//!
//! Class labels are zero-based: `0..N`, with index `N` reserved for the
//! target class of an augmented score.

pub mod step;

pub use step::{alternating_step, evaluate_objectives, Objective, StepLosses, StepMode, UdaModel, UdaOptimizer};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Tensor, Var, LOG_CLAMP};

/// Tolerance on probability vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(what: &'static str, probs: &[f64]) -> Result<()> {
    if let Some(&bad) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::NotAProbability { what, value: bad });
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid("probabilities must sum to one"));
    }
    Ok(())
}

/// `N`-way class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore(Vec<f64>);

impl ClassScore {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty { what: "class score" });
        }
        check_simplex("class score", &probs)?;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// `(N+1)`-way probabilities; the last entry scores the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedClassScore(Vec<f64>);

impl AugmentedClassScore {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid("augmented score needs at least one class plus the target entry"));
        }
        check_simplex("augmented class score", &probs)?;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Number of real classes `N`.
    pub fn classes(&self) -> usize {
        self.0.len() - 1
    }

    /// `C̃(N+1)`.
    pub fn target_score(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// `C̃(y | Y) = C̃(y) / (1 - C̃(N+1))` for `y` in `0..N`.
pub fn conditional_class_score(s: &AugmentedClassScore) -> Result<ClassScore> {
    let t = s.target_score();
    if t >= 1.0 - 1e-12 {
        return Err(Error::DegenerateDenominator { value: t });
    }
    let denom = 1.0 - t;
    Ok(ClassScore(s.probs()[..s.classes()].iter().map(|p| p / denom).collect()))
}

/// Row-wise [`conditional_class_score`] over a `[batch, N+1]` tensor.
pub fn conditional_scores(aug: &Tensor) -> Result<Tensor> {
    let cols = *aug.shape().last().ok_or(Error::Empty { what: "scores" })?;
    let rows = aug.len() / cols;
    let mut out = Vec::with_capacity(rows * (cols - 1));
    for r in 0..rows {
        let row = AugmentedClassScore(aug.data()[r * cols..(r + 1) * cols].to_vec());
        out.extend(conditional_class_score(&row)?.0);
    }
    Tensor::new(vec![rows, cols - 1], out)
}

/// Mean over rows of `-Σ p log p`, with `0 log 0 = 0`.
pub fn prediction_entropy(scores: &Tensor) -> Result<f64> {
    let cols = *scores.shape().last().ok_or(Error::Empty { what: "scores" })?;
    let rows = scores.len() / cols;
    let mut total = 0.0;
    for row in scores.data().chunks(cols) {
        let mut h = 0.0;
        for &p in row {
            if !(p >= 0.0) {
                return Err(Error::NotAProbability {
                    what: "entropy input",
                    value: p,
                });
            }
            if p > 0.0 {
                h -= p * libm::log(p);
            }
        }
        total += h;
    }
    Ok(total / rows as f64)
}

/// Hyperparameters of the adversarial objectives.
///
/// `lambda` weights the adversarial term of the feature objective, `gamma`
/// the entropy term of DANN-EM (`tau = lambda * gamma`), and `beta` the
/// target term of the classifier/discriminator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda: f64, gamma: f64, beta: f64) -> Result<Self> {
        let w = Self { lambda, gamma, beta };
        w.validate()?;
        Ok(w)
    }

    /// `beta = 1 / N`.
    pub fn with_default_beta(lambda: f64, gamma: f64, classes: usize) -> Result<Self> {
        Self::new(lambda, gamma, 1.0 / classes.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(alloc::format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.lambda * self.gamma
    }
}

/// Labeled source inputs and unlabeled target inputs, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub source: Tensor,
    pub labels: Vec<usize>,
    pub target: Tensor,
}

impl DomainBatch {
    pub fn new(source: Tensor, labels: Vec<usize>, target: Tensor) -> Result<Self> {
        if source.rank() != 2 || target.rank() != 2 || source.shape()[1] != target.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "domain batch",
                left: source.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        if labels.len() != source.shape()[0] {
            return Err(invalid("one label per source example"));
        }
        Ok(Self { source, labels, target })
    }
}

fn one_hot(rows: usize, cols: usize, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != rows {
        return Err(invalid("one label per row"));
    }
    let mut data = vec![0.0; rows * cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(invalid(alloc::format!("label {y} out of range for {cols} columns")));
        }
        data[r * cols + y] = 1.0;
    }
    Tensor::new(vec![rows, cols], data)
}

fn nonempty_rows(g: &Graph, v: Var, what: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(v);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Empty { what });
    }
    Ok((s[0], s[1]))
}

/// `p[r, y_r]` for each row, as a `[batch]` node. `labels` must index
/// columns below `max_label`.
fn pick(g: &mut Graph, probs: Var, labels: &[usize], max_label: usize) -> Result<Var> {
    let (rows, cols) = nonempty_rows(g, probs, "source batch")?;
    if let Some(&y) = labels.iter().find(|&&y| y >= max_label) {
        return Err(invalid(alloc::format!("label {y} out of range for {max_label} classes")));
    }
    let mask = g.constant(&one_hot(rows, cols, labels)?);
    let masked = g.mul(probs, mask)?;
    g.sum(masked, 1)
}

fn check_probability(g: &Graph, v: Var, what: &'static str) -> Result<()> {
    match g.data(v).iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        Some(&value) => Err(Error::NotAProbability { what, value }),
        None => Ok(()),
    }
}

/// `E log(1 - p)` over the rows of a `[batch]` or `[batch, 1]` node.
fn mean_log_one_minus(g: &mut Graph, p: Var) -> Result<Var> {
    let q = g.one_minus(p)?;
    let l = g.log(q)?;
    g.mean_all(l)
}

fn mean_log(g: &mut Graph, p: Var) -> Result<Var> {
    let l = g.log(p)?;
    g.mean_all(l)
}

/// The three DANN objectives as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DannLosses {
    /// `L_C = E_S log C(f(x), y)`
    pub classifier: Var,
    /// `L_D = E_S log(1 - D(f(x))) + beta E_T log D(f(x))`
    pub discriminator: Var,
    /// `L_F = L_C + lambda E_T log(1 - D(f(x)))`
    pub feature: Var,
}

/// Builds the DANN objectives from class probabilities `[Bs, N]` on source
/// features and discriminator outputs (`[Bs, 1]`, `[Bt, 1]`).
pub fn dann_losses(
    g: &mut Graph,
    class_probs: Var,
    labels: &[usize],
    disc_source: Var,
    disc_target: Var,
    weights: &ObjectiveWeights,
) -> Result<DannLosses> {
    weights.validate()?;
    let (_, n) = nonempty_rows(g, class_probs, "source batch")?;
    nonempty_rows(g, disc_target, "target batch")?;
    check_probability(g, disc_source, "discriminator output")?;
    check_probability(g, disc_target, "discriminator output")?;

    let py = pick(g, class_probs, labels, n)?;
    let classifier = mean_log(g, py)?;

    let src_term = mean_log_one_minus(g, disc_source)?;
    let tgt_log = mean_log(g, disc_target)?;
    let tgt_term = g.scale(tgt_log, weights.beta)?;
    let discriminator = g.add(src_term, tgt_term)?;

    let fool = mean_log_one_minus(g, disc_target)?;
    let fool = g.scale(fool, weights.lambda)?;
    let feature = g.add(classifier, fool)?;
    Ok(DannLosses {
        classifier,
        discriminator,
        feature,
    })
}

/// DANN-SS objectives as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct SsLosses {
    /// `L̃_C = E_S log C̃(y) + beta E_T log C̃(N+1)`
    pub classifier: Var,
    /// `L̃_F = E_S log C̃(y|Y) + lambda E_T log(1 - C̃(N+1))`
    pub feature: Var,
    /// `E_T log(1 - C̃(N+1))`
    pub adversarial: Var,
}

/// `E_S log C̃(y | Y)`, computed as `log C̃(y) - log(1 - C̃(N+1))`.
fn source_conditional_term(g: &mut Graph, aug_source: Var, labels: &[usize]) -> Result<Var> {
    let (_, cols) = nonempty_rows(g, aug_source, "source batch")?;
    let py = pick(g, aug_source, labels, cols - 1)?;
    let log_py = g.log(py)?;
    let t = g.column(aug_source, cols - 1)?;
    let rest = g.one_minus(t)?;
    let log_rest = g.log(rest)?;
    let cond = g.sub(log_py, log_rest)?;
    g.mean_all(cond)
}

fn check_augmented(g: &Graph, source: Var, target: Var) -> Result<usize> {
    let (_, cs) = nonempty_rows(g, source, "source batch")?;
    let (_, ct) = nonempty_rows(g, target, "target batch")?;
    if cs != ct || cs < 2 {
        return Err(Error::ShapeMismatch {
            op: "augmented scores",
            left: g.shape(source).to_vec(),
            right: g.shape(target).to_vec(),
        });
    }
    Ok(cs - 1)
}

/// Builds the DANN-SS objectives from augmented probabilities `[Bs, N+1]`
/// and `[Bt, N+1]`.
pub fn dann_ss_losses(g: &mut Graph, aug_source: Var, labels: &[usize], aug_target: Var, weights: &ObjectiveWeights) -> Result<SsLosses> {
    weights.validate()?;
    let n = check_augmented(g, aug_source, aug_target)?;

    let py = pick(g, aug_source, labels, n)?;
    let src = mean_log(g, py)?;
    let t_target = g.column(aug_target, n)?;
    let tgt = mean_log(g, t_target)?;
    let tgt = g.scale(tgt, weights.beta)?;
    let classifier = g.add(src, tgt)?;

    let cond = source_conditional_term(g, aug_source, labels)?;
    let adversarial = mean_log_one_minus(g, t_target)?;
    let adv = g.scale(adversarial, weights.lambda)?;
    let feature = g.add(cond, adv)?;
    Ok(SsLosses {
        classifier,
        feature,
        adversarial,
    })
}

/// DANN-EM feature objective and its target-side pieces.
#[derive(Debug, Clone, Copy)]
pub struct EmLoss {
    /// `L̂_F = E_S log C̃(y|Y) + lambda E_T[gamma Σ_i C̃(i) log C̃(i) + log(1 - C̃(N+1))]`
    pub feature: Var,
    /// `E_T Σ_{i≤N} C̃(i) log C̃(i)`; joint scores, not conditional ones.
    pub neg_entropy: Var,
}

/// Builds the DANN-EM feature objective.
pub fn dann_em_feature_loss(g: &mut Graph, aug_source: Var, labels: &[usize], aug_target: Var, weights: &ObjectiveWeights) -> Result<EmLoss> {
    weights.validate()?;
    let n = check_augmented(g, aug_source, aug_target)?;
    let cond = source_conditional_term(g, aug_source, labels)?;

    let classes = g.slice(aug_target, 1, 0, n)?;
    let logs = g.log(classes)?;
    let plogp = g.mul(classes, logs)?;
    let per_row = g.sum(plogp, 1)?;
    let weighted = g.scale(per_row, weights.gamma)?;

    let t = g.column(aug_target, n)?;
    let rest = g.one_minus(t)?;
    let log_rest = g.log(rest)?;
    let bracket = g.add(weighted, log_rest)?;
    let bracket = g.mean_all(bracket)?;
    let adv = g.scale(bracket, weights.lambda)?;
    let feature = g.add(cond, adv)?;
    let neg_entropy = g.mean_all(per_row)?;
    Ok(EmLoss { feature, neg_entropy })
}

/// Adds a target-class column to an `N`-way linear classifier.
///
/// The new weight column is the row-wise mean of the existing columns and the
/// new bias is the mean of the existing biases, so the first `N` logits are
/// unchanged.
pub fn augment_classifier_column(weight: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = weight.shape();
    if s.len() != 2 || weight.is_empty() {
        return Err(Error::Empty { what: "classifier weights" });
    }
    let (d, n) = (s[0], s[1]);
    if bias.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "augment_classifier_column",
            left: s.to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut w = Vec::with_capacity(d * (n + 1));
    for row in weight.data().chunks(n) {
        w.extend_from_slice(row);
        w.push(row.iter().sum::<f64>() / n as f64);
    }
    let mut b = bias.data().to_vec();
    b.push(b.iter().sum::<f64>() / n as f64);
    Ok((Tensor::new(vec![d, n + 1], w)?, Tensor::new(vec![n + 1], b)?))
}

/// `log` with the same clamp as [`Graph::log`], for scalar reference code.
pub fn clamped_ln(x: f64) -> f64 {
    libm::log(x.max(LOG_CLAMP))
}
