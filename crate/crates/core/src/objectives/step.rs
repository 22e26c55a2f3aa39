//! One alternating update of a domain-adaptation model.

use alloc::vec::Vec;

use rand::Rng;

use super::{augment_classifier_column, dann_em_feature_loss, dann_losses, dann_ss_losses, DomainBatch, ObjectiveWeights};
use crate::error::{invalid, Result};
use crate::nn::{apply_adam, collect_grads, Activation, Linear, Mlp};
use crate::tensor::{Adam, AdamState, Graph, Tensor, Var};

/// Which feature-level objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Objective {
    SourceOnly,
    Dann,
    DannSs,
    DannEm,
}

impl Objective {
    /// True for the objectives that use an `(N+1)`-way classifier.
    pub fn augmented(self) -> bool {
        matches!(self, Self::DannSs | Self::DannEm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SourceOnly => "source_only",
            Self::Dann => "dann",
            Self::DannSs => "dann_ss",
            Self::DannEm => "dann_em",
        }
    }
}

/// Which parameter group an [`alternating_step`] updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Classifier (and DANN discriminator); the feature extractor is frozen.
    Classifier,
    /// Feature extractor; classifier and discriminator are frozen.
    Feature,
}

/// Feature extractor, linear classifier head and optional discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct UdaModel {
    pub feature: Mlp,
    /// Linear head producing `N` (or `N+1` once augmented) logits.
    pub head: Mlp,
    /// Feature -> one logit; only used by DANN.
    pub discriminator: Option<Mlp>,
    pub classes: usize,
}

impl UdaModel {
    /// Feature MLP `input -> hidden.. -> feature_dim` with ReLU throughout,
    /// and an `N`-way linear head.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], feature_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(feature_dim);
        let feature = Mlp::new(&sizes, Activation::Relu, Activation::Relu, rng)?;
        let head = Mlp::new(&[feature_dim, classes], Activation::Identity, Activation::Identity, rng)?;
        Ok(Self {
            feature,
            head,
            discriminator: None,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.output_dim()
    }

    pub fn is_augmented(&self) -> bool {
        self.head.output_dim() == self.classes + 1
    }

    /// Widens the head to `N+1` outputs with the mean-column initialization.
    pub fn augment(&mut self) -> Result<()> {
        if self.is_augmented() {
            return Ok(());
        }
        let last = self.head.layers.len() - 1;
        let l = &self.head.layers[last];
        let (w, b) = augment_classifier_column(&l.weight, &l.bias)?;
        self.head.layers[last] = Linear::from_parts(w, b)?;
        Ok(())
    }

    /// Adds a fresh `feature -> hidden -> 1` discriminator.
    pub fn attach_discriminator<R: Rng + ?Sized>(&mut self, hidden: usize, rng: &mut R) -> Result<()> {
        let k = self.feature_dim();
        self.discriminator = Some(Mlp::new(&[k, hidden, 1], Activation::Relu, Activation::Identity, rng)?);
        Ok(())
    }

    /// Class probabilities over the real classes for a `[batch, d]` input.
    /// Augmented heads return the conditional scores `C̃(·|Y)`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let probs = self.raw_probs(x)?;
        if self.is_augmented() {
            super::conditional_scores(&probs)
        } else {
            Ok(probs)
        }
    }

    /// Softmax of the head output: `N` or `N+1` columns.
    pub fn raw_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.feature.bind(&mut g, false);
        let h = self.head.bind(&mut g, false);
        let xv = g.constant(x);
        let z = f.forward(&mut g, xv)?;
        let logits = h.forward(&mut g, z)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }

    /// Parameters with stable names, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor)> {
        let mut out = self.feature.named_tensors("feature");
        out.extend(self.head.named_tensors("head"));
        if let Some(d) = &self.discriminator {
            out.extend(d.named_tensors("discriminator"));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(alloc::string::String, &mut Tensor)> {
        let mut out = self.feature.named_tensors_mut("feature");
        out.extend(self.head.named_tensors_mut("head"));
        if let Some(d) = &mut self.discriminator {
            out.extend(d.named_tensors_mut("discriminator"));
        }
        out
    }
}

/// Adam state for each parameter group of a [`UdaModel`].
#[derive(Debug, Clone)]
pub struct UdaOptimizer {
    pub adam: Adam,
    pub feature: AdamState,
    pub head: AdamState,
    pub discriminator: AdamState,
}

impl UdaOptimizer {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(learning_rate)?,
            feature: AdamState::default(),
            head: AdamState::default(),
            discriminator: AdamState::default(),
        })
    }
}

/// Objective values at the parameters seen by one step, in maximization
/// form.
///
/// `loss_d_or_aux` is `L_D` for DANN, `E_T log(1 - C̃(N+1))` for DANN-SS,
/// `E_T Σ C̃(i) log C̃(i)` for DANN-EM and zero for source-only training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_c: f64,
    pub loss_d_or_aux: f64,
    pub loss_f: f64,
}

struct Built {
    classifier_objective: Var,
    feature_objective: Var,
    losses: StepLosses,
}

/// Losses plus the feature, head and discriminator parameter vars.
type BuildOut = (Built, Vec<Var>, Vec<Var>, Vec<Var>);

fn build(g: &mut Graph, model: &UdaModel, batch: &DomainBatch, objective: Objective, weights: &ObjectiveWeights, mode: StepMode) -> Result<BuildOut> {
    let train_features = mode == StepMode::Feature;
    let f = model.feature.bind(g, train_features);
    let h = model.head.bind(g, !train_features);
    let d = model.discriminator.as_ref().map(|m| m.bind(g, !train_features));

    let xs = g.constant(&batch.source);
    let fs = f.forward(g, xs)?;
    let ls = h.forward(g, fs)?;
    let ps = g.softmax(ls)?;

    let built = match objective {
        Objective::SourceOnly => {
            let zero_lambda = ObjectiveWeights { lambda: 0.0, ..*weights };
            // A single-row dummy target keeps the shared builder happy without
            // touching target data.
            let dummy = g.constant(&Tensor::full(alloc::vec![1, 1], 0.5));
            let l = dann_losses(g, ps, &batch.labels, dummy, dummy, &zero_lambda)?;
            let lc = g.item(l.classifier)?;
            Built {
                classifier_objective: l.classifier,
                feature_objective: l.classifier,
                losses: StepLosses {
                    loss_c: lc,
                    loss_d_or_aux: 0.0,
                    loss_f: lc,
                },
            }
        }
        Objective::Dann => {
            let disc = d.as_ref().ok_or_else(|| invalid("DANN needs a discriminator"))?;
            let xt = g.constant(&batch.target);
            let ft = f.forward(g, xt)?;
            let zs = disc.forward(g, fs)?;
            let zt = disc.forward(g, ft)?;
            let ds = g.sigmoid(zs)?;
            let dt = g.sigmoid(zt)?;
            let l = dann_losses(g, ps, &batch.labels, ds, dt, weights)?;
            let cd = g.add(l.classifier, l.discriminator)?;
            Built {
                classifier_objective: cd,
                feature_objective: l.feature,
                losses: StepLosses {
                    loss_c: g.item(l.classifier)?,
                    loss_d_or_aux: g.item(l.discriminator)?,
                    loss_f: g.item(l.feature)?,
                },
            }
        }
        Objective::DannSs | Objective::DannEm => {
            if !model.is_augmented() {
                return Err(invalid("DANN-SS/EM need an augmented head"));
            }
            let xt = g.constant(&batch.target);
            let ft = f.forward(g, xt)?;
            let lt = h.forward(g, ft)?;
            let pt = g.softmax(lt)?;
            let ss = dann_ss_losses(g, ps, &batch.labels, pt, weights)?;
            if objective == Objective::DannSs {
                Built {
                    classifier_objective: ss.classifier,
                    feature_objective: ss.feature,
                    losses: StepLosses {
                        loss_c: g.item(ss.classifier)?,
                        loss_d_or_aux: g.item(ss.adversarial)?,
                        loss_f: g.item(ss.feature)?,
                    },
                }
            } else {
                let em = dann_em_feature_loss(g, ps, &batch.labels, pt, weights)?;
                Built {
                    classifier_objective: ss.classifier,
                    feature_objective: em.feature,
                    losses: StepLosses {
                        loss_c: g.item(ss.classifier)?,
                        loss_d_or_aux: g.item(em.neg_entropy)?,
                        loss_f: g.item(em.feature)?,
                    },
                }
            }
        }
    };
    let dv = d.map(|d| d.vars()).unwrap_or_default();
    Ok((built, f.vars(), h.vars(), dv))
}

/// Evaluates the objectives of one step without changing the model.
pub fn evaluate_objectives(model: &UdaModel, batch: &DomainBatch, objective: Objective, weights: &ObjectiveWeights) -> Result<StepLosses> {
    let mut g = Graph::new();
    Ok(build(&mut g, model, batch, objective, weights, StepMode::Classifier)?.0.losses)
}

/// One Adam ascent step on the objective owned by `mode`.
///
/// * `Classifier`: maximizes `L_C` (source-only), `L_C + L_D` (DANN) or
///   `L̃_C` (DANN-SS/EM) over the head and discriminator.
/// * `Feature`: maximizes `L_C`, `L_F`, `L̃_F` or `L̂_F` over the feature
///   extractor.
///
/// The negated objective is minimized. If any gradient is non-finite the
/// step is aborted before a parameter changes.
pub fn alternating_step(
    model: &mut UdaModel,
    opt: &mut UdaOptimizer,
    batch: &DomainBatch,
    objective: Objective,
    weights: &ObjectiveWeights,
    mode: StepMode,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let (built, fv, hv, dv) = build(&mut g, model, batch, objective, weights, mode)?;
    let target = match mode {
        StepMode::Classifier => built.classifier_objective,
        StepMode::Feature => built.feature_objective,
    };
    let loss = g.scale(target, -1.0)?;
    g.backward(loss)?;
    match mode {
        StepMode::Feature => {
            let grads = collect_grads(&g, &fv)?;
            apply_adam(&opt.adam, &mut opt.feature, model.feature.tensors_mut(), &grads)?;
        }
        StepMode::Classifier => {
            let hg = collect_grads(&g, &hv)?;
            let dg = collect_grads(&g, &dv)?;
            apply_adam(&opt.adam, &mut opt.head, model.head.tensors_mut(), &hg)?;
            if let Some(d) = model.discriminator.as_mut() {
                apply_adam(&opt.adam, &mut opt.discriminator, d.tensors_mut(), &dg)?;
            }
        }
    }
    Ok(built.losses)
}
