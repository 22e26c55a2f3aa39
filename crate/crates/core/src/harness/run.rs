//! One adaptation run: source-only pretraining, head augmentation or
//! discriminator attachment, then alternating updates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::data::{BaseTask, DomainShift, Split, SyntheticDomainSpec, TwoDomainDataset};
use crate::error::{invalid, Error, Result};
use crate::objectives::{
    alternating_step, evaluate_objectives, prediction_entropy, DomainBatch, Objective, ObjectiveWeights, StepLosses, StepMode, UdaModel, UdaOptimizer,
};
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng as SeededRng};

pub const SCHEMA_VERSION: u32 = 1;

/// Steps the source loss may stay above the divergence threshold.
const DIVERGENCE_PATIENCE: usize = 100;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RunConfig {
    pub schema: u32,
    pub objective: Objective,
    pub weights: ObjectiveWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub discriminator_hidden: usize,
    /// Labeled target examples used for model selection.
    pub validation_size: usize,
    pub seeds: Vec<u64>,
    pub log_every: usize,
    /// Target training examples whose prediction entropy is logged.
    pub entropy_probe: usize,
    /// Average scores over each image and its horizontal flip at test time
    /// (glyph tasks only).
    pub flip_averaging: bool,
    pub data: SyntheticDomainSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            objective: Objective::DannSs,
            weights: ObjectiveWeights {
                lambda: 0.1,
                gamma: 0.1,
                beta: 1.0 / 3.0,
            },
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 1000,
            pretrain_steps: 500,
            hidden: vec![32],
            feature_dim: 16,
            discriminator_hidden: 32,
            validation_size: 1000,
            seeds: vec![0],
            log_every: 50,
            entropy_probe: 512,
            flip_averaging: false,
            data: SyntheticDomainSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported config schema {}", self.schema)));
        }
        self.weights.validate()?;
        self.data.validate()?;
        let counts = [
            self.batch_size,
            self.feature_dim,
            self.discriminator_hidden,
            self.validation_size,
            self.log_every,
            self.entropy_probe,
        ];
        if counts.contains(&0) || self.hidden.contains(&0) {
            return Err(invalid("counts and widths must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty { what: "seeds" });
        }
        if self.flip_averaging && self.data.task != BaseTask::Glyphs {
            return Err(invalid("flip averaging needs image inputs"));
        }
        Ok(())
    }
}

/// The default hard-shift task: three Gaussian blobs in 8-D, the target
/// rotated by 50 degrees in the first coordinate plane and rescaled on two
/// further coordinates.
pub fn hard_shift_spec(seed: u64) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        task: BaseTask::Blobs,
        dim: 8,
        classes: 3,
        shift: DomainShift {
            rotation_degrees: 50.0,
            rotation_plane: [0, 1],
            brightness_scale: 1.8,
            brightness_coords: vec![2, 3],
            ..DomainShift::default()
        },
        subgroup_fraction: 0.5,
        subgroup_scale: 0.6,
        center_jitter: 0.0,
        seed,
        ..SyntheticDomainSpec::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogEntry {
    pub step: usize,
    pub loss_c: f64,
    pub loss_d_or_aux: f64,
    pub loss_f: f64,
    /// Mean entropy of the class scores used for prediction: conditional
    /// scores for augmented heads.
    pub entropy: f64,
    /// Entropy of the full `N+1`-way scores for augmented heads, otherwise
    /// equal to `entropy`.
    pub entropy_joint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubgroupAccuracy {
    pub subgroup: usize,
    pub count: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub count: usize,
    pub top1: f64,
    /// Present when there are more than five classes.
    pub top5: Option<f64>,
    pub subgroups: Vec<SubgroupAccuracy>,
}

/// Append-only per-run log with the final test evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsLog {
    pub entries: Vec<LogEntry>,
    pub final_eval: Option<Evaluation>,
}

impl MetricsLog {
    /// Rejects entries whose step does not increase.
    pub fn push(&mut self, e: LogEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if e.step <= last.step {
                return Err(invalid("log steps must increase"));
            }
        }
        self.entries.push(e);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub seed: u64,
    pub model: UdaModel,
    pub log: MetricsLog,
    pub validation: Evaluation,
    pub test: Evaluation,
}

fn rank_of_true(row: &[f64], label: usize) -> usize {
    let p = row[label];
    row.iter().enumerate().filter(|&(i, &q)| q > p || (q == p && i < label)).count()
}

fn evaluate_scores(scores: &Tensor, split: &Split) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Empty { what: "evaluation split" });
    }
    let classes = scores.shape()[1];
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let groups = split.subgroups.iter().copied().max().unwrap_or(0) + 1;
    let mut per = vec![(0usize, 0usize); groups];
    for (r, (&label, &sg)) in split.labels.iter().zip(&split.subgroups).enumerate() {
        let rank = rank_of_true(scores.row(r), label);
        per[sg].0 += 1;
        if rank == 0 {
            hit1 += 1;
            per[sg].1 += 1;
        }
        if rank < 5 {
            hit5 += 1;
        }
    }
    let n = split.len() as f64;
    Ok(Evaluation {
        count: split.len(),
        top1: hit1 as f64 / n,
        top5: (classes > 5).then(|| hit5 as f64 / n),
        subgroups: per
            .into_iter()
            .enumerate()
            .filter(|(_, (c, _))| *c > 0)
            .map(|(subgroup, (count, hits))| SubgroupAccuracy {
                subgroup,
                count,
                top1: hits as f64 / count as f64,
            })
            .collect(),
    })
}

/// Top-1 (and top-5 beyond five classes), overall and per subgroup. Augmented
/// models are scored on the conditional class scores, so the target class
/// never wins the argmax.
pub fn evaluate(model: &UdaModel, split: &Split) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Empty { what: "evaluation split" });
    }
    evaluate_scores(&model.predict(&split.x)?, split)
}

/// [`evaluate`] with scores averaged over each `h x w x c` image and its
/// horizontal mirror.
pub fn evaluate_flip_averaged(model: &UdaModel, split: &Split, shape: [usize; 3]) -> Result<Evaluation> {
    let [h, w, c] = shape;
    if split.x.shape()[1] != h * w * c {
        return Err(invalid("image shape does not match input width"));
    }
    let mut flipped = split.x.clone();
    let rows = split.len();
    for r in 0..rows {
        let src = split.x.row(r);
        let dst = &mut flipped.data_mut()[r * h * w * c..(r + 1) * h * w * c];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    dst[(i * w + j) * c + ch] = src[(i * w + (w - 1 - j)) * c + ch];
                }
            }
        }
    }
    let a = model.predict(&split.x)?;
    let b = model.predict(&flipped)?;
    let avg = Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect())?;
    evaluate_scores(&avg, split)
}

fn sample_rows(split: &Split, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Vec<usize>)> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..split.len())).collect();
    let labels = idx.iter().map(|&i| split.labels[i]).collect();
    Ok((split.x.select_rows(&idx)?, labels))
}

fn wrap_divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged {
            step,
            detail: format!("{e}"),
        },
        other => other,
    }
}

/// Source-only training from a fresh seeded initialization.
pub fn pretrain(config: &RunConfig, data: &TwoDomainDataset, seed: u64) -> Result<UdaModel> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let mut model = UdaModel::new(data.input_dim(), &config.hidden, config.feature_dim, data.classes, &mut rng)?;
    let mut opt = UdaOptimizer::new(config.learning_rate)?;
    let dummy_target = Tensor::zeros(vec![1, data.input_dim()]);
    for step in 0..config.pretrain_steps {
        let (xs, ys) = sample_rows(&data.source_train, config.batch_size, &mut rng)?;
        let batch = DomainBatch::new(xs, ys, dummy_target.clone())?;
        for mode in [StepMode::Classifier, StepMode::Feature] {
            alternating_step(&mut model, &mut opt, &batch, Objective::SourceOnly, &config.weights, mode).map_err(wrap_divergence(step))?;
        }
    }
    Ok(model)
}

fn probe_entropies(model: &UdaModel, probe: &Tensor) -> Result<(f64, f64)> {
    let raw = model.raw_probs(probe)?;
    let joint = prediction_entropy(&raw)?;
    if model.is_augmented() {
        Ok((prediction_entropy(&crate::objectives::conditional_scores(&raw)?)?, joint))
    } else {
        Ok((joint, joint))
    }
}

fn entry(step: usize, l: StepLosses, entropy: (f64, f64)) -> LogEntry {
    LogEntry {
        step,
        loss_c: l.loss_c,
        loss_d_or_aux: l.loss_d_or_aux,
        loss_f: l.loss_f,
        entropy: entropy.0,
        entropy_joint: entropy.1,
    }
}

/// Adaptation stage of [`train_uda`], starting from a pretrained model.
pub fn train_uda_from(config: &RunConfig, data: &TwoDomainDataset, seed: u64, pretrained: &UdaModel) -> Result<TrainedRun> {
    config.validate()?;
    let mut model = pretrained.clone();
    let mut init_rng = seeded_rng(seed ^ 0x0d15_c0de);
    match config.objective {
        Objective::DannSs | Objective::DannEm => model.augment()?,
        Objective::Dann => model.attach_discriminator(config.discriminator_hidden, &mut init_rng)?,
        Objective::SourceOnly => {}
    }
    let mut opt = UdaOptimizer::new(config.learning_rate)?;
    // separate streams so that source sampling never depends on target data
    let mut src_rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut tgt_rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(2));
    let probe_rows: Vec<usize> = (0..config.entropy_probe.min(data.target_train.len())).collect();
    let probe = data.target_train.x.select_rows(&probe_rows)?;

    let draw = |src_rng: &mut SeededRng, tgt_rng: &mut SeededRng| -> Result<DomainBatch> {
        let (xs, ys) = sample_rows(&data.source_train, config.batch_size, src_rng)?;
        let (xt, _) = sample_rows(&data.target_train, config.batch_size, tgt_rng)?;
        DomainBatch::new(xs, ys, xt)
    };

    let mut log = MetricsLog::default();
    let first = draw(&mut src_rng.clone(), &mut tgt_rng.clone())?;
    let initial = evaluate_objectives(&model, &first, config.objective, &config.weights)?;
    log.push(entry(0, initial, probe_entropies(&model, &probe)?))?;
    let threshold = 10.0 * (-initial.loss_c).max(0.1);
    let mut above = 0usize;

    for step in 1..=config.steps {
        let batch = draw(&mut src_rng, &mut tgt_rng)?;
        let wrap = wrap_divergence(step);
        alternating_step(&mut model, &mut opt, &batch, config.objective, &config.weights, StepMode::Classifier).map_err(&wrap)?;
        let losses = alternating_step(&mut model, &mut opt, &batch, config.objective, &config.weights, StepMode::Feature).map_err(&wrap)?;
        if -losses.loss_c > threshold {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    detail: format!("source loss {} above {threshold} for {above} steps", -losses.loss_c),
                });
            }
        } else {
            above = 0;
        }
        if step % config.log_every == 0 || step == config.steps {
            log.push(entry(step, losses, probe_entropies(&model, &probe).map_err(&wrap)?))?;
        }
    }

    let val_split = data.target_val.head(config.validation_size)?;
    let (validation, test) = if config.flip_averaging {
        let shape = [16, 16, config.data.channels];
        (
            evaluate_flip_averaged(&model, &val_split, shape)?,
            evaluate_flip_averaged(&model, &data.target_test, shape)?,
        )
    } else {
        (evaluate(&model, &val_split)?, evaluate(&model, &data.target_test)?)
    };
    log.final_eval = Some(test.clone());
    Ok(TrainedRun {
        seed,
        model,
        log,
        validation,
        test,
    })
}

/// Pretrains on source data and then adapts with `config.objective`.
pub fn train_uda(config: &RunConfig, data: &TwoDomainDataset, seed: u64) -> Result<TrainedRun> {
    let pre = pretrain(config, data, seed)?;
    train_uda_from(config, data, seed, &pre)
}
