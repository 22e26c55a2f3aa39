//! Brightness-attribute toy task with a known translation, and the
//! alternating generator / discriminator training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{cycle_graph, gan_losses_graph, score, GanForm, HistoryBuffer, TranslationModel};
use crate::error::{invalid, Error, Result};
use crate::nn::{apply_adam, collect_grads};
use crate::seeded_rng;
use crate::tensor::{Adam, AdamState, Graph, Tensor};

/// Per-parameter gradients.
type Grads = Vec<Vec<f64>>;

/// Settings for [`train_translation`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TranslationConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Per attribute `(offset, gain)`: target pixels are `offset + gain * x`.
    pub attribute_maps: Vec<(f64, f64)>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cycle_weight: f64,
    pub form: GanForm,
    pub shared_generator: bool,
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
    pub buffer_capacity: usize,
    pub eval_examples: usize,
    pub log_every: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            seed: 23,
            height: 8,
            width: 8,
            // day, night
            attribute_maps: vec![(0.2, 0.8), (0.0, 0.6)],
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-4,
            cycle_weight: 10.0,
            form: GanForm::LeastSquares,
            shared_generator: false,
            generator_hidden: 16,
            discriminator_hidden: 32,
            buffer_capacity: HistoryBuffer::DEFAULT_CAPACITY,
            eval_examples: 64,
            log_every: 50,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attribute_maps.is_empty() {
            return Err(Error::Empty { what: "attribute_maps" });
        }
        for &(o, gain) in &self.attribute_maps {
            if !(o >= 0.0 && gain > 0.0 && o + gain <= 1.0) {
                return Err(invalid("attribute maps must send [0, 1] into [0, 1] increasingly"));
            }
        }
        let counts = [
            self.height,
            self.width,
            self.batch_size,
            self.generator_hidden,
            self.discriminator_hidden,
            self.eval_examples,
            self.log_every,
        ];
        if counts.contains(&0) {
            return Err(invalid("translation counts must be positive"));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(invalid("batch size exceeds buffer capacity"));
        }
        if !(self.learning_rate > 0.0) || !(self.cycle_weight >= 0.0) {
            return Err(invalid("learning rate must be positive and cycle weight nonnegative"));
        }
        Ok(())
    }
}

/// Logged quantities; losses are the minimized forms on a fixed evaluation
/// batch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TranslationMetrics {
    pub step: usize,
    /// `L_{D_a}` per attribute.
    pub loss_d: Vec<f64>,
    pub loss_g: f64,
    pub cycle: f64,
    /// Mean absolute distance of `G(x, a)` to the exact translation,
    /// averaged over attributes.
    pub gt_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationRun {
    pub model: TranslationModel,
    pub metrics: Vec<TranslationMetrics>,
}

/// Squared oriented sinusoids; the squaring skews the pixel histogram so
/// that no decreasing intensity map matches it.
pub fn sample_source_images<R: Rng + ?Sized>(count: usize, height: usize, width: usize, rng: &mut R) -> Result<Tensor> {
    let mut data = Vec::with_capacity(count * height * width);
    for _ in 0..count {
        let f = rng.random_range(0.5..1.5);
        let theta = rng.random_range(0.0..core::f64::consts::PI);
        let phase = rng.random_range(0.0..core::f64::consts::TAU);
        let (s, c) = libm::sincos(theta);
        for i in 0..height {
            for j in 0..width {
                let v = 0.5 + 0.5 * libm::sin(f * (j as f64 * c + i as f64 * s) + phase);
                data.push(v * v);
            }
        }
    }
    Tensor::new(vec![count, height * width], data)
}

/// The exact translation for an attribute map.
pub fn brightness_target(x: &Tensor, map: (f64, f64)) -> Tensor {
    let data = x.data().iter().map(|v| map.0 + map.1 * v).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

struct EvalSet {
    source: Tensor,
    targets: Vec<Tensor>,
}

fn evaluate(model: &TranslationModel, eval: &EvalSet, config: &TranslationConfig, step: usize) -> Result<TranslationMetrics> {
    let attrs = config.attribute_maps.len();
    let mut loss_d = Vec::with_capacity(attrs);
    let (mut loss_g, mut cycle, mut gt) = (0.0, 0.0, 0.0);
    for (a, &map) in config.attribute_maps.iter().enumerate() {
        let (ld, lg) = super::ac_gan_losses(&eval.source, &eval.targets[a], model, a)?;
        loss_d.push(ld);
        loss_g += lg;
        cycle += super::cycle_loss(&eval.source, &eval.targets[a], model, a)?;
        let out = model.translate(&eval.source, a)?;
        let exact = brightness_target(&eval.source, map);
        gt += out.data().iter().zip(exact.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / out.len() as f64;
    }
    let n = attrs as f64;
    Ok(TranslationMetrics {
        step,
        loss_d,
        loss_g: loss_g / n,
        cycle: cycle / n,
        gt_l1: gt / n,
    })
}

/// Steps allowed above the divergence threshold before aborting.
const DIVERGENCE_PATIENCE: usize = 100;

/// Alternates one generator/inverse update with one update of every
/// attribute discriminator on buffered fakes.
pub fn train_translation(config: &TranslationConfig) -> Result<TranslationRun> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let pixels = h * w;
    let attrs = config.attribute_maps.len();
    let mut rng = seeded_rng(config.seed);
    let mut model = TranslationModel::new(
        pixels,
        attrs,
        config.generator_hidden,
        config.discriminator_hidden,
        config.shared_generator,
        config.form,
        &mut rng,
    )?;
    let mut eval_rng = seeded_rng(config.seed ^ 0xe7a1);
    let eval = EvalSet {
        source: sample_source_images(config.eval_examples, h, w, &mut eval_rng)?,
        targets: config
            .attribute_maps
            .iter()
            .map(|&m| Ok(brightness_target(&sample_source_images(config.eval_examples, h, w, &mut eval_rng)?, m)))
            .collect::<Result<_>>()?,
    };

    let adam = Adam::new(config.learning_rate)?;
    let mut gen_state = AdamState::default();
    let mut inv_state = AdamState::default();
    let mut disc_states = vec![AdamState::default(); attrs];
    let mut buffers = (0..attrs)
        .map(|_| HistoryBuffer::new(config.buffer_capacity))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = vec![evaluate(&model, &eval, config, 0)?];
    let mut initial_objective: Option<f64> = None;
    let mut above = 0usize;
    let codes = (0..attrs).map(|a| model.code(a)).collect::<Result<Vec<_>>>()?;

    for step in 1..=config.steps {
        let xs_t = sample_source_images(config.batch_size, h, w, &mut rng)?;
        let xt_t = config
            .attribute_maps
            .iter()
            .map(|&m| Ok(brightness_target(&sample_source_images(config.batch_size, h, w, &mut rng)?, m)))
            .collect::<Result<Vec<_>>>()?;
        let wrap = |e: Error| match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged {
                step,
                detail: format!("{e}"),
            },
            other => other,
        };

        // generator and inverse generator
        let (objective, gen_grads, inv_grads) = (|| -> Result<(f64, Grads, Grads)> {
            let mut g = Graph::new();
            let gen = model.generator.bind(&mut g, true);
            let inv = model.inverse.bind(&mut g, true);
            let xs = g.constant(&xs_t);
            let mut total = None;
            for a in 0..attrs {
                let d = model.discriminators[a].bind(&mut g, false);
                let xt = g.constant(&xt_t[a]);
                let fake = gen.forward(&mut g, xs, &codes[a])?;
                let real_s = score(&mut g, &d, xt, config.form)?;
                let fake_s = score(&mut g, &d, fake, config.form)?;
                let (_, lg) = gan_losses_graph(&mut g, real_s, fake_s, config.form)?;
                let cyc = cycle_graph(&mut g, &gen, &inv, xs, xt, &codes[a])?;
                let cyc = g.scale(cyc, config.cycle_weight)?;
                let term = g.add(lg, cyc)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
            let loss = g.scale(total.expect("at least one attribute"), 1.0 / attrs as f64)?;
            g.backward(loss)?;
            Ok((g.item(loss)?, collect_grads(&g, &gen.vars())?, collect_grads(&g, &inv.vars())?))
        })()
        .map_err(wrap)?;
        apply_adam(&adam, &mut gen_state, model.generator.tensors_mut(), &gen_grads).map_err(wrap)?;
        apply_adam(&adam, &mut inv_state, model.inverse.tensors_mut(), &inv_grads).map_err(wrap)?;

        // discriminators on real images and buffered fakes
        for a in 0..attrs {
            let fresh = model.translate(&xs_t, a)?;
            let rows: Vec<Vec<f64>> = fresh.data().chunks(pixels).map(<[f64]>::to_vec).collect();
            let pool = buffers[a].push_sample(rows, config.batch_size, &mut rng)?;
            let fakes = Tensor::new(vec![pool.len(), pixels], pool.concat())?;
            let grads = (|| -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let d = model.discriminators[a].bind(&mut g, true);
                let real = g.constant(&xt_t[a]);
                let fake = g.constant(&fakes);
                let rs = score(&mut g, &d, real, config.form)?;
                let fs = score(&mut g, &d, fake, config.form)?;
                let (ld, _) = gan_losses_graph(&mut g, rs, fs, config.form)?;
                g.backward(ld)?;
                collect_grads(&g, &d.vars())
            })()
            .map_err(wrap)?;
            apply_adam(&adam, &mut disc_states[a], model.discriminators[a].tensors_mut(), &grads).map_err(wrap)?;
        }

        let base = *initial_objective.get_or_insert(objective);
        if objective > 10.0 * base.abs().max(1e-3) {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    detail: format!("generator objective {objective} above 10x initial {base} for {above} steps"),
                });
            }
        } else {
            above = 0;
        }

        if step % config.log_every == 0 || step == config.steps {
            metrics.push(evaluate(&model, &eval, config, step)?);
        }
    }
    Ok(TranslationRun { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_reports_initial_losses() {
        let cfg = TranslationConfig {
            steps: 0,
            ..TranslationConfig::default()
        };
        let run = train_translation(&cfg).unwrap();
        assert_eq!(run.metrics.len(), 1);
        assert_eq!(run.metrics[0].step, 0);
        let again = train_translation(&cfg).unwrap();
        assert_eq!(run.metrics, again.metrics);
    }

    #[test]
    fn source_pixels_in_unit_range() {
        let x = sample_source_images(4, 8, 8, &mut seeded_rng(1)).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_maps() {
        let cfg = TranslationConfig {
            attribute_maps: vec![(0.5, 0.8)],
            ..TranslationConfig::default()
        };
        assert!(train_translation(&cfg).is_err());
    }
}
