//! Procedural polygon views and the image-to-flow teacher / keypoint-to-flow
//! student pair trained on them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{bilinear_warp, distill_loss_graph, l1_recon_error, synthetic_flow, Affine2, FlowField, Image, KeypointSet, ViewpointCode};
use crate::error::{invalid, Error, Result};
use crate::nn::{apply_adam, collect_grads, Activation, Mlp};
use crate::tensor::{Adam, AdamState, Graph, Tensor, Var};
use crate::{seeded_rng, Rng as SeededRng};

/// Settings for [`train_flow_predictors`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FlowTrainConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Polygon vertices, used as keypoints.
    pub keypoints: usize,
    pub viewpoint_bins: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub hidden: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the image term in the distillation loss.
    pub lambda: f64,
    /// Weight of the ground-truth flow term in the teacher loss.
    pub flow_weight: f64,
    /// Views differ by a translation only.
    pub translations_only: bool,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 16,
            width: 16,
            keypoints: 6,
            viewpoint_bins: 4,
            train_examples: 512,
            test_examples: 128,
            hidden: 64,
            teacher_epochs: 40,
            student_epochs: 150,
            batch_size: 32,
            learning_rate: 3e-3,
            lambda: 1.0,
            flow_weight: 1.0,
            translations_only: false,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.height,
            self.width,
            self.keypoints,
            self.viewpoint_bins,
            self.train_examples,
            self.test_examples,
            self.hidden,
            self.batch_size,
        ];
        if counts.contains(&0) {
            return Err(invalid("flow training counts must be positive"));
        }
        if self.keypoints < 3 {
            return Err(invalid("a polygon needs at least 3 keypoints"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(invalid("shape images must be at least 8x8"));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || !(self.flow_weight >= 0.0) {
            return Err(invalid("learning rate must be positive and loss weights nonnegative"));
        }
        Ok(())
    }
}

/// A source view, the target view it maps to, and the exact flow between
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeExample {
    pub source: Image,
    pub target: Image,
    pub keypoints: KeypointSet,
    pub viewpoint: ViewpointCode,
    pub flow: FlowField,
}

/// Source-to-target transform for a viewpoint bin. Elevation squashes the
/// shape vertically and tilts it about its centre; in translation mode the
/// bin instead selects a horizontal shift.
pub fn viewpoint_transform(view: &ViewpointCode, center: (f64, f64), translations_only: bool) -> Affine2 {
    if translations_only {
        let mid = (view.bins() as f64 - 1.0) / 2.0;
        return Affine2::translation(1.5 * (view.active() as f64 - mid), 0.0);
    }
    let e = view.elevation();
    let squash = Affine2::scale_about(1.0, libm::cos(e.to_radians()), center.0, center.1);
    squash.then(&Affine2::rotation_about(e / 2.0, center.0, center.1))
}

fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

/// Soft-edged shaded polygon. `vertices` are relative to `center` and
/// ordered by angle.
pub fn render_shape(height: usize, width: usize, center: (f64, f64), vertices: &[(f64, f64)], phase: f64) -> Result<Image> {
    if vertices.len() < 3 {
        return Err(invalid("a polygon needs at least 3 vertices"));
    }
    let mut data = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (rx, ry) = (j as f64 - center.0, i as f64 - center.1);
            let d = libm::hypot(rx, ry);
            let phi = libm::atan2(ry, rx);
            let u = (libm::cos(phi), libm::sin(phi));
            let mut radius = f64::INFINITY;
            for k in 0..vertices.len() {
                let a = vertices[k];
                let b = vertices[(k + 1) % vertices.len()];
                let e = (b.0 - a.0, b.1 - a.1);
                let denom = cross(u, e);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = cross(a, e) / denom;
                let s = cross(a, u) / denom;
                if t > 0.0 && (-1e-9..=1.0 + 1e-9).contains(&s) {
                    radius = radius.min(t);
                }
            }
            if !radius.is_finite() {
                radius = 0.0;
            }
            let inside = 1.0 / (1.0 + libm::exp(-(radius - d) / 0.6));
            let rel = if radius > 0.0 { (d / radius).min(1.0) } else { 0.0 };
            let shade = 0.6 + 0.3 * libm::sin(phi + phase) * rel;
            data.push((inside * shade).clamp(0.0, 1.0));
        }
    }
    Image::new(height, width, 1, data)
}

/// Train and test splits of polygon view pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSet {
    pub train: Vec<ShapeExample>,
    pub test: Vec<ShapeExample>,
}

impl ShapeSet {
    pub fn generate(config: &FlowTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let draw = |n: usize, rng: &mut SeededRng| (0..n).map(|_| sample_example(config, rng)).collect::<Result<Vec<_>>>();
        let train = draw(config.train_examples, &mut rng)?;
        let test = draw(config.test_examples, &mut rng)?;
        Ok(Self { train, test })
    }
}

fn sample_example(config: &FlowTrainConfig, rng: &mut SeededRng) -> Result<ShapeExample> {
    let (h, w) = (config.height as f64, config.width as f64);
    let scale = h.min(w) / 16.0;
    let center = (
        w / 2.0 + rng.random_range(-2.0..2.0) * scale,
        h / 2.0 + rng.random_range(-2.0..2.0) * scale,
    );
    let k = config.keypoints;
    let rot = rng.random_range(0.0..core::f64::consts::TAU);
    let step = core::f64::consts::TAU / k as f64;
    let vertices: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let a = rot + step * (i as f64 + rng.random_range(-0.3..0.3));
            let r = rng.random_range(3.0..5.0) * scale;
            (r * libm::cos(a), r * libm::sin(a))
        })
        .collect();
    let phase = rng.random_range(0.0..core::f64::consts::TAU);
    let source = render_shape(config.height, config.width, center, &vertices, phase)?;
    let viewpoint = ViewpointCode::new(config.viewpoint_bins, rng.random_range(0..config.viewpoint_bins))?;
    let transform = viewpoint_transform(&viewpoint, center, config.translations_only);
    let flow = synthetic_flow(&transform, config.height, config.width)?;
    let target = bilinear_warp(&source, &flow)?;
    let pts: Vec<(f64, f64)> = vertices.iter().map(|(x, y)| (center.0 + x, center.1 + y)).collect();
    let visible = pts.iter().map(|&(x, y)| x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0).collect();
    Ok(ShapeExample {
        source,
        target,
        keypoints: KeypointSet::new(pts, visible)?,
        viewpoint,
        flow,
    })
}

/// MLP producing a flow as a residual over the identity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    pub net: Mlp,
    pub height: usize,
    pub width: usize,
}

impl FlowNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(&[input, hidden, 2 * height * width], Activation::Tanh, Activation::Identity, rng)?;
        Ok(Self { net, height, width })
    }

    /// `[B, input] -> [B, H, W, 2]`.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let bound = self.net.bind(g, trainable);
        let residual = bound.forward(g, x)?;
        let b = g.shape(x)[0];
        let residual = g.reshape(residual, vec![b, self.height, self.width, 2])?;
        let grid = g.constant(&identity_grid(b, self.height, self.width));
        Ok((g.add(residual, grid)?, bound.vars()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<FlowField>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (f, _) = self.forward(&mut g, xv, false)?;
        let per = self.height * self.width * 2;
        g.data(f)
            .chunks(per)
            .map(|c| FlowField::new(self.height, self.width, c.to_vec()))
            .collect()
    }
}

fn identity_grid(batch: usize, h: usize, w: usize) -> Tensor {
    let one = FlowField::identity(h, w);
    let mut data = Vec::with_capacity(batch * h * w * 2);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Tensor::new(vec![batch, h, w, 2], data).expect("extents match")
}

/// Teacher rows: source pixels followed by the viewpoint one-hot.
pub fn teacher_input(examples: &[&ShapeExample]) -> Tensor {
    let rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            let mut r = e.source.data().to_vec();
            r.extend(e.viewpoint.one_hot());
            r
        })
        .collect();
    Tensor::from_rows(&rows).expect("equal rows")
}

/// Student rows: centred, size-normalized keypoints (zeros when hidden)
/// followed by the viewpoint one-hot.
pub fn student_input(examples: &[&ShapeExample]) -> Tensor {
    let rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            let (h, w) = (e.source.height() as f64, e.source.width() as f64);
            let mut r = Vec::new();
            for (&(x, y), &vis) in e.keypoints.points().iter().zip(e.keypoints.visible()) {
                if vis {
                    r.extend([x / w - 0.5, y / h - 0.5]);
                } else {
                    r.extend([0.0, 0.0]);
                }
            }
            r.extend(e.viewpoint.one_hot());
            r
        })
        .collect();
    Tensor::from_rows(&rows).expect("equal rows")
}

fn stack(examples: &[&ShapeExample], pick: impl Fn(&ShapeExample) -> &[f64], tail: &[usize]) -> Tensor {
    let mut data = Vec::new();
    for e in examples {
        data.extend_from_slice(pick(e));
    }
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data).expect("extents match")
}

/// Mean L1 reconstruction error of `net` on `examples`.
fn recon_error(net: &FlowNet, examples: &[ShapeExample], input: fn(&[&ShapeExample]) -> Tensor) -> Result<f64> {
    let refs: Vec<&ShapeExample> = examples.iter().collect();
    let flows = net.predict(&input(&refs))?;
    let mut total = 0.0;
    for (e, f) in examples.iter().zip(&flows) {
        total += l1_recon_error(&bilinear_warp(&e.source, f)?, &e.target)?;
    }
    Ok(total / examples.len() as f64)
}

/// Per-epoch test reconstruction errors and the final comparison.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowMetrics {
    /// L1 of the untouched source against the target.
    pub identity_error: f64,
    pub teacher_epoch_l1: Vec<f64>,
    pub student_epoch_l1: Vec<f64>,
    /// Mean training distillation loss per student epoch.
    pub student_epoch_distill: Vec<f64>,
    pub teacher_error: f64,
    pub student_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFlow {
    pub teacher: FlowNet,
    pub student: FlowNet,
    pub metrics: FlowMetrics,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged {
            step: epoch,
            detail: format!("{e}"),
        },
        other => other,
    }
}

fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean_all(d)
}

/// Trains the image-input teacher on ground-truth flows and reconstructions,
/// then the keypoint-input student against the frozen teacher.
pub fn train_flow_predictors(config: &FlowTrainConfig) -> Result<TrainedFlow> {
    config.validate()?;
    let data = ShapeSet::generate(config)?;
    let mut rng = seeded_rng(config.seed ^ 0x5eed_f10a);
    let (h, w) = (config.height, config.width);
    let adam = Adam::new(config.learning_rate)?;

    let mut teacher = FlowNet::new(h * w + config.viewpoint_bins, config.hidden, h, w, &mut rng)?;
    let mut student = FlowNet::new(2 * config.keypoints + config.viewpoint_bins, config.hidden, h, w, &mut rng)?;

    let identity_error = {
        let mut t = 0.0;
        for e in &data.test {
            t += l1_recon_error(&e.source, &e.target)?;
        }
        t / data.test.len() as f64
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut state = AdamState::default();
    let mut teacher_epoch_l1 = Vec::with_capacity(config.teacher_epochs);
    for epoch in 0..config.teacher_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ShapeExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let step = || -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let x = g.constant(&teacher_input(&batch));
                let (flow, vars) = teacher.forward(&mut g, x, true)?;
                let src = g.constant(&stack(&batch, |e| e.source.data(), &[h, w, 1]));
                let tgt = g.constant(&stack(&batch, |e| e.target.data(), &[h, w, 1]));
                let gt = g.constant(&stack(&batch, |e| e.flow.data(), &[h, w, 2]));
                let warped = g.bilinear_warp(src, flow)?;
                let image = l1_mean(&mut g, warped, tgt)?;
                let fl = l1_mean(&mut g, flow, gt)?;
                let fl = g.scale(fl, config.flow_weight)?;
                let loss = g.add(image, fl)?;
                g.backward(loss)?;
                collect_grads(&g, &vars)
            };
            let grads = step().map_err(|e| diverged(epoch, e))?;
            apply_adam(&adam, &mut state, teacher.net.tensors_mut(), &grads).map_err(|e| diverged(epoch, e))?;
        }
        teacher_epoch_l1.push(recon_error(&teacher, &data.test, teacher_input).map_err(|e| diverged(epoch, e))?);
    }

    let mut state = AdamState::default();
    let mut student_epoch_l1 = Vec::with_capacity(config.student_epochs);
    let mut student_epoch_distill = Vec::with_capacity(config.student_epochs);
    for epoch in 0..config.student_epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ShapeExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let step = || -> Result<(f64, Vec<Vec<f64>>)> {
                let mut g = Graph::new();
                let xt = g.constant(&teacher_input(&batch));
                let (teacher_flow, _) = teacher.forward(&mut g, xt, false)?;
                let xs = g.constant(&student_input(&batch));
                let (student_flow, vars) = student.forward(&mut g, xs, true)?;
                let src = g.constant(&stack(&batch, |e| e.source.data(), &[h, w, 1]));
                let tgt = g.constant(&stack(&batch, |e| e.target.data(), &[h, w, 1]));
                let (loss, _, _) = distill_loss_graph(&mut g, student_flow, teacher_flow, src, tgt, config.lambda)?;
                g.backward(loss)?;
                Ok((g.item(loss)?, collect_grads(&g, &vars)?))
            };
            let (l, grads) = step().map_err(|e| diverged(epoch, e))?;
            running += l * chunk.len() as f64;
            apply_adam(&adam, &mut state, student.net.tensors_mut(), &grads).map_err(|e| diverged(epoch, e))?;
        }
        student_epoch_distill.push(running / order.len() as f64);
        student_epoch_l1.push(recon_error(&student, &data.test, student_input).map_err(|e| diverged(epoch, e))?);
    }

    let teacher_error = recon_error(&teacher, &data.test, teacher_input)?;
    let student_error = recon_error(&student, &data.test, student_input)?;
    Ok(TrainedFlow {
        teacher,
        student,
        metrics: FlowMetrics {
            identity_error,
            teacher_epoch_l1,
            student_epoch_l1,
            student_epoch_distill,
            teacher_error,
            student_error,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlowTrainConfig {
        FlowTrainConfig {
            train_examples: 64,
            test_examples: 16,
            teacher_epochs: 2,
            student_epochs: 2,
            ..FlowTrainConfig::default()
        }
    }

    #[test]
    fn shapes_are_deterministic_and_in_range() {
        let a = ShapeSet::generate(&small()).unwrap();
        let b = ShapeSet::generate(&small()).unwrap();
        assert_eq!(a, b);
        let e = &a.train[0];
        let (lo, hi) = e.source.range();
        assert!(lo >= 0.0 && hi <= 1.0 && hi > 0.5);
        assert_eq!(e.keypoints.len(), 6);
    }

    #[test]
    fn student_matching_teacher_has_zero_flow_loss() {
        let cfg = small();
        let data = ShapeSet::generate(&cfg).unwrap();
        let mut rng = seeded_rng(1);
        let mut teacher = FlowNet::new(16 * 16 + 4, 8, 16, 16, &mut rng).unwrap();
        let mut student = FlowNet::new(12 + 4, 8, 16, 16, &mut rng).unwrap();
        // zero the output weights so both emit the same bias-only flow
        let last = teacher.net.layers.len() - 1;
        teacher.net.layers[last].weight = Tensor::zeros(teacher.net.layers[last].weight.shape().to_vec());
        student.net.layers[last].weight = Tensor::zeros(student.net.layers[last].weight.shape().to_vec());
        let bias: Vec<f64> = (0..512).map(|i| (i % 7) as f64 * 0.1).collect();
        teacher.net.layers[last].bias = Tensor::new(vec![512], bias.clone()).unwrap();
        student.net.layers[last].bias = Tensor::new(vec![512], bias).unwrap();
        let refs: Vec<&ShapeExample> = data.train[..4].iter().collect();
        let tf = teacher.predict(&teacher_input(&refs)).unwrap();
        let sf = student.predict(&student_input(&refs)).unwrap();
        for ((t, s), e) in tf.iter().zip(&sf).zip(&refs) {
            let l = super::super::distill_loss(s, t, &e.source, &e.target, 1.0).unwrap();
            assert_eq!(l.flow, 0.0);
        }
    }

    #[test]
    fn short_training_reports_every_epoch() {
        let out = train_flow_predictors(&small()).unwrap();
        assert_eq!(out.metrics.teacher_epoch_l1.len(), 2);
        assert_eq!(out.metrics.student_epoch_l1.len(), 2);
        assert!(out.metrics.teacher_error.is_finite());
    }

    #[test]
    fn translation_mode_flows_are_constant_offsets() {
        let cfg = FlowTrainConfig {
            translations_only: true,
            ..small()
        };
        let data = ShapeSet::generate(&cfg).unwrap();
        for e in &data.train[..8] {
            let (fx, fy) = e.flow.at(3, 4);
            assert_eq!(fy, 3.0);
            assert!((fx - 4.0).abs() <= 2.25 + 1e-12);
        }
    }
}
