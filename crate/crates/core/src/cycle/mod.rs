//! Attribute-conditioned cycle-consistent translation at toy scale.
//!
//! Images are flattened to `[B, P]` rows. Generators act per pixel as a
//! residual `G(x, code)_p = x_p + g(x_p, code)`, which keeps geometry fixed
//! and leaves only the intensity mapping to learn. Each attribute has its
//! own discriminator over the whole image.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::flow::Image;
use crate::nn::{Activation, BoundMlp, Mlp};
use crate::tensor::{Graph, Tensor, Var};

mod buffer;
mod train;

pub use buffer::HistoryBuffer;
pub use train::{brightness_target, sample_source_images, train_translation, TranslationConfig, TranslationMetrics, TranslationRun};

/// Adversarial loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GanForm {
    /// Squared-error targets 1 (real) and 0 (fake) on raw scores.
    #[default]
    LeastSquares,
    /// Binary log-likelihood on sigmoid scores; the generator maximizes
    /// `log D(G(x))`.
    LogLikelihood,
}

/// Discrete attribute or a convex mixture of attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeCode(Vec<f64>);

impl AttributeCode {
    pub fn discrete(attributes: usize, a: usize) -> Result<Self> {
        if a >= attributes {
            return Err(invalid("unknown attribute"));
        }
        let mut v = vec![0.0; attributes];
        v[a] = 1.0;
        Ok(Self(v))
    }

    /// `(1 - t) code(a0) + t code(a1)`.
    pub fn mix(attributes: usize, a0: usize, a1: usize, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("interpolation weight must lie in [0, 1]"));
        }
        let mut v = Self::discrete(attributes, a0)?.0;
        let e1 = Self::discrete(attributes, a1)?.0;
        for (x, y) in v.iter_mut().zip(&e1) {
            *x = (1.0 - t) * *x + t * y;
        }
        Ok(Self(v))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

/// Per-pixel residual generator, either one network per attribute or one
/// network that takes the code as extra input.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGenerator {
    pub nets: Vec<Mlp>,
    pub shared: bool,
    pub attributes: usize,
}

pub struct BoundGenerator {
    nets: Vec<BoundMlp>,
    shared: bool,
    attributes: usize,
}

impl PixelGenerator {
    pub fn new<R: Rng + ?Sized>(attributes: usize, hidden: usize, shared: bool, rng: &mut R) -> Result<Self> {
        if attributes == 0 {
            return Err(Error::Empty { what: "attributes" });
        }
        let nets = if shared {
            vec![Mlp::new(&[1 + attributes, hidden, 1], Activation::Tanh, Activation::Identity, rng)?]
        } else {
            (0..attributes)
                .map(|_| Mlp::new(&[1, hidden, 1], Activation::Tanh, Activation::Identity, rng))
                .collect::<Result<_>>()?
        };
        Ok(Self { nets, shared, attributes })
    }

    /// Generator whose residual is the constant `offset`, for any input.
    pub fn constant_shift(attributes: usize, offset: f64) -> Result<Self> {
        let mut rng = crate::seeded_rng(0);
        let mut g = Self::new(attributes, 1, false, &mut rng)?;
        for net in &mut g.nets {
            let last = net.layers.len() - 1;
            net.layers[last].weight = Tensor::zeros(vec![1, 1]);
            net.layers[last].bias = Tensor::full(vec![1], offset);
        }
        Ok(g)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            nets: self.nets.iter().map(|n| n.bind(g, trainable)).collect(),
            shared: self.shared,
            attributes: self.attributes,
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(Mlp::tensors_mut).collect()
    }

    /// Applies the generator to `[B, P]` rows without recording gradients.
    pub fn apply(&self, x: &Tensor, code: &AttributeCode) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let y = b.forward(&mut g, xv, code)?;
        Ok(g.value(y).clone())
    }
}

impl BoundGenerator {
    pub fn forward(&self, g: &mut Graph, x: Var, code: &AttributeCode) -> Result<Var> {
        if code.0.len() != self.attributes {
            return Err(invalid("attribute code has the wrong length"));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid("generator input must be [batch, pixels]"));
        }
        let rows = shape[0] * shape[1];
        let pixels = g.reshape(x, vec![rows, 1])?;
        let residual = if self.shared {
            let mut codes = Vec::with_capacity(rows * self.attributes);
            for _ in 0..rows {
                codes.extend_from_slice(&code.0);
            }
            let c = g.constant(&Tensor::new(vec![rows, self.attributes], codes)?);
            let input = g.concat(&[pixels, c], 1)?;
            self.nets[0].forward(g, input)?
        } else {
            let mut acc: Option<Var> = None;
            for (net, &w) in self.nets.iter().zip(&code.0) {
                if w == 0.0 {
                    continue;
                }
                let mut r = net.forward(g, pixels)?;
                if w != 1.0 {
                    r = g.scale(r, w)?;
                }
                acc = Some(match acc {
                    Some(a) => g.add(a, r)?,
                    None => r,
                });
            }
            match acc {
                Some(a) => a,
                None => g.constant(&Tensor::zeros(vec![rows, 1])),
            }
        };
        let residual = g.reshape(residual, shape)?;
        g.add(x, residual)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.nets.iter().flat_map(BoundMlp::vars).collect()
    }
}

/// Generator, inverse generator and one discriminator per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationModel {
    pub generator: PixelGenerator,
    pub inverse: PixelGenerator,
    pub discriminators: Vec<Mlp>,
    pub form: GanForm,
}

impl TranslationModel {
    pub fn new<R: Rng + ?Sized>(
        pixels: usize,
        attributes: usize,
        generator_hidden: usize,
        discriminator_hidden: usize,
        shared: bool,
        form: GanForm,
        rng: &mut R,
    ) -> Result<Self> {
        let generator = PixelGenerator::new(attributes, generator_hidden, shared, rng)?;
        let inverse = PixelGenerator::new(attributes, generator_hidden, shared, rng)?;
        let discriminators = (0..attributes)
            .map(|_| Mlp::new(&[pixels, discriminator_hidden, 1], Activation::Relu, Activation::Identity, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            generator,
            inverse,
            discriminators,
            form,
        })
    }

    pub fn attributes(&self) -> usize {
        self.generator.attributes
    }

    pub fn code(&self, a: usize) -> Result<AttributeCode> {
        AttributeCode::discrete(self.attributes(), a)
    }

    /// Parameters with stable names, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, n) in self.generator.nets.iter().enumerate() {
            out.extend(n.named_tensors(&format!("generator.{i}")));
        }
        for (i, n) in self.inverse.nets.iter().enumerate() {
            out.extend(n.named_tensors(&format!("inverse.{i}")));
        }
        for (i, n) in self.discriminators.iter().enumerate() {
            out.extend(n.named_tensors(&format!("discriminator.{i}")));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, n) in self.generator.nets.iter_mut().enumerate() {
            out.extend(n.named_tensors_mut(&format!("generator.{i}")));
        }
        for (i, n) in self.inverse.nets.iter_mut().enumerate() {
            out.extend(n.named_tensors_mut(&format!("inverse.{i}")));
        }
        for (i, n) in self.discriminators.iter_mut().enumerate() {
            out.extend(n.named_tensors_mut(&format!("discriminator.{i}")));
        }
        out
    }

    /// `G(x, a)` on `[B, P]` rows.
    pub fn translate(&self, x: &Tensor, a: usize) -> Result<Tensor> {
        self.generator.apply(x, &self.code(a)?)
    }
}

/// Discriminator score per example: raw for least squares, sigmoid for
/// log-likelihood.
pub(crate) fn score(g: &mut Graph, d: &BoundMlp, x: Var, form: GanForm) -> Result<Var> {
    let z = d.forward(g, x)?;
    let b = g.shape(z)[0];
    let z = g.reshape(z, vec![b])?;
    match form {
        GanForm::LeastSquares => Ok(z),
        GanForm::LogLikelihood => g.sigmoid(z),
    }
}

fn mean_sq_offset(g: &mut Graph, s: Var, target: f64) -> Result<Var> {
    let d = g.add_scalar(s, -target)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// `(L_D, L_G)` to be minimized, from real and fake discriminator scores.
pub fn gan_losses_graph(g: &mut Graph, real: Var, fake: Var, form: GanForm) -> Result<(Var, Var)> {
    match form {
        GanForm::LeastSquares => {
            let r = mean_sq_offset(g, real, 1.0)?;
            let f = mean_sq_offset(g, fake, 0.0)?;
            let ld = g.add(r, f)?;
            let lg = mean_sq_offset(g, fake, 1.0)?;
            Ok((ld, lg))
        }
        GanForm::LogLikelihood => {
            let lr = g.log(real)?;
            let lr = g.mean_all(lr)?;
            let nf = g.one_minus(fake)?;
            let lf = g.log(nf)?;
            let lf = g.mean_all(lf)?;
            let both = g.add(lr, lf)?;
            let ld = g.scale(both, -1.0)?;
            let lg = g.log(fake)?;
            let lg = g.mean_all(lg)?;
            let lg = g.scale(lg, -1.0)?;
            Ok((ld, lg))
        }
    }
}

/// [`gan_losses_graph`] on plain score lists.
pub fn gan_losses_from_scores(real: &[f64], fake: &[f64], form: GanForm) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Empty {
            what: "discriminator scores",
        });
    }
    let mut g = Graph::new();
    let r = g.constant(&Tensor::new(vec![real.len()], real.to_vec())?);
    let f = g.constant(&Tensor::new(vec![fake.len()], fake.to_vec())?);
    let (ld, lg) = gan_losses_graph(&mut g, r, f, form)?;
    Ok((g.item(ld)?, g.item(lg)?))
}

fn check_batches(x_s: &Tensor, x_t: &Tensor, model: &TranslationModel, a: usize) -> Result<()> {
    if x_s.is_empty() || x_t.is_empty() {
        return Err(Error::Empty { what: "image batch" });
    }
    if a >= model.attributes() {
        return Err(invalid("unknown attribute"));
    }
    if x_s.rank() != 2 || x_t.rank() != 2 || x_s.shape()[1] != x_t.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "translation batch",
            left: x_s.shape().to_vec(),
            right: x_t.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(L_{D_a}, L_G)` for attribute `a` on a source batch and a batch of
/// target images carrying `a`, both minimized.
pub fn ac_gan_losses(x_s: &Tensor, x_t_a: &Tensor, model: &TranslationModel, a: usize) -> Result<(f64, f64)> {
    check_batches(x_s, x_t_a, model, a)?;
    let mut g = Graph::new();
    let gen = model.generator.bind(&mut g, false);
    let d = model.discriminators[a].bind(&mut g, false);
    let xs = g.constant(x_s);
    let xt = g.constant(x_t_a);
    let fake = gen.forward(&mut g, xs, &model.code(a)?)?;
    let real = score(&mut g, &d, xt, model.form)?;
    let fake = score(&mut g, &d, fake, model.form)?;
    let (ld, lg) = gan_losses_graph(&mut g, real, fake, model.form)?;
    Ok((g.item(ld)?, g.item(lg)?))
}

fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "reconstruction",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean_all(d)
}

/// `E_S |F(G(x,a),a) - x|_1 + E_{T_a} |G(F(y,a),a) - y|_1` on bound networks.
pub(crate) fn cycle_graph(g: &mut Graph, gen: &BoundGenerator, inv: &BoundGenerator, xs: Var, xt: Var, code: &AttributeCode) -> Result<Var> {
    let fwd = gen.forward(g, xs, code)?;
    let back = inv.forward(g, fwd, code)?;
    let l_s = l1(g, back, xs)?;
    let inv_t = inv.forward(g, xt, code)?;
    let re_t = gen.forward(g, inv_t, code)?;
    let l_t = l1(g, re_t, xt)?;
    g.add(l_s, l_t)
}

/// Mean per-pixel cycle reconstruction error in both directions.
pub fn cycle_loss(x_s: &Tensor, x_t_a: &Tensor, model: &TranslationModel, a: usize) -> Result<f64> {
    check_batches(x_s, x_t_a, model, a)?;
    let mut g = Graph::new();
    let gen = model.generator.bind(&mut g, false);
    let inv = model.inverse.bind(&mut g, false);
    let xs = g.constant(x_s);
    let xt = g.constant(x_t_a);
    let l = cycle_graph(&mut g, &gen, &inv, xs, xt, &model.code(a)?)?;
    g.item(l)
}

/// `G(x, (1 - t) code(a0) + t code(a1))`, clamped to `[0, 1]`.
pub fn interpolate_attribute(model: &TranslationModel, x: &Image, a0: usize, a1: usize, t: f64) -> Result<Image> {
    let code = AttributeCode::mix(model.attributes(), a0, a1, t)?;
    let row = Tensor::new(vec![1, x.data().len()], x.data().to_vec())?;
    let y = model.generator.apply(&row, &code)?;
    Image::new(x.height(), x.width(), x.channels(), y.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// `G(x, a)` for one image, clamped to `[0, 1]`.
pub fn translate_image(model: &TranslationModel, x: &Image, a: usize) -> Result<Image> {
    let row = Tensor::new(vec![1, x.data().len()], x.data().to_vec())?;
    let y = model.translate(&row, a)?;
    Image::new(x.height(), x.width(), x.channels(), y.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn batch(seed: u64, rows: usize, pixels: usize) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::new(vec![rows, pixels], (0..rows * pixels).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
    }

    fn identity_model(form: GanForm) -> TranslationModel {
        let mut rng = seeded_rng(0);
        let mut m = TranslationModel::new(4, 2, 4, 4, false, form, &mut rng).unwrap();
        m.generator = PixelGenerator::constant_shift(2, 0.0).unwrap();
        m.inverse = PixelGenerator::constant_shift(2, 0.0).unwrap();
        m
    }

    #[test]
    fn least_squares_examples() {
        assert_eq!(gan_losses_from_scores(&[1.0, 1.0], &[0.0], GanForm::LeastSquares).unwrap(), (0.0, 1.0));
        let (ld, lg) = gan_losses_from_scores(&[0.5; 3], &[0.5; 3], GanForm::LeastSquares).unwrap();
        assert!((ld - 0.5).abs() < 1e-15 && (lg - 0.25).abs() < 1e-15);
        assert!(gan_losses_from_scores(&[], &[0.5], GanForm::LeastSquares).is_err());
    }

    #[test]
    fn log_likelihood_form() {
        let (ld, lg) = gan_losses_from_scores(&[0.5], &[0.5], GanForm::LogLikelihood).unwrap();
        let l2 = core::f64::consts::LN_2;
        assert!((ld - 2.0 * l2).abs() < 1e-15 && (lg - l2).abs() < 1e-15);
    }

    #[test]
    fn ac_gan_oracle_seed_17() {
        let mut rng = seeded_rng(17);
        let m = TranslationModel::new(6, 2, 3, 5, false, GanForm::LeastSquares, &mut rng).unwrap();
        let xs = batch(170, 4, 6);
        let xt = batch(171, 5, 6);
        let (ld, lg) = ac_gan_losses(&xs, &xt, &m, 1).unwrap();

        // independent evaluation with hand-rolled forward passes
        let gen = |v: f64| {
            let net = &m.generator.nets[1];
            let (w0, b0, w1, b1) = (&net.layers[0].weight, &net.layers[0].bias, &net.layers[1].weight, &net.layers[1].bias);
            let mut out = b1.data()[0];
            for k in 0..3 {
                out += libm::tanh(v * w0.data()[k] + b0.data()[k]) * w1.data()[k];
            }
            v + out
        };
        let disc = |row: &[f64]| {
            let net = &m.discriminators[1];
            let (w0, b0, w1, b1) = (&net.layers[0].weight, &net.layers[0].bias, &net.layers[1].weight, &net.layers[1].bias);
            let mut out = b1.data()[0];
            for k in 0..5 {
                let mut z = b0.data()[k];
                for (p, v) in row.iter().enumerate() {
                    z += v * w0.data()[p * 5 + k];
                }
                out += z.max(0.0) * w1.data()[k];
            }
            out
        };
        let real: Vec<f64> = (0..5).map(|i| disc(xt.row(i))).collect();
        let fake: Vec<f64> = (0..4).map(|i| disc(&xs.row(i).iter().map(|&v| gen(v)).collect::<Vec<_>>())).collect();
        let e_ld = real.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / 5.0 + fake.iter().map(|f| f * f).sum::<f64>() / 4.0;
        let e_lg = fake.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / 4.0;
        assert!((ld - e_ld).abs() < 1e-12, "{ld} {e_ld}");
        assert!((lg - e_lg).abs() < 1e-12, "{lg} {e_lg}");
        assert!(ac_gan_losses(&xs, &xt, &m, 2).is_err());
    }

    #[test]
    fn identity_pair_has_zero_cycle() {
        let m = identity_model(GanForm::LeastSquares);
        assert_eq!(cycle_loss(&batch(1, 3, 4), &batch(2, 3, 4), &m, 0).unwrap(), 0.0);
    }

    #[test]
    fn exact_inverse_brightness_pair() {
        let mut m = identity_model(GanForm::LeastSquares);
        m.generator = PixelGenerator::constant_shift(2, 0.1).unwrap();
        m.inverse = PixelGenerator::constant_shift(2, -0.1).unwrap();
        let l = cycle_loss(&batch(1, 3, 4), &batch(2, 3, 4), &m, 1).unwrap();
        assert!(l < 1e-15, "{l}");
    }

    #[test]
    fn cycle_oracle_seed_19() {
        let mut rng = seeded_rng(19);
        let m = TranslationModel::new(4, 2, 3, 2, false, GanForm::LeastSquares, &mut rng).unwrap();
        let xs = batch(190, 3, 4);
        let xt = batch(191, 2, 4);
        let l = cycle_loss(&xs, &xt, &m, 0).unwrap();
        let apply = |net: &Mlp, v: f64| {
            let (w0, b0, w1, b1) = (&net.layers[0].weight, &net.layers[0].bias, &net.layers[1].weight, &net.layers[1].bias);
            let mut out = b1.data()[0];
            for k in 0..3 {
                out += libm::tanh(v * w0.data()[k] + b0.data()[k]) * w1.data()[k];
            }
            v + out
        };
        let (gn, fnet) = (&m.generator.nets[0], &m.inverse.nets[0]);
        let ls: f64 = xs.data().iter().map(|&v| (apply(fnet, apply(gn, v)) - v).abs()).sum::<f64>() / 12.0;
        let lt: f64 = xt.data().iter().map(|&v| (apply(gn, apply(fnet, v)) - v).abs()).sum::<f64>() / 8.0;
        assert!((l - ls - lt).abs() < 1e-12);
    }

    #[test]
    fn shape_drift_and_empty_rejected() {
        let m = identity_model(GanForm::LeastSquares);
        assert!(cycle_loss(&batch(1, 3, 4), &batch(2, 3, 5), &m, 0).is_err());
        let empty = Tensor::new(vec![0, 4], vec![]);
        assert!(empty.is_err() || cycle_loss(&empty.unwrap(), &batch(2, 3, 4), &m, 0).is_err());
    }

    #[test]
    fn interpolation_endpoints_are_bitwise() {
        let mut rng = seeded_rng(4);
        for shared in [false, true] {
            let m = TranslationModel::new(4, 2, 5, 3, shared, GanForm::LeastSquares, &mut rng).unwrap();
            let x = Image::new(2, 2, 1, vec![0.1, 0.4, 0.7, 0.9]).unwrap();
            assert_eq!(interpolate_attribute(&m, &x, 0, 1, 0.0).unwrap(), translate_image(&m, &x, 0).unwrap());
            assert_eq!(interpolate_attribute(&m, &x, 0, 1, 1.0).unwrap(), translate_image(&m, &x, 1).unwrap());
            assert!(interpolate_attribute(&m, &x, 0, 1, 1.5).is_err());
        }
    }

    #[test]
    fn shared_and_unshared_parameter_counts() {
        let mut rng = seeded_rng(2);
        let shared = PixelGenerator::new(2, 4, true, &mut rng).unwrap();
        let unshared = PixelGenerator::new(2, 4, false, &mut rng).unwrap();
        assert_eq!(shared.nets.len(), 1);
        assert_eq!(shared.nets[0].input_dim(), 3);
        assert_eq!(unshared.nets.len(), 2);
    }
}
