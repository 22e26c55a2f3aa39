//! Gradient audit over the whole op suite and the three feature losses.
//!
//! Each case is a scalar function of one tensor, checked with central finite
//! differences at randomly drawn points. Inputs to non-smooth ops (`relu`,
//! `abs`, the warp kernel) are drawn away from their kinks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::objectives::{dann_em_feature_loss, dann_losses, dann_ss_losses, ObjectiveWeights};
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::{seeded_rng, Rng as SeededRng};

/// Tolerance every case must meet.
pub const AUDIT_TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const AUDIT_EPS: f64 = 1e-5;
/// Examples per feature-loss batch (half source, half target).
pub const FEATURE_BATCH: usize = 8;

/// Worst error seen for one case.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CaseResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < AUDIT_TOLERANCE
    }
}

/// Results of [`run_audit`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AuditReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl AuditReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }
}

type CaseFn = fn(&mut Graph, Var, &Tensor) -> Result<Var>;

/// How to draw a point for a case.
#[derive(Clone, Copy)]
enum Draw {
    /// Uniform in `[-2, 2]`.
    Wide,
    /// Uniform magnitude in `[0.1, 2]` with random sign.
    AwayFromZero,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Uniform in `[-1, 1]`: small enough that class scores stay valid.
    Feature,
}

struct Case {
    name: &'static str,
    shape: &'static [usize],
    draw: Draw,
    f: CaseFn,
}

fn draw(rng: &mut SeededRng, kind: Draw, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match kind {
            Draw::Wide => rng.random_range(-2.0..2.0),
            Draw::AwayFromZero => {
                let m: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
            Draw::Positive => rng.random_range(0.5..2.0),
            Draw::Feature => rng.random_range(-1.0..1.0),
        })
        .collect()
}

/// Weighted sum `Σ y ⊙ w` so that every output coordinate reaches the loss
/// with a distinct coefficient.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let n = g.value(y).len();
    let w = Tensor::new(g.shape(y).to_vec(), w.data()[..n].to_vec())?;
    let wv = g.constant(&w);
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

/// Splits a `[4, 3]` point into two `[2, 3]` operands.
fn halves(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    Ok((g.slice(x, 0, 0, 2)?, g.slice(x, 0, 2, 2)?))
}

fn fixed_matrix(rows: usize, cols: usize, salt: f64) -> Result<Tensor> {
    let data = (0..rows * cols).map(|k| libm::sin(1.7 * k as f64 + salt) * 0.8).collect();
    Tensor::new(vec![rows, cols], data)
}

const FEAT_DIM: usize = 3;
const CLASSES: usize = 3;

/// Class probabilities, augmented scores and discriminator outputs for a
/// `[FEATURE_BATCH, FEAT_DIM]` feature point, via fixed linear heads.
fn heads(g: &mut Graph, x: Var, out: usize, salt: f64) -> Result<Var> {
    let w = g.constant(&fixed_matrix(FEAT_DIM, out, salt)?);
    let b = g.constant(&Tensor::new(vec![out], (0..out).map(|k| 0.1 * k as f64 - 0.1).collect())?);
    g.affine(x, w, b)
}

fn split_domains(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let h = FEATURE_BATCH / 2;
    Ok((g.slice(x, 0, 0, h)?, g.slice(x, 0, h, h)?))
}

const AUDIT_LABELS: [usize; FEATURE_BATCH / 2] = [0, 2, 1, 2];

fn audit_weights() -> ObjectiveWeights {
    ObjectiveWeights {
        lambda: 0.7,
        gamma: 0.4,
        beta: 0.5,
    }
}

fn dann_feature(g: &mut Graph, x: Var, _w: &Tensor) -> Result<Var> {
    let (s, t) = split_domains(g, x)?;
    let logits = heads(g, s, CLASSES, 0.0)?;
    let probs = g.softmax(logits)?;
    let ds = heads(g, s, 1, 2.0)?;
    let ds = g.sigmoid(ds)?;
    let dt = heads(g, t, 1, 2.0)?;
    let dt = g.sigmoid(dt)?;
    Ok(dann_losses(g, probs, &AUDIT_LABELS, ds, dt, &audit_weights())?.feature)
}

fn augmented(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let (s, t) = split_domains(g, x)?;
    let ls = heads(g, s, CLASSES + 1, 0.5)?;
    let lt = heads(g, t, CLASSES + 1, 0.5)?;
    Ok((g.softmax(ls)?, g.softmax(lt)?))
}

fn ss_feature(g: &mut Graph, x: Var, _w: &Tensor) -> Result<Var> {
    let (s, t) = augmented(g, x)?;
    Ok(dann_ss_losses(g, s, &AUDIT_LABELS, t, &audit_weights())?.feature)
}

fn em_feature(g: &mut Graph, x: Var, _w: &Tensor) -> Result<Var> {
    let (s, t) = augmented(g, x)?;
    Ok(dann_em_feature_loss(g, s, &AUDIT_LABELS, t, &audit_weights())?.feature)
}

/// Largest target score in an augmented head, used to keep audit points
/// where `C̃(N+1) < 0.99`.
fn max_target_score(point: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(point);
    let (s, t) = augmented(&mut g, x)?;
    let all = g.concat(&[s, t], 0)?;
    Ok(g.data(all).chunks(CLASSES + 1).map(|r| r[CLASSES]).fold(0.0, f64::max))
}

const WARP_SIDE: usize = 3;

/// Flow coordinates in `[-0.9, 2.9]` whose fractional part lies in
/// `[0.1, 0.9]`, so no coordinate sits within 0.1 of an integer.
fn warp_coords(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let base = rng.random_range(-1i32..3) as f64;
            base + rng.random_range(0.1..0.9)
        })
        .collect()
}

fn warp_image() -> Result<Tensor> {
    let n = WARP_SIDE * WARP_SIDE * 2;
    Tensor::new(
        vec![1, WARP_SIDE, WARP_SIDE, 2],
        (0..n).map(|k| 0.5 + 0.4 * libm::cos(0.9 * k as f64)).collect(),
    )
}

/// `mean |warp(I, F) - T|` as a function of the flow. Warped values stay
/// below 0.9 and targets sit at or above 1, so the L1 kink is never reached.
fn warp_wrt_flow(g: &mut Graph, f: Var, w: &Tensor) -> Result<Var> {
    let img = g.constant(&warp_image()?);
    let out = g.bilinear_warp(img, f)?;
    let target = Tensor::new(
        g.shape(out).to_vec(),
        w.data()[..g.value(out).len()].iter().map(|v| 1.0 + 0.5 * v.abs()).collect(),
    )?;
    let t = g.constant(&target);
    let d = g.sub(out, t)?;
    let a = g.abs(d)?;
    g.mean_all(a)
}

fn warp_flow_tensor(rng: &mut SeededRng) -> Result<Tensor> {
    Tensor::new(vec![1, WARP_SIDE, WARP_SIDE, 2], warp_coords(rng, WARP_SIDE * WARP_SIDE * 2))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            shape: &[4, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let (a, b) = halves(g, x)?;
                let y = g.add(a, b)?;
                project(g, y, w)
            },
        },
        Case {
            name: "sub",
            shape: &[4, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let (a, b) = halves(g, x)?;
                let y = g.sub(a, b)?;
                project(g, y, w)
            },
        },
        Case {
            name: "mul",
            shape: &[4, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let (a, b) = halves(g, x)?;
                let y = g.mul(a, b)?;
                project(g, y, w)
            },
        },
        Case {
            name: "scale",
            shape: &[2, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.scale(x, -1.3)?;
                project(g, y, w)
            },
        },
        Case {
            name: "add_scalar",
            shape: &[2, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.add_scalar(x, 0.7)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "one_minus",
            shape: &[2, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.one_minus(x)?;
                let y = g.mul(y, x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "matmul",
            shape: &[5, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let a = g.slice(x, 0, 0, 2)?;
                let b = g.slice(x, 0, 2, 3)?;
                let y = g.matmul(a, b)?;
                project(g, y, w)
            },
        },
        Case {
            name: "affine",
            shape: &[6, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let xs = g.slice(x, 0, 0, 2)?;
                let wm = g.slice(x, 0, 2, 3)?;
                let b = g.slice(x, 0, 5, 1)?;
                let b = g.reshape(b, vec![3])?;
                let y = g.affine(xs, wm, b)?;
                project(g, y, w)
            },
        },
        Case {
            name: "relu",
            shape: &[2, 4],
            draw: Draw::AwayFromZero,
            f: |g, x, w| {
                let y = g.relu(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "tanh",
            shape: &[2, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.tanh(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "sigmoid",
            shape: &[2, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.sigmoid(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "exp",
            shape: &[2, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.exp(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "log",
            shape: &[2, 4],
            draw: Draw::Positive,
            f: |g, x, w| {
                let y = g.log(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "abs",
            shape: &[2, 4],
            draw: Draw::AwayFromZero,
            f: |g, x, w| {
                let y = g.abs(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "softmax",
            shape: &[2, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.softmax(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "log_softmax",
            shape: &[2, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.log_softmax(x)?;
                project(g, y, w)
            },
        },
        Case {
            name: "sum_axis0",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.sum(x, 0)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "sum_axis1",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.sum(x, 1)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "mean_axis0",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.mean(x, 0)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "mean_axis1",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.mean(x, 1)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "sum_all",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, _| {
                let y = g.mul(x, x)?;
                g.sum_all(y)
            },
        },
        Case {
            name: "mean_all",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, _| {
                let y = g.tanh(x)?;
                g.mean_all(y)
            },
        },
        Case {
            name: "concat",
            shape: &[4, 3],
            draw: Draw::Wide,
            f: |g, x, w| {
                let (a, b) = halves(g, x)?;
                let b2 = g.mul(b, b)?;
                let y = g.concat(&[b2, a], 1)?;
                project(g, y, w)
            },
        },
        Case {
            name: "slice",
            shape: &[3, 5],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.slice(x, 1, 1, 3)?;
                let y = g.mul(y, y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "column",
            shape: &[3, 4],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.column(x, 2)?;
                let y = g.exp(y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "reshape",
            shape: &[2, 6],
            draw: Draw::Wide,
            f: |g, x, w| {
                let y = g.reshape(x, vec![3, 4])?;
                let y = g.softmax(y)?;
                project(g, y, w)
            },
        },
        Case {
            name: "bilinear_warp_image",
            shape: &[1, 3, 3, 2],
            draw: Draw::Wide,
            f: |g, x, w| {
                let mut rng = seeded_rng(77);
                let flow = g.constant(&warp_flow_tensor(&mut rng)?);
                let y = g.bilinear_warp(x, flow)?;
                project(g, y, w)
            },
        },
        Case {
            name: "bilinear_warp_flow",
            shape: &[1, 3, 3, 2],
            draw: Draw::Wide,
            f: warp_wrt_flow,
        },
        Case {
            name: "dann_feature_loss",
            shape: &[FEATURE_BATCH, FEAT_DIM],
            draw: Draw::Feature,
            f: dann_feature,
        },
        Case {
            name: "dann_ss_feature_loss",
            shape: &[FEATURE_BATCH, FEAT_DIM],
            draw: Draw::Feature,
            f: ss_feature,
        },
        Case {
            name: "dann_em_feature_loss",
            shape: &[FEATURE_BATCH, FEAT_DIM],
            draw: Draw::Feature,
            f: em_feature,
        },
    ]
}

/// Names of every audited case, in order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case at `points` random points drawn from `seed`.
pub fn run_audit(points: usize, seed: u64) -> Result<AuditReport> {
    if points == 0 {
        return Err(Error::Empty { what: "audit points" });
    }
    let mut rng = seeded_rng(seed);
    let mut results = Vec::new();
    for case in cases() {
        let n: usize = case.shape.iter().product();
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = if case.name == "bilinear_warp_flow" {
                warp_flow_tensor(&mut rng)?
            } else {
                loop {
                    let p = Tensor::new(case.shape.to_vec(), draw(&mut rng, case.draw, n))?;
                    if !matches!(case.draw, Draw::Feature) || max_target_score(&p)? < 0.99 {
                        break p;
                    }
                }
            };
            let w = Tensor::new(
                vec![n.max(WARP_SIDE * WARP_SIDE * 2)],
                draw(&mut rng, Draw::Wide, n.max(WARP_SIDE * WARP_SIDE * 2)),
            )?;
            let f = case.f;
            let report = grad_check(|g, x| f(g, x, &w), &point, AUDIT_EPS)?;
            worst = worst.max(report.max_rel_error);
        }
        results.push(CaseResult {
            name: case.name,
            points,
            max_rel_error: worst,
        });
    }
    Ok(AuditReport { seed, cases: results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_audit_passes_everywhere() {
        let r = run_audit(5, 1).unwrap();
        assert!(r.passed(), "{:?}", r.failures());
        assert_eq!(r.cases.len(), case_names().len());
    }

    #[test]
    fn warp_coordinates_avoid_integers() {
        let mut rng = seeded_rng(3);
        for c in warp_coords(&mut rng, 1000) {
            let frac = c - libm::floor(c);
            assert!((0.1..=0.9).contains(&frac), "{c}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at its kink: the one-sided slope vs a symmetric difference of 0.5
        let r = grad_check(|g, x| g.relu(x), &Tensor::scalar(0.0), AUDIT_EPS).unwrap();
        assert!(r.max_rel_error > AUDIT_TOLERANCE);
    }

    #[test]
    fn zero_points_rejected() {
        assert!(run_audit(0, 0).is_err());
    }
}
