//! The DANN-EM target term as a function on the probability simplex.
//!
//! For `α = (α_1, …, α_{N+1})` on the simplex and `α̃_i = α_i / (1 - α_{N+1})`,
//!
//! ```text
//! V(α; g) = (1 - α_{N+1}) Σ_{i≤N} α̃_i log α̃_i
//!         + (1 - α_{N+1}) log(1 - α_{N+1})
//!         + g · log(1 - α_{N+1})
//! ```
//!
//! where `g = 1/γ`. With `g = 0` the maximum value 0 is reached at every
//! vertex, including the degenerate one `α_{N+1} = 1`. Any `g > 0` drives the
//! degenerate vertex to `-∞` and leaves only `α_i = 1, i ≤ N` as maximizers.
//!
//! The per-example bracket of the DANN-EM feature objective,
//! `γ Σ_{i≤N} α_i log α_i + log(1 - α_{N+1})`, equals `γ · V(α; 1/γ)`, so
//! scaling by `γ > 0` leaves the maximizers unchanged; see [`em_bracket`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{invalid, Error, Result};

/// Largest grid [`brute_force_maximize`] will enumerate.
pub const MAX_GRID_POINTS: u128 = 100_000_000;

/// Tolerance for membership in the argmax set.
pub const ARGMAX_TOL: f64 = 1e-9;

/// A point `α` on the `(N+1)`-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidSimplex(format!("need N+1 >= 2 entries, got {}", alpha.len())));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(Error::InvalidSimplex(format!("entry {a} is negative or non-finite")));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSimplex(format!("entries sum to {s}")));
        }
        Ok(Self(alpha))
    }

    /// Vertex with all mass on entry `i`.
    pub fn vertex(n_plus_one: usize, i: usize) -> Result<Self> {
        if i >= n_plus_one {
            return Err(invalid("vertex index out of range"));
        }
        let mut a = vec![0.0; n_plus_one];
        a[i] = 1.0;
        Self::new(a)
    }

    /// Uniform sample from the simplex via normalized exponential draws.
    pub fn random<R: Rng + ?Sized>(n_plus_one: usize, rng: &mut R) -> Self {
        let e: Vec<f64> = (0..n_plus_one).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        Self(e.into_iter().map(|v| v / s).collect())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len() - 1
    }

    /// `α_{N+1}`.
    pub fn target(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// `α̃ = α_{1..N} / (1 - α_{N+1})`; `None` at the degenerate vertex.
    pub fn conditional(&self) -> Option<Vec<f64>> {
        let m: f64 = self.0[..self.classes()].iter().sum();
        (m > 0.0).then(|| self.0[..self.classes()].iter().map(|a| a / m).collect())
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * libm::log(x)
    } else {
        0.0
    }
}

/// `V(α; g)` from the masses of the real classes, with `1 - α_{N+1}`
/// recovered as their sum.
fn value_from_classes(classes: &[f64], gamma_inv: f64) -> f64 {
    let m: f64 = classes.iter().sum();
    if m <= 0.0 {
        return if gamma_inv > 0.0 { f64::NEG_INFINITY } else { 0.0 };
    }
    let h: f64 = classes.iter().map(|a| xlogx(a / m)).sum();
    let lm = libm::log(m);
    m * h + m * lm + gamma_inv * lm
}

/// `V(α; γ_inv)`. Returns `-∞` at `α_{N+1} = 1` when `γ_inv > 0` and the
/// limiting value 0 there when `γ_inv = 0`.
pub fn landscape_value(p: &SimplexPoint, gamma_inv: f64) -> Result<f64> {
    if !(gamma_inv >= 0.0) {
        return Err(invalid("gamma_inv must be nonnegative"));
    }
    Ok(value_from_classes(&p.0[..p.classes()], gamma_inv))
}

/// The DANN-EM per-example bracket `γ Σ_{i≤N} α_i log α_i + log(1 - α_{N+1})`,
/// evaluated directly (no landscape rewrite).
pub fn em_bracket(p: &SimplexPoint, gamma: f64) -> f64 {
    let n = p.classes();
    let ent: f64 = p.0[..n].iter().map(|&a| xlogx(a)).sum();
    let rest: f64 = p.0[..n].iter().sum();
    gamma * ent + if rest > 0.0 { libm::log(rest) } else { f64::NEG_INFINITY }
}

/// Maps the DANN-EM entropy weight `γ > 0` to the landscape parameter `1/γ`.
pub fn gamma_inv_from_gamma(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma must be positive"));
    }
    Ok(1.0 / gamma)
}

/// Global maximum over the barycentric grid and every grid point within
/// [`ARGMAX_TOL`] of it.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceReport {
    pub classes: usize,
    pub gamma_inv: f64,
    pub grid_steps: usize,
    pub points: u128,
    pub max: f64,
    pub argmax: Vec<Vec<f64>>,
}

/// Number of grid points `C(steps + N, N)` on the `(N+1)`-simplex.
pub fn grid_point_count(classes: usize, steps: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..=classes as u128 {
        c = c * (steps as u128 + i) / i;
        if c > MAX_GRID_POINTS * 1000 {
            return c;
        }
    }
    c
}

/// Visits every composition of `total` into `parts` nonnegative parts.
fn for_each_composition(parts: usize, total: usize, mut f: impl FnMut(&[usize])) {
    let mut k = vec![0usize; parts];
    k[parts - 1] = total;
    loop {
        f(&k);
        // next composition in reverse-lexicographic order of k[..parts-1]
        let mut i = parts - 1;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            let used: usize = k[..=i].iter().sum();
            if used < total {
                k[i] += 1;
                for slot in &mut k[i + 1..parts - 1] {
                    *slot = 0;
                }
                k[parts - 1] = total - k[..parts - 1].iter().sum::<usize>();
                break;
            }
        }
    }
}

/// Exhaustive maximization of `V(·; γ_inv)` over `{k / grid_steps}`.
pub fn brute_force_maximize(classes: usize, gamma_inv: f64, grid_steps: usize) -> Result<BruteForceReport> {
    if classes < 1 {
        return Err(invalid("need N >= 1"));
    }
    if grid_steps < 10 {
        return Err(invalid("grid_steps must be at least 10"));
    }
    if !(gamma_inv >= 0.0) {
        return Err(invalid("gamma_inv must be nonnegative"));
    }
    let points = grid_point_count(classes, grid_steps);
    if points > MAX_GRID_POINTS {
        return Err(Error::GridTooLarge {
            points,
            limit: MAX_GRID_POINTS,
        });
    }
    let s = grid_steps as f64;
    let mut best = f64::NEG_INFINITY;
    let mut argmax: Vec<Vec<usize>> = Vec::new();
    let mut alpha = vec![0.0; classes];
    for_each_composition(classes + 1, grid_steps, |k| {
        for (a, &ki) in alpha.iter_mut().zip(k) {
            *a = ki as f64 / s;
        }
        let v = value_from_classes(&alpha, gamma_inv);
        if v > best + ARGMAX_TOL || (best == f64::NEG_INFINITY && v == best && argmax.is_empty()) {
            best = v;
            argmax.retain(|_| false);
            argmax.push(k.to_vec());
        } else if v >= best - ARGMAX_TOL {
            if v > best {
                best = v;
            }
            argmax.push(k.to_vec());
        }
    });
    let argmax = argmax
        .into_iter()
        .filter(|k| {
            let a: Vec<f64> = k[..classes].iter().map(|&x| x as f64 / s).collect();
            value_from_classes(&a, gamma_inv) >= best - ARGMAX_TOL
        })
        .map(|k| k.iter().map(|&x| x as f64 / s).collect())
        .collect();
    Ok(BruteForceReport {
        classes,
        gamma_inv,
        grid_steps,
        points,
        max: best,
        argmax,
    })
}

/// `(α, (1 - α + γ_inv) log(1 - α))` at `α = k / num_points`, `k < num_points`.
///
/// This is the landscape restricted to points whose conditional part is a
/// vertex. It is strictly decreasing on `[0, 1)` only when
/// `γ_inv >= e^{-2}`: below that the slope `-ln m - 1 - γ_inv / m`
/// (`m = 1 - α`) turns positive near `m = γ_inv`, and at `γ_inv = 0` the curve
/// returns to 0 as `α -> 1`.
pub fn curve_samples(gamma_inv: f64, num_points: usize) -> Result<Vec<(f64, f64)>> {
    if num_points < 2 {
        return Err(invalid("num_points must be at least 2"));
    }
    if !(gamma_inv >= 0.0) {
        return Err(invalid("gamma_inv must be nonnegative"));
    }
    Ok((0..num_points)
        .map(|k| {
            let a = k as f64 / num_points as f64;
            let m = 1.0 - a;
            (a, (m + gamma_inv) * libm::log(m))
        })
        .collect())
}

/// Rescales sample values linearly so the most negative one becomes `-7`.
pub fn rescale_curve(samples: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let lo = samples.iter().map(|s| s.1).fold(0.0, f64::min);
    if lo == 0.0 {
        return samples.to_vec();
    }
    let k = 7.0 / -lo;
    samples.iter().map(|&(a, v)| (a, v * k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn vertex_values() {
        for g in [0.0, 0.1, 1.0, 5.0] {
            let v = SimplexPoint::vertex(3, 0).unwrap();
            assert_eq!(landscape_value(&v, g).unwrap(), 0.0);
        }
        let degenerate = SimplexPoint::vertex(3, 2).unwrap();
        assert_eq!(landscape_value(&degenerate, 0.0).unwrap(), 0.0);
        assert_eq!(landscape_value(&degenerate, 0.1).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn invalid_points() {
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexPoint::new(vec![1.0]).is_err());
        let p = SimplexPoint::vertex(2, 0).unwrap();
        assert!(landscape_value(&p, -1.0).is_err());
    }

    #[test]
    fn em_bracket_is_gamma_times_landscape() {
        let mut rng = seeded_rng(8);
        for _ in 0..200 {
            let p = SimplexPoint::random(4, &mut rng);
            for gamma in [0.1, 0.5, 2.0] {
                let lhs = em_bracket(&p, gamma);
                let rhs = gamma * landscape_value(&p, gamma_inv_from_gamma(gamma).unwrap()).unwrap();
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{lhs} {rhs}");
            }
        }
    }

    #[test]
    fn composition_count_matches_enumeration() {
        for (parts, total) in [(2, 10), (3, 10), (4, 12)] {
            let mut n = 0u128;
            for_each_composition(parts, total, |k| {
                assert_eq!(k.iter().sum::<usize>(), total);
                n += 1;
            });
            assert_eq!(n, grid_point_count(parts - 1, total));
        }
    }

    #[test]
    fn brute_force_degenerate_vertex_with_zero_gamma_inv() {
        let r = brute_force_maximize(2, 0.0, 100).unwrap();
        assert_eq!(r.max, 0.0);
        assert_eq!(r.argmax.len(), 3);
        assert!(r.argmax.contains(&vec![0.0, 0.0, 1.0]));
    }

    #[test]
    fn brute_force_positive_gamma_inv_excludes_target_vertex() {
        let r = brute_force_maximize(2, 0.3, 100).unwrap();
        assert_eq!(r.max, 0.0);
        assert_eq!(r.argmax, vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn brute_force_one_class_closed_form() {
        // N = 1: V = (1 - a + 1) log(1 - a), maximized at a = 0
        let r = brute_force_maximize(1, 1.0, 1000).unwrap();
        assert_eq!(r.max, 0.0);
        assert_eq!(r.argmax, vec![vec![1.0, 0.0]]);
        let scan = (0..1000).map(|k| {
            let m = 1.0 - k as f64 / 1000.0;
            (m + 1.0) * libm::log(m)
        });
        assert!(scan.skip(1).all(|v| v < 0.0));
    }

    #[test]
    fn brute_force_rejects_large_grids() {
        assert!(matches!(brute_force_maximize(8, 0.0, 1000), Err(Error::GridTooLarge { .. })));
        assert!(brute_force_maximize(2, 0.0, 5).is_err());
    }

    #[test]
    fn curve_examples() {
        let c = curve_samples(1.0, 4).unwrap();
        assert_eq!(c[0], (0.0, 0.0));
        assert_eq!(c[2].0, 0.5);
        assert!((c[2].1 - 1.5 * libm::log(0.5)).abs() < 1e-15);
        assert!((c[2].1 + 1.03972).abs() < 1e-5);
        assert!(curve_samples(1.0, 1).is_err());
    }

    #[test]
    fn curve_monotone_above_threshold_only() {
        let threshold = libm::exp(-2.0);
        for g in [threshold + 1e-9, 0.3, 1.0, 3.0] {
            let c = curve_samples(g, 1000).unwrap();
            assert!(c.windows(2).all(|w| w[1].1 < w[0].1), "gamma_inv {g}");
        }
        for g in [0.0, 0.1] {
            let c = curve_samples(g, 1000).unwrap();
            assert!(c.windows(2).any(|w| w[1].1 > w[0].1), "gamma_inv {g}");
        }
    }

    #[test]
    fn rescaled_curve_spans_minus_seven() {
        let c = rescale_curve(&curve_samples(0.3, 100).unwrap());
        let lo = c.iter().map(|s| s.1).fold(0.0, f64::min);
        assert!((lo + 7.0).abs() < 1e-12);
        assert!(c.iter().all(|s| s.1 <= 0.0));
    }
}
