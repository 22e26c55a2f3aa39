//! Randomized invariants across the core modules.

use jointda_core::cycle::HistoryBuffer;
use jointda_core::flow::{bilinear_warp, FlowField, Image};
use jointda_core::landscape::{brute_force_maximize, landscape_value, SimplexPoint};
use jointda_core::objectives::{
    conditional_scores, dann_em_feature_loss, dann_losses, dann_ss_losses, prediction_entropy, ObjectiveWeights, UdaModel,
};
use jointda_core::seeded_rng;
use jointda_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn simplex_rows(rng: &mut impl Rng, rows: usize, width: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let e: Vec<f64> = (0..width).map(|_| rng.random_range(-spread..spread).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let l1 = |g: &mut Graph, v| { let t = g.tanh(v)?; g.sum_all(t) };
        let l2 = |g: &mut Graph, v| { let s = g.log_softmax(v)?; let e = g.exp(v)?; let p = g.mul(s, e)?; g.mean_all(p) };
        let grad_of = |f: &dyn Fn(&mut Graph, jointda_core::tensor::Var) -> jointda_core::Result<jointda_core::tensor::Var>| {
            let mut g = Graph::new();
            let v = g.param(&x);
            let y = f(&mut g, v).unwrap();
            g.backward(y).unwrap();
            g.grad(v).unwrap().to_vec()
        };
        let g1 = grad_of(&l1);
        let g2 = grad_of(&l2);
        let gc = grad_of(&|g: &mut Graph, v| {
            let p = l1(g, v)?;
            let q = l2(g, v)?;
            let p = g.scale(p, a)?;
            let q = g.scale(q, b)?;
            g.add(p, q)
        });
        for i in 0..12 {
            prop_assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), n in 2usize..8, spread in 0.0f64..20.0) {
        let mut rng = seeded_rng(seed);
        let rows = simplex_rows(&mut rng, 5, n, spread.max(1e-9));
        let h = prediction_entropy(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-12, "{h}");
    }

    #[test]
    fn warp_stays_in_source_range(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let (h, w) = (5, 6);
        let img = Image::new(h, w, 2, (0..h * w * 2).map(|_| rng.random_range(0.2..0.9)).collect()).unwrap();
        // in-range coordinates only: zero padding can pull values below min(I_s)
        let flow = FlowField::new(h, w, (0..h * w).flat_map(|_| [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)]).collect()).unwrap();
        let out = bilinear_warp(&img, &flow).unwrap();
        let (lo, hi) = img.range();
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn buffer_respects_capacity(seed in any::<u64>(), cap in 1usize..20, pushes in 0usize..60) {
        let mut rng = seeded_rng(seed);
        let mut buf = HistoryBuffer::new(cap).unwrap();
        for i in 0..pushes {
            buf.push(vec![i as f64], &mut rng);
            prop_assert!(buf.len() <= cap);
        }
        if pushes <= cap {
            let mut seen: Vec<f64> = buf.images().iter().map(|v| v[0]).collect();
            seen.sort_by(f64::total_cmp);
            prop_assert_eq!(seen, (0..pushes).map(|i| i as f64).collect::<Vec<_>>());
        }
    }
}

/// Induced DANN pieces from an augmented score matrix: `D = C̃(N+1)` and
/// `C = C̃(·|Y)`.
fn induced(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = rows[0].len() - 1;
    let cond = rows.iter().map(|r| r[..n].iter().map(|p| p / (1.0 - r[n])).collect()).collect();
    let d = rows.iter().map(|r| r[n]).collect();
    (cond, d)
}

#[test]
fn ss_matches_dann_over_random_batches() {
    let mut rng = seeded_rng(2024);
    for trial in 0..1000 {
        let n = rng.random_range(2..6);
        let (bs, bt) = (rng.random_range(1..9), rng.random_range(1..9));
        let s = simplex_rows(&mut rng, bs, n + 1, 3.0);
        let t = simplex_rows(&mut rng, bt, n + 1, 3.0);
        let labels: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
        let w = ObjectiveWeights::new(rng.random_range(0.0..2.0), 0.0, 1.0).unwrap();

        let mut g = Graph::new();
        let sv = g.input(&Tensor::from_rows(&s).unwrap());
        let tv = g.input(&Tensor::from_rows(&t).unwrap());
        let ss = dann_ss_losses(&mut g, sv, &labels, tv, &w).unwrap();

        let (cs, ds) = induced(&s);
        let (_, dt) = induced(&t);
        let cv = g.input(&Tensor::from_rows(&cs).unwrap());
        let dsv = g.input(&Tensor::new(vec![bs, 1], ds).unwrap());
        let dtv = g.input(&Tensor::new(vec![bt, 1], dt).unwrap());
        let d = dann_losses(&mut g, cv, &labels, dsv, dtv, &w).unwrap();

        let lhs_c = g.item(ss.classifier).unwrap();
        let rhs_c = g.item(d.classifier).unwrap() + g.item(d.discriminator).unwrap();
        assert!((lhs_c - rhs_c).abs() < 1e-9, "trial {trial}: {lhs_c} vs {rhs_c}");
        let (lf, df) = (g.item(ss.feature).unwrap(), g.item(d.feature).unwrap());
        assert!((lf - df).abs() < 1e-9, "trial {trial}: {lf} vs {df}");
    }
}

#[test]
fn em_with_zero_gamma_is_ss() {
    let mut rng = seeded_rng(99);
    for _ in 0..1000 {
        let n = rng.random_range(2..6);
        let (bs, bt) = (rng.random_range(1..9), rng.random_range(1..9));
        let s = simplex_rows(&mut rng, bs, n + 1, 3.0);
        let t = simplex_rows(&mut rng, bt, n + 1, 3.0);
        let labels: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
        let w = ObjectiveWeights::new(rng.random_range(0.0..2.0), 0.0, 0.5).unwrap();
        let mut g = Graph::new();
        let sv = g.input(&Tensor::from_rows(&s).unwrap());
        let tv = g.input(&Tensor::from_rows(&t).unwrap());
        let ss = dann_ss_losses(&mut g, sv, &labels, tv, &w).unwrap();
        let em = dann_em_feature_loss(&mut g, sv, &labels, tv, &w).unwrap();
        assert_eq!(g.item(ss.feature).unwrap(), g.item(em.feature).unwrap());
    }
}

#[test]
fn landscape_interior_is_negative() {
    let mut rng = seeded_rng(5);
    for n in 1..=3 {
        for &gi in &[0.0, 0.1, 0.3, 1.0] {
            for _ in 0..100_000 / 4 {
                let p = SimplexPoint::random(n + 1, &mut rng);
                if p.alpha().iter().all(|&a| a > 0.0) {
                    let v = landscape_value(&p, gi).unwrap();
                    assert!(v < 0.0, "N={n} γ_inv={gi} {:?} -> {v}", p.alpha());
                }
            }
        }
    }
}

#[test]
fn brute_force_properties_small_grids() {
    let steps = 60;
    for n in 1..=3 {
        for &gi in &[0.0, 0.1, 0.3, 1.0] {
            let r = brute_force_maximize(n, gi, steps).unwrap();
            let bound = (steps as f64).ln() / steps as f64;
            assert!(r.max.abs() <= bound, "N={n} γ_inv={gi} max {}", r.max);
            let has_target_vertex = r.argmax.iter().any(|a| a[n] == 1.0);
            if gi > 0.0 {
                assert!(r.argmax.iter().all(|a| a[n] <= 1.0 - 1.0 / steps as f64), "N={n} γ_inv={gi}");
            } else {
                assert!(has_target_vertex, "N={n}");
            }
        }
    }
}

#[test]
fn dropping_target_logit_keeps_predictions() {
    let mut rng = seeded_rng(31);
    let mut m = UdaModel::new(4, &[8], 5, 3, &mut rng).unwrap();
    m.augment().unwrap();
    // pull the target bias down so most rows satisfy C̃(N+1) < every class score
    let last = m.head.layers.len() - 1;
    m.head.layers[last].bias.data_mut()[3] -= 1.0;
    let x = Tensor::new(vec![64, 4], (0..256).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let raw = m.raw_probs(&x).unwrap();
    let cond = conditional_scores(&raw).unwrap();
    let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |b, (i, v)| if *v > r[b] { i } else { b });
    let mut checked = 0;
    for r in 0..64 {
        let full = raw.row(r);
        if full[..3].iter().all(|&p| full[3] < p) {
            assert_eq!(argmax(full), argmax(cond.row(r)));
            checked += 1;
        }
    }
    assert!(checked > 32, "only {checked} qualifying rows");
}
