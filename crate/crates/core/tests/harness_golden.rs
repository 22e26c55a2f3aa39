//! Pinned end-to-end values for the synthetic harness.

use jointda_core::harness::{
    evaluate, hard_shift_spec, make_two_domain_dataset, pretrain, select_model, train_uda, PretrainCache, RunConfig, SyntheticDomainSpec,
};
use jointda_core::objectives::{Objective, ObjectiveWeights};

fn seed42() -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        seed: 42,
        ..SyntheticDomainSpec::default()
    }
}

#[test]
fn seed42_blob_checksum() {
    let d = make_two_domain_dataset(&seed42()).unwrap();
    assert_eq!(d.checksum(), 0x338c_df37_5a38_bb7a);
    assert_eq!(d.floored, 0);
}

fn golden_config() -> RunConfig {
    RunConfig {
        objective: Objective::DannEm,
        weights: ObjectiveWeights::new(0.3, 0.3, 1.0 / 3.0).unwrap(),
        steps: 200,
        pretrain_steps: 100,
        log_every: 50,
        data: seed42(),
        ..RunConfig::default()
    }
}

#[test]
fn golden_run_final_metrics() {
    let cfg = golden_config();
    let d = make_two_domain_dataset(&cfg.data).unwrap();
    let run = train_uda(&cfg, &d, 0).unwrap();
    let e = run.log.entries.last().unwrap();
    assert_eq!(e.step, 200);
    let got = [e.loss_c, e.loss_d_or_aux, e.loss_f, e.entropy, e.entropy_joint];
    let want = [
        -0.7846350283800809,
        -0.2549497635866887,
        -0.1323301966415228,
        0.055005469260779795,
        0.5535842493735467,
    ];
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{got:?}");
    }
    assert_eq!(run.test.top1, 0.993);
    assert_eq!(run.validation.top1, 0.993);
    let sg: Vec<(usize, f64)> = run.test.subgroups.iter().map(|s| (s.count, s.top1)).collect();
    assert_eq!(sg, vec![(479, 0.9895615866388309), (521, 0.9961612284069098)]);

    let again = train_uda(&cfg, &d, 0).unwrap();
    assert_eq!(again.log, run.log);
}

#[test]
fn zero_shift_source_and_target_agree() {
    let spec = SyntheticDomainSpec {
        seed: 8,
        ..SyntheticDomainSpec::default()
    };
    let cfg = RunConfig {
        objective: Objective::SourceOnly,
        pretrain_steps: 300,
        data: spec,
        ..RunConfig::default()
    };
    let d = make_two_domain_dataset(&cfg.data).unwrap();
    let m = pretrain(&cfg, &d, 0).unwrap();
    let s = evaluate(&m, &d.source_test).unwrap().top1;
    let t = evaluate(&m, &d.target_test).unwrap().top1;
    // two binomial proportions over 500 and 1000 examples
    let se = (s * (1.0 - s) / 500.0 + t * (1.0 - t) / 1000.0).sqrt();
    assert!((s - t).abs() < 4.0 * se + 1e-3, "{s} vs {t}");
}

#[test]
fn ss_entropy_falls_on_hard_shift() {
    let cfg = RunConfig {
        objective: Objective::DannSs,
        weights: ObjectiveWeights::new(1.0, 0.0, 1.0 / 3.0).unwrap(),
        validation_size: 200,
        data: hard_shift_spec(0),
        ..RunConfig::default()
    };
    let d = make_two_domain_dataset(&cfg.data).unwrap();
    let run = train_uda(&cfg, &d, 1).unwrap();
    let first = run.log.entries.first().unwrap().entropy;
    let last = run.log.entries.last().unwrap().entropy;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn selection_prefers_em_over_source_only_on_hard_shift() {
    let base = RunConfig {
        validation_size: 200,
        data: hard_shift_spec(0),
        ..RunConfig::default()
    };
    let grid = vec![
        RunConfig {
            objective: Objective::SourceOnly,
            ..base.clone()
        },
        RunConfig {
            objective: Objective::DannEm,
            weights: ObjectiveWeights::new(3.0, 0.1, 1.0 / 3.0).unwrap(),
            ..base
        },
    ];
    let d = make_two_domain_dataset(&grid[0].data).unwrap();
    let mut cache = PretrainCache::new();
    let sel = select_model(&grid, &d, &[0, 1], &mut cache).unwrap();
    assert_eq!(sel.best_outcome().config.objective, Objective::DannEm);
    // both grid points share one pretrained model per seed
    assert_eq!(cache.len(), 2);
}
