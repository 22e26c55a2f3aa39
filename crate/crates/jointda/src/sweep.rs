//! Grid sweeps spread over a rayon pool. Each `(config, seed)` run owns its
//! state, and results are gathered in grid order, so the outcome does not
//! depend on the thread count.

use jointda_core::harness::{evaluate_config, pretrain, ConfigOutcome, PretrainCache, RunConfig, Selection, TwoDomainDataset};
use rayon::prelude::*;

use crate::error::Result;

/// Pretrains once per distinct setting and seed, then trains and scores
/// every grid point on every seed.
pub fn sweep(grid: &[RunConfig], data: &TwoDomainDataset, seeds: &[u64]) -> Result<Selection> {
    if grid.is_empty() {
        return Err(jointda_core::Error::Empty { what: "grid" }.into());
    }
    if seeds.is_empty() {
        return Err(jointda_core::Error::Empty { what: "seeds" }.into());
    }
    data.check_disjoint()?;
    let mut cache = PretrainCache::new();
    let todo = cache.missing(grid, seeds);
    let models = todo
        .par_iter()
        .map(|&(s, i)| pretrain(&grid[i], data, s).map(|m| (s, i, m)))
        .collect::<jointda_core::Result<Vec<_>>>()?;
    for (s, i, m) in models {
        cache.insert(&grid[i], s, m);
    }
    let outcomes = grid
        .par_iter()
        .enumerate()
        .map(|(i, c)| evaluate_config(i, c, data, seeds, &cache))
        .collect::<jointda_core::Result<Vec<_>>>()?;
    Ok(Selection::from_outcomes(outcomes)?)
}

/// Highest mean validation accuracy within each objective, in order of
/// first appearance; ties keep the earlier grid point.
pub fn best_per_objective(sel: &Selection) -> Vec<&ConfigOutcome> {
    let mut out: Vec<&ConfigOutcome> = Vec::new();
    for o in &sel.outcomes {
        match out.iter_mut().find(|b| b.config.objective == o.config.objective) {
            Some(b) if o.val_mean > b.val_mean => *b = o,
            Some(_) => {}
            None => out.push(o),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use jointda_core::harness::{hard_shift_spec, make_two_domain_dataset, select_model, SyntheticDomainSpec};
    use jointda_core::objectives::{Objective, ObjectiveWeights};

    fn tiny_grid() -> Vec<RunConfig> {
        let base = RunConfig {
            steps: 20,
            pretrain_steps: 20,
            batch_size: 16,
            log_every: 10,
            validation_size: 50,
            entropy_probe: 64,
            data: SyntheticDomainSpec {
                source_train: 200,
                source_test: 50,
                target_train: 200,
                target_val: 100,
                target_test: 100,
                ..hard_shift_spec(3)
            },
            ..RunConfig::default()
        };
        vec![
            RunConfig {
                objective: Objective::SourceOnly,
                ..base.clone()
            },
            RunConfig {
                objective: Objective::Dann,
                weights: ObjectiveWeights::new(0.5, 0.0, 0.3).unwrap(),
                ..base.clone()
            },
            RunConfig {
                objective: Objective::DannEm,
                weights: ObjectiveWeights::new(0.5, 0.2, 0.3).unwrap(),
                ..base
            },
        ]
    }

    #[test]
    fn parallel_sweep_matches_sequential_selection() {
        let grid = tiny_grid();
        let data = make_two_domain_dataset(&grid[0].data).unwrap();
        let par = sweep(&grid, &data, &[0, 1]).unwrap();
        let seq = select_model(&grid, &data, &[0, 1], &mut PretrainCache::new()).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn per_objective_choice() {
        let grid = tiny_grid();
        let data = make_two_domain_dataset(&grid[0].data).unwrap();
        let sel = sweep(&grid, &data, &[0]).unwrap();
        let best = best_per_objective(&sel);
        assert_eq!(best.len(), 3);
        assert_eq!(best[2].config.objective, Objective::DannEm);
        assert!(sweep(&[], &data, &[0]).is_err());
    }
}
