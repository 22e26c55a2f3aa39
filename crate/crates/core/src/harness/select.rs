//! Supervised model selection over a grid of run configurations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::data::TwoDomainDataset;
use super::run::{pretrain, train_uda_from, RunConfig};
use crate::error::{Error, Result};
use crate::objectives::UdaModel;

/// Pretrained source-only models keyed by seed and the settings that
/// influence pretraining. A cache belongs to one dataset.
#[derive(Debug, Clone, Default)]
pub struct PretrainCache {
    models: BTreeMap<(u64, String), UdaModel>,
}

fn pretrain_key(config: &RunConfig) -> String {
    format!(
        "{:?}|{}|{}|{}|{}",
        config.hidden, config.feature_dim, config.pretrain_steps, config.batch_size, config.learning_rate
    )
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, config: &RunConfig, seed: u64) -> Option<&UdaModel> {
        self.models.get(&(seed, pretrain_key(config)))
    }

    /// Stores a model pretrained elsewhere, e.g. on another thread.
    pub fn insert(&mut self, config: &RunConfig, seed: u64, model: UdaModel) {
        self.models.insert((seed, pretrain_key(config)), model);
    }

    /// `(seed, config index)` pairs of `grid` that still need pretraining,
    /// one per distinct pretraining key.
    pub fn missing(&self, grid: &[RunConfig], seeds: &[u64]) -> Vec<(u64, usize)> {
        let mut seen = alloc::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (i, c) in grid.iter().enumerate() {
            for &s in seeds {
                let key = (s, pretrain_key(c));
                if !self.models.contains_key(&key) && seen.insert(key) {
                    out.push((s, i));
                }
            }
        }
        out
    }

    /// Pretrains every `(config, seed)` pair not yet present.
    pub fn warm(&mut self, grid: &[RunConfig], data: &TwoDomainDataset, seeds: &[u64]) -> Result<()> {
        for (s, i) in self.missing(grid, seeds) {
            let m = pretrain(&grid[i], data, s)?;
            self.insert(&grid[i], s, m);
        }
        Ok(())
    }
}

/// Per-seed results of one grid point.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfigOutcome {
    pub index: usize,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub val_top1: Vec<f64>,
    pub test_top1: Vec<f64>,
    /// Final probe entropy of each run.
    pub final_entropy: Vec<f64>,
    pub val_mean: f64,
    pub test_mean: f64,
    pub test_stderr: f64,
    pub entropy_mean: f64,
}

/// The chosen grid point and every outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Selection {
    pub best: usize,
    pub outcomes: Vec<ConfigOutcome>,
}

impl Selection {
    pub fn best_outcome(&self) -> &ConfigOutcome {
        &self.outcomes[self.best]
    }

    /// Picks the highest mean validation accuracy; ties go to the earlier
    /// grid point.
    pub fn from_outcomes(outcomes: Vec<ConfigOutcome>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Empty { what: "grid" });
        }
        let mut best = 0;
        for (i, o) in outcomes.iter().enumerate() {
            if o.val_mean > outcomes[best].val_mean {
                best = i;
            }
        }
        Ok(Self { best, outcomes })
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}

/// Trains grid point `index` once per seed, reusing cached pretraining when
/// available.
pub fn evaluate_config(index: usize, config: &RunConfig, data: &TwoDomainDataset, seeds: &[u64], cache: &PretrainCache) -> Result<ConfigOutcome> {
    let mut val = Vec::with_capacity(seeds.len());
    let mut test = Vec::with_capacity(seeds.len());
    let mut ent = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let run = match cache.get(config, s) {
            Some(pre) => train_uda_from(config, data, s, pre)?,
            None => train_uda_from(config, data, s, &pretrain(config, data, s)?)?,
        };
        val.push(run.validation.top1);
        test.push(run.test.top1);
        ent.push(run.log.entries.last().map_or(f64::NAN, |e| e.entropy));
    }
    let (val_mean, _) = mean_and_stderr(&val);
    let (test_mean, test_stderr) = mean_and_stderr(&test);
    let (entropy_mean, _) = mean_and_stderr(&ent);
    Ok(ConfigOutcome {
        index,
        config: config.clone(),
        seeds: seeds.to_vec(),
        val_top1: val,
        test_top1: test,
        final_entropy: ent,
        val_mean,
        test_mean,
        test_stderr,
        entropy_mean,
    })
}

/// Trains every grid point on every seed and keeps the one with the best
/// mean accuracy on the labeled target validation subset.
pub fn select_model(grid: &[RunConfig], data: &TwoDomainDataset, seeds: &[u64], cache: &mut PretrainCache) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::Empty { what: "grid" });
    }
    if seeds.is_empty() {
        return Err(Error::Empty { what: "seeds" });
    }
    data.check_disjoint()?;
    cache.warm(grid, data, seeds)?;
    let outcomes = grid
        .iter()
        .enumerate()
        .map(|(i, c)| evaluate_config(i, c, data, seeds, cache))
        .collect::<Result<Vec<_>>>()?;
    Selection::from_outcomes(outcomes)
}
