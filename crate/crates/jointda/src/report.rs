//! CSV and JSON renderings of run outputs. Everything renders to bytes first
//! so reruns can be compared byte for byte.

use std::path::Path;

use jointda_core::audit::AuditReport;
use jointda_core::cycle::TranslationMetrics;
use jointda_core::flow::FlowMetrics;
use jointda_core::harness::{ConfigOutcome, MetricsLog, Selection};
use jointda_core::landscape::BruteForceReport;
use jointda_core::objectives::Objective;
use serde::Serialize;

use crate::error::{Error, Result};

/// Fixed header of the training metrics CSV.
pub const METRICS_HEADER: [&str; 5] = ["step", "loss_c", "loss_d_or_aux", "loss_f", "entropy"];

fn csv_bytes<I, R>(header: &[String], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

fn owned(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| (*s).to_string()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(log: &MetricsLog) -> Result<Vec<u8>> {
    csv_bytes(
        &owned(&METRICS_HEADER),
        log.entries.iter().map(|e| {
            [
                e.step.to_string(),
                e.loss_c.to_string(),
                e.loss_d_or_aux.to_string(),
                e.loss_f.to_string(),
                e.entropy.to_string(),
            ]
        }),
    )
}

/// `step, loss_d_0 .. loss_d_{A-1}, loss_g, cycle, gt_l1`.
pub fn translation_csv(metrics: &[TranslationMetrics]) -> Result<Vec<u8>> {
    let attrs = metrics.first().map_or(0, |m| m.loss_d.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..attrs).map(|a| format!("loss_d_{a}")));
    header.extend(owned(&["loss_g", "cycle", "gt_l1"]));
    csv_bytes(
        &header,
        metrics.iter().map(|m| {
            let mut r = vec![m.step.to_string()];
            r.extend(m.loss_d.iter().map(f64::to_string));
            r.extend([m.loss_g.to_string(), m.cycle.to_string(), m.gt_l1.to_string()]);
            r
        }),
    )
}

/// One row per epoch; the teacher column is blank once teacher training
/// has finished.
pub fn flow_csv(m: &FlowMetrics) -> Result<Vec<u8>> {
    let epochs = m.teacher_epoch_l1.len().max(m.student_epoch_l1.len());
    csv_bytes(
        &owned(&["epoch", "teacher_l1", "student_l1", "student_distill"]),
        (0..epochs).map(|e| {
            [
                (e + 1).to_string(),
                opt(m.teacher_epoch_l1.get(e).copied()),
                opt(m.student_epoch_l1.get(e).copied()),
                opt(m.student_epoch_distill.get(e).copied()),
            ]
        }),
    )
}

pub fn outcomes_csv(sel: &Selection) -> Result<Vec<u8>> {
    csv_bytes(
        &owned(&[
            "index",
            "objective",
            "lambda",
            "gamma",
            "beta",
            "val_mean",
            "test_mean",
            "test_stderr",
            "entropy_mean",
        ]),
        sel.outcomes.iter().map(|o| {
            let w = &o.config.weights;
            [
                o.index.to_string(),
                o.config.objective.name().to_string(),
                w.lambda.to_string(),
                w.gamma.to_string(),
                w.beta.to_string(),
                o.val_mean.to_string(),
                o.test_mean.to_string(),
                o.test_stderr.to_string(),
                o.entropy_mean.to_string(),
            ]
        }),
    )
}

pub fn curve_csv(samples: &[(f64, f64)]) -> Result<Vec<u8>> {
    csv_bytes(&owned(&["alpha", "value"]), samples.iter().map(|(a, v)| [a.to_string(), v.to_string()]))
}

pub fn audit_csv(r: &AuditReport) -> Result<Vec<u8>> {
    csv_bytes(
        &owned(&["case", "points", "max_rel_error"]),
        r.cases
            .iter()
            .map(|c| [c.name.to_string(), c.points.to_string(), c.max_rel_error.to_string()]),
    )
}

pub fn json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON summary of a brute-force landscape search.
#[derive(Debug, Clone, Serialize)]
pub struct LandscapeSummary {
    pub classes: usize,
    pub gamma_inv: f64,
    pub grid_steps: usize,
    pub points: String,
    pub max: f64,
    pub argmax: Vec<Vec<f64>>,
}

impl From<&BruteForceReport> for LandscapeSummary {
    fn from(r: &BruteForceReport) -> Self {
        Self {
            classes: r.classes,
            gamma_inv: r.gamma_inv,
            grid_steps: r.grid_steps,
            points: r.points.to_string(),
            max: r.max,
            argmax: r.argmax.clone(),
        }
    }
}

/// The selected grid point of one objective.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveChoice<'a> {
    pub objective: Objective,
    pub outcome: &'a ConfigOutcome,
}

/// Full selection report: the overall winner, the winner per objective and
/// every grid point.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionSummary<'a> {
    pub best: usize,
    pub per_objective: Vec<ObjectiveChoice<'a>>,
    pub outcomes: &'a [ConfigOutcome],
}

impl<'a> SelectionSummary<'a> {
    pub fn new(sel: &'a Selection) -> Self {
        Self {
            best: sel.best,
            per_objective: crate::sweep::best_per_objective(sel)
                .into_iter()
                .map(|outcome| ObjectiveChoice {
                    objective: outcome.config.objective,
                    outcome,
                })
                .collect(),
            outcomes: &sel.outcomes,
        }
    }
}
