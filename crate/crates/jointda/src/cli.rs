//! The `jointda` command line.
//!
//! Exit status is 0 on success, 1 for usage, config and IO errors and 2 when
//! a run aborts numerically.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jointda_core::audit::run_audit;
use jointda_core::cycle::{interpolate_attribute, sample_source_images, train_translation, translate_image};
use jointda_core::flow::{
    bilinear_warp, compose_flows, student_input, synthetic_flow, teacher_input, train_flow_predictors, Affine2, FlowField, Image, ShapeExample,
    ShapeSet,
};
use jointda_core::harness::{
    evaluate, evaluate_flip_averaged, make_two_domain_dataset, mean_and_stderr, train_uda, Evaluation, RunConfig, TwoDomainDataset,
};
use jointda_core::landscape::{brute_force_maximize, curve_samples, rescale_curve};
use jointda_core::objectives::{Objective, UdaModel};
use jointda_core::seeded_rng;
use serde::Serialize;

use crate::config::{read_json, validate_run, DistillConfig, SweepConfig, TranslateConfig};
use crate::error::{Error, Result};
use crate::formats::{read_checkpoint, read_flow, read_pnm, restore, write_checkpoint, write_flow, write_pnm};
use crate::report::{self, write};

#[derive(Debug, Parser)]
#[command(name = "jointda", version, about = "Domain adaptation experiments on synthetic data")]
pub struct Cli {
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed (or first seed) in the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration on every configured seed.
    Train,
    /// Score a trained checkpoint on the target test split.
    Eval(EvalArgs),
    /// Sweep a hyperparameter grid and pick by target validation accuracy.
    Select,
    /// Brute-force maximum of the entropy landscape and its 1-D curve.
    Landscape(LandscapeArgs),
    /// Warp an image by a flow file or a synthetic affine flow.
    Warp(WarpArgs),
    /// Train the appearance-flow teacher and keypoint student.
    Distill,
    /// Train the attribute-conditioned translator.
    Translate,
    /// Finite-difference audit of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long, default_value_t = 0.3)]
    pub gamma_inv: f64,
    /// Number of real classes N.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub grid_steps: usize,
    /// Samples along the curve.
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Scale the curve so its minimum is -7.
    #[arg(long)]
    pub rescale: bool,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    /// PGM or PPM input.
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// AFLW flow file; a synthetic flow is built when omitted.
    #[arg(long, value_name = "PATH")]
    pub flow: Option<PathBuf>,
    /// Second flow applied after the first.
    #[arg(long, value_name = "PATH")]
    pub compose: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["DX", "DY"], allow_negative_numbers = true)]
    pub shift: Option<Vec<f64>>,
    /// Degrees, about the image centre.
    #[arg(long, allow_negative_numbers = true)]
    pub rotate: Option<f64>,
    /// Isotropic scale about the image centre.
    #[arg(long)]
    pub scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random points per op.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::Train => train(cli),
        Command::Eval(a) => eval(cli, a),
        Command::Select => select(cli),
        Command::Landscape(a) => landscape(cli, a),
        Command::Warp(a) => warp(cli, a),
        Command::Distill => distill(cli),
        Command::Translate => translate(cli),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn load<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn out(cli: &Cli, name: &str) -> PathBuf {
    cli.out.join(name)
}

fn tabular(cli: &Cli, stem: &str, csv: impl FnOnce() -> Result<Vec<u8>>, json: impl FnOnce() -> Result<Vec<u8>>) -> Result<PathBuf> {
    let path = out(cli, &format!("{stem}.{}", cli.format.ext()));
    let bytes = match cli.format {
        Format::Csv => csv()?,
        Format::Json => json()?,
    };
    write(&path, &bytes)?;
    Ok(path)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut c: RunConfig = load(cli)?;
    if let Some(s) = cli.seed {
        c.seeds = vec![s];
    }
    validate_run(&c)?;
    Ok(c)
}

fn dataset(c: &RunConfig) -> Result<TwoDomainDataset> {
    let data = make_two_domain_dataset(&c.data)?;
    if data.floored > 0 {
        eprintln!("warning: {} examples had a standardization divisor floored at 1e-8", data.floored);
    }
    Ok(data)
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    seed: u64,
    validation: &'a Evaluation,
    test: &'a Evaluation,
    final_entropy: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    objective: Objective,
    dataset_checksum: String,
    runs: Vec<SeedSummary<'a>>,
    test_mean: f64,
    test_stderr: f64,
}

fn train(cli: &Cli) -> Result<()> {
    let c = run_config(cli)?;
    let data = dataset(&c)?;
    write(&out(cli, "config.json"), &report::json(&c)?)?;
    let runs = c
        .seeds
        .iter()
        .map(|&s| train_uda(&c, &data, s))
        .collect::<jointda_core::Result<Vec<_>>>()?;
    for r in &runs {
        let s = r.seed;
        tabular(cli, &format!("metrics_seed{s}"), || report::metrics_csv(&r.log), || report::json(&r.log))?;
        write_checkpoint(&out(cli, &format!("model_seed{s}.ckpt")), r.model.named_tensors())?;
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test.top1).collect();
    let (test_mean, test_stderr) = mean_and_stderr(&accs);
    let summary = TrainSummary {
        objective: c.objective,
        dataset_checksum: format!("{:016x}", data.checksum()),
        runs: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                validation: &r.validation,
                test: &r.test,
                final_entropy: r.log.entries.last().map(|e| e.entropy),
            })
            .collect(),
        test_mean,
        test_stderr,
    };
    write(&out(cli, "summary.json"), &report::json(&summary)?)?;
    println!(
        "{} on {} seed(s): target test top-1 {test_mean:.4} (se {test_stderr:.4})",
        c.objective.name(),
        runs.len()
    );
    Ok(())
}

/// Model with the layout `train` leaves behind for `config.objective`.
fn model_shell(c: &RunConfig, data: &TwoDomainDataset) -> Result<UdaModel> {
    let mut rng = seeded_rng(0);
    let mut m = UdaModel::new(data.input_dim(), &c.hidden, c.feature_dim, data.classes, &mut rng)?;
    match c.objective {
        Objective::DannSs | Objective::DannEm => m.augment()?,
        Objective::Dann => m.attach_discriminator(c.discriminator_hidden, &mut rng)?,
        Objective::SourceOnly => {}
    }
    Ok(m)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let c = run_config(cli)?;
    let data = dataset(&c)?;
    let mut model = model_shell(&c, &data)?;
    let stored = read_checkpoint(&a.checkpoint)?;
    restore(stored, model.named_tensors_mut()).map_err(|r| Error::format(&a.checkpoint, r))?;
    let e = if c.flip_averaging {
        evaluate_flip_averaged(&model, &data.target_test, [16, 16, c.data.channels])?
    } else {
        evaluate(&model, &data.target_test)?
    };
    tabular(
        cli,
        "eval",
        || {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["subgroup", "count", "top1"])?;
            w.write_record(["all".to_string(), e.count.to_string(), e.top1.to_string()])?;
            for s in &e.subgroups {
                w.write_record([s.subgroup.to_string(), s.count.to_string(), s.top1.to_string()])?;
            }
            w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
        },
        || report::json(&e),
    )?;
    println!("target test top-1 {:.4} on {} examples", e.top1, e.count);
    Ok(())
}

fn select(cli: &Cli) -> Result<()> {
    let mut s: SweepConfig = load(cli)?;
    if let Some(first) = cli.seed {
        let n = s.seeds.len() as u64;
        s.seeds = (first..first + n).collect();
    }
    s.validate()?;
    let grid = s.grid();
    let data = dataset(&s.base)?;
    let sel = crate::sweep::sweep(&grid, &data, &s.seeds)?;
    tabular(cli, "outcomes", || report::outcomes_csv(&sel), || report::json(&sel.outcomes))?;
    write(&out(cli, "selection.json"), &report::json(&report::SelectionSummary::new(&sel))?)?;
    for o in crate::sweep::best_per_objective(&sel) {
        let w = &o.config.weights;
        println!(
            "{:<11} lambda {:<4} gamma {:<4} val {:.4} test {:.4} (se {:.4}) entropy {:.4}",
            o.config.objective.name(),
            w.lambda,
            w.gamma,
            o.val_mean,
            o.test_mean,
            o.test_stderr,
            o.entropy_mean
        );
    }
    Ok(())
}

fn landscape(cli: &Cli, a: &LandscapeArgs) -> Result<()> {
    let mut curve = curve_samples(a.gamma_inv, a.points)?;
    if a.rescale {
        curve = rescale_curve(&curve);
    }
    tabular(cli, "curve", || report::curve_csv(&curve), || report::json(&curve))?;
    let r = brute_force_maximize(a.classes, a.gamma_inv, a.grid_steps)?;
    write(&out(cli, "landscape.json"), &report::json(&report::LandscapeSummary::from(&r))?)?;
    println!("max {:.3e} over {} grid points, {} argmax candidate(s)", r.max, r.points, r.argmax.len());
    Ok(())
}

fn synthetic(a: &WarpArgs, h: usize, w: usize) -> Result<FlowField> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut t = Affine2::identity();
    if let Some(s) = a.scale {
        t = t.then(&Affine2::scale_about(s, s, cx, cy));
    }
    if let Some(deg) = a.rotate {
        t = t.then(&Affine2::rotation_about(deg, cx, cy));
    }
    if let Some(v) = &a.shift {
        t = t.then(&Affine2::translation(v[0], v[1]));
    }
    Ok(synthetic_flow(&t, h, w)?)
}

fn warp(cli: &Cli, a: &WarpArgs) -> Result<()> {
    let img = read_pnm(&a.image)?;
    let mut flow = match &a.flow {
        Some(p) => read_flow(p)?,
        None => synthetic(a, img.height(), img.width())?,
    };
    if let Some(p) = &a.compose {
        flow = compose_flows(&flow, &read_flow(p)?)?;
    }
    let warped = bilinear_warp(&img, &flow)?;
    let name = if img.channels() == 1 { "warped.pgm" } else { "warped.ppm" };
    write_pnm(&out(cli, name), &warped)?;
    write_flow(&out(cli, "flow.aflw"), &flow)?;
    println!("wrote {}", out(cli, name).display());
    Ok(())
}

#[derive(Serialize)]
struct DistillSummary {
    identity_error: f64,
    teacher_error: f64,
    student_error: f64,
    student_teacher_ratio: f64,
}

fn distill(cli: &Cli) -> Result<()> {
    let mut c: DistillConfig = load(cli)?;
    if let Some(s) = cli.seed {
        c.flow.seed = s;
    }
    c.validate()?;
    let trained = train_flow_predictors(&c.flow)?;
    let m = &trained.metrics;
    tabular(cli, "flow_metrics", || report::flow_csv(m), || report::json(m))?;
    let summary = DistillSummary {
        identity_error: m.identity_error,
        teacher_error: m.teacher_error,
        student_error: m.student_error,
        student_teacher_ratio: m.student_error / m.teacher_error,
    };
    write(&out(cli, "summary.json"), &report::json(&summary)?)?;
    write_checkpoint(&out(cli, "teacher.ckpt"), trained.teacher.net.named_tensors("teacher"))?;
    write_checkpoint(&out(cli, "student.ckpt"), trained.student.net.named_tensors("student"))?;

    let set = ShapeSet::generate(&c.flow)?;
    let shown: Vec<&ShapeExample> = set.test.iter().take(c.dump_examples).collect();
    if !shown.is_empty() {
        let t_flows = trained.teacher.predict(&teacher_input(&shown))?;
        let s_flows = trained.student.predict(&student_input(&shown))?;
        for (i, e) in shown.iter().enumerate() {
            let dump = |tag: &str, img: &Image| write_pnm(&out(cli, &format!("{tag}_{i}.pgm")), img);
            dump("source", &e.source)?;
            dump("target", &e.target)?;
            dump("teacher", &bilinear_warp(&e.source, &t_flows[i])?)?;
            dump("student", &bilinear_warp(&e.source, &s_flows[i])?)?;
        }
    }
    println!(
        "teacher L1 {:.4}, student L1 {:.4} (ratio {:.3}), identity {:.4}",
        m.teacher_error, m.student_error, summary.student_teacher_ratio, m.identity_error
    );
    Ok(())
}

#[derive(Serialize)]
struct TranslateSummary<'a> {
    final_metrics: &'a jointda_core::cycle::TranslationMetrics,
    interpolation_endpoints_match: Option<bool>,
}

/// Examples dumped by `translate`.
const TRANSLATE_DUMPS: usize = 4;

fn translate(cli: &Cli) -> Result<()> {
    let mut c: TranslateConfig = load(cli)?;
    if let Some(s) = cli.seed {
        c.translation.seed = s;
    }
    c.validate()?;
    let t = &c.translation;
    let run = train_translation(t)?;
    tabular(
        cli,
        "translation_metrics",
        || report::translation_csv(&run.metrics),
        || report::json(&run.metrics),
    )?;
    write_checkpoint(&out(cli, "model.ckpt"), run.model.named_tensors())?;

    let mut rng = seeded_rng(t.seed ^ 0xd0_0d1e);
    let xs = sample_source_images(TRANSLATE_DUMPS, t.height, t.width, &mut rng)?;
    let attrs = run.model.attributes();
    let mut endpoints_match = (attrs >= 2).then_some(true);
    for i in 0..TRANSLATE_DUMPS {
        let x = Image::new(t.height, t.width, 1, xs.row(i).to_vec())?;
        write_pnm(&out(cli, &format!("source_{i}.pgm")), &x)?;
        let discrete = (0..attrs)
            .map(|a| translate_image(&run.model, &x, a))
            .collect::<jointda_core::Result<Vec<_>>>()?;
        for (a, y) in discrete.iter().enumerate() {
            write_pnm(&out(cli, &format!("translated_{i}_a{a}.pgm")), y)?;
        }
        if attrs >= 2 {
            let last = c.interpolation_steps + 1;
            for k in 0..=last {
                let y = interpolate_attribute(&run.model, &x, 0, 1, k as f64 / last as f64)?;
                if (k == 0 && y != discrete[0]) || (k == last && y != discrete[1]) {
                    endpoints_match = Some(false);
                }
                write_pnm(&out(cli, &format!("interp_{i}_{k}.pgm")), &y)?;
            }
        }
    }
    let last = run
        .metrics
        .last()
        .ok_or_else(|| Error::Config("translation produced no metrics".into()))?;
    let summary = TranslateSummary {
        final_metrics: last,
        interpolation_endpoints_match: endpoints_match,
    };
    write(&out(cli, "summary.json"), &report::json(&summary)?)?;
    println!("ground-truth L1 {:.4}, cycle {:.4}", last.gt_l1, last.cycle);
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let r = run_audit(a.points, cli.seed.unwrap_or(0))?;
    tabular(cli, "gradcheck", || report::audit_csv(&r), || report::json(&r))?;
    println!("{} cases, max relative error {:.3e}", r.cases.len(), r.max_rel_error());
    if r.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = r.failures().iter().map(|c| c.name).collect();
        Err(Error::Numerical(format!("gradient audit failed for {}", names.join(", "))))
    }
}
