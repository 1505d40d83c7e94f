//! Subcommand implementations. Each writes its artifacts into the output
//! directory and finishes with a `<command>.manifest`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nfem_core::dataset::{
    decode_dataset, encode_dataset, generate_dataset, inject_noise, load_dataset_for, split_dataset, SampleSet,
};
use nfem_core::inference::{force_sweep, predict_batch, LinearPredictor};
use nfem_core::metrics::{ablation_channels, ablation_ordering, evaluate_model, sample_error};
use nfem_core::problem::Problem;
use nfem_core::training::{train_with, EpochRecord};
use nfem_core::unet::UNet;

use crate::manifest::{self, Artifact};
use crate::vtk::{self, Field};
use crate::{CliError, Result, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Evaluate,
    Sweep,
    AblateOrdering,
    AblateChannels,
    Bench,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Self::Generate,
        Self::Train,
        Self::Evaluate,
        Self::Sweep,
        Self::AblateOrdering,
        Self::AblateChannels,
        Self::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Generate => "generate",
            Self::Train => "train",
            Self::Evaluate => "evaluate",
            Self::Sweep => "sweep",
            Self::AblateOrdering => "ablate-ordering",
            Self::AblateChannels => "ablate-channels",
            Self::Bench => "bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::config(None, format!("unknown subcommand '{s}'")))
    }
}

/// Artifacts written by a run and a one-line summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub manifest: PathBuf,
    pub summary: String,
}

struct Output {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Output {
    /// Writes `data` to `path`, recording it under its name relative to
    /// the output directory when it lies inside it.
    fn write_path(&mut self, path: &Path, data: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(path, data).map_err(|e| CliError::io(path, e))?;
        let name = path
            .strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.artifacts.push(Artifact::of(&name, data));
        Ok(())
    }

    fn write(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.write_path(&path, data)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let data = w
            .into_inner()
            .map_err(|e| CliError::io(&self.dir.join(name), e.into_error()))?;
        self.write(name, &data)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(command: Command, config: &RunConfig) -> Result<Outcome> {
    run_with_progress(command, config, &mut |_, _| {})
}

/// Like [`run`], reporting each training epoch and the elapsed seconds.
pub fn run_with_progress(
    command: Command,
    config: &RunConfig,
    progress: &mut dyn FnMut(&EpochRecord, f64),
) -> Result<Outcome> {
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut out = Output {
        dir: dir.clone(),
        artifacts: Vec::new(),
    };
    let summary = match command {
        Command::Generate => generate(config, &mut out)?,
        Command::Train => train(config, &mut out, progress)?,
        Command::Evaluate => evaluate(config, &mut out)?,
        Command::Sweep => sweep(config, &mut out)?,
        Command::AblateOrdering => ablate_ordering(config, &mut out)?,
        Command::AblateChannels => ablate_channels(config, &mut out)?,
        Command::Bench => bench(config, &mut out)?,
    };
    let manifest_path = dir.join(format!("{}.manifest", command.name()));
    let text = manifest::render(command.name(), config, &out.artifacts);
    std::fs::write(&manifest_path, text).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(Outcome {
        artifacts: out.artifacts,
        manifest: manifest_path,
        summary,
    })
}

fn generate(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let range = (config.float("dataset.force_min")?, config.float("dataset.force_max")?);
    let count = config.uint("dataset.count")?;
    let (mut set, report) = generate_dataset(&problem, count, range, config.u64("dataset.seed")?)?;
    let level = config.float("dataset.noise_level")?;
    if level > 0.0 {
        set = inject_noise(
            &set,
            config.float("dataset.noise_threshold")?,
            level,
            config.u64("dataset.noise_seed")?,
        )?;
    }
    out.write_path(&config.dataset_path(), &encode_dataset(&set)?)?;
    Ok(format!(
        "generated {count} {} samples ({} redraws, {} Newton iterations)",
        problem.kind(),
        report.redraws,
        report.newton_iterations
    ))
}

fn load_set(config: &RunConfig, problem: &Problem) -> Result<SampleSet> {
    let path = config.dataset_path();
    if !path.exists() {
        return Err(CliError::NotFound { what: "dataset", path });
    }
    Ok(load_dataset_for(&path, problem.grid_shape())?)
}

fn load_split(config: &RunConfig, problem: &Problem) -> Result<(SampleSet, SampleSet)> {
    let set = load_set(config, problem)?;
    Ok(split_dataset(
        &set,
        config.float("dataset.test_fraction")?,
        config.u64("dataset.split_seed")?,
    )?)
}

fn load_model(config: &RunConfig, problem: &Problem) -> Result<UNet> {
    let path = config.checkpoint_path();
    if !path.exists() {
        return Err(CliError::NotFound { what: "checkpoint", path });
    }
    let model = UNet::load(&path)?;
    if model.config().grid_shape != problem.grid_shape() {
        return Err(CliError::config(
            None,
            format!(
                "checkpoint grid {:?} does not match problem grid {:?}",
                model.config().grid_shape,
                problem.grid_shape()
            ),
        ));
    }
    Ok(model)
}

fn train(config: &RunConfig, out: &mut Output, progress: &mut dyn FnMut(&EpochRecord, f64)) -> Result<String> {
    let problem = config.problem()?;
    let (train_set, _) = load_split(config, &problem)?;
    let mut model = UNet::build(config.unet_config()?, config.u64("model.seed")?)?;
    let tc = config.train_config()?;
    let start = Instant::now();
    let history = train_with(&mut model, &train_set, Some(&problem.free_mask()), &tc, |r| {
        progress(r, start.elapsed().as_secs_f64())
    })?;
    out.write_path(&config.checkpoint_path(), &model.encode_checkpoint())?;
    let rows = history
        .epochs
        .iter()
        .map(|e| vec![(e.epoch + 1).to_string(), e.loss.to_string(), e.kl.to_string(), e.nll.to_string()])
        .collect();
    out.csv("history.csv", &["epoch", "loss", "kl", "nll"], rows)?;
    let fit = match history.decrease_factor() {
        Some(d) if d >= 10.0 => format!("loss decreased {d:.1}x"),
        Some(d) => format!("failed fit: loss decreased only {d:.2}x"),
        None => "loss decrease not measurable (non-positive loss)".into(),
    };
    Ok(format!(
        "trained {} model with {} parameters on {} samples; {fit}",
        model.mode(),
        model.parameter_count(),
        train_set.len()
    ))
}

fn evaluate(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let model = load_model(config, &problem)?;
    let (_, test) = load_split(config, &problem)?;
    let active = problem.active_mask();
    let passes = config.uint("eval.passes")?;
    let eval = evaluate_model(&model, &test, &active, passes, config.u64("eval.seed")?)?;
    let linear = LinearPredictor::new(&problem)?;
    let dim = problem.dim();
    let mut rows = Vec::with_capacity(test.len());
    let mut linear_errors = Vec::with_capacity(test.len());
    for (i, s) in test.samples.iter().enumerate() {
        let lin = sample_error(&linear.predict(&s.f)?, &s.u, Some(&active))?;
        linear_errors.push(lin);
        rows.push(vec![
            i.to_string(),
            eval.report.errors[i].to_string(),
            opt(eval.relative_l2[i]),
            eval.magnitudes[i].to_string(),
            lin.to_string(),
        ]);
    }
    out.csv(
        "errors.csv",
        &["sample", "e_m", "relative_l2", "displacement_magnitude", "linear_e_m"],
        rows,
    )?;
    let linear_mean = linear_errors.iter().sum::<f64>() / linear_errors.len() as f64;
    let r = &eval.report;
    out.csv(
        "report.csv",
        &[
            "mode",
            "samples",
            "dofs",
            "e_bar",
            "sigma_e",
            "mean_relative_l2",
            "sensitivity_slope",
            "coverage_2sigma",
            "linear_e_bar",
        ],
        vec![vec![
            model.mode().to_string(),
            r.count().to_string(),
            r.dof_count.to_string(),
            r.e_bar.to_string(),
            r.sigma_e.to_string(),
            opt(eval.mean_relative_l2()),
            opt(eval.slope),
            opt(eval.coverage),
            linear_mean.to_string(),
        ]],
    )?;
    let cases = config.uint("eval.vtk_cases")?.min(test.len());
    for i in 0..cases {
        let s = &test.samples[i];
        let p = &eval.predictions[i];
        let err: Vec<f64> = p
            .mean
            .chunks(dim)
            .zip(s.u.chunks(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .collect();
        let text = vtk::render(
            &problem,
            &format!("{} test case {i}", problem.kind()),
            &[
                ("prediction", Field::Vector(&p.mean)),
                ("fem_displacement", Field::Vector(&s.u)),
                ("force", Field::Vector(&s.f)),
                ("error_l2", Field::Scalar(&err)),
                ("predictive_std", Field::Vector(&p.std)),
            ],
        );
        out.write(&format!("vtk/case_{i:03}.vtk"), text.as_bytes())?;
    }
    Ok(format!(
        "e_bar = {:.4e} m, sigma_e = {:.4e} m over {} test samples (linear baseline e_bar = {:.4e} m)",
        r.e_bar,
        r.sigma_e,
        r.count(),
        linear_mean
    ))
}

fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

fn sweep(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let model = load_model(config, &problem)?;
    let mags = linspace(
        config.float("sweep.min")?,
        config.float("sweep.max")?,
        config.uint("sweep.steps")?,
    );
    let rows = force_sweep(
        &model,
        &problem,
        config.uint("sweep.node")?,
        &config.list::<f64>("sweep.direction")?,
        &mags,
        config.uint("eval.passes")?,
        config.u64("eval.seed")?,
    )?;
    let missing = rows.iter().filter(|r| r.fem_reference.is_none()).count();
    let table = rows
        .iter()
        .map(|r| {
            vec![
                r.force.to_string(),
                r.mean.to_string(),
                r.std_total.to_string(),
                r.std_epistemic.to_string(),
                r.std_aleatoric.to_string(),
                opt(r.fem_reference),
            ]
        })
        .collect();
    out.csv(
        "sweep.csv",
        &["force", "mean", "std_total", "std_epistemic", "std_aleatoric", "fem_reference"],
        table,
    )?;
    Ok(format!(
        "swept {} force values ({missing} without FEM reference)",
        rows.len()
    ))
}

fn ablate_ordering(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let set = load_set(config, &problem)?;
    let results = ablation_ordering(
        &set,
        &problem.active_mask(),
        &config.strategies()?,
        &config.unet_config()?,
        config.u64("model.seed")?,
        &config.train_config()?,
        config.float("dataset.test_fraction")?,
        config.u64("dataset.split_seed")?,
    )?;
    let rows = results
        .iter()
        .map(|r| {
            vec![
                r.strategy.label(),
                r.report.e_bar.to_string(),
                r.report.sigma_e.to_string(),
                r.report.count().to_string(),
                r.report.dof_count.to_string(),
                opt(r.history.epochs.last().map(|e| e.loss)),
            ]
        })
        .collect();
    out.csv(
        "ablation_ordering.csv",
        &["strategy", "e_bar", "sigma_e", "samples", "dofs", "final_loss"],
        rows,
    )?;
    let parts: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.3e}", r.strategy.label(), r.report.e_bar))
        .collect();
    Ok(format!("ordering ablation e_bar: {}", parts.join(", ")))
}

fn ablate_channels(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let (train_set, test) = load_split(config, &problem)?;
    let results = ablation_channels(
        &train_set,
        &test,
        &problem.active_mask(),
        &config.list::<usize>("ablate.channels")?,
        &config.unet_config()?,
        config.u64("model.seed")?,
        &config.train_config()?,
    )?;
    let rows = results
        .iter()
        .map(|r| {
            vec![
                r.channels.to_string(),
                r.parameter_count.to_string(),
                r.report.e_bar.to_string(),
                r.report.sigma_e.to_string(),
                format!("{:.3}", r.train_seconds),
            ]
        })
        .collect();
    out.csv(
        "ablation_channels.csv",
        &["channels", "parameters", "e_bar", "sigma_e", "train_seconds"],
        rows,
    )?;
    let best = results
        .iter()
        .min_by(|a, b| a.report.e_bar.total_cmp(&b.report.e_bar))
        .map(|r| r.channels)
        .unwrap_or(0);
    Ok(format!("channel ablation over {} widths; lowest e_bar at c = {best}", results.len()))
}

fn bench(config: &RunConfig, out: &mut Output) -> Result<String> {
    let problem = config.problem()?;
    let (model, trained) = match load_model(config, &problem) {
        Ok(m) => (m, true),
        Err(CliError::NotFound { .. }) => (UNet::build(config.unet_config()?, config.u64("model.seed")?)?, false),
        Err(e) => return Err(e),
    };
    let node = config.uint("sweep.node")?;
    let dir: Vec<f64> = config.list("sweep.direction")?;
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let repeats = config.uint("bench.repeats")?.max(1);
    let passes = config.uint("eval.passes")?;
    let seed = config.u64("eval.seed")?;
    let mut rows = Vec::new();
    for f in config.list::<f64>("bench.forces")? {
        let v: Vec<f64> = dir.iter().map(|d| f * d / norm).collect();
        let grid = problem.point_load(node, &v)?;
        let t = Instant::now();
        let mut fem = None;
        for _ in 0..repeats {
            fem = problem.solve_grid(&grid).ok();
        }
        let fem_ms = t.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        let t = Instant::now();
        for _ in 0..repeats {
            predict_batch(&model, std::slice::from_ref(&grid), passes, seed)?;
        }
        let net_ms = t.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        let (iters, steps) = fem
            .map(|(_, s)| (s.newton_iterations.to_string(), s.load_steps.to_string()))
            .unwrap_or_default();
        rows.push(vec![
            f.to_string(),
            format!("{fem_ms:.4}"),
            iters,
            steps,
            format!("{net_ms:.4}"),
            if model.mode().is_probabilistic() { passes } else { 1 }.to_string(),
        ]);
    }
    out.csv(
        "bench.csv",
        &["force", "fem_ms", "newton_iterations", "load_steps", "unet_ms", "unet_passes"],
        rows,
    )?;
    Ok(format!(
        "timed FEM and U-Net predictions ({} model)",
        if trained { "trained" } else { "untrained" }
    ))
}

/// Re-reads a dataset written by `generate`, for tools that inspect runs.
pub fn read_dataset(path: &Path) -> Result<SampleSet> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}
