//! The `kflows` command-line tool.
//!
//! Exit codes: 0 ok, 2 configuration or usage, 3 data or I/O, 4 numeric.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ScaleMode, SplitSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, KernelTerm};
use crate::kflow::{self, FlowModel, KFConfig, LossKind, Momentum, TrainingTrace};
use crate::models::{self, ModelKind, TrainedModel};
use crate::plot;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "kflows",
    version,
    about = "Kernel PCR / PLS with Kernel Flows parameter learning"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the optimizer seed (optimize) or the generator seed (synth).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; for `predict` and `synth`, the output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the numeric kernels. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn kernel parameters with Kernel Flows.
    Optimize {
        /// Also render trajectory.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Fit a model on the configured data.
    Fit {
        /// Kernel spec JSON (e.g. from `optimize`) replacing the configured kernel.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Predict with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Report R² and RMSE of a saved model on labelled data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Response column; defaults to the one the model was trained on.
        #[arg(long)]
        response: Option<String>,
        #[arg(long)]
        svg: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Correlation between linear principal components and the response.
    Diag {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        #[arg(long)]
        n_pcs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Collinear,
    Nonlinear,
}

/// Optimizer settings as written in a run configuration. Unset fields take
/// the [`KFConfig`] defaults; the model kind follows the run's model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KFlowSection {
    pub loss: Option<LossKind>,
    pub model_kind: Option<FlowModel>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub subbatch_count: Option<usize>,
    pub subbatch_fraction: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<Momentum>,
    pub fd_step: Option<f64>,
    pub jitter: Option<f64>,
    pub rng_seed: Option<u64>,
    pub learn_amplitudes: Option<bool>,
    pub record_timing: Option<bool>,
}

/// Declarative description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub response_column: String,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub scaling: ScaleMode,
    pub model: ModelKind,
    pub n_components: usize,
    #[serde(default)]
    pub kernel: Vec<KernelTerm>,
    #[serde(default)]
    pub kflow: KFlowSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.kernel_spec()?;
        Ok(cfg)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        if self.model == ModelKind::LinearPcr && self.kernel.is_empty() {
            // Unused by linear PCR, but keeps one code path.
            return Ok(KernelSpec::unit_combination());
        }
        KernelSpec::new(self.kernel.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Optimizer settings; checked against the data by [`KFConfig::validate`].
    pub fn kf_config(&self) -> KFConfig {
        let d = KFConfig::default();
        let s = &self.kflow;
        let model_kind = match (s.model_kind, self.model) {
            (Some(k), _) => k,
            (None, ModelKind::Kpls) => FlowModel::Kpls,
            (None, _) => FlowModel::Kpcr,
        };
        KFConfig {
            loss: s.loss.unwrap_or(d.loss),
            model_kind,
            iterations: s.iterations.unwrap_or(d.iterations),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            subbatch_count: s.subbatch_count.unwrap_or(d.subbatch_count),
            subbatch_fraction: s.subbatch_fraction.unwrap_or(d.subbatch_fraction),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            momentum: s.momentum.unwrap_or(d.momentum),
            fd_step: s.fd_step.unwrap_or(d.fd_step),
            jitter: s.jitter.unwrap_or(d.jitter),
            rng_seed: s.rng_seed.unwrap_or(d.rng_seed),
            n_components: self.n_components,
            learn_amplitudes: s.learn_amplitudes.unwrap_or(d.learn_amplitudes),
            record_timing: s.record_timing.unwrap_or(d.record_timing),
        }
    }
}

/// Maps an error to its exit-code category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema { .. } | Error::Rank { .. } => EXIT_CONFIG,
        Error::Input(_) | Error::Io { .. } | Error::Json { .. } => EXIT_DATA,
        Error::Numeric(_) | Error::UndefinedMetric(_) => EXIT_NUMERIC,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        // Fails only if a pool already exists (e.g. repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Optimize { svg } => cmd_optimize(cli, *svg),
        Command::Fit { spec } => cmd_fit(cli, spec.as_deref()),
        Command::Predict { model, data } => cmd_predict(model, data, &required_out(cli)?),
        Command::Evaluate {
            model,
            data,
            response,
            svg,
        } => cmd_evaluate(model, data, response.as_deref(), &out_dir(cli, None), *svg),
        Command::Synth { kind, n, p, noise } => cmd_synth(
            *kind,
            *n,
            *p,
            *noise,
            cli.seed.unwrap_or(0),
            &required_out(cli)?,
        ),
        Command::Diag {
            data,
            response,
            n_pcs,
        } => cmd_diag(data, response, *n_pcs, cli.out.as_deref()),
    }
}

fn required_out(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("kflows_out"))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    RunConfig::load(path)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Training and optional test partitions, scaled with a scaler fitted on training data.
struct Prepared {
    raw_train: Dataset,
    raw_test: Option<Dataset>,
    train: Dataset,
    scaler: data::Scaler,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let ds = data::load_csv(&cfg.data, &cfg.response_column)?;
    let (raw_train, raw_test) = match &cfg.split {
        Some(s) => {
            let (a, b) = data::split(&ds, s)?;
            (a, Some(b))
        }
        None => (ds, None),
    };
    let (train, _, scaler) = data::standardize(&raw_train, &[], cfg.scaling)?;
    Ok(Prepared {
        raw_train,
        raw_test,
        train,
        scaler,
    })
}

fn spec_json(spec: &KernelSpec) -> String {
    serde_json::to_string_pretty(spec).expect("kernel spec serializes") + "\n"
}

fn trajectory_csv(spec: &KernelSpec, trace: &TrainingTrace) -> String {
    let mut out = String::from("iter,loss");
    for (t, term) in spec.terms().iter().enumerate() {
        let f = term.family.name();
        out.push_str(&format!(",{f}_width_{t},{f}_amplitude_{t}"));
    }
    out.push('\n');
    for r in &trace.records {
        out.push_str(&format!("{},{}", r.iter, r.loss));
        for v in &r.theta {
            out.push_str(&format!(",{}", v.exp()));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_optimize(cli: &Cli, svg: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let spec0 = cfg.kernel_spec()?;
    let mut kf = cfg.kf_config();
    if let Some(seed) = cli.seed {
        kf.rng_seed = seed;
    }
    let prep = prepare(&cfg)?;
    kf.validate(prep.train.n_samples())?;
    let out = out_dir(cli, Some(&cfg));
    ensure_dir(&out)?;

    let result = kflow::optimize(&prep.train.x, &prep.train.y, &spec0, &kf);
    let (spec, trace) = match result {
        Ok(r) => r,
        Err(e) => {
            // Keep whatever was learned before the failure.
            write_file(&out.join("trace.csv"), &e.trace.to_csv())?;
            return Err(e.error);
        }
    };
    write_file(&out.join("spec.json"), &spec_json(&spec))?;
    write_file(&out.join("trace.csv"), &trace.to_csv())?;
    write_file(&out.join("trajectory.csv"), &trajectory_csv(&spec, &trace))?;
    if svg {
        let series: Vec<plot::Series> = spec
            .terms()
            .iter()
            .enumerate()
            .map(|(t, term)| plot::Series {
                name: format!("{} width", term.family.name()),
                points: trace
                    .records
                    .iter()
                    .map(|r| (r.iter as f64, r.theta[2 * t].exp()))
                    .collect(),
            })
            .collect();
        write_file(
            &out.join("trajectory.svg"),
            &plot::line_chart("Kernel parameter learning", "iteration", "width", &series),
        )?;
    }
    match (trace.records.first(), trace.records.last()) {
        (Some(first), Some(last)) => {
            println!("initial loss: {}", first.loss);
            println!("final loss: {}", last.loss);
        }
        _ => println!("final loss: n/a (no iterations)"),
    }
    for term in spec.terms() {
        println!(
            "{}: width {} amplitude {}",
            term.family.name(),
            term.width(),
            term.amplitude()
        );
    }
    Ok(())
}

fn load_spec(path: &Path) -> Result<KernelSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: KernelSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn predictions_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn cmd_fit(cli: &Cli, spec_path: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let spec = match spec_path {
        Some(p) => load_spec(p)?,
        None => cfg.kernel_spec()?,
    };
    let prep = prepare(&cfg)?;
    let out = out_dir(cli, Some(&cfg));
    ensure_dir(&out)?;

    let (mut model, report) = models::fit(
        cfg.model,
        &prep.train.x,
        &prep.train.y,
        &spec,
        cfg.n_components,
    )?;
    model.scaler = Some(prep.scaler.clone());
    model.response_column = Some(cfg.response_column.clone());
    model.save(&out.join("model.json"))?;
    write_file(
        &out.join("fit_report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    let labels = prep.raw_train.labels();
    write_file(
        &out.join("train_predictions.csv"),
        &predictions_csv(
            "id,y_true,y_pred",
            labels
                .iter()
                .zip(prep.raw_train.y.iter())
                .zip(&report.train_predictions)
                .map(|((id, t), p)| format!("{id},{t},{p}")),
        ),
    )?;
    if let Some(test) = &prep.raw_test {
        prep.raw_train.write_csv(&out.join("train.csv"))?;
        test.write_csv(&out.join("test.csv"))?;
    }
    match report.train_r2 {
        Some(r2) => println!("train R2: {r2}"),
        None => println!("train R2: undefined (constant response)"),
    }
    println!("train RMSE: {}", report.train_rmse);
    Ok(())
}

pub fn cmd_predict(model_path: &Path, data_path: &Path, out_path: &Path) -> Result<()> {
    let model = TrainedModel::load(model_path)?;
    let table = data::read_spectra(data_path, None, model.response_column.as_deref())?;
    let preds = model.predict(&table.x)?;
    let labels: Vec<String> = match &table.ids {
        Some(ids) => ids.clone(),
        None => (0..preds.len()).map(|i| i.to_string()).collect(),
    };
    write_file(
        out_path,
        &predictions_csv(
            "id,y_pred",
            labels
                .iter()
                .zip(preds.iter())
                .map(|(id, p)| format!("{id},{p}")),
        ),
    )?;
    println!(
        "wrote {} predictions to {}",
        preds.len(),
        out_path.display()
    );
    Ok(())
}

pub fn cmd_evaluate(
    model_path: &Path,
    data_path: &Path,
    response: Option<&str>,
    out: &Path,
    svg: bool,
) -> Result<()> {
    let model = TrainedModel::load(model_path)?;
    let response = response
        .or(model.response_column.as_deref())
        .ok_or_else(|| {
            Error::Config("no response column given and none stored in the model".into())
        })?;
    let table = data::read_spectra(data_path, Some(response), None)?;
    let y = table.y.expect("response column requested");
    let preds = model.predict(&table.x)?;
    let labels: Vec<String> = match &table.ids {
        Some(ids) => ids.clone(),
        None => (0..preds.len()).map(|i| i.to_string()).collect(),
    };
    ensure_dir(out)?;
    write_file(
        &out.join("predicted_vs_actual.csv"),
        &predictions_csv(
            "id,y_true,y_pred",
            labels
                .iter()
                .zip(y.iter())
                .zip(preds.iter())
                .map(|((id, t), p)| format!("{id},{t},{p}")),
        ),
    )?;
    if svg {
        let pts: Vec<(f64, f64)> = y.iter().copied().zip(preds.iter().copied()).collect();
        write_file(
            &out.join("predicted_vs_actual.svg"),
            &plot::scatter_with_identity("Predicted vs actual", &pts),
        )?;
    }
    let r2 = models::r2(y.as_slice(), preds.as_slice())?;
    let rmse = models::rmse(y.as_slice(), preds.as_slice())?;
    println!("R2: {r2}");
    println!("RMSE: {rmse}");
    Ok(())
}

pub fn cmd_synth(
    kind: SynthKind,
    n: usize,
    p: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = match kind {
        SynthKind::Collinear => data::synth_collinear(n, p, noise, seed)?,
        SynthKind::Nonlinear => data::synth_nonlinear(n, p, noise, seed)?,
    };
    ds.write_csv(out)?;
    println!("wrote {} samples x {} features to {}", n, p, out.display());
    Ok(())
}

pub fn cmd_diag(data_path: &Path, response: &str, n_pcs: usize, out: Option<&Path>) -> Result<()> {
    let ds = data::load_csv(data_path, response)?;
    let corr = data::pc_response_correlation(&ds, n_pcs)?;
    let csv = predictions_csv(
        "pc,correlation",
        corr.iter()
            .enumerate()
            .map(|(k, r)| format!("{},{r}", k + 1)),
    );
    print!("{csv}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("pc_correlation.csv"), &csv)?;
    }
    Ok(())
}
