//! `drvidal` command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drvidal_core::cfgan::complete_dataset;
use drvidal_core::datagen::{load_csv, load_schema, read_header, write_csv_to, CevaeProcess, Dataset, DrVidalProcess, OutcomeKind, Schema};
use drvidal_core::drhead::{potential_outcomes, train_dr, write_predictions_to};
use drvidal_core::experiment::{run_experiment, train_generative, write_report, ExperimentConfig, Preset, Summary};
use drvidal_core::metrics::{evaluate, MetricSet};
use drvidal_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "drvidal", version, about = "Counterfactual GAN with a doubly robust effect head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate(GenerateArgs),
    /// Train one realization and print per-epoch losses.
    Train(TrainArgs),
    /// Run every realization of a config and write the report files.
    Experiment(ExperimentArgs),
    /// Score a predictions CSV against a dataset with ground truth.
    Metrics(MetricsArgs),
    /// Write VAE posterior means for every row of a realization's data.
    DumpLatents(LatentArgs),
    /// Print a preset config with every default filled in.
    InitConfig(InitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Process {
    Cevae,
    Drvidal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutcomeArg {
    Auto,
    Continuous,
    Binary,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    process: Process,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "source")]
struct ConfigSource {
    /// Experiment config file.
    #[arg(long, group = "source")]
    config: Option<PathBuf>,
    /// Built-in preset: ihdp, jobs, twins or synthetic.
    #[arg(long, group = "source")]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(p)) => Ok(ExperimentConfig::preset(p.parse()?)),
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

#[derive(Args, Debug)]
struct EpochOverrides {
    #[arg(long)]
    gan_epochs: Option<usize>,
    #[arg(long)]
    dr_epochs: Option<usize>,
}

impl EpochOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(e) = self.gan_epochs {
            cfg.gan.epochs = e;
        }
        if let Some(e) = self.dr_epochs {
            cfg.dr.epochs = e;
        }
        cfg.validate()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    epochs: EpochOverrides,
    /// Zero-based realization index.
    #[arg(long, default_value_t = 0)]
    realization: usize,
    /// Write test-split predictions here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write the completed training quadruples here.
    #[arg(long)]
    quadruples: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Run realizations one at a time.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// CSV with `y0_hat` and `y1_hat` columns, one row per truth row.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset CSV with ground-truth columns.
    #[arg(long)]
    truth: PathBuf,
    /// Column roles for the truth file; the `generate` layout when absent.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutcomeArg::Auto)]
    outcome: OutcomeArg,
}

#[derive(Args, Debug)]
struct LatentArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    epochs: EpochOverrides,
    #[arg(long, default_value_t = 0)]
    realization: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    preset: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Experiment(a) => experiment(a),
        Command::Metrics(a) => metrics(a),
        Command::DumpLatents(a) => dump_latents(a),
        Command::InitConfig(a) => init_config(a),
    }
}

/// Runs `f` on the file at `path`, or on stdout.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ds = match a.process {
        Process::Cevae => CevaeProcess::default().generate(a.n, a.seed)?,
        Process::Drvidal => DrVidalProcess::default().generate(a.n, a.seed)?,
    };
    with_output(a.out.as_deref(), |w| write_csv_to(&ds, w))
}

fn metrics_toml(m: &MetricSet) -> Result<String> {
    toml::to_string(m).map_err(|e| Error::invalid(format!("cannot serialize metrics: {e}")))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.source.load()?;
    a.epochs.apply(&mut cfg)?;
    let stage = train_generative(&cfg, a.realization)?;
    for (i, e) in stage.gan.history.iter().enumerate() {
        println!(
            "gan epoch {:>4}  vae {:.6}  disc {:.6}  gen {:.6}  sup {:.6}  info {:.6}",
            i + 1,
            e.vae,
            e.discriminator,
            e.generator,
            e.supervised,
            e.info
        );
    }
    let quadruples = complete_dataset(&stage.gan.models.generator, &stage.vae, &stage.train, stage.seed)?;
    if let Some(p) = &a.quadruples {
        quadruples.write_csv(p)?;
    }
    let dr = train_dr(&quadruples, Some(&stage.validation), stage.train.outcome_kind, &cfg.effective_dr(), stage.seed)?;
    for (i, e) in dr.history.iter().enumerate() {
        match e.validation {
            Some(v) => println!("dr epoch {:>4}  ite {:.6}  validation {:.6}", i + 1, e.train_ite, v),
            None => println!("dr epoch {:>4}  ite {:.6}", i + 1, e.train_ite),
        }
    }
    println!("selected dr epoch {}", dr.selected_epoch + 1);
    for (label, ds) in [("in_sample", &stage.train), ("out_sample", &stage.test)] {
        if ds.n() == 0 {
            continue;
        }
        let (y0, y1) = potential_outcomes(&dr.model, &ds.x)?;
        println!("[{label}]\n{}", metrics_toml(&evaluate(ds, &y0, &y1)?)?);
    }
    if let Some(p) = &a.predictions {
        with_output(Some(p), |w| write_predictions_to(&dr.model, &stage.test.x, w))?;
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(r) = a.realizations {
        cfg.realizations = r;
    }
    if a.serial {
        cfg.parallel = false;
    }
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
    let res = run_experiment(&cfg)?;
    let files = write_report(&res, &dir)?;
    let summary = Summary::of(&res);
    println!(
        "{}: {} realizations, {} failed, fingerprint {}",
        summary.name, summary.realizations, summary.failed, summary.fingerprint
    );
    for (k, agg) in &summary.metrics {
        println!("{k:<20} {:.6} ± {:.6}", agg.mean, agg.std);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let (i0, i1) = (col("y0_hat")?, col("y1_hat")?);
    let (mut y0, mut y1) = (Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let cell = |j: usize, name: &str| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.parse().map_err(|e| Error::Cell {
                path: path.to_path_buf(),
                row: r + 2,
                column: name.to_string(),
                message: format!("`{s}`: {e}"),
            })
        };
        y0.push(cell(i0, "y0_hat")?);
        y1.push(cell(i1, "y1_hat")?);
    }
    Ok((y0, y1))
}

fn load_truth(a: &MetricsArgs) -> Result<Dataset> {
    let schema = match &a.schema {
        Some(p) => load_schema(p)?,
        None => Schema::detect(&read_header(&a.truth, &Schema::default())?),
    };
    match a.outcome {
        OutcomeArg::Continuous => load_csv(&a.truth, &schema, OutcomeKind::Continuous),
        OutcomeArg::Binary => load_csv(&a.truth, &schema, OutcomeKind::Binary),
        OutcomeArg::Auto => {
            let mut ds = load_csv(&a.truth, &schema, OutcomeKind::Continuous)?;
            if ds.y_f.iter().all(|&y| y == 0.0 || y == 1.0) {
                ds.outcome_kind = OutcomeKind::Binary;
            }
            Ok(ds)
        }
    }
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let ds = load_truth(&a)?;
    let (y0, y1) = read_predictions(&a.pred)?;
    print!("{}", metrics_toml(&evaluate(&ds, &y0, &y1)?)?);
    Ok(())
}

fn dump_latents(a: LatentArgs) -> Result<()> {
    let mut cfg = a.source.load()?;
    a.epochs.apply(&mut cfg)?;
    let stage = train_generative(&cfg, a.realization)?;
    let means = stage.vae.encode(&stage.data.x)?.mean_latent()?;
    let dims = stage.vae.latent_dims();
    let mut header = Vec::new();
    for (block, k) in ["z_x", "z_t", "z_yf", "z_ycf"].iter().zip(dims.as_array()) {
        header.extend((1..=k).map(|i| format!("{block}{i}")));
    }
    with_output(a.out.as_deref(), |w| {
        let mut wr = csv::Writer::from_writer(w);
        let csv_err = |source| Error::Csv {
            path: PathBuf::from("<latents>"),
            source,
        };
        wr.write_record(&header).map_err(csv_err)?;
        for r in 0..means.rows() {
            wr.write_record(means.row_values(r).iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::io("<latents>", e))
    })
}

fn init_config(a: InitArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let text = ExperimentConfig::preset(preset).to_toml()?;
    with_output(a.out.as_deref(), |w| w.write_all(text.as_bytes()).map_err(|e| Error::io("<config>", e)))
}
