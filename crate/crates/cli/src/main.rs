//! `lrrn` command-line driver.
//!
//! Every verb is deterministic given its inputs, seed and config. Failures
//! print a single JSON line `{"error": kind, "message": text}` to stderr and
//! exit with status 1.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrrn::cert::{certify, CertReport, MarginFilter};
use lrrn::checkpoint;
use lrrn::config::RunConfig;
use lrrn::datasets::{energy_table, energy_table_with_controls, fit_gaussian_sampler, load_split, ControlRow, Dataset};
use lrrn::pgm::{encode_pgm, filter_grid, grid_layout};
use lrrn::selfcheck::{run_selfcheck, SelfCheckOptions};
use lrrn::training::{evaluate, FitOptions, Trainer};
use lrrn::{InferenceConfig, LrrnError, ModelParams};

#[derive(Parser, Debug)]
#[command(name = "lrrn", version, about = "Lifted regression/reconstruction networks")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON recipe.
    Train(TrainArgs),
    /// Accuracy and mean free energy of a checkpoint on a data split.
    Eval(EvalArgs),
    /// Lipschitz constant, margins and safe radii of a checkpoint.
    Certify(CertifyArgs),
    /// Mean ± std free energies of several models on several test sets.
    EnergyTable(EnergyTableArgs),
    /// Write the filters of one layer as a PGM image grid.
    ExportFilters(ExportArgs),
    /// Run the built-in numerical oracles.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `data.dir` of the recipe.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides `output_dir` of the recipe.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed` of the recipe.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "t10k")]
    split: String,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Maximum coordinate-descent sweeps per sample.
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    /// Relative early-stop threshold on the per-sweep energy decrease.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

impl SolveArgs {
    fn config(&self) -> Result<InferenceConfig> {
        let cfg = InferenceConfig::new(self.sweeps, self.tolerance);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Also write `eval.kv` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solve: SolveArgs,
    /// Restrict margin statistics to correctly classified samples.
    #[arg(long)]
    correct_only: bool,
    /// Row label in the table (default: checkpoint file stem).
    #[arg(long)]
    name: Option<String>,
    /// Write `cert.txt` and `cert.kv` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnergyTableArgs {
    /// One per model row.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// One per model, in the same order: the dataset the model was trained on.
    /// Its test split is a column of the table.
    #[arg(long, required = true)]
    data_dir: Vec<PathBuf>,
    /// Row/column names (default: data directory names).
    #[arg(long)]
    name: Vec<String>,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "t10k")]
    test_split: String,
    /// Test samples per set (also the number of Gaussian samples).
    #[arg(long)]
    limit: Option<usize>,
    /// Training samples used to fit the Gaussian control.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Omit the Mirrored and Fitted Gaussian columns.
    #[arg(long)]
    no_controls: bool,
    /// Seed of the Gaussian control sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solve: SolveArgs,
    /// Write `energy_table.txt` and `energy_table.csv` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer whose weight rows are drawn (0 = first layer).
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Tile shape `HxW`; required when the input width is not a perfect square.
    #[arg(long)]
    shape: Option<String>,
    /// Output directory for `filters-layer<k>.pgm` and its metadata.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: perturb the analytic gradients.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(err) = e.downcast_ref::<LrrnError>() {
        return match err {
            LrrnError::InvalidConfig(_) => "config",
            LrrnError::Io(_) => "io",
            LrrnError::Checkpoint(_) => "checkpoint",
            LrrnError::WrongMagic { .. } | LrrnError::Truncated { .. } | LrrnError::CountMismatch { .. } => "data",
            LrrnError::EmptyDataset | LrrnError::Unlabeled => "data",
            LrrnError::Pgm(_) => "image",
            _ => "numeric",
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if e.downcast_ref::<SelfcheckFailed>().is_some() {
        return "selfcheck";
    }
    "usage"
}

#[derive(Debug)]
struct SelfcheckFailed(Vec<String>);

impl std::fmt::Display for SelfcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "failed oracles: {}", self.0.join(", "))
    }
}

impl std::error::Error for SelfcheckFailed {}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Certify(a) => cmd_certify(a),
        Command::EnergyTable(a) => cmd_energy_table(a),
        Command::ExportFilters(a) => cmd_export_filters(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn load_data(dir: &Path, split: &str, limit: Option<usize>) -> Result<Dataset> {
    load_split(dir, split, limit).with_context(|| format!("dataset {} ({split})", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("config {}", a.config.display()))?;
    if let Some(dir) = a.data_dir {
        cfg.data.dir = dir;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    let train = load_data(&cfg.data.dir, &cfg.data.train_split, cfg.data.train_limit)?;
    let test = load_data(&cfg.data.dir, &cfg.data.test_split, cfg.data.test_limit)?;
    cfg.check_input_dim(train.dim())?;

    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_file(&cfg.output_dir.join("config.json"), cfg.to_json())?;

    let mut trainer = Trainer::new(cfg.init_model()?, cfg.train.clone())?;
    let log_path = cfg.output_dir.join("train_log.csv");
    let mut log =
        BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let opts = FitOptions {
        eval_every: cfg.eval_every,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_dir: Some(cfg.output_dir.clone()),
        eval_inference: cfg.eval_inference.clone(),
    };
    let records = trainer.fit(&train, Some(&test), &opts, &mut log)?;
    log.flush()?;
    let final_path = cfg.output_dir.join("final.lrrn");
    checkpoint::save(&trainer.params, &final_path)?;

    let last = records.iter().rev().find(|r| r.split == "test");
    let mut out = std::io::stdout().lock();
    if let Some(r) = last {
        if let Some(acc) = r.accuracy {
            writeln!(out, "test_accuracy={acc:?}")?;
        }
        if let Some(e) = r.mean_free_energy {
            writeln!(out, "test_mean_free_energy={e:?}")?;
        }
    }
    writeln!(out, "checkpoint={}", final_path.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data.data_dir, &a.data.split, a.data.limit)?;
    let ev = evaluate(&params, &data, &a.solve.config()?)?;
    let mut text = String::new();
    if let Some(acc) = ev.accuracy {
        text += &format!("accuracy={acc:?}\n");
    }
    text += &format!("mean_free_energy={:?}\nsamples={}\n", ev.mean_free_energy, data.len());
    print!("{text}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("eval.kv"), text)?;
    }
    Ok(())
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data.data_dir, &a.data.split, a.data.limit)?;
    let filter = if a.correct_only { MarginFilter::CorrectOnly } else { MarginFilter::All };
    let report = certify(&params, &data, &a.solve.config()?, filter)?;
    let name = a.name.unwrap_or_else(|| file_stem(&a.checkpoint));
    let table = CertReport::render_table(&[(&name, &report)]);
    print!("{table}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("cert.txt"), &table)?;
        write_file(&dir.join("cert.kv"), report.to_key_values())?;
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn cmd_energy_table(a: EnergyTableArgs) -> Result<()> {
    if a.checkpoint.len() != a.data_dir.len() {
        bail!(
            "energy-table needs one --data-dir per --checkpoint (got {} and {})",
            a.checkpoint.len(),
            a.data_dir.len()
        );
    }
    if !a.name.is_empty() && a.name.len() != a.checkpoint.len() {
        bail!("--name must be given once per --checkpoint or not at all");
    }
    let names: Vec<String> =
        if a.name.is_empty() { a.data_dir.iter().map(|d| dir_name(d)).collect() } else { a.name.clone() };
    let cfg = a.solve.config()?;
    let models = a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let tests = a.data_dir.iter().map(|d| load_data(d, &a.test_split, a.limit)).collect::<Result<Vec<_>>>()?;
    let sets: Vec<(String, &Dataset)> = names.iter().cloned().zip(tests.iter()).collect();

    let table = if a.no_controls {
        let rows: Vec<(String, &ModelParams)> = names.iter().cloned().zip(models.iter()).collect();
        energy_table(&rows, &sets, &cfg)?
    } else {
        let mut gaussians = Vec::with_capacity(models.len());
        for (dir, test) in a.data_dir.iter().zip(&tests) {
            let train = load_data(dir, &a.train_split, a.train_limit)?;
            gaussians.push(fit_gaussian_sampler(&train, a.seed)?.sample_dataset(test.len()));
        }
        let rows: Vec<ControlRow<'_>> = (0..models.len())
            .map(|i| ControlRow { name: &names[i], model: &models[i], own_test: &tests[i], gaussian: &gaussians[i] })
            .collect();
        energy_table_with_controls(&rows, &sets, &cfg)?
    };
    let text = table.render_text();
    print!("{text}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("energy_table.txt"), &text)?;
        write_file(&dir.join("energy_table.csv"), table.render_csv())?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).with_context(|| format!("shape {s:?} must look like HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn cmd_export_filters(a: ExportArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let layer = params
        .layers
        .get(a.layer)
        .with_context(|| format!("layer {} out of range (model has {} layers)", a.layer, params.depth()))?;
    let shape = a.shape.as_deref().map(parse_shape).transpose()?;
    let img = filter_grid(&layer.w, shape)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("filters-layer{}.pgm", a.layer));
    write_file(&path, encode_pgm(&img))?;
    let (rows, cols) = grid_layout(layer.d_out());
    let meta = format!(
        "image={}\nlayer={}\nfilters={}\ngrid={rows}x{cols}\nwidth={}\nheight={}\n\
         normalization=per-filter min-max to [0,255]; constant filters are 128\n\
         layout=row-major tiles, 1-pixel black separators, unused cells black\n",
        path.display(),
        a.layer,
        layer.d_out(),
        img.width,
        img.height
    );
    write_file(&a.out.join(format!("filters-layer{}.txt", a.layer)), &meta)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<()> {
    let outcomes = run_selfcheck(&SelfCheckOptions { seed: a.seed, corrupt_gradient: a.corrupt_gradient })?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{} {}: observed={:e} limit={:e} ({})",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.observed,
            o.threshold,
            o.detail
        );
        if !o.passed {
            failed.push(o.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SelfcheckFailed(failed).into())
    }
}
