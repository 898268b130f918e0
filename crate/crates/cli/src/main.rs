//! `dkwt`: run, sweep, compare and analyze delta-pruned keyword transformers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dkwt::io::{self, ReportFormat, WeightContainer};
use dkwt::sweep::{self, Engine, Input, Mode, SweepGrid};
use dkwt::{Error, ModelConfig, NormPlacement, Precision, Result, ThresholdConfig};

#[derive(Parser)]
#[command(
    name = "dkwt",
    version,
    about = "Delta-pruned attention inference for keyword-spotting transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate feature files once and write a MAC report.
    Run(RunArgs),
    /// Evaluate every threshold tuple on every input.
    Sweep(SweepArgs),
    /// Dense vs delta logits and per-site retained-delta counts.
    Compare(CompareArgs),
    /// Token-correlation statistics of attention inputs and softmax outputs.
    Analyze(AnalyzeArgs),
    /// Write seeded synthetic weights or features.
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Delta,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdPreset {
    /// 0.2, 0.2, 0.2, 0.05, 0.001, 0.05
    #[value(name = "paper-square")]
    Square,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    /// d=192, MLP 768, 3 heads, 12 layers, T=98, F=40
    Kwt3,
    /// d=32, MLP 64, 2 heads, 3 layers, T=16, F=8
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Post,
    Pre,
}

#[derive(Args)]
struct ModelArgs {
    /// DKWT weight container.
    #[arg(long)]
    weights: PathBuf,
    /// Arithmetic precision; defaults to the container's setting.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Restrict the last layer to the class-token row.
    #[arg(long)]
    last_layer_opt: bool,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, value_enum)]
    preset: Option<ThresholdPreset>,
    #[arg(long)]
    theta_x: Option<f64>,
    #[arg(long)]
    theta_q: Option<f64>,
    #[arg(long)]
    theta_k: Option<f64>,
    #[arg(long)]
    theta_att: Option<f64>,
    #[arg(long)]
    theta_softmax: Option<f64>,
    #[arg(long)]
    theta_head: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// DKWF or CSV feature files; the file stem is the input id.
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "delta")]
    mode: ModeArg,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Report path; defaults to standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    /// Base values for sites without a list.
    #[arg(long, value_enum)]
    preset: Option<ThresholdPreset>,
    /// Comma-separated values per site; the grid is their cross product.
    #[arg(long, value_delimiter = ',')]
    theta_x: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_q: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_k: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_att: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_softmax: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    theta_head: Vec<f64>,
    /// Explicit tuple `x,q,k,att,softmax,head`; repeatable. Replaces the cross product.
    #[arg(long = "tuple", value_parser = parse_tuple)]
    tuples: Vec<[f64; 6]>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Threshold as a percentage of each tensor's dynamic range.
    #[arg(long, default_value_t = 1.0)]
    pct: f64,
    /// Directory for CSV dumps of every captured tensor and its row deltas.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Synthetic weight container.
    Weights(GenWeightsArgs),
    /// Synthetic feature sequence with tunable token correlation.
    Features(GenFeaturesArgs),
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long, value_enum, default_value = "kwt3")]
    preset: ModelPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    seq_tokens: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenFeaturesArgs {
    #[arg(long, value_enum, default_value = "kwt3")]
    preset: ModelPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Correlation between consecutive rows, in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    /// Probability that a row is resampled independently.
    #[arg(long, default_value_t = 0.0)]
    jump_prob: f64,
    /// Output path; `.csv` writes the CSV form.
    #[arg(long)]
    out: PathBuf,
}

fn parse_tuple(s: &str) -> std::result::Result<[f64; 6], String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 6 comma-separated values, got {}", v.len()))
}

impl ThresholdArgs {
    fn resolve(&self) -> ThresholdConfig {
        let mut t = match self.preset {
            Some(ThresholdPreset::Square) => ThresholdConfig::square_preset(),
            None => ThresholdConfig::zeros(),
        };
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut t.theta_x, self.theta_x);
        set(&mut t.theta_q, self.theta_q);
        set(&mut t.theta_k, self.theta_k);
        set(&mut t.theta_att, self.theta_att);
        set(&mut t.theta_softmax, self.theta_softmax);
        set(&mut t.theta_head, self.theta_head);
        t
    }
}

impl ModelArgs {
    fn engine(&self) -> Result<Engine> {
        let container = io::load_weights(&self.weights)?;
        let mut engine = Engine::from_container(&container)?;
        if let Some(p) = self.precision {
            engine = engine.with_precision(match p {
                PrecisionArg::Single => Precision::Single,
                PrecisionArg::Double => Precision::Double,
            });
        }
        if self.last_layer_opt {
            engine = engine.with_last_layer_opt(true);
        }
        Ok(engine)
    }
}

fn input_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_inputs(paths: &[PathBuf], config: &ModelConfig) -> Result<Vec<Input>> {
    paths
        .iter()
        .map(|p| Ok(Input::new(input_id(p), io::load_features_for(p, config)?)))
        .collect()
}

fn emit(bytes: &[u8], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

fn json_bytes(value: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Header(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let engine = args.model.engine()?;
    let inputs = load_inputs(&args.features, engine.config())?;
    let mode = match args.mode {
        ModeArg::Dense => Mode::Dense,
        ModeArg::Delta => Mode::Delta,
    };
    let records = sweep::run(&engine, &inputs, mode, &args.thresholds.resolve())?;
    let format = match args.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let bytes = io::render_report(&records, format)?;
    match &args.report {
        Some(path) => {
            fs::write(path, &bytes)?;
            for r in &records {
                println!(
                    "{} class={} pct_total={}",
                    r.input_id,
                    r.predicted_class,
                    io::fmt_pct(r.report.total_fraction())
                );
            }
        }
        None => emit(&bytes, None)?,
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let engine = args.model.engine()?;
    let inputs = load_inputs(&args.features, engine.config())?;
    let grid = if args.tuples.is_empty() {
        let base = match args.preset {
            Some(ThresholdPreset::Square) => ThresholdConfig::square_preset(),
            None => ThresholdConfig::zeros(),
        }
        .to_array();
        let lists = [
            args.theta_x,
            args.theta_q,
            args.theta_k,
            args.theta_att,
            args.theta_softmax,
            args.theta_head,
        ];
        let mut lists: [Vec<f64>; 6] = lists;
        for (list, b) in lists.iter_mut().zip(base) {
            if list.is_empty() {
                list.push(b);
            }
        }
        SweepGrid::cross(lists)?
    } else {
        SweepGrid::explicit(
            args.tuples
                .into_iter()
                .map(ThresholdConfig::from_array)
                .collect(),
        )?
    };
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = sweep::sweep(&engine, &inputs, &grid, jobs)?;
    emit(&sweep::render_sweep_csv(&rows)?, args.report.as_deref())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let engine = args.model.engine()?;
    let features = io::load_features_for(&args.features, engine.config())?;
    let input = Input::new(input_id(&args.features), features);
    let cmp = sweep::compare(&engine, &input, &args.thresholds.resolve())?;
    emit(&json_bytes(&cmp.to_json())?, args.report.as_deref())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let container = io::load_weights(&args.weights)?;
    let engine = Engine::from_container(&container)?;
    let features = io::load_features_for(&args.features, engine.config())?;
    let input = Input::new(input_id(&args.features), features);
    let stats = sweep::analyze(&engine, &input, args.pct, args.dump_dir.as_deref())?;
    let value = serde_json::json!({
        "input_id": input.id,
        "pct_of_range": args.pct,
        "layers": serde_json::to_value(&stats).map_err(|e| Error::Header(e.to_string()))?,
    });
    emit(&json_bytes(&value)?, args.report.as_deref())
}

fn preset_config(p: ModelPreset) -> ModelConfig {
    match p {
        ModelPreset::Kwt3 => ModelConfig::kwt3(),
        ModelPreset::Tiny => ModelConfig::tiny(),
    }
}

fn cmd_gen(cmd: GenCommand) -> Result<()> {
    match cmd {
        GenCommand::Weights(a) => {
            let mut c = preset_config(a.preset);
            let over = |slot: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *slot = v;
                }
            };
            over(&mut c.seq_tokens, a.seq_tokens);
            over(&mut c.feature_dim, a.feature_dim);
            over(&mut c.embed_dim, a.embed_dim);
            over(&mut c.mlp_dim, a.mlp_dim);
            over(&mut c.heads, a.heads);
            over(&mut c.layers, a.layers);
            over(&mut c.num_classes, a.classes);
            if let Some(n) = a.norm {
                c.norm_placement = match n {
                    NormArg::Post => NormPlacement::Post,
                    NormArg::Pre => NormPlacement::Pre,
                };
            }
            c.validate()?;
            let weights = io::gen_weights::<f32>(a.seed, &c);
            io::save_weights(&a.out, &WeightContainer::new(c, &weights)?)
        }
        GenCommand::Features(a) => {
            let c = preset_config(a.preset);
            let rows = a.rows.unwrap_or(c.seq_tokens);
            let cols = a.cols.unwrap_or(c.feature_dim);
            if rows == 0 || cols == 0 {
                return Err(Error::Config("feature dimensions must be positive".into()));
            }
            if !(0.0..=1.0).contains(&a.rho) || !(0.0..=1.0).contains(&a.jump_prob) {
                return Err(Error::Config("rho and jump-prob must lie in [0, 1]".into()));
            }
            let m = io::gen_features::<f64>(a.seed, rows, cols, a.rho, a.jump_prob);
            io::save_features(&a.out, &m)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gen(g) => cmd_gen(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
