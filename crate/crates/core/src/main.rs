use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use temporal_quant::pipeline::{format_sig, reduction_ratio, run_pipeline, PipelineConfig, Session};
use temporal_quant::Result;

/// Timestep-aware post-training quantization of a toy diffusion transformer.
#[derive(Parser)]
#[command(name = "tquant", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate Fisher sensitivity (fisher.csv, fisher_raw.json).
    Fisher(Common),
    /// Calibrate weights from an existing Fisher map.
    Calibrate(Common),
    /// Search a bit schedule on existing calibrated weights.
    Search(Common),
    /// Run every stage and write report.json.
    Run(Common),
    /// Evaluate schedules under minmax, uniform-calibrated and Fisher-calibrated weights.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Schedule files; defaults to schedule.json and baseline_schedule.json.
        #[arg(short, long = "schedule")]
        schedules: Vec<PathBuf>,
        /// Output CSV; defaults to ablation.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => print!("{}", PipelineConfig::default().to_toml_string()),
        Command::Fisher(common) => {
            let mut session = Session::open(load_config(&common)?)?;
            let map = session.fisher()?;
            println!(
                "fisher: {}x{} map written to {}",
                map.num_timesteps,
                map.num_layers,
                session.artifacts.fisher_csv().display()
            );
        }
        Command::Calibrate(common) => {
            let mut session = Session::open(load_config(&common)?)?;
            let fisher = session.load_fisher()?;
            let traces = session.traces()?;
            let calib = session.calibrate(&fisher, &traces)?;
            let total: f64 = calib.fisher_report.weighted_errors.iter().sum();
            println!("calibrate: weighted error {}", format_sig(total, 6));
        }
        Command::Search(common) => {
            let mut session = Session::open(load_config(&common)?)?;
            let fisher = session.load_fisher()?;
            let calibrated = session.load_calibrated(&session.artifacts.calibrated_model())?;
            let ranges = session.ranges(&session.traces()?)?;
            let (schedule, _) = session.search(&fisher, &calibrated, &ranges)?;
            println!(
                "search: avg bits {} (param-weighted {}) written to {}",
                format_sig(schedule.avg_bits, 6),
                format_sig(schedule.param_weighted_avg_bits, 6),
                session.artifacts.schedule().display()
            );
        }
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let dir = cfg.output_dir.clone();
            let report = run_pipeline(cfg)?;
            let e = &report.evaluation;
            println!("avg bits            {}", report.avg_bits);
            println!("param-weighted bits {}", report.param_weighted_avg_bits);
            println!("FLOPs reduction     {}", report.flops_reduction);
            println!("size reduction      {}", report.size_reduction);
            println!("schedule error      {}", e.schedule_error);
            println!("uniform-{} error     {}", e.baseline_bits, e.baseline_error);
            println!("report              {}", dir.join("report.json").display());
        }
        Command::Compare { common, schedules, out } => {
            let mut session = Session::open(load_config(&common)?)?;
            let named = if schedules.is_empty() {
                vec![
                    ("searched".to_string(), session.artifacts.schedule()),
                    ("uniform".to_string(), session.artifacts.baseline_schedule()),
                ]
            } else {
                schedules
                    .into_iter()
                    .map(|p| {
                        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        (name, p)
                    })
                    .collect()
            };
            let loaded = named
                .into_iter()
                .map(|(name, path)| Ok((name, session.load_schedule(&path)?)))
                .collect::<Result<Vec<_>>>()?;
            let fisher_model = session.load_calibrated(&session.artifacts.calibrated_model())?;
            let uniform_model = session.load_calibrated(&session.artifacts.uniform_model())?;
            let ranges = session.ranges(&session.traces()?)?;
            let out = out.unwrap_or_else(|| session.artifacts.ablation());
            let rows = session.compare(&loaded, &uniform_model, &fisher_model, &ranges, &out)?;
            println!("{:<20} {:<14} error", "schedule", "weights");
            for row in &rows {
                println!("{:<20} {:<14} {}", row.schedule, row.weights.name(), format_sig(row.error, 6));
            }
            for (name, s) in &loaded {
                println!(
                    "{name}: avg bits {}, FLOPs reduction {}x",
                    format_sig(s.avg_bits, 6),
                    format_sig(reduction_ratio(s.param_weighted_avg_bits), 3)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
