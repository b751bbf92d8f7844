//! Command-line front end. Field staff pick a time period and a budget;
//! everything else — model, registry, travel matrix, capacities — comes
//! from the deployment config. Exit codes: 0 success, 2 validation
//! failure (bad arguments, bad input data, invalid plan), 3 stage failure.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use adviser::estimate::{parse_training_rows, train_from_rows, EstimateError, FeatureSchema};
use adviser::fixtures::raw_records_from_sim;
use adviser::ingest::{emit_registry, HeaderSpec};
use adviser::pipeline::{run_pipeline, stage, PeriodConfig, PipelineConfig, PipelineError};
use adviser::sim::{
    run_comparison, sample_training_rows, synth_population, ComparisonParams, PopulationParams,
    SimError,
};
use adviser::domain::CellId;
use adviser::travel::{
    BoundingBox, Grid, MatrixStore, QueryCostLedger, SyntheticTravelProvider, TravelError,
    TravelTimeMatrix,
};

#[derive(Parser)]
#[command(
    name = "adviser",
    version,
    about = "Budget-constrained allocation of vaccination interventions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an intervention plan for a time period and budget.
    Plan(PlanArgs),
    /// Run exactly one pipeline stage from persisted artifacts.
    Stage(StageArgs),
    /// Build or refresh the travel-time grid matrix.
    Grid(GridArgs),
    /// Train success models from a labeled outcomes CSV.
    Train(TrainArgs),
    /// Generate a synthetic registry, ground truth, and training data.
    Synth(SynthArgs),
    /// Compare the planner against the phone-call baseline in simulation.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Planning window start (YYYY-MM-DD).
    #[arg(long)]
    from: NaiveDate,
    /// Planning window end (YYYY-MM-DD).
    #[arg(long)]
    to: NaiveDate,
    /// Budget for the window, in cost units.
    #[arg(long)]
    budget: f64,
    /// Deployment config file.
    #[arg(long, default_value = "adviser.toml")]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StageArgs {
    /// Stage name: ingest, eligibility, estimate, prune, routes, solve, emit.
    name: String,
    #[arg(long, default_value = "adviser.toml")]
    config: PathBuf,
    /// Window start override (YYYY-MM-DD); must match the run being resumed.
    #[arg(long)]
    from: Option<NaiveDate>,
    /// Window end override (YYYY-MM-DD).
    #[arg(long)]
    to: Option<NaiveDate>,
    /// Budget override.
    #[arg(long)]
    budget: Option<f64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[command(subcommand)]
    action: GridAction,
}

#[derive(Subcommand)]
enum GridAction {
    /// Fill the travel matrix for every cell pair in a bounding box.
    /// Re-running on an existing store pays only for unknown pairs.
    Build(GridBuildArgs),
}

#[derive(Args)]
struct GridBuildArgs {
    /// Matrix store directory.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "offpeak")]
    period: String,
    #[arg(long, default_value_t = 1.0)]
    cell_km: f64,
    #[arg(long)]
    min_lat: f64,
    #[arg(long)]
    min_lon: f64,
    #[arg(long)]
    max_lat: f64,
    #[arg(long)]
    max_lon: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled outcomes CSV (features, target, outcome columns).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained model set JSON.
    #[arg(long)]
    out: PathBuf,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Population size.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving registry.csv, truth.json, training.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Labeled outcome rows per model target in training.csv.
    #[arg(long, default_value_t = 600)]
    train_rows: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2_000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    replications: usize,
    #[arg(long, default_value_t = 750.0)]
    budget: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Travel(#[from] TravelError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) => e.exit_code() as u8,
            // Bad training data, bad model files, bad bounding boxes: the
            // inputs failed validation.
            CliError::Estimate(_) | CliError::Input(_) => 2,
            CliError::Sim(_) | CliError::Travel(_) | CliError::Io(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when the reader of our stdout goes away
    // (`adviser plan | head`), like any other command-line tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Stage(args) => cmd_stage(args),
        Command::Grid(GridArgs {
            action: GridAction::Build(args),
        }) => cmd_grid_build(args),
        Command::Train(args) => cmd_train(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn load_config(
    path: &PathBuf,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
    budget: Option<f64>,
    seed: Option<u64>,
) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(path)?;
    if let (Some(from), Some(to)) = (from, to) {
        cfg.period = PeriodConfig { from, to };
    } else if from.is_some() || to.is_some() {
        return Err(CliError::Input(
            "--from and --to must be given together".to_string(),
        ));
    }
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.check()?;
    Ok(cfg)
}

fn cmd_plan(args: PlanArgs) -> Result<(), CliError> {
    let cfg = load_config(
        &args.config,
        Some(args.from),
        Some(args.to),
        Some(args.budget),
        args.seed,
    )?;
    let (plan, report) = run_pipeline(&cfg)?;
    let dir = cfg.run_dir();
    println!("plan written to {}", dir.join(&report.plan_file).display());
    println!(
        "{} assignments, cost {:.2} of budget {:.2}",
        report.assignments, report.total_cost, report.budget
    );
    println!(
        "objective {:.4} (no-intervention baseline {:.4}){}",
        report.objective,
        report.baseline_objective,
        if report.optimal {
            ", proven optimal".to_string()
        } else {
            format!(", optimality gap {:.4}", report.gap)
        }
    );
    println!(
        "parsed {} rows ({} malformed, {} unresolved addresses), {} eligible, {} pre-assigned to drives, {} routes pooled, {} nodes explored",
        report.parsed,
        report.malformed,
        report.unresolved_addresses,
        report.eligible,
        report.pruned,
        report.routes_generated,
        report.nodes_explored
    );
    drop(plan);
    Ok(())
}

fn cmd_stage(args: StageArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.from, args.to, args.budget, args.seed)?;
    let artifact = stage(&args.name, &cfg)?;
    println!("stage '{}' wrote {}", args.name, artifact.display());
    Ok(())
}

fn cmd_grid_build(args: GridBuildArgs) -> Result<(), CliError> {
    let bbox = BoundingBox::new(args.min_lat, args.min_lon, args.max_lat, args.max_lon)?;
    let grid = Grid::new(bbox, args.cell_km)?;
    let store = MatrixStore::open(&args.store)?;
    let provider = SyntheticTravelProvider::default();
    let mut matrix = match store.load(&args.period)? {
        Some(existing) if *existing.grid() == grid => existing,
        Some(_) => {
            return Err(CliError::Input(format!(
                "store {} already holds period '{}' with a different grid",
                args.store.display(),
                args.period
            )))
        }
        None => {
            let cells: BTreeSet<CellId> = (0..grid.cols)
                .flat_map(|x| (0..grid.rows).map(move |y| CellId::new(x, y)))
                .collect();
            TravelTimeMatrix::empty(grid, &args.period, "synthetic", cells)?
        }
    };
    let ledger = QueryCostLedger::default();
    matrix.fill(&provider, &ledger)?;
    store.save(&matrix)?;
    println!(
        "matrix '{}' covers {} cells; this build paid {} provider queries (cost {:.2})",
        args.period,
        matrix.cells().len(),
        ledger.queries(),
        ledger.cost()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.data)?;
    let schema = FeatureSchema::standard();
    let rows = parse_training_rows(&bytes, &schema)?;
    let set = train_from_rows(&rows, &schema, args.lambda)?;
    std::fs::write(&args.out, set.to_json())?;
    println!(
        "trained 5 models from {} rows; wrote {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let params = PopulationParams {
        n: args.n,
        ..PopulationParams::default()
    };
    let (registry, truth) = synth_population(&params, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let records = raw_records_from_sim(&registry);
    let csv = emit_registry(&records, &HeaderSpec::standard())
        .map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::write(args.out_dir.join("registry.csv"), csv)?;

    let truth_json =
        serde_json::to_string_pretty(&truth).map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::write(args.out_dir.join("truth.json"), truth_json + "\n")?;

    let rows = sample_training_rows(&registry, &truth, args.train_rows, args.seed ^ 0x5EED)?;
    let schema = FeatureSchema::standard();
    let training = adviser::estimate::emit_training_rows(&rows, &schema)?;
    std::fs::write(args.out_dir.join("training.csv"), training)?;

    println!(
        "wrote registry.csv ({} rows), truth.json, training.csv ({} rows) to {}",
        registry.len(),
        rows.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let params = ComparisonParams {
        population: PopulationParams {
            n: args.n,
            ..PopulationParams::default()
        },
        budget: args.budget,
        replications: args.replications,
        seed: args.seed,
        ..ComparisonParams::default()
    };
    let outcome = run_comparison(&params)?;
    print!("{}", outcome.report.summary_table());
    if let Some(out) = args.out {
        let json = serde_json::to_string_pretty(&outcome.report)
            .map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(&out, json + "\n")?;
        println!("report written to {}", out.display());
    }
    Ok(())
}
