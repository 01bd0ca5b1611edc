//! `sfedkd` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sfedkd::data::{class_distribution, ClassDistribution};
use sfedkd::experiment::{
    self, ablate, prepare_data, run_experiment, write_artifacts, AblationRow, Axis,
};
use sfedkd::selection::{brute_force_select, greedy_select, random_select, SelectionInstance};
use sfedkd::{Error, ExperimentConfig, Metric};

#[derive(Parser)]
#[command(
    name = "sfedkd",
    version,
    about = "Sequential federated learning with multi-teacher distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.jsonl, summary.csv,
    /// config.resolved.json and model.ckpt.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set train.K=3`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep one ablation axis over the configured seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Choose K distributions whose pooled mass is closest to uniform.
    Select {
        /// CSV with one class distribution (or count vector) per row.
        distributions: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "KL")]
        metric: String,
        #[arg(long, value_enum, default_value = "greedy")]
        solver: Solver,
        /// Seed for the random solver.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print per-client class histograms of the configured partition.
    InspectPartition {
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the configured training set as CSV (`f0,...,label`).
    ExportData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Weights,
    Metric,
    Teachers,
    Mode,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Weights => Axis::Weights,
            AxisArg::Metric => Axis::Metric,
            AxisArg::Teachers => Axis::Teachers,
            AxisArg::Mode => Axis::Mode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Greedy,
    Exact,
    Random,
}

fn load_config(path: &Path, overrides: &[String]) -> sfedkd::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    for o in overrides {
        cfg.apply_assignment(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format(_) | Error::Consistency(_) => 3,
        Error::Config { .. } | Error::Argument(_) | Error::Capacity(_) => 2,
    }
}

fn read_distributions(path: &Path) -> sfedkd::Result<Vec<ClassDistribution>> {
    let text = fs::read_to_string(path)?;
    let mut dists = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match fields {
            Ok(w) => dists.push(ClassDistribution::from_weights(w)?),
            // a leading header row is allowed
            Err(_) if dists.is_empty() && line_no == 0 => continue,
            Err(e) => return Err(Error::Format(format!("line {}: {e}", line_no + 1))),
        }
    }
    Ok(dists)
}

fn cmd_run(config: &Path, overrides: &[String]) -> sfedkd::Result<()> {
    let cfg = load_config(config, overrides)?;
    let result = run_experiment(&cfg)?;
    write_artifacts(&cfg, &result)?;
    let s = &result.summary;
    println!(
        "{} rounds={} final_top1={:.4} best_top1={:.4} forgetting={} -> {}",
        s.mode,
        s.rounds,
        s.final_top1,
        s.best_top1,
        s.forgetting.map_or("n/a".into(), |f| format!("{f:.4}")),
        cfg.output.dir.display()
    );
    Ok(())
}

fn cmd_ablate(config: &Path, axis: Axis, overrides: &[String]) -> sfedkd::Result<()> {
    let cfg = load_config(config, overrides)?;
    let rows = ablate(&cfg, axis)?;
    let mut csv = format!("{}\n", AblationRow::CSV_HEADER);
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join(format!("ablation_{axis}.csv"));
    fs::write(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_select(
    path: &Path,
    k: usize,
    metric: &str,
    solver: Solver,
    seed: u64,
) -> sfedkd::Result<()> {
    let metric: Metric = metric.parse()?;
    let dists = read_distributions(path)?;
    let inst = SelectionInstance::new(dists, k, metric)?;
    let (name, indices, objective) = match solver {
        Solver::Greedy => {
            let s = greedy_select(&inst)?;
            ("greedy", s.indices, s.objective)
        }
        Solver::Exact => {
            let s = brute_force_select(&inst)?;
            ("exact", s.indices, s.objective)
        }
        Solver::Random => {
            let idx = random_select(inst.candidates.len(), k, seed)?;
            let obj = inst.objective(&idx);
            ("random", idx, obj)
        }
    };
    println!(
        "{}",
        serde_json::json!({ "solver": name, "metric": metric.to_string(), "indices": indices, "objective": objective })
    );
    Ok(())
}

fn cmd_inspect(config: &Path, overrides: &[String]) -> sfedkd::Result<()> {
    let cfg = load_config(config, overrides)?;
    let data = prepare_data(&cfg)?;
    let c = data.train.num_classes();
    let header: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
    println!("client,size,{}", header.join(","));
    for (n, client) in data.clients.iter().enumerate() {
        let counts: Vec<String> = client.class_counts().iter().map(usize::to_string).collect();
        println!("{n},{},{}", client.len(), counts.join(","));
    }
    let global = class_distribution(&data.train, c);
    eprintln!(
        "train={} test={} clients={} empty={} global={:?}",
        data.train.len(),
        data.test.len(),
        data.clients.len(),
        data.clients.iter().filter(|d| d.is_empty()).count(),
        global.proportions
    );
    Ok(())
}

fn cmd_export(config: &Path, out: &Path, overrides: &[String]) -> sfedkd::Result<()> {
    let cfg = load_config(config, overrides)?;
    let data = experiment::prepare_data(&cfg)?;
    let file = fs::File::create(out)?;
    data.train.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::Ablate {
            config,
            axis,
            overrides,
        } => cmd_ablate(config, (*axis).into(), overrides),
        Command::Select {
            distributions,
            k,
            metric,
            solver,
            seed,
        } => cmd_select(distributions, *k, metric, *solver, *seed),
        Command::InspectPartition { config, overrides } => cmd_inspect(config, overrides),
        Command::ExportData {
            config,
            out,
            overrides,
        } => cmd_export(config, out, overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
