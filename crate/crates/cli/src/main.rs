use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevcollab::config::{ScenarioConfig, Variant};
use bevcollab::scenario::{run_ablation, run_scenario, run_sweep, thread_override, SweepAxis};
use bevcollab::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "bevcollab", version, about = "Radar-camera collaborative BEV perception simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write report.json.
    Run(Common),
    /// Sweep latency, pose noise or token ratio and write a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated sweep values; defaults to the config's list for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Compare pipeline variants over identical seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant tags; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// World seed (first seed of multi-seed runs).
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per sweep point or variant.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.world.seed = seed;
        }
        if let Some(n) = self.seeds {
            cfg.sweep.seeds = n;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let report = run_scenario(&cfg)?;
            let path = write(&cfg.output.dir, "report.json", &report.to_json()?)?;
            println!(
                "variant {} seed {}: acc@0.5 {:.4} acc@0.7 {:.4} comm {:.6} units -> {}",
                report.variant,
                report.seed,
                report.metrics.acc_05,
                report.metrics.acc_07,
                report.metrics.comm_units,
                path.display()
            );
        }
        Command::Sweep { common, axis, values } => {
            let mut cfg = common.load()?;
            if let Some(values) = values {
                match axis {
                    SweepAxis::Latency => cfg.sweep.latencies = values,
                    SweepAxis::Pose => cfg.sweep.pose_noises = values,
                    SweepAxis::Ratio => cfg.sweep.token_ratios = values,
                }
            }
            let values = axis.default_values(&cfg);
            let table = run_sweep(&cfg, axis, &values)?;
            let stem = format!("sweep_{}", axis.column());
            let csv = write(&cfg.output.dir, &format!("{stem}.csv"), &table.to_csv_string()?)?;
            write(&cfg.output.dir, &format!("{stem}.json"), &serde_json::to_string_pretty(&table)?)?;
            for row in &table.rows {
                println!("{} {}: acc@0.7 {:.4} comm {:.6}", table.key, row.label, row.acc_07, row.comm_units);
            }
            println!("-> {}", csv.display());
        }
        Command::Ablate { common, variants } => {
            let mut cfg = common.load()?;
            if let Some(v) = variants {
                cfg.sweep.variants = v;
            }
            let ablation = run_ablation(&cfg, &cfg.sweep.variants)?;
            let csv = write(&cfg.output.dir, "ablation.csv", &ablation.table.to_csv_string()?)?;
            write(&cfg.output.dir, "ablation_deltas.csv", &ablation.deltas_csv_string()?)?;
            write(&cfg.output.dir, "ablation.json", &serde_json::to_string_pretty(&ablation)?)?;
            for d in &ablation.deltas {
                println!("{}: Δacc@0.7 {:+.4}", d.variant, d.delta_acc_07);
            }
            println!("-> {}", csv.display());
        }
        Command::Defaults => print!("{}", ScenarioConfig::default().to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_override() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
