use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lbsc::controllers::Variant;
use lbsc::scenario::{
    export, headway_stats, load_log, mae, run_episode, EpisodeLog, Format, ScenarioConfig,
    ScenarioError,
};

const EXIT_VIOLATION: u8 = 2;
const EXIT_FAULT: u8 = 1;

#[derive(Parser)]
#[command(name = "lbsc", version, about = "Safety-filtered cruise control on a five-car platoon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and export its log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's controller.
        #[arg(long, value_parser = ["lbsc", "lbsc-n", "cbf-clf-qp"])]
        controller: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Per-phase MAE and headway table for every log in a directory.
    Compare {
        #[arg(long)]
        logs: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LBSC_LOG_LEVEL", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            controller,
            out,
            seed,
            format,
        } => run(&scenario, controller.as_deref(), &out, seed, format.into()),
        Command::Compare { logs } => compare(&logs),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VIOLATION),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAULT)
        }
    }
}

/// Ok(false) when the headway left its band.
fn run(
    scenario: &Path,
    controller: Option<&str>,
    out: &Path,
    seed: Option<u64>,
    format: Format,
) -> Result<bool, ScenarioError> {
    let mut cfg = ScenarioConfig::load(scenario)?;
    if let Some(c) = controller {
        cfg.controller = c.parse::<Variant>().map_err(ScenarioError::Invalid)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out).map_err(|source| ScenarioError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let path = out.join(format!(
        "{}_seed{}.{}",
        cfg.controller,
        cfg.seed,
        format.extension()
    ));
    let log = match run_episode(&cfg) {
        Ok(log) => log,
        Err(fault) => {
            // keep what was simulated before the fault
            export(&fault.log, format, &path)?;
            log::error!("partial log written to {}", path.display());
            return Err(fault.error);
        }
    };
    export(&log, format, &path)?;
    let stats = headway_stats(&log, (cfg.headway_min_m, cfg.headway_max_m));
    println!("wrote {} ({} rows)", path.display(), log.rows.len());
    println!(
        "headway min {:.3} m max {:.3} m, violations {}",
        stats.min, stats.max, stats.violations
    );
    if let Some(t) = stats.first_violation_t {
        println!("first violation at t = {t:.2} s");
    }
    Ok(stats.violations == 0)
}

fn is_log(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    !name.ends_with(".meta.json") && (name.ends_with(".csv") || name.ends_with(".json"))
}

fn compare(dir: &Path) -> Result<bool, ScenarioError> {
    let io = |source| ScenarioError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| is_log(p));
    paths.sort();
    if paths.is_empty() {
        return Err(ScenarioError::Invalid(format!(
            "no .csv or .json logs in {}",
            dir.display()
        )));
    }

    let logs: Vec<(String, EpisodeLog)> = paths
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            load_log(p).map(|l| (name, l))
        })
        .collect::<Result<_, _>>()?;
    let phases = logs[0].1.metadata.phase_boundaries_s.len().saturating_sub(1);
    let width = logs.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);

    let mut header = format!("{:<width$}", "log");
    for k in 0..phases {
        header += &format!("  {:>9}", format!("mae_p{}", k + 1));
    }
    header += &format!("  {:>9}  {:>9}  {:>6}  {:>8}", "min_hw", "max_hw", "viol", "first_t");
    println!("{header}");

    let mut clean = true;
    for (name, log) in &logs {
        let m = &log.metadata;
        let mut line = format!("{name:<width$}");
        for w in m.phase_boundaries_s.windows(2) {
            let cell = match mae(log, (w[0], w[1])) {
                Ok(v) => format!("{v:.4}"),
                Err(_) => "-".into(),
            };
            line += &format!("  {cell:>9}");
        }
        let s = headway_stats(log, (m.headway_min_m, m.headway_max_m));
        let first = s
            .first_violation_t
            .map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
        line += &format!(
            "  {:>9.3}  {:>9.3}  {:>6}  {:>8}",
            s.min, s.max, s.violations, first
        );
        println!("{line}");
        clean &= s.violations == 0;
    }
    Ok(clean)
}
