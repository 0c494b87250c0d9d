use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tbscreen::cohort::save_cohort;
use tbscreen::report::{run, verify_run, MatchMode, ReportError, RunConfig, RunOptions, Section};
use tbscreen::synth::{generate_study, PanelSpec};

#[derive(Parser)]
#[command(
    name = "tbscreen",
    version,
    about = "Evaluate a chest X-ray TB triage score against radiologists"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep readers flagged as outliers or excluded by configuration.
    #[arg(long, global = true)]
    include_excluded_readers: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    WhoSens,
    WhoSpec,
    MeanReader,
    PerReader,
}

impl From<Mode> for MatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::WhoSens => MatchMode::WhoSens,
            Mode::WhoSpec => MatchMode::WhoSpec,
            Mode::MeanReader => MatchMode::MeanReader,
            Mode::PerReader => MatchMode::PerReader,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the input files and write validation.json.
    Validate,
    /// ROC, AUC, operating points and noninferiority tests.
    Evaluate,
    /// Thresholds matched to readers or to the WHO targets.
    Match {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Target value for the WHO modes instead of the default minimum.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Stratified analyses.
    Subgroup,
    /// Score distribution comparisons across datasets.
    DistShift,
    /// Cost per case detected over a prevalence sweep.
    Cost,
    /// Every analysis plus report.md.
    Report,
    /// Generate a synthetic study from a panel file.
    Synth {
        /// TOML file with one `[[panel]]` table per reader panel.
        #[arg(long)]
        panel: PathBuf,
    },
    /// Re-derive every number in a bundle from the configured inputs.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    panel: Vec<PanelSpec>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ReportError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| ReportError::Config("--config is required for this command".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn synth(panel: &Path, out: &Path) -> Result<(), ReportError> {
    let text = std::fs::read_to_string(panel).map_err(|source| ReportError::Io {
        path: panel.to_path_buf(),
        source,
    })?;
    let study: StudyFile = toml::from_str(&text).map_err(|e| ReportError::Config(e.to_string()))?;
    let (cohort, truths) =
        generate_study(&study.panel).map_err(|e| ReportError::Config(e.to_string()))?;
    save_cohort(&cohort, out)?;
    let truth = serde_json::json!({ "panels": study.panel, "truth": truths });
    let mut bytes =
        serde_json::to_vec_pretty(&truth).map_err(|e| ReportError::Data(e.to_string()))?;
    bytes.push(b'\n');
    let path = out.join("truth.json");
    std::fs::write(&path, bytes).map_err(|source| ReportError::Io { path, source })?;
    log::info!("wrote {} cases to {}", cohort.cases.len(), out.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<bool, ReportError> {
    let sections = match &cli.command {
        Command::Synth { panel } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("synthetic"));
            synth(panel, &out)?;
            return Ok(true);
        }
        Command::Verify { bundle } => {
            let report = verify_run(&load_config(cli)?, bundle)?;
            for m in &report.mismatches {
                eprintln!("mismatch: {m}");
            }
            println!(
                "checked {} values, {} mismatches",
                report.checked,
                report.mismatches.len()
            );
            return Ok(report.is_ok());
        }
        Command::Validate => vec![Section::Validate],
        Command::Evaluate => vec![Section::Validate, Section::Evaluate],
        Command::Match { mode, target } => vec![
            Section::Validate,
            Section::Match {
                mode: (*mode).into(),
                target: *target,
            },
        ],
        Command::Subgroup => vec![Section::Validate, Section::Subgroup],
        Command::DistShift => vec![Section::Validate, Section::DistShift],
        Command::Cost => vec![Section::Validate, Section::Cost],
        Command::Report => Section::all(),
    };
    let config = load_config(cli)?;
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| config.resolve(&config.output_dir));
    let options = RunOptions {
        out_dir,
        include_excluded_readers: cli.include_excluded_readers,
        sections,
    };
    let outcome = run(&config, &options)?;
    for note in &outcome.notes {
        log::info!("{note}");
    }
    if !outcome.valid {
        eprintln!(
            "validation failed; see {}",
            options.out_dir.join("validation.json").display()
        );
    }
    println!(
        "wrote {} files to {}",
        outcome.files.len(),
        options.out_dir.display()
    );
    Ok(outcome.valid)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
