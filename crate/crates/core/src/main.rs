use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

use g2ldp::config::ExperimentConfig;
use g2ldp::studies::{run_study, Study, StudyOutput};
use g2ldp::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Skeleton,
    Simulate,
    VerifyOperators,
    CheckCoefficients,
    Rate,
    McY,
    McC2,
    McLdp,
    GirsanovCheck,
    Scan,
    C1,
}

impl Command {
    fn study(self) -> Study {
        match self {
            Command::Skeleton => Study::Skeleton,
            Command::Simulate => Study::Simulate,
            Command::VerifyOperators => Study::VerifyOperators,
            Command::CheckCoefficients => Study::CheckCoefficients,
            Command::Rate => Study::Rate,
            Command::McY => Study::McY,
            Command::McC2 => Study::McC2,
            Command::McLdp => Study::McLdp,
            Command::GirsanovCheck => Study::GirsanovCheck,
            Command::Scan => Study::Scan,
            Command::C1 => Study::C1,
        }
    }
}

/// Simulation and large-deviation studies for the stochastic second-grade fluid.
#[derive(Debug, Parser)]
#[command(name = "g2ldp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set mc.paths=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

fn thread_budget(cfg: &ExperimentConfig) -> Option<usize> {
    let env = std::env::var("G2LDP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0);
    match (cfg.threads.filter(|n| *n > 0), env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn manifest(study: Study, cfg: &ExperimentConfig, effective: &str, out: &StudyOutput) -> String {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut m = format!(
        "subcommand = \"{}\"\nversion = \"{}\"\nconfig_sha256 = \"{}\"\npassed = {}\ntimestamp = {stamp}\n",
        study,
        env!("CARGO_PKG_VERSION"),
        sha256(effective),
        out.passed
    );
    if let Some(seed) = cfg.seed {
        m.push_str(&format!("seed = {seed}\n"));
    }
    m.push_str("\n[files]\n");
    for (name, contents) in &out.files {
        m.push_str(&format!("\"{name}\" = \"{}\"\n", sha256(contents)));
    }
    m
}

/// Writes every file or none: anything written before a failure is removed.
fn write_all(dir: &Path, files: &[(String, String)]) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut written = vec![];
    for (name, contents) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, contents) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(Error::Io { path, source: e });
        }
        written.push(path);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = ExperimentConfig::load(&cli.config, &cli.overrides)?;
    if let Some(n) = thread_budget(&cfg) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let study = cli.command.study();
    let effective = cfg.to_toml_string()?;
    let out = run_study(study, &cfg)?;
    let mut files = out.files.clone();
    files.push(("summary.txt".into(), out.summary_text()));
    files.push(("config.toml".into(), effective.clone()));
    files.push(("manifest.toml".into(), manifest(study, &cfg, &effective, &out)));
    write_all(&cli.out, &files)?;
    print!("{}", out.summary_text());
    Ok(out.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e @ (Error::Config(_) | Error::Parse { .. } | Error::GridMisaligned { .. })) => {
            eprintln!("g2ldp: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("g2ldp: {e}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
