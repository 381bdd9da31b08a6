//! `holoshot` — synthetic data generation, contrastive pre-training, and
//! few-shot evaluation for single-channel particle images.
//!
//! Subcommands: `synth`, `pretrain`, `ssl`, `embed`, `eval`, `report`.
//! Every run is a pure function of (config file, master seed); there is no
//! wall-clock seeding anywhere.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/integrity error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use config::Overrides;

/// Errors split by exit code: usage problems (1) vs data problems (2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn data(e: impl fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<holoshot_core::Error> for CliError {
    fn from(e: holoshot_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

const USAGE: &str = "\
holoshot — contrastive pre-training and few-shot evaluation for particle images

USAGE:
    holoshot <COMMAND> --config <FILE> [OPTIONS]

COMMANDS:
    synth      Generate the synthetic dataset and manifest
    pretrain   Supervised pre-training on the labelled train split -> generic.ckpt
    ssl        Contrastive refinement on the unlabelled pool -> ssl_refined.ckpt
    embed      Encode manifest images into per-instrument embedding caches
    eval       Run the k-shot sweep and write report.json + CSV tables
    report     Regenerate CSV tables from an existing report.json

OPTIONS:
    --config <FILE>      Experiment config (key = value lines); required
    --seed <N>           Override the master seed
    --epochs <N>         Override training epochs (pretrain/ssl)
    --k <LIST>           Override the evaluated shot counts, e.g. 1,5,25
    --repeats <N>        Override the number of episode draws per configuration
    --import <CSV>       embed: import externally computed vectors (id,v0,v1,...)
    --source <TAG>       embed: feature-source tag (default: checkpoint stem)
    --checkpoint <FILE>  embed: explicit checkpoint path
    --from-random        ssl: start from a fresh random encoder
    --help               Show this help
";

struct ParsedArgs {
    command: String,
    config: PathBuf,
    overrides: Overrides,
    import: Option<PathBuf>,
    source: Option<String>,
    checkpoint: Option<PathBuf>,
    from_random: bool,
}

fn parse_args(argv: &[String]) -> Result<ParsedArgs, CliError> {
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" {
        return Err(CliError::Usage(USAGE.to_string()));
    }
    let command = argv[0].clone();
    if !matches!(
        command.as_str(),
        "synth" | "pretrain" | "ssl" | "embed" | "eval" | "report"
    ) {
        return Err(CliError::Usage(format!(
            "unknown command '{command}'\n\n{USAGE}"
        )));
    }

    let mut config: Option<PathBuf> = None;
    let mut overrides = Overrides::default();
    let mut import = None;
    let mut source = None;
    let mut checkpoint = None;
    let mut from_random = false;

    fn value_of(it: &mut std::slice::Iter<'_, String>, name: &str) -> Result<String, CliError> {
        it.next()
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("{name} requires a value")))
    }

    let mut it = argv[1..].iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => config = Some(PathBuf::from(value_of(&mut it, "--config")?)),
            "--seed" => {
                overrides.seed = Some(
                    value_of(&mut it, "--seed")?
                        .parse()
                        .map_err(|_| CliError::Usage("--seed expects an integer".into()))?,
                )
            }
            "--epochs" => {
                overrides.epochs = Some(
                    value_of(&mut it, "--epochs")?
                        .parse()
                        .map_err(|_| CliError::Usage("--epochs expects an integer".into()))?,
                )
            }
            "--k" => {
                let raw = value_of(&mut it, "--k")?;
                let ks = raw
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CliError::Usage(format!("--k expects integers, got '{raw}'")))?;
                overrides.ks = Some(ks);
            }
            "--repeats" => {
                overrides.repeats = Some(
                    value_of(&mut it, "--repeats")?
                        .parse()
                        .map_err(|_| CliError::Usage("--repeats expects an integer".into()))?,
                )
            }
            "--import" => import = Some(PathBuf::from(value_of(&mut it, "--import")?)),
            "--source" => source = Some(value_of(&mut it, "--source")?),
            "--checkpoint" => checkpoint = Some(PathBuf::from(value_of(&mut it, "--checkpoint")?)),
            "--from-random" => from_random = true,
            "--help" | "-h" => return Err(CliError::Usage(USAGE.to_string())),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown option '{other}'\n\n{USAGE}"
                )))
            }
        }
    }

    let config = config.ok_or_else(|| CliError::Usage("--config is required".to_string()))?;
    Ok(ParsedArgs {
        command,
        config,
        overrides,
        import,
        source,
        checkpoint,
        from_random,
    })
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let args = parse_args(argv)?;
    let cfg = config::load_config(&args.config, &args.overrides)?;
    match args.command.as_str() {
        "synth" => commands::synth(&cfg),
        "pretrain" => commands::pretrain(&cfg),
        "ssl" => commands::ssl(&cfg, args.from_random),
        "embed" => commands::embed(
            &cfg,
            args.source.as_deref(),
            args.checkpoint.as_deref(),
            args.import.as_deref(),
        ),
        "eval" => commands::eval(&cfg),
        "report" => commands::report(&cfg),
        _ => unreachable!("command validated in parse_args"),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
