use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textline::config::PipelineConfig;
use textline::pipeline;

/// Environment variable naming the default configuration file.
const CONFIG_ENV: &str = "TEXTLINE_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "textline", version, about = "Unsupervised text-line segmentation for handwritten pages")]
struct Cli {
    /// TOML configuration file. Defaults to $TEXTLINE_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pages processed in parallel by detect, extract, evaluate and ablate.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunPages {
    /// Run directory holding every stage's artifacts.
    #[arg(long)]
    run: PathBuf,
    /// Page images, or directories of them.
    #[arg(required = true)]
    pages: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic pages with ground-truth label maps.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of pages (overrides synth.n_pages).
        #[arg(long)]
        pages: Option<usize>,
    },
    /// Sample self-labelled patch pairs from pages.
    Pairs(RunPages),
    /// Train the siamese network on the run's pairs.
    Train {
        #[arg(long)]
        run: PathBuf,
    },
    /// Embed pages and threshold them into blob lines.
    Detect(RunPages),
    /// Assign connected components to blob lines.
    Extract(RunPages),
    /// Score predicted line labels against ground truth.
    Evaluate {
        #[command(flatten)]
        input: RunPages,
        /// Directory of ground-truth label maps named like the pages.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Sweep patch size and sampler thresholds, one full run per cell.
    Ablate {
        #[command(flatten)]
        input: RunPages,
        #[arg(long)]
        gt: PathBuf,
    },
}

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Set `dotted.key` in a TOML table. The value is parsed as TOML when
/// possible and taken as a string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().ok_or("empty override key")?;
    let mut node = table;
    for part in sections {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` in `{key}` is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut table = match &path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = cli.seed {
        table.insert("rng_seed".into(), toml::Value::Integer(seed as i64));
    }
    if let Command::Synth { pages: Some(n), .. } = &cli.command {
        apply_override(&mut table, &format!("synth.n_pages={n}"))?;
    }
    Ok(PipelineConfig::from_toml(&toml::to_string(&table)?)?)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "tif" | "tiff" | "jpg" | "jpeg")
    )
}

/// Expand directories into their image files, sorted by name.
fn expand_pages(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut pages = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| format!("{}: {e}", input.display()))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            found.sort();
            pages.extend(found);
        } else {
            pages.push(input.clone());
        }
    }
    if pages.is_empty() {
        return Err("no page images found".into());
    }
    Ok(pages)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    log::info!("effective configuration:\n{}", cfg.to_toml());
    let jobs = cli.jobs;
    match &cli.command {
        Command::Synth { out, .. } => {
            let pages = pipeline::cmd_synth(&cfg, out)?;
            println!("wrote {} pages to {}", pages.len(), out.display());
        }
        Command::Pairs(a) => {
            let ds = pipeline::cmd_pairs(&cfg, &expand_pages(&a.pages)?, &a.run)?;
            println!("wrote {} pairs of {}x{} patches, digest {}", ds.len(), ds.patch_size.0, ds.patch_size.1, ds.digest());
        }
        Command::Train { run } => {
            let ck = pipeline::cmd_train(&cfg, run)?;
            for r in &ck.history {
                println!("epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss);
            }
            println!("best epoch {}", ck.best_epoch);
        }
        Command::Detect(a) => {
            for (page, n) in pipeline::cmd_detect(&cfg, &a.run, &expand_pages(&a.pages)?, jobs)? {
                println!("{page}: {n} blob lines");
            }
        }
        Command::Extract(a) => {
            for (page, s) in pipeline::cmd_extract(&cfg, &a.run, &expand_pages(&a.pages)?, jobs)? {
                println!("{page}: {} lines, {} components, energy {:.4}", s.lines, s.components, s.energy);
            }
        }
        Command::Evaluate { input, gt } => {
            let report = pipeline::cmd_evaluate(&cfg, &input.run, &expand_pages(&input.pages)?, gt, jobs)?;
            print!("{}", textline::evaluator::render_report(&report));
        }
        Command::Ablate { input, gt } => {
            let cells = pipeline::cmd_ablate(&cfg, &input.run, &expand_pages(&input.pages)?, gt, jobs)?;
            print!("{}", pipeline::render_ablation(&cells));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
