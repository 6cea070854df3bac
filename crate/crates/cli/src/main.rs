use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coherank::data::{self, Dataset, Split};
use coherank::encoder::EncoderParams;
use coherank::harness::{
    self, evaluate, gradcheck_suite, opportunity_section, run_experiment_on, search_queries, split_query_ids, sweep,
    sweep_table, to_json, write_experiment, write_file, ExperimentConfig, HarnessError, Strategy,
};
use coherank::metrics::{read_selections, run_map, RunMap};
use coherank::retrieval::VectorIndex;
use coherank::synthetic::{generate, verify_dataset};
use coherank::trainer::Mode;

#[derive(Debug, Parser)]
#[command(name = "coherank", version, about = "Train, search and evaluate coherence-aware dense retrievers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the configuration's data_dir.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder, evaluate it on the test split and write the experiment.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Training mode (FT, AUG, QQ, CR, FULL, QEA_ONLY, SMC_ONLY).
        #[arg(long)]
        mode: Option<String>,
        /// Run the full lambda grid instead of a single configuration.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search queries with a checkpoint and write a TREC run file.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// single, centroid or best.
        #[arg(long, default_value = "single")]
        strategy: String,
        /// train, dev, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate run files: relevance, coherence, complexity subset, opportunity.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run files; later files replace earlier rankings of the same query.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Selected document per canonical query (TSV); defaults to the oracle.
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-ranking opportunity of variant rankings at depth k.
    Opportunity {
        #[command(flatten)]
        common: Common,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Result<T> = std::result::Result<T, HarnessError>;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.data {
        config.data_dir = Some(dir.clone());
    }
    Ok(config)
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "dev" => Ok(Some(Split::Dev)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(HarnessError::Usage(format!(
            "unknown split `{other}` (expected train, dev, test or all)"
        ))),
    }
}

fn load_runs(paths: &[PathBuf]) -> Result<RunMap> {
    let mut runs = Vec::new();
    for path in paths {
        runs.extend(data::read_run(path)?);
    }
    Ok(run_map(runs))
}

fn load_selections(path: &Option<PathBuf>) -> Result<Option<BTreeMap<String, String>>> {
    Ok(match path {
        Some(p) => Some(read_selections(p)?),
        None => None,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed, out } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = seed {
                config.generator.seed = seed;
            }
            let synthetic = generate(&config.generator)?;
            create_dir(&out)?;
            synthetic.dataset.write_dir(&out)?;
            let report = verify_dataset(&synthetic.dataset);
            write_file(&out.join("verify.json"), to_json(&report))?;
            println!(
                "wrote {} documents, {} queries in {} clusters, {} triplets to {}",
                report.documents,
                report.queries,
                report.clusters,
                report.triplets,
                out.display()
            );
            println!("mean canonical/variant token overlap {:.4}", report.mean_token_overlap);
            if !report.violations.is_empty() {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                return Err(HarnessError::Check(format!("{} dataset violations", report.violations.len())));
            }
        }
        Command::Train {
            common,
            seed,
            mode,
            sweep: run_sweep,
            out,
        } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            if let Some(mode) = mode {
                config.train.mode = mode
                    .parse::<Mode>()
                    .map_err(|e| HarnessError::Usage(e.to_string()))?;
            }
            let dataset = config.dataset()?;
            if run_sweep {
                let rows = sweep(&dataset, &config)?;
                create_dir(&out)?;
                write_file(&out.join("sweep.json"), to_json(&rows))?;
                let table = sweep_table(&rows);
                write_file(&out.join("sweep.txt"), &table)?;
                print!("{table}");
            } else {
                let result = run_experiment_on(&dataset, &config)?;
                write_experiment(&result, &config, &out)?;
                print!("{}", result.report.to_text());
            }
        }
        Command::Search {
            common,
            checkpoint,
            k,
            strategy,
            split,
            tag,
            out,
        } => {
            let strategy: Strategy = strategy.parse()?;
            let split = parse_split(&split)?;
            if k == 0 {
                return Err(HarnessError::Usage("k must be >= 1".into()));
            }
            let config = load_config(&common)?;
            let dataset: Dataset = config.dataset()?;
            let encoder = EncoderParams::load(&checkpoint)?;
            let index = VectorIndex::build(dataset.corpus.values(), &encoder)?;
            let ids = split_query_ids(&dataset, split);
            let runs = search_queries(&dataset, &encoder, &index, &ids, k, strategy)?;
            data::write_run(&runs, tag.as_deref().unwrap_or(&config.tag), &out)?;
            println!("wrote {} rankings at depth {k} to {}", runs.len(), out.display());
        }
        Command::Eval {
            common,
            runs,
            split,
            selections,
            out,
        } => {
            let split = parse_split(&split)?;
            let config = load_config(&common)?;
            let dataset = config.dataset()?;
            let runs = load_runs(&runs)?;
            let selections = load_selections(&selections)?;
            let source = "external file";
            let mut report = evaluate(&dataset, &runs, split, &config.eval, selections.as_ref().map(|s| (s, source)))?;
            report.tag = config.tag.clone();
            report.config = serde_json::to_value(&config).expect("config serializes");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_file(&dir.join(harness::REPORT_JSON), to_json(&report))?;
                write_file(&dir.join(harness::REPORT_TEXT), report.to_text())?;
            }
            print!("{}", report.to_text());
        }
        Command::Opportunity {
            common,
            runs,
            k,
            split,
            selections,
            out,
        } => {
            let split = parse_split(&split)?;
            let config = load_config(&common)?;
            let k = k.unwrap_or(config.eval.k_opportunity);
            if k == 0 {
                return Err(HarnessError::Usage("k must be >= 1".into()));
            }
            let dataset = config.dataset()?;
            let runs = load_runs(&runs)?;
            let selections = load_selections(&selections)?;
            let section = opportunity_section(
                &dataset,
                &runs,
                split,
                k,
                selections.as_ref().map(|s| (s, "external file")),
            )?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_file(&dir.join("opportunity.json"), to_json(&section))?;
            }
            println!(
                "opportunity@{} ({} queries, selections: {}): {}",
                section.k,
                section.report.per_query.len(),
                section.selection_source,
                section.report.mean
            );
        }
        Command::Gradcheck { seed, corrupt, out } => {
            let summary = gradcheck_suite(seed, corrupt)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_file(&dir.join("gradcheck.json"), to_json(&summary))?;
            }
            print!("{}", summary.to_text());
            if !summary.pass {
                return Err(HarnessError::Check("gradient check".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
