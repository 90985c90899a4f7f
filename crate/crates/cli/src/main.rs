use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use edgemtl::baselines::models_to_csv;
use edgemtl::data::write_shard_set;
use edgemtl::harness::{
    build_data, build_topology, emit_report, parse_strategies, read_report, run_experiment, ExperimentConfig, Format,
};
use edgemtl::netlasso::clusters_to_csv;
use edgemtl::topology::{validate_graph, write_graph_file};
use edgemtl::{Error, Stage};

#[derive(Parser)]
#[command(name = "edgemtl", version, about = "Network lasso and federated multi-task SVMs on simulated edge graphs")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured shard set and write it with a manifest.
    Synth(Common),
    /// Build the configured topology and write it as a graph file.
    Topology(Common),
    /// Run the configured strategies and write the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of netlasso,mocha,local,global.
        #[arg(long)]
        strategies: Option<String>,
        /// Comma-separated output formats.
        #[arg(long, default_value = "csv,json")]
        format: String,
    },
    /// Re-emit the output files of an existing report.json.
    Report {
        /// Path to report.json.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv,json")]
        format: String,
    },
}

fn tagged(e: Error, stage: Stage) -> anyhow::Error {
    e.at(stage).into()
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| tagged(e, Stage::Config))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn formats(list: &str) -> anyhow::Result<Vec<Format>> {
    list.split(',')
        .map(|f| match f.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(tagged(
                Error::InvalidInput(format!("unknown format {other:?} (expected csv or json)")),
                Stage::Config,
            )),
        })
        .collect()
}

fn write(path: &Path, text: String) -> anyhow::Result<()> {
    std::fs::write(path, text)
        .map_err(|e| tagged(Error::Io { path: path.into(), source: e }, Stage::Report))
}

fn synth(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let dir = out_dir(common, &cfg);
    let graph = build_topology(&cfg).map_err(|e| tagged(e, Stage::Topology))?;
    let data = build_data(&cfg, graph.n_nodes()).map_err(|e| tagged(e, Stage::Data))?;
    let manifest = write_shard_set(&data.shards, &dir, cfg.seeds()).map_err(|e| tagged(e, Stage::Data))?;
    if let Some(truth) = &data.ground_truth {
        write(&dir.join("ground_truth.csv"), clusters_to_csv(truth))?;
    }
    if let Some(models) = &data.true_models {
        let rows: Vec<_> = models.iter().enumerate().map(|(c, m)| (format!("cluster_{c}"), m.clone())).collect();
        write(&dir.join("true_models.csv"), models_to_csv(&rows))?;
    }
    println!("{} shards, checksum {}", data.shards.len(), data.shards.checksum());
    println!("wrote {}", manifest.display());
    Ok(())
}

fn topology(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let dir = out_dir(common, &cfg);
    let graph = build_topology(&cfg).map_err(|e| tagged(e, Stage::Topology))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("graph.txt");
    write_graph_file(&graph, &path).map_err(|e| tagged(e, Stage::Topology))?;
    let degrees: Vec<usize> = (0..graph.n_nodes()).map(|t| graph.degree(t)).collect();
    println!(
        "{} nodes, {} edges, degree {}..{}",
        graph.n_nodes(),
        graph.edges().len(),
        degrees.iter().min().unwrap_or(&0),
        degrees.iter().max().unwrap_or(&0)
    );
    for p in validate_graph(&graph) {
        println!("warning: {p}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(common: &Common, strategies: Option<&str>, format: &str) -> anyhow::Result<()> {
    let mut cfg = load(common)?;
    if let Some(list) = strategies {
        cfg.strategies = parse_strategies(list).map_err(|e| tagged(e, Stage::Config))?;
    }
    let formats = formats(format)?;
    let dir = out_dir(common, &cfg);
    let report = run_experiment(&cfg)?;
    let files = emit_report(&report, &dir, &formats).map_err(|e| tagged(e, Stage::Report))?;
    println!("{:<10} {:>9} {:>7}", "strategy", "accuracy", "rounds");
    for s in &report.strategies {
        println!("{:<10} {:>9.4} {:>7}", s.strategy.name(), s.macro_accuracy, s.total_rounds);
    }
    if let Some(c) = &report.clusters {
        let ari = c.ari.map(|a| format!(", ARI {a:.3}")).unwrap_or_default();
        println!("netlasso lambda {}: {} clusters{ari}", c.lambda, c.n_clusters);
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn report(from: &Path, out: &Path, format: &str) -> anyhow::Result<()> {
    let formats = formats(format)?;
    let report = read_report(from).map_err(|e| tagged(e, Stage::Report))?;
    let files = emit_report(&report, out, &formats).map_err(|e| tagged(e, Stage::Report))?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn exit_code(stage: Option<Stage>) -> u8 {
    match stage {
        None => 1,
        Some(Stage::Config) => 2,
        Some(Stage::Topology) => 3,
        Some(Stage::Data) => 4,
        Some(Stage::NetLasso) => 5,
        Some(Stage::Mocha) => 6,
        Some(Stage::Baselines) => 7,
        Some(Stage::Report) => 8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Topology(c) => topology(c),
        Command::Run {
            common,
            strategies,
            format,
        } => run(common, strategies.as_deref(), format),
        Command::Report { from, out, format } => report(from, out, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let ours = e.downcast_ref::<Error>();
            // our errors already embed their sources in the message
            match ours {
                Some(err) => eprintln!("edgemtl: error {err}"),
                None => eprintln!("edgemtl: error: {e:#}"),
            }
            let stage = ours.and_then(Error::stage);
            ExitCode::from(exit_code(stage))
        }
    }
}
