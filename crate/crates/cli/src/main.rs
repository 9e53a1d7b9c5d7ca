use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use color_core::harness::{
    default_output_root, format_param_table, inspect, load_records, param_efficiency_rows, read_config_file, report,
    run_dir, save_backbone, with_thousands, Harness, RunConfig, RunRecord, SweepAxis,
};
use color_core::metrics::mean_std;
use color_core::scenarios::{generate_pool, pretrain_backbone};
use color_core::{Error, ErrorKind, Result};

/// Continual learning with per-dataset LoRA experts and prototype routing.
#[derive(Parser)]
#[command(name = "color", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and save a frozen backbone on the synthetic pool.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Destination checkpoint [default: <output root>/backbone.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one method over a continual sequence.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Repeat a run across ranks or cluster counts.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Strictly increasing, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Collect run records into CSV tables and print parameter counts.
    Report {
        /// Directory holding run directories [default: output root].
        #[arg(long)]
        root: Option<PathBuf>,
        /// Where to write the tables [default: <root>/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metadata and tensor table of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

/// Configuration sources, later ones winning: the config file, the named
/// flags, then `--set` pairs.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Initialization seed of the first repeat.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Any config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(path) => read_config_file(path)?,
            None => BTreeMap::new(),
        };
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v);
            }
        };
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("scenario", self.scenario.clone());
        put("method", self.method.clone());
        put("rank", self.rank.map(|v| v.to_string()));
        put("clusters", self.clusters.map(|v| v.to_string()));
        put("repeats", self.repeats.map(|v| v.to_string()));
        put("init_seed", self.seed.map(|v| v.to_string()));
        put("output_dir", path_str(&self.output_dir));
        put("backbone", path_str(&self.backbone));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let cfg = RunConfig::from_pairs(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_record(record: &RunRecord) {
    println!("{} ({} trainable parameters per expert)", record.run_id, with_thousands(record.params_trainable));
    for r in &record.repeats {
        let m = r.final_metrics();
        let opt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"));
        println!(
            "  repeat {} (seed {}): avg_acc {:.4}  forgetting {}  routing_acc {}  oracle_avg_acc {}",
            r.repeat,
            r.init_seed,
            m.avg_acc,
            opt(m.forgetting),
            opt(m.routing_acc),
            opt(m.oracle_avg_acc)
        );
    }
    let (mean, std) = mean_std(&record.final_avg_accs());
    println!("  avg_acc {mean:.4} ± {std:.4}");
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { run, out } => {
            let cfg = run.config()?;
            let pool = generate_pool(&cfg.pool_spec())?;
            let (backbone, accuracy) = pretrain_backbone(&pool, &cfg.pretrain(), cfg.model())?;
            let path = out.unwrap_or_else(|| cfg.output_root().join("backbone.ckpt"));
            save_backbone(&backbone, Some(accuracy), &path)?;
            println!("pool accuracy {accuracy:.4}; backbone written to {}", path.display());
        }
        Command::Run { run } => {
            let cfg = run.config()?;
            let record = Harness::writing_outputs().run(&cfg)?;
            print_record(&record);
            println!("outputs in {}", run_dir(&record).display());
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.config()?;
            let result = Harness::writing_outputs().sweep(&cfg, axis, &values)?;
            for record in &result.records {
                print_record(record);
            }
            for (value, err) in &result.failures {
                eprintln!("{} = {value} failed: {err}", axis.as_str());
            }
            if result.records.is_empty() {
                return Err(Error::Data("every sweep point failed".into()));
            }
        }
        Command::Report { root, out } => {
            let root = root.unwrap_or_else(default_output_root);
            let records = load_records(&root)?;
            let out = out.unwrap_or_else(|| root.join("report"));
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            for path in report(&records, &out)? {
                println!("wrote {}", path.display());
            }
            print!("{}", format_param_table(&param_efficiency_rows()));
        }
        Command::InspectCheckpoint { path } => {
            let bytes = std::fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let (meta, table) = inspect(&bytes)?;
            let meta = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
            println!("{meta}");
            println!("{} tensors", table.len());
            for e in &table {
                println!("  {:<40} {:<16} offset {:>10}  elements {}", e.name, format!("{:?}", e.shape), e.offset, e.elements);
            }
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
