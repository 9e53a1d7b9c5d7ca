use std::path::{Path, PathBuf};

use super::run::{RunRecord, SweepResult};
use crate::error::{Error, Result};
use crate::lora::count_trainable_params;
use crate::vit::ModelConfig;

pub const RESULTS_COLUMNS: [&str; 12] = [
    "run_id",
    "method",
    "scenario",
    "update_index",
    "rank",
    "clusters",
    "seed",
    "avg_acc",
    "forgetting",
    "routing_acc",
    "params_trainable",
    "wall_ms",
];

pub const NA: &str = "N/A";

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.6}"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn clusters_field(r: &RunRecord) -> String {
    if r.config.method.uses_experts() && r.config.method != super::Method::Oracle {
        r.config.effective_clusters().to_string()
    } else {
        NA.to_string()
    }
}

/// One row per (run, repeat, update) in [`RESULTS_COLUMNS`] order.
pub fn write_results_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULTS_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in records {
        for rep in &r.repeats {
            for u in &rep.updates {
                w.write_record([
                    r.run_id.clone(),
                    r.config.method.as_str().to_string(),
                    r.config.scenario.as_str().to_string(),
                    u.update_index.to_string(),
                    r.config.rank.to_string(),
                    clusters_field(r),
                    rep.init_seed.to_string(),
                    format!("{:.6}", u.avg_acc),
                    num(u.forgetting),
                    num(u.routing_acc),
                    r.params_trainable.to_string(),
                    u.wall_ms.map_or_else(|| NA.to_string(), |v| format!("{v:.1}")),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Final metrics per run as mean and standard deviation over repeats.
pub fn write_summary_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "run_id",
        "method",
        "scenario",
        "rank",
        "clusters",
        "repeats",
        "avg_acc_mean",
        "avg_acc_std",
        "forgetting_mean",
        "forgetting_std",
        "routing_acc_mean",
        "oracle_acc_mean",
        "params_trainable",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in records {
        let (acc, acc_std) = RunRecord::summary(&r.final_avg_accs());
        let forget = r.final_forgetting().map(|v| RunRecord::summary(&v));
        let routing = r.final_routing_accs().map(|v| RunRecord::summary(&v).0);
        let oracle = r.final_oracle_accs().map(|v| RunRecord::summary(&v).0);
        w.write_record([
            r.run_id.clone(),
            r.config.method.as_str().to_string(),
            r.config.scenario.as_str().to_string(),
            r.config.rank.to_string(),
            clusters_field(r),
            r.repeats.len().to_string(),
            format!("{acc:.6}"),
            num(acc_std),
            num(forget.map(|f| f.0)),
            num(forget.and_then(|f| f.1)),
            num(routing),
            num(oracle),
            r.params_trainable.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long format, one row per (value, repeat): ready for plotting.
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["axis", "value", "run_id", "repeat", "seed", "avg_acc", "forgetting", "routing_acc", "params_trainable"])
        .map_err(|e| csv_err(path, e))?;
    for r in &result.records {
        let value = match result.axis {
            super::SweepAxis::Rank => r.config.rank,
            super::SweepAxis::Clusters => r.config.effective_clusters(),
        };
        for rep in &r.repeats {
            let m = rep.final_metrics();
            w.write_record([
                result.axis.as_str().to_string(),
                value.to_string(),
                r.run_id.clone(),
                rep.repeat.to_string(),
                rep.init_seed.to_string(),
                format!("{:.6}", m.avg_acc),
                num(m.forgetting),
                num(m.routing_acc),
                r.params_trainable.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub model: &'static str,
    pub config: ModelConfig,
    pub rank: usize,
    pub classes: usize,
    pub params: usize,
}

/// Trainable parameters of one expert for reference configurations.
pub fn param_efficiency_rows() -> Vec<ParamRow> {
    let row = |model, config: ModelConfig, rank, classes| ParamRow {
        model,
        config,
        rank,
        classes,
        params: count_trainable_params(&config, rank, classes),
    };
    vec![
        row("vit-b/16", ModelConfig::vit_base(), 1, 2),
        row("vit-b/16", ModelConfig::vit_base(), 64, 2),
        row("vit-b/16", ModelConfig::vit_base(), 64, 10),
        row("desk", ModelConfig::desk(), 8, 10),
        row("desk", ModelConfig::desk(), 8, 4),
        row("toy", ModelConfig::toy(), 2, 10),
    ]
}

/// `38402` → `38,402`.
pub fn with_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn format_param_table(rows: &[ParamRow]) -> String {
    let mut out = format!("{:<10} {:>3} {:>5} {:>5} {:>8} {:>14}\n", "model", "L", "D", "rank", "classes", "params");
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>3} {:>5} {:>5} {:>8} {:>14}\n",
            r.model,
            r.config.num_layers,
            r.config.embed_dim,
            r.rank,
            r.classes,
            with_thousands(r.params)
        ));
    }
    out
}

fn write_param_csv(rows: &[ParamRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["model", "layers", "embed_dim", "rank", "classes", "params_trainable"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            r.config.num_layers.to_string(),
            r.config.embed_dim.to_string(),
            r.rank.to_string(),
            r.classes.to_string(),
            r.params.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes results, summary and parameter-efficiency tables into `out`.
pub fn report(records: &[RunRecord], out: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Data("nothing to report: no run records".into()));
    }
    let results = out.join("results.csv");
    let summary = out.join("summary.csv");
    let params = out.join("param_efficiency.csv");
    let params_txt = out.join("param_efficiency.txt");
    write_results_csv(records, &results)?;
    write_summary_csv(records, &summary)?;
    let rows = param_efficiency_rows();
    write_param_csv(&rows, &params)?;
    std::fs::write(&params_txt, format_param_table(&rows)).map_err(|e| Error::io(&params_txt, e))?;
    Ok(vec![results, summary, params, params_txt])
}

/// Reads every `record.json` directly below `root` (sorted by path).
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join("record.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}
