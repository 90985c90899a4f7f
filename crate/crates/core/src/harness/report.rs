use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Report, Strategy};
use crate::baselines::models_to_csv;
use crate::error::{Error, Result};
use crate::netlasso::clusters_to_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn summary_csv(report: &Report) -> String {
    let mut s = String::from("strategy,macro_accuracy,total_rounds\n");
    for r in &report.strategies {
        s.push_str(&format!("{},{:?},{}\n", r.strategy, r.macro_accuracy, r.total_rounds));
    }
    s
}

fn per_node_csv(report: &Report) -> String {
    let mut s = String::from("node_id");
    for r in &report.strategies {
        s.push(',');
        s.push_str(r.strategy.name());
    }
    s.push('\n');
    for node in 0..report.n_nodes {
        s.push_str(&node.to_string());
        for r in &report.strategies {
            s.push_str(&format!(",{:?}", r.per_node_accuracy[node]));
        }
        s.push('\n');
    }
    s
}

fn rounds_csv(report: &Report) -> String {
    let traced: Vec<Strategy> = report
        .strategies
        .iter()
        .filter(|r| r.trace.is_some())
        .map(|r| r.strategy)
        .collect();
    let mut s = String::from("label,target");
    for t in &traced {
        s.push(',');
        s.push_str(t.name());
    }
    s.push('\n');
    for row in &report.rounds_to_accuracy {
        s.push_str(&format!("{},{:?}", row.label, row.target));
        for t in &traced {
            let v = row.rounds.get(t).copied().flatten();
            s.push(',');
            s.push_str(&v.map(|x| x.to_string()).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

fn models_csv(report: &Report, strategy: Strategy) -> Option<String> {
    let r = report.strategy(strategy)?;
    let rows: Vec<_> = if strategy == Strategy::Global {
        vec![("global".to_string(), r.models[0].clone())]
    } else {
        r.models.iter().enumerate().map(|(i, m)| (i.to_string(), m.clone())).collect()
    };
    Some(models_to_csv(&rows))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::invalid(format!("serialization: {e}")))
}

/// Every output file of `report` for `formats`, as (file name, contents).
fn render(report: &Report, formats: &[Format]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    if formats.contains(&Format::Csv) {
        files.push(("summary.csv".to_string(), summary_csv(report)));
        files.push(("accuracy_per_node.csv".to_string(), per_node_csv(report)));
        files.push(("rounds_to_accuracy.csv".to_string(), rounds_csv(report)));
        for r in &report.strategies {
            if let Some(t) = &r.trace {
                files.push((format!("trace_{}.csv", r.strategy), t.to_csv_string()));
            }
            if let Some(m) = models_csv(report, r.strategy) {
                files.push((format!("models_{}.csv", r.strategy), m));
            }
        }
        if let Some(c) = &report.clusters {
            files.push(("clusters.csv".to_string(), clusters_to_csv(&c.assignment)));
        }
    }
    if formats.contains(&Format::Json) {
        files.push(("report.json".to_string(), report.to_json()?));
        files.push(("config_echo.json".to_string(), json(&report.config)?));
    }
    Ok(files)
}

/// Writes the report files into `dir` and returns their paths. If any write
/// fails, files written by this call are removed again.
pub fn emit_report(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    let files = render(report, formats)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, text) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, text) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(Error::io(&path, e));
        }
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
