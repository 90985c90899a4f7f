//! Isolated per-node models and one pooled model.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{solve_prox_svm, Dataset, InnerSolveOpts, LabeledSample, LinearModel, LossConfig};

/// One unanchored SVM per node.
pub fn train_local(shards: &[&Dataset], cfg: &LossConfig, opts: &InnerSolveOpts) -> Result<Vec<LinearModel>> {
    cfg.validate()?;
    shards
        .par_iter()
        .enumerate()
        .map(|(t, d)| {
            solve_prox_svm(d, cfg, &[], opts)
                .map(|s| s.model)
                .map_err(|e| Error::invalid(format!("node {t}: {e}")))
        })
        .collect()
}

fn sample_order(a: &LabeledSample, b: &LabeledSample) -> Ordering {
    a.features
        .iter()
        .zip(&b.features)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
        .then(a.label.total_cmp(&b.label))
}

/// One SVM on the union of all shards. Samples are put in a canonical order
/// first, so the result depends only on the multiset of samples.
pub fn train_global(shards: &[&Dataset], cfg: &LossConfig, opts: &InnerSolveOpts) -> Result<LinearModel> {
    cfg.validate()?;
    let pooled = Dataset::concat(shards.iter().copied())?;
    let dim = pooled.dim();
    let mut samples = pooled.into_samples();
    samples.sort_by(sample_order);
    let pooled = Dataset::new(samples, dim)?;
    Ok(solve_prox_svm(&pooled, cfg, &[], opts)?.model)
}

/// `node_id,bias,w_0,..` rows; ids are free-form (`global` for the pooled model).
pub fn models_to_csv(rows: &[(String, LinearModel)]) -> String {
    let dim = rows.first().map_or(0, |(_, m)| m.dim());
    let mut s = String::from("node_id,bias");
    for j in 0..dim {
        s.push_str(&format!(",w_{j}"));
    }
    s.push('\n');
    for (id, m) in rows {
        s.push_str(id);
        s.push_str(&format!(",{:?}", m.bias));
        for w in &m.weights {
            s.push_str(&format!(",{w:?}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_models_csv(text: &str, path: &Path) -> Result<Vec<(String, LinearModel)>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let bad = |row: usize, column: &str, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let header = rdr.headers().map_err(|e| bad(0, "", e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "node_id" || &header[1] != "bias" {
        return Err(bad(0, "", "expected header node_id,bias,w_0,..".into()));
    }
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(r + 1, "", e.to_string()))?;
        let nums = (1..rec.len())
            .map(|c| {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(r + 1, &header[c], format!("{:?}: {e}", &rec[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((rec[0].to_string(), LinearModel::new(nums[1..].to_vec(), nums[0])));
    }
    Ok(out)
}
