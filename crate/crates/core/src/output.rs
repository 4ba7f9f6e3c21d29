//! Run directory layout and the text formats written into it.
//!
//! ```text
//! <run>/config.json
//! <run>/summary.txt
//! <run>/iter_<n>/refset.json
//! <run>/iter_<n>/cache.bin
//! <run>/iter_<n>/decode_chain<c>.json
//! <run>/iter_<n>/diagnostics.csv
//! <run>/iter_<n>/metrics.json         mean over chains
//! <run>/iter_<n>/metrics_chains.csv   one row per chain
//! <run>/iter_<n>/mapping.csv          best chain
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::SegmentSpan;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::pipeline::{mean_metrics, ChainMetrics, IterationResult};
use crate::segmenter::{Diagnostic, SamplerResult, Segmentation};

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_decode(path: &Path) -> Result<Vec<Segmentation>> {
    read_json(path)
}

pub fn read_reference_set(path: &Path) -> Result<Vec<SegmentSpan>> {
    read_json(path)
}

pub fn diagnostics_csv<'a>(rows: impl IntoIterator<Item = &'a Diagnostic>) -> String {
    let mut out = String::from("iteration,chain,inv_temp,occupied_components,total_log_score\n");
    for d in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            d.iteration, d.chain, d.inv_temp, d.occupied_components, d.total_log_score
        );
    }
    out
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (usize, &'a MetricsReport)>) -> String {
    let mut out = String::from(
        "chain,purity,wer,substitutions,deletions,insertions,n_tokens,boundary_precision,boundary_recall,boundary_f,clusters_covering_90pct\n",
    );
    for (c, m) in rows {
        let _ = writeln!(
            out,
            "{c},{},{},{},{},{},{},{},{},{},{}",
            m.purity,
            m.wer,
            m.substitutions,
            m.deletions,
            m.insertions,
            m.n_tokens,
            m.boundary_precision,
            m.boundary_recall,
            m.boundary_f,
            m.clusters_covering_90pct
        );
    }
    out
}

pub fn iteration_dir(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join(format!("iter_{iteration}"))
}

/// Decodes, diagnostics and, when given, metrics of one sampler run.
pub fn write_sampler(dir: &Path, sampler: &SamplerResult, metrics: Option<&[ChainMetrics]>) -> Result<()> {
    for c in &sampler.chains {
        write_file(&dir.join(format!("decode_chain{}.json", c.chain)), to_json(&c.segmentations))?;
    }
    write_file(
        &dir.join("diagnostics.csv"),
        diagnostics_csv(sampler.chains.iter().flat_map(|c| &c.diagnostics)),
    )?;
    if let Some(metrics) = metrics {
        write_file(&dir.join("metrics.json"), to_json(&mean_metrics(metrics)))?;
        write_file(
            &dir.join("metrics_chains.csv"),
            metrics_csv(metrics.iter().enumerate().map(|(c, m)| (c, &m.report))),
        )?;
        write_file(&dir.join("mapping.csv"), metrics[sampler.best_chain()].mapping.to_csv())?;
    }
    Ok(())
}

/// Writes every artifact of one pipeline iteration.
pub fn write_iteration(run_dir: &Path, result: &IterationResult) -> Result<PathBuf> {
    let dir = iteration_dir(run_dir, result.iteration);
    write_file(&dir.join("refset.json"), to_json(&result.reference))?;
    result.cache.write(&dir.join("cache.bin"))?;
    write_sampler(&dir, &result.sampler, result.metrics.as_deref())?;
    Ok(dir)
}

/// Per-iteration metric table, one row per metric and one column per
/// iteration; metrics are means over chains.
pub fn summary_table(results: &[IterationResult]) -> String {
    let means: Vec<Option<MetricsReport>> = results.iter().map(IterationResult::mean_metrics).collect();
    let mut out = String::from("metric");
    for r in results {
        let _ = write!(out, "\titer {}", r.iteration);
    }
    out.push('\n');
    type Row = (&'static str, fn(&MetricsReport) -> String);
    let rows: [Row; 4] = [
        ("WER (%)", |m| format!("{:.1}", 100.0 * m.wer)),
        ("purity (%)", |m| format!("{:.1}", 100.0 * m.purity)),
        ("boundary F (%)", |m| format!("{:.1}", 100.0 * m.boundary_f)),
        ("clusters covering 90%", |m| m.clusters_covering_90pct.to_string()),
    ];
    for (name, cell) in rows {
        out.push_str(name);
        for m in &means {
            out.push('\t');
            out.push_str(&m.as_ref().map_or_else(|| "-".to_string(), cell));
        }
        out.push('\n');
    }
    let _ = write!(out, "occupied components");
    for r in results {
        let occ: Vec<String> = r
            .sampler
            .chains
            .iter()
            .map(|c| c.model.occupied().to_string())
            .collect();
        let _ = write!(out, "\t{}", occ.join("/"));
    }
    out.push('\n');
    out
}
