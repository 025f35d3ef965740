//! `report`: one row per run directory, as `report.csv` and a markdown
//! table.
//!
//! CSV header: `run_id,task,strategy,k,n_h,epochs,eval_loss,eval_metric,baseline,kparams,kbytes`.

use std::fs::File;
use std::path::Path;

use qornn::numerics::format_g17;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::run::{TrainReport, METRICS_FILE, REPORT_FILE};

pub const REPORT_HEADER: [&str; 11] = [
    "run_id", "task", "strategy", "k", "n_h", "epochs", "eval_loss", "eval_metric", "baseline", "kparams", "kbytes",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<TrainReport>,
}

impl ReportTable {
    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.run_id.clone(),
                r.task.clone(),
                r.strategy.clone(),
                r.bits.map_or_else(|| "FP".to_owned(), |k| k.to_string()),
                r.n_h.to_string(),
                r.epochs.to_string(),
                format_g17(r.eval_loss),
                format_g17(r.eval_metric),
                r.baseline.map_or_else(String::new, format_g17),
                format!("{:.1}", r.model_size.kparams),
                format!("{:.1}", r.model_size.kbytes),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| run | task | strategy | k | n_h | eval loss | metric | kP | kB |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.4e} | {:.4} | {:.1} | {:.1} |\n",
                r.run_id,
                r.task,
                r.strategy,
                r.bits.map_or_else(|| "FP".to_owned(), |k| k.to_string()),
                r.n_h,
                r.eval_loss,
                r.eval_metric,
                r.model_size.kparams,
                r.model_size.kbytes,
            ));
        }
        s
    }
}

pub fn cmd_report(run_dirs: &[impl AsRef<Path>]) -> CliResult<ReportTable> {
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let dir = dir.as_ref();
        for f in [REPORT_FILE, METRICS_FILE] {
            if !dir.join(f).exists() {
                return Err(CliError::MissingData(format!("{} has no {f}", dir.display())));
            }
        }
        let text = std::fs::read_to_string(dir.join(REPORT_FILE))?;
        rows.push(serde_json::from_str(&text)?);
    }
    Ok(ReportTable { rows })
}
