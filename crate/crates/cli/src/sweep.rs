//! `sweep`: the base config over a grid of strategies, bitwidths and seeds,
//! several runs at a time. Each grid point is resolved from the raw base
//! file so that strategy-dependent defaults apply.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::cmd_train;

#[derive(Clone, Debug, Default)]
pub struct SweepArgs {
    pub strategies: Vec<String>,
    pub bits: Vec<u32>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

/// Configs of every grid point. Empty axes keep the base value.
pub fn sweep_configs(base_toml: &str, args: &SweepArgs) -> CliResult<Vec<ExperimentConfig>> {
    let base: toml::Table = toml::from_str(base_toml).map_err(|e| CliError::Config(e.to_string()))?;
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    let mut out = Vec::new();
    for strategy in axis(&args.strategies) {
        for bits in axis(&args.bits) {
            for seed in axis(&args.seeds) {
                let mut t = base.clone();
                let train = t
                    .entry("train")
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::Config("[train] must be a table".into()))?;
                if let Some(s) = &strategy {
                    train.insert("strategy".into(), toml::Value::String(s.clone()));
                }
                if let Some(k) = bits {
                    train.insert("bits".into(), toml::Value::Integer(i64::from(k)));
                }
                if let Some(s) = seed {
                    let s = i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} too large")))?;
                    train.insert("seed".into(), toml::Value::Integer(s));
                }
                let text = toml::to_string(&t).map_err(|e| CliError::Config(e.to_string()))?;
                let cfg = ExperimentConfig::from_toml(&text)?;
                if !out.iter().any(|c: &ExperimentConfig| c.default_run_id() == cfg.default_run_id()) {
                    out.push(cfg);
                }
            }
        }
    }
    Ok(out)
}

/// Runs every grid point in `<outdir>/<run-id>`, `jobs` at a time.
pub fn cmd_sweep(base_toml: &str, args: &SweepArgs, outdir: &Path) -> CliResult<Vec<PathBuf>> {
    let configs = sweep_configs(base_toml, args)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, CliResult<PathBuf>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..args.jobs.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = cmd_train(cfg, outdir, None).map(|o| o.dir);
                results.lock().expect("no panics while holding the lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("threads joined");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_resolves_strategy_defaults() {
        let base = "[task]\nname = \"copy\"\n[train]\nseed = 3\n";
        let args = SweepArgs {
            strategies: vec!["ste_bjorck".into(), "ste_projunn".into()],
            bits: vec![4, 6],
            seeds: vec![],
            jobs: 1,
        };
        let cfgs = sweep_configs(base, &args).unwrap();
        assert_eq!(cfgs.len(), 4);
        assert!(cfgs.iter().all(|c| c.train.seed == 3));
        let pj = cfgs.iter().find(|c| c.default_run_id() == "copy-ste_projunn-k6-s3").unwrap();
        assert_eq!(pj.train.lr, 7e-4);
        let bj = cfgs.iter().find(|c| c.default_run_id() == "copy-ste_bjorck-k4-s3").unwrap();
        assert_eq!(bj.train.lr, 1e-4);
    }
}
