//! Grid sweeps over the selection threshold and the decay factor.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CsnError, Result};
use crate::pipeline::{run_training, Corpus, MetricsReport};
use crate::train::EpochRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Eta,
}

impl SweepParam {
    pub fn apply(self, config: &mut RunConfig, value: f64) {
        match self {
            Self::Gamma => config.selection.gamma = value,
            Self::Eta => config.selection.eta = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gamma => "gamma",
            Self::Eta => "eta",
        })
    }
}

impl FromStr for SweepParam {
    type Err = CsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "eta" => Ok(Self::Eta),
            other => Err(CsnError::Config(format!("unknown sweep parameter {other:?} (expected gamma or eta)"))),
        }
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CsnError::Config(format!("bad grid value {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(CsnError::Config("empty grid".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    /// Test metrics of every seed, in seed order.
    pub runs: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

pub const METRICS: [&str; 3] = ["r_at_1", "r_at_2", "r_at_5"];

impl SweepTable {
    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Tab-separated table of seed-averaged test metrics.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tr_at_1\tr_at_2\tr_at_5\tseeds\n", self.param);
        for r in &self.rows {
            out += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                r.value,
                r.r_at_1,
                r.r_at_2,
                r.r_at_5,
                r.runs.len()
            );
        }
        out
    }

    /// Two-column `value metric` text for one metric.
    pub fn plot_data(&self, metric: &str) -> String {
        self.rows
            .iter()
            .map(|r| {
                let y = match metric {
                    "r_at_1" => r.r_at_1,
                    "r_at_2" => r.r_at_2,
                    _ => r.r_at_5,
                };
                format!("{} {:.6}\n", r.value, y)
            })
            .collect()
    }

    /// Writes `sweep_<param>.tsv` and one `sweep_<param>_<metric>.dat` per
    /// metric; returns the table path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CsnError::io(dir, e))?;
        let table = dir.join(format!("sweep_{}.tsv", self.param));
        fs::write(&table, self.to_tsv()).map_err(|e| CsnError::io(&table, e))?;
        for metric in METRICS {
            let path = dir.join(format!("sweep_{}_{metric}.dat", self.param));
            fs::write(&path, self.plot_data(metric)).map_err(|e| CsnError::io(&path, e))?;
        }
        Ok(table)
    }
}

/// Subdirectory of one sweep run.
pub fn run_dir(base: &Path, param: SweepParam, value: f64, seed: u64) -> PathBuf {
    base.join(format!("{param}={value}")).join(format!("seed={seed}"))
}

/// Trains one model per grid value and seed on the same corpus and averages
/// the test metrics over seeds.
pub fn sweep(
    base: &RunConfig,
    corpus: &Corpus,
    param: SweepParam,
    grid: &[f64],
    seeds: &[u64],
    out_dir: &Path,
    mut on_epoch: impl FnMut(f64, u64, &EpochRecord),
) -> Result<SweepTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(CsnError::Config("sweep grid and seed list must be non-empty".into()));
    }
    if corpus.test.is_empty() {
        return Err(CsnError::EmptyCorpus);
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            param.apply(&mut config, value);
            config.seed = seed;
            config.validate()?;
            let dir = run_dir(out_dir, param, value, seed);
            let result = run_training(&config, corpus, &dir, |r| on_epoch(value, seed, r))?;
            runs.push(result.test.expect("test split is non-empty"));
        }
        let mean = |f: fn(&MetricsReport) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
        rows.push(SweepRow {
            value,
            r_at_1: mean(|m| m.r_at_1),
            r_at_2: mean(|m| m.r_at_2),
            r_at_5: mean(|m| m.r_at_5),
            runs,
        });
    }
    Ok(SweepTable { param, rows })
}
