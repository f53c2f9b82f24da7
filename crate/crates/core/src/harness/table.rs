use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dataset::Split;
use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str = "seed,pipeline,ensemble_size,model,split,metric,value,status";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pipeline {
    /// Bootstrapped ensemble with LSTM fusion.
    Rrde,
    /// One network trained on every training face.
    ResnetAll,
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Rrde => "rrde",
            Pipeline::ResnetAll => "resnet_all",
        })
    }
}

impl FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rrde" => Ok(Pipeline::Rrde),
            "resnet_all" => Ok(Pipeline::ResnetAll),
            other => Err(Error::Format(format!("unknown pipeline `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Accuracy,
    Rmse,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Rmse => "rmse",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "rmse" => Ok(Metric::Rmse),
            other => Err(Error::Format(format!("unknown metric `{other}`"))),
        }
    }
}

/// Model names used in the `model` column besides the group models.
pub const MODEL_VOTE: &str = "vote";
pub const MODEL_FACE: &str = "face";

/// One measured cell. `value` is `None` when the stage producing it failed.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub pipeline: Pipeline,
    pub ensemble_size: usize,
    pub model: String,
    pub split: Split,
    pub metric: Metric,
    pub value: Option<f64>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.value.is_some()
    }

    fn key(&self) -> CellKey {
        CellKey {
            pipeline: self.pipeline,
            ensemble_size: self.ensemble_size,
            model: self.model.clone(),
            split: self.split,
            metric: self.metric,
        }
    }
}

/// Identifies a cell across seeds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub pipeline: Pipeline,
    pub ensemble_size: usize,
    pub model: String,
    pub split: Split,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub key: CellKey,
    /// Seeds contributing a value.
    pub count: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; zero for a single value.
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn sanitize(msg: &str) -> String {
    msg.chars().map(|c| if c == ',' || c == '\n' || c == '\r' { ';' } else { c }).collect()
}

impl ResultTable {
    pub fn new(mut rows: Vec<ResultRow>) -> Result<Self> {
        for r in &rows {
            if let Some(v) = r.value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Format(format!("result value {v} must be finite and >= 0")));
                }
            }
        }
        rows.sort_by(|a, b| (a.seed, a.key()).cmp(&(b.seed, b.key())));
        Ok(ResultTable { rows })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn failed(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| !r.ok())
    }

    /// Values of matching rows across seeds, failures skipped.
    pub fn values(
        &self,
        pipeline: Pipeline,
        ensemble_size: usize,
        model: &str,
        split: Split,
        metric: Metric,
    ) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                r.pipeline == pipeline
                    && r.ensemble_size == ensemble_size
                    && r.model == model
                    && r.split == split
                    && r.metric == metric
            })
            .filter_map(|r| r.value)
            .collect()
    }

    pub fn mean(
        &self,
        pipeline: Pipeline,
        ensemble_size: usize,
        model: &str,
        split: Split,
        metric: Metric,
    ) -> Option<f64> {
        let v = self.values(pipeline, ensemble_size, model, split, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summarize(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<CellKey, (Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = cells.entry(r.key()).or_default();
            match r.value {
                Some(v) => e.0.push(v),
                None => e.1 += 1,
            }
        }
        cells
            .into_iter()
            .map(|(key, (vals, failed))| {
                let n = vals.len();
                let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
                let sd = mean.map(|m| {
                    if n < 2 {
                        0.0
                    } else {
                        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    }
                });
                CellSummary { key, count: n, failed, mean, sd }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULTS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {}", sanitize(e)),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.seed, r.pipeline, r.ensemble_size, r.model, r.split, r.metric, value, status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(RESULTS_HEADER) {
            return Err(Error::Format("results file lacks the expected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("results line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.splitn(8, ',').collect();
            if f.len() != 8 {
                return Err(bad("column count"));
            }
            let value = if f[6].is_empty() { None } else { Some(f[6].parse().map_err(|_| bad("value"))?) };
            let error = match f[7] {
                "ok" => None,
                s => Some(s.strip_prefix("failed: ").ok_or_else(|| bad("status"))?.to_string()),
            };
            rows.push(ResultRow {
                seed: f[0].parse().map_err(|_| bad("seed"))?,
                pipeline: f[1].parse()?,
                ensemble_size: f[2].parse().map_err(|_| bad("ensemble_size"))?,
                model: f[3].to_string(),
                split: f[4].parse()?,
                metric: f[5].parse()?,
                value,
                error,
            });
        }
        ResultTable::new(rows)
    }
}
