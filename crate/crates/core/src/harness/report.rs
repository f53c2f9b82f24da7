use std::fs;
use std::path::{Path, PathBuf};

use super::table::{CellSummary, Metric, ResultTable, MODEL_FACE, MODEL_VOTE};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::gem::GemKind;

/// Challenge baseline on the validation split.
pub const REFERENCE_BASELINE_RMSE: f64 = 0.78;
/// Final five-network result.
pub const REFERENCE_FINAL_RMSE: f64 = 0.55;
/// Best group-model cell: five networks, weighted mean-encoding.
pub const REFERENCE_BEST_CELL_RMSE: f64 = 0.5479;

pub const SUMMARY_HEADER: &str = "pipeline,ensemble_size,model,split,metric,seeds,failed,mean,sd";
pub const PLOT_HEADER: &str = "pipeline,model,ensemble_size,seeds,mean,sd";

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Vote accuracy, face-level RMSE and group-level RMSE against ensemble size.
pub const PLOT_FILES: [&str; 3] = ["plotdata_fig2.csv", "plotdata_fig3.csv", "plotdata_fig4.csv"];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn summary_csv(table: &ResultTable) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in table.summarize() {
        let k = &s.key;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            k.pipeline,
            k.ensemble_size,
            k.model,
            k.split,
            k.metric,
            s.count,
            s.failed,
            opt(s.mean),
            opt(s.sd)
        ));
    }
    for (size, model, value) in [
        ("", "challenge_baseline", REFERENCE_BASELINE_RMSE),
        ("5", "final", REFERENCE_FINAL_RMSE),
        ("5", GemKind::WeightedMeanEncoding.name(), REFERENCE_BEST_CELL_RMSE),
    ] {
        out.push_str(&format!("reference,{size},{model},validation,rmse,,,{value},\n"));
    }
    out
}

fn plot_csv(cells: &[CellSummary], keep: impl Fn(&CellSummary) -> bool) -> String {
    let mut out = format!("{PLOT_HEADER}\n");
    for s in cells.iter().filter(|s| s.key.split == Split::Validation && keep(s)) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.key.pipeline,
            s.key.model,
            s.key.ensemble_size,
            s.count,
            opt(s.mean),
            opt(s.sd)
        ));
    }
    out
}

/// Plot tables in `PLOT_FILES` order.
pub fn plot_csvs(table: &ResultTable) -> [String; 3] {
    let cells = table.summarize();
    let is_gem = |m: &str| GemKind::ALL.iter().any(|g| g.name() == m);
    [
        plot_csv(&cells, |s| s.key.model == MODEL_VOTE && s.key.metric == Metric::Accuracy),
        plot_csv(&cells, |s| s.key.model == MODEL_FACE && s.key.metric == Metric::Rmse),
        plot_csv(&cells, |s| is_gem(&s.key.model) && s.key.metric == Metric::Rmse),
    ]
}

/// Writes the results, summary and plot tables; returns the paths written.
pub fn emit_report(table: &ResultTable, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if table.is_empty() {
        return Err(Error::Empty("result table"));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [fig2, fig3, fig4] = plot_csvs(table);
    let files = [
        (RESULTS_FILE, table.to_csv()),
        (SUMMARY_FILE, summary_csv(table)),
        (PLOT_FILES[0], fig2),
        (PLOT_FILES[1], fig3),
        (PLOT_FILES[2], fig4),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::table::{Pipeline, ResultRow};

    fn one_row() -> ResultTable {
        ResultTable::new(vec![ResultRow {
            seed: 0,
            pipeline: Pipeline::Rrde,
            ensemble_size: 5,
            model: "weighted_mean_encoding".into(),
            split: Split::Validation,
            metric: Metric::Rmse,
            value: Some(0.625),
            error: None,
        }])
        .unwrap()
    }

    #[test]
    fn one_row_table_gives_header_plus_one_row() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&one_row(), dir.path()).unwrap();
        let results = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(results.lines().count(), 2);
        let fig4 = fs::read_to_string(dir.path().join(PLOT_FILES[2])).unwrap();
        assert_eq!(fig4, format!("{PLOT_HEADER}\nrrde,weighted_mean_encoding,5,1,0.625,0\n"));
        let fig2 = fs::read_to_string(dir.path().join(PLOT_FILES[0])).unwrap();
        assert_eq!(fig2.lines().count(), 1);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let t = one_row();
        let first: Vec<Vec<u8>> = emit_report(&t, dir.path()).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        let second: Vec<Vec<u8>> = emit_report(&t, dir.path()).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn summary_embeds_reference_constants() {
        let s = summary_csv(&one_row());
        assert!(s.contains("reference,,challenge_baseline,validation,rmse,,,0.78,"));
        assert!(s.contains("reference,5,final,validation,rmse,,,0.55,"));
        assert!(s.contains("reference,5,weighted_mean_encoding,validation,rmse,,,0.5479,"));
    }

    #[test]
    fn empty_table_and_unwritable_dir_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&ResultTable::default(), dir.path()).is_err());
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(emit_report(&one_row(), file.join("sub")).is_err());
    }
}
