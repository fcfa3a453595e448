//! Cross-validation and attribution report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, FoldOutcome};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::explain::{BaselineKind, Shares, SHARE_RECIPE};
use crate::losses::DcForm;

pub const CROSSVAL_SCHEMA: &str = "dimaf.crossval_report";
pub const EXPLAIN_SCHEMA: &str = "dimaf.explain_report";
pub const REPORT_VERSION: u32 = 1;
pub const DC_EVALUATION: &str = "full-test-set";

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub c_index: f64,
    pub clinical_c_index: Option<f64>,
    pub d1: f64,
    pub d2: f64,
    pub dc_total: f64,
    pub history: Vec<EpochStats>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub c_index: Stat,
    pub clinical_c_index: Option<Stat>,
    pub d1: Stat,
    pub d2: Stat,
    pub dc_total: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub schema: String,
    pub schema_version: u32,
    pub variant: String,
    pub lambda_surv: f64,
    pub lambda_dis: f64,
    pub dc_form: DcForm,
    pub dc_evaluation: String,
    pub seed: u64,
    pub n_patients: usize,
    pub config: RunConfig,
    pub folds: Vec<FoldRecord>,
    pub summary: CrossvalSummary,
}

impl CrossvalReport {
    pub fn new(cfg: &RunConfig, n_patients: usize, folds: Vec<FoldRecord>) -> Self {
        let col = |f: fn(&FoldRecord) -> f64| Stat::of(&folds.iter().map(f).collect::<Vec<_>>());
        let clinical: Option<Vec<f64>> = folds.iter().map(|f| f.clinical_c_index).collect();
        let summary = CrossvalSummary {
            c_index: col(|f| f.c_index),
            clinical_c_index: clinical.map(|v| Stat::of(&v)),
            d1: col(|f| f.d1),
            d2: col(|f| f.d2),
            dc_total: col(|f| f.dc_total),
        };
        CrossvalReport {
            schema: CROSSVAL_SCHEMA.into(),
            schema_version: REPORT_VERSION,
            variant: cfg.train.variant().into(),
            lambda_surv: cfg.train.lambda_surv,
            lambda_dis: cfg.train.lambda_dis,
            dc_form: cfg.train.dc_form,
            dc_evaluation: DC_EVALUATION.into(),
            seed: cfg.train.seed,
            n_patients,
            config: cfg.clone(),
            folds,
            summary,
        }
    }

    /// CSV with one row per fold followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,variant,c_index,clinical_c_index,d1,d2,dc_total\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.fold,
                self.variant,
                f.c_index,
                opt(f.clinical_c_index),
                f.d1,
                f.d2,
                f.dc_total
            ));
        }
        let s = &self.summary;
        for (label, pick) in [("mean", (|st: &Stat| st.mean) as fn(&Stat) -> f64), ("std", |st: &Stat| st.std)] {
            out.push_str(&format!(
                "{label},{},{},{},{},{},{}\n",
                self.variant,
                pick(&s.c_index),
                opt(s.clinical_c_index.as_ref().map(pick)),
                pick(&s.d1),
                pick(&s.d2),
                pick(&s.dc_total)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainFold {
    pub fold: usize,
    pub shares: Shares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSummary {
    /// Indexed `gg, hh, hg, gh`.
    pub blocks: [Stat; 4],
    pub specific: Stat,
    pub shared: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub schema: String,
    pub schema_version: u32,
    pub variant: String,
    pub baseline: BaselineKind,
    pub recipe: String,
    pub n_excluded: usize,
    pub folds: Vec<ExplainFold>,
    pub summary: ShareSummary,
}

impl ExplainReport {
    pub fn new(variant: &str, baseline: BaselineKind, folds: Vec<ExplainFold>) -> Self {
        let col = |f: &dyn Fn(&Shares) -> f64| Stat::of(&folds.iter().map(|x| f(&x.shares)).collect::<Vec<_>>());
        let summary = ShareSummary {
            blocks: [0, 1, 2, 3].map(|k| col(&|s: &Shares| s.blocks[k])),
            specific: col(&|s: &Shares| s.specific),
            shared: col(&|s: &Shares| s.shared),
        };
        ExplainReport {
            schema: EXPLAIN_SCHEMA.into(),
            schema_version: REPORT_VERSION,
            variant: variant.into(),
            baseline,
            recipe: SHARE_RECIPE.into(),
            n_excluded: folds.iter().map(|f| f.shares.n_excluded).sum(),
            folds,
            summary,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,variant,gg,hh,hg,gh,specific,shared,n_patients,n_excluded\n");
        for f in &self.folds {
            let s = &f.shares;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                f.fold, self.variant, s.blocks[0], s.blocks[1], s.blocks[2], s.blocks[3], s.specific, s.shared, s.n_patients, s.n_excluded
            ));
        }
        let s = &self.summary;
        for (label, pick) in [("mean", (|st: &Stat| st.mean) as fn(&Stat) -> f64), ("std", |st: &Stat| st.std)] {
            out.push_str(&format!(
                "{label},{},{},{},{},{},{},{},,\n",
                self.variant,
                pick(&s.blocks[0]),
                pick(&s.blocks[1]),
                pick(&s.blocks[2]),
                pick(&s.blocks[3]),
                pick(&s.specific),
                pick(&s.shared)
            ));
        }
        out
    }
}

pub fn fold_record(o: &FoldOutcome, checkpoint: Option<String>) -> FoldRecord {
    FoldRecord {
        fold: o.fold,
        n_train: o.train_ids.len(),
        n_test: o.test_ids.len(),
        c_index: o.c_index,
        clinical_c_index: o.clinical_c_index,
        d1: o.dc.d1,
        d2: o.dc.d2,
        dc_total: o.dc.total,
        history: o.history.clone(),
        checkpoint,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Any report file, dispatched on its `schema` field.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyReport {
    Crossval(CrossvalReport),
    Explain(ExplainReport),
}

#[derive(Deserialize)]
struct Header {
    schema: String,
    schema_version: u32,
}

pub fn parse_report(text: &str, source: &Path) -> Result<AnyReport> {
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::Validation(format!("{}: not a report file: {e}", source.display())))?;
    if header.schema_version != REPORT_VERSION {
        return Err(Error::Version(format!(
            "{}: {} schema version {} is not supported (expected {REPORT_VERSION}); regenerate the report with this build",
            source.display(),
            header.schema,
            header.schema_version
        )));
    }
    match header.schema.as_str() {
        CROSSVAL_SCHEMA => Ok(AnyReport::Crossval(serde_json::from_str(text)?)),
        EXPLAIN_SCHEMA => Ok(AnyReport::Explain(serde_json::from_str(text)?)),
        other => Err(Error::Validation(format!("{}: unknown report schema {other}", source.display()))),
    }
}

pub fn read_report(path: &Path) -> Result<AnyReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}

pub fn write_crossval_report(dir: &Path, report: &CrossvalReport) -> Result<()> {
    write_json(&dir.join("crossval_report.json"), report)?;
    write_text(&dir.join("crossval_report.csv"), &report.to_csv())
}

pub fn write_explain_report(dir: &Path, report: &ExplainReport) -> Result<()> {
    write_json(&dir.join("explain_report.json"), report)?;
    write_text(&dir.join("explain_report.csv"), &report.to_csv())
}
