//! k-fold cross-validation.

use std::path::Path;

use rayon::prelude::*;

use super::report::{fold_record, write_crossval_report, write_explain_report, CrossvalReport, ExplainFold, ExplainReport};
use super::{blocks_of, run_fold, FoldOutcome};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::Cohort;
use crate::error::{Error, Result};
use crate::explain::{normalized_shares, shapley_blocks};
use crate::model::PatientInput;

/// Runs every fold, in parallel when the thread pool allows. The result of
/// fold `i` is at position `i` whatever the execution order.
pub fn run_folds(cfg: &RunConfig, cohort: &Cohort, k: usize) -> Result<Vec<Result<FoldOutcome>>> {
    cfg.validate()?;
    cohort.validate()?;
    let folds = cohort.split_folds(k, cfg.train.seed)?;
    Ok(folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            run_fold(cfg, cohort, f, i).map_err(|e| Error::Fold {
                fold: i,
                source: Box::new(e),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalOutput {
    pub report: CrossvalReport,
    pub explain: ExplainReport,
    pub outcomes: Vec<FoldOutcome>,
}

/// Full cross-validation; fails on the first failed fold.
pub fn crossval(cfg: &RunConfig, cohort: &Cohort, k: usize) -> Result<CrossvalOutput> {
    let outcomes = run_folds(cfg, cohort, k)?.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(cfg, cohort, outcomes, |_| None))
}

fn assemble(
    cfg: &RunConfig,
    cohort: &Cohort,
    outcomes: Vec<FoldOutcome>,
    checkpoint_of: impl Fn(usize) -> Option<String>,
) -> CrossvalOutput {
    let records = outcomes.iter().map(|o| fold_record(o, checkpoint_of(o.fold))).collect();
    let report = CrossvalReport::new(cfg, cohort.len(), records);
    let explain = ExplainReport::new(
        cfg.train.variant(),
        cfg.explain.baseline,
        outcomes
            .iter()
            .map(|o| ExplainFold {
                fold: o.fold,
                shares: o.shares.clone(),
            })
            .collect(),
    );
    CrossvalOutput {
        report,
        explain,
        outcomes,
    }
}

/// Runs cross-validation and writes checkpoints and reports under `dir`.
/// Successful folds keep their checkpoints even when another fold fails.
pub fn crossval_to_dir(cfg: &RunConfig, cohort: &Cohort, k: usize, dir: &Path) -> Result<CrossvalOutput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results = run_folds(cfg, cohort, k)?;
    let mut outcomes = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => {
                let path = dir.join(checkpoint_name(o.fold));
                Checkpoint::from_outcome(cfg, cohort, &o).save(&path)?;
                outcomes.push(o);
            }
            Err(e) => {
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let out = assemble(cfg, cohort, outcomes, |f| Some(checkpoint_name(f)));
    write_crossval_report(dir, &out.report)?;
    write_explain_report(dir, &out.explain)?;
    Ok(out)
}

pub fn checkpoint_name(fold: usize) -> String {
    format!("fold{fold}_checkpoint.json")
}

/// Recomputes attribution shares for saved checkpoints on their test patients.
pub fn explain_checkpoints(checkpoints: &[Checkpoint], cohort: &Cohort) -> Result<ExplainReport> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Input("no checkpoints to explain".into()))?;
    let mut folds = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        ck.check_cohort(cohort)?;
        let idx: Vec<usize> = ck
            .test_ids
            .iter()
            .map(|id| {
                cohort
                    .patients
                    .iter()
                    .position(|p| &p.id == id)
                    .ok_or_else(|| Error::Validation(format!("checkpoint patient {id} is not in the cohort")))
            })
            .collect::<Result<_>>()?;
        let inputs = ck.features.prepare_all(cohort, &idx)?;
        let refs: Vec<&PatientInput> = inputs.iter().collect();
        let pred = ck.model.predict(&refs)?;
        let attrs: Vec<_> = blocks_of(&pred).iter().map(|z| shapley_blocks(&ck.model, z, &ck.baseline)).collect();
        folds.push(ExplainFold {
            fold: ck.fold,
            shares: normalized_shares(&attrs)?,
        });
    }
    Ok(ExplainReport::new(first.config.train.variant(), first.config.explain.baseline, folds))
}
