//! Plain-text cohort layout.
//!
//! ```text
//! <dir>/expression.csv     patient_id,<gene symbols...>
//! <dir>/survival.csv       patient_id,time,event,site
//! <dir>/clinical.csv       patient_id,age,grade
//! <dir>/pathways.gmt       gene sets over the expression columns
//! <dir>/patches/<id>.csv   f0,...,f{D_p-1}   one row per patch
//! <dir>/planted.csv        patient_id,true_risk,shared_*,gene_*,image_*  (synthetic only)
//! ```
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! exact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    load_gene_sets, write_gene_sets, Cohort, Patient, PlantedFactors, PlantedPatient,
    SurvivalRecord, CLINICAL_COLUMNS,
};
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

pub const EXPRESSION_FILE: &str = "expression.csv";
pub const SURVIVAL_FILE: &str = "survival.csv";
pub const CLINICAL_FILE: &str = "clinical.csv";
pub const PATHWAYS_FILE: &str = "pathways.gmt";
pub const PATCH_DIR: &str = "patches";
pub const PLANTED_FILE: &str = "planted.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

impl Table {
    fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header.len() < expected.len()
            || self.header.iter().zip(expected).any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: self.path.clone(),
                line: 1,
                msg: format!("header must start with {}", expected.join(",")),
            });
        }
        Ok(())
    }

    fn parse_f64(&self, line: usize, s: &str) -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::Parse {
            path: self.path.clone(),
            line,
            msg: format!("not a number: {s:?}"),
        })
    }

    fn floats(&self, line: usize, cells: &[String]) -> Result<Vec<f64>> {
        cells.iter().map(|c| self.parse_f64(line, c)).collect()
    }
}

/// Writes the cohort under `dir`, creating it if needed.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    let patch_dir = dir.join(PATCH_DIR);
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;

    let mut header = vec!["patient_id".to_string()];
    header.extend(cohort.gene_names.iter().cloned());
    write_rows(
        &dir.join(EXPRESSION_FILE),
        &header,
        cohort.patients.iter().map(|p| {
            std::iter::once(p.id.clone()).chain(p.expression.iter().map(|v| fmt(*v))).collect()
        }),
    )?;

    write_rows(
        &dir.join(SURVIVAL_FILE),
        &["patient_id", "time", "event", "site"].map(String::from),
        cohort.patients.iter().map(|p| {
            vec![
                p.id.clone(),
                fmt(p.survival.time),
                u8::from(p.survival.event).to_string(),
                p.site.to_string(),
            ]
        }),
    )?;

    let mut header = vec!["patient_id".to_string()];
    header.extend(CLINICAL_COLUMNS.iter().map(|s| s.to_string()));
    write_rows(
        &dir.join(CLINICAL_FILE),
        &header,
        cohort.patients.iter().map(|p| {
            std::iter::once(p.id.clone()).chain(p.clinical.iter().map(|v| fmt(*v))).collect()
        }),
    )?;

    write_gene_sets(&dir.join(PATHWAYS_FILE), &cohort.membership, &cohort.gene_names)?;

    for p in &cohort.patients {
        let header: Vec<String> = (0..p.patches.cols()).map(|d| format!("f{d}")).collect();
        write_rows(
            &patch_dir.join(format!("{}.csv", p.id)),
            &header,
            p.patches.iter_rows().map(|r| r.iter().map(|v| fmt(*v)).collect()),
        )?;
    }

    if let Some(planted) = &cohort.planted {
        let first = &planted.patients[0];
        let mut header = vec!["patient_id".to_string(), "true_risk".to_string()];
        header.extend((0..first.shared.len()).map(|i| format!("shared_{i}")));
        header.extend((0..first.gene_specific.len()).map(|i| format!("gene_{i}")));
        header.extend((0..first.image_specific.len()).map(|i| format!("image_{i}")));
        write_rows(
            &dir.join(PLANTED_FILE),
            &header,
            cohort.patients.iter().zip(&planted.patients).map(|(p, f)| {
                let mut row = vec![p.id.clone(), fmt(f.true_risk)];
                row.extend(
                    f.shared
                        .iter()
                        .chain(&f.gene_specific)
                        .chain(&f.image_specific)
                        .map(|v| fmt(*v)),
                );
                row
            }),
        )?;
    }
    Ok(())
}

fn index_rows<'a>(table: &'a Table, ids: &[String]) -> Result<Vec<&'a (usize, Vec<String>)>> {
    let by_id: HashMap<&str, &(usize, Vec<String>)> =
        table.rows.iter().map(|r| (r.1[0].as_str(), r)).collect();
    if by_id.len() != table.rows.len() {
        return Err(Error::Validation(format!("{}: duplicate patient ids", table.path.display())));
    }
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::Validation(format!("{}: missing patient {id}", table.path.display()))
            })
        })
        .collect()
}

fn read_planted(path: &Path, ids: &[String]) -> Result<Option<PlantedFactors>> {
    if !path.exists() {
        return Ok(None);
    }
    let t = read_table(path)?;
    t.expect_header(&["patient_id", "true_risk"])?;
    let count = |prefix: &str| t.header.iter().filter(|h| h.starts_with(prefix)).count();
    let (ns, ng, ni) = (count("shared_"), count("gene_"), count("image_"));
    let mut patients = Vec::with_capacity(ids.len());
    for (line, row) in index_rows(&t, ids)? {
        let vals = t.floats(*line, &row[1..])?;
        if vals.len() != 1 + ns + ng + ni {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: "row width does not match header".into(),
            });
        }
        patients.push(PlantedPatient {
            true_risk: vals[0],
            shared: vals[1..1 + ns].to_vec(),
            gene_specific: vals[1 + ns..1 + ns + ng].to_vec(),
            image_specific: vals[1 + ns + ng..].to_vec(),
        });
    }
    Ok(Some(PlantedFactors {
        patients,
        censor_horizon: None,
    }))
}

/// Reads a cohort written by [`write_cohort`] (or assembled by hand in the
/// same layout). Patient order follows `expression.csv`.
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let expr = read_table(&dir.join(EXPRESSION_FILE))?;
    expr.expect_header(&["patient_id"])?;
    let gene_names: Vec<String> = expr.header[1..].to_vec();
    let ids: Vec<String> = expr.rows.iter().map(|r| r.1[0].clone()).collect();

    let surv = read_table(&dir.join(SURVIVAL_FILE))?;
    surv.expect_header(&["patient_id", "time", "event", "site"])?;
    let surv_rows = index_rows(&surv, &ids)?;

    let clin = read_table(&dir.join(CLINICAL_FILE))?;
    let mut clin_header = vec!["patient_id"];
    clin_header.extend(CLINICAL_COLUMNS);
    clin.expect_header(&clin_header)?;
    let clin_rows = index_rows(&clin, &ids)?;

    let membership = load_gene_sets(&dir.join(PATHWAYS_FILE), &gene_names)?.membership;

    let mut patients = Vec::with_capacity(ids.len());
    for (i, (line, row)) in expr.rows.iter().enumerate() {
        let expression = expr.floats(*line, &row[1..])?;
        let (sline, srow) = surv_rows[i];
        let time = surv.parse_f64(*sline, &srow[1])?;
        let event = match srow[2].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: surv.path.clone(),
                    line: *sline,
                    msg: format!("event must be 0 or 1, got {other:?}"),
                })
            }
        };
        let site = srow[3].trim().parse::<u32>().map_err(|_| Error::Parse {
            path: surv.path.clone(),
            line: *sline,
            msg: format!("site must be a non-negative integer, got {:?}", srow[3]),
        })?;
        let (cline, crow) = clin_rows[i];
        let clinical = clin.floats(*cline, &crow[1..])?;

        let bag_path = dir.join(PATCH_DIR).join(format!("{}.csv", ids[i]));
        let bag = read_table(&bag_path)?;
        let mut data = Vec::with_capacity(bag.rows.len() * bag.header.len());
        for (bline, brow) in &bag.rows {
            if brow.len() != bag.header.len() {
                return Err(Error::Parse {
                    path: bag_path.clone(),
                    line: *bline,
                    msg: "row width does not match header".into(),
                });
            }
            data.extend(bag.floats(*bline, brow)?);
        }
        let patches = Tensor::new(bag.rows.len(), bag.header.len(), data)?;
        patients.push(Patient {
            id: ids[i].clone(),
            site,
            expression,
            patches,
            survival: SurvivalRecord { time, event },
            clinical,
        });
    }
    let planted = read_planted(&dir.join(PLANTED_FILE), &ids)?;
    let cohort = Cohort {
        gene_names,
        membership,
        patients,
        planted,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Fingerprint of the parts of a cohort a trained model depends on: the
/// gene panel, the pathway membership and the patch feature width.
pub fn cohort_signature(cohort: &Cohort) -> String {
    let mut h = Sha256::new();
    for g in &cohort.gene_names {
        h.update(g.as_bytes());
        h.update([0u8]);
    }
    h.update(super::format_gmt(&cohort.membership, &cohort.gene_names).as_bytes());
    h.update((cohort.patch_dim() as u64).to_le_bytes());
    hex::encode(h.finalize())
}
