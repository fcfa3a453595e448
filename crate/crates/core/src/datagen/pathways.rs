//! Gene-set membership, GMT files, and pathway tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pathway {
    pub name: String,
    pub genes: Vec<usize>,
}

/// Ordered pathways over a gene panel of fixed width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayMembership {
    n_genes: usize,
    pathways: Vec<Pathway>,
}

impl PathwayMembership {
    pub fn new(n_genes: usize, pathways: Vec<Pathway>) -> Result<Self> {
        if pathways.is_empty() {
            return Err(Error::Membership("no pathways".into()));
        }
        for p in &pathways {
            if p.genes.is_empty() {
                return Err(Error::Membership(format!("pathway {} is empty", p.name)));
            }
            if let Some(g) = p.genes.iter().find(|g| **g >= n_genes) {
                return Err(Error::Membership(format!(
                    "pathway {} references gene {g} but the panel has {n_genes} genes",
                    p.name
                )));
            }
        }
        Ok(PathwayMembership { n_genes, pathways })
    }

    /// Splits `n_genes` into `n_pathways` contiguous blocks of near-equal size.
    pub fn contiguous(n_genes: usize, n_pathways: usize) -> Result<Self> {
        if n_pathways == 0 || n_pathways > n_genes {
            return Err(Error::Config(format!(
                "cannot split {n_genes} genes into {n_pathways} pathways"
            )));
        }
        let pathways = (0..n_pathways)
            .map(|p| {
                let lo = p * n_genes / n_pathways;
                let hi = (p + 1) * n_genes / n_pathways;
                Pathway {
                    name: format!("PATHWAY_{:02}", p + 1),
                    genes: (lo..hi).collect(),
                }
            })
            .collect();
        Self::new(n_genes, pathways)
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn len(&self) -> usize {
        self.pathways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty()
    }

    pub fn pathways(&self) -> &[Pathway] {
        &self.pathways
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pathways.iter().map(|p| p.genes.len()).collect()
    }
}

/// Expression values regrouped per pathway, in membership order.
pub type PathwayTokens = Vec<Vec<f64>>;

/// Token `n` holds the values of pathway `n`'s genes in declared order.
/// Genes shared by several pathways are repeated.
pub fn tokenize_pathways(expression: &[f64], membership: &PathwayMembership) -> Result<PathwayTokens> {
    if expression.len() != membership.n_genes() {
        return Err(Error::Membership(format!(
            "expression has {} genes, membership expects {}",
            expression.len(),
            membership.n_genes()
        )));
    }
    Ok(membership
        .pathways()
        .iter()
        .map(|p| p.genes.iter().map(|&g| expression[g]).collect())
        .collect())
}

/// Result of reading a GMT file against a gene panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedGeneSets {
    pub membership: PathwayMembership,
    /// Symbols that were not on the panel and were dropped.
    pub unknown_symbols: usize,
}

/// Parses GMT text: one gene set per line, `name \t description \t genes…`.
pub fn parse_gmt(text: &str, symbols: &HashMap<String, usize>, n_genes: usize, source: &Path) -> Result<LoadedGeneSets> {
    let mut pathways = Vec::new();
    let mut unknown = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: source.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected at least 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let mut genes = Vec::new();
        for sym in &fields[2..] {
            let sym = sym.trim();
            if sym.is_empty() {
                continue;
            }
            match symbols.get(sym) {
                Some(&idx) => genes.push(idx),
                None => unknown += 1,
            }
        }
        if genes.is_empty() {
            return Err(Error::Validation(format!(
                "gene set {} (line {}) has no genes on the panel",
                fields[0],
                lineno + 1
            )));
        }
        pathways.push(Pathway {
            name: fields[0].to_string(),
            genes,
        });
    }
    if unknown > 0 {
        log::warn!("{}: dropped {unknown} unknown gene symbols", source.display());
    }
    Ok(LoadedGeneSets {
        membership: PathwayMembership::new(n_genes, pathways)?,
        unknown_symbols: unknown,
    })
}

/// Reads a GMT file, mapping symbols through `gene_names` (position = index).
pub fn load_gene_sets(path: &Path, gene_names: &[String]) -> Result<LoadedGeneSets> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let symbols: HashMap<String, usize> =
        gene_names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    parse_gmt(&text, &symbols, gene_names.len(), path)
}

pub fn format_gmt(membership: &PathwayMembership, gene_names: &[String]) -> String {
    let mut out = String::new();
    for p in membership.pathways() {
        let _ = write!(out, "{}\tna", p.name);
        for g in &p.genes {
            let _ = write!(out, "\t{}", gene_names[*g]);
        }
        out.push('\n');
    }
    out
}

pub fn write_gene_sets(path: &Path, membership: &PathwayMembership, gene_names: &[String]) -> Result<()> {
    std::fs::write(path, format_gmt(membership, gene_names)).map_err(|e| Error::io(path, e))
}
