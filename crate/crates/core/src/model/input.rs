//! Turning cohort records into model inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{tokenize_pathways, Cohort, Patient, PathwayMembership};
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::prototype::{fit_global_prototypes, fit_gmm, EmConfig, GlobalPrototypes, GmmSummary};

/// One patient ready for the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInput {
    /// Standardized expression grouped per pathway.
    pub tokens: Vec<Vec<f64>>,
    /// `N_h × (1 + D_p)` rows of `[π_c ‖ μ_c]`.
    pub slide: Tensor,
}

impl PatientInput {
    pub fn from_parts(tokens: Vec<Vec<f64>>, gmm: &GmmSummary) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..gmm.n_components())
            .map(|c| {
                let mut r = Vec::with_capacity(1 + gmm.dim());
                r.push(gmm.weights[c]);
                r.extend_from_slice(gmm.means.row(c));
                r
            })
            .collect();
        Ok(PatientInput {
            tokens,
            slide: Tensor::from_rows(&rows)?,
        })
    }
}

/// Everything fitted on a training fold that input preparation needs:
/// gene standardization, pathway membership, and the global prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub membership: PathwayMembership,
    pub gene_mean: Vec<f64>,
    pub gene_std: Vec<f64>,
    pub prototypes: GlobalPrototypes,
    pub em: EmConfig,
}

impl FeatureSpace {
    pub fn fit(cohort: &Cohort, train: &[usize], n_prototypes: usize, em: &EmConfig, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let d = cohort.membership.n_genes();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            mean.iter_mut().zip(&cohort.patients[i].expression).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for &i in train {
            var.iter_mut()
                .zip(cohort.patients[i].expression.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m).powi(2) / n);
        }
        // Constant genes are centred but not scaled.
        let std = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let bags: Vec<&Tensor> = train.iter().map(|&i| &cohort.patients[i].patches).collect();
        let prototypes = fit_global_prototypes(&bags, n_prototypes, seed)?;
        Ok(FeatureSpace {
            membership: cohort.membership.clone(),
            gene_mean: mean,
            gene_std: std,
            prototypes,
            em: em.clone(),
        })
    }

    pub fn prepare(&self, patient: &Patient) -> Result<PatientInput> {
        if patient.expression.len() != self.gene_mean.len() {
            return Err(Error::Input(format!(
                "patient {} has {} genes, expected {}",
                patient.id,
                patient.expression.len(),
                self.gene_mean.len()
            )));
        }
        let z: Vec<f64> = patient
            .expression
            .iter()
            .zip(self.gene_mean.iter().zip(&self.gene_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        let tokens = tokenize_pathways(&z, &self.membership)?;
        PatientInput::from_parts(tokens, &self.fit_slide(patient)?)
    }

    /// Per-slide mixture anchored at the global prototypes.
    pub fn fit_slide(&self, patient: &Patient) -> Result<GmmSummary> {
        fit_gmm(&patient.patches, &self.prototypes, &self.em)
            .map(|f| f.summary)
            .map_err(|e| Error::Input(format!("patient {}: {e}", patient.id)))
    }

    /// Prepares patients in parallel; output order follows `idx`.
    pub fn prepare_all(&self, cohort: &Cohort, idx: &[usize]) -> Result<Vec<PatientInput>> {
        idx.par_iter().map(|&i| self.prepare(&cohort.patients[i])).collect()
    }
}
