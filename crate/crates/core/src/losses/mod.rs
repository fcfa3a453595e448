//! Training objectives: Cox partial likelihood, distance-correlation
//! disentanglement, and their weighted sum.

pub mod cox;
pub mod dcor;

pub use cox::{cox_loss, cox_partial_likelihood, CoxEval, SurvivalView};
pub use dcor::{
    distance_correlation, distance_correlation_var, distance_correlation_with,
    distance_covariance, distance_covariance_sq, DcForm,
};

use crate::diffgraph::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Stacked pooled representations of `B` patients, one `B × D_z` matrix per
/// block.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprBatch {
    pub gg: Tensor,
    pub hh: Tensor,
    pub hg: Tensor,
    pub gh: Tensor,
}

impl ReprBatch {
    pub fn new(gg: Tensor, hh: Tensor, hg: Tensor, gh: Tensor) -> Result<Self> {
        let b = gg.rows();
        for t in [&hh, &hg, &gh] {
            if t.rows() != b {
                return Err(Error::Dimension {
                    op: "repr_batch",
                    left: gg.shape(),
                    right: t.shape(),
                });
            }
        }
        if b < 2 {
            return Err(Error::Input(format!("representation batch of {b} < 2 rows")));
        }
        Ok(ReprBatch { gg, hh, hg, gh })
    }

    pub fn len(&self) -> usize {
        self.gg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The two dependence terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DcTerms {
    /// Between the two modality-specific blocks.
    pub d1: f64,
    /// Between the specific pair and the shared pair.
    pub d2: f64,
    pub total: f64,
}

/// `DC(Z_gg, Z_hh) + DC([Z_gg ‖ Z_hh], [Z_hg ‖ Z_gh])`.
pub fn disentanglement_terms(batch: &ReprBatch, form: DcForm) -> Result<DcTerms> {
    let d1 = distance_correlation_with(&batch.gg, &batch.hh, form)?;
    let specific = Tensor::concat_cols(&[&batch.gg, &batch.hh])?;
    let shared = Tensor::concat_cols(&[&batch.hg, &batch.gh])?;
    let d2 = distance_correlation_with(&specific, &shared, form)?;
    Ok(DcTerms {
        d1,
        d2,
        total: d1 + d2,
    })
}

/// Graph handles for the disentanglement loss.
#[derive(Debug, Clone, Copy)]
pub struct DisentanglementVars {
    pub d1: Var,
    pub d2: Var,
    pub total: Var,
}

/// Differentiable version of [`disentanglement_terms`] over `[gg, hh, hg, gh]`.
pub fn disentanglement_loss(
    g: &mut Graph,
    blocks: [Var; 4],
    form: DcForm,
) -> Result<DisentanglementVars> {
    let [gg, hh, hg, gh] = blocks;
    let b = g.shape(gg)[0];
    if b < 2 {
        return Err(Error::Input(format!("representation batch of {b} < 2 rows")));
    }
    let d1 = distance_correlation_var(g, gg, hh, form)?;
    let specific = g.concat_cols(&[gg, hh])?;
    let shared = g.concat_cols(&[hg, gh])?;
    let d2 = distance_correlation_var(g, specific, shared, form)?;
    let total = g.add(d1, d2)?;
    Ok(DisentanglementVars { d1, d2, total })
}

/// `λ_surv · L_surv + λ_dis · L_dis`.
pub fn total_loss(surv: f64, dis: f64, lambda_surv: f64, lambda_dis: f64) -> f64 {
    lambda_surv * surv + lambda_dis * dis
}

/// Weighted sum on the graph. A zero weight drops its term entirely, so the
/// ablation with `λ_dis = 0` is exactly the survival loss.
pub fn total_loss_var(
    g: &mut Graph,
    surv: Var,
    dis: Option<Var>,
    lambda_surv: f64,
    lambda_dis: f64,
) -> Result<Var> {
    if lambda_surv < 0.0 || lambda_dis < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let mut terms = Vec::new();
    if lambda_surv != 0.0 {
        terms.push(if lambda_surv == 1.0 { surv } else { g.scale(surv, lambda_surv)? });
    }
    if let (Some(d), true) = (dis, lambda_dis != 0.0) {
        terms.push(if lambda_dis == 1.0 { d } else { g.scale(d, lambda_dis)? });
    }
    match terms.as_slice() {
        [] => g.constant(Tensor::scalar(0.0)),
        [t] => Ok(*t),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}
