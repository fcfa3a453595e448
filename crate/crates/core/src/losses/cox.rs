//! Negative Cox partial log-likelihood with Breslow handling of tied times.
//!
//! For uncensored patients `i` the loss sums `log Σ_{j: t_j ≥ t_i} e^{r_j} − r_i`.
//! The risk set of a tied group contains every member of the group.

use crate::error::{Error, Result};

/// Borrowed survival batch.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalView<'a> {
    pub risks: &'a [f64],
    pub times: &'a [f64],
    pub events: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxEval {
    pub loss: f64,
    /// d loss / d risk, one entry per patient.
    pub grad: Vec<f64>,
    pub n_events: usize,
    /// Set when the batch had no events; the loss is then zero.
    pub all_censored: bool,
}

pub(crate) fn validate(view: &SurvivalView<'_>) -> Result<()> {
    let n = view.risks.len();
    if view.times.len() != n || view.events.len() != n {
        return Err(Error::Input(format!(
            "survival batch lengths differ: {} risks, {} times, {} events",
            n,
            view.times.len(),
            view.events.len()
        )));
    }
    if let Some(t) = view.times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Input(format!("survival time {t} is not positive")));
    }
    if view.risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "cox_loss" });
    }
    Ok(())
}

/// Indices ordered by time, descending; ties keep index order.
fn descending_time_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    order
}

/// Groups of equal time over an ordering, as index ranges into it.
fn tie_groups(order: &[usize], times: &[f64]) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for k in 1..=order.len() {
        if k == order.len() || times[order[k]] != times[order[start]] {
            groups.push(start..k);
            start = k;
        }
    }
    groups
}

/// Loss and gradient with respect to the risks.
pub fn cox_partial_likelihood(view: SurvivalView<'_>) -> Result<CoxEval> {
    validate(&view)?;
    let n = view.risks.len();
    let n_events = view.events.iter().filter(|e| **e).count();
    if n_events == 0 {
        log::warn!("cox loss over {n} patients without any event; returning zero");
        return Ok(CoxEval {
            loss: 0.0,
            grad: vec![0.0; n],
            n_events,
            all_censored: true,
        });
    }
    let shift = view.risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = view.risks.iter().map(|r| (r - shift).exp()).collect();
    let order = descending_time_order(view.times);
    let groups = tie_groups(&order, view.times);

    // Sweep from the latest time: the running sum is the risk-set mass.
    let mut running = 0.0;
    let mut loss = 0.0;
    let mut group_weight = vec![0.0; groups.len()];
    for (gi, range) in groups.iter().enumerate() {
        for &i in &order[range.clone()] {
            running += scaled[i];
        }
        let log_mass = running.ln() + shift;
        let mut deaths = 0usize;
        for &i in &order[range.clone()] {
            if view.events[i] {
                loss += log_mass - view.risks[i];
                deaths += 1;
            }
        }
        group_weight[gi] = deaths as f64 / running;
    }

    // Patient k belongs to the risk set of every event at or before t_k.
    let mut grad = vec![0.0; n];
    let mut cumulative = 0.0;
    for (gi, range) in groups.iter().enumerate().rev() {
        cumulative += group_weight[gi];
        for &k in &order[range.clone()] {
            grad[k] = scaled[k] * cumulative - if view.events[k] { 1.0 } else { 0.0 };
        }
    }
    Ok(CoxEval {
        loss,
        grad,
        n_events,
        all_censored: false,
    })
}

/// Convenience wrapper returning only the loss value.
pub fn cox_loss(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    Ok(cox_partial_likelihood(SurvivalView {
        risks,
        times,
        events,
    })?
    .loss)
}

/// Gradient and Hessian of the loss for a linear predictor `r = X β`.
///
/// `covariates` is row-major `n × p`. The gradient reuses
/// [`cox_partial_likelihood`]; the Hessian comes from a descending-time sweep
/// of the weighted first and second covariate moments of each risk set.
pub fn linear_cox_derivatives(
    view: SurvivalView<'_>,
    covariates: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let eval = cox_partial_likelihood(view)?;
    let p = covariates.first().map_or(0, Vec::len);
    let mut grad = vec![0.0; p];
    for (k, x) in covariates.iter().enumerate() {
        for c in 0..p {
            grad[c] += eval.grad[k] * x[c];
        }
    }
    let mut hess = vec![vec![0.0; p]; p];
    if eval.all_censored {
        return Ok((eval.loss, grad, hess));
    }
    let shift = view.risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let order = descending_time_order(view.times);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![vec![0.0; p]; p];
    for range in tie_groups(&order, view.times) {
        for &i in &order[range.clone()] {
            let w = (view.risks[i] - shift).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * covariates[i][a];
                for b in 0..p {
                    s2[a][b] += w * covariates[i][a] * covariates[i][b];
                }
            }
        }
        let deaths = order[range].iter().filter(|&&i| view.events[i]).count() as f64;
        if deaths == 0.0 {
            continue;
        }
        for a in 0..p {
            for b in 0..p {
                hess[a][b] += deaths * (s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0));
            }
        }
    }
    Ok((eval.loss, grad, hess))
}
