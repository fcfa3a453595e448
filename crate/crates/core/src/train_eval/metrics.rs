//! Harrell's concordance index.

use crate::error::{Error, Result};

/// Permissible pairs have `t_i < t_j` with an observed event at `t_i`; the
/// pair is concordant when `r_i > r_j` and counts half on tied risks.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Input(format!(
            "risks, times and events have lengths {n}, {}, {}",
            times.len(),
            events.len()
        )));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "concordance_index" });
    }
    // Sorting by time lets each event only look at strictly later patients.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut concordant = 0u64; // counted in half units
    let mut permissible = 0u64;
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if !events[i] {
                continue;
            }
            for &j in &order[end..] {
                permissible += 1;
                concordant += match risks[i].partial_cmp(&risks[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
        start = end;
    }
    if permissible == 0 {
        return Err(Error::Undefined("c-index has no permissible pairs".into()));
    }
    Ok(concordant as f64 / (2 * permissible) as f64)
}
