use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst `|a − b| / max(1, |b|)` over paired entries.
pub fn max_rel_error(numeric: &[f64], analytic: &[f64]) -> f64 {
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of a scalar builder against central
/// differences, coordinate by coordinate over every parameter.
///
/// `build` receives a fresh graph plus one trainable leaf per entry of
/// `params` and must return a scalar. Parameters are restored on return.
pub fn grad_check<F>(build: F, params: &mut [Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::unchecked();
        let vars = params
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .unwrap_or_else(|| {
                let s = params[pi].shape();
                Tensor::zeros(s[0], s[1])
            })
            .into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            params[pi].data_mut()[i] = orig + eps;
            let plus = eval(params);
            params[pi].data_mut()[i] = orig - eps;
            let minus = eval(params);
            params[pi].data_mut()[i] = orig;
            numeric.push((plus? - minus?) / (2.0 * eps));
        }
        worst = worst.max(max_rel_error(&numeric, &analytic));
    }
    Ok(worst)
}
