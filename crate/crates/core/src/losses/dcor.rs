//! Empirical distance covariance and distance correlation.
//!
//! With `a_jk = ‖x_j − x_k‖` and `A` its double-centered form (same for `b`,
//! `B`), `dCov²(X, Y) = (1/n²) Σ A_jk B_jk`. Distance correlation divides
//! `dCov(X, Y)` by `√(dCov(X, X)·dCov(Y, Y))`.

use serde::{Deserialize, Serialize};

use crate::diffgraph::{double_center, pairwise_distances, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Below this distance variance an input counts as constant and the
/// correlation is defined as zero.
pub const DEGENERATE_DVAR: f64 = 1e-14;

/// Which statistic the disentanglement loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcForm {
    /// `dCov(X,Y) / √(dCov(X,X)·dCov(Y,Y))`.
    #[default]
    Root,
    /// The same ratio built from squared covariances.
    Squared,
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension {
            op: "distance_covariance",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Input(format!(
            "distance covariance needs at least 2 samples, got {}",
            x.rows()
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite { op: "distance_covariance" });
    }
    Ok(())
}

/// Double-centered distance matrix of the rows of `x`.
pub fn centered_distances(x: &Tensor) -> Tensor {
    double_center(&pairwise_distances(x))
}

fn mean_product(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows() as f64;
    a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>() / (n * n)
}

/// Squared distance covariance, possibly slightly negative from rounding.
pub fn distance_covariance_sq(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    Ok(mean_product(&centered_distances(x), &centered_distances(y)))
}

pub fn distance_covariance(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(distance_covariance_sq(x, y)?.max(0.0).sqrt())
}

pub fn distance_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    distance_correlation_with(x, y, DcForm::Root)
}

pub fn distance_correlation_with(x: &Tensor, y: &Tensor, form: DcForm) -> Result<f64> {
    check_pair(x, y)?;
    let (a, b) = (centered_distances(x), centered_distances(y));
    Ok(correlation_from_moments(
        mean_product(&a, &b),
        mean_product(&a, &a),
        mean_product(&b, &b),
        form,
    ))
}

fn correlation_from_moments(xy: f64, xx: f64, yy: f64, form: DcForm) -> f64 {
    let (xy, xx, yy) = (xy.max(0.0), xx.max(0.0), yy.max(0.0));
    if xx.sqrt() < DEGENERATE_DVAR || yy.sqrt() < DEGENERATE_DVAR {
        return 0.0;
    }
    match form {
        DcForm::Root => xy.sqrt() / (xx.sqrt() * yy.sqrt()).sqrt(),
        DcForm::Squared => xy / (xx * yy).sqrt(),
    }
}

/// Double-centered distance matrix recorded on a graph.
pub fn centered_distances_var(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.pairwise_distances(x)?;
    g.double_center(d)
}

fn mean_product_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.shape(a)[0] as f64;
    let prod = g.mul(a, b)?;
    let s = g.sum(prod)?;
    g.scale(s, 1.0 / (n * n))
}

/// Differentiable distance correlation from two centered distance matrices.
/// Degenerate inputs yield a constant zero.
pub fn correlation_from_centered(g: &mut Graph, a: Var, b: Var, form: DcForm) -> Result<Var> {
    let xy = mean_product_var(g, a, b)?;
    let xx = mean_product_var(g, a, a)?;
    let yy = mean_product_var(g, b, b)?;
    let (vxx, vyy) = (g.value(xx).item(), g.value(yy).item());
    if vxx.max(0.0).sqrt() < DEGENERATE_DVAR || vyy.max(0.0).sqrt() < DEGENERATE_DVAR {
        return g.constant(Tensor::scalar(0.0));
    }
    match form {
        DcForm::Root => {
            let num = g.sqrt_clamped(xy)?;
            let sx = g.sqrt_clamped(xx)?;
            let sy = g.sqrt_clamped(yy)?;
            let prod = g.mul(sx, sy)?;
            let den = g.sqrt_clamped(prod)?;
            g.div(num, den)
        }
        DcForm::Squared => {
            let prod = g.mul(xx, yy)?;
            let den = g.sqrt_clamped(prod)?;
            g.div(xy, den)
        }
    }
}

/// Differentiable distance correlation between the rows of two matrices.
pub fn distance_correlation_var(g: &mut Graph, x: Var, y: Var, form: DcForm) -> Result<Var> {
    check_pair(g.value(x), g.value(y))?;
    let a = centered_distances_var(g, x)?;
    let b = centered_distances_var(g, y)?;
    correlation_from_centered(g, a, b, form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn constant_rows_have_zero_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::filled(10, 3, 2.5);
        let y = normal(10, 2, &mut rng);
        assert_eq!(distance_covariance(&x, &y).unwrap(), 0.0);
        assert_eq!(distance_correlation(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn two_samples_follow_closed_form() {
        // Centered 2-point distance matrices are ±d/2, so dCov² = d·e/4.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (normal(2, 4, &mut rng), normal(2, 3, &mut rng));
        let d = pairwise_distances(&x).get(0, 1);
        let e = pairwise_distances(&y).get(0, 1);
        let dcov = distance_covariance(&x, &y).unwrap();
        assert!((dcov - (d * e).sqrt() / 2.0).abs() < 1e-15);
        assert!((distance_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_and_sign_flip_correlation_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal(20, 4, &mut rng);
        let neg = Tensor::new(20, 4, x.data().iter().map(|v| -v).collect()).unwrap();
        assert!((distance_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((distance_correlation(&x, &neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_batches() {
        let x = Tensor::zeros(1, 2);
        assert!(matches!(distance_covariance(&x, &x), Err(Error::Input(_))));
        let y = Tensor::zeros(3, 2);
        assert!(distance_covariance(&Tensor::zeros(4, 2), &y).is_err());
    }

    #[test]
    fn graph_and_value_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = (normal(12, 3, &mut rng), normal(12, 5, &mut rng));
        for form in [DcForm::Root, DcForm::Squared] {
            let mut g = Graph::new();
            let (vx, vy) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
            let dc = distance_correlation_var(&mut g, vx, vy, form).unwrap();
            let direct = distance_correlation_with(&x, &y, form).unwrap();
            assert!((g.value(dc).item() - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn correlation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for form in [DcForm::Root, DcForm::Squared] {
            let mut params = vec![normal(8, 3, &mut rng), normal(8, 3, &mut rng)];
            let err = grad_check(
                |g, p| distance_correlation_var(g, p[0], p[1], form),
                &mut params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{form:?}: rel err {err}");
        }
    }
}
