//! Slide summarization by Gaussian mixtures over patch features.
//!
//! Global prototypes come from k-means over pooled training patches. Each
//! slide then runs a short diagonal-covariance EM anchored at those
//! prototypes, so component `c` means the same morphology on every slide.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Responsibility mass under which a component counts as empty.
pub const EMPTY_MASS: f64 = 1e-8;
/// Weight given to an empty component.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Most patches pooled for the global k-means.
pub const KMEANS_SAMPLE_CAP: usize = 20_000;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood gain is below `tol · |log-likelihood|`.
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 10,
            tol: 1e-6,
            var_floor: 1e-4,
        }
    }
}

/// Cross-slide anchor means, one row per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototypes {
    pub means: Tensor,
}

impl GlobalPrototypes {
    pub fn n_components(&self) -> usize {
        self.means.rows()
    }
}

/// Per-slide mixture: weights `π`, means `μ`, diagonal variances `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub variances: Tensor,
}

impl GmmSummary {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// `log π_c + log N(z; μ_c, Σ_c)` for every component.
    fn joint_log_densities(&self, z: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let (mu, var) = (self.means.row(c), self.variances.row(c));
            let mut acc = 0.0;
            for d in 0..z.len() {
                let diff = z[d] - mu[d];
                acc += LN_2PI + var[d].ln() + diff * diff / var[d];
            }
            *o = self.weights[c].ln() - 0.5 * acc;
        }
    }

    /// Total log-likelihood of a bag.
    pub fn log_likelihood(&self, bag: &Tensor) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        bag.iter_rows()
            .map(|z| {
                self.joint_log_densities(z, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centres.iter().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeded Lloyd iterations on a pooled sample of training patches.
pub fn fit_global_prototypes(bags: &[&Tensor], n_components: usize, seed: u64) -> Result<GlobalPrototypes> {
    if n_components == 0 {
        return Err(Error::Config("need at least one prototype".into()));
    }
    let dim = bags.first().map_or(0, |b| b.cols());
    if bags.iter().any(|b| b.cols() != dim) {
        return Err(Error::Input("patch bags differ in feature width".into()));
    }
    let pooled: Vec<&[f64]> = bags.iter().flat_map(|b| b.iter_rows()).collect();
    if pooled.len() < n_components {
        return Err(Error::Config(format!(
            "{} pooled patches for {n_components} prototypes",
            pooled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<&[f64]> = if pooled.len() > KMEANS_SAMPLE_CAP {
        let mut picked = index::sample(&mut rng, pooled.len(), KMEANS_SAMPLE_CAP).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pooled[i]).collect()
    } else {
        pooled
    };

    let mut centres: Vec<Vec<f64>> = vec![sample[rng.random_range(0..sample.len())].to_vec()];
    let mut d2: Vec<f64> = sample.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < n_components {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config(format!(
                "fewer than {n_components} distinct patch features"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = sample.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && *w > 0.0 {
                pick = i;
                break;
            }
        }
        let centre = sample[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(&sample) {
            *d = d.min(sq_dist(p, &centre));
        }
        centres.push(centre);
    }

    let mut labels = vec![usize::MAX; sample.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(&sample) {
            let c = nearest(p, &centres).0;
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; n_components];
        let mut counts = vec![0usize; n_components];
        for (l, p) in labels.iter().zip(&sample) {
            counts[*l] += 1;
            sums[*l].iter_mut().zip(*p).for_each(|(s, v)| *s += v);
        }
        for c in 0..n_components {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(GlobalPrototypes {
        means: Tensor::from_rows(&centres)?,
    })
}

/// Outcome of one per-slide EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub summary: GmmSummary,
    /// Log-likelihood of the initial parameters and after every accepted M-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Diagonal-covariance EM started from the anchors with uniform weights and
/// the bag's per-dimension variance.
pub fn fit_gmm(bag: &Tensor, anchors: &GlobalPrototypes, cfg: &EmConfig) -> Result<GmmFit> {
    let (n, dim) = (bag.rows(), bag.cols());
    let k = anchors.n_components();
    if n == 0 {
        return Err(Error::Input("empty patch bag".into()));
    }
    if n < k {
        return Err(Error::Input(format!("{n} patches for {k} mixture components")));
    }
    if anchors.means.cols() != dim {
        return Err(Error::Dimension {
            op: "fit_gmm",
            left: bag.shape(),
            right: anchors.means.shape(),
        });
    }
    if !(cfg.var_floor > 0.0) {
        return Err(Error::Config("var_floor must be positive".into()));
    }

    let mean = bag.column_means();
    let mut global_var = vec![0.0; dim];
    for row in bag.iter_rows() {
        for d in 0..dim {
            global_var[d] += (row[d] - mean.data()[d]).powi(2);
        }
    }
    let init_var: Vec<f64> = global_var.iter().map(|v| (v / n as f64).max(cfg.var_floor)).collect();
    let mut g = GmmSummary {
        weights: vec![1.0 / k as f64; k],
        means: anchors.means.clone(),
        variances: Tensor::from_rows(&vec![init_var; k])?,
    };

    let mut resp = Tensor::zeros(n, k);
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_iter + 1);
    let mut converged = false;
    let mut previous = g.clone();
    for iter in 0..=cfg.max_iter {
        let ll = e_step(&g, bag, &mut resp);
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("EM log-likelihood is {ll} at iteration {iter}")));
        }
        if let Some(prev) = history.last().copied() {
            let gain: f64 = ll - prev;
            if gain < 0.0 {
                // The weight floor can cost more than a near-converged step
                // gains; keep the previous parameters.
                g = previous;
                converged = true;
                break;
            }
            if gain < cfg.tol * prev.abs() {
                converged = true;
                history.push(ll);
                break;
            }
        }
        history.push(ll);
        if iter == cfg.max_iter {
            break;
        }
        previous = g.clone();
        m_step(&mut g, bag, &resp, cfg.var_floor);
    }
    Ok(GmmFit {
        summary: g,
        log_likelihoods: history,
        converged,
    })
}

/// Fills responsibilities and returns the total log-likelihood.
fn e_step(g: &GmmSummary, bag: &Tensor, resp: &mut Tensor) -> f64 {
    let mut ll = 0.0;
    for (i, z) in bag.iter_rows().enumerate() {
        let row = resp.row_mut(i);
        g.joint_log_densities(z, row);
        ll += log_sum_exp(row);
        softmax_in_place(row);
    }
    ll
}

fn m_step(g: &mut GmmSummary, bag: &Tensor, resp: &Tensor, var_floor: f64) {
    let (n, dim, k) = (bag.rows(), bag.cols(), g.n_components());
    let mut mass = vec![0.0; k];
    for i in 0..n {
        for (m, r) in mass.iter_mut().zip(resp.row(i)) {
            *m += r;
        }
    }
    for c in 0..k {
        if mass[c] < EMPTY_MASS {
            // Mean and variance keep their previous values.
            continue;
        }
        let mut mu = vec![0.0; dim];
        for (i, z) in bag.iter_rows().enumerate() {
            let r = resp.get(i, c);
            mu.iter_mut().zip(z).for_each(|(m, v)| *m += r * v);
        }
        mu.iter_mut().for_each(|m| *m /= mass[c]);
        let mut var = vec![0.0; dim];
        for (i, z) in bag.iter_rows().enumerate() {
            let r = resp.get(i, c);
            for d in 0..dim {
                var[d] += r * (z[d] - mu[d]).powi(2);
            }
        }
        let var: Vec<f64> = var.iter().map(|v| (v / mass[c]).max(var_floor)).collect();
        g.means.row_mut(c).copy_from_slice(&mu);
        g.variances.row_mut(c).copy_from_slice(&var);
    }
    let empty: Vec<bool> = mass.iter().map(|m| *m < EMPTY_MASS).collect();
    let n_empty = empty.iter().filter(|e| **e).count();
    let live_mass: f64 = mass.iter().zip(&empty).filter(|(_, e)| !**e).map(|(m, _)| m).sum();
    let live_share = 1.0 - n_empty as f64 * WEIGHT_FLOOR;
    for c in 0..k {
        g.weights[c] = if empty[c] {
            WEIGHT_FLOOR
        } else {
            mass[c] / live_mass * live_share
        };
    }
}

/// Posterior component probabilities `q(c | z)`.
pub fn posterior(z: &[f64], g: &GmmSummary) -> Vec<f64> {
    let mut out = vec![0.0; g.n_components()];
    g.joint_log_densities(z, &mut out);
    softmax_in_place(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub patch_index: usize,
    pub component: usize,
    pub probability: f64,
}

/// Most probable component per patch; ties go to the lowest index.
pub fn prototype_assignments(bag: &Tensor, g: &GmmSummary) -> Vec<Assignment> {
    bag.iter_rows()
        .enumerate()
        .map(|(i, z)| {
            let q = posterior(z, g);
            let mut best = 0;
            for c in 1..q.len() {
                if q[c] > q[best] {
                    best = c;
                }
            }
            Assignment {
                patch_index: i,
                component: best,
                probability: q[best],
            }
        })
        .collect()
}

/// Writes `patch_index,component,probability` rows (components 0-based).
pub fn write_assignments(path: &Path, rows: &[Assignment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    w.write_record(["patch_index", "component", "probability"]).map_err(err)?;
    for a in rows {
        w.write_record([a.patch_index.to_string(), a.component.to_string(), format!("{}", a.probability)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
