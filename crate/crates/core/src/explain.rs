//! Shapley attribution of the risk score over the four representation blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, Model};

/// Reference point for absent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Mean pooled representation over the training fold.
    #[default]
    TrainMean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub baseline: BaselineKind,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            baseline: BaselineKind::TrainMean,
        }
    }
}

pub type Blocks = [Vec<f64>; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAttribution {
    /// `φ` in `Block::ALL` order, in risk units.
    pub phi: [f64; 4],
    pub baseline_risk: f64,
    pub risk: f64,
}

impl BlockAttribution {
    pub fn efficiency_gap(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - (self.risk - self.baseline_risk)).abs()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values over the four blocks by enumerating all 16
/// coalitions; absent blocks take their baseline value.
pub fn shapley_blocks_with<F: Fn(&Blocks) -> f64>(f: F, z: &Blocks, baseline: &Blocks) -> BlockAttribution {
    let value = |mask: usize| -> f64 {
        let mixed: Blocks = std::array::from_fn(|k| if mask & (1 << k) != 0 { z[k].clone() } else { baseline[k].clone() });
        f(&mixed)
    };
    let values: Vec<f64> = (0..16).map(value).collect();
    let mut phi = [0.0; 4];
    for (k, p) in phi.iter_mut().enumerate() {
        for mask in 0..16usize {
            if mask & (1 << k) != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = factorial(s) * factorial(3 - s) / factorial(4);
            *p += w * (values[mask | (1 << k)] - values[mask]);
        }
    }
    BlockAttribution {
        phi,
        baseline_risk: values[0],
        risk: values[15],
    }
}

/// Coalition enumeration against the model's risk head.
pub fn shapley_blocks(model: &Model, z: &Blocks, baseline: &Blocks) -> BlockAttribution {
    shapley_blocks_with(|b| model.risk_score(b), z, baseline)
}

/// `φ_k = w_k · (z_k − baseline_k)`, exact for a linear head.
pub fn linear_shapley(model: &Model, z: &Blocks, baseline: &Blocks) -> [f64; 4] {
    let (w, _) = model.head();
    std::array::from_fn(|k| w[k].iter().zip(z[k].iter().zip(&baseline[k])).map(|(a, (x, b))| a * (x - b)).sum())
}

/// Mean pooled representation of a set of patients.
pub fn mean_blocks(rows: &[Blocks]) -> Result<Blocks> {
    let first = rows.first().ok_or_else(|| Error::Input("no representations to average".into()))?;
    let n = rows.len() as f64;
    Ok(std::array::from_fn(|k| {
        let mut m = vec![0.0; first[k].len()];
        for r in rows {
            m.iter_mut().zip(&r[k]).for_each(|(a, x)| *a += x / n);
        }
        m
    }))
}

pub fn zero_blocks(d_z: usize) -> Blocks {
    std::array::from_fn(|_| vec![0.0; d_z])
}

/// Per-block and grouped shares of `|φ|` averaged over patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    /// Indexed like `Block::ALL`.
    pub blocks: [f64; 4],
    pub specific: f64,
    pub shared: f64,
    pub n_patients: usize,
    /// Patients whose attributions were all zero.
    pub n_excluded: usize,
}

pub const SHARE_RECIPE: &str =
    "per-patient |phi| normalized to sum 1 over the four blocks, then averaged over patients";

pub fn normalized_shares(attrs: &[BlockAttribution]) -> Result<Shares> {
    let mut sum = [0.0; 4];
    let mut used = 0usize;
    for a in attrs {
        let tot: f64 = a.phi.iter().map(|p| p.abs()).sum();
        if tot == 0.0 {
            continue;
        }
        used += 1;
        for k in 0..4 {
            sum[k] += a.phi[k].abs() / tot;
        }
    }
    if used == 0 {
        return Err(Error::Undefined("every patient has all-zero attributions".into()));
    }
    let blocks = sum.map(|s| s / used as f64);
    let specific = Block::ALL.iter().zip(&blocks).filter(|(b, _)| b.is_specific()).map(|(_, s)| s).sum();
    let shared = Block::ALL.iter().zip(&blocks).filter(|(b, _)| !b.is_specific()).map(|(_, s)| s).sum();
    Ok(Shares {
        blocks,
        specific,
        shared,
        n_patients: used,
        n_excluded: attrs.len() - used,
    })
}
