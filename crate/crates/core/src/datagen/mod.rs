//! Synthetic multimodal survival cohorts with planted latent structure.
//!
//! Every patient draws three independent latent vectors: one shared by both
//! modalities, one seen only by the transcriptome, one seen only by the
//! slide. Gene expression mixes the shared and gene-specific latents; patch
//! features are draws around per-patient prototype means shifted by the
//! shared and image-specific latents, with prototype proportions driven by
//! the same latents. The log-hazard is a known linear function of all three.

mod folds;
pub mod io;
mod pathways;

pub use io::{cohort_signature, read_cohort, write_cohort};
pub use folds::{split_folds, Fold};
pub use pathways::{
    format_gmt, load_gene_sets, parse_gmt, tokenize_pathways, write_gene_sets, LoadedGeneSets,
    Pathway, PathwayMembership, PathwayTokens,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

/// Generator knobs. Unknown keys are rejected when parsed from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub patch_dim: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    /// Number of planted morphological clusters.
    pub n_clusters: usize,
    pub shared_dim: usize,
    pub gene_dim: usize,
    pub image_dim: usize,
    /// Noise std on genes and on patch features.
    pub noise: f64,
    /// Std of the cluster centres around the origin.
    pub cluster_spread: f64,
    /// Std of the latent-driven shift of each patient's cluster means.
    pub cluster_shift: f64,
    pub shared_weight: f64,
    pub gene_weight: f64,
    pub image_weight: f64,
    pub base_hazard: f64,
    /// Target fraction of censored patients; 0 disables censoring.
    pub censoring_rate: f64,
    pub n_sites: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 200,
            n_genes: 80,
            n_pathways: 8,
            patch_dim: 16,
            patches_min: 40,
            patches_max: 80,
            n_clusters: 4,
            shared_dim: 4,
            gene_dim: 4,
            image_dim: 4,
            noise: 0.3,
            cluster_spread: 1.0,
            cluster_shift: 0.5,
            shared_weight: 1.0,
            gene_weight: 0.6,
            image_weight: 0.6,
            base_hazard: 0.1,
            censoring_rate: 0.3,
            n_sites: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_patients < 2 {
            return bad(format!("n_patients = {} < 2", self.n_patients));
        }
        if self.n_pathways < 2 || self.n_pathways > self.n_genes {
            return bad(format!(
                "n_pathways = {} must be in [2, n_genes = {}]",
                self.n_pathways, self.n_genes
            ));
        }
        let latent = self.shared_dim.max(self.gene_dim);
        if latent > self.n_genes {
            return bad(format!("latent dim {latent} exceeds n_genes {}", self.n_genes));
        }
        if self.shared_dim.max(self.image_dim) > self.patch_dim {
            return bad(format!("latent dims exceed patch_dim {}", self.patch_dim));
        }
        if self.shared_dim + self.gene_dim + self.image_dim == 0 {
            return bad("all latent dims are zero".into());
        }
        if self.patch_dim == 0 || self.n_clusters == 0 {
            return bad("patch_dim and n_clusters must be positive".into());
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad(format!(
                "patch count range [{}, {}] is empty",
                self.patches_min, self.patches_max
            ));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad(format!("censoring_rate {} outside [0, 1)", self.censoring_rate));
        }
        if !(self.base_hazard > 0.0) {
            return bad("base_hazard must be positive".into());
        }
        let nonneg = [
            self.noise,
            self.cluster_spread,
            self.cluster_shift,
            self.shared_weight,
            self.gene_weight,
            self.image_weight,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise, spreads and signal weights must be finite and >= 0".into());
        }
        if self.n_sites == 0 {
            return bad("n_sites must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
}

/// One patient across both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub site: u32,
    pub expression: Vec<f64>,
    /// `N_hi × D_p` patch feature bag.
    pub patches: Tensor,
    pub survival: SurvivalRecord,
    /// Age and grade analogues for the clinical baseline.
    pub clinical: Vec<f64>,
}

/// Ground truth retained by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPatient {
    pub shared: Vec<f64>,
    pub gene_specific: Vec<f64>,
    pub image_specific: Vec<f64>,
    pub true_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFactors {
    pub patients: Vec<PlantedPatient>,
    /// Upper end of the uniform censoring distribution, when known.
    pub censor_horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub gene_names: Vec<String>,
    pub membership: PathwayMembership,
    pub patients: Vec<Patient>,
    pub planted: Option<PlantedFactors>,
}

pub const CLINICAL_COLUMNS: [&str; 2] = ["age", "grade"];

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patients.first().map_or(0, |p| p.patches.cols())
    }

    pub fn times(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.survival.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.survival.event).collect()
    }

    pub fn sites(&self) -> Vec<u32> {
        self.patients.iter().map(|p| p.site).collect()
    }

    pub fn censoring_fraction(&self) -> f64 {
        self.patients.iter().filter(|p| !p.survival.event).count() as f64 / self.len() as f64
    }

    pub fn split_folds(&self, k: usize, seed: u64) -> Result<Vec<Fold>> {
        split_folds(&self.sites(), &self.events(), k, seed)
    }

    /// Checks shapes, survival values and finiteness across patients.
    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(Error::Validation("cohort has no patients".into()));
        }
        let n_genes = self.gene_names.len();
        if self.membership.n_genes() != n_genes {
            return Err(Error::Validation(format!(
                "membership covers {} genes, panel has {n_genes}",
                self.membership.n_genes()
            )));
        }
        let d_p = self.patch_dim();
        for p in &self.patients {
            if p.expression.len() != n_genes {
                return Err(Error::Validation(format!(
                    "{}: {} genes, expected {n_genes}",
                    p.id,
                    p.expression.len()
                )));
            }
            if p.patches.cols() != d_p || p.patches.rows() == 0 {
                return Err(Error::Validation(format!(
                    "{}: patch bag shape {:?}, expected [_, {d_p}]",
                    p.id,
                    p.patches.shape()
                )));
            }
            if !(p.survival.time.is_finite() && p.survival.time > 0.0) {
                return Err(Error::Validation(format!("{}: non-positive time", p.id)));
            }
            let finite = p.expression.iter().chain(&p.clinical).all(|v| v.is_finite());
            if !finite || !p.patches.is_finite() {
                return Err(Error::Validation(format!("{}: non-finite value", p.id)));
            }
            if p.clinical.len() != CLINICAL_COLUMNS.len() {
                return Err(Error::Validation(format!("{}: clinical row width", p.id)));
            }
        }
        let mut ids: Vec<&str> = self.patients.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate patient ids".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// `rows × cols` matrix of N(0, scale²) entries.
fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * normal(rng)).collect())
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let v = normal_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn apply(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Maps from latents to observations, shared by every patient.
struct Mixing {
    gene_shared: Vec<Vec<f64>>,
    gene_specific: Vec<Vec<f64>>,
    centres: Vec<Vec<f64>>,
    patch_shared: Vec<Vec<f64>>,
    patch_specific: Vec<Vec<f64>>,
    logit_shared: Vec<Vec<f64>>,
    logit_specific: Vec<Vec<f64>>,
    risk_shared: Vec<f64>,
    risk_gene: Vec<f64>,
    risk_image: Vec<f64>,
}

impl Mixing {
    fn draw(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let inv = |d: usize| 1.0 / (d.max(1) as f64).sqrt();
        let shift = cfg.cluster_shift;
        Mixing {
            gene_shared: normal_matrix(rng, cfg.n_genes, cfg.shared_dim, inv(cfg.shared_dim)),
            gene_specific: normal_matrix(rng, cfg.n_genes, cfg.gene_dim, inv(cfg.gene_dim)),
            centres: normal_matrix(rng, cfg.n_clusters, cfg.patch_dim, cfg.cluster_spread),
            patch_shared: normal_matrix(rng, cfg.patch_dim, cfg.shared_dim, shift * inv(cfg.shared_dim)),
            patch_specific: normal_matrix(rng, cfg.patch_dim, cfg.image_dim, shift * inv(cfg.image_dim)),
            logit_shared: normal_matrix(rng, cfg.n_clusters, cfg.shared_dim, inv(cfg.shared_dim)),
            logit_specific: normal_matrix(rng, cfg.n_clusters, cfg.image_dim, inv(cfg.image_dim)),
            risk_shared: unit_vector(rng, cfg.shared_dim),
            risk_gene: unit_vector(rng, cfg.gene_dim),
            risk_image: unit_vector(rng, cfg.image_dim),
        }
    }
}

struct Draw {
    patient: Patient,
    planted: PlantedPatient,
    /// Uniform(0, 1] variate that scales the censoring horizon.
    censor_u: f64,
    event_time: f64,
}

fn draw_patient(cfg: &GeneratorConfig, mix: &Mixing, index: usize, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let shared = normal_vec(rng, cfg.shared_dim);
    let gene_specific = normal_vec(rng, cfg.gene_dim);
    let image_specific = normal_vec(rng, cfg.image_dim);

    let gs = apply(&mix.gene_shared, &shared);
    let gu = apply(&mix.gene_specific, &gene_specific);
    let expression: Vec<f64> = (0..cfg.n_genes)
        .map(|j| gs[j] + gu[j] + cfg.noise * normal(rng))
        .collect();

    let ps = apply(&mix.patch_shared, &shared);
    let pu = apply(&mix.patch_specific, &image_specific);
    let mut logits: Vec<f64> = (0..cfg.n_clusters)
        .map(|c| dot(&mix.logit_shared[c], &shared) + dot(&mix.logit_specific[c], &image_specific))
        .collect();
    crate::diffgraph::softmax_in_place(&mut logits);
    let proportions = logits;

    let n_patches = rng.random_range(cfg.patches_min..=cfg.patches_max);
    let mut data = Vec::with_capacity(n_patches * cfg.patch_dim);
    for _ in 0..n_patches {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cluster = cfg.n_clusters - 1;
        for (c, p) in proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                cluster = c;
                break;
            }
        }
        for d in 0..cfg.patch_dim {
            data.push(mix.centres[cluster][d] + ps[d] + pu[d] + cfg.noise * normal(rng));
        }
    }
    let patches = Tensor::new(n_patches, cfg.patch_dim, data)?;

    let true_risk = cfg.shared_weight * dot(&mix.risk_shared, &shared)
        + cfg.gene_weight * dot(&mix.risk_gene, &gene_specific)
        + cfg.image_weight * dot(&mix.risk_image, &image_specific);
    let rate = cfg.base_hazard * true_risk.exp();
    let event_time = -(1.0 - rng.random::<f64>()).ln() / rate;
    let censor_u = 1.0 - rng.random::<f64>();
    let site = rng.random_range(0..cfg.n_sites);

    let age = 60.0 + 8.0 * normal(rng) + 3.0 * true_risk;
    let latent_grade = true_risk + normal(rng);
    let grade = 1.0 + f64::from(u8::from(latent_grade > -0.5)) + f64::from(u8::from(latent_grade > 0.5));

    Ok(Draw {
        patient: Patient {
            id: format!("P{:05}", index + 1),
            site,
            expression,
            patches,
            survival: SurvivalRecord {
                time: event_time,
                event: true,
            },
            clinical: vec![age, grade],
        },
        planted: PlantedPatient {
            shared,
            gene_specific,
            image_specific,
            true_risk,
        },
        censor_u,
        event_time,
    })
}

/// Expected censored fraction with censoring times uniform on `(0, horizon]`
/// and exponential event times of the given rates.
fn expected_censoring(rates: &[f64], horizon: f64) -> f64 {
    rates
        .iter()
        .map(|&l| {
            let x = l * horizon;
            if x < 1e-12 {
                1.0
            } else {
                -(-x).exp_m1() / x
            }
        })
        .sum::<f64>()
        / rates.len() as f64
}

/// Horizon whose expected censoring matches `target`, by bisection in log space.
fn censor_horizon(rates: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // Censoring falls as the horizon grows.
        if expected_censoring(rates, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Generates a cohort. Patient `i` draws from its own counter stream, so the
/// output does not depend on evaluation order.
pub fn generate_cohort(cfg: &GeneratorConfig, seed: u64) -> Result<Cohort> {
    cfg.validate()?;
    let mut weight_rng = ChaCha8Rng::seed_from_u64(seed);
    weight_rng.set_stream(0);
    let mix = Mixing::draw(cfg, &mut weight_rng);

    let mut draws = (0..cfg.n_patients)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            draw_patient(cfg, &mix, i, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let horizon = if cfg.censoring_rate > 0.0 {
        let rates: Vec<f64> = draws
            .iter()
            .map(|d| cfg.base_hazard * d.planted.true_risk.exp())
            .collect();
        censor_horizon(&rates, cfg.censoring_rate)
    } else {
        f64::INFINITY
    };
    for d in &mut draws {
        let censor_time = d.censor_u * horizon;
        if censor_time < d.event_time {
            d.patient.survival = SurvivalRecord {
                time: censor_time,
                event: false,
            };
        }
    }

    let gene_names = (0..cfg.n_genes).map(|j| format!("GENE{:04}", j + 1)).collect();
    let membership = PathwayMembership::contiguous(cfg.n_genes, cfg.n_pathways)?;
    let (patients, planted): (Vec<_>, Vec<_>) = draws.into_iter().map(|d| (d.patient, d.planted)).unzip();
    Ok(Cohort {
        gene_names,
        membership,
        patients,
        planted: Some(PlantedFactors {
            patients: planted,
            censor_horizon: horizon.is_finite().then_some(horizon),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train_eval::concordance_index;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = GeneratorConfig {
            n_patients: 100,
            ..Default::default()
        };
        assert_eq!(generate_cohort(&cfg, 7).unwrap(), generate_cohort(&cfg, 7).unwrap());
        assert_ne!(generate_cohort(&cfg, 7).unwrap(), generate_cohort(&cfg, 8).unwrap());
    }

    #[test]
    fn prefix_of_larger_cohort_matches_smaller_draw() {
        // Per-patient streams: patient i does not depend on the cohort size.
        let small = generate_cohort(&GeneratorConfig { n_patients: 10, censoring_rate: 0.0, ..Default::default() }, 3).unwrap();
        let large = generate_cohort(&GeneratorConfig { n_patients: 30, censoring_rate: 0.0, ..Default::default() }, 3).unwrap();
        assert_eq!(small.patients[..], large.patients[..10]);
    }

    #[test]
    fn planted_shared_risk_orders_survival() {
        let cfg = GeneratorConfig {
            n_patients: 1000,
            noise: 0.0,
            shared_weight: 1.0,
            gene_weight: 0.0,
            image_weight: 0.0,
            censoring_rate: 0.0,
            ..Default::default()
        };
        let cohort = generate_cohort(&cfg, 11).unwrap();
        let risks: Vec<f64> = cohort.planted.as_ref().unwrap().patients.iter().map(|p| p.true_risk).collect();
        let c = concordance_index(&risks, &cohort.times(), &cohort.events()).unwrap();
        assert!(c > 0.7, "c-index {c}");
    }

    #[test]
    fn censoring_hits_target() {
        let cfg = GeneratorConfig {
            n_patients: 2000,
            censoring_rate: 0.3,
            ..Default::default()
        };
        let cohort = generate_cohort(&cfg, 5).unwrap();
        let frac = cohort.censoring_fraction();
        assert!((frac - 0.3).abs() <= 0.05, "censored {frac}");
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = GeneratorConfig {
            n_genes: 3,
            n_pathways: 2,
            shared_dim: 4,
            ..Default::default()
        };
        assert!(matches!(generate_cohort(&cfg, 1), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            patches_min: 10,
            patches_max: 5,
            ..Default::default()
        };
        assert!(matches!(generate_cohort(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn generated_cohort_validates() {
        let cohort = generate_cohort(&GeneratorConfig::default(), 2).unwrap();
        cohort.validate().unwrap();
        assert_eq!(cohort.membership.len(), 8);
        assert!(cohort.patients.iter().all(|p| p.patches.rows() >= 40));
    }
}
