//! The fusion network: per-pathway SNNs, a slide prototype MLP, four
//! attention branches (two self, two cross), layer norm, mean pooling and a
//! linear risk head.

mod attention;
mod input;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use attention::{attention, attention_var, Attention};
pub use input::{FeatureSpace, PatientInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// SNN / MLP output width.
    pub d_emb: usize,
    /// Learnable pathway and prototype encoding width.
    pub d_enc: usize,
    /// Attention output width.
    pub d_z: usize,
    /// Mixture components per slide.
    pub n_prototypes: usize,
    /// Attention score divisor is `sqrt(scale)`; defaults to `d_z`.
    pub attention_scale: Option<f64>,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 24,
            d_enc: 8,
            d_z: 32,
            n_prototypes: 16,
            attention_scale: None,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_gh(&self) -> usize {
        self.d_emb + self.d_enc
    }

    pub fn scale(&self) -> f64 {
        self.attention_scale.unwrap_or(self.d_z as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_enc == 0 || self.d_z == 0 || self.n_prototypes == 0 {
            return Err(Error::Config("model widths and n_prototypes must be positive".into()));
        }
        if !(self.scale() > 0.0) {
            return Err(Error::Config("attention_scale must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Data-dependent shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub pathway_sizes: Vec<usize>,
    pub patch_dim: usize,
}

impl ModelDims {
    pub fn n_pathways(&self) -> usize {
        self.pathway_sizes.len()
    }
}

/// The four disentangled blocks in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Gg,
    Hh,
    Hg,
    Gh,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Gg, Block::Hh, Block::Hg, Block::Gh];

    pub fn name(self) -> &'static str {
        match self {
            Block::Gg => "gg",
            Block::Hh => "hh",
            Block::Hg => "hg",
            Block::Gh => "gh",
        }
    }

    /// Self-attention blocks carry modality-specific information.
    pub fn is_specific(self) -> bool {
        matches!(self, Block::Gg | Block::Hh)
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n_pathways: usize,
}

impl Layout {
    fn pathway(&self, n: usize) -> usize {
        4 * n
    }
    fn pathway_encoding(&self) -> usize {
        4 * self.n_pathways
    }
    fn slide(&self) -> usize {
        self.pathway_encoding() + 1
    }
    fn prototype_encoding(&self) -> usize {
        self.slide() + 4
    }
    fn branch(&self, b: Block) -> usize {
        let k = Block::ALL.iter().position(|x| *x == b).expect("block listed");
        self.prototype_encoding() + 1 + 5 * k
    }
    fn head(&self) -> usize {
        self.branch(Block::Gh) + 5
    }
}

fn shapes(cfg: &ModelConfig, dims: &ModelDims) -> Vec<(String, [usize; 2], usize)> {
    // (name, shape, fan_in); fan_in 0 marks zero init, usize::MAX marks encodings,
    // 1 with a gain name marks ones.
    let (e, d_gh, z) = (cfg.d_emb, cfg.d_gh(), cfg.d_z);
    let mut out = Vec::new();
    for (n, &s) in dims.pathway_sizes.iter().enumerate() {
        out.push((format!("pathway.{n}.w1"), [s, e], s));
        out.push((format!("pathway.{n}.b1"), [1, e], 0));
        out.push((format!("pathway.{n}.w2"), [e, e], e));
        out.push((format!("pathway.{n}.b2"), [1, e], 0));
    }
    out.push(("pathway_encoding".into(), [dims.n_pathways(), cfg.d_enc], usize::MAX));
    let p = 1 + dims.patch_dim;
    out.push(("slide.w1".into(), [p, e], p));
    out.push(("slide.b1".into(), [1, e], 0));
    out.push(("slide.w2".into(), [e, e], e));
    out.push(("slide.b2".into(), [1, e], 0));
    out.push(("prototype_encoding".into(), [cfg.n_prototypes, cfg.d_enc], usize::MAX));
    for b in Block::ALL {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("attn.{}.{w}", b.name()), [d_gh, z], d_gh));
        }
        out.push((format!("ln.{}.gain", b.name()), [1, z], 1));
        out.push((format!("ln.{}.bias", b.name()), [1, z], 0));
    }
    out.push(("head.w".into(), [4 * z, 1], 4 * z));
    out.push(("head.b".into(), [1, 1], 0));
    out
}

const ENCODING_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ModelParams,
}

/// Graph handles for every parameter, in `ModelParams` order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

/// Per-batch graph outputs.
#[derive(Debug, Clone)]
pub struct BatchVars {
    /// Stacked pooled blocks, each `B × d_z`, in `Block::ALL` order.
    pub pooled: [Var; 4],
    /// `B × 1` risk scores.
    pub risks: Var,
}

/// Pre-pool matrices and pooled vectors of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangledRepr {
    /// Layer-normalized branch outputs: `gg` and `hg` have `N_g` rows,
    /// `hh` and `gh` have `N_h` rows.
    pub pre_pool: [Tensor; 4],
    pub pooled: [Vec<f64>; 4],
}

impl DisentangledRepr {
    pub fn concat(&self) -> Vec<f64> {
        self.pooled.concat()
    }
}

/// Values of a full single-patient forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub z_g: Tensor,
    pub z_h: Tensor,
    pub repr: DisentangledRepr,
    pub risk: f64,
}

/// Batch predictions: stacked pooled blocks and risks.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub pooled: [Tensor; 4],
    pub risks: Vec<f64>,
}

impl Model {
    /// Normal weights with std `1/sqrt(fan_in)`, encodings with std 0.02,
    /// zero biases and unit layer-norm gains.
    pub fn init(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.n_pathways() < 2 {
            return Err(Error::Config("need at least 2 pathways".into()));
        }
        if dims.pathway_sizes.contains(&0) || dims.patch_dim == 0 {
            return Err(Error::Config("pathway sizes and patch_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, [r, c], fan_in) in shapes(&config, &dims) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(r, c, 1.0)
            } else if fan_in == 0 {
                Tensor::zeros(r, c)
            } else {
                let std = if fan_in == usize::MAX { ENCODING_STD } else { 1.0 / (fan_in as f64).sqrt() };
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::new(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Model {
            config,
            dims,
            params: ModelParams { names, tensors },
        })
    }

    fn layout(&self) -> Layout {
        Layout {
            n_pathways: self.dims.n_pathways(),
        }
    }

    /// Checks that stored parameters match the declared shapes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = shapes(&self.config, &self.dims);
        if expected.len() != self.params.tensors.len() || self.params.names.len() != self.params.tensors.len() {
            return Err(Error::Validation(format!(
                "model has {} parameter arrays, expected {}",
                self.params.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), (n, t)) in expected.iter().zip(self.params.names.iter().zip(&self.params.tensors)) {
            if name != n || *shape != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!("parameter {n} is not finite")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Result<_>>()?;
        Ok(BoundParams(vars))
    }

    fn check_input(&self, x: &PatientInput) -> Result<()> {
        if x.tokens.len() != self.dims.n_pathways() {
            return Err(Error::Config(format!(
                "{} pathway tokens for a model with {} pathways",
                x.tokens.len(),
                self.dims.n_pathways()
            )));
        }
        for (n, (t, s)) in x.tokens.iter().zip(&self.dims.pathway_sizes).enumerate() {
            if t.len() != *s {
                return Err(Error::Config(format!("pathway {n} token has {} genes, expected {s}", t.len())));
            }
        }
        if x.slide.shape() != [self.config.n_prototypes, 1 + self.dims.patch_dim] {
            return Err(Error::Config(format!(
                "slide summary is {:?}, expected [{}, {}]",
                x.slide.shape(),
                self.config.n_prototypes,
                1 + self.dims.patch_dim
            )));
        }
        Ok(())
    }

    fn two_layer(&self, g: &mut Graph, p: &BoundParams, base: usize, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.0[base])?;
        let h = g.add_row(h, p.0[base + 1])?;
        let h = g.selu(h)?;
        let h = g.matmul(h, p.0[base + 2])?;
        let h = g.add_row(h, p.0[base + 3])?;
        g.selu(h)
    }

    /// `Z_g` for every patient: each row is the pathway SNN output followed by
    /// that pathway's encoding.
    pub fn encode_pathways_var(&self, g: &mut Graph, p: &BoundParams, inputs: &[&PatientInput]) -> Result<Vec<Var>> {
        let lay = self.layout();
        let b = inputs.len();
        let mut per_pathway = Vec::with_capacity(self.dims.n_pathways());
        for n in 0..self.dims.n_pathways() {
            let rows: Vec<&[f64]> = inputs.iter().map(|x| x.tokens[n].as_slice()).collect();
            let x = g.constant(Tensor::from_rows(&rows)?)?;
            per_pathway.push(self.two_layer(g, p, lay.pathway(n), x)?);
        }
        let all = g.stack_rows(&per_pathway)?;
        let enc = p.0[lay.pathway_encoding()];
        (0..b)
            .map(|i| {
                let idx: Vec<usize> = (0..self.dims.n_pathways()).map(|n| n * b + i).collect();
                let e = g.select_rows(all, &idx)?;
                g.concat_cols(&[e, enc])
            })
            .collect()
    }

    /// `Z_h` for every patient: the shared MLP over `[π_c ‖ μ_c]` followed by
    /// the prototype encodings.
    pub fn encode_slides_var(&self, g: &mut Graph, p: &BoundParams, inputs: &[&PatientInput]) -> Result<Vec<Var>> {
        let lay = self.layout();
        let k = self.config.n_prototypes;
        let slides: Vec<&Tensor> = inputs.iter().map(|x| &x.slide).collect();
        let x = g.constant(Tensor::stack_rows(&slides)?)?;
        let all = self.two_layer(g, p, lay.slide(), x)?;
        let enc = p.0[lay.prototype_encoding()];
        (0..inputs.len())
            .map(|i| {
                let idx: Vec<usize> = (i * k..(i + 1) * k).collect();
                let e = g.select_rows(all, &idx)?;
                g.concat_cols(&[e, enc])
            })
            .collect()
    }

    /// Four branches, layer norm per branch; returns the normalized
    /// pre-pool matrices in `Block::ALL` order.
    pub fn fuse_var(&self, g: &mut Graph, p: &BoundParams, z_g: Var, z_h: Var) -> Result<[Var; 4]> {
        let lay = self.layout();
        let scale = self.config.scale();
        let mut out = [z_g; 4];
        for (k, b) in Block::ALL.into_iter().enumerate() {
            let (q, kv) = match b {
                Block::Gg => (z_g, z_g),
                Block::Hh => (z_h, z_h),
                Block::Hg => (z_g, z_h),
                Block::Gh => (z_h, z_g),
            };
            let base = lay.branch(b);
            let w = [p.0[base], p.0[base + 1], p.0[base + 2]];
            let a = attention_var(g, q, kv, w, scale)?;
            out[k] = g.layer_norm(a, p.0[base + 3], p.0[base + 4], self.config.ln_eps)?;
        }
        Ok(out)
    }

    /// Stacked pooled blocks and risks for a batch, differentiable w.r.t. `p`.
    pub fn forward_batch_var(&self, g: &mut Graph, p: &BoundParams, inputs: &[&PatientInput]) -> Result<BatchVars> {
        Ok(self.forward_batch_full(g, p, inputs)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward_batch_full(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        inputs: &[&PatientInput],
    ) -> Result<(BatchVars, Vec<(Var, Var, [Var; 4])>)> {
        if inputs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let zg = self.encode_pathways_var(g, p, inputs)?;
        let zh = self.encode_slides_var(g, p, inputs)?;
        let mut pooled_rows: [Vec<Var>; 4] = Default::default();
        let mut detail = Vec::with_capacity(inputs.len());
        for (a, b) in zg.into_iter().zip(zh) {
            let pre = self.fuse_var(g, p, a, b)?;
            for k in 0..4 {
                pooled_rows[k].push(g.mean_rows(pre[k])?);
            }
            detail.push((a, b, pre));
        }
        let mut pooled = [detail[0].0; 4];
        for k in 0..4 {
            pooled[k] = g.stack_rows(&pooled_rows[k])?;
        }
        let lay = self.layout();
        let cat = g.concat_cols(&pooled)?;
        let r = g.matmul(cat, p.0[lay.head()])?;
        let risks = g.add_row(r, p.0[lay.head() + 1])?;
        Ok((BatchVars { pooled, risks }, detail))
    }

    /// Full forward pass of one patient with every intermediate kept.
    pub fn forward(&self, input: &PatientInput) -> Result<Forward> {
        let mut g = Graph::unchecked();
        let p = self.bind(&mut g, false)?;
        let (vars, detail) = self.forward_batch_full(&mut g, &p, &[input])?;
        let (zg, zh, pre) = &detail[0];
        let pre_pool = pre.map(|v| g.value(v).clone());
        let pooled = vars.pooled.map(|v| g.value(v).data().to_vec());
        Ok(Forward {
            z_g: g.value(*zg).clone(),
            z_h: g.value(*zh).clone(),
            repr: DisentangledRepr { pre_pool, pooled },
            risk: g.value(vars.risks).item(),
        })
    }

    /// Pooled blocks and risks for many patients.
    pub fn predict(&self, inputs: &[&PatientInput]) -> Result<Predictions> {
        const CHUNK: usize = 128;
        let mut blocks: [Vec<Tensor>; 4] = Default::default();
        let mut risks = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false)?;
            let out = self.forward_batch_var(&mut g, &p, chunk)?;
            for k in 0..4 {
                blocks[k].push(g.value(out.pooled[k]).clone());
            }
            risks.extend_from_slice(g.value(out.risks).data());
        }
        let mut pooled: [Tensor; 4] = Default::default();
        for k in 0..4 {
            let parts: Vec<&Tensor> = blocks[k].iter().collect();
            pooled[k] = Tensor::stack_rows(&parts)?;
        }
        Ok(Predictions { pooled, risks })
    }

    /// Head weights split per block plus the bias.
    pub fn head(&self) -> ([Vec<f64>; 4], f64) {
        let lay = self.layout();
        let w = self.params.tensors[lay.head()].data();
        let z = self.config.d_z;
        let blocks = [0, 1, 2, 3].map(|k| w[k * z..(k + 1) * z].to_vec());
        (blocks, self.params.tensors[lay.head() + 1].item())
    }

    /// `w · [z_gg ‖ z_hh ‖ z_hg ‖ z_gh] + b`.
    pub fn risk_score(&self, pooled: &[Vec<f64>; 4]) -> f64 {
        let (w, b) = self.head();
        b + w
            .iter()
            .zip(pooled)
            .map(|(wk, zk)| wk.iter().zip(zk).map(|(a, c)| a * c).sum::<f64>())
            .sum::<f64>()
    }
}
