//! Fold-level training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clinical_cox_baseline, concordance_index, cosine_lr, AdamW};
use crate::datagen::{Cohort, Fold};
use crate::diffgraph::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::explain::{mean_blocks, normalized_shares, shapley_blocks, zero_blocks, BaselineKind, Blocks, Shares};
use crate::losses::{disentanglement_loss, disentanglement_terms, total_loss_var, DcForm, DcTerms, ReprBatch};
use crate::model::{FeatureSpace, Model, ModelDims, PatientInput, Predictions};
use crate::config::RunConfig;

/// How the per-batch Cox loss is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvReduction {
    /// Summed over uncensored patients.
    Sum,
    /// Divided by the batch size.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda_surv: f64,
    pub lambda_dis: f64,
    pub seed: u64,
    pub dc_form: DcForm,
    pub surv_reduction: SurvReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 64,
            lambda_surv: 1.0,
            lambda_dis: 7.0,
            seed: 0,
            dc_form: DcForm::Root,
            surv_reduction: SurvReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if !(self.lambda_surv >= 0.0) || !(self.lambda_dis >= 0.0) {
            return Err(Error::Config("lambda_surv and lambda_dis must be non-negative".into()));
        }
        Ok(())
    }

    /// Name of the model variant in reports.
    pub fn variant(&self) -> &'static str {
        if self.lambda_dis == 0.0 {
            "DIMAF-nodis"
        } else {
            "DIMAF"
        }
    }
}

/// Mean losses over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub surv: f64,
    pub dis: f64,
    pub d1: f64,
    pub d2: f64,
    pub total: f64,
}

/// Trained model plus its training history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Seed of fold `fold` under a run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Minibatch AdamW on prepared inputs with a per-step cosine schedule.
pub fn train_model(
    cfg: &TrainConfig,
    model: Model,
    inputs: &[PatientInput],
    times: &[f64],
    events: &[bool],
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if inputs.len() != times.len() || inputs.len() != events.len() {
        return Err(Error::Input("inputs, times and events differ in length".into()));
    }
    if !events.iter().any(|e| *e) {
        return Err(Error::Input("training set has no uncensored patient".into()));
    }
    let mut model = model;
    let n = inputs.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut opt = AdamW::new(&model.params.tensors, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 5];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true)?;
            let refs: Vec<&PatientInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let bt: Vec<f64> = batch.iter().map(|&i| times[i]).collect();
            let be: Vec<bool> = batch.iter().map(|&i| events[i]).collect();
            let diag = |e: Error| Error::Numerical(format!("epoch {} step {step}: {e}", epoch + 1));
            let out = model.forward_batch_var(&mut g, &p, &refs).map_err(diag)?;
            let mut surv = g.cox_partial(out.risks, &bt, &be).map_err(diag)?;
            if cfg.surv_reduction == SurvReduction::Mean {
                surv = g.scale(surv, 1.0 / batch.len() as f64)?;
            }
            let dis = if cfg.lambda_dis > 0.0 && batch.len() >= 2 {
                Some(disentanglement_loss(&mut g, out.pooled, cfg.dc_form).map_err(diag)?)
            } else {
                None
            };
            let loss = total_loss_var(&mut g, surv, dis.map(|d| d.total), cfg.lambda_surv, cfg.lambda_dis)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("loss is {lv} at epoch {} batch {b}", epoch + 1)));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = p
                .0
                .iter()
                .zip(&model.params.tensors)
                .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
                .collect();
            let lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(&mut model.params.tensors, &grads, lr)?;
            step += 1;

            acc[0] += g.value(surv).item();
            if let Some(d) = dis {
                acc[1] += g.value(d.total).item();
                acc[2] += g.value(d.d1).item();
                acc[3] += g.value(d.d2).item();
            }
            acc[4] += lv;
        }
        let k = per_epoch as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            surv: acc[0] / k,
            dis: acc[1] / k,
            d1: acc[2] / k,
            d2: acc[3] / k,
            total: acc[4] / k,
        });
    }
    Ok(TrainedModel { model, history })
}

/// DC terms over stacked pooled representations of a whole evaluation set.
pub fn dc_report(pred: &Predictions, form: DcForm) -> Result<DcTerms> {
    let [gg, hh, hg, gh] = pred.pooled.clone();
    disentanglement_terms(&ReprBatch::new(gg, hh, hg, gh)?, form)
}

pub(crate) fn blocks_of(pred: &Predictions) -> Vec<Blocks> {
    (0..pred.risks.len())
        .map(|i| std::array::from_fn(|k| pred.pooled[k].row(i).to_vec()))
        .collect()
}

/// Everything a fold produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub c_index: f64,
    pub clinical_c_index: Option<f64>,
    pub dc: DcTerms,
    pub history: Vec<EpochStats>,
    pub shares: Shares,
    pub model: Model,
    pub features: FeatureSpace,
    pub baseline: Blocks,
}

/// Fits features and the model on the training part of `fold`, then
/// evaluates discrimination, disentanglement and attributions on its test part.
pub fn run_fold(cfg: &RunConfig, cohort: &Cohort, fold: &Fold, index: usize) -> Result<FoldOutcome> {
    let seed = fold_seed(cfg.train.seed, index);
    let features = FeatureSpace::fit(cohort, &fold.train, cfg.model.n_prototypes, &cfg.em, seed)?;
    let train_in = features.prepare_all(cohort, &fold.train)?;
    let test_in = features.prepare_all(cohort, &fold.test)?;
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
        (
            idx.iter().map(|&i| cohort.patients[i].survival.time).collect(),
            idx.iter().map(|&i| cohort.patients[i].survival.event).collect(),
        )
    };
    let (tr_t, tr_e) = pick(&fold.train);
    let (te_t, te_e) = pick(&fold.test);
    let dims = ModelDims {
        pathway_sizes: cohort.membership.sizes(),
        patch_dim: cohort.patch_dim(),
    };
    let model = Model::init(cfg.model.clone(), dims, seed)?;
    let trained = train_model(&cfg.train, model, &train_in, &tr_t, &tr_e, seed)?;
    let model = trained.model;

    let test_refs: Vec<&PatientInput> = test_in.iter().collect();
    let pred = model.predict(&test_refs)?;
    let c_index = concordance_index(&pred.risks, &te_t, &te_e)?;
    let dc = dc_report(&pred, cfg.train.dc_form)?;

    let baseline = match cfg.explain.baseline {
        BaselineKind::TrainMean => {
            let train_refs: Vec<&PatientInput> = train_in.iter().collect();
            mean_blocks(&blocks_of(&model.predict(&train_refs)?))?
        }
        BaselineKind::Zero => zero_blocks(model.config.d_z),
    };
    let attrs: Vec<_> = blocks_of(&pred).iter().map(|z| shapley_blocks(&model, z, &baseline)).collect();
    let shares = normalized_shares(&attrs)?;

    let clin = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| cohort.patients[i].clinical.clone()).collect() };
    let clinical_c_index = match clinical_cox_baseline(&clin(&fold.train), &tr_t, &tr_e, &clin(&fold.test), &te_t, &te_e) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("fold {index}: clinical baseline unavailable: {e}");
            None
        }
    };
    let ids = |idx: &[usize]| idx.iter().map(|&i| cohort.patients[i].id.clone()).collect();
    Ok(FoldOutcome {
        fold: index,
        train_ids: ids(&fold.train),
        test_ids: ids(&fold.test),
        c_index,
        clinical_c_index,
        dc,
        history: trained.history,
        shares,
        model,
        features,
        baseline,
    })
}
