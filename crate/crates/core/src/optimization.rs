//! Training objectives and loops.
//!
//! SRPO minimises `J_Ref + λ·J_Align` per question: the negative
//! log-likelihood of the dataset reference path plus, for every step-anchored
//! pair found by exploration, `-k·log σ(Δ)` where `Δ` is the log-likelihood
//! gap between the positive and negative continuations. The shared prefix
//! cancels from `Δ`, so only continuation steps are scored.
//!
//! SFT, DPO and ORPO baselines reuse the same batching, optimizer and
//! logging so that runs differ only in their objective.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{exact_metrics, ToyJudge};
use crate::exploration::{explore_dataset, ExplorationConfig, ExplorationCorpus, ExplorationError};
use crate::model::{grad_of, Expr, Gradient, ModelError, Params, PolicyModel};
use crate::pipeline::Dataset;
use crate::reasoning::{ContrastivePair, PathError, PathKind, QuestionId, ReasoningPath};
use crate::seed::{derive_seed, rng_for};
use crate::world::Question;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no question has a complete contrastive pair; {method} needs at least one")]
    NoPairs { method: Method },
    #[error("corpus question {0} is not in the dataset")]
    CorpusMismatch(QuestionId),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch} step {step} (questions {questions:?}): {source}")]
    Divergence {
        epoch: usize,
        step: usize,
        questions: Vec<QuestionId>,
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exploration(#[from] ExplorationError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("evaluation snapshot failed: {0}")]
    Snapshot(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Srpo,
    Sft,
    Dpo,
    Orpo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Srpo, Method::Sft, Method::Dpo, Method::Orpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Srpo => "srpo",
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Orpo => "orpo",
        }
    }

    pub fn needs_corpus(self) -> bool {
        !matches!(self, Method::Sft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected srpo, sft, dpo or orpo)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Scale of the step alignment loss.
    pub k: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Re-explore with the current model every this many epochs; 0 disables.
    pub refresh_every: usize,
    /// Divide every log-likelihood term by its number of steps.
    pub length_normalize: bool,
    pub dpo_beta: f64,
    pub orpo_weight: f64,
    /// Reference paths used for supervised warm start before training; 0 disables.
    pub warm_start_examples: usize,
    pub warm_start_epochs: usize,
    /// Training questions scored exactly after every epoch; 0 disables.
    pub snapshot_questions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            k: 1.0,
            learning_rate: 5e-5,
            batch_size: 8,
            epochs: 5,
            optimizer: AdamConfig::default(),
            seed: 0,
            refresh_every: 1,
            length_normalize: false,
            dpo_beta: 0.1,
            orpo_weight: 1.0,
            warm_start_examples: 0,
            warm_start_epochs: 1,
            snapshot_questions: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad(format!("k must be > 0, got {}", self.k));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.epsilon <= 0.0 {
            return bad("optimizer needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        if !(self.dpo_beta > 0.0) || !(self.orpo_weight >= 0.0) {
            return bad("dpo_beta must be > 0 and orpo_weight >= 0".into());
        }
        Ok(())
    }
}

fn length_scale(n: usize, normalize: bool) -> f64 {
    if normalize {
        1.0 / n as f64
    } else {
        1.0
    }
}

/// `J_Ref`: negative log-likelihood of a reference path.
pub fn ref_expr<'a>(q: &'a Question, path: &'a ReasoningPath, normalize: bool) -> Expr<'a> {
    Expr::loglik(q, &[], path.states()).scale(-length_scale(path.len(), normalize))
}

/// `Δ`: continuation log-likelihood of the positive minus the negative.
pub fn margin_expr<'a>(q: &'a Question, pair: &'a ContrastivePair, normalize: bool) -> Expr<'a> {
    let prefix = pair.prefix.states();
    let pos = Expr::loglik(q, prefix, pair.positive.states()).scale(length_scale(pair.positive.len(), normalize));
    let neg = Expr::loglik(q, prefix, pair.negative.states()).scale(length_scale(pair.negative.len(), normalize));
    pos.minus(neg)
}

/// `-k·log σ(Δ)` for one pair.
pub fn align_step_expr<'a>(q: &'a Question, pair: &'a ContrastivePair, k: f64, normalize: bool) -> Expr<'a> {
    margin_expr(q, pair, normalize).log_sigmoid().scale(-k)
}

pub fn align_total_expr<'a>(q: &'a Question, pairs: &'a [ContrastivePair], k: f64, normalize: bool) -> Expr<'a> {
    Expr::Sum(pairs.iter().map(|p| align_step_expr(q, p, k, normalize)).collect())
}

/// `J_Ref + λ·J_Align`. At `λ = 0` the alignment terms are left out entirely,
/// so the objective is the reference loss itself rather than an equal value.
pub fn total_expr<'a>(
    q: &'a Question,
    reference: &'a ReasoningPath,
    pairs: &'a [ContrastivePair],
    lambda: f64,
    k: f64,
    normalize: bool,
) -> Expr<'a> {
    let r = ref_expr(q, reference, normalize);
    if lambda == 0.0 || pairs.is_empty() {
        return r;
    }
    Expr::Sum(vec![r, align_total_expr(q, pairs, k, normalize).scale(lambda)])
}

pub fn loss_ref(model: &PolicyModel, q: &Question, path: &ReasoningPath) -> Result<f64> {
    path.ensure_kind(PathKind::Reference)?;
    Ok(ref_expr(q, path, false).value(model)?)
}

pub fn loss_align_step(model: &PolicyModel, q: &Question, pair: &ContrastivePair, k: f64) -> Result<f64> {
    Ok(align_step_expr(q, pair, k, false).value(model)?)
}

pub fn loss_align_total(model: &PolicyModel, q: &Question, pairs: &[ContrastivePair], k: f64) -> Result<f64> {
    Ok(align_total_expr(q, pairs, k, false).value(model)?)
}

pub fn loss_total(
    model: &PolicyModel,
    q: &Question,
    reference: &ReasoningPath,
    pairs: &[ContrastivePair],
    cfg: &TrainConfig,
) -> Result<f64> {
    reference.ensure_kind(PathKind::Reference)?;
    Ok(total_expr(q, reference, pairs, cfg.lambda, cfg.k, cfg.length_normalize).value(model)?)
}

/// `(L(τ⁺) - L(τ⁻), Δ)`: the whole-path likelihood difference and the
/// continuation-only margin. They agree up to rounding because the shared
/// prefix contributes identically to both paths.
pub fn cancellation_sides(model: &PolicyModel, q: &Question, pair: &ContrastivePair) -> Result<(f64, f64)> {
    let full = model.path_loglik(q, &pair.positive_path(q.id))? - model.path_loglik(q, &pair.negative_path(q.id))?;
    let cont = margin_expr(q, pair, false).value(model)?;
    Ok((full, cont))
}

/// DPO on whole paths: `-log σ(β[(Lθ(c) - Lref(c)) - (Lθ(r) - Lref(r))])`,
/// where the reference log-likelihoods are frozen constants.
pub fn dpo_expr<'a>(
    q: &'a Question,
    chosen: &'a ReasoningPath,
    rejected: &'a ReasoningPath,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Expr<'a> {
    Expr::Sum(vec![
        Expr::loglik(q, &[], chosen.states()),
        Expr::loglik(q, &[], rejected.states()).neg(),
        Expr::Const(ref_rejected - ref_chosen),
    ])
    .scale(beta)
    .log_sigmoid()
    .neg()
}

/// Log-odds of a path's per-step likelihood: `a - log(1 - e^a)` with
/// `a = L(τ) / |τ|`.
fn log_odds_expr<'a>(q: &'a Question, path: &'a ReasoningPath) -> Expr<'a> {
    let a = Expr::loglik(q, &[], path.states()).scale(1.0 / path.len() as f64);
    a.clone().minus(a.log1m_exp())
}

/// ORPO on whole paths: NLL of the chosen path plus `weight` times
/// `-log σ(log-odds(c) - log-odds(r))`.
pub fn orpo_expr<'a>(
    q: &'a Question,
    chosen: &'a ReasoningPath,
    rejected: &'a ReasoningPath,
    weight: f64,
    normalize: bool,
) -> Expr<'a> {
    let nll = Expr::loglik(q, &[], chosen.states()).scale(-length_scale(chosen.len(), normalize));
    if weight == 0.0 {
        return nll;
    }
    let pref = log_odds_expr(q, chosen).minus(log_odds_expr(q, rejected)).log_sigmoid().neg();
    Expr::Sum(vec![nll, pref.scale(weight)])
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(model: &PolicyModel, lr: f64, cfg: AdamConfig) -> Self {
        let n = model.params().len();
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grad: &Gradient) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut i = 0;
        for (p, g) in params.arrays_mut().into_iter().zip(grad.values.arrays()) {
            for (x, &gi) in p.iter_mut().zip(g) {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.cfg.epsilon);
                i += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub j_ref: f64,
    pub j_align: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub sr: f64,
    pub er: f64,
    pub ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_ref: f64,
    pub mean_align: f64,
    pub mean_total: f64,
    /// Pairs available to this epoch's objective.
    pub corpus_pairs: usize,
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub method: Method,
    pub config: TrainConfig,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    /// How the worked-example context reached the policy.
    pub context_realization: String,
}

impl TrainingLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tepoch\tj_ref\tj_align\ttotal\tgrad_norm\tpairs\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{}\n",
                r.step, r.epoch, r.j_ref, r.j_align, r.total, r.grad_norm, r.pairs
            ));
        }
        s
    }

    /// Summary record without the per-step rows.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "config": self.config,
            "initial_checksum": self.initial_checksum,
            "final_checksum": self.final_checksum,
            "steps": self.steps.len(),
            "epochs": self.epochs,
            "context_realization": self.context_realization,
        })
    }
}

pub struct TrainOutput {
    pub model: PolicyModel,
    pub log: TrainingLog,
    /// Corpus used by the last SRPO epoch.
    pub corpus: Option<ExplorationCorpus>,
}

/// One question's contribution to a batch.
enum Example<'a> {
    Srpo {
        q: &'a Question,
        reference: &'a ReasoningPath,
        pairs: &'a [ContrastivePair],
    },
    Dpo {
        q: &'a Question,
        chosen: ReasoningPath,
        rejected: ReasoningPath,
        ref_chosen: f64,
        ref_rejected: f64,
    },
    Orpo {
        q: &'a Question,
        chosen: ReasoningPath,
        rejected: ReasoningPath,
    },
}

struct Parts {
    j_ref: f64,
    j_align: f64,
    total: f64,
    pairs: usize,
}

impl Example<'_> {
    fn question(&self) -> &Question {
        match self {
            Example::Srpo { q, .. } | Example::Dpo { q, .. } | Example::Orpo { q, .. } => q,
        }
    }

    fn grad(&self, model: &PolicyModel, cfg: &TrainConfig) -> std::result::Result<(Parts, Gradient), ModelError> {
        match self {
            Example::Srpo { q, reference, pairs } => {
                if cfg!(debug_assertions) && cfg.lambda > 0.0 {
                    for p in pairs.iter() {
                        let (full, cont) = cancellation_sides(model, q, p).map_err(|e| ModelError::NonFinite {
                            context: e.to_string(),
                        })?;
                        debug_assert!((full - cont).abs() <= 1e-12 * (1.0 + full.abs()), "{full} vs {cont}");
                    }
                }
                let expr = total_expr(q, reference, pairs, cfg.lambda, cfg.k, cfg.length_normalize);
                let (total, grad) = grad_of(model, &expr)?;
                let j_ref = ref_expr(q, reference, cfg.length_normalize).value(model)?;
                let j_align = if cfg.lambda > 0.0 && !pairs.is_empty() {
                    align_total_expr(q, pairs, cfg.k, cfg.length_normalize).value(model)?
                } else {
                    0.0
                };
                let pairs = if cfg.lambda > 0.0 { pairs.len() } else { 0 };
                Ok((
                    Parts {
                        j_ref,
                        j_align,
                        total,
                        pairs,
                    },
                    grad,
                ))
            }
            Example::Dpo {
                q,
                chosen,
                rejected,
                ref_chosen,
                ref_rejected,
            } => {
                let expr = dpo_expr(q, chosen, rejected, *ref_chosen, *ref_rejected, cfg.dpo_beta);
                let (total, grad) = grad_of(model, &expr)?;
                Ok((
                    Parts {
                        j_ref: 0.0,
                        j_align: total,
                        total,
                        pairs: 1,
                    },
                    grad,
                ))
            }
            Example::Orpo { q, chosen, rejected } => {
                let expr = orpo_expr(q, chosen, rejected, cfg.orpo_weight, cfg.length_normalize);
                let (total, grad) = grad_of(model, &expr)?;
                let j_ref = Expr::loglik(q, &[], chosen.states())
                    .scale(-length_scale(chosen.len(), cfg.length_normalize))
                    .value(model)?;
                Ok((
                    Parts {
                        j_ref,
                        j_align: total - j_ref,
                        total,
                        pairs: 1,
                    },
                    grad,
                ))
            }
        }
    }
}

struct Trainer<'a> {
    method: Method,
    cfg: &'a TrainConfig,
    model: PolicyModel,
    adam: Adam,
    log: TrainingLog,
    step: usize,
    snapshot_set: Option<Dataset>,
}

impl<'a> Trainer<'a> {
    fn new(method: Method, model: PolicyModel, cfg: &'a TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let snapshot_set = (cfg.snapshot_questions > 0).then(|| {
            let n = cfg.snapshot_questions.min(dataset.records.len());
            Dataset::new(dataset.world.clone(), dataset.records[..n].to_vec())
        });
        let checksum = model.checksum();
        Ok(Self {
            method,
            cfg,
            adam: Adam::new(&model, cfg.learning_rate, cfg.optimizer.clone()),
            log: TrainingLog {
                method,
                config: cfg.clone(),
                initial_checksum: checksum.clone(),
                final_checksum: checksum,
                steps: Vec::new(),
                epochs: Vec::new(),
                context_realization: context_realization(cfg),
            },
            model,
            step: 0,
            snapshot_set,
        })
    }

    /// One pass over `examples` in a seeded shuffled order. Batch gradients
    /// are computed in parallel and reduced in batch order.
    fn epoch(&mut self, epoch: usize, examples: &[Example<'_>], corpus_pairs: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, "batches", epoch as u64));
        let (mut sum_ref, mut sum_align, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(self.cfg.batch_size) {
            let model = &self.model;
            let cfg = self.cfg;
            let results: Vec<_> = batch.par_iter().map(|&i| examples[i].grad(model, cfg)).collect();
            let ids = || batch.iter().map(|&i| examples[i].question().id).collect::<Vec<_>>();
            let diverged = |source: ModelError| TrainError::Divergence {
                epoch,
                step: self.step,
                questions: ids(),
                source,
            };
            let mut grad = Gradient::zeros_for(model);
            let mut parts = Parts {
                j_ref: 0.0,
                j_align: 0.0,
                total: 0.0,
                pairs: 0,
            };
            for r in results {
                let (p, g) = r.map_err(diverged)?;
                grad.add_scaled(&g, 1.0)?;
                parts.j_ref += p.j_ref;
                parts.j_align += p.j_align;
                parts.total += p.total;
                parts.pairs += p.pairs;
            }
            let b = batch.len() as f64;
            grad.scale(1.0 / b);
            if !parts.total.is_finite() {
                return Err(diverged(ModelError::NonFinite {
                    context: "batch loss".into(),
                }));
            }
            grad.ensure_finite().map_err(diverged)?;
            self.adam.step(self.model.params_mut(), &grad);
            self.log.steps.push(StepRow {
                step: self.step,
                epoch,
                j_ref: parts.j_ref / b,
                j_align: parts.j_align / b,
                total: parts.total / b,
                grad_norm: grad.norm(),
                pairs: parts.pairs,
            });
            self.step += 1;
            sum_ref += parts.j_ref;
            sum_align += parts.j_align;
            sum_total += parts.total;
        }
        let n = examples.len().max(1) as f64;
        let snapshot = match &self.snapshot_set {
            Some(ds) => {
                let judge = ToyJudge::new(ds.world.clone());
                let m = exact_metrics(&self.model, ds, &judge, 1.0).map_err(|e| TrainError::Snapshot(e.to_string()))?;
                Some(Snapshot {
                    sr: m.sr,
                    er: m.er,
                    ser: m.ser,
                })
            }
            None => None,
        };
        self.log.epochs.push(EpochRow {
            epoch,
            mean_ref: sum_ref / n,
            mean_align: sum_align / n,
            mean_total: sum_total / n,
            corpus_pairs,
            snapshot,
        });
        Ok(())
    }

    fn finish(mut self, corpus: Option<ExplorationCorpus>) -> TrainOutput {
        self.log.final_checksum = self.model.checksum();
        debug_assert_eq!(self.log.method, self.method);
        TrainOutput {
            model: self.model,
            log: self.log,
            corpus,
        }
    }
}

fn context_realization(cfg: &TrainConfig) -> String {
    if cfg.warm_start_examples > 0 {
        format!(
            "grammar-masked decoding + warm start on {} reference paths for {} epochs",
            cfg.warm_start_examples, cfg.warm_start_epochs
        )
    } else {
        "grammar-masked decoding".into()
    }
}

fn check_corpus(dataset: &Dataset, corpus: &ExplorationCorpus) -> Result<()> {
    for e in &corpus.entries {
        if dataset.get(e.question_id).is_none() {
            return Err(TrainError::CorpusMismatch(e.question_id));
        }
    }
    Ok(())
}

fn srpo_examples<'a>(dataset: &'a Dataset, corpus: Option<&'a ExplorationCorpus>) -> Vec<Example<'a>> {
    let by_q = corpus.map(|c| c.pairs_by_question()).unwrap_or_default();
    dataset
        .records
        .iter()
        .map(|r| Example::Srpo {
            q: &r.question,
            reference: &r.reasoning,
            pairs: by_q.get(&r.question.id).copied().unwrap_or(&[]),
        })
        .collect()
}

/// SRPO. The corpus is replaced by a fresh exploration with the current
/// model every `refresh_every` epochs. At `λ = 0` no alignment term is built
/// and no refresh runs, so the trajectory is exactly that of SFT.
pub fn train_srpo(
    init: PolicyModel,
    dataset: &Dataset,
    corpus: &ExplorationCorpus,
    cfg: &TrainConfig,
    explore: &ExplorationConfig,
) -> Result<TrainOutput> {
    check_corpus(dataset, corpus)?;
    let mut t = Trainer::new(Method::Srpo, init, cfg, dataset)?;
    let mut current = corpus.clone();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.lambda > 0.0 && cfg.refresh_every > 0 && epoch % cfg.refresh_every == 0 {
            let seed = derive_seed(cfg.seed, "refresh", epoch as u64);
            current = explore_dataset(&t.model, dataset, explore, seed)?;
        }
        let examples = srpo_examples(dataset, (cfg.lambda > 0.0).then_some(&current));
        let pairs = if cfg.lambda > 0.0 { current.total_pairs() } else { 0 };
        t.epoch(epoch, &examples, pairs)?;
    }
    Ok(t.finish(Some(current)))
}

/// Supervised fine-tuning on every reference path.
pub fn train_sft(init: PolicyModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut t = Trainer::new(Method::Sft, init, &cfg, dataset)?;
    let examples = srpo_examples(dataset, None);
    for epoch in 0..cfg.epochs {
        t.epoch(epoch, &examples, 0)?;
    }
    Ok(t.finish(None))
}

/// Whole-path preference pairs: for each question with at least one pair,
/// the pair at its earliest step, extended to full paths.
pub fn whole_path_pairs<'a>(
    dataset: &'a Dataset,
    corpus: &ExplorationCorpus,
) -> Vec<(&'a Question, ReasoningPath, ReasoningPath)> {
    dataset
        .records
        .iter()
        .filter_map(|r| {
            let e = corpus.entry(r.question.id)?;
            let (c, rej) = e.earliest_pair()?;
            Some((&r.question, c, rej))
        })
        .collect()
}

/// DPO against a frozen copy of the initial model, on questions with at
/// least one complete pair.
pub fn train_dpo(init: PolicyModel, dataset: &Dataset, corpus: &ExplorationCorpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    check_corpus(dataset, corpus)?;
    let pairs = whole_path_pairs(dataset, corpus);
    if pairs.is_empty() {
        return Err(TrainError::NoPairs { method: Method::Dpo });
    }
    let reference = init.clone();
    let mut examples = Vec::with_capacity(pairs.len());
    for (q, chosen, rejected) in pairs {
        let ref_chosen = reference.path_loglik(q, &chosen)?;
        let ref_rejected = reference.path_loglik(q, &rejected)?;
        examples.push(Example::Dpo {
            q,
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
        });
    }
    let mut t = Trainer::new(Method::Dpo, init, cfg, dataset)?;
    let n = examples.len();
    for epoch in 0..cfg.epochs {
        t.epoch(epoch, &examples, n)?;
    }
    Ok(t.finish(None))
}

/// ORPO on questions with at least one complete pair.
pub fn train_orpo(init: PolicyModel, dataset: &Dataset, corpus: &ExplorationCorpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    check_corpus(dataset, corpus)?;
    let examples: Vec<Example<'_>> = whole_path_pairs(dataset, corpus)
        .into_iter()
        .map(|(q, chosen, rejected)| Example::Orpo { q, chosen, rejected })
        .collect();
    if examples.is_empty() {
        return Err(TrainError::NoPairs { method: Method::Orpo });
    }
    let mut t = Trainer::new(Method::Orpo, init, cfg, dataset)?;
    let n = examples.len();
    for epoch in 0..cfg.epochs {
        t.epoch(epoch, &examples, n)?;
    }
    Ok(t.finish(None))
}

/// Supervised pretraining on the first `warm_start_examples` reference
/// paths. Returns the model unchanged when disabled.
pub fn warm_start(model: PolicyModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<PolicyModel> {
    if cfg.warm_start_examples == 0 || cfg.warm_start_epochs == 0 {
        return Ok(model);
    }
    let n = cfg.warm_start_examples.min(dataset.records.len());
    let subset = Dataset::new(dataset.world.clone(), dataset.records[..n].to_vec());
    let warm = TrainConfig {
        epochs: cfg.warm_start_epochs,
        seed: derive_seed(cfg.seed, "warm-start", 0),
        snapshot_questions: 0,
        ..cfg.clone()
    };
    Ok(train_sft(model, &subset, &warm)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploration::explore_dataset;
    use crate::model::{expr::sigmoid, ModelConfig};
    use crate::pipeline::{run_pipeline, PipelineConfig};
    use crate::reasoning::{Continuation, Prefix, Step};
    use crate::world::WorldConfig;

    fn data(n: usize) -> Dataset {
        let world = WorldConfig::default();
        let (records, _) = run_pipeline(n, 21, &world, &PipelineConfig::default()).unwrap();
        Dataset::new(world, records)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 2,
            snapshot_questions: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reference_loss_gates_on_kind() {
        let ds = data(2);
        let model = PolicyModel::new(&ds.world, &ModelConfig::default(), 1).unwrap();
        let r = &ds.records[0];
        assert!(loss_ref(&model, &r.question, &r.reasoning).unwrap() > 0.0);
        let sampled = r.reasoning.clone().with_kind(PathKind::SampledBackbone);
        assert!(matches!(loss_ref(&model, &r.question, &sampled), Err(TrainError::Path(_))));
    }

    #[test]
    fn zero_margin_alignment_values() {
        let ds = data(5);
        let model = PolicyModel::new(&ds.world, &ModelConfig::default(), 1).unwrap();
        let r = ds.records.iter().find(|r| r.answer.is_refusal()).unwrap();
        // From the root of a fresh model, REFUSE and ANSWER(0) are single-step
        // continuations with equal probability, so the margin is zero.
        let pair = ContrastivePair::new(
            1,
            Prefix::root(),
            Continuation::new(vec![Step::Refuse]).unwrap(),
            Continuation::new(vec![Step::Answer(0)]).unwrap(),
            r.answer,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_align_step(&model, &r.question, &pair, 1.0).unwrap() - ln2).abs() < 1e-12);
        assert!((loss_align_step(&model, &r.question, &pair, 2.0).unwrap() - 2.0 * ln2).abs() < 1e-12);
        let two = [pair.clone(), pair.clone()];
        assert!((loss_align_total(&model, &r.question, &two, 1.0).unwrap() - 2.0 * ln2).abs() < 1e-12);
        assert_eq!(loss_align_total(&model, &r.question, &[], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn margin_derivative_matches_closed_form() {
        // d/dΔ [-k log σ(Δ)] = -k σ(-Δ)
        let k = 1.7;
        for delta in [-3.0, -0.4, 0.0, 0.9, 4.0] {
            let h = 1e-6;
            let f = |d: f64| -k * crate::model::expr::log_sigmoid(d);
            let numeric = (f(delta + h) - f(delta - h)) / (2.0 * h);
            assert!((numeric - (-k * sigmoid(-delta))).abs() < 1e-8);
        }
    }

    #[test]
    fn total_reduces_and_is_affine() {
        let ds = data(30);
        let model = PolicyModel::new_random(&ds.world, &ModelConfig::default(), 3).unwrap();
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 1).unwrap();
        let e = corpus.entries.iter().find(|e| !e.pairs.is_empty()).unwrap();
        let r = ds.get(e.question_id).unwrap();
        let at = |lambda: f64| {
            let cfg = TrainConfig {
                lambda,
                ..TrainConfig::default()
            };
            loss_total(&model, &r.question, &r.reasoning, &e.pairs, &cfg).unwrap()
        };
        let j_ref = loss_ref(&model, &r.question, &r.reasoning).unwrap();
        let j_align = loss_align_total(&model, &r.question, &e.pairs, 1.0).unwrap();
        assert_eq!(at(0.0), j_ref);
        assert!((at(0.5) - (j_ref + 0.5 * j_align)).abs() < 1e-12);
        assert!((at(1.0) - 2.0 * at(0.5) + at(0.0)).abs() < 1e-12);
        let cfg = TrainConfig::default();
        assert_eq!(loss_total(&model, &r.question, &r.reasoning, &[], &cfg).unwrap(), j_ref);
    }

    #[test]
    fn one_step_on_a_pair_widens_its_margin() {
        let ds = data(30);
        let model = PolicyModel::new_random(&ds.world, &ModelConfig::default(), 5).unwrap();
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 4).unwrap();
        let e = corpus.entries.iter().find(|e| !e.pairs.is_empty()).unwrap();
        let q = &ds.get(e.question_id).unwrap().question;
        let pair = &e.pairs[0];
        let margin = |m: &PolicyModel| margin_expr(q, pair, false).value(m).unwrap();
        let (_, g) = grad_of(&model, &align_step_expr(q, pair, 1.0, false)).unwrap();
        let mut stepped = model.clone();
        for i in 0..stepped.params().len() {
            let x = stepped.params().get(i);
            stepped.params_mut().set(i, x - 1e-4 * g.values.get(i));
        }
        assert!(margin(&stepped) > margin(&model));
    }

    #[test]
    fn dpo_at_reference_is_log2() {
        let ds = data(30);
        let model = PolicyModel::new_random(&ds.world, &ModelConfig::default(), 2).unwrap();
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 3).unwrap();
        for (q, c, r) in whole_path_pairs(&ds, &corpus) {
            let lc = model.path_loglik(q, &c).unwrap();
            let lr = model.path_loglik(q, &r).unwrap();
            for beta in [0.1, 1.0, 5.0] {
                let v = dpo_expr(q, &c, &r, lc, lr, beta).value(&model).unwrap();
                assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orpo_without_preference_is_chosen_nll() {
        let ds = data(30);
        let model = PolicyModel::new_random(&ds.world, &ModelConfig::default(), 2).unwrap();
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 3).unwrap();
        let (q, c, r) = whole_path_pairs(&ds, &corpus).into_iter().next().unwrap();
        let v = orpo_expr(q, &c, &r, 0.0, false).value(&model).unwrap();
        assert_eq!(v, -model.path_loglik(q, &c).unwrap());
        assert!(orpo_expr(q, &c, &r, 1.0, false).value(&model).unwrap() > v);
    }

    #[test]
    fn srpo_at_zero_lambda_is_sft() {
        let ds = data(24);
        let init = PolicyModel::new(&ds.world, &ModelConfig::default(), 7).unwrap();
        let corpus = explore_dataset(&init, &ds, &ExplorationConfig::default(), 7).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let a = train_srpo(init.clone(), &ds, &corpus, &cfg, &ExplorationConfig::default()).unwrap();
        let b = train_sft(init, &ds, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        let pa: Vec<_> = a.log.steps.iter().map(|s| s.total.to_bits()).collect();
        let pb: Vec<_> = b.log.steps.iter().map(|s| s.total.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn trainers_are_deterministic() {
        let ds = data(16);
        let init = PolicyModel::new(&ds.world, &ModelConfig::default(), 9).unwrap();
        let corpus = explore_dataset(&init, &ds, &ExplorationConfig::default(), 9).unwrap();
        let cfg = small_cfg();
        let ex = ExplorationConfig::default();
        let a = train_srpo(init.clone(), &ds, &corpus, &cfg, &ex).unwrap();
        let b = train_srpo(init.clone(), &ds, &corpus, &cfg, &ex).unwrap();
        assert_eq!(a.log.final_checksum, b.log.final_checksum);
        assert_ne!(a.log.final_checksum, a.log.initial_checksum);
        let d1 = train_dpo(init.clone(), &ds, &corpus, &cfg).unwrap();
        let d2 = train_dpo(init.clone(), &ds, &corpus, &cfg).unwrap();
        assert_eq!(d1.log.final_checksum, d2.log.final_checksum);
        let o1 = train_orpo(init.clone(), &ds, &corpus, &cfg).unwrap();
        let o2 = train_orpo(init, &ds, &corpus, &cfg).unwrap();
        assert_eq!(o1.log.final_checksum, o2.log.final_checksum);
    }

    #[test]
    fn preference_trainers_need_pairs() {
        let ds = data(4);
        let init = PolicyModel::new(&ds.world, &ModelConfig::default(), 9).unwrap();
        let empty = ExplorationCorpus {
            seed: 0,
            config: ExplorationConfig::default(),
            entries: Vec::new(),
        };
        assert!(matches!(
            train_dpo(init.clone(), &ds, &empty, &small_cfg()),
            Err(TrainError::NoPairs { .. })
        ));
        assert!(matches!(train_orpo(init, &ds, &empty, &small_cfg()), Err(TrainError::NoPairs { .. })));
    }

    #[test]
    fn sft_initial_loss_matches_legal_counts() {
        // On the fresh model every legal step is equally likely, so the first
        // batch's reference loss is the mean of Σ log |legal(prefix)|.
        let ds = data(8);
        let init = PolicyModel::new(&ds.world, &ModelConfig::default(), 1).unwrap();
        let expected: f64 = ds
            .records
            .iter()
            .map(|r| {
                let s = r.reasoning.states();
                (0..s.len())
                    .map(|t| (crate::world::legal_steps(&r.question, &ds.world, &s[..t]).len() as f64).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 8.0;
        let out = train_sft(init, &ds, &TrainConfig { epochs: 1, ..small_cfg() }).unwrap();
        assert!((out.log.steps[0].j_ref - expected).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TrainConfig {
            lambda: -0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { k: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
