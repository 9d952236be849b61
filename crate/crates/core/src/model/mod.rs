//! The step policy `p(step | question, prefix)`.
//!
//! A one-hidden-layer scorer: the question's fact and instruction features
//! and a position-weighted sum of prefix step embeddings feed a `tanh`
//! hidden layer, projected to one logit per vocabulary step. Illegal steps
//! under the world grammar are masked to `-inf` before the softmax, which is
//! how the policy is held to the path format.
//!
//! Gradients are exact and hand-derived; see [`expr`] for composing losses.

mod checkpoint;
pub mod expr;
mod gradcheck;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::reasoning::{PathError, Prefix, ReasoningPath, Step};
use crate::world::{legal_steps, Question, Vocab, WorldConfig, WorldError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use expr::{grad_of, Expr};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use sampling::{greedy_path, sample_continuation, sample_from_logits, sample_path, sample_step, Draw};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot score after a terminated prefix")]
    TerminatedPrefix,
    #[error("step {step} is masked at position {position}")]
    Masked { step: Step, position: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("path of length {len} exceeds model context {max}")]
    TooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Path(#[from] PathError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 32 }
    }
}

/// Parameter arrays, row-major. [`Gradient`]s reuse the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub question_emb: Vec<f64>,
    pub step_emb: Vec<f64>,
    pub pool: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

pub(crate) const ARRAY_NAMES: [&str; 6] = ["question_emb", "step_emb", "pool", "hidden_bias", "out_w", "out_b"];

impl Params {
    fn zeros_like(other: &Params) -> Self {
        Self {
            question_emb: vec![0.0; other.question_emb.len()],
            step_emb: vec![0.0; other.step_emb.len()],
            pool: vec![0.0; other.pool.len()],
            hidden_bias: vec![0.0; other.hidden_bias.len()],
            out_w: vec![0.0; other.out_w.len()],
            out_b: vec![0.0; other.out_b.len()],
        }
    }

    pub fn arrays(&self) -> [&Vec<f64>; 6] {
        [
            &self.question_emb,
            &self.step_emb,
            &self.pool,
            &self.hidden_bias,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.question_emb,
            &mut self.step_emb,
            &mut self.pool,
            &mut self.hidden_bias,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view over all arrays in [`ARRAY_NAMES`] order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrays().into_iter().flat_map(|a| a.iter().copied())
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for a in self.arrays() {
            if index < a.len() {
                return a[index];
            }
            index -= a.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for a in self.arrays_mut() {
            if index < a.len() {
                a[index] = value;
                return;
            }
            index -= a.len();
        }
        panic!("parameter index out of range");
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.arrays().iter().zip(other.arrays()).all(|(a, b)| a.len() == b.len())
    }
}

/// Parameter-shaped gradient plus the number of loss terms accumulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Params,
    pub count: usize,
}

impl Gradient {
    pub fn zeros_for(model: &PolicyModel) -> Self {
        Self {
            values: Params::zeros_like(&model.params),
            count: 0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) -> Result<()> {
        if !self.values.same_shape(&other.values) {
            return Err(ModelError::Shape("gradient shapes differ".into()));
        }
        for (a, b) in self.values.arrays_mut().into_iter().zip(other.values.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        self.count += other.count;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.values.arrays_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, a) in ARRAY_NAMES.iter().zip(self.values.arrays()) {
            if let Some(i) = a.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    context: format!("gradient {name}[{i}]"),
                });
            }
        }
        Ok(())
    }
}

/// Sizes derived from the world and model configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub features: usize,
    pub hidden: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    world: WorldConfig,
    config: ModelConfig,
    vocab: Vocab,
    dims: Dims,
    params: Params,
}

fn feature_count(world: &WorldConfig) -> usize {
    let e = world.num_entities as usize;
    let m = world.value_modulus as usize;
    e * m + e + 2 + e + e * (e - 1) / 2
}

impl PolicyModel {
    /// Embeddings drawn from `U(-1/sqrt(d), 1/sqrt(d))`, pooling gains 1,
    /// output projection zero (so a fresh model is uniform over legal steps).
    pub fn new(world: &WorldConfig, config: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        world.validate()?;
        if config.hidden_dim == 0 {
            return Err(ModelError::Shape("hidden_dim must be positive".into()));
        }
        let vocab = world.vocab();
        let dims = Dims {
            vocab: vocab.len(),
            features: feature_count(world),
            hidden: config.hidden_dim,
            max_len: world.max_path_len,
        };
        let mut rng = crate::seed::rng_for(seed, "model-init", 0);
        let r = 1.0 / (dims.hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-r..r)).collect() };
        let params = Params {
            question_emb: uniform(dims.features * dims.hidden),
            step_emb: uniform(dims.vocab * dims.hidden),
            pool: vec![1.0; dims.max_len],
            hidden_bias: vec![0.0; dims.hidden],
            out_w: vec![0.0; dims.vocab * dims.hidden],
            out_b: vec![0.0; dims.vocab],
        };
        Ok(Self {
            world: world.clone(),
            config: config.clone(),
            vocab,
            dims,
            params,
        })
    }

    /// Same as [`PolicyModel::new`] but with a random output projection, so
    /// every parameter influences the logits. Used for gradient checks.
    pub fn new_random(world: &WorldConfig, config: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut model = Self::new(world, config, seed)?;
        let mut rng = crate::seed::rng_for(seed, "model-random", 0);
        let r = 1.0 / (model.dims.hidden as f64).sqrt();
        for v in model.params.out_w.iter_mut() {
            *v = rng.random_range(-2.0 * r..2.0 * r);
        }
        for v in model.params.out_b.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in model.params.hidden_bias.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        for v in model.params.pool.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        Ok(model)
    }

    pub(crate) fn from_parts(world: WorldConfig, config: ModelConfig, params: Params) -> Result<Self> {
        let fresh = Self::new(&world, &config, 0)?;
        if !fresh.params.same_shape(&params) {
            return Err(ModelError::Shape("parameter arrays do not match the configured dims".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "loaded parameters".into(),
            });
        }
        Ok(Self { params, ..fresh })
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.params.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn features(&self, q: &Question) -> Vec<usize> {
        let e = self.world.num_entities as usize;
        let m = self.world.value_modulus as usize;
        let mut f = Vec::with_capacity(2 * q.facts.len() + 4);
        for fact in &q.facts {
            f.push(fact.entity as usize * m + fact.value as usize);
            f.push(e * m + fact.entity as usize);
        }
        let kind = e * m + e;
        match q.instruction.mixed_pair() {
            None => f.push(kind),
            Some((a, b)) => {
                f.push(kind + 1);
                f.push(kind + 2 + a as usize);
                f.push(kind + 2 + b as usize);
                let pair = self.vocab.index(Step::Chk(a, b)).expect("mix pair in vocab") - e;
                f.push(kind + 2 + e + pair);
            }
        }
        f
    }

    /// Hidden pre-activation contributed by the question alone.
    fn question_base(&self, feats: &[usize]) -> Vec<f64> {
        let d = self.dims.hidden;
        let mut z = self.params.hidden_bias.clone();
        for &f in feats {
            for (zk, w) in z.iter_mut().zip(&self.params.question_emb[f * d..(f + 1) * d]) {
                *zk += w;
            }
        }
        z
    }

    fn step_index(&self, s: Step) -> Result<usize> {
        self.vocab
            .index(s)
            .ok_or_else(|| ModelError::World(WorldError::NotInVocab(s)))
    }

    fn pool_into(&self, pooled: &mut [f64], position: usize, step: usize) {
        let d = self.dims.hidden;
        let g = self.params.pool[position];
        for (p, w) in pooled.iter_mut().zip(&self.params.step_emb[step * d..(step + 1) * d]) {
            *p += g * w;
        }
    }

    fn hidden(&self, base: &[f64], pooled: &[f64]) -> Vec<f64> {
        base.iter().zip(pooled).map(|(b, p)| (b + p).tanh()).collect()
    }

    fn logit(&self, v: usize, h: &[f64]) -> f64 {
        let d = self.dims.hidden;
        self.params.out_b[v] + self.params.out_w[v * d..(v + 1) * d].iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
    }

    /// Legal steps after `prefix` with their vocabulary indices and logits.
    fn scored_context(&self, q: &Question, prefix: &[Step], base: &[f64], pooled: &[f64]) -> Result<Context> {
        if prefix.last().is_some_and(|s| s.is_terminal()) {
            return Err(ModelError::TerminatedPrefix);
        }
        let h = self.hidden(base, pooled);
        let legal = legal_steps(q, &self.world, prefix);
        let mut indices = Vec::with_capacity(legal.len());
        let mut logits = Vec::with_capacity(legal.len());
        for &s in &legal {
            let v = self.step_index(s)?;
            indices.push(v);
            logits.push(self.logit(v, &h));
        }
        Ok(Context {
            legal,
            indices,
            logits,
            h,
        })
    }

    fn context_for(&self, q: &Question, prefix: &[Step]) -> Result<Context> {
        if prefix.len() >= self.dims.max_len {
            return Err(ModelError::TooLong {
                len: prefix.len() + 1,
                max: self.dims.max_len,
            });
        }
        let feats = self.features(q);
        let base = self.question_base(&feats);
        let mut pooled = vec![0.0; self.dims.hidden];
        for (t, &s) in prefix.iter().enumerate() {
            self.pool_into(&mut pooled, t, self.step_index(s)?);
        }
        self.scored_context(q, prefix, &base, &pooled)
    }

    /// Logits over the whole vocabulary; masked steps are `-inf`.
    pub fn logits(&self, q: &Question, prefix: &Prefix) -> Result<Vec<f64>> {
        let ctx = self.context_for(q, prefix.states())?;
        let mut out = vec![f64::NEG_INFINITY; self.dims.vocab];
        for (&v, &l) in ctx.indices.iter().zip(&ctx.logits) {
            out[v] = l;
        }
        Ok(out)
    }

    /// Legal next steps with their probabilities at `temperature`.
    pub fn next_step_distribution(&self, q: &Question, prefix: &[Step], temperature: f64) -> Result<Vec<(Step, f64)>> {
        check_temperature(temperature)?;
        let ctx = self.context_for(q, prefix)?;
        let lp = log_softmax(&ctx.logits, temperature);
        Ok(ctx.legal.into_iter().zip(lp.into_iter().map(f64::exp)).collect())
    }

    /// `log p(step | q, prefix)` at temperature 1. Masked steps are an error.
    pub fn step_logprob(&self, q: &Question, prefix: &Prefix, step: Step) -> Result<f64> {
        let ctx = self.context_for(q, prefix.states())?;
        let at = ctx.legal.iter().position(|&s| s == step).ok_or(ModelError::Masked {
            step,
            position: prefix.len(),
        })?;
        Ok(log_softmax(&ctx.logits, 1.0)[at])
    }

    /// `log p(path | q)`: the sum of every transition's log-probability.
    pub fn path_loglik(&self, q: &Question, path: &ReasoningPath) -> Result<f64> {
        self.sequence_loglik(q, &[], path.states(), 1.0)
    }

    pub fn path_loglik_at(&self, q: &Question, path: &ReasoningPath, temperature: f64) -> Result<f64> {
        self.sequence_loglik(q, &[], path.states(), temperature)
    }

    /// Log-probability of `steps` emitted after `prefix` (prefix not scored).
    pub fn sequence_loglik(&self, q: &Question, prefix: &[Step], steps: &[Step], temperature: f64) -> Result<f64> {
        check_temperature(temperature)?;
        self.walk(q, prefix, steps, temperature, None)
    }

    /// Adds `scale * d/dθ log p(steps | q, prefix)` into `grad` and returns the
    /// log-probability itself.
    pub fn accumulate_loglik_grad(
        &self,
        q: &Question,
        prefix: &[Step],
        steps: &[Step],
        scale: f64,
        grad: &mut Gradient,
    ) -> Result<f64> {
        let value = self.walk(q, prefix, steps, 1.0, Some((scale, &mut grad.values)))?;
        grad.count += 1;
        Ok(value)
    }

    fn walk(
        &self,
        q: &Question,
        prefix: &[Step],
        steps: &[Step],
        temperature: f64,
        mut grad: Option<(f64, &mut Params)>,
    ) -> Result<f64> {
        let total = prefix.len() + steps.len();
        if total > self.dims.max_len {
            return Err(ModelError::TooLong {
                len: total,
                max: self.dims.max_len,
            });
        }
        let full: Vec<Step> = prefix.iter().chain(steps).copied().collect();
        let ids: Vec<usize> = full.iter().map(|&s| self.step_index(s)).collect::<Result<_>>()?;
        let feats = self.features(q);
        let base = self.question_base(&feats);
        let d = self.dims.hidden;
        let mut pooled = vec![0.0; d];
        let mut value = 0.0;
        // Hidden-layer gradient per scored position, for the pooling pass below.
        let mut gz: Vec<Option<Vec<f64>>> = vec![None; total];
        for t in 0..total {
            if t >= prefix.len() {
                let ctx = self.scored_context(q, &full[..t], &base, &pooled)?;
                let at = ctx.legal.iter().position(|&s| s == full[t]).ok_or(ModelError::Masked {
                    step: full[t],
                    position: t,
                })?;
                let lp = log_softmax(&ctx.logits, temperature);
                value += lp[at];
                if let Some((scale, g)) = grad.as_mut() {
                    let mut g_h = vec![0.0; d];
                    for (k, (&v, &l)) in ctx.indices.iter().zip(&lp).enumerate() {
                        let indicator = if k == at { 1.0 } else { 0.0 };
                        let gl = *scale * (indicator - l.exp());
                        g.out_b[v] += gl;
                        let w = &self.params.out_w[v * d..(v + 1) * d];
                        for ((gw, gh), (&hk, &wk)) in g.out_w[v * d..(v + 1) * d]
                            .iter_mut()
                            .zip(g_h.iter_mut())
                            .zip(ctx.h.iter().zip(w))
                        {
                            *gw += gl * hk;
                            *gh += gl * wk;
                        }
                    }
                    let g_z: Vec<f64> = g_h.iter().zip(&ctx.h).map(|(gh, h)| gh * (1.0 - h * h)).collect();
                    gz[t] = Some(g_z);
                }
            }
            self.pool_into(&mut pooled, t, ids[t]);
        }
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                context: format!("log-likelihood of {} steps", steps.len()),
            });
        }
        if let Some((_, g)) = grad {
            // suffix[u] = sum of hidden gradients at positions after u.
            let mut suffix = vec![0.0; d];
            for u in (0..total).rev() {
                let row = ids[u] * d;
                let gain = self.params.pool[u];
                let mut dot = 0.0;
                for k in 0..d {
                    g.step_emb[row + k] += gain * suffix[k];
                    dot += self.params.step_emb[row + k] * suffix[k];
                }
                g.pool[u] += dot;
                if let Some(g_z) = &gz[u] {
                    for (s, x) in suffix.iter_mut().zip(g_z) {
                        *s += x;
                    }
                }
            }
            // After the loop `suffix` holds the sum over all scored positions.
            for k in 0..d {
                g.hidden_bias[k] += suffix[k];
            }
            for &f in &feats {
                for k in 0..d {
                    g.question_emb[f * d + k] += suffix[k];
                }
            }
        }
        Ok(value)
    }
}

struct Context {
    legal: Vec<Step>,
    indices: Vec<usize>,
    logits: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Temperature(t))
    }
}

/// `log softmax(logits / temperature)`, stable for any finite input.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}
