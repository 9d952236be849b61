use rand::Rng;

use super::{check_temperature, log_softmax, ModelError, PolicyModel, Result};
use crate::reasoning::{Continuation, PathKind, Prefix, ReasoningPath, Step};
use crate::world::Question;

/// Outcome of drawing a continuation: it reached a terminal, or it hit the
/// length limit first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Draw {
    Complete(Continuation),
    Truncated(Vec<Step>),
}

impl Draw {
    pub fn steps(&self) -> &[Step] {
        match self {
            Draw::Complete(c) => c.states(),
            Draw::Truncated(s) => s,
        }
    }

    pub fn is_truncated(&self) -> bool {
        matches!(self, Draw::Truncated(_))
    }
}

/// Index drawn from `softmax(logits / temperature)`; `-inf` entries are never drawn.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    check_temperature(temperature)?;
    let lp = log_softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, l) in lp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last = Some(i);
        }
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    last.ok_or(ModelError::NonFinite {
        context: "sampling distribution".into(),
    })
}

pub fn sample_step<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    prefix: &[Step],
    temperature: f64,
    rng: &mut R,
) -> Result<Step> {
    let ctx = model.context_for(q, prefix)?;
    let at = sample_from_logits(&ctx.logits, temperature, rng)?;
    Ok(ctx.legal[at])
}

/// Draws steps after `prefix` until a terminal or until the whole path
/// reaches `max_len` states.
pub fn sample_continuation<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    prefix: &Prefix,
    temperature: f64,
    rng: &mut R,
    max_len: usize,
) -> Result<Draw> {
    check_temperature(temperature)?;
    let max_len = max_len.min(model.dims().max_len);
    let mut states = prefix.states().to_vec();
    while states.len() < max_len {
        let s = sample_step(model, q, &states, temperature, rng)?;
        states.push(s);
        if s.is_terminal() {
            let cont = states.split_off(prefix.len());
            return Ok(Draw::Complete(Continuation::new(cont)?));
        }
    }
    Ok(Draw::Truncated(states.split_off(prefix.len())))
}

/// Whole-path draw from the root. A path that hits `max_len` without a
/// terminal is returned unterminated.
pub fn sample_path<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    temperature: f64,
    rng: &mut R,
    max_len: usize,
) -> Result<ReasoningPath> {
    let draw = sample_continuation(model, q, &Prefix::root(), temperature, rng, max_len)?;
    Ok(ReasoningPath::new(q.id, PathKind::SampledBackbone, draw.steps().to_vec())?)
}

/// Argmax decode; ties go to the earliest step in vocabulary order.
pub fn greedy_path(model: &PolicyModel, q: &Question, max_len: usize) -> Result<ReasoningPath> {
    let max_len = max_len.min(model.dims().max_len);
    let mut states = Vec::new();
    while states.len() < max_len {
        let ctx = model.context_for(q, &states)?;
        let mut best = 0;
        for (i, l) in ctx.logits.iter().enumerate() {
            if *l > ctx.logits[best] {
                best = i;
            }
        }
        let s = ctx.legal[best];
        states.push(s);
        if s.is_terminal() {
            break;
        }
    }
    Ok(ReasoningPath::new(q.id, PathKind::SampledBackbone, states)?)
}
