//! Scalar loss expressions whose leaves are sequence log-likelihoods.
//!
//! Every objective in the crate (reference likelihood, step alignment, DPO,
//! ORPO) is a small tree over [`Expr`]. Reverse mode runs in two passes: a
//! node needs its child's value to form the child's adjoint, then each leaf
//! adds `adjoint * d log p / dθ` into the gradient.

use super::{Gradient, ModelError, PolicyModel, Result};
use crate::reasoning::Step;
use crate::world::Question;

#[derive(Debug, Clone)]
pub enum Expr<'a> {
    Const(f64),
    /// `log p(steps | question, prefix)`; the prefix itself is not scored.
    LogLik {
        question: &'a Question,
        prefix: &'a [Step],
        steps: &'a [Step],
    },
    Sum(Vec<Expr<'a>>),
    Scale(f64, Box<Expr<'a>>),
    /// `log σ(x)`.
    LogSigmoid(Box<Expr<'a>>),
    /// `log(1 - e^x)` for `x < 0`.
    Log1mExp(Box<Expr<'a>>),
}

impl<'a> Expr<'a> {
    pub fn loglik(question: &'a Question, prefix: &'a [Step], steps: &'a [Step]) -> Self {
        Expr::LogLik {
            question,
            prefix,
            steps,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Expr::Scale(c, Box::new(self))
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn log_sigmoid(self) -> Self {
        Expr::LogSigmoid(Box::new(self))
    }

    pub fn log1m_exp(self) -> Self {
        Expr::Log1mExp(Box::new(self))
    }

    pub fn minus(self, other: Expr<'a>) -> Self {
        Expr::Sum(vec![self, other.neg()])
    }

    pub fn value(&self, model: &PolicyModel) -> Result<f64> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::LogLik {
                question,
                prefix,
                steps,
            } => model.sequence_loglik(question, prefix, steps, 1.0)?,
            Expr::Sum(terms) => {
                let mut acc = 0.0;
                for t in terms {
                    acc += t.value(model)?;
                }
                acc
            }
            Expr::Scale(c, e) => c * e.value(model)?,
            Expr::LogSigmoid(e) => log_sigmoid(e.value(model)?),
            Expr::Log1mExp(e) => log1m_exp(e.value(model)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite {
                context: format!("{} node", self.label()),
            })
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Expr::Const(_) => "constant",
            Expr::LogLik { .. } => "log-likelihood",
            Expr::Sum(_) => "sum",
            Expr::Scale(..) => "scale",
            Expr::LogSigmoid(_) => "log-sigmoid",
            Expr::Log1mExp(_) => "log1m-exp",
        }
    }

    fn backward(&self, model: &PolicyModel, adjoint: f64, grad: &mut Gradient) -> Result<()> {
        if adjoint == 0.0 {
            return Ok(());
        }
        match self {
            Expr::Const(_) => Ok(()),
            Expr::LogLik {
                question,
                prefix,
                steps,
            } => model
                .accumulate_loglik_grad(question, prefix, steps, adjoint, grad)
                .map(|_| ()),
            Expr::Sum(terms) => terms.iter().try_for_each(|t| t.backward(model, adjoint, grad)),
            Expr::Scale(c, e) => e.backward(model, adjoint * c, grad),
            Expr::LogSigmoid(e) => {
                let x = e.value(model)?;
                e.backward(model, adjoint * sigmoid(-x), grad)
            }
            Expr::Log1mExp(e) => {
                let x = e.value(model)?;
                // d/dx log(1 - e^x) = -1 / (e^{-x} - 1)
                e.backward(model, -adjoint / (-x).exp_m1(), grad)
            }
        }
    }
}

/// Value and exact gradient of `expr` with respect to the model parameters.
pub fn grad_of(model: &PolicyModel, expr: &Expr<'_>) -> Result<(f64, Gradient)> {
    let value = expr.value(model)?;
    let mut grad = Gradient::zeros_for(model);
    expr.backward(model, 1.0, &mut grad)?;
    grad.ensure_finite()?;
    Ok((value, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = -softplus(-x)`, stable in both tails.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
