//! Logit-adjusted softmax loss, binary logit-adjusted multi-label loss, and their
//! weighted combination, each returning the gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::dataset::ClassPrior;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Prior shift temperature of the softmax term.
    pub tau: f64,
    /// Prior shift temperature of the sigmoid terms.
    pub tau_b: f64,
    pub lambda_zs: f64,
    pub lambda_llm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            tau_b: 1.0,
            lambda_zs: 0.5,
            lambda_llm: 0.5,
        }
    }
}

impl LossConfig {
    /// The logit-adjustment baseline: both cue weights zero.
    pub fn baseline(self) -> Self {
        Self {
            lambda_zs: 0.0,
            lambda_llm: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || !self.tau_b.is_finite() {
            return Err(Error::Validation("loss temperatures must be finite".into()));
        }
        if !(self.lambda_zs >= 0.0 && self.lambda_zs.is_finite())
            || !(self.lambda_llm >= 0.0 && self.lambda_llm.is_finite())
        {
            return Err(Error::Validation("cue weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub la: f64,
    pub bla_zs: f64,
    pub bla_llm: f64,
    /// d total / d logits.
    pub grad: Vec<f64>,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("logits"))
    }
}

fn check_prior(prior: &ClassPrior, classes: usize) -> Result<()> {
    if prior.len() != classes {
        return Err(Error::DimensionMismatch(format!(
            "{classes} logits but a prior over {} classes",
            prior.len()
        )));
    }
    if prior.as_slice().iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Validation("prior must be strictly positive".into()));
    }
    Ok(())
}

/// Softmax cross-entropy on `logits + shift`. Writes `softmax - onehot(y)` into `grad`.
pub(crate) fn la_shifted(logits: &[f64], y: usize, shift: &[f64], grad: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (g, (&l, &s)) in grad.iter_mut().zip(logits.iter().zip(shift)) {
        *g = l + s;
        max = max.max(*g);
    }
    let mut sum = 0.0;
    for g in grad.iter_mut() {
        *g = (*g - max).exp();
        sum += *g;
    }
    let adjusted_y = logits[y] + shift[y];
    let loss = max + sum.ln() - adjusted_y;
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[y] -= 1.0;
    loss
}

/// Mean binary cross-entropy on `sigmoid(logits + shift)`. Adds `scale * gradient` into `grad`.
pub(crate) fn bla_shifted(logits: &[f64], target: &[f64], shift: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let c = logits.len() as f64;
    let mut loss = 0.0;
    for (i, (&l, &t)) in logits.iter().zip(target).enumerate() {
        let x = l + shift[i];
        loss += t * softplus(-x) + (1.0 - t) * softplus(x);
        grad[i] += scale * (sigmoid(x) - t) / c;
    }
    loss / c
}

/// Logit-adjusted softmax cross-entropy `-log softmax(θ + τ log π)_y` and its gradient.
pub fn la_loss(logits: &[f64], y: usize, prior: &ClassPrior, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_finite(logits)?;
    check_prior(prior, logits.len())?;
    if y >= logits.len() {
        return Err(Error::Validation(format!("label {y} out of range for {} classes", logits.len())));
    }
    let shift = prior.log_shift(tau);
    let mut grad = vec![0.0; logits.len()];
    let loss = la_shifted(logits, y, &shift, &mut grad);
    Ok((loss, grad))
}

fn check_target(target: &[f64], classes: usize) -> Result<()> {
    if target.len() != classes {
        return Err(Error::DimensionMismatch(format!(
            "{classes} logits but {} targets",
            target.len()
        )));
    }
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Validation("targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Binary logit-adjusted loss: mean over classes of BCE on `σ(θ + τ_b log π)`.
pub fn bla_loss(logits: &[f64], target: &[f64], prior: &ClassPrior, tau_b: f64) -> Result<(f64, Vec<f64>)> {
    check_finite(logits)?;
    check_prior(prior, logits.len())?;
    check_target(target, logits.len())?;
    let shift = prior.log_shift(tau_b);
    let mut grad = vec![0.0; logits.len()];
    let loss = bla_shifted(logits, target, &shift, 1.0, &mut grad);
    Ok((loss, grad))
}

/// Precomputed prior shifts for repeated evaluation of the combined objective.
#[derive(Debug, Clone)]
pub struct CueObjective {
    config: LossConfig,
    la_shift: Vec<f64>,
    bla_shift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub la: f64,
    pub bla_zs: f64,
    pub bla_llm: f64,
}

impl CueObjective {
    pub fn new(prior: &ClassPrior, config: LossConfig) -> Result<Self> {
        config.validate()?;
        check_prior(prior, prior.len())?;
        Ok(Self {
            config,
            la_shift: prior.log_shift(config.tau),
            bla_shift: prior.log_shift(config.tau_b),
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.la_shift.len()
    }

    /// Evaluates all three terms for one sample and overwrites `grad` with d total / d logits.
    pub fn eval(&self, logits: &[f64], y: usize, t_zs: &[f64], t_llm: &[f64], grad: &mut [f64]) -> Result<LossParts> {
        check_finite(logits)?;
        let la = la_shifted(logits, y, &self.la_shift, grad);
        let bla_zs = bla_shifted(logits, t_zs, &self.bla_shift, self.config.lambda_zs, grad);
        let bla_llm = bla_shifted(logits, t_llm, &self.bla_shift, self.config.lambda_llm, grad);
        Ok(LossParts {
            total: la + self.config.lambda_zs * bla_zs + self.config.lambda_llm * bla_llm,
            la,
            bla_zs,
            bla_llm,
        })
    }
}

/// The combined objective `LA + λ_zs·BLA(t_zs) + λ_llm·BLA(t_llm)`.
pub fn cue_loss(
    logits: &[f64],
    y: usize,
    t_zs: &[f64],
    t_llm: &[f64],
    prior: &ClassPrior,
    config: &LossConfig,
) -> Result<LossValue> {
    check_prior(prior, logits.len())?;
    check_target(t_zs, logits.len())?;
    check_target(t_llm, logits.len())?;
    if y >= logits.len() {
        return Err(Error::Validation(format!("label {y} out of range for {} classes", logits.len())));
    }
    if t_zs[y] != 1.0 || t_llm[y] != 1.0 {
        return Err(Error::Validation("cue targets must include the label".into()));
    }
    let objective = CueObjective::new(prior, *config)?;
    let mut grad = vec![0.0; logits.len()];
    let parts = objective.eval(logits, y, t_zs, t_llm, &mut grad)?;
    Ok(LossValue {
        total: parts.total,
        la: parts.la,
        bla_zs: parts.bla_zs,
        bla_llm: parts.bla_llm,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn prior(p: &[f64]) -> ClassPrior {
        ClassPrior::from_probabilities(p.to_vec()).unwrap()
    }

    #[test]
    fn la_examples() {
        let (l, _) = la_loss(&[0.0, 0.0], 1, &ClassPrior::uniform(2), 1.0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);

        let (l, g) = la_loss(&[0.0; 3], 2, &prior(&[0.7, 0.2, 0.1]), 1.0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_10, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], -0.9, epsilon = 1e-12);

        let (l, _) = la_loss(&[1.0, 0.0], 0, &prior(&[0.9, 0.1]), 0.0).unwrap();
        assert_abs_diff_eq!(l, 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn bla_examples() {
        let (l, _) = bla_loss(&[0.0, 0.0], &[1.0, 0.0], &prior(&[0.8, 0.2]), 0.0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);

        let (l, g) = bla_loss(&[0.0, 0.0], &[1.0, 1.0], &prior(&[0.8, 0.2]), 1.0).unwrap();
        assert_abs_diff_eq!(l, 1.301345, epsilon = 1e-6);
        assert_abs_diff_eq!(g[0], -0.277778, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], -0.416667, epsilon = 1e-6);
    }

    #[test]
    fn bla_stationary_when_target_matches_sigmoid() {
        // θ̃ = 0 gives σ = 1/2; a target of exactly 1/2 is only reachable through the
        // internal routine, which accepts soft values
        let shift = [0.3f64.ln(), 0.7f64.ln()];
        let logits = [-shift[0], -shift[1]];
        let mut grad = [0.0; 2];
        bla_shifted(&logits, &[0.5, 0.5], &shift, 1.0, &mut grad);
        assert_eq!(grad, [0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(la_loss(&[f64::NAN, 0.0], 0, &ClassPrior::uniform(2), 1.0).is_err());
        assert!(bla_loss(&[f64::INFINITY, 0.0], &[1.0, 0.0], &ClassPrior::uniform(2), 1.0).is_err());
        assert!(bla_loss(&[0.0, 0.0], &[0.5, 0.0], &ClassPrior::uniform(2), 1.0).is_err());
        assert!(la_loss(&[0.0, 0.0], 2, &ClassPrior::uniform(2), 1.0).is_err());
    }

    #[test]
    fn cue_loss_compositions() {
        let p = prior(&[0.5, 0.3, 0.2]);
        let theta = [0.4, -1.2, 0.9];
        let onehot = [0.0, 1.0, 0.0];
        let multi = [1.0, 1.0, 0.0];

        let base = LossConfig::default().baseline();
        let v = cue_loss(&theta, 1, &multi, &multi, &p, &base).unwrap();
        let (la, la_g) = la_loss(&theta, 1, &p, 1.0).unwrap();
        assert_eq!(v.total, la);
        assert_eq!(v.grad, la_g);

        let zs_only = LossConfig {
            lambda_zs: 1.0,
            lambda_llm: 0.0,
            ..LossConfig::default()
        };
        let v = cue_loss(&theta, 1, &onehot, &multi, &p, &zs_only).unwrap();
        let (bla, _) = bla_loss(&theta, &onehot, &p, 1.0).unwrap();
        assert_abs_diff_eq!(v.total, la + bla, epsilon = 1e-12);

        let half = LossConfig::default();
        let v = cue_loss(&theta, 1, &onehot, &multi, &p, &half).unwrap();
        assert_abs_diff_eq!(v.total, v.la + 0.5 * v.bla_zs + 0.5 * v.bla_llm, epsilon = 1e-9);

        assert!(cue_loss(&theta, 0, &onehot, &multi, &p, &half).is_err());
    }

    #[test]
    fn la_decreases_as_true_logit_grows() {
        let p = prior(&[0.6, 0.3, 0.1]);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let theta = [0.5, -0.2, step as f64 * 0.5];
            let (l, _) = la_loss(&theta, 2, &p, 1.0).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    }
}
