//! Categorical diffusion probability math.
//!
//! All arithmetic here is f64 regardless of how the denoiser stores its
//! parameters, so results can be compared against brute-force oracles at
//! 1e-10 and tighter. Sequences are treated position-by-position: the
//! forward corruption is independent per position, and the loss sums over
//! positions.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use rand::Rng;

/// Floor applied to probabilities before taking logs in KL and
/// reconstruction terms. Model outputs pass through a normalizer and can
/// underflow.
pub const LOG_FLOOR: f64 = 1e-12;

/// A probability vector over K token categories at one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Wrap a probability vector; entries must be nonnegative and sum to 1
    /// within 1e-9, with K >= 2.
    pub fn new(probs: Vec<f64>) -> Result<Categorical> {
        if probs.len() < 2 {
            return Err(Error::InvalidArg("categorical needs K >= 2".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArg(
                "categorical entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!(
                "categorical entries sum to {sum}, expected 1"
            )));
        }
        Ok(Categorical { probs })
    }

    /// Point mass on `token_id`.
    pub fn one_hot(token_id: usize, k: usize) -> Result<Categorical> {
        if k < 2 {
            return Err(Error::InvalidArg("categorical needs K >= 2".into()));
        }
        if token_id >= k {
            return Err(Error::InvalidArg(format!(
                "token id {token_id} out of range for K={k}"
            )));
        }
        let mut probs = vec![0.0; k];
        probs[token_id] = 1.0;
        Ok(Categorical { probs })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF sample. Deterministic given the rng state.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

fn check_token(token_id: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArg("need K >= 2".into()));
    }
    if token_id >= k {
        return Err(Error::InvalidArg(format!(
            "token id {token_id} out of range for K={k}"
        )));
    }
    Ok(())
}

/// One-step forward corruption `q(x_t | x_{t-1})`:
/// `(1 - beta_t) * onehot(x_prev) + beta_t / K`.
pub fn forward_step_probs(
    x_prev: usize,
    k: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Categorical> {
    check_token(x_prev, k)?;
    let beta = sched.beta(t)?;
    let base = beta / k as f64;
    let mut probs = vec![base; k];
    probs[x_prev] += 1.0 - beta;
    Ok(Categorical { probs })
}

/// Closed-form corruption `q(x_t | x_0)`:
/// `alpha_bar_t * onehot(x0) + (1 - alpha_bar_t) / K`.
pub fn forward_cumulative_probs(
    x0: usize,
    k: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Categorical> {
    check_token(x0, k)?;
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            t_max: sched.t_steps(),
        });
    }
    let abar = sched.alpha_bar(t)?;
    let base = (1.0 - abar) / k as f64;
    let mut probs = vec![base; k];
    probs[x0] += abar;
    Ok(Categorical { probs })
}

/// Draw `x_t ~ q(x_t | x_0)`.
pub fn sample_forward(
    x0: usize,
    k: usize,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<usize> {
    Ok(forward_cumulative_probs(x0, k, t, sched)?.sample(rng))
}

/// Posterior `q(x_{t-1} | x_t, x0_dist)` for `t >= 2`:
/// `theta = [alpha_t onehot(x_t) + (1-alpha_t)/K] .* [abar_{t-1} x0 + (1-abar_{t-1})/K]`,
/// normalized. `x0_dist` may be one-hot (the true x_0) or a predicted
/// distribution; the form is linear in it.
pub fn posterior_probs(
    x_t: usize,
    x0_dist: &Categorical,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Categorical> {
    let k = x0_dist.k();
    check_token(x_t, k)?;
    if t < 2 {
        return Err(Error::StepOutOfRange {
            t,
            t_max: sched.t_steps(),
        });
    }
    let alpha = sched.alpha(t)?;
    let abar_prev = sched.alpha_bar(t - 1)?;
    let uniform_step = (1.0 - alpha) / k as f64;
    let uniform_cum = (1.0 - abar_prev) / k as f64;
    let mut theta = Vec::with_capacity(k);
    let mut sum = 0.0;
    for (j, x0p) in x0_dist.probs.iter().enumerate() {
        let step_factor = if j == x_t {
            alpha + uniform_step
        } else {
            uniform_step
        };
        let cum_factor = abar_prev * x0p + uniform_cum;
        let v = step_factor * cum_factor;
        theta.push(v);
        sum += v;
    }
    if sum <= 0.0 {
        return Err(Error::DegenerateNormalization { t });
    }
    for v in &mut theta {
        *v /= sum;
    }
    Ok(Categorical { probs: theta })
}

/// `KL(p || q) = sum_k p_k (ln p_k - ln q_k)` with `0 ln 0 = 0` and q
/// floored at [`LOG_FLOOR`] before the log.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.k() != q.k() {
        return Err(Error::DimMismatch(format!(
            "KL over K={} vs K={}",
            p.k(),
            q.k()
        )));
    }
    let mut kl = 0.0;
    for (pk, qk) in p.probs.iter().zip(&q.probs) {
        if *pk > 0.0 {
            kl += pk * (pk.ln() - qk.max(LOG_FLOOR).ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Diagnostic `KL(q(x_T | x_0) || uniform)`: how far the fully-noised
/// marginal is from the reverse process prior. Near zero for well-formed
/// schedules; not part of the training loss.
pub fn prior_mismatch_kl(x0: usize, k: usize, sched: &NoiseSchedule) -> Result<f64> {
    let q_t = forward_cumulative_probs(x0, k, sched.t_steps(), sched)?;
    let uniform = Categorical {
        probs: vec![1.0 / k as f64; k],
    };
    kl_categorical(&q_t, &uniform)
}

/// One sampled term of the variational-bound loss for a full sequence.
///
/// For `t = 1` this is the reconstruction term
/// `-sum_pos ln x0_hat[pos][y0[pos]]`; for `t >= 2` it is
/// `sum_pos KL(theta_post(y_t, y0) || theta_post(y_t, x0_hat))`.
/// Positions are independent and summed.
pub fn vb_loss_term(
    y0: &[usize],
    y_t: &[usize],
    x0_hat: &[Categorical],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if y0.len() != y_t.len() || y0.len() != x0_hat.len() {
        return Err(Error::DimMismatch(format!(
            "vb_loss_term lengths y0={} y_t={} x0_hat={}",
            y0.len(),
            y_t.len(),
            x0_hat.len()
        )));
    }
    if t == 0 || t > sched.t_steps() {
        return Err(Error::StepOutOfRange {
            t,
            t_max: sched.t_steps(),
        });
    }
    let mut loss = 0.0;
    if t == 1 {
        for (pos, &tok) in y0.iter().enumerate() {
            let k = x0_hat[pos].k();
            check_token(tok, k)?;
            loss -= x0_hat[pos].probs[tok].max(LOG_FLOOR).ln();
        }
    } else {
        for pos in 0..y0.len() {
            let k = x0_hat[pos].k();
            let target = posterior_probs(y_t[pos], &Categorical::one_hot(y0[pos], k)?, t, sched)?;
            let predicted = posterior_probs(y_t[pos], &x0_hat[pos], t, sched)?;
            loss += kl_categorical(&target, &predicted)?;
        }
    }
    Ok(loss)
}
