//! Brute-force oracles and the named check suite behind `cdmt verify`.
//!
//! Everything here recomputes expected values from first principles —
//! explicit enumeration, chain composition, term-by-term bound evaluation,
//! central finite differences — without calling into the implementation
//! paths it validates. The parameterized check functions are public so
//! tests can aim them at deliberately broken fixtures.

use rand::Rng;

use crate::diffusion::{self, Categorical};
use crate::model::{self, DenoiserParams, ModelConfig, TrainItem};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::{metrics, rng};

type CheckResult = std::result::Result<(), String>;

pub struct CheckOutcome {
    pub name: String,
    pub result: CheckResult,
    pub millis: u128,
}

/// Single-step corruption probability, written out directly.
fn oracle_step_prob(to: usize, from: usize, beta: f64, k: usize) -> f64 {
    let uniform = beta / k as f64;
    if to == from {
        (1.0 - beta) + uniform
    } else {
        uniform
    }
}

/// Marginal of the chain after `t` steps, by explicit composition.
fn oracle_chain_marginal(x0: usize, k: usize, t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let mut marginal = vec![0.0; k];
    marginal[x0] = 1.0;
    for step in 1..=t {
        let beta = sched.beta(step).expect("step in range");
        let mut next = vec![0.0; k];
        for (from, mass) in marginal.iter().enumerate() {
            for (to, slot) in next.iter_mut().enumerate() {
                *slot += mass * oracle_step_prob(to, from, beta, k);
            }
        }
        marginal = next;
    }
    marginal
}

/// Posterior over `x_{t-1}` by Bayes enumeration:
/// `q(x_{t-1}=j | x_t, x_0) ∝ q(x_t | x_{t-1}=j) q(x_{t-1}=j | x_0)`.
fn oracle_posterior(x_t: usize, x0: usize, k: usize, t: usize, sched: &NoiseSchedule) -> Option<Vec<f64>> {
    let beta_t = sched.beta(t).expect("step in range");
    let prev_marginal = oracle_chain_marginal(x0, k, t - 1, sched);
    let mut joint: Vec<f64> = (0..k)
        .map(|j| oracle_step_prob(x_t, j, beta_t, k) * prev_marginal[j])
        .collect();
    let total: f64 = joint.iter().sum();
    if total <= 0.0 {
        return None;
    }
    for v in &mut joint {
        *v /= total;
    }
    Some(joint)
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk.ln() - qk.max(1e-12).ln()))
        .sum()
}

/// Eq-by-eq posterior parameter vector for a (possibly soft) `x0`.
fn oracle_theta_post(x_t: usize, x0_dist: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let k = x0_dist.len();
    let alpha = sched.alpha(t).expect("step in range");
    let abar_prev = sched.alpha_bar(t - 1).expect("step in range");
    let mut theta: Vec<f64> = (0..k)
        .map(|j| {
            let step = if j == x_t {
                alpha + (1.0 - alpha) / k as f64
            } else {
                (1.0 - alpha) / k as f64
            };
            let cum = abar_prev * x0_dist[j] + (1.0 - abar_prev) / k as f64;
            step * cum
        })
        .collect();
    let total: f64 = theta.iter().sum();
    for v in &mut theta {
        *v /= total;
    }
    theta
}

/// posterior_probs vs Bayes enumeration, all (x_t, x_0) pairs, all t >= 2.
pub fn check_posterior_bayes(sched: &NoiseSchedule, k: usize) -> CheckResult {
    for t in 2..=sched.t_steps() {
        for x_t in 0..k {
            for x0 in 0..k {
                let expected = oracle_posterior(x_t, x0, k, t, sched).ok_or(format!(
                    "oracle posterior degenerate at K={k} t={t} x_t={x_t} x0={x0}"
                ))?;
                let one_hot = Categorical::one_hot(x0, k).map_err(|e| e.to_string())?;
                let got = diffusion::posterior_probs(x_t, &one_hot, t, sched)
                    .map_err(|e| format!("K={k} t={t} x_t={x_t} x0={x0}: {e}"))?;
                for (j, (a, b)) in got.probs().iter().zip(&expected).enumerate() {
                    if (a - b).abs() > 1e-10 {
                        return Err(format!(
                            "posterior mismatch K={k} t={t} x_t={x_t} x0={x0} j={j}: {a} vs {b}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Closed-form corruption vs explicit chain composition.
pub fn check_chain_marginalization(sched: &NoiseSchedule, k: usize) -> CheckResult {
    for t in 1..=sched.t_steps() {
        for x0 in 0..k {
            let expected = oracle_chain_marginal(x0, k, t, sched);
            let got = diffusion::forward_cumulative_probs(x0, k, t, sched)
                .map_err(|e| format!("K={k} t={t} x0={x0}: {e}"))?;
            for (j, (a, b)) in got.probs().iter().zip(&expected).enumerate() {
                if (a - b).abs() > 1e-12 {
                    return Err(format!(
                        "chain mismatch K={k} t={t} x0={x0} j={j}: {a} vs {b}"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// vb_loss_term vs a term-by-term bound evaluation on random inputs, plus
/// the perfect-predictor zero property at every t.
pub fn check_vb_oracle(seed: u64) -> CheckResult {
    let mut rand_src = rng::derive(seed, "vb-oracle", 0, 0);
    for &(k, l, t_steps) in &[(2usize, 1usize, 2usize), (3, 2, 4), (4, 2, 5)] {
        let sched =
            NoiseSchedule::build(ScheduleKind::Cosine, t_steps).map_err(|e| e.to_string())?;
        for trial in 0..40 {
            let y0: Vec<usize> = (0..l).map(|_| rand_src.random_range(0..k)).collect();
            let y_t: Vec<usize> = (0..l).map(|_| rand_src.random_range(0..k)).collect();
            let x0_hat_raw: Vec<Vec<f64>> = (0..l)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..k).map(|_| rand_src.random::<f64>() + 1e-3).collect();
                    let sum: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= sum;
                    }
                    row
                })
                .collect();
            let x0_hat: Vec<Categorical> = x0_hat_raw
                .iter()
                .map(|row| Categorical::new(row.clone()).expect("normalized"))
                .collect();
            for t in 1..=t_steps {
                let got = diffusion::vb_loss_term(&y0, &y_t, &x0_hat, t, &sched)
                    .map_err(|e| e.to_string())?;
                let expected: f64 = if t == 1 {
                    y0.iter()
                        .enumerate()
                        .map(|(pos, &tok)| -x0_hat_raw[pos][tok].max(1e-12).ln())
                        .sum()
                } else {
                    (0..l)
                        .map(|pos| {
                            let mut true_x0 = vec![0.0; k];
                            true_x0[y0[pos]] = 1.0;
                            let target = oracle_theta_post(y_t[pos], &true_x0, t, &sched);
                            let predicted =
                                oracle_theta_post(y_t[pos], &x0_hat_raw[pos], t, &sched);
                            oracle_kl(&target, &predicted)
                        })
                        .sum()
                };
                if (got - expected).abs() > 1e-10 {
                    return Err(format!(
                        "vb term mismatch K={k} L={l} t={t} trial={trial}: {got} vs {expected}"
                    ));
                }
            }
        }

        // perfect predictor zeroes every term
        let y0: Vec<usize> = (0..l).map(|_| rand_src.random_range(0..k)).collect();
        let y_t: Vec<usize> = (0..l).map(|_| rand_src.random_range(0..k)).collect();
        let perfect: Vec<Categorical> = y0
            .iter()
            .map(|&tok| Categorical::one_hot(tok, k).expect("one hot"))
            .collect();
        for t in 1..=t_steps {
            let loss = diffusion::vb_loss_term(&y0, &y_t, &perfect, t, &sched)
                .map_err(|e| e.to_string())?;
            if loss.abs() > 1e-12 {
                return Err(format!(
                    "perfect predictor should score zero, got {loss} at K={k} t={t}"
                ));
            }
        }
    }
    Ok(())
}

/// Schedule invariants over both kinds.
pub fn check_schedule_invariants() -> CheckResult {
    for (label, kind, t_steps) in [
        ("cosine/T=100", ScheduleKind::Cosine, 100usize),
        ("cosine/T=10", ScheduleKind::Cosine, 10),
        (
            "linear/T=100",
            ScheduleKind::parse("linear", 100).expect("linear parses"),
            100,
        ),
    ] {
        let sched = NoiseSchedule::build(kind, t_steps).map_err(|e| e.to_string())?;
        let mut prev_bar = 1.0;
        for t in 1..=t_steps {
            let beta = sched.beta(t).map_err(|e| e.to_string())?;
            let alpha = sched.alpha(t).map_err(|e| e.to_string())?;
            let bar = sched.alpha_bar(t).map_err(|e| e.to_string())?;
            if !(beta > 0.0 && beta <= 1.0) {
                return Err(format!("{label}: beta[{t}] = {beta} outside (0, 1]"));
            }
            if (alpha - (1.0 - beta)).abs() > 0.0 {
                return Err(format!("{label}: alpha[{t}] != 1 - beta[{t}]"));
            }
            if (bar - prev_bar * alpha).abs() > 1e-12 {
                return Err(format!("{label}: alpha_bar recurrence broken at t={t}"));
            }
            if bar > prev_bar {
                return Err(format!("{label}: alpha_bar increased at t={t}"));
            }
            prev_bar = bar;
        }
        if t_steps >= 100 && prev_bar > 1e-2 {
            return Err(format!("{label}: alpha_bar[T] = {prev_bar} > 1e-2"));
        }
    }
    Ok(())
}

/// Cosine schedule vs an independent high-precision formula evaluation.
pub fn check_cosine_oracle() -> CheckResult {
    let t_steps = 100;
    let sched = NoiseSchedule::build(ScheduleKind::Cosine, t_steps).map_err(|e| e.to_string())?;
    let f: Vec<f64> = (0..=t_steps)
        .map(|t| {
            ((t as f64 / t_steps as f64 + 0.008) / 1.008 * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        })
        .collect();
    let mut bar_prev = 1.0;
    for t in 1..=t_steps {
        let raw_beta = 1.0 - (f[t] / f[0]) / bar_prev;
        let beta = raw_beta.clamp(f64::MIN_POSITIVE, 0.999);
        let bar = bar_prev * (1.0 - beta);
        let got = sched.alpha_bar(t).map_err(|e| e.to_string())?;
        if (got - bar).abs() > 1e-12 {
            return Err(format!("cosine alpha_bar[{t}]: {got} vs oracle {bar}"));
        }
        bar_prev = bar;
    }
    Ok(())
}

fn tensor_class(name: &str) -> &'static str {
    if name.starts_with("embed.") {
        "embedding"
    } else if name.starts_with("time.") {
        "time-projection"
    } else if name.starts_with("out.") {
        "output-head"
    } else if name.contains(".attn.") || name.contains(".self.") || name.contains(".cross.") {
        "attention"
    } else if name.contains(".ffn.") {
        "feed-forward"
    } else {
        "layer-norm"
    }
}

/// Central finite differences against analytic gradients, >= 20 informative
/// coordinates per tensor class on a tiny model.
pub fn check_gradients(seed: u64) -> CheckResult {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        k: 8,
        l: 4,
        t_steps: 5,
    };
    let params = DenoiserParams::init(cfg, seed).map_err(|e| e.to_string())?;
    let sched = NoiseSchedule::build(ScheduleKind::Cosine, cfg.t_steps).map_err(|e| e.to_string())?;
    let mut data_rng = rng::derive(seed, "grad-check-data", 0, 0);
    let mut items = Vec::new();
    for t in [1usize, 3, 5] {
        items.push(TrainItem {
            y0: (0..cfg.l).map(|_| data_rng.random_range(0..cfg.k)).collect(),
            x_src: (0..cfg.l).map(|_| data_rng.random_range(0..cfg.k)).collect(),
            t,
            y_t: (0..cfg.l).map(|_| data_rng.random_range(0..cfg.k)).collect(),
        });
    }
    let (_, grads) = model::loss_and_gradients(&items, &params, &sched).map_err(|e| e.to_string())?;

    let classes = [
        "embedding",
        "time-projection",
        "attention",
        "feed-forward",
        "layer-norm",
        "output-head",
    ];
    let eps = 1e-4;
    for class in classes {
        let members: Vec<&String> = params
            .tensors()
            .map(|(name, _)| name)
            .filter(|name| tensor_class(name) == class)
            .collect();
        if members.is_empty() {
            return Err(format!("no tensors in class {class}"));
        }
        let mut coord_rng = rng::derive(seed, &format!("grad-check:{class}"), 0, 0);
        let mut informative = 0;
        let mut attempts = 0;
        while informative < 20 {
            attempts += 1;
            if attempts > 400 {
                return Err(format!(
                    "class {class}: only {informative} informative coordinates in {attempts} tries"
                ));
            }
            let name = members[coord_rng.random_range(0..members.len())];
            let tensor = params.get(name);
            let r = coord_rng.random_range(0..tensor.nrows());
            let c = coord_rng.random_range(0..tensor.ncols());
            let original = tensor[[r, c]];
            let mut perturbed = params.clone();
            perturbed.get_mut(name)[[r, c]] = original + eps;
            let up = model::batch_loss(&items, &perturbed, &sched).map_err(|e| e.to_string())?;
            perturbed.get_mut(name)[[r, c]] = original - eps;
            let down = model::batch_loss(&items, &perturbed, &sched).map_err(|e| e.to_string())?;
            let fd = (up - down) / (2.0 * eps);
            let analytic = grads[name][[r, c]];
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = ((analytic - fd) / denom).abs();
            if rel >= 1e-3 {
                return Err(format!(
                    "{name}[{r},{c}] ({class}): analytic {analytic} vs fd {fd}, rel {rel:.2e}"
                ));
            }
            informative += 1;
        }
    }
    Ok(())
}

/// Golden metric values: exact perfect scores, the reported sentence score
/// within its tolerance, and hand-derived TER/chrF cases exact to 1e-6.
pub fn check_metrics_golden() -> CheckResult {
    let text = vec!["the quick brown fox jumps", "over the lazy dog today"];
    let bleu = metrics::corpus_bleu(&text, &text).map_err(|e| e.to_string())?;
    if bleu != 100.0 {
        return Err(format!("identical corpus BLEU = {bleu}, expected exactly 100"));
    }
    let ter = metrics::corpus_ter(&text, &text).map_err(|e| e.to_string())?;
    if ter != 0.0 {
        return Err(format!("identical corpus TER = {ter}, expected exactly 0"));
    }
    let chrf = metrics::corpus_chrf(&text, &text).map_err(|e| e.to_string())?;
    if chrf != 100.0 {
        return Err(format!("identical corpus chrF = {chrf}, expected exactly 100"));
    }

    let score = metrics::sentence_bleu(
        "i know he need a guarantee for four years.",
        "i know he would like a four - year guarantee.",
    )
    .map_err(|e| e.to_string())?;
    if (score - 17.47).abs() > 1.0 {
        return Err(format!("sentence BLEU sample = {score}, outside 17.47 +/- 1.0"));
    }

    let cases = [
        ("a b c", "a b c", 0.0),
        ("a b c d", "a b c", 100.0 / 3.0),
        ("c d a b", "a b c d", 25.0),
    ];
    for (hyp, reference, expected) in cases {
        let got = metrics::ter(hyp, reference).map_err(|e| e.to_string())?;
        if (got - expected).abs() > 1e-6 {
            return Err(format!("TER({hyp:?}, {reference:?}) = {got}, expected {expected}"));
        }
    }

    let got = metrics::chrf_with("abd", "abc", 2, 2.0).map_err(|e| e.to_string())?;
    let expected = 100.0 * (2.0 / 3.0 + 0.5) / 2.0;
    if (got - expected).abs() > 1e-6 {
        return Err(format!("chrF(abd, abc; n<=2) = {got}, expected {expected}"));
    }
    Ok(())
}

fn posterior_suite() -> CheckResult {
    for &k in &[2usize, 3, 4, 8] {
        for &t_steps in &[2usize, 5, 10] {
            let sched = NoiseSchedule::build(ScheduleKind::Cosine, t_steps)
                .map_err(|e| e.to_string())?;
            check_posterior_bayes(&sched, k)?;
        }
    }
    Ok(())
}

fn chain_suite() -> CheckResult {
    for &k in &[2usize, 3, 4, 8] {
        for &t_steps in &[2usize, 5, 10] {
            let sched = NoiseSchedule::build(ScheduleKind::Cosine, t_steps)
                .map_err(|e| e.to_string())?;
            check_chain_marginalization(&sched, k)?;
        }
    }
    Ok(())
}

/// Run the named check suite, optionally filtered by substring.
pub fn run_checks(filter: Option<&str>) -> Vec<CheckOutcome> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> CheckResult>)> = vec![
        ("schedule/invariants", Box::new(check_schedule_invariants)),
        ("schedule/cosine-oracle", Box::new(check_cosine_oracle)),
        ("diffusion/posterior-bayes", Box::new(posterior_suite)),
        ("diffusion/chain-marginalization", Box::new(chain_suite)),
        ("diffusion/vb-term-oracle", Box::new(|| check_vb_oracle(2024))),
        ("model/gradient-check", Box::new(|| check_gradients(7))),
        ("metrics/golden", Box::new(check_metrics_golden)),
    ];
    checks
        .into_iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, run)| {
            let start = std::time::Instant::now();
            let result = run();
            CheckOutcome {
                name: name.to_string(),
                result,
                millis: start.elapsed().as_millis(),
            }
        })
        .collect()
}
